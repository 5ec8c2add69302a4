#pragma once

#include <string>
#include <vector>

#include "fisa/tensor.hpp"

namespace fisa {

/// Run-length encoded binary mask. Row-major, runs alternate starting with
/// the count of zeros, so the first element may be 0.
struct BinaryMask {
    int64_t height = 0;
    int64_t width = 0;
    std::vector<int64_t> rle;

    static BinaryMask encode(const std::vector<uint8_t>& pixels, int64_t h, int64_t w);
    std::vector<uint8_t> decode() const;
    int64_t area() const;
    void validate() const;  // throws FormatError on rle sum mismatch
};

double mask_iou(const std::vector<uint8_t>& a, const std::vector<uint8_t>& b);
double mask_iou(const BinaryMask& a, const BinaryMask& b);

struct Segment {
    int64_t segment_id = 0;
    int64_t class_id = 0;
    BinaryMask mask;
};

struct SegmentationSample {
    std::string sample_id;
    int64_t height = 0;
    int64_t width = 0;
    std::vector<double> image;  // H*W*3 row-major, values in [0,1]
    std::vector<Segment> segments;
};

struct LabelVocabulary {
    std::vector<std::string> class_names;
    std::vector<bool> is_thing;

    LabelVocabulary() = default;
    LabelVocabulary(std::vector<std::string> names, std::vector<bool> thing);
    int64_t size() const { return static_cast<int64_t>(class_names.size()); }

    /// The fixed vocabulary used by the synthetic generator: class 0 is the
    /// background stuff class, classes 1..K-1 are thing classes.
    static LabelVocabulary synthetic(int64_t num_classes);
};

/// Boolean mask-over-patch-grid coverage, row-major patch order.
struct PatchCoverage {
    int64_t num_patches = 0;               // n
    std::vector<std::vector<bool>> covered;  // m rows of n

    int64_t num_masks() const { return static_cast<int64_t>(covered.size()); }
};

std::vector<bool> rasterize_mask_to_patches(const BinaryMask& mask, int64_t patch_size);
std::vector<bool> rasterize_pixels_to_patches(const std::vector<uint8_t>& pixels, int64_t h,
                                              int64_t w, int64_t patch_size);

struct DatasetManifest {
    std::string root;
    std::vector<std::string> sample_files;
    int64_t num_classes = 0;
    int64_t patch_size = 0;
    std::string format_version = "fisa-lab/1";
};

struct SynthConfig {
    int64_t num_samples = 64;
    int64_t image_size = 32;
    int64_t num_classes = 5;
    int64_t shapes_per_image = 3;
    int64_t patch_size = 4;
    uint64_t seed = 0;
};

/// Writes manifest.json plus one JSON file per sample under out_dir.
DatasetManifest synthesize_dataset(const SynthConfig& cfg, const std::string& out_dir);

/// Generates samples in memory (same stream as synthesize_dataset).
std::vector<SegmentationSample> synthesize_samples(const SynthConfig& cfg);

struct Dataset {
    DatasetManifest manifest;
    std::vector<SegmentationSample> samples;
    LabelVocabulary vocab;
};

Dataset load_dataset(const std::string& manifest_path);

void save_sample_json(const SegmentationSample& s, const std::string& path);
SegmentationSample load_sample_json(const std::string& path);

/// 4-connected components of a pixel set; returns one pixel mask per component.
std::vector<std::vector<uint8_t>> connected_components(const std::vector<uint8_t>& pixels,
                                                       int64_t h, int64_t w);

}  // namespace fisa
