#pragma once

#include <vector>

#include "fisa/generator.hpp"
#include "fisa/model.hpp"

namespace fisa {

enum class OracleMode { kNone, kOracleClassifier, kOracleGenerator };

OracleMode oracle_mode_from_string(const std::string& s);
std::string oracle_mode_to_string(OracleMode m);

struct PredictedSegment {
    int64_t segment_id = 0;
    int64_t class_id = 0;
    BinaryMask mask;
    double confidence = 0.0;
};

struct PanopticPrediction {
    std::vector<PredictedSegment> segments;  // pairwise disjoint
    int64_t height = 0;
    int64_t width = 0;

    // per-pixel class map, -1 for unassigned pixels
    std::vector<int64_t> semantic_map() const;
};

struct PqClassStats {
    double iou_sum = 0.0;
    int64_t tp = 0, fp = 0, fn = 0;
    bool defined() const { return tp + fp + fn > 0; }
    double pq() const;
    double sq() const;
    double rq() const;
};

struct PqStats {
    std::vector<PqClassStats> per_class;
    double pq = 0.0, sq = 0.0, rq = 0.0;  // means over defined classes
};

struct MiouStats {
    std::vector<double> per_class_iou;  // -1 when class absent from both maps
    double miou = 0.0;
};

// IoU-per-class over per-pixel class maps; -1 entries are void and excluded.
MiouStats compute_miou(const std::vector<int64_t>& pred_semantic,
                       const std::vector<int64_t>& gt_semantic, int64_t num_classes);

// Kirillov-style panoptic quality: TP pairs share a class with IoU > 0.5,
// PQ = sum IoU / (TP + FP/2 + FN/2) per class, averaged where defined.
PqStats compute_pq(const PanopticPrediction& pred, const std::vector<Segment>& gt,
                   int64_t num_classes);

// Labels and paints the proposal set into a disjoint panoptic prediction.
// Overlaps resolve in descending confidence order (oracle modes use IoU as
// the confidence); earlier paint wins.
PanopticPrediction predict_panoptic(const Model& model, const SegmentationSample& sample,
                                    const MaskProposalSet& proposals,
                                    const TextEncoding& text, const LabelVocabulary& vocab,
                                    OracleMode mode);

struct EvalResult {
    double pq = 0.0, sq = 0.0, rq = 0.0, miou = 0.0;
    std::vector<PqClassStats> per_class_pq;  // pooled over the dataset
    std::vector<double> per_class_iou;
    int64_t sample_count = 0;
};

// When precomputed is given, proposals come from it (keyed by sample id,
// missing entry is an error) instead of the corruption pipeline.
EvalResult evaluate_dataset(const Model& model, const std::vector<SegmentationSample>& samples,
                            const CorruptionConfig& corruption, const LabelVocabulary& vocab,
                            OracleMode mode,
                            const std::map<std::string, MaskProposalSet>* precomputed = nullptr);

}  // namespace fisa
