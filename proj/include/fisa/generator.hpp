#pragma once

#include <map>
#include <string>
#include <vector>

#include "fisa/data.hpp"
#include "fisa/tensor.hpp"

namespace fisa {

enum class ProposalSource { kSyntheticCorrupted, kPrecomputed, kOracleGt };

struct MaskProposal {
    Tensor soft;       // H x W reals in [0,1]
    BinaryMask binary;  // soft thresholded at 0.5
};

struct MaskProposalSet {
    std::vector<MaskProposal> proposals;
    ProposalSource source = ProposalSource::kSyntheticCorrupted;
};

struct CorruptionConfig {
    int64_t boundary_jitter_px = 0;
    double drop_prob = 0.0;
    double split_prob = 0.0;
    int64_t spurious_count = 0;
    uint64_t seed = 0;
    int64_t max_proposals = 32;

    void validate() const;
};

/// Frozen proposal source: deterministic corruption of the sample's ground
/// truth. Zero corruption reproduces the GT masks exactly (oracle behavior).
MaskProposalSet generate_proposals(const SegmentationSample& sample,
                                   const CorruptionConfig& config);

/// Oracle generator: GT masks passed through unchanged.
MaskProposalSet oracle_proposals(const SegmentationSample& sample);

void save_proposals(const std::map<std::string, MaskProposalSet>& by_sample,
                    const std::string& path);
std::map<std::string, MaskProposalSet> load_precomputed_proposals(
    const std::string& path, const DatasetManifest& manifest);

/// Fills in mask dimensions and soft masks of a loaded precomputed set from
/// the sample it belongs to; validates RLE against the sample size.
void finalize_precomputed(MaskProposalSet& set, const SegmentationSample& sample);

/// Morphological helpers (4-neighborhood, `iterations` passes).
std::vector<uint8_t> dilate(const std::vector<uint8_t>& px, int64_t h, int64_t w,
                            int64_t iterations);
std::vector<uint8_t> erode(const std::vector<uint8_t>& px, int64_t h, int64_t w,
                           int64_t iterations);

Tensor soft_from_binary(const std::vector<uint8_t>& px, int64_t h, int64_t w);

}  // namespace fisa
