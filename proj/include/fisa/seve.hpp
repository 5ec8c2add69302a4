#pragma once

#include <vector>

#include "fisa/data.hpp"
#include "fisa/tensor.hpp"

namespace fisa {

/// Large negative logit standing in for -inf; suppresses masked attention
/// weights below 1e-12 without producing NaN.
inline constexpr double kNegSentinel = -1e9;

struct ProjectionWeights {
    Tensor w_q, w_k, w_v;  // each C x C
    Tensor b_q, b_k, b_v;  // each C

    static ProjectionWeights zeros(int64_t c) {
        ProjectionWeights p;
        p.w_q = p.w_k = p.w_v = Tensor({c, c});
        p.b_q = p.b_k = p.b_v = Tensor({c});
        return p;
    }
};

struct AttentionBias {
    Tensor bias;                          // m x n, entries 0 or kNegSentinel
    std::vector<int64_t> degenerate_rows;  // masks that covered zero patches
};

/// Eq.-5 style bias: 0 where the mask covers the patch, kNegSentinel
/// elsewhere. A zero-coverage mask falls back to full-image coverage and is
/// reported in degenerate_rows.
AttentionBias build_mask_attention_bias(const PatchCoverage& coverage);

/// Stage 1: mask tokens cross-attend target class tokens under projections g.
Tensor semantic_information_extraction(const Tensor& mask_tokens, const Tensor& tgt_tokens,
                                       const ProjectionWeights& g);

/// Stage 2: enriched mask tokens cross-attend image tokens under the mask
/// bias and projections f.
Tensor semantic_guided_visual_extraction(const Tensor& enriched_mask_tokens,
                                         const Tensor& img_tokens, const Tensor& bias,
                                         const ProjectionWeights& f);

struct DistributionAdapterParams {
    Tensor conv1_w;  // h x 1 x 3 x 3
    Tensor conv1_b;  // h
    Tensor conv2_w;  // 1 x h x 3 x 3
    Tensor conv2_b;  // 1

    /// conv2 zero-initialized, so the residual adapter starts as the identity.
    static DistributionAdapterParams init(int64_t hidden, class Rng& rng);
};

/// Residual two-conv refiner: out = x + conv2(relu(conv1(x))).
/// soft_masks: [m, H, W].
Tensor apply_distribution_adapter(const Tensor& soft_masks,
                                  const DistributionAdapterParams& params);

struct SeveOutput {
    Tensor mask_tokens;   // m x C
    Tensor adapted_soft;  // m x H x W (equals input when adapter disabled)
    AttentionBias bias;
};

/// Full SEVE composition: adapter (optional), coverage from thresholded
/// masks, stage 1 then stage 2.
SeveOutput seve_forward(const Tensor& mask_tokens, const Tensor& img_tokens,
                        const Tensor& tgt_tokens, const Tensor& soft_masks,
                        const ProjectionWeights& f, const ProjectionWeights& g,
                        const DistributionAdapterParams& adapter, bool adapter_enabled,
                        int64_t patch_size);

/// Coverage of thresholded (>= 0.5) soft masks over the patch grid.
PatchCoverage coverage_from_soft_masks(const Tensor& soft_masks, int64_t patch_size);

}  // namespace fisa
