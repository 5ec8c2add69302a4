#include "fisa/seve.hpp"

#include <cmath>

#include "fisa/kernels.hpp"
#include "fisa/rng.hpp"

namespace fisa {

namespace {

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    Tensor y = kernels::matmul(x, w);
    const int64_t m = y.rows(), c = y.cols();
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < c; ++j) y.v[i * c + j] += b.v[j];
    return y;
}

void check_finite(const Tensor& t, const char* what) {
    for (double x : t.v)
        if (!std::isfinite(x)) throw NumericError(std::string("non-finite value in ") + what);
}

}  // namespace

AttentionBias build_mask_attention_bias(const PatchCoverage& coverage) {
    const int64_t m = coverage.num_masks(), n = coverage.num_patches;
    AttentionBias out;
    out.bias = Tensor({m, n});
    for (int64_t i = 0; i < m; ++i) {
        if (static_cast<int64_t>(coverage.covered[i].size()) != n)
            throw ShapeError("coverage row width mismatch");
        bool any = false;
        for (int64_t j = 0; j < n; ++j) {
            bool c = coverage.covered[i][j];
            out.bias.at(i, j) = c ? 0.0 : kNegSentinel;
            any = any || c;
        }
        if (!any) {
            // fall back to full-image coverage; dropping the proposal would
            // shift proposal indices mid-pipeline
            for (int64_t j = 0; j < n; ++j) out.bias.at(i, j) = 0.0;
            out.degenerate_rows.push_back(i);
        }
    }
    return out;
}

Tensor semantic_information_extraction(const Tensor& mask_tokens, const Tensor& tgt_tokens,
                                       const ProjectionWeights& g) {
    if (tgt_tokens.rows() == 0) throw ConfigError("empty target vocabulary");
    if (mask_tokens.cols() != tgt_tokens.cols())
        throw ShapeError("mask/target channel mismatch");
    check_finite(mask_tokens, "mask tokens");
    check_finite(tgt_tokens, "target tokens");
    const int64_t c = mask_tokens.cols();
    Tensor q = linear(mask_tokens, g.w_q, g.b_q);
    Tensor k = linear(tgt_tokens, g.w_k, g.b_k);
    Tensor v = linear(tgt_tokens, g.w_v, g.b_v);
    Tensor logits = kernels::matmul(q, k, false, true);
    const double scale = 1.0 / std::sqrt(static_cast<double>(c));
    for (auto& x : logits.v) x *= scale;
    return kernels::matmul(kernels::softmax_rows(logits), v);
}

Tensor semantic_guided_visual_extraction(const Tensor& enriched_mask_tokens,
                                         const Tensor& img_tokens, const Tensor& bias,
                                         const ProjectionWeights& f) {
    const int64_t m = enriched_mask_tokens.rows(), n = img_tokens.rows();
    if (bias.rows() != m || bias.cols() != n)
        throw ShapeError("bias shape " + shape_str(bias.shape) + " inconsistent with m=" +
                         std::to_string(m) + " n=" + std::to_string(n));
    const int64_t c = enriched_mask_tokens.cols();
    Tensor q = linear(enriched_mask_tokens, f.w_q, f.b_q);
    Tensor k = linear(img_tokens, f.w_k, f.b_k);
    Tensor v = linear(img_tokens, f.w_v, f.b_v);
    Tensor logits = kernels::matmul(q, k, false, true);
    const double scale = 1.0 / std::sqrt(static_cast<double>(c));
    for (int64_t i = 0; i < m * n; ++i) logits.v[i] = logits.v[i] * scale + bias.v[i];
    Tensor out = kernels::matmul(kernels::softmax_rows(logits), v);
    check_finite(out, "attention output");
    return out;
}

DistributionAdapterParams DistributionAdapterParams::init(int64_t hidden, Rng& rng) {
    DistributionAdapterParams p;
    p.conv1_w = Tensor({hidden, 1, 3, 3});
    for (auto& x : p.conv1_w.v) x = rng.normal(0.0, 0.2);
    p.conv1_b = Tensor({hidden});
    p.conv2_w = Tensor({1, hidden, 3, 3});
    p.conv2_b = Tensor({1});
    return p;
}

Tensor apply_distribution_adapter(const Tensor& soft_masks,
                                  const DistributionAdapterParams& params) {
    if (soft_masks.shape.size() != 3)
        throw ShapeError("adapter expects [m,H,W], got " + shape_str(soft_masks.shape));
    const int64_t m = soft_masks.shape[0], h = soft_masks.shape[1], w = soft_masks.shape[2];
    Tensor x({m, 1, h, w});
    x.v = soft_masks.v;
    Tensor hdn = kernels::conv3x3(x, params.conv1_w, params.conv1_b);
    for (auto& t : hdn.v) t = t > 0 ? t : 0.0;
    Tensor d = kernels::conv3x3(hdn, params.conv2_w, params.conv2_b);
    Tensor out = soft_masks;
    for (int64_t i = 0; i < out.numel(); ++i) out.v[i] += d.v[i];
    return out;
}

PatchCoverage coverage_from_soft_masks(const Tensor& soft_masks, int64_t patch_size) {
    const int64_t m = soft_masks.shape[0], h = soft_masks.shape[1], w = soft_masks.shape[2];
    PatchCoverage cov;
    cov.num_patches = (h / patch_size) * (w / patch_size);
    for (int64_t i = 0; i < m; ++i) {
        std::vector<uint8_t> px(static_cast<size_t>(h * w));
        for (int64_t p = 0; p < h * w; ++p) px[p] = soft_masks.v[i * h * w + p] >= 0.5;
        cov.covered.push_back(rasterize_pixels_to_patches(px, h, w, patch_size));
    }
    return cov;
}

SeveOutput seve_forward(const Tensor& mask_tokens, const Tensor& img_tokens,
                        const Tensor& tgt_tokens, const Tensor& soft_masks,
                        const ProjectionWeights& f, const ProjectionWeights& g,
                        const DistributionAdapterParams& adapter, bool adapter_enabled,
                        int64_t patch_size) {
    SeveOutput out;
    out.adapted_soft = adapter_enabled ? apply_distribution_adapter(soft_masks, adapter)
                                       : soft_masks;
    out.bias = build_mask_attention_bias(coverage_from_soft_masks(out.adapted_soft, patch_size));
    Tensor enriched = semantic_information_extraction(mask_tokens, tgt_tokens, g);
    out.mask_tokens = semantic_guided_visual_extraction(enriched, img_tokens, out.bias.bias, f);
    return out;
}

}  // namespace fisa
