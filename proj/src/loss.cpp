#include "fisa/loss.hpp"

#include <cmath>

#include "fisa/kernels.hpp"
#include "fisa/matching.hpp"

namespace fisa {

namespace {

std::vector<double> gt_pixel_target(const Segment& seg) {
    std::vector<uint8_t> px = seg.mask.decode();
    std::vector<double> t(px.size());
    for (size_t i = 0; i < px.size(); ++i) t[i] = px[i] ? 1.0 : 0.0;
    return t;
}

double dice_loss_val(const double* p, const std::vector<double>& g) {
    double inter = 0, ps = 0, gs = 0;
    for (size_t j = 0; j < g.size(); ++j) {
        inter += p[j] * g[j];
        ps += p[j];
        gs += g[j];
    }
    return 1.0 - (2.0 * inter + 1.0) / (ps + gs + 1.0);
}

double bce_loss_val(const double* p, const std::vector<double>& g) {
    double s = 0;
    for (size_t j = 0; j < g.size(); ++j)
        s -= g[j] * std::log(p[j]) + (1.0 - g[j]) * std::log(1.0 - p[j]);
    return s / static_cast<double>(g.size());
}

}  // namespace

Tensor build_match_cost(const ad::Tape& tape, const ForwardResult& fwd,
                        const SegmentationSample& sample, const LossWeights& w) {
    const Tensor& logits = tape.val(fwd.logits);
    const Tensor& masks = tape.val(fwd.adapted_rows);
    const int64_t m = logits.rows();
    const int64_t g = static_cast<int64_t>(sample.segments.size());
    if (masks.cols() != sample.height * sample.width)
        throw ShapeError("adapted mask size does not match sample");
    Tensor probs = kernels::softmax_rows(logits);
    Tensor cost({m, g});
    for (int64_t j = 0; j < g; ++j) {
        const Segment& seg = sample.segments[j];
        std::vector<double> tgt = gt_pixel_target(seg);
        for (int64_t i = 0; i < m; ++i) {
            const double p_cls =
                std::max(probs.at(i, seg.class_id), 1e-300);
            const double* prow = &masks.v[i * masks.cols()];
            cost.at(i, j) = w.ce * -std::log(p_cls) + w.dice * dice_loss_val(prow, tgt) +
                            w.bce * bce_loss_val(prow, tgt);
        }
    }
    return cost;
}

LossBreakdown compute_sample_loss(ad::Tape& tape, const ForwardResult& fwd,
                                  const SegmentationSample& sample, const LossWeights& w,
                                  const std::vector<int64_t>* fixed_assignment) {
    const Tensor& logits = tape.val(fwd.logits);
    const int64_t m = logits.rows();
    const int64_t num_classes = logits.cols() - 1;  // last column is no-object
    const int64_t g = static_cast<int64_t>(sample.segments.size());
    for (const Segment& seg : sample.segments)
        if (seg.class_id < 0 || seg.class_id >= num_classes)
            throw ConfigError("segment class id outside vocabulary");

    LossBreakdown out;
    if (fixed_assignment) {
        if (static_cast<int64_t>(fixed_assignment->size()) != m)
            throw ShapeError("fixed assignment length mismatch");
        out.assignment = *fixed_assignment;
    } else {
        out.assignment = hungarian_match(build_match_cost(tape, fwd, sample, w)).assignment;
    }

    std::vector<int64_t> targets(m, num_classes);
    std::vector<double> weights(m, w.no_object);
    std::vector<std::pair<ad::VarId, double>> dice_terms, bce_terms;
    int64_t matched = 0;
    for (int64_t i = 0; i < m; ++i) {
        const int64_t j = out.assignment[i];
        if (j < 0) continue;
        if (j >= g) throw ConfigError("assignment references missing segment");
        targets[i] = sample.segments[j].class_id;
        weights[i] = 1.0;
        ++matched;
    }
    ad::VarId ce = tape.weighted_nll_rows(fwd.logits, targets, weights);
    ad::VarId dice = -1, bce = -1;
    if (matched > 0) {
        const double inv = 1.0 / static_cast<double>(matched);
        for (int64_t i = 0; i < m; ++i) {
            const int64_t j = out.assignment[i];
            if (j < 0) continue;
            std::vector<double> tgt = gt_pixel_target(sample.segments[j]);
            dice_terms.push_back({tape.dice_row(fwd.adapted_rows, i, tgt, 1.0), inv});
            bce_terms.push_back({tape.bce_row(fwd.adapted_rows, i, tgt), inv});
        }
        dice = tape.linear_comb(dice_terms);
        bce = tape.linear_comb(bce_terms);
    } else {
        dice = tape.constant(Tensor({1}, {0.0}));
        bce = tape.constant(Tensor({1}, {0.0}));
    }
    out.node = tape.linear_comb({{ce, w.ce}, {dice, w.dice}, {bce, w.bce}});
    out.ce = tape.val(ce).v[0];
    out.dice = tape.val(dice).v[0];
    out.bce = tape.val(bce).v[0];
    out.total = tape.val(out.node).v[0];
    if (!std::isfinite(out.total)) {
        const char* term = !std::isfinite(out.ce)     ? "cross-entropy"
                           : !std::isfinite(out.dice) ? "dice"
                                                      : "bce";
        throw NumericError(std::string("non-finite loss term: ") + term);
    }
    return out;
}

}  // namespace fisa
