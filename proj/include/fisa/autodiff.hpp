#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "fisa/tensor.hpp"

namespace fisa::ad {

using VarId = int;

/// Reverse-mode tape over Tensor-valued nodes. One tape per forward pass;
/// parameters are registered by name so their gradients can be harvested
/// after backward().
class Tape {
public:
    VarId constant(Tensor t);
    VarId param(const std::string& name, const Tensor& t);

    const Tensor& val(VarId id) const { return nodes_[id].val; }
    const Tensor& grad(VarId id) const { return nodes_[id].grad; }
    const std::map<std::string, VarId>& params() const { return params_; }

    VarId add(VarId a, VarId b);
    VarId sub(VarId a, VarId b);
    VarId scale(VarId a, double c);
    /// a: [m,C], b: [C] or [1,C], broadcast-added to every row.
    VarId add_rowvec(VarId a, VarId b);
    VarId matmul(VarId a, VarId b, bool trans_a = false, bool trans_b = false);
    VarId softmax_rows(VarId a);
    /// softmax(a + bias) with a constant bias matrix (attention masking).
    VarId softmax_rows_bias(VarId a, const Tensor& bias);
    VarId layernorm_rows(VarId x, VarId w, VarId b);
    VarId relu(VarId a);
    VarId gelu(VarId a);
    VarId clamp(VarId a, double lo, double hi);
    VarId slice_cols(VarId a, int64_t c0, int64_t c1);
    VarId concat_cols(const std::vector<VarId>& parts);
    VarId concat_rows(const std::vector<VarId>& parts);
    VarId mean_rows(VarId a);  // [m,C] -> [1,C]
    /// row i of the result is the mean of a's rows listed in sets[i].
    VarId mean_rows_subsets(VarId a, const std::vector<std::vector<int64_t>>& sets);
    VarId l2_normalize_rows(VarId a);
    VarId append_zero_col(VarId a);
    VarId conv3x3(VarId x, VarId w, VarId b);
    VarId reshape(VarId a, std::vector<int64_t> shape);
    VarId gather_rows(VarId a, const std::vector<int64_t>& rows);

    // scalar-valued (shape [1]) loss heads
    /// Weighted mean of -log softmax(logits)[i, target[i]].
    VarId weighted_nll_rows(VarId logits, const std::vector<int64_t>& targets,
                            const std::vector<double>& weights);
    /// Soft dice loss of row `row` of p against a constant target.
    VarId dice_row(VarId p, int64_t row, const std::vector<double>& target, double smooth);
    /// Mean binary cross entropy of row `row` of p against a constant target.
    VarId bce_row(VarId p, int64_t row, const std::vector<double>& target);
    /// Weighted sum of scalar nodes.
    VarId linear_comb(const std::vector<std::pair<VarId, double>>& terms);

    /// Seeds d(loss)/d(loss)=1 and propagates to all reachable nodes.
    void backward(VarId loss);

private:
    struct Node {
        Tensor val;
        Tensor grad;
        std::function<void(Tape&)> back;  // null for leaves
    };
    VarId push(Tensor val, std::function<void(Tape&)> back = nullptr);
    Tensor& g(VarId id) { return nodes_[id].grad; }

    std::vector<Node> nodes_;
    std::map<std::string, VarId> params_;
};

}  // namespace fisa::ad
