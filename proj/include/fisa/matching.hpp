#pragma once

#include <vector>

#include "fisa/tensor.hpp"

namespace fisa {

struct MatchResult {
    // assignment[i] is the ground-truth column matched to proposal row i,
    // or -1 when rows outnumber columns and row i is left unmatched
    std::vector<int64_t> assignment;
    double total_cost = 0.0;
};

// Minimum-cost assignment on an arbitrary rectangular cost matrix.
// Ties between equal-cost assignments break toward lexicographically
// smallest assignment vector.
MatchResult hungarian_match(const Tensor& cost);

}  // namespace fisa
