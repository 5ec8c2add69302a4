#pragma once

#include <vector>

#include "fisa/autodiff.hpp"
#include "fisa/data.hpp"
#include "fisa/model.hpp"

namespace fisa {

struct LossWeights {
    double ce = 2.0;
    double dice = 5.0;
    double bce = 5.0;
    double no_object = 0.1;  // CE weight for proposals left unmatched
};

struct LossBreakdown {
    double total = 0.0;
    double ce = 0.0;
    double dice = 0.0;
    double bce = 0.0;
    // assignment[i] is the ground-truth segment index matched to proposal i,
    // or -1 for a no-object proposal
    std::vector<int64_t> assignment;
    ad::VarId node = -1;  // scalar total-loss node on the tape
};

// Builds the bipartite matching cost between proposals and ground-truth
// segments from detached forward values: per pair, ce*(-log p_class) +
// dice*Dice + bce*BCE over the adapted soft masks.
Tensor build_match_cost(const ad::Tape& tape, const ForwardResult& fwd,
                        const SegmentationSample& sample, const LossWeights& w);

// Matches predictions to ground truth (Hungarian, or a caller-fixed
// assignment) and assembles the weighted loss on the tape. CE is a weighted
// mean over all proposals; dice and BCE average over matched pairs.
LossBreakdown compute_sample_loss(ad::Tape& tape, const ForwardResult& fwd,
                                  const SegmentationSample& sample, const LossWeights& w,
                                  const std::vector<int64_t>* fixed_assignment = nullptr);

}  // namespace fisa
