#pragma once

#include <functional>
#include <set>
#include <string>
#include <vector>

#include "fisa/generator.hpp"
#include "fisa/loss.hpp"
#include "fisa/model.hpp"

namespace fisa {

enum class TrainMode { kFrozen, kSeveOnly, kSimo, kFull, kSimoLang, kSimoGen };

TrainMode train_mode_from_string(const std::string& s);
std::string train_mode_to_string(TrainMode m);

struct ParameterPartition {
    std::set<std::string> trainable;
    std::set<std::string> frozen;
};

// Splits the model's named parameters per optimization mode. kSimo trains
// the g-projections, the adapter convolutions, every visual-block query
// projection, and the mask-token init embedding; everything else stays
// frozen.
ParameterPartition partition_parameters(const Model& model, TrainMode mode,
                                        const std::vector<std::string>& extra = {});

// Sample-complexity lower bound m >= log(|H|/delta) / epsilon for a finite
// hypothesis class, with |H| = 2^bits of the trainable scalar count.
double pac_min_samples(int64_t trainable_scalars, double epsilon, double delta,
                       double bits_per_scalar = 32.0);

struct TrainConfig {
    int64_t iterations = 500;
    int64_t batch_size = 4;
    double lr = 3e-3;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    uint64_t seed = 0;
    LossWeights loss;
    double holdout_fraction = 0.25;
    int64_t log_every = 10;

    void validate() const;
};

struct IterationStats {
    int64_t iteration = 0;
    double total = 0, ce = 0, dice = 0, bce = 0;
    double grad_norm = 0;
};

struct TrainResult {
    std::vector<IterationStats> log;
    double final_holdout_accuracy = 0.0;
    int64_t holdout_count = 0;
};

using IterationCallback = std::function<void(const IterationStats&)>;

// AdamW with decoupled weight decay over the trainable partition only.
// Proposals come from the corruption pipeline per sample; TrainConfig.seed
// drives batch sampling. Deterministic for fixed inputs.
TrainResult train_model(Model& model, const std::vector<SegmentationSample>& train_set,
                        const std::vector<SegmentationSample>& holdout_set,
                        const CorruptionConfig& corruption, TrainMode mode,
                        const TrainConfig& cfg, const LabelVocabulary& vocab,
                        const IterationCallback& on_iter = nullptr);

// Fraction of ground-truth segments whose best-IoU proposal is classified
// into the segment's class. Used for the held-out accuracy statistic.
double mask_classification_accuracy(const Model& model,
                                    const std::vector<SegmentationSample>& samples,
                                    const CorruptionConfig& corruption,
                                    const LabelVocabulary& vocab);

}  // namespace fisa
