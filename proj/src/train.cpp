#include "fisa/train.hpp"

#include <algorithm>
#include <cmath>

#include "fisa/rng.hpp"

namespace fisa {

TrainMode train_mode_from_string(const std::string& s) {
    if (s == "frozen") return TrainMode::kFrozen;
    if (s == "seve") return TrainMode::kSeveOnly;
    if (s == "simo") return TrainMode::kSimo;
    if (s == "full") return TrainMode::kFull;
    if (s == "simo+lang") return TrainMode::kSimoLang;
    if (s == "simo+gen") return TrainMode::kSimoGen;
    throw ConfigError("unknown train mode: " + s);
}

std::string train_mode_to_string(TrainMode m) {
    switch (m) {
        case TrainMode::kFrozen: return "frozen";
        case TrainMode::kSeveOnly: return "seve";
        case TrainMode::kSimo: return "simo";
        case TrainMode::kFull: return "full";
        case TrainMode::kSimoLang: return "simo+lang";
        case TrainMode::kSimoGen: return "simo+gen";
    }
    throw ConfigError("unknown train mode");
}

namespace {

bool starts_with(const std::string& s, const std::string& p) {
    return s.rfind(p, 0) == 0;
}

bool is_query_proj(const std::string& name) {
    return starts_with(name, "visual.blk") && name.find(".attn.q.") != std::string::npos;
}

bool simo_trainable(const std::string& name) {
    return starts_with(name, "seve.") || starts_with(name, "adapter.") ||
           is_query_proj(name) || name == "visual.mask_init";
}

}  // namespace

ParameterPartition partition_parameters(const Model& model, TrainMode mode,
                                        const std::vector<std::string>& extra) {
    ParameterPartition out;
    for (const auto& [name, t] : model.params.tensors) {
        bool train = false;
        switch (mode) {
            case TrainMode::kFrozen: train = false; break;
            case TrainMode::kSeveOnly:
                train = starts_with(name, "seve.") || starts_with(name, "adapter.") ||
                        name == "visual.mask_init";
                break;
            case TrainMode::kSimo:
            case TrainMode::kSimoGen:  // generator itself carries no parameters
                train = simo_trainable(name);
                break;
            case TrainMode::kFull:
                train = starts_with(name, "visual.") || starts_with(name, "seve.") ||
                        starts_with(name, "adapter.");
                break;
            case TrainMode::kSimoLang:
                train = simo_trainable(name) || starts_with(name, "text.");
                break;
        }
        (train ? out.trainable : out.frozen).insert(name);
    }
    for (const std::string& name : extra) {
        if (!model.params.has(name)) throw ConfigError("unknown parameter override: " + name);
        out.frozen.erase(name);
        out.trainable.insert(name);
    }
    return out;
}

double pac_min_samples(int64_t trainable_scalars, double epsilon, double delta,
                       double bits_per_scalar) {
    if (epsilon <= 0.0 || delta <= 0.0 || delta >= 1.0)
        throw ConfigError("pac_min_samples requires epsilon > 0 and delta in (0,1)");
    if (trainable_scalars < 0) throw ConfigError("negative parameter count");
    const double ln_h = static_cast<double>(trainable_scalars) * bits_per_scalar * std::log(2.0);
    return (ln_h + std::log(1.0 / delta)) / epsilon;
}

void TrainConfig::validate() const {
    if (iterations < 0) throw ConfigError("iterations must be non-negative");
    if (batch_size <= 0) throw ConfigError("batch_size must be positive");
    if (lr <= 0.0) throw ConfigError("lr must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
    if (holdout_fraction < 0.0 || holdout_fraction >= 1.0)
        throw ConfigError("holdout_fraction must be in [0,1)");
}

namespace {

struct AdamState {
    Tensor m, v;
};

}  // namespace

TrainResult train_model(Model& model, const std::vector<SegmentationSample>& train_set,
                        const std::vector<SegmentationSample>& holdout_set,
                        const CorruptionConfig& corruption, TrainMode mode,
                        const TrainConfig& cfg, const LabelVocabulary& vocab,
                        const IterationCallback& on_iter) {
    cfg.validate();
    if (train_set.empty() && cfg.iterations > 0)
        throw ConfigError("cannot train on an empty dataset");
    ParameterPartition part = partition_parameters(model, mode);

    std::vector<MaskProposalSet> props(train_set.size());
    for (size_t i = 0; i < train_set.size(); ++i)
        props[i] = generate_proposals(train_set[i], corruption);

    const bool text_on_tape = mode == TrainMode::kSimoLang;
    TextEncoding text;
    if (!text_on_tape) text = encode_text_labels(model, vocab);

    std::map<std::string, AdamState> adam;
    Rng rng(cfg.seed ^ 0x7a1b2c3d4e5f6071ULL);
    TrainResult result;
    for (int64_t it = 0; it < cfg.iterations; ++it) {
        std::vector<size_t> batch;
        for (int64_t b = 0; b < cfg.batch_size; ++b)
            batch.push_back(static_cast<size_t>(
                rng.uniform_int(0, static_cast<int64_t>(train_set.size()) - 1)));

        std::map<std::string, Tensor> grads;
        IterationStats stats;
        stats.iteration = it;
        for (size_t idx : batch) {
            ad::Tape tape;
            ForwardOptions opt;
            opt.text_on_tape = text_on_tape;
            ForwardResult fwd = forward_sample(tape, model, train_set[idx], props[idx],
                                               text, vocab, opt);
            LossBreakdown lb = compute_sample_loss(tape, fwd, train_set[idx], cfg.loss);
            tape.backward(lb.node);
            stats.total += lb.total;
            stats.ce += lb.ce;
            stats.dice += lb.dice;
            stats.bce += lb.bce;
            for (const auto& [name, id] : tape.params()) {
                if (!part.trainable.count(name)) continue;
                const Tensor& g = tape.grad(id);
                auto gi = grads.find(name);
                if (gi == grads.end()) {
                    grads.emplace(name, g);
                } else {
                    for (size_t k = 0; k < g.v.size(); ++k) gi->second.v[k] += g.v[k];
                }
            }
        }
        const double inv_b = 1.0 / static_cast<double>(batch.size());
        stats.total *= inv_b;
        stats.ce *= inv_b;
        stats.dice *= inv_b;
        stats.bce *= inv_b;

        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(it + 1));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(it + 1));
        double gn2 = 0.0;
        for (auto& [name, g] : grads) {
            for (auto& x : g.v) {
                x *= inv_b;
                if (!std::isfinite(x)) throw NumericError("non-finite gradient in " + name);
                gn2 += x * x;
            }
            Tensor& p = model.params.at(name);
            auto [si, inserted] = adam.try_emplace(name);
            if (inserted) {
                si->second.m = Tensor(p.shape);
                si->second.v = Tensor(p.shape);
            }
            AdamState& st = si->second;
            for (size_t k = 0; k < p.v.size(); ++k) {
                st.m.v[k] = cfg.beta1 * st.m.v[k] + (1.0 - cfg.beta1) * g.v[k];
                st.v.v[k] = cfg.beta2 * st.v.v[k] + (1.0 - cfg.beta2) * g.v[k] * g.v[k];
                const double mhat = st.m.v[k] / bc1;
                const double vhat = st.v.v[k] / bc2;
                p.v[k] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.adam_eps) +
                                    cfg.weight_decay * p.v[k]);
            }
        }
        stats.grad_norm = std::sqrt(gn2);
        result.log.push_back(stats);
        if (on_iter) on_iter(stats);
        if (text_on_tape) text = encode_text_labels(model, vocab);
    }

    result.holdout_count = static_cast<int64_t>(holdout_set.size());
    if (!holdout_set.empty())
        result.final_holdout_accuracy =
            mask_classification_accuracy(model, holdout_set, corruption, vocab);
    return result;
}

double mask_classification_accuracy(const Model& model,
                                    const std::vector<SegmentationSample>& samples,
                                    const CorruptionConfig& corruption,
                                    const LabelVocabulary& vocab) {
    TextEncoding text = encode_text_labels(model, vocab);
    int64_t correct = 0, total = 0;
    for (const auto& sample : samples) {
        MaskProposalSet props = generate_proposals(sample, corruption);
        if (props.proposals.empty()) continue;
        ad::Tape tape;
        ForwardResult fwd =
            forward_sample(tape, model, sample, props, text, vocab, ForwardOptions{});
        const Tensor& logits = tape.val(fwd.logits);
        const int64_t k = logits.cols() - 1;
        for (const Segment& seg : sample.segments) {
            double best_iou = 0.0;
            int64_t best = -1;
            for (size_t i = 0; i < props.proposals.size(); ++i) {
                const double iou = mask_iou(props.proposals[i].binary, seg.mask);
                if (iou > best_iou) {
                    best_iou = iou;
                    best = static_cast<int64_t>(i);
                }
            }
            if (best < 0) continue;  // nothing overlaps this segment
            int64_t arg = 0;
            for (int64_t j = 1; j < k; ++j)
                if (logits.at(best, j) > logits.at(best, arg)) arg = j;
            ++total;
            if (arg == seg.class_id) ++correct;
        }
    }
    if (total == 0) return 0.0;
    return static_cast<double>(correct) / static_cast<double>(total);
}

}  // namespace fisa
