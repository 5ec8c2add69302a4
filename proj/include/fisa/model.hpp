#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "fisa/autodiff.hpp"
#include "fisa/data.hpp"
#include "fisa/generator.hpp"
#include "fisa/seve.hpp"
#include "fisa/tensor.hpp"

namespace fisa {

struct ModelConfig {
    int64_t channels = 64;       // C
    int64_t visual_blocks = 4;   // L
    int64_t text_blocks = 2;     // L_t
    int64_t patch_size = 4;
    int64_t image_size = 32;
    int64_t heads = 4;           // image self-attention; SEVE is single-head
    std::vector<int64_t> seve_layers = {3};
    int64_t adapter_hidden = 8;
    bool adapter_enabled = true;
    double logit_scale = 20.0;
    int64_t max_text_len = 32;
    int64_t mlp_ratio = 4;

    int64_t num_patches() const {
        return (image_size / patch_size) * (image_size / patch_size);
    }
    void validate() const;
    std::string to_json() const;
    static ModelConfig from_json(const std::string& s);
};

/// Named parameter tensors in a stable (sorted) order.
struct ParamStore {
    std::map<std::string, Tensor> tensors;

    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    bool has(const std::string& name) const { return tensors.count(name) > 0; }
    int64_t total_scalars() const;
};

struct Model {
    ModelConfig cfg;
    ParamStore params;

    static Model init(const ModelConfig& cfg, uint64_t seed);
};

struct TextEncoding {
    Tensor tgt_tokens;        // K x C
    Tensor label_embeddings;  // K x C, L2-normalized rows
};

/// Deterministic per (weights, vocab); character-level toy text encoder.
TextEncoding encode_text_labels(const Model& model, const LabelVocabulary& vocab);

struct ClassificationResult {
    Tensor probs;       // m x K (no-object column dropped, renormalized upstream)
    Tensor embeddings;  // m x C
    double logit_scale = 0.0;
};

/// Cosine-similarity zero-shot head over L2-normalized embeddings.
ClassificationResult classify_masks(const Tensor& mask_embeddings,
                                    const Tensor& label_embeddings, double logit_scale);

/// One sample's differentiable forward pass.
struct ForwardResult {
    ad::VarId mask_emb = -1;      // m x C, L2-normalized
    ad::VarId logits = -1;        // m x (K+1); last column is the no-object logit (0)
    ad::VarId adapted_rows = -1;  // m x (H*W), clamped to (1e-6, 1-1e-6)
    AttentionBias bias;
    std::vector<std::vector<int64_t>> covered_sets;  // per mask, covered patch ids
};

struct ForwardOptions {
    bool seve_enabled = true;
    bool text_on_tape = false;  // put the text encoder on the tape (+LANG mode)
};

ForwardResult forward_sample(ad::Tape& tape, const Model& model,
                             const SegmentationSample& sample,
                             const MaskProposalSet& proposals, const TextEncoding& text,
                             const LabelVocabulary& vocab, const ForwardOptions& opt = {});

/// Plain per-mask embeddings (no gradients kept).
Tensor encode_image_with_masks(const Model& model, const SegmentationSample& sample,
                               const MaskProposalSet& proposals, const TextEncoding& text,
                               const LabelVocabulary& vocab, const ForwardOptions& opt = {});

void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace fisa
