#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "fisa/generator.hpp"
#include "fisa/model.hpp"

using namespace fisa;
namespace fs = std::filesystem;

namespace {

struct Fixture {
    ModelConfig cfg;
    Model model;
    LabelVocabulary vocab;
    std::vector<SegmentationSample> samples;
    TextEncoding text;

    Fixture() {
        cfg.channels = 16;
        cfg.visual_blocks = 2;
        cfg.text_blocks = 1;
        cfg.seve_layers = {1};
        cfg.adapter_hidden = 2;
        model = Model::init(cfg, 1);
        vocab = LabelVocabulary::synthetic(4);
        SynthConfig sc;
        sc.num_samples = 2;
        sc.num_classes = 4;
        sc.seed = 11;
        samples = synthesize_samples(sc);
        text = encode_text_labels(model, vocab);
    }
};

}  // namespace

TEST_CASE("config validation catches bad settings") {
    ModelConfig c;
    c.image_size = 30;  // not divisible by patch 4
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = ModelConfig{};
    c.heads = 3;  // does not divide 64
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = ModelConfig{};
    c.seve_layers = {99};
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = ModelConfig{};
    CHECK_NOTHROW(c.validate());
    CHECK(ModelConfig::from_json(c.to_json()).to_json() == c.to_json());
}

TEST_CASE("init is deterministic and names every group") {
    Fixture fx;
    Model again = Model::init(fx.cfg, 1);
    REQUIRE(fx.model.params.tensors.size() == again.params.tensors.size());
    for (const auto& [name, t] : fx.model.params.tensors)
        CHECK(t.v == again.params.at(name).v);
    Model other = Model::init(fx.cfg, 2);
    CHECK(fx.model.params.at("visual.patch_embed").v !=
          other.params.at("visual.patch_embed").v);

    CHECK(fx.model.params.has("visual.mask_init"));
    CHECK(fx.model.params.has("seve.blk1.g_q.w"));
    CHECK(fx.model.params.has("adapter.conv1.w"));
    CHECK(fx.model.params.has("text.proj"));
    CHECK_FALSE(fx.model.params.has("seve.blk0.g_q.w"));
    // adapter second conv zero-initialized: identity at start
    for (double x : fx.model.params.at("adapter.conv2.w").v) CHECK(x == 0.0);
}

TEST_CASE("text encoding produces unit-norm distinct label embeddings") {
    Fixture fx;
    REQUIRE(fx.text.label_embeddings.rows() == fx.vocab.size());
    for (int64_t i = 0; i < fx.vocab.size(); ++i) {
        double n = 0;
        for (int64_t j = 0; j < fx.cfg.channels; ++j)
            n += fx.text.label_embeddings.at(i, j) * fx.text.label_embeddings.at(i, j);
        CHECK(std::abs(n - 1.0) < 1e-9);
    }
    for (int64_t a = 0; a < fx.vocab.size(); ++a)
        for (int64_t b = a + 1; b < fx.vocab.size(); ++b) {
            double dot = 0;
            for (int64_t j = 0; j < fx.cfg.channels; ++j)
                dot += fx.text.label_embeddings.at(a, j) * fx.text.label_embeddings.at(b, j);
            CHECK(dot < 1.0 - 1e-6);  // distinct names, distinct directions
        }
}

TEST_CASE("forward produces logits with a constant no-object column") {
    Fixture fx;
    MaskProposalSet props = oracle_proposals(fx.samples[0]);
    ad::Tape tape;
    ForwardResult out = forward_sample(tape, fx.model, fx.samples[0], props, fx.text,
                                       fx.vocab, ForwardOptions{});
    const Tensor& logits = tape.val(out.logits);
    REQUIRE(logits.rows() == static_cast<int64_t>(props.proposals.size()));
    REQUIRE(logits.cols() == fx.vocab.size() + 1);
    for (int64_t i = 0; i < logits.rows(); ++i) CHECK(logits.at(i, fx.vocab.size()) == 0.0);
    for (double x : tape.val(out.adapted_rows).v) {
        CHECK(x >= 1e-6);
        CHECK(x <= 1.0 - 1e-6);
    }
    // mask embeddings land on the unit sphere
    const Tensor& emb = tape.val(out.mask_emb);
    for (int64_t i = 0; i < emb.rows(); ++i) {
        double n = 0;
        for (int64_t j = 0; j < emb.cols(); ++j) n += emb.at(i, j) * emb.at(i, j);
        CHECK(std::abs(n - 1.0) < 1e-9);
    }
}

TEST_CASE("forward is deterministic") {
    Fixture fx;
    MaskProposalSet props = oracle_proposals(fx.samples[0]);
    Tensor a = encode_image_with_masks(fx.model, fx.samples[0], props, fx.text, fx.vocab,
                                       ForwardOptions{});
    Tensor b = encode_image_with_masks(fx.model, fx.samples[0], props, fx.text, fx.vocab,
                                       ForwardOptions{});
    CHECK(a.v == b.v);
}

TEST_CASE("classification argmax is invariant to positive logit scaling") {
    Fixture fx;
    MaskProposalSet props = oracle_proposals(fx.samples[0]);
    Tensor emb = encode_image_with_masks(fx.model, fx.samples[0], props, fx.text, fx.vocab,
                                         ForwardOptions{});
    ClassificationResult r1 = classify_masks(emb, fx.text.label_embeddings, 20.0);
    ClassificationResult r2 = classify_masks(emb, fx.text.label_embeddings, 3.0);
    for (int64_t i = 0; i < r1.probs.rows(); ++i) {
        int64_t a1 = 0, a2 = 0;
        for (int64_t j = 1; j < r1.probs.cols(); ++j) {
            if (r1.probs.at(i, j) > r1.probs.at(i, a1)) a1 = j;
            if (r2.probs.at(i, j) > r2.probs.at(i, a2)) a2 = j;
        }
        CHECK(a1 == a2);
    }
    CHECK_THROWS_AS(classify_masks(emb, fx.text.label_embeddings, -1.0), ConfigError);
    Tensor zero({1, fx.cfg.channels});
    CHECK_THROWS_AS(classify_masks(zero, fx.text.label_embeddings, 20.0), NumericError);
}

TEST_CASE("image tokens are isolated from mask tokens") {
    // mask-token count must not affect the classification geometry: compare
    // embeddings of the shared proposal between a 1-proposal and 2-proposal
    // run; bitwise equality witnesses image-token isolation
    Fixture fx;
    MaskProposalSet all = oracle_proposals(fx.samples[0]);
    REQUIRE(all.proposals.size() >= 2);
    MaskProposalSet one;
    one.proposals.push_back(all.proposals[0]);
    Tensor e_all = encode_image_with_masks(fx.model, fx.samples[0], all, fx.text, fx.vocab,
                                           ForwardOptions{});
    Tensor e_one = encode_image_with_masks(fx.model, fx.samples[0], one, fx.text, fx.vocab,
                                           ForwardOptions{});
    for (int64_t j = 0; j < e_all.cols(); ++j) CHECK(e_all.at(0, j) == e_one.at(0, j));
}

TEST_CASE("disabling semantic layers and adapter reduces to plain mask attention") {
    Fixture fx;
    ModelConfig plain_cfg = fx.cfg;
    plain_cfg.seve_layers.clear();
    plain_cfg.adapter_enabled = false;
    Model plain = Model::init(plain_cfg, 1);
    // shared parameter groups must match the seve-enabled init exactly so the
    // comparison below isolates the seve path
    for (auto& [name, t] : plain.params.tensors) t = fx.model.params.at(name);

    MaskProposalSet props = oracle_proposals(fx.samples[0]);
    TextEncoding text = encode_text_labels(plain, fx.vocab);
    Tensor via_flag = encode_image_with_masks(fx.model, fx.samples[0], props, fx.text,
                                              fx.vocab, ForwardOptions{false, false});
    Tensor via_cfg = encode_image_with_masks(plain, fx.samples[0], props, text, fx.vocab,
                                             ForwardOptions{});
    // adapter is identity at init, so the only difference could come from the
    // seve layers; with both off the outputs agree
    for (size_t i = 0; i < via_flag.v.size(); ++i)
        CHECK(std::abs(via_flag.v[i] - via_cfg.v[i]) < 1e-12);

    Tensor with_seve = encode_image_with_masks(fx.model, fx.samples[0], props, fx.text,
                                               fx.vocab, ForwardOptions{});
    double d = 0;
    for (size_t i = 0; i < with_seve.v.size(); ++i)
        d = std::max(d, std::abs(with_seve.v[i] - via_flag.v[i]));
    CHECK(d > 1e-9);  // semantic path actually does something
}

TEST_CASE("checkpoint roundtrip is exact") {
    Fixture fx;
    fs::path dir = fs::temp_directory_path() / "fisa_ckpt_test";
    fs::create_directories(dir);
    const std::string path = (dir / "m.bin").string();
    save_checkpoint(fx.model, path);
    Model back = load_checkpoint(path);
    CHECK(back.cfg.to_json() == fx.model.cfg.to_json());
    REQUIRE(back.params.tensors.size() == fx.model.params.tensors.size());
    for (const auto& [name, t] : fx.model.params.tensors) {
        CHECK(back.params.at(name).shape == t.shape);
        CHECK(back.params.at(name).v == t.v);
    }
    CHECK_THROWS_AS(load_checkpoint((dir / "missing.bin").string()), FormatError);
    fs::remove_all(dir);
}

TEST_CASE("forward rejects inconsistent inputs") {
    Fixture fx;
    MaskProposalSet props = oracle_proposals(fx.samples[0]);
    ad::Tape tape;
    MaskProposalSet empty;
    CHECK_THROWS_AS(forward_sample(tape, fx.model, fx.samples[0], empty, fx.text, fx.vocab,
                                   ForwardOptions{}),
                    ShapeError);
    ModelConfig small = fx.cfg;
    small.image_size = 16;
    Model sm = Model::init(small, 1);
    ad::Tape tape2;
    CHECK_THROWS_AS(forward_sample(tape2, sm, fx.samples[0], props,
                                   encode_text_labels(sm, fx.vocab), fx.vocab,
                                   ForwardOptions{}),
                    ShapeError);
}
