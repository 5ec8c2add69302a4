#include "fisa/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "fisa/kernels.hpp"
#include "fisa/rng.hpp"
#include "json.hpp"

using nlohmann::json;

namespace fisa {

// ---------------------------------------------------------------------------
// Config

void ModelConfig::validate() const {
    if (channels <= 0 || visual_blocks <= 0 || text_blocks <= 0)
        throw ConfigError("model dimensions must be positive");
    if (patch_size <= 0 || image_size % patch_size != 0)
        throw ConfigError("image_size must be divisible by patch_size");
    if (channels % heads != 0) throw ConfigError("heads must divide channels");
    for (int64_t l : seve_layers)
        if (l < 0 || l >= visual_blocks)
            throw ConfigError("seve layer index out of range: " + std::to_string(l));
    if (adapter_hidden <= 0) throw ConfigError("adapter_hidden must be positive");
}

std::string ModelConfig::to_json() const {
    json j;
    j["channels"] = channels;
    j["visual_blocks"] = visual_blocks;
    j["text_blocks"] = text_blocks;
    j["patch_size"] = patch_size;
    j["image_size"] = image_size;
    j["heads"] = heads;
    j["seve_layers"] = seve_layers;
    j["adapter_hidden"] = adapter_hidden;
    j["adapter_enabled"] = adapter_enabled;
    j["logit_scale"] = logit_scale;
    j["max_text_len"] = max_text_len;
    j["mlp_ratio"] = mlp_ratio;
    return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& s) {
    json j = json::parse(s);
    ModelConfig c;
    c.channels = j.value("channels", c.channels);
    c.visual_blocks = j.value("visual_blocks", c.visual_blocks);
    c.text_blocks = j.value("text_blocks", c.text_blocks);
    c.patch_size = j.value("patch_size", c.patch_size);
    c.image_size = j.value("image_size", c.image_size);
    c.heads = j.value("heads", c.heads);
    c.seve_layers = j.value("seve_layers", c.seve_layers);
    c.adapter_hidden = j.value("adapter_hidden", c.adapter_hidden);
    c.adapter_enabled = j.value("adapter_enabled", c.adapter_enabled);
    c.logit_scale = j.value("logit_scale", c.logit_scale);
    c.max_text_len = j.value("max_text_len", c.max_text_len);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// ParamStore

Tensor& ParamStore::at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
}

const Tensor& ParamStore::at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
}

int64_t ParamStore::total_scalars() const {
    int64_t n = 0;
    for (const auto& [k, t] : tensors) n += t.numel();
    return n;
}

// ---------------------------------------------------------------------------
// Initialization

namespace {

constexpr int64_t kTextVocab = 128;  // raw byte values, 7-bit

Tensor randn(Rng& rng, std::vector<int64_t> shape, double scale) {
    Tensor t(std::move(shape));
    for (auto& x : t.v) x = rng.normal(0.0, scale);
    return t;
}

void init_block(ParamStore& p, Rng& rng, const std::string& prefix, int64_t c,
                int64_t mlp_ratio) {
    const double sc = 1.0 / std::sqrt(static_cast<double>(c));
    for (const char* nm : {"q", "k", "v", "o"}) {
        p.tensors[prefix + ".attn." + nm + ".w"] = randn(rng, {c, c}, sc);
        p.tensors[prefix + ".attn." + nm + ".b"] = Tensor({c});
    }
    for (const char* ln : {"ln1", "ln2"}) {
        Tensor w({c});
        w.fill(1.0);
        p.tensors[prefix + "." + ln + ".w"] = w;
        p.tensors[prefix + "." + ln + ".b"] = Tensor({c});
    }
    const int64_t hidden = mlp_ratio * c;
    p.tensors[prefix + ".mlp.fc1.w"] = randn(rng, {c, hidden}, sc);
    p.tensors[prefix + ".mlp.fc1.b"] = Tensor({hidden});
    p.tensors[prefix + ".mlp.fc2.w"] =
        randn(rng, {hidden, c}, 1.0 / std::sqrt(static_cast<double>(hidden)));
    p.tensors[prefix + ".mlp.fc2.b"] = Tensor({c});
}

}  // namespace

Model Model::init(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    Rng rng(seed ^ 0xf15a1abULL);
    ParamStore& p = m.params;
    const int64_t c = cfg.channels;
    const int64_t pin = cfg.patch_size * cfg.patch_size * 3;
    p.tensors["visual.patch_embed"] =
        randn(rng, {pin, c}, 1.0 / std::sqrt(static_cast<double>(pin)));
    p.tensors["visual.pos"] = randn(rng, {cfg.num_patches(), c}, 0.02);
    for (int64_t l = 0; l < cfg.visual_blocks; ++l)
        init_block(p, rng, "visual.blk" + std::to_string(l), c, cfg.mlp_ratio);
    {
        Tensor w({c});
        w.fill(1.0);
        p.tensors["visual.lnf.w"] = w;
        p.tensors["visual.lnf.b"] = Tensor({c});
    }
    p.tensors["visual.proj"] = randn(rng, {c, c}, 1.0 / std::sqrt(static_cast<double>(c)));
    p.tensors["visual.mask_init"] = randn(rng, {1, c}, 0.02);
    const double sc = 1.0 / std::sqrt(static_cast<double>(c));
    for (int64_t l : cfg.seve_layers) {
        const std::string prefix = "seve.blk" + std::to_string(l);
        for (const char* nm : {"q", "k", "v"}) {
            p.tensors[prefix + ".g_" + nm + ".w"] = randn(rng, {c, c}, sc);
            p.tensors[prefix + ".g_" + nm + ".b"] = Tensor({c});
        }
    }
    p.tensors["adapter.conv1.w"] = randn(rng, {cfg.adapter_hidden, 1, 3, 3}, 0.2);
    p.tensors["adapter.conv1.b"] = Tensor({cfg.adapter_hidden});
    p.tensors["adapter.conv2.w"] = Tensor({1, cfg.adapter_hidden, 3, 3});  // zero: identity
    p.tensors["adapter.conv2.b"] = Tensor({1});
    p.tensors["text.embed"] = randn(rng, {kTextVocab, c}, 0.02);
    p.tensors["text.pos"] = randn(rng, {cfg.max_text_len, c}, 0.02);
    for (int64_t l = 0; l < cfg.text_blocks; ++l)
        init_block(p, rng, "text.blk" + std::to_string(l), c, cfg.mlp_ratio);
    {
        Tensor w({c});
        w.fill(1.0);
        p.tensors["text.lnf.w"] = w;
        p.tensors["text.lnf.b"] = Tensor({c});
    }
    p.tensors["text.proj"] = randn(rng, {c, c}, 1.0 / std::sqrt(static_cast<double>(c)));
    return m;
}

// ---------------------------------------------------------------------------
// Tape helpers

namespace {

/// Registers parameters on the tape lazily so harvesting gradients by name
/// stays cheap and every parameter appears at most once.
class TapeParams {
public:
    TapeParams(ad::Tape& tape, const ParamStore& store) : tape_(tape), store_(store) {}
    ad::VarId operator()(const std::string& name) {
        auto it = ids_.find(name);
        if (it != ids_.end()) return it->second;
        ad::VarId id = tape_.param(name, store_.at(name));
        ids_[name] = id;
        return id;
    }

private:
    ad::Tape& tape_;
    const ParamStore& store_;
    std::map<std::string, ad::VarId> ids_;
};

ad::VarId linear(ad::Tape& t, ad::VarId x, ad::VarId w, ad::VarId b) {
    return t.add_rowvec(t.matmul(x, w), b);
}

ad::VarId mlp(ad::Tape& t, TapeParams& pv, const std::string& prefix, ad::VarId x) {
    ad::VarId u = t.layernorm_rows(x, pv(prefix + ".ln2.w"), pv(prefix + ".ln2.b"));
    ad::VarId h = t.gelu(linear(t, u, pv(prefix + ".mlp.fc1.w"), pv(prefix + ".mlp.fc1.b")));
    return linear(t, h, pv(prefix + ".mlp.fc2.w"), pv(prefix + ".mlp.fc2.b"));
}

/// Standard pre-LN self-attention + MLP block over a token matrix.
ad::VarId self_attn_block(ad::Tape& t, TapeParams& pv, const std::string& prefix,
                          ad::VarId x, int64_t heads) {
    const int64_t c = t.val(x).cols();
    const int64_t hd = c / heads;
    ad::VarId u = t.layernorm_rows(x, pv(prefix + ".ln1.w"), pv(prefix + ".ln1.b"));
    ad::VarId q = linear(t, u, pv(prefix + ".attn.q.w"), pv(prefix + ".attn.q.b"));
    ad::VarId k = linear(t, u, pv(prefix + ".attn.k.w"), pv(prefix + ".attn.k.b"));
    ad::VarId v = linear(t, u, pv(prefix + ".attn.v.w"), pv(prefix + ".attn.v.b"));
    std::vector<ad::VarId> head_outs;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    for (int64_t h = 0; h < heads; ++h) {
        ad::VarId qh = t.slice_cols(q, h * hd, (h + 1) * hd);
        ad::VarId kh = t.slice_cols(k, h * hd, (h + 1) * hd);
        ad::VarId vh = t.slice_cols(v, h * hd, (h + 1) * hd);
        ad::VarId att = t.softmax_rows(t.scale(t.matmul(qh, kh, false, true), scale));
        head_outs.push_back(t.matmul(att, vh));
    }
    ad::VarId ao = linear(t, t.concat_cols(head_outs), pv(prefix + ".attn.o.w"),
                          pv(prefix + ".attn.o.b"));
    ad::VarId x1 = t.add(x, ao);
    return t.add(x1, mlp(t, pv, prefix, x1));
}

std::vector<int64_t> text_char_ids(const std::string& name, int64_t max_len) {
    std::vector<int64_t> ids;
    for (char ch : name) {
        if (static_cast<int64_t>(ids.size()) >= max_len) break;
        ids.push_back(static_cast<unsigned char>(ch) % kTextVocab);
    }
    if (ids.empty()) ids.push_back(0);
    return ids;
}

struct TextNodes {
    ad::VarId tgt = -1;    // K x C
    ad::VarId labels = -1;  // K x C normalized
};

TextNodes encode_text_on_tape(ad::Tape& t, TapeParams& pv, const ModelConfig& cfg,
                              const LabelVocabulary& vocab) {
    if (vocab.size() == 0) throw ConfigError("empty vocabulary");
    std::vector<ad::VarId> tgt_rows, label_rows;
    for (const auto& name : vocab.class_names) {
        auto ids = text_char_ids(name, cfg.max_text_len);
        std::vector<int64_t> pos_ids(ids.size());
        for (size_t i = 0; i < ids.size(); ++i) pos_ids[i] = static_cast<int64_t>(i);
        ad::VarId x = t.add(t.gather_rows(pv("text.embed"), ids),
                            t.gather_rows(pv("text.pos"), pos_ids));
        for (int64_t l = 0; l < cfg.text_blocks; ++l)
            x = self_attn_block(t, pv, "text.blk" + std::to_string(l), x, cfg.heads);
        ad::VarId pooled = t.mean_rows(x);
        tgt_rows.push_back(pooled);
        ad::VarId fin = t.layernorm_rows(pooled, pv("text.lnf.w"), pv("text.lnf.b"));
        label_rows.push_back(t.matmul(fin, pv("text.proj")));
    }
    TextNodes out;
    out.tgt = t.concat_rows(tgt_rows);
    out.labels = t.l2_normalize_rows(t.concat_rows(label_rows));
    return out;
}

}  // namespace

TextEncoding encode_text_labels(const Model& model, const LabelVocabulary& vocab) {
    ad::Tape t;
    TapeParams pv(t, model.params);
    TextNodes n = encode_text_on_tape(t, pv, model.cfg, vocab);
    return TextEncoding{t.val(n.tgt), t.val(n.labels)};
}

ClassificationResult classify_masks(const Tensor& mask_embeddings,
                                    const Tensor& label_embeddings, double logit_scale) {
    if (logit_scale < 0) throw ConfigError("logit_scale must be non-negative");
    const int64_t m = mask_embeddings.rows(), c = mask_embeddings.cols();
    const int64_t k = label_embeddings.rows();
    if (label_embeddings.cols() != c) throw ShapeError("embedding width mismatch");
    Tensor me = mask_embeddings, le = label_embeddings;
    for (int64_t i = 0; i < m; ++i) {
        double n = 0;
        for (int64_t j = 0; j < c; ++j) n += me.at(i, j) * me.at(i, j);
        n = std::sqrt(n);
        if (n < 1e-12) throw NumericError("zero-norm mask embedding");
        for (int64_t j = 0; j < c; ++j) me.at(i, j) /= n;
    }
    for (int64_t i = 0; i < k; ++i) {
        double n = 0;
        for (int64_t j = 0; j < c; ++j) n += le.at(i, j) * le.at(i, j);
        n = std::sqrt(n);
        if (n < 1e-12) throw NumericError("zero-norm label embedding");
        for (int64_t j = 0; j < c; ++j) le.at(i, j) /= n;
    }
    Tensor logits = kernels::matmul(me, le, false, true);
    for (auto& x : logits.v) x *= logit_scale;
    ClassificationResult r;
    r.probs = kernels::softmax_rows(logits);
    r.embeddings = std::move(me);
    r.logit_scale = logit_scale;
    return r;
}

ForwardResult forward_sample(ad::Tape& t, const Model& model,
                             const SegmentationSample& sample,
                             const MaskProposalSet& proposals, const TextEncoding& text,
                             const LabelVocabulary& vocab, const ForwardOptions& opt) {
    const ModelConfig& cfg = model.cfg;
    const int64_t c = cfg.channels, ps = cfg.patch_size;
    const int64_t h = sample.height, w = sample.width;
    if (h != cfg.image_size || w != cfg.image_size)
        throw ShapeError("sample size does not match model image_size");
    const int64_t m = static_cast<int64_t>(proposals.proposals.size());
    if (m == 0) throw ShapeError("forward_sample requires at least one proposal");
    const int64_t n = cfg.num_patches();
    TapeParams pv(t, model.params);

    // --- adapter over proposal soft masks (straight-through to coverage)
    Tensor soft({m, h, w});
    for (int64_t i = 0; i < m; ++i) {
        const Tensor& s = proposals.proposals[i].soft;
        if (s.shape.size() != 2 || s.shape[0] != h || s.shape[1] != w)
            throw ShapeError("proposal/image shape mismatch in sample " + sample.sample_id);
        std::copy(s.v.begin(), s.v.end(), soft.v.begin() + i * h * w);
    }
    ad::VarId soft_in = t.constant(soft);
    ad::VarId adapted;
    if (cfg.adapter_enabled) {
        ad::VarId x4 = t.reshape(soft_in, {m, 1, h, w});
        ad::VarId hid = t.relu(t.conv3x3(x4, pv("adapter.conv1.w"), pv("adapter.conv1.b")));
        ad::VarId d = t.conv3x3(hid, pv("adapter.conv2.w"), pv("adapter.conv2.b"));
        adapted = t.add(soft_in, t.reshape(d, {m, h, w}));
    } else {
        adapted = soft_in;
    }
    ForwardResult out;
    out.adapted_rows = t.clamp(t.reshape(adapted, {m, h * w}), 1e-6, 1.0 - 1e-6);

    PatchCoverage cov = coverage_from_soft_masks(t.val(adapted), ps);
    out.bias = build_mask_attention_bias(cov);
    out.covered_sets.resize(m);
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j)
            if (out.bias.bias.at(i, j) == 0.0) out.covered_sets[i].push_back(j);
    }

    // --- patch embedding
    const int64_t grid = cfg.image_size / ps;
    Tensor patches({n, ps * ps * 3});
    for (int64_t gy = 0; gy < grid; ++gy)
        for (int64_t gx = 0; gx < grid; ++gx) {
            const int64_t row = gy * grid + gx;
            int64_t idx = 0;
            for (int64_t py = 0; py < ps; ++py)
                for (int64_t px = 0; px < ps; ++px)
                    for (int64_t ch = 0; ch < 3; ++ch)
                        patches.v[row * ps * ps * 3 + idx++] =
                            sample.image[((gy * ps + py) * w + gx * ps + px) * 3 + ch];
        }
    ad::VarId x = t.add(t.matmul(t.constant(std::move(patches)), pv("visual.patch_embed")),
                        pv("visual.pos"));

    // --- mask token init: shared embedding + mean positional over coverage
    ad::VarId mt = t.add_rowvec(t.mean_rows_subsets(pv("visual.pos"), out.covered_sets),
                                pv("visual.mask_init"));

    // --- text
    ad::VarId tgt, labels;
    if (opt.text_on_tape) {
        TextNodes tn = encode_text_on_tape(t, pv, cfg, vocab);
        tgt = tn.tgt;
        labels = tn.labels;
    } else {
        tgt = t.constant(text.tgt_tokens);
        labels = t.constant(text.label_embeddings);
    }

    const double sc = 1.0 / std::sqrt(static_cast<double>(c));
    std::set<int64_t> seve_set(cfg.seve_layers.begin(), cfg.seve_layers.end());
    for (int64_t l = 0; l < cfg.visual_blocks; ++l) {
        const std::string bp = "visual.blk" + std::to_string(l);
        // image tokens: standard multi-head self-attention, never sees masks
        ad::VarId u = t.layernorm_rows(x, pv(bp + ".ln1.w"), pv(bp + ".ln1.b"));
        ad::VarId k = linear(t, u, pv(bp + ".attn.k.w"), pv(bp + ".attn.k.b"));
        ad::VarId v = linear(t, u, pv(bp + ".attn.v.w"), pv(bp + ".attn.v.b"));
        ad::VarId q = linear(t, u, pv(bp + ".attn.q.w"), pv(bp + ".attn.q.b"));
        const int64_t hd = c / cfg.heads;
        const double sch = 1.0 / std::sqrt(static_cast<double>(hd));
        std::vector<ad::VarId> head_outs;
        for (int64_t hh = 0; hh < cfg.heads; ++hh) {
            ad::VarId qh = t.slice_cols(q, hh * hd, (hh + 1) * hd);
            ad::VarId kh = t.slice_cols(k, hh * hd, (hh + 1) * hd);
            ad::VarId vh = t.slice_cols(v, hh * hd, (hh + 1) * hd);
            ad::VarId att = t.softmax_rows(t.scale(t.matmul(qh, kh, false, true), sch));
            head_outs.push_back(t.matmul(att, vh));
        }
        ad::VarId ao = linear(t, t.concat_cols(head_outs), pv(bp + ".attn.o.w"),
                              pv(bp + ".attn.o.b"));
        ad::VarId x_new = t.add(x, ao);
        x_new = t.add(x_new, mlp(t, pv, bp, x_new));

        // mask tokens: single-head masked cross-attention over the block's
        // pre-update image keys/values
        ad::VarId um = t.layernorm_rows(mt, pv(bp + ".ln1.w"), pv(bp + ".ln1.b"));
        ad::VarId mt_new;
        if (opt.seve_enabled && seve_set.count(l)) {
            const std::string gp = "seve.blk" + std::to_string(l);
            ad::VarId qm = linear(t, um, pv(gp + ".g_q.w"), pv(gp + ".g_q.b"));
            ad::VarId kt = linear(t, tgt, pv(gp + ".g_k.w"), pv(gp + ".g_k.b"));
            ad::VarId vt = linear(t, tgt, pv(gp + ".g_v.w"), pv(gp + ".g_v.b"));
            ad::VarId hat =
                t.matmul(t.softmax_rows(t.scale(t.matmul(qm, kt, false, true), sc)), vt);
            ad::VarId q2 = linear(t, hat, pv(bp + ".attn.q.w"), pv(bp + ".attn.q.b"));
            ad::VarId att2 = t.softmax_rows_bias(
                t.scale(t.matmul(q2, k, false, true), sc), out.bias.bias);
            // the enriched token replaces the residual base, so the g_v
            // content reaches the classification embedding
            mt_new = t.add(hat, linear(t, t.matmul(att2, v), pv(bp + ".attn.o.w"),
                                       pv(bp + ".attn.o.b")));
        } else {
            ad::VarId q2 = linear(t, um, pv(bp + ".attn.q.w"), pv(bp + ".attn.q.b"));
            ad::VarId att2 = t.softmax_rows_bias(
                t.scale(t.matmul(q2, k, false, true), sc), out.bias.bias);
            mt_new = t.add(mt, linear(t, t.matmul(att2, v), pv(bp + ".attn.o.w"),
                                      pv(bp + ".attn.o.b")));
        }
        mt = t.add(mt_new, mlp(t, pv, bp, mt_new));
        x = x_new;
    }

    ad::VarId fin = t.layernorm_rows(mt, pv("visual.lnf.w"), pv("visual.lnf.b"));
    out.mask_emb = t.l2_normalize_rows(t.matmul(fin, pv("visual.proj")));
    ad::VarId logits = t.scale(t.matmul(out.mask_emb, labels, false, true), cfg.logit_scale);
    out.logits = t.append_zero_col(logits);
    return out;
}

Tensor encode_image_with_masks(const Model& model, const SegmentationSample& sample,
                               const MaskProposalSet& proposals, const TextEncoding& text,
                               const LabelVocabulary& vocab, const ForwardOptions& opt) {
    ad::Tape t;
    ForwardResult r = forward_sample(t, model, sample, proposals, text, vocab, opt);
    return t.val(r.mask_emb);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {
constexpr char kMagic[9] = "FISACKPT";
}

void save_checkpoint(const Model& model, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot write checkpoint: " + path);
    f.write(kMagic, 8);
    std::string cj = model.cfg.to_json();
    uint32_t clen = static_cast<uint32_t>(cj.size());
    f.write(reinterpret_cast<const char*>(&clen), 4);
    f.write(cj.data(), clen);
    uint64_t count = model.params.tensors.size();
    f.write(reinterpret_cast<const char*>(&count), 8);
    for (const auto& [name, t] : model.params.tensors) {
        uint32_t nlen = static_cast<uint32_t>(name.size());
        f.write(reinterpret_cast<const char*>(&nlen), 4);
        f.write(name.data(), nlen);
        uint32_t ndim = static_cast<uint32_t>(t.shape.size());
        f.write(reinterpret_cast<const char*>(&ndim), 4);
        for (int64_t d : t.shape) f.write(reinterpret_cast<const char*>(&d), 8);
        f.write(reinterpret_cast<const char*>(t.v.data()),
                static_cast<std::streamsize>(t.v.size() * sizeof(double)));
    }
}

Model load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("missing checkpoint: " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kMagic, 8) != 0)
        throw FormatError("not a fisa checkpoint: " + path);
    uint32_t clen = 0;
    f.read(reinterpret_cast<char*>(&clen), 4);
    std::string cj(clen, '\0');
    f.read(cj.data(), clen);
    Model m;
    m.cfg = ModelConfig::from_json(cj);
    uint64_t count = 0;
    f.read(reinterpret_cast<char*>(&count), 8);
    for (uint64_t i = 0; i < count; ++i) {
        uint32_t nlen = 0;
        f.read(reinterpret_cast<char*>(&nlen), 4);
        std::string name(nlen, '\0');
        f.read(name.data(), nlen);
        uint32_t ndim = 0;
        f.read(reinterpret_cast<char*>(&ndim), 4);
        std::vector<int64_t> shape(ndim);
        for (auto& d : shape) f.read(reinterpret_cast<char*>(&d), 8);
        Tensor t(shape);
        f.read(reinterpret_cast<char*>(t.v.data()),
               static_cast<std::streamsize>(t.v.size() * sizeof(double)));
        if (!f) throw FormatError("truncated checkpoint: " + path);
        m.params.tensors[name] = std::move(t);
    }
    return m;
}

}  // namespace fisa
