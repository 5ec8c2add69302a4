#include "fisa/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fisa/rng.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace fisa {

// ---------------------------------------------------------------------------
// BinaryMask / RLE

BinaryMask BinaryMask::encode(const std::vector<uint8_t>& pixels, int64_t h, int64_t w) {
    if (static_cast<int64_t>(pixels.size()) != h * w)
        throw ShapeError("mask pixel count does not match dimensions");
    BinaryMask m;
    m.height = h;
    m.width = w;
    uint8_t cur = 0;  // runs start with zeros; a leading 1 yields a 0-length run
    int64_t run = 0;
    for (uint8_t p : pixels) {
        uint8_t b = p ? 1 : 0;
        if (b == cur) {
            ++run;
        } else {
            m.rle.push_back(run);
            cur = b;
            run = 1;
        }
    }
    m.rle.push_back(run);
    return m;
}

std::vector<uint8_t> BinaryMask::decode() const {
    validate();
    std::vector<uint8_t> px(static_cast<size_t>(height * width));
    int64_t pos = 0;
    uint8_t cur = 0;
    for (int64_t run : rle) {
        std::fill(px.begin() + pos, px.begin() + pos + run, cur);
        pos += run;
        cur = 1 - cur;
    }
    return px;
}

int64_t BinaryMask::area() const {
    int64_t a = 0;
    for (size_t i = 1; i < rle.size(); i += 2) a += rle[i];
    return a;
}

void BinaryMask::validate() const {
    int64_t sum = 0;
    for (int64_t run : rle) {
        if (run < 0) throw FormatError("negative RLE run");
        sum += run;
    }
    if (sum != height * width)
        throw FormatError("RLE sum " + std::to_string(sum) + " != " +
                          std::to_string(height * width));
}

double mask_iou(const std::vector<uint8_t>& a, const std::vector<uint8_t>& b) {
    if (a.size() != b.size()) throw ShapeError("mask_iou size mismatch");
    int64_t inter = 0, uni = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        inter += a[i] && b[i];
        uni += a[i] || b[i];
    }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double mask_iou(const BinaryMask& a, const BinaryMask& b) {
    if (a.height != b.height || a.width != b.width)
        throw ShapeError("mask_iou dimension mismatch");
    return mask_iou(a.decode(), b.decode());
}

// ---------------------------------------------------------------------------
// LabelVocabulary

LabelVocabulary::LabelVocabulary(std::vector<std::string> names, std::vector<bool> thing)
    : class_names(std::move(names)), is_thing(std::move(thing)) {
    if (class_names.size() != is_thing.size())
        throw ConfigError("vocabulary names and is_thing lengths differ");
    for (size_t i = 0; i < class_names.size(); ++i)
        for (size_t j = i + 1; j < class_names.size(); ++j)
            if (class_names[i] == class_names[j])
                throw ConfigError("duplicate class name: " + class_names[i]);
}

LabelVocabulary LabelVocabulary::synthetic(int64_t num_classes) {
    static const char* kShapes[] = {"box", "disc", "wedge"};
    static const char* kHues[] = {"red", "lime", "cyan", "violet", "amber", "teal", "rose"};
    std::vector<std::string> names = {"background"};
    std::vector<bool> thing = {false};
    for (int64_t c = 1; c < num_classes; ++c) {
        std::string n = std::string(kHues[(c - 1) % 7]) + " " + kShapes[(c - 1) % 3];
        if (c > 21) n += " " + std::to_string(c);
        names.push_back(n);
        thing.push_back(true);
    }
    return LabelVocabulary(std::move(names), std::move(thing));
}

// ---------------------------------------------------------------------------
// Patch rasterization

std::vector<bool> rasterize_pixels_to_patches(const std::vector<uint8_t>& pixels, int64_t h,
                                              int64_t w, int64_t patch_size) {
    if (patch_size <= 0 || h % patch_size != 0 || w % patch_size != 0)
        throw ShapeError("mask dimensions " + std::to_string(h) + "x" + std::to_string(w) +
                         " not divisible by patch size " + std::to_string(patch_size));
    const int64_t gh = h / patch_size, gw = w / patch_size;
    std::vector<bool> covered(static_cast<size_t>(gh * gw), false);
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
            if (pixels[y * w + x]) covered[(y / patch_size) * gw + x / patch_size] = true;
    return covered;
}

std::vector<bool> rasterize_mask_to_patches(const BinaryMask& mask, int64_t patch_size) {
    return rasterize_pixels_to_patches(mask.decode(), mask.height, mask.width, patch_size);
}

// ---------------------------------------------------------------------------
// Connected components (4-neighborhood)

std::vector<std::vector<uint8_t>> connected_components(const std::vector<uint8_t>& pixels,
                                                       int64_t h, int64_t w) {
    std::vector<std::vector<uint8_t>> comps;
    std::vector<uint8_t> seen(pixels.size(), 0);
    std::vector<int64_t> stack;
    for (int64_t start = 0; start < h * w; ++start) {
        if (!pixels[start] || seen[start]) continue;
        std::vector<uint8_t> comp(pixels.size(), 0);
        stack.assign(1, start);
        seen[start] = 1;
        while (!stack.empty()) {
            int64_t p = stack.back();
            stack.pop_back();
            comp[p] = 1;
            int64_t y = p / w, x = p % w;
            const int64_t ny[4] = {y - 1, y + 1, y, y};
            const int64_t nx[4] = {x, x, x - 1, x + 1};
            for (int d = 0; d < 4; ++d) {
                if (ny[d] < 0 || ny[d] >= h || nx[d] < 0 || nx[d] >= w) continue;
                int64_t q = ny[d] * w + nx[d];
                if (pixels[q] && !seen[q]) {
                    seen[q] = 1;
                    stack.push_back(q);
                }
            }
        }
        comps.push_back(std::move(comp));
    }
    return comps;
}

// ---------------------------------------------------------------------------
// Synthetic dataset

namespace {

void class_color(int64_t c, int64_t num_classes, double rgb[3]) {
    if (c == 0) {
        rgb[0] = rgb[1] = rgb[2] = 0.5;
        return;
    }
    // evenly spaced hues, fixed saturation/value
    double hue = static_cast<double>(c - 1) / static_cast<double>(num_classes - 1);
    double hh = hue * 6.0;
    int sector = static_cast<int>(hh) % 6;
    double f = hh - std::floor(hh);
    const double v = 0.85, s = 0.85;
    double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
    switch (sector) {
        case 0: rgb[0] = v; rgb[1] = t; rgb[2] = p; break;
        case 1: rgb[0] = q; rgb[1] = v; rgb[2] = p; break;
        case 2: rgb[0] = p; rgb[1] = v; rgb[2] = t; break;
        case 3: rgb[0] = p; rgb[1] = q; rgb[2] = v; break;
        case 4: rgb[0] = t; rgb[1] = p; rgb[2] = v; break;
        default: rgb[0] = v; rgb[1] = p; rgb[2] = q; break;
    }
}

SegmentationSample synth_one(const SynthConfig& cfg, int64_t index, Rng& rng) {
    const int64_t sz = cfg.image_size;
    SegmentationSample s;
    char buf[32];
    std::snprintf(buf, sizeof buf, "s%04lld", static_cast<long long>(index));
    s.sample_id = buf;
    s.height = s.width = sz;
    s.image.resize(static_cast<size_t>(sz * sz * 3));
    for (auto& px : s.image) px = 0.5 + rng.uniform(-0.08, 0.08);

    std::vector<int> layer(static_cast<size_t>(sz * sz), 0);  // 0 = background
    std::vector<int64_t> layer_class = {0};
    for (int64_t k = 0; k < cfg.shapes_per_image; ++k) {
        int64_t c = rng.uniform_int(1, cfg.num_classes - 1);
        int64_t cx = rng.uniform_int(4, sz - 5);
        int64_t cy = rng.uniform_int(4, sz - 5);
        int64_t r = rng.uniform_int(4, std::max<int64_t>(4, sz / 4 - 1));
        double base[3];
        class_color(c, cfg.num_classes, base);
        double jit[3] = {rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05),
                         rng.uniform(-0.05, 0.05)};
        int shape = static_cast<int>((c - 1) % 3);
        int lid = static_cast<int>(layer_class.size());
        layer_class.push_back(c);
        for (int64_t y = 0; y < sz; ++y)
            for (int64_t x = 0; x < sz; ++x) {
                bool in = false;
                switch (shape) {
                    case 0:
                        in = std::llabs(x - cx) <= r && std::llabs(y - cy) <= r * 7 / 10 + 1;
                        break;
                    case 1:
                        in = (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r;
                        break;
                    default:
                        in = y >= cy - r && y <= cy + r &&
                             std::llabs(x - cx) <= static_cast<int64_t>((y - (cy - r)) * 0.6);
                        break;
                }
                if (in) {
                    layer[y * sz + x] = lid;
                    for (int ch = 0; ch < 3; ++ch)
                        s.image[(y * sz + x) * 3 + ch] = std::clamp(
                            base[ch] + jit[ch] + rng.uniform(-0.03, 0.03), 0.0, 1.0);
                }
            }
    }

    int64_t next_id = 0;
    for (size_t lid = 1; lid < layer_class.size(); ++lid) {
        std::vector<uint8_t> px(static_cast<size_t>(sz * sz), 0);
        int64_t area = 0;
        for (int64_t i = 0; i < sz * sz; ++i)
            if (layer[i] == static_cast<int>(lid)) {
                px[i] = 1;
                ++area;
            }
        if (area < 4) continue;  // fully occluded or sliver
        Segment seg;
        seg.segment_id = next_id++;
        seg.class_id = layer_class[lid];
        seg.mask = BinaryMask::encode(px, sz, sz);
        s.segments.push_back(std::move(seg));
    }
    std::vector<uint8_t> bg(static_cast<size_t>(sz * sz), 0);
    for (int64_t i = 0; i < sz * sz; ++i) bg[i] = layer[i] == 0 ? 1 : 0;
    for (auto& comp : connected_components(bg, sz, sz)) {
        Segment seg;
        seg.segment_id = next_id++;
        seg.class_id = 0;
        seg.mask = BinaryMask::encode(comp, sz, sz);
        s.segments.push_back(std::move(seg));
    }
    return s;
}

void validate_config(const SynthConfig& cfg) {
    if (cfg.num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (cfg.num_samples < 1) throw ConfigError("num_samples must be >= 1");
    if (cfg.patch_size <= 0 || cfg.image_size % cfg.patch_size != 0)
        throw ConfigError("image_size must be divisible by patch_size");
    if (cfg.shapes_per_image < 1) throw ConfigError("shapes_per_image must be >= 1");
}

// %.17g round-trips doubles exactly, so load(save(x)) == x bit for bit
std::string fmt_double(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

}  // namespace

std::vector<SegmentationSample> synthesize_samples(const SynthConfig& cfg) {
    validate_config(cfg);
    Rng rng(cfg.seed);
    std::vector<SegmentationSample> out;
    out.reserve(static_cast<size_t>(cfg.num_samples));
    for (int64_t i = 0; i < cfg.num_samples; ++i) out.push_back(synth_one(cfg, i, rng));
    return out;
}

void save_sample_json(const SegmentationSample& s, const std::string& path) {
    std::ostringstream os;
    os << "{\"sample_id\":\"" << s.sample_id << "\",\"height\":" << s.height
       << ",\"width\":" << s.width << ",\"image\":[";
    for (int64_t y = 0; y < s.height; ++y) {
        if (y) os << ",";
        os << "[";
        for (int64_t x = 0; x < s.width; ++x) {
            if (x) os << ",";
            os << "[";
            for (int ch = 0; ch < 3; ++ch) {
                if (ch) os << ",";
                os << fmt_double(s.image[(y * s.width + x) * 3 + ch]);
            }
            os << "]";
        }
        os << "]";
    }
    os << "],\"segments\":[";
    for (size_t i = 0; i < s.segments.size(); ++i) {
        const auto& seg = s.segments[i];
        if (i) os << ",";
        os << "{\"segment_id\":" << seg.segment_id << ",\"class_id\":" << seg.class_id
           << ",\"rle\":[";
        for (size_t r = 0; r < seg.mask.rle.size(); ++r) {
            if (r) os << ",";
            os << seg.mask.rle[r];
        }
        os << "]}";
    }
    os << "]}\n";
    std::ofstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot write " + path);
    f << os.str();
}

SegmentationSample load_sample_json(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("missing sample file: " + path);
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw FormatError("bad sample JSON " + path + ": " + e.what());
    }
    SegmentationSample s;
    try {
        s.sample_id = j.at("sample_id").get<std::string>();
        s.height = j.at("height").get<int64_t>();
        s.width = j.at("width").get<int64_t>();
        const auto& img = j.at("image");
        s.image.reserve(static_cast<size_t>(s.height * s.width * 3));
        for (const auto& row : img)
            for (const auto& px : row)
                for (const auto& ch : px) s.image.push_back(ch.get<double>());
        if (static_cast<int64_t>(s.image.size()) != s.height * s.width * 3)
            throw FormatError("image size mismatch");
        for (const auto& sj : j.at("segments")) {
            Segment seg;
            seg.segment_id = sj.at("segment_id").get<int64_t>();
            seg.class_id = sj.at("class_id").get<int64_t>();
            seg.mask.height = s.height;
            seg.mask.width = s.width;
            seg.mask.rle = sj.at("rle").get<std::vector<int64_t>>();
            seg.mask.validate();
            s.segments.push_back(std::move(seg));
        }
    } catch (const json::exception& e) {
        throw FormatError("bad sample " + path + ": " + e.what());
    } catch (const FormatError& e) {
        throw FormatError(std::string("sample ") + s.sample_id + ": " + e.what());
    }
    return s;
}

DatasetManifest synthesize_dataset(const SynthConfig& cfg, const std::string& out_dir) {
    auto samples = synthesize_samples(cfg);
    fs::create_directories(out_dir);
    DatasetManifest m;
    m.root = out_dir;
    m.num_classes = cfg.num_classes;
    m.patch_size = cfg.patch_size;
    std::ostringstream os;
    os << "{\"format_version\":\"fisa-lab/1\",\"num_classes\":" << cfg.num_classes
       << ",\"patch_size\":" << cfg.patch_size << ",\"samples\":[";
    for (size_t i = 0; i < samples.size(); ++i) {
        std::string fn = samples[i].sample_id + ".json";
        save_sample_json(samples[i], (fs::path(out_dir) / fn).string());
        m.sample_files.push_back(fn);
        if (i) os << ",";
        os << "\"" << fn << "\"";
    }
    os << "]}\n";
    std::ofstream f(fs::path(out_dir) / "manifest.json", std::ios::binary);
    f << os.str();
    return m;
}

Dataset load_dataset(const std::string& manifest_path) {
    std::ifstream f(manifest_path, std::ios::binary);
    if (!f) throw FormatError("missing manifest: " + manifest_path);
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw FormatError("bad manifest JSON: " + std::string(e.what()));
    }
    Dataset d;
    d.manifest.root = fs::path(manifest_path).parent_path().string();
    d.manifest.format_version = j.value("format_version", "");
    if (d.manifest.format_version != "fisa-lab/1")
        throw FormatError("unsupported format_version: " + d.manifest.format_version);
    d.manifest.num_classes = j.at("num_classes").get<int64_t>();
    d.manifest.patch_size = j.at("patch_size").get<int64_t>();
    d.manifest.sample_files = j.at("samples").get<std::vector<std::string>>();
    for (const auto& fn : d.manifest.sample_files)
        d.samples.push_back(load_sample_json((fs::path(d.manifest.root) / fn).string()));
    d.vocab = LabelVocabulary::synthetic(d.manifest.num_classes);
    return d;
}

}  // namespace fisa
