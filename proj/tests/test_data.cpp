#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "fisa/data.hpp"
#include "fisa/rng.hpp"

using namespace fisa;
namespace fs = std::filesystem;

namespace {

std::vector<uint8_t> random_pixels(Rng& rng, int64_t n, double p) {
    std::vector<uint8_t> px(n);
    for (auto& x : px) x = rng.bernoulli(p);
    return px;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f.good());
    return std::string(std::istreambuf_iterator<char>(f), {});
}

}  // namespace

TEST_CASE("rle roundtrip on random masks") {
    Rng rng(1);
    for (int trial = 0; trial < 200; ++trial) {
        const int64_t h = rng.uniform_int(1, 16), w = rng.uniform_int(1, 16);
        std::vector<uint8_t> px = random_pixels(rng, h * w, rng.uniform());
        BinaryMask m = BinaryMask::encode(px, h, w);
        m.validate();
        CHECK(m.decode() == px);
        int64_t area = 0;
        for (uint8_t x : px) area += x;
        CHECK(m.area() == area);
    }
}

TEST_CASE("rle starts with the zero run") {
    std::vector<uint8_t> px = {1, 1, 0, 1};
    BinaryMask m = BinaryMask::encode(px, 1, 4);
    REQUIRE(!m.rle.empty());
    CHECK(m.rle[0] == 0);  // leading zero-count even when mask starts with 1
}

TEST_CASE("validate rejects rle sum mismatch") {
    BinaryMask m;
    m.height = 2;
    m.width = 2;
    m.rle = {1, 2};  // sums to 3, not 4
    CHECK_THROWS_AS(m.validate(), FormatError);
}

TEST_CASE("mask_iou equals set arithmetic") {
    Rng rng(2);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<uint8_t> a = random_pixels(rng, 64, 0.4);
        std::vector<uint8_t> b = random_pixels(rng, 64, 0.4);
        int64_t inter = 0, uni = 0;
        for (int i = 0; i < 64; ++i) {
            inter += a[i] && b[i];
            uni += a[i] || b[i];
        }
        const double expect = uni ? static_cast<double>(inter) / uni : 0.0;
        CHECK(mask_iou(a, b) == expect);
    }
}

TEST_CASE("rasterize marks exactly the patches containing mask pixels") {
    Rng rng(3);
    const int64_t h = 16, w = 16, ps = 4;
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<uint8_t> px = random_pixels(rng, h * w, 0.1);
        std::vector<bool> got = rasterize_pixels_to_patches(px, h, w, ps);
        REQUIRE(static_cast<int64_t>(got.size()) == (h / ps) * (w / ps));
        for (int64_t gy = 0; gy < h / ps; ++gy)
            for (int64_t gx = 0; gx < w / ps; ++gx) {
                bool any = false;
                for (int64_t py = 0; py < ps; ++py)
                    for (int64_t pxx = 0; pxx < ps; ++pxx)
                        any = any || px[(gy * ps + py) * w + gx * ps + pxx];
                CHECK(got[gy * (w / ps) + gx] == any);
            }
    }
}

TEST_CASE("connected_components separates disjoint blobs") {
    // two L-shaped blobs touching only diagonally stay separate (4-conn)
    std::vector<uint8_t> px(16, 0);
    px[0] = px[1] = px[4] = 1;   // blob A
    px[10] = px[11] = px[15] = 1;  // blob B
    auto comps = connected_components(px, 4, 4);
    REQUIRE(comps.size() == 2);
    int64_t total = 0;
    for (const auto& c : comps)
        for (uint8_t x : c) total += x;
    CHECK(total == 6);
}

TEST_CASE("vocabulary rejects duplicates and names classes") {
    CHECK_THROWS_AS(LabelVocabulary({"a", "a"}, {true, true}), ConfigError);
    LabelVocabulary v = LabelVocabulary::synthetic(5);
    CHECK(v.size() == 5);
    CHECK(v.class_names[0] == "background");
    CHECK_FALSE(v.is_thing[0]);
    for (int64_t c = 1; c < 5; ++c) CHECK(v.is_thing[c]);
}

TEST_CASE("synthetic samples are valid and deterministic") {
    SynthConfig cfg;
    cfg.num_samples = 8;
    cfg.seed = 5;
    auto a = synthesize_samples(cfg);
    auto b = synthesize_samples(cfg);
    REQUIRE(a.size() == 8);
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].image == b[i].image);
        REQUIRE(a[i].segments.size() == b[i].segments.size());
        CHECK(!a[i].segments.empty());
        // segments partition the image: disjoint and total
        std::vector<uint8_t> owned(a[i].height * a[i].width, 0);
        for (const auto& seg : a[i].segments) {
            CHECK(seg.class_id >= 0);
            CHECK(seg.class_id < cfg.num_classes);
            CHECK(seg.mask.area() >= 4);
            std::vector<uint8_t> px = seg.mask.decode();
            for (size_t p = 0; p < owned.size(); ++p) {
                if (!px[p]) continue;
                CHECK(owned[p] == 0);
                owned[p] = 1;
            }
        }
        for (uint8_t o : owned) CHECK(o == 1);
        for (double x : a[i].image) {
            CHECK(x >= 0.0);
            CHECK(x <= 1.0);
        }
    }
}

TEST_CASE("sample json roundtrip preserves everything") {
    SynthConfig cfg;
    cfg.num_samples = 2;
    cfg.seed = 9;
    auto samples = synthesize_samples(cfg);
    fs::path dir = fs::temp_directory_path() / "fisa_data_test";
    fs::create_directories(dir);
    const std::string path = (dir / "s.json").string();
    save_sample_json(samples[0], path);
    SegmentationSample back = load_sample_json(path);
    CHECK(back.sample_id == samples[0].sample_id);
    CHECK(back.height == samples[0].height);
    CHECK(back.image == samples[0].image);
    REQUIRE(back.segments.size() == samples[0].segments.size());
    for (size_t i = 0; i < back.segments.size(); ++i) {
        CHECK(back.segments[i].class_id == samples[0].segments[i].class_id);
        CHECK(back.segments[i].mask.rle == samples[0].segments[i].mask.rle);
    }
    fs::remove_all(dir);
}

TEST_CASE("dataset write is byte-deterministic and loads back") {
    SynthConfig cfg;
    cfg.num_samples = 4;
    cfg.seed = 21;
    fs::path d1 = fs::temp_directory_path() / "fisa_ds1";
    fs::path d2 = fs::temp_directory_path() / "fisa_ds2";
    fs::remove_all(d1);
    fs::remove_all(d2);
    DatasetManifest m1 = synthesize_dataset(cfg, d1.string());
    synthesize_dataset(cfg, d2.string());
    CHECK(m1.format_version == "fisa-lab/1");
    CHECK(slurp(d1 / "manifest.json") == slurp(d2 / "manifest.json"));
    for (const auto& f : m1.sample_files) CHECK(slurp(d1 / f) == slurp(d2 / f));

    Dataset ds = load_dataset((d1 / "manifest.json").string());
    CHECK(ds.samples.size() == 4);
    CHECK(ds.vocab.size() == cfg.num_classes);
    CHECK_THROWS_AS(load_dataset((d1 / "nope.json").string()), FormatError);
    fs::remove_all(d1);
    fs::remove_all(d2);
}
