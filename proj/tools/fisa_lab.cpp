// fisa-lab: synthetic-data experiments for masked open-vocabulary
// segmentation. Subcommands: synth-data, train, eval, ablate, report.
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "fisa/data.hpp"
#include "fisa/metrics.hpp"
#include "fisa/train.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace fisa;

namespace {

uint64_t env_seed_default() {
    const char* s = std::getenv("FISA_LAB_SEED");
    if (!s || !*s) return 0;
    try {
        return std::stoull(s);
    } catch (const std::exception&) {
        throw ConfigError("FISA_LAB_SEED is not an integer");
    }
}

struct RunConfig {
    std::string data;
    std::string out;
    uint64_t seed = 0;
    ModelConfig model;
    CorruptionConfig corruption;
    TrainConfig train;
    std::string partition = "simo";
    std::string oracle = "none";
    double train_fraction = 1.0;
    bool seve = true;

    json to_json() const {
        json j;
        j["data"] = data;
        j["seed"] = seed;
        j["model"] = json::parse(model.to_json());
        j["model"]["seve_enabled"] = seve;
        j["corruption"] = {{"jitter", corruption.boundary_jitter_px},
                           {"drop", corruption.drop_prob},
                           {"split", corruption.split_prob},
                           {"spurious", corruption.spurious_count},
                           {"max_proposals", corruption.max_proposals},
                           {"seed", corruption.seed}};
        j["train"] = {{"iterations", train.iterations},
                      {"batch_size", train.batch_size},
                      {"lr", train.lr},
                      {"weight_decay", train.weight_decay},
                      {"holdout_fraction", train.holdout_fraction},
                      {"seed", train.seed}};
        j["partition"] = partition;
        j["oracle"] = oracle;
        j["train_fraction"] = train_fraction;
        return j;
    }

    void apply_json(const json& j) {
        data = j.value("data", data);
        seed = j.value("seed", seed);
        if (j.contains("model")) {
            json m = j["model"];
            seve = m.value("seve_enabled", seve);
            m.erase("seve_enabled");
            model = ModelConfig::from_json(m.dump());
        }
        if (j.contains("corruption")) {
            const json& c = j["corruption"];
            corruption.boundary_jitter_px = c.value("jitter", corruption.boundary_jitter_px);
            corruption.drop_prob = c.value("drop", corruption.drop_prob);
            corruption.split_prob = c.value("split", corruption.split_prob);
            corruption.spurious_count = c.value("spurious", corruption.spurious_count);
            corruption.max_proposals = c.value("max_proposals", corruption.max_proposals);
            corruption.seed = c.value("seed", corruption.seed);
        }
        if (j.contains("train")) {
            const json& t = j["train"];
            train.iterations = t.value("iterations", train.iterations);
            train.batch_size = t.value("batch_size", train.batch_size);
            train.lr = t.value("lr", train.lr);
            train.weight_decay = t.value("weight_decay", train.weight_decay);
            train.holdout_fraction = t.value("holdout_fraction", train.holdout_fraction);
            train.seed = t.value("seed", train.seed);
        }
        partition = j.value("partition", partition);
        oracle = j.value("oracle", oracle);
        train_fraction = j.value("train_fraction", train_fraction);
    }
};

void write_text(const std::string& path, const std::string& body) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot write " + path);
    f << body;
}

void archive_config(const RunConfig& rc, const std::string& dir) {
    write_text(dir + "/config.json", rc.to_json().dump(2) + "\n");
}

// Splits a dataset into a train slice (first train_fraction of the non
// holdout prefix) and a holdout tail.
void split_dataset(const Dataset& ds, double holdout_fraction, double train_fraction,
                   std::vector<SegmentationSample>& train,
                   std::vector<SegmentationSample>& holdout) {
    const int64_t n = static_cast<int64_t>(ds.samples.size());
    int64_t hold = static_cast<int64_t>(std::llround(holdout_fraction * n));
    hold = std::min(hold, n);
    const int64_t avail = n - hold;
    int64_t take = static_cast<int64_t>(std::ceil(train_fraction * avail));
    take = std::clamp<int64_t>(take, avail > 0 ? 1 : 0, avail);
    train.assign(ds.samples.begin(), ds.samples.begin() + take);
    holdout.assign(ds.samples.end() - hold, ds.samples.end());
}

Model build_model(const RunConfig& rc, const Dataset& ds) {
    ModelConfig mc = rc.model;
    mc.image_size = ds.samples.empty() ? mc.image_size : ds.samples.front().height;
    mc.patch_size = ds.manifest.patch_size > 0 ? ds.manifest.patch_size : mc.patch_size;
    if (!rc.seve) mc.seve_layers.clear();
    mc.validate();
    return Model::init(mc, rc.seed);
}

int run_train(const RunConfig& rc) {
    Dataset ds = load_dataset(rc.data + "/manifest.json");
    std::vector<SegmentationSample> train, holdout;
    split_dataset(ds, rc.train.holdout_fraction, rc.train_fraction, train, holdout);
    Model model = build_model(rc, ds);
    TrainMode mode = train_mode_from_string(rc.partition);
    ParameterPartition part = partition_parameters(model, mode);
    int64_t trainable_scalars = 0;
    for (const auto& name : part.trainable)
        trainable_scalars += model.params.at(name).numel();

    fs::create_directories(rc.out);
    archive_config(rc, rc.out);
    std::ofstream log(rc.out + "/train_log.jsonl", std::ios::binary);
    if (!log) throw FormatError("cannot write train log");
    TrainConfig tc = rc.train;
    tc.seed = rc.seed;
    TrainResult result = train_model(
        model, train, holdout, rc.corruption, mode, tc, ds.vocab,
        [&](const IterationStats& st) {
            char line[256];
            std::snprintf(line, sizeof line,
                          "{\"iter\":%lld,\"total\":%.9g,\"ce\":%.9g,\"dice\":%.9g,"
                          "\"bce\":%.9g,\"trainable_params\":%lld}\n",
                          static_cast<long long>(st.iteration), st.total, st.ce, st.dice,
                          st.bce, static_cast<long long>(trainable_scalars));
            log << line;
        });
    log.close();
    save_checkpoint(model, rc.out + "/checkpoint.bin");
    std::printf("trained %lld iterations, %lld trainable scalars, holdout accuracy %.4f\n",
                static_cast<long long>(tc.iterations),
                static_cast<long long>(trainable_scalars), result.final_holdout_accuracy);
    return 0;
}

json eval_to_json(const EvalResult& r, const RunConfig& rc, const LabelVocabulary& vocab) {
    json j;
    j["aggregate"] = {{"pq", r.pq}, {"sq", r.sq}, {"rq", r.rq}, {"miou", r.miou}};
    j["samples"] = r.sample_count;
    j["oracle"] = rc.oracle;
    j["metadata"] = {
        {"oracle_classifier_ties", "lowest ground-truth segment index"},
        {"oracle_classifier_zero_overlap", "proposal dropped"},
        {"overlap_resolution", "descending confidence, first paint wins"}};
    json per_class = json::array();
    for (int64_t c = 0; c < vocab.size(); ++c) {
        const PqClassStats& s = r.per_class_pq[c];
        per_class.push_back({{"class", vocab.class_names[c]},
                             {"pq", s.pq()},
                             {"sq", s.sq()},
                             {"rq", s.rq()},
                             {"tp", s.tp},
                             {"fp", s.fp},
                             {"fn", s.fn},
                             {"iou", r.per_class_iou[c]}});
    }
    j["per_class"] = per_class;
    return j;
}

std::string eval_to_csv(const EvalResult& r, const std::string& run,
                        const LabelVocabulary& vocab) {
    std::string csv = "run,metric,class,value\n";
    char line[256];
    auto row = [&](const char* metric, const std::string& cls, double v) {
        std::snprintf(line, sizeof line, "%s,%s,%s,%.9g\n", run.c_str(), metric, cls.c_str(),
                      v);
        csv += line;
    };
    const double agg[4] = {r.pq, r.sq, r.rq, r.miou};
    const char* names[4] = {"pq", "sq", "rq", "miou"};
    for (int m = 0; m < 4; ++m) {
        for (int64_t c = 0; c < vocab.size(); ++c) {
            const PqClassStats& s = r.per_class_pq[c];
            double v = m == 0 ? s.pq() : m == 1 ? s.sq() : m == 2 ? s.rq()
                                                                  : r.per_class_iou[c];
            row(names[m], vocab.class_names[c], v);
        }
        row(names[m], "all", agg[m]);
    }
    return csv;
}

int run_eval(const RunConfig& rc, const std::string& checkpoint,
             const std::string& proposals_path) {
    Dataset ds = load_dataset(rc.data + "/manifest.json");
    Model model = checkpoint.empty() ? build_model(rc, ds) : load_checkpoint(checkpoint);
    OracleMode mode = oracle_mode_from_string(rc.oracle);
    std::map<std::string, MaskProposalSet> pre;
    const std::map<std::string, MaskProposalSet>* prep = nullptr;
    if (!proposals_path.empty()) {
        pre = load_precomputed_proposals(proposals_path, ds.manifest);
        for (const auto& s : ds.samples) {
            auto it = pre.find(s.sample_id);
            if (it != pre.end()) finalize_precomputed(it->second, s);
        }
        prep = &pre;
    }
    EvalResult r = evaluate_dataset(model, ds.samples, rc.corruption, ds.vocab, mode, prep);
    fs::create_directories(rc.out);
    archive_config(rc, rc.out);
    write_text(rc.out + "/results.json", eval_to_json(r, rc, ds.vocab).dump(2) + "\n");
    write_text(rc.out + "/results.csv",
               eval_to_csv(r, fs::path(rc.out).filename().string(), ds.vocab));
    std::printf("PQ %.4f SQ %.4f RQ %.4f mIoU %.4f over %lld samples\n", r.pq, r.sq, r.rq,
                r.miou, static_cast<long long>(r.sample_count));
    return 0;
}

// ---------------------------------------------------------------------------
// report helpers

std::string svg_bar_chart(const std::vector<std::pair<std::string, double>>& rows,
                          const std::string& title) {
    const int w = 640, bar_h = 28, gap = 10, left = 170, top = 40;
    const int h = top + static_cast<int>(rows.size()) * (bar_h + gap) + 20;
    double vmax = 1e-9;
    for (const auto& [n, v] : rows) vmax = std::max(vmax, v);
    std::string s;
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" height=\"%d\">\n"
                  "<text x=\"10\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\">%s"
                  "</text>\n",
                  w, h, title.c_str());
    s += buf;
    int y = top;
    for (const auto& [name, v] : rows) {
        const int bw = static_cast<int>((w - left - 80) * (v / vmax));
        std::snprintf(buf, sizeof buf,
                      "<text x=\"10\" y=\"%d\" font-family=\"sans-serif\" font-size=\"13\">"
                      "%s</text>\n"
                      "<rect x=\"%d\" y=\"%d\" width=\"%d\" height=\"%d\" fill=\"#4477aa\"/>"
                      "\n<text x=\"%d\" y=\"%d\" font-family=\"sans-serif\" font-size=\"13\">"
                      "%.3f</text>\n",
                      y + bar_h - 9, name.c_str(), left, y, std::max(bw, 1), bar_h,
                      left + std::max(bw, 1) + 6, y + bar_h - 9, v);
        s += buf;
        y += bar_h + gap;
    }
    s += "</svg>\n";
    return s;
}

std::string markdown_table(const std::vector<std::pair<std::string, EvalResult>>& rows) {
    std::string md = "| variant | PQ | SQ | RQ | mIoU |\n|---|---|---|---|---|\n";
    char buf[256];
    for (const auto& [name, r] : rows) {
        std::snprintf(buf, sizeof buf, "| %s | %.4f | %.4f | %.4f | %.4f |\n", name.c_str(),
                      r.pq, r.sq, r.rq, r.miou);
        md += buf;
    }
    return md;
}

// ---------------------------------------------------------------------------
// ablate

struct Variant {
    std::string name;
    bool seve = true;
    std::string partition = "simo";
    std::string oracle = "none";
    double train_fraction = 1.0;
    int64_t iterations = -1;  // -1: keep the suite default
};

int run_ablate(RunConfig rc, const std::string& suite, int64_t seeds) {
    std::vector<Variant> variants;
    if (suite == "seve-simo") {
        rc.train_fraction = 0.10;
        variants = {{"baseline", false, "frozen"},
                    {"+seve", true, "seve"},
                    {"+seve+full", true, "full"},
                    {"+seve+simo", true, "simo"}};
    } else if (suite == "oracle") {
        rc.corruption.boundary_jitter_px = 2;
        rc.corruption.drop_prob = 0.15;
        rc.train.iterations = std::min<int64_t>(rc.train.iterations, 100);
        rc.train.lr = std::min(rc.train.lr, 1e-4);  // keep the classifier weak
        variants = {{"none", true, "simo", "none"},
                    {"oracle-classifier", true, "simo", "classifier"},
                    {"oracle-generator", true, "simo", "generator"}};
    } else if (suite == "data-fraction") {
        variants = {{"frac-1pct", true, "simo", "none", 0.01},
                    {"frac-10pct", true, "simo", "none", 0.10},
                    {"frac-100pct", true, "simo", "none", 1.00}};
    } else if (suite == "iterations") {
        for (int64_t it : {10, 50, 200, 500})
            variants.push_back({"iters-" + std::to_string(it), true, "simo", "none", 1.0, it});
    } else {
        throw ConfigError("unknown suite: " + suite);
    }

    Dataset ds = load_dataset(rc.data + "/manifest.json");
    fs::create_directories(rc.out);
    std::vector<std::pair<std::string, EvalResult>> table;
    for (const Variant& v : variants) {
        EvalResult mean;
        for (int64_t s = 0; s < seeds; ++s) {
            RunConfig vc = rc;
            vc.seve = v.seve;
            vc.partition = v.partition;
            vc.oracle = v.oracle;
            if (v.train_fraction != 1.0 || suite == "data-fraction")
                vc.train_fraction = v.train_fraction;
            if (v.iterations >= 0) vc.train.iterations = v.iterations;
            vc.seed = rc.seed + static_cast<uint64_t>(s);
            vc.out = rc.out + "/" + v.name + "-seed" + std::to_string(vc.seed);
            fs::create_directories(vc.out);
            try {
                std::vector<SegmentationSample> train, holdout;
                split_dataset(ds, vc.train.holdout_fraction, vc.train_fraction, train,
                              holdout);
                Model model = build_model(vc, ds);
                TrainConfig tc = vc.train;
                tc.seed = vc.seed;
                TrainMode mode = train_mode_from_string(vc.partition);
                train_model(model, train, holdout, vc.corruption, mode, tc, ds.vocab);
                save_checkpoint(model, vc.out + "/checkpoint.bin");
                archive_config(vc, vc.out);
                EvalResult r =
                    evaluate_dataset(model, holdout, vc.corruption, ds.vocab,
                                     oracle_mode_from_string(vc.oracle));
                write_text(vc.out + "/results.json",
                           eval_to_json(r, vc, ds.vocab).dump(2) + "\n");
                mean.pq += r.pq / seeds;
                mean.sq += r.sq / seeds;
                mean.rq += r.rq / seeds;
                mean.miou += r.miou / seeds;
                mean.sample_count += r.sample_count;
            } catch (const std::exception& e) {
                throw ConfigError("ablation variant '" + v.name + "' failed: " + e.what());
            }
        }
        table.push_back({v.name, mean});
        std::printf("%-18s PQ %.4f mIoU %.4f\n", v.name.c_str(), mean.pq, mean.miou);
    }
    write_text(rc.out + "/table.md", markdown_table(table));
    std::vector<std::pair<std::string, double>> bars;
    for (const auto& [n, r] : table) bars.push_back({n, r.pq});
    write_text(rc.out + "/chart.svg", svg_bar_chart(bars, "PQ by variant: " + suite));
    return 0;
}

int run_report(const std::vector<std::string>& inputs, const std::string& out) {
    std::vector<std::pair<std::string, EvalResult>> table;
    for (const std::string& path : inputs) {
        std::ifstream f(path);
        if (!f) throw FormatError("cannot read " + path);
        json j = json::parse(f, nullptr, false);
        if (j.is_discarded() || !j.contains("aggregate"))
            throw FormatError("not a results file: " + path);
        EvalResult r;
        r.pq = j["aggregate"].value("pq", 0.0);
        r.sq = j["aggregate"].value("sq", 0.0);
        r.rq = j["aggregate"].value("rq", 0.0);
        r.miou = j["aggregate"].value("miou", 0.0);
        std::string name = fs::path(path).parent_path().filename();
        if (name.empty()) name = path;
        table.push_back({name, r});
    }
    fs::create_directories(out);
    write_text(out + "/report.md", markdown_table(table));
    std::vector<std::pair<std::string, double>> bars;
    for (const auto& [n, r] : table) bars.push_back({n, r.pq});
    write_text(out + "/chart.svg", svg_bar_chart(bars, "PQ by run"));
    std::printf("wrote %s/report.md and %s/chart.svg\n", out.c_str(), out.c_str());
    return 0;
}

// pre-scan so config-file values become flag defaults; explicit flags then
// override them
void maybe_apply_config_file(int argc, char** argv, RunConfig& rc) {
    for (int i = 1; i + 1 < argc; ++i) {
        if (std::string(argv[i]) == "--config") {
            std::ifstream f(argv[i + 1]);
            if (!f) throw ConfigError(std::string("cannot read config file ") + argv[i + 1]);
            json j = json::parse(f, nullptr, false);
            if (j.is_discarded())
                throw FormatError(std::string("invalid JSON in ") + argv[i + 1]);
            rc.apply_json(j);
        }
    }
}

}  // namespace

int main(int argc, char** argv) {
    try {
        CLI::App app{"synthetic-data lab for masked open-vocabulary segmentation"};
        app.require_subcommand(1);

        RunConfig rc;
        rc.seed = env_seed_default();
        rc.train.seed = rc.seed;
        maybe_apply_config_file(argc, argv, rc);
        std::string config_path, checkpoint, proposals_path, suite = "seve-simo";
        int64_t seeds = 1;

        SynthConfig sc;
        sc.seed = rc.seed;
        std::string synth_out;
        auto* synth = app.add_subcommand("synth-data", "generate a synthetic dataset");
        synth->add_option("--out", synth_out, "output directory")->required();
        synth->add_option("--num-samples", sc.num_samples);
        synth->add_option("--image-size", sc.image_size);
        synth->add_option("--num-classes", sc.num_classes);
        synth->add_option("--shapes", sc.shapes_per_image);
        synth->add_option("--patch-size", sc.patch_size);
        synth->add_option("--seed", sc.seed);

        auto add_common = [&](CLI::App* cmd, bool with_train) {
            cmd->add_option("--config", config_path, "JSON config file; flags override");
            cmd->add_option("--data", rc.data, "dataset directory")->required();
            cmd->add_option("--out", rc.out, "output directory")->required();
            cmd->add_option("--seed", rc.seed);
            cmd->add_option("--jitter", rc.corruption.boundary_jitter_px);
            cmd->add_option("--drop", rc.corruption.drop_prob);
            cmd->add_option("--split", rc.corruption.split_prob);
            cmd->add_option("--spurious", rc.corruption.spurious_count);
            cmd->add_option("--max-proposals", rc.corruption.max_proposals);
            if (with_train) {
                cmd->add_option("--partition", rc.partition,
                                "frozen|seve|simo|full|simo+lang|simo+gen");
                cmd->add_option("--iterations", rc.train.iterations);
                cmd->add_option("--batch-size", rc.train.batch_size);
                cmd->add_option("--lr", rc.train.lr);
                cmd->add_option("--weight-decay", rc.train.weight_decay);
                cmd->add_option("--holdout-fraction", rc.train.holdout_fraction);
                cmd->add_option("--train-fraction", rc.train_fraction);
                cmd->add_flag("--seve,!--no-seve", rc.seve,
                              "enable/disable semantic guidance layers");
            }
        };

        auto* train = app.add_subcommand("train", "train a model");
        add_common(train, true);

        auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
        add_common(eval, false);
        eval->add_option("--checkpoint", checkpoint, "checkpoint.bin path");
        eval->add_option("--oracle", rc.oracle, "none|classifier|generator");
        eval->add_option("--proposals", proposals_path, "precomputed proposals file");

        auto* ablate = app.add_subcommand("ablate", "run an ablation suite");
        add_common(ablate, true);
        ablate->add_option("--suite", suite, "seve-simo|oracle|data-fraction|iterations");
        ablate->add_option("--seeds", seeds, "independent seeded repetitions");

        std::vector<std::string> report_in;
        std::string report_out;
        auto* report = app.add_subcommand("report", "summarize results files");
        report->add_option("inputs", report_in, "results.json files")->required();
        report->add_option("--out", report_out, "output directory")->required();

        try {
            app.parse(argc, argv);
        } catch (const CLI::ParseError& e) {
            if (e.get_exit_code() == 0) return app.exit(e);
            std::cerr << e.what() << "\n";
            return 2;
        }

        if (synth->parsed()) {
            synthesize_dataset(sc, synth_out);
            std::printf("wrote %lld samples to %s\n", static_cast<long long>(sc.num_samples),
                        synth_out.c_str());
            return 0;
        }
        rc.corruption.seed = rc.seed;
        rc.train.seed = rc.seed;
        if (train->parsed()) return run_train(rc);
        if (eval->parsed()) return run_eval(rc, checkpoint, proposals_path);
        if (ablate->parsed()) return run_ablate(rc, suite, seeds);
        if (report->parsed()) return run_report(report_in, report_out);
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
