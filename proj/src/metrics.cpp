#include "fisa/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fisa/kernels.hpp"

namespace fisa {

OracleMode oracle_mode_from_string(const std::string& s) {
    if (s == "none") return OracleMode::kNone;
    if (s == "classifier") return OracleMode::kOracleClassifier;
    if (s == "generator") return OracleMode::kOracleGenerator;
    throw ConfigError("unknown oracle mode: " + s);
}

std::string oracle_mode_to_string(OracleMode m) {
    switch (m) {
        case OracleMode::kNone: return "none";
        case OracleMode::kOracleClassifier: return "classifier";
        case OracleMode::kOracleGenerator: return "generator";
    }
    throw ConfigError("unknown oracle mode");
}

std::vector<int64_t> PanopticPrediction::semantic_map() const {
    std::vector<int64_t> sem(static_cast<size_t>(height * width), -1);
    for (const auto& s : segments) {
        std::vector<uint8_t> px = s.mask.decode();
        for (size_t p = 0; p < px.size(); ++p) {
            if (!px[p]) continue;
            if (sem[p] != -1) throw ConfigError("overlapping predicted segments");
            sem[p] = s.class_id;
        }
    }
    return sem;
}

double PqClassStats::pq() const {
    const double d = static_cast<double>(tp) + 0.5 * fp + 0.5 * fn;
    return d > 0 ? iou_sum / d : 0.0;
}
double PqClassStats::sq() const { return tp > 0 ? iou_sum / tp : 0.0; }
double PqClassStats::rq() const {
    const double d = static_cast<double>(tp) + 0.5 * fp + 0.5 * fn;
    return d > 0 ? tp / d : 0.0;
}

MiouStats compute_miou(const std::vector<int64_t>& pred_semantic,
                       const std::vector<int64_t>& gt_semantic, int64_t num_classes) {
    if (pred_semantic.size() != gt_semantic.size())
        throw ShapeError("semantic map size mismatch");
    std::vector<int64_t> inter(num_classes, 0), pc(num_classes, 0), gc(num_classes, 0);
    for (size_t i = 0; i < pred_semantic.size(); ++i) {
        const int64_t p = pred_semantic[i], g = gt_semantic[i];
        if (p >= num_classes || g >= num_classes || p < -1 || g < -1)
            throw ConfigError("class id out of range in semantic map");
        if (g == -1) continue;  // void ground truth: pixel excluded entirely
        if (p >= 0) ++pc[p];
        ++gc[g];
        if (p == g) ++inter[p];
    }
    MiouStats out;
    out.per_class_iou.assign(num_classes, -1.0);
    double sum = 0.0;
    int64_t present = 0;
    for (int64_t c = 0; c < num_classes; ++c) {
        const int64_t uni = pc[c] + gc[c] - inter[c];
        if (uni == 0) continue;
        out.per_class_iou[c] = static_cast<double>(inter[c]) / uni;
        sum += out.per_class_iou[c];
        ++present;
    }
    out.miou = present > 0 ? sum / present : 0.0;
    return out;
}

PqStats compute_pq(const PanopticPrediction& pred, const std::vector<Segment>& gt,
                   int64_t num_classes) {
    pred.semantic_map();  // validates disjointness
    PqStats out;
    out.per_class.assign(num_classes, PqClassStats{});
    std::vector<char> gt_matched(gt.size(), 0), pred_matched(pred.segments.size(), 0);
    for (size_t i = 0; i < pred.segments.size(); ++i) {
        const auto& ps = pred.segments[i];
        if (ps.class_id < 0 || ps.class_id >= num_classes)
            throw ConfigError("predicted class out of range");
        for (size_t j = 0; j < gt.size(); ++j) {
            if (gt[j].class_id != ps.class_id) continue;
            const double iou = mask_iou(ps.mask, gt[j].mask);
            if (iou > 0.5) {
                // unique by the >0.5 theorem: no other pair can exceed 0.5
                out.per_class[ps.class_id].iou_sum += iou;
                out.per_class[ps.class_id].tp += 1;
                gt_matched[j] = 1;
                pred_matched[i] = 1;
            }
        }
    }
    for (size_t i = 0; i < pred.segments.size(); ++i)
        if (!pred_matched[i]) out.per_class[pred.segments[i].class_id].fp += 1;
    for (size_t j = 0; j < gt.size(); ++j) {
        if (gt[j].class_id < 0 || gt[j].class_id >= num_classes)
            throw ConfigError("ground-truth class out of range");
        if (!gt_matched[j]) out.per_class[gt[j].class_id].fn += 1;
    }
    double pq = 0, sq = 0, rq = 0;
    int64_t defined = 0;
    for (const auto& c : out.per_class) {
        if (!c.defined()) continue;
        pq += c.pq();
        sq += c.sq();
        rq += c.rq();
        ++defined;
    }
    if (defined > 0) {
        out.pq = pq / defined;
        out.sq = sq / defined;
        out.rq = rq / defined;
    }
    return out;
}

namespace {

struct LabeledProposal {
    int64_t class_id;
    double confidence;
    int64_t index;
};

}  // namespace

PanopticPrediction predict_panoptic(const Model& model, const SegmentationSample& sample,
                                    const MaskProposalSet& proposals,
                                    const TextEncoding& text, const LabelVocabulary& vocab,
                                    OracleMode mode) {
    PanopticPrediction out;
    out.height = sample.height;
    out.width = sample.width;
    if (proposals.proposals.empty()) return out;
    const int64_t m = static_cast<int64_t>(proposals.proposals.size());
    std::vector<LabeledProposal> labeled;

    if (mode == OracleMode::kOracleClassifier) {
        for (int64_t i = 0; i < m; ++i) {
            double best_iou = 0.0;
            int64_t best = -1;
            for (size_t j = 0; j < sample.segments.size(); ++j) {
                const double iou = mask_iou(proposals.proposals[i].binary,
                                            sample.segments[j].mask);
                if (iou > best_iou) {  // strict: ties keep the lower index
                    best_iou = iou;
                    best = static_cast<int64_t>(j);
                }
            }
            if (best < 0) continue;  // zero overlap with every segment: drop
            labeled.push_back({sample.segments[best].class_id, best_iou, i});
        }
    } else {
        ad::Tape tape;
        ForwardResult fwd =
            forward_sample(tape, model, sample, proposals, text, vocab, ForwardOptions{});
        const Tensor& logits = tape.val(fwd.logits);
        Tensor probs = kernels::softmax_rows(logits);
        const int64_t k = logits.cols() - 1;
        for (int64_t i = 0; i < m; ++i) {
            int64_t arg = 0;
            for (int64_t j = 1; j <= k; ++j)
                if (logits.at(i, j) > logits.at(i, arg)) arg = j;
            if (arg == k) continue;  // no-object wins: drop the proposal
            labeled.push_back({arg, probs.at(i, arg), i});
        }
    }

    std::stable_sort(labeled.begin(), labeled.end(),
                     [](const LabeledProposal& a, const LabeledProposal& b) {
                         return a.confidence > b.confidence;
                     });

    std::vector<int64_t> owner(static_cast<size_t>(out.height * out.width), -1);
    int64_t next_id = 1;
    for (const auto& lp : labeled) {
        std::vector<uint8_t> px = proposals.proposals[lp.index].binary.decode();
        std::vector<uint8_t> claimed(px.size(), 0);
        int64_t area = 0;
        for (size_t p = 0; p < px.size(); ++p) {
            if (px[p] && owner[p] == -1) {
                owner[p] = lp.index;
                claimed[p] = 1;
                ++area;
            }
        }
        if (area == 0) continue;
        PredictedSegment seg;
        seg.segment_id = next_id++;
        seg.class_id = lp.class_id;
        seg.confidence = lp.confidence;
        seg.mask = BinaryMask::encode(claimed, out.height, out.width);
        out.segments.push_back(std::move(seg));
    }
    return out;
}

EvalResult evaluate_dataset(const Model& model, const std::vector<SegmentationSample>& samples,
                            const CorruptionConfig& corruption, const LabelVocabulary& vocab,
                            OracleMode mode,
                            const std::map<std::string, MaskProposalSet>* precomputed) {
    const int64_t k = vocab.size();
    TextEncoding text = encode_text_labels(model, vocab);
    EvalResult out;
    out.per_class_pq.assign(k, PqClassStats{});
    std::vector<int64_t> inter(k, 0), pc(k, 0), gc(k, 0);

    // validate up front: an exception inside the parallel loop would not
    // propagate cleanly
    if (precomputed && mode != OracleMode::kOracleGenerator) {
        for (const auto& s : samples)
            if (!precomputed->count(s.sample_id))
                throw FormatError("no precomputed proposals for sample " + s.sample_id);
    }

    struct SampleStats {
        std::vector<PqClassStats> pq;
        std::vector<int64_t> inter, pc, gc;
    };
    std::vector<SampleStats> per_sample(samples.size());

#pragma omp parallel for schedule(dynamic) if (samples.size() > 1)
    for (int64_t s = 0; s < static_cast<int64_t>(samples.size()); ++s) {
        const SegmentationSample& sample = samples[s];
        MaskProposalSet props;
        if (mode == OracleMode::kOracleGenerator) {
            props = oracle_proposals(sample);
        } else if (precomputed) {
            auto it = precomputed->find(sample.sample_id);
            if (it == precomputed->end())
                throw FormatError("no precomputed proposals for sample " + sample.sample_id);
            props = it->second;
        } else {
            props = generate_proposals(sample, corruption);
        }
        PanopticPrediction pred =
            predict_panoptic(model, sample, props, text, vocab, mode);
        PqStats pq = compute_pq(pred, sample.segments, k);
        SampleStats st;
        st.pq = pq.per_class;
        st.inter.assign(k, 0);
        st.pc.assign(k, 0);
        st.gc.assign(k, 0);
        std::vector<int64_t> psem = pred.semantic_map();
        std::vector<int64_t> gsem(psem.size(), -1);
        for (const Segment& seg : sample.segments) {
            std::vector<uint8_t> px = seg.mask.decode();
            for (size_t p = 0; p < px.size(); ++p)
                if (px[p]) gsem[p] = seg.class_id;
        }
        for (size_t p = 0; p < psem.size(); ++p) {
            if (gsem[p] == -1) continue;
            if (psem[p] >= 0) ++st.pc[psem[p]];
            ++st.gc[gsem[p]];
            if (psem[p] == gsem[p]) ++st.inter[psem[p]];
        }
        per_sample[s] = std::move(st);
    }

    // fixed merge order keeps results independent of scheduling
    for (const SampleStats& st : per_sample) {
        for (int64_t c = 0; c < k; ++c) {
            out.per_class_pq[c].iou_sum += st.pq[c].iou_sum;
            out.per_class_pq[c].tp += st.pq[c].tp;
            out.per_class_pq[c].fp += st.pq[c].fp;
            out.per_class_pq[c].fn += st.pq[c].fn;
            inter[c] += st.inter[c];
            pc[c] += st.pc[c];
            gc[c] += st.gc[c];
        }
    }
    double pq = 0, sq = 0, rq = 0, iou = 0;
    int64_t pq_defined = 0, iou_present = 0;
    out.per_class_iou.assign(k, -1.0);
    for (int64_t c = 0; c < k; ++c) {
        if (out.per_class_pq[c].defined()) {
            pq += out.per_class_pq[c].pq();
            sq += out.per_class_pq[c].sq();
            rq += out.per_class_pq[c].rq();
            ++pq_defined;
        }
        const int64_t uni = pc[c] + gc[c] - inter[c];
        if (uni > 0) {
            out.per_class_iou[c] = static_cast<double>(inter[c]) / uni;
            iou += out.per_class_iou[c];
            ++iou_present;
        }
    }
    if (pq_defined > 0) {
        out.pq = pq / pq_defined;
        out.sq = sq / pq_defined;
        out.rq = rq / pq_defined;
    }
    if (iou_present > 0) out.miou = iou / iou_present;
    out.sample_count = static_cast<int64_t>(samples.size());
    return out;
}

}  // namespace fisa
