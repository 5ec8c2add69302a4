#include "fisa/autodiff.hpp"

#include <cmath>
#include <memory>

#include "fisa/kernels.hpp"

namespace fisa::ad {

namespace {
Tensor transpose2d(const Tensor& a) {
    Tensor t({a.shape[1], a.shape[0]});
    for (int64_t i = 0; i < a.shape[0]; ++i)
        for (int64_t j = 0; j < a.shape[1]; ++j) t.at(j, i) = a.at(i, j);
    return t;
}
}  // namespace

VarId Tape::push(Tensor val, std::function<void(Tape&)> back) {
    nodes_.push_back(Node{std::move(val), Tensor(), std::move(back)});
    VarId id = static_cast<VarId>(nodes_.size() - 1);
    nodes_[id].grad = Tensor(nodes_[id].val.shape);
    return id;
}

VarId Tape::constant(Tensor t) { return push(std::move(t)); }

VarId Tape::param(const std::string& name, const Tensor& t) {
    if (params_.count(name)) throw ConfigError("duplicate parameter on tape: " + name);
    VarId id = push(t);
    params_[name] = id;
    return id;
}

VarId Tape::add(VarId a, VarId b) {
    if (!val(a).same_shape(val(b))) throw ShapeError("add shape mismatch");
    Tensor out = val(a);
    for (int64_t i = 0; i < out.numel(); ++i) out.v[i] += val(b).v[i];
    VarId id = push(std::move(out));
    nodes_[id].back = [a, b, id](Tape& t) {
        for (int64_t i = 0; i < t.val(id).numel(); ++i) {
            t.g(a).v[i] += t.grad(id).v[i];
            t.g(b).v[i] += t.grad(id).v[i];
        }
    };
    return id;
}

VarId Tape::sub(VarId a, VarId b) {
    if (!val(a).same_shape(val(b))) throw ShapeError("sub shape mismatch");
    Tensor out = val(a);
    for (int64_t i = 0; i < out.numel(); ++i) out.v[i] -= val(b).v[i];
    VarId id = push(std::move(out));
    nodes_[id].back = [a, b, id](Tape& t) {
        for (int64_t i = 0; i < t.val(id).numel(); ++i) {
            t.g(a).v[i] += t.grad(id).v[i];
            t.g(b).v[i] -= t.grad(id).v[i];
        }
    };
    return id;
}

VarId Tape::scale(VarId a, double c) {
    Tensor out = val(a);
    for (auto& x : out.v) x *= c;
    VarId id = push(std::move(out));
    nodes_[id].back = [a, c, id](Tape& t) {
        for (int64_t i = 0; i < t.val(id).numel(); ++i) t.g(a).v[i] += c * t.grad(id).v[i];
    };
    return id;
}

VarId Tape::add_rowvec(VarId a, VarId b) {
    const int64_t m = val(a).rows(), c = val(a).cols();
    if (val(b).numel() != c) throw ShapeError("add_rowvec width mismatch");
    Tensor out = val(a);
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < c; ++j) out.v[i * c + j] += val(b).v[j];
    VarId id = push(std::move(out));
    nodes_[id].back = [a, b, m, c, id](Tape& t) {
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < c; ++j) {
                t.g(a).v[i * c + j] += t.grad(id).v[i * c + j];
                t.g(b).v[j] += t.grad(id).v[i * c + j];
            }
    };
    return id;
}

VarId Tape::matmul(VarId a, VarId b, bool ta, bool tb) {
    VarId id = push(kernels::matmul(val(a), val(b), ta, tb));
    nodes_[id].back = [a, b, ta, tb, id](Tape& t) {
        Tensor ga = kernels::matmul(t.grad(id), t.val(b), false, !tb);
        Tensor gb = kernels::matmul(t.val(a), t.grad(id), !ta, false);
        if (ta) ga = transpose2d(ga);
        if (tb) gb = transpose2d(gb);
        for (int64_t i = 0; i < ga.numel(); ++i) t.g(a).v[i] += ga.v[i];
        for (int64_t i = 0; i < gb.numel(); ++i) t.g(b).v[i] += gb.v[i];
    };
    return id;
}

VarId Tape::softmax_rows(VarId a) {
    VarId id = push(kernels::softmax_rows(val(a)));
    nodes_[id].back = [a, id](Tape& t) {
        const Tensor& y = t.val(id);
        const int64_t m = y.rows(), n = y.cols();
        for (int64_t i = 0; i < m; ++i) {
            double dot = 0.0;
            for (int64_t j = 0; j < n; ++j) dot += t.grad(id).v[i * n + j] * y.v[i * n + j];
            for (int64_t j = 0; j < n; ++j)
                t.g(a).v[i * n + j] += (t.grad(id).v[i * n + j] - dot) * y.v[i * n + j];
        }
    };
    return id;
}

VarId Tape::softmax_rows_bias(VarId a, const Tensor& bias) {
    if (!val(a).same_shape(bias)) throw ShapeError("softmax bias shape mismatch");
    Tensor logits = val(a);
    for (int64_t i = 0; i < logits.numel(); ++i) logits.v[i] += bias.v[i];
    VarId id = push(kernels::softmax_rows(logits));
    nodes_[id].back = [a, id](Tape& t) {
        const Tensor& y = t.val(id);
        const int64_t m = y.rows(), n = y.cols();
        for (int64_t i = 0; i < m; ++i) {
            double dot = 0.0;
            for (int64_t j = 0; j < n; ++j) dot += t.grad(id).v[i * n + j] * y.v[i * n + j];
            for (int64_t j = 0; j < n; ++j)
                t.g(a).v[i * n + j] += (t.grad(id).v[i * n + j] - dot) * y.v[i * n + j];
        }
    };
    return id;
}

VarId Tape::layernorm_rows(VarId x, VarId w, VarId b) {
    constexpr double kEps = 1e-5;
    const Tensor& xv = val(x);
    const int64_t m = xv.rows(), n = xv.cols();
    Tensor out({m, n});
    Tensor xhat({m, n});
    std::vector<double> inv_std(m);
    for (int64_t i = 0; i < m; ++i) {
        double mean = 0.0;
        for (int64_t j = 0; j < n; ++j) mean += xv.v[i * n + j];
        mean /= n;
        double var = 0.0;
        for (int64_t j = 0; j < n; ++j) {
            double d = xv.v[i * n + j] - mean;
            var += d * d;
        }
        var /= n;
        inv_std[i] = 1.0 / std::sqrt(var + kEps);
        for (int64_t j = 0; j < n; ++j) {
            xhat.v[i * n + j] = (xv.v[i * n + j] - mean) * inv_std[i];
            out.v[i * n + j] = xhat.v[i * n + j] * val(w).v[j] + val(b).v[j];
        }
    }
    VarId id = push(std::move(out));
    auto xh = std::make_shared<Tensor>(std::move(xhat));
    auto istd = std::make_shared<std::vector<double>>(std::move(inv_std));
    nodes_[id].back = [x, w, b, m, n, id, xh, istd](Tape& t) {
        for (int64_t i = 0; i < m; ++i) {
            double sum_g = 0.0, sum_gx = 0.0;
            for (int64_t j = 0; j < n; ++j) {
                const double go = t.grad(id).v[i * n + j];
                const double gh = go * t.val(w).v[j];
                t.g(w).v[j] += go * xh->v[i * n + j];
                t.g(b).v[j] += go;
                sum_g += gh;
                sum_gx += gh * xh->v[i * n + j];
            }
            for (int64_t j = 0; j < n; ++j) {
                const double gh = t.grad(id).v[i * n + j] * t.val(w).v[j];
                t.g(x).v[i * n + j] +=
                    (*istd)[i] * (gh - sum_g / n - xh->v[i * n + j] * sum_gx / n);
            }
        }
    };
    return id;
}

VarId Tape::relu(VarId a) {
    Tensor out = val(a);
    for (auto& x : out.v) x = x > 0 ? x : 0.0;
    VarId id = push(std::move(out));
    nodes_[id].back = [a, id](Tape& t) {
        for (int64_t i = 0; i < t.val(id).numel(); ++i)
            if (t.val(a).v[i] > 0) t.g(a).v[i] += t.grad(id).v[i];
    };
    return id;
}

VarId Tape::gelu(VarId a) {
    constexpr double kInvSqrt2 = 0.7071067811865476;
    constexpr double kInvSqrt2Pi = 0.3989422804014327;
    Tensor out = val(a);
    for (auto& x : out.v) x = x * 0.5 * (1.0 + std::erf(x * kInvSqrt2));
    VarId id = push(std::move(out));
    nodes_[id].back = [a, id](Tape& t) {
        for (int64_t i = 0; i < t.val(id).numel(); ++i) {
            const double x = t.val(a).v[i];
            const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
            t.g(a).v[i] += t.grad(id).v[i] * (cdf + x * pdf);
        }
    };
    return id;
}

VarId Tape::clamp(VarId a, double lo, double hi) {
    Tensor out = val(a);
    for (auto& x : out.v) x = std::clamp(x, lo, hi);
    VarId id = push(std::move(out));
    nodes_[id].back = [a, lo, hi, id](Tape& t) {
        for (int64_t i = 0; i < t.val(id).numel(); ++i) {
            const double x = t.val(a).v[i];
            if (x > lo && x < hi) t.g(a).v[i] += t.grad(id).v[i];
        }
    };
    return id;
}

VarId Tape::slice_cols(VarId a, int64_t c0, int64_t c1) {
    const int64_t m = val(a).rows(), c = val(a).cols(), w = c1 - c0;
    if (c0 < 0 || c1 > c || w <= 0) throw ShapeError("slice_cols out of range");
    Tensor out({m, w});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < w; ++j) out.v[i * w + j] = val(a).v[i * c + c0 + j];
    VarId id = push(std::move(out));
    nodes_[id].back = [a, c0, m, c, w, id](Tape& t) {
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < w; ++j) t.g(a).v[i * c + c0 + j] += t.grad(id).v[i * w + j];
    };
    return id;
}

VarId Tape::concat_cols(const std::vector<VarId>& parts) {
    const int64_t m = val(parts[0]).rows();
    int64_t total = 0;
    for (VarId p : parts) {
        if (val(p).rows() != m) throw ShapeError("concat_cols row mismatch");
        total += val(p).cols();
    }
    Tensor out({m, total});
    int64_t off = 0;
    for (VarId p : parts) {
        const int64_t w = val(p).cols();
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < w; ++j) out.v[i * total + off + j] = val(p).v[i * w + j];
        off += w;
    }
    VarId id = push(std::move(out));
    auto ps = parts;
    nodes_[id].back = [ps, m, total, id](Tape& t) {
        int64_t off = 0;
        for (VarId p : ps) {
            const int64_t w = t.val(p).cols();
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < w; ++j)
                    t.g(p).v[i * w + j] += t.grad(id).v[i * total + off + j];
            off += w;
        }
    };
    return id;
}

VarId Tape::concat_rows(const std::vector<VarId>& parts) {
    const int64_t c = val(parts[0]).cols();
    int64_t m = 0;
    for (VarId p : parts) {
        if (val(p).cols() != c) throw ShapeError("concat_rows col mismatch");
        m += val(p).rows();
    }
    Tensor out({m, c});
    int64_t off = 0;
    for (VarId p : parts) {
        std::copy(val(p).v.begin(), val(p).v.end(), out.v.begin() + off);
        off += val(p).numel();
    }
    VarId id = push(std::move(out));
    auto ps = parts;
    nodes_[id].back = [ps, id](Tape& t) {
        int64_t off = 0;
        for (VarId p : ps) {
            for (int64_t i = 0; i < t.val(p).numel(); ++i)
                t.g(p).v[i] += t.grad(id).v[off + i];
            off += t.val(p).numel();
        }
    };
    return id;
}

VarId Tape::mean_rows(VarId a) {
    const int64_t m = val(a).rows(), c = val(a).cols();
    if (m == 0) throw ShapeError("mean_rows of empty tensor");
    Tensor out({1, c});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < c; ++j) out.v[j] += val(a).v[i * c + j] / m;
    VarId id = push(std::move(out));
    nodes_[id].back = [a, m, c, id](Tape& t) {
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < c; ++j) t.g(a).v[i * c + j] += t.grad(id).v[j] / m;
    };
    return id;
}

VarId Tape::mean_rows_subsets(VarId a, const std::vector<std::vector<int64_t>>& sets) {
    const int64_t c = val(a).cols();
    const int64_t m = static_cast<int64_t>(sets.size());
    Tensor out({m, c});
    for (int64_t i = 0; i < m; ++i) {
        if (sets[i].empty()) throw ShapeError("mean_rows_subsets with empty set");
        for (int64_t r : sets[i])
            for (int64_t j = 0; j < c; ++j)
                out.v[i * c + j] += val(a).v[r * c + j] / static_cast<double>(sets[i].size());
    }
    VarId id = push(std::move(out));
    auto ss = sets;
    nodes_[id].back = [a, ss, c, id](Tape& t) {
        for (size_t i = 0; i < ss.size(); ++i)
            for (int64_t r : ss[i])
                for (int64_t j = 0; j < c; ++j)
                    t.g(a).v[r * c + j] +=
                        t.grad(id).v[i * c + j] / static_cast<double>(ss[i].size());
    };
    return id;
}

VarId Tape::l2_normalize_rows(VarId a) {
    const int64_t m = val(a).rows(), c = val(a).cols();
    Tensor out({m, c});
    std::vector<double> norms(m);
    for (int64_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (int64_t j = 0; j < c; ++j) s += val(a).v[i * c + j] * val(a).v[i * c + j];
        norms[i] = std::sqrt(s);
        if (norms[i] < 1e-12) throw NumericError("zero-norm embedding row");
        for (int64_t j = 0; j < c; ++j) out.v[i * c + j] = val(a).v[i * c + j] / norms[i];
    }
    VarId id = push(std::move(out));
    auto ns = std::make_shared<std::vector<double>>(std::move(norms));
    nodes_[id].back = [a, m, c, id, ns](Tape& t) {
        for (int64_t i = 0; i < m; ++i) {
            double dot = 0.0;
            for (int64_t j = 0; j < c; ++j)
                dot += t.grad(id).v[i * c + j] * t.val(id).v[i * c + j];
            for (int64_t j = 0; j < c; ++j)
                t.g(a).v[i * c + j] +=
                    (t.grad(id).v[i * c + j] - t.val(id).v[i * c + j] * dot) / (*ns)[i];
        }
    };
    return id;
}

VarId Tape::append_zero_col(VarId a) {
    const int64_t m = val(a).rows(), c = val(a).cols();
    Tensor out({m, c + 1});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < c; ++j) out.v[i * (c + 1) + j] = val(a).v[i * c + j];
    VarId id = push(std::move(out));
    nodes_[id].back = [a, m, c, id](Tape& t) {
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < c; ++j)
                t.g(a).v[i * c + j] += t.grad(id).v[i * (c + 1) + j];
    };
    return id;
}

VarId Tape::conv3x3(VarId x, VarId w, VarId b) {
    VarId id = push(kernels::conv3x3(val(x), val(w), val(b)));
    nodes_[id].back = [x, w, b, id](Tape& t) {
        Tensor gx, gw, gb;
        kernels::conv3x3_backward(t.val(x), t.val(w), t.grad(id), gx, gw, gb);
        for (int64_t i = 0; i < gx.numel(); ++i) t.g(x).v[i] += gx.v[i];
        for (int64_t i = 0; i < gw.numel(); ++i) t.g(w).v[i] += gw.v[i];
        for (int64_t i = 0; i < gb.numel(); ++i) t.g(b).v[i] += gb.v[i];
    };
    return id;
}

VarId Tape::reshape(VarId a, std::vector<int64_t> shape) {
    if (Tensor::numel_of(shape) != val(a).numel()) throw ShapeError("reshape numel mismatch");
    Tensor out(shape, val(a).v);
    VarId id = push(std::move(out));
    nodes_[id].back = [a, id](Tape& t) {
        for (int64_t i = 0; i < t.val(id).numel(); ++i) t.g(a).v[i] += t.grad(id).v[i];
    };
    return id;
}

VarId Tape::gather_rows(VarId a, const std::vector<int64_t>& rows) {
    const int64_t c = val(a).cols();
    Tensor out({static_cast<int64_t>(rows.size()), c});
    for (size_t i = 0; i < rows.size(); ++i)
        for (int64_t j = 0; j < c; ++j) out.v[i * c + j] = val(a).v[rows[i] * c + j];
    VarId id = push(std::move(out));
    auto rs = rows;
    nodes_[id].back = [a, rs, c, id](Tape& t) {
        for (size_t i = 0; i < rs.size(); ++i)
            for (int64_t j = 0; j < c; ++j)
                t.g(a).v[rs[i] * c + j] += t.grad(id).v[i * c + j];
    };
    return id;
}

VarId Tape::weighted_nll_rows(VarId logits, const std::vector<int64_t>& targets,
                              const std::vector<double>& weights) {
    const int64_t m = val(logits).rows(), n = val(logits).cols();
    if (static_cast<int64_t>(targets.size()) != m || weights.size() != targets.size())
        throw ShapeError("weighted_nll_rows size mismatch");
    Tensor sm = kernels::softmax_rows(val(logits));
    double wsum = 0.0;
    for (double w : weights) wsum += w;
    if (wsum <= 0.0) throw NumericError("weighted_nll_rows: zero total weight");
    double loss = 0.0;
    for (int64_t i = 0; i < m; ++i)
        loss -= weights[i] * std::log(std::max(sm.v[i * n + targets[i]], 1e-300));
    loss /= wsum;
    VarId id = push(Tensor({1}, {loss}));
    auto smp = std::make_shared<Tensor>(std::move(sm));
    auto tg = targets;
    auto ws = weights;
    nodes_[id].back = [logits, tg, ws, wsum, m, n, id, smp](Tape& t) {
        const double go = t.grad(id).v[0];
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j)
                t.g(logits).v[i * n + j] += go * ws[i] / wsum *
                                            (smp->v[i * n + j] - (j == tg[i] ? 1.0 : 0.0));
    };
    return id;
}

VarId Tape::dice_row(VarId p, int64_t row, const std::vector<double>& target, double smooth) {
    const int64_t n = val(p).cols();
    if (static_cast<int64_t>(target.size()) != n) throw ShapeError("dice_row target size");
    const double* pv = &val(p).v[row * n];
    double inter = 0.0, psum = 0.0, gsum = 0.0;
    for (int64_t j = 0; j < n; ++j) {
        inter += pv[j] * target[j];
        psum += pv[j];
        gsum += target[j];
    }
    const double denom = psum + gsum + smooth;
    const double loss = 1.0 - (2.0 * inter + smooth) / denom;
    VarId id = push(Tensor({1}, {loss}));
    auto tgt = std::make_shared<std::vector<double>>(target);
    nodes_[id].back = [p, row, n, inter, denom, smooth, id, tgt](Tape& t) {
        const double go = t.grad(id).v[0];
        const double num = 2.0 * inter + smooth;
        for (int64_t j = 0; j < n; ++j)
            t.g(p).v[row * n + j] +=
                go * (-(2.0 * (*tgt)[j] * denom - num) / (denom * denom));
    };
    return id;
}

VarId Tape::bce_row(VarId p, int64_t row, const std::vector<double>& target) {
    const int64_t n = val(p).cols();
    if (static_cast<int64_t>(target.size()) != n) throw ShapeError("bce_row target size");
    const double* pv = &val(p).v[row * n];
    double loss = 0.0;
    for (int64_t j = 0; j < n; ++j)
        loss -= target[j] * std::log(pv[j]) + (1.0 - target[j]) * std::log(1.0 - pv[j]);
    loss /= n;
    VarId id = push(Tensor({1}, {loss}));
    auto tgt = std::make_shared<std::vector<double>>(target);
    nodes_[id].back = [p, row, n, id, tgt](Tape& t) {
        const double go = t.grad(id).v[0];
        for (int64_t j = 0; j < n; ++j) {
            const double pj = t.val(p).v[row * n + j];
            t.g(p).v[row * n + j] += go * (pj - (*tgt)[j]) / (pj * (1.0 - pj) * n);
        }
    };
    return id;
}

VarId Tape::linear_comb(const std::vector<std::pair<VarId, double>>& terms) {
    double s = 0.0;
    for (auto& [v, c] : terms) {
        if (val(v).numel() != 1) throw ShapeError("linear_comb expects scalar nodes");
        s += c * val(v).v[0];
    }
    VarId id = push(Tensor({1}, {s}));
    auto ts = terms;
    nodes_[id].back = [ts, id](Tape& t) {
        for (auto& [v, c] : ts) t.g(v).v[0] += c * t.grad(id).v[0];
    };
    return id;
}

void Tape::backward(VarId loss) {
    if (val(loss).numel() != 1) throw ShapeError("backward expects a scalar loss");
    g(loss).v[0] = 1.0;
    for (VarId id = loss; id >= 0; --id)
        if (nodes_[id].back) nodes_[id].back(*this);
}

}  // namespace fisa::ad
