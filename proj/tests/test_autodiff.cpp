#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <functional>

#include "fisa/autodiff.hpp"
#include "fisa/rng.hpp"

using namespace fisa;
using ad::Tape;
using ad::VarId;

namespace {

Tensor randt(Rng& rng, std::vector<int64_t> shape, double sd = 1.0) {
    Tensor t(std::move(shape));
    for (auto& x : t.v) x = rng.normal(0.0, sd);
    return t;
}

// builds the graph twice per perturbed scalar and compares central
// differences against the analytic gradient of a scalar-valued graph
void check_grads(const std::map<std::string, Tensor>& inputs,
                 const std::function<VarId(Tape&, std::map<std::string, VarId>&)>& build,
                 double tol = 1e-6, double eps = 1e-5) {
    Tape t0;
    std::map<std::string, VarId> ids;
    for (const auto& [name, ten] : inputs) ids[name] = t0.param(name, ten);
    VarId loss = build(t0, ids);
    REQUIRE(t0.val(loss).numel() == 1);
    t0.backward(loss);
    for (const auto& [name, ten] : inputs) {
        for (size_t i = 0; i < ten.v.size(); ++i) {
            auto eval = [&](double delta) {
                std::map<std::string, Tensor> moved = inputs;
                moved[name].v[i] += delta;
                Tape t;
                std::map<std::string, VarId> vids;
                for (const auto& [n2, t2] : moved) vids[n2] = t.param(n2, t2);
                return t.val(build(t, vids)).v[0];
            };
            const double fd = (eval(eps) - eval(-eps)) / (2 * eps);
            const double an = t0.grad(ids[name]).v[i];
            CHECK(std::abs(fd - an) <= tol * std::max(1.0, std::abs(fd)));
        }
    }
}


// reduce any node to a 1x1 scalar for backward()
VarId scalarize(Tape& t, VarId v) {
    const int64_t n = t.val(v).numel();
    return t.mean_rows(t.reshape(v, {n, 1}));
}

}  // namespace

TEST_CASE("elementwise and matmul gradients") {
    Rng rng(1);
    std::map<std::string, Tensor> in{{"a", randt(rng, {3, 4})},
                                     {"b", randt(rng, {3, 4})},
                                     {"w", randt(rng, {4, 2})}};
    check_grads(in, [](Tape& t, std::map<std::string, VarId>& v) {
        VarId x = t.add(v["a"], t.scale(v["b"], 0.7));
        VarId y = t.sub(x, t.scale(v["a"], 0.2));
        VarId z = t.matmul(y, v["w"]);
        return scalarize(t, t.matmul(z, z, true, false));
    });
}

TEST_CASE("matmul transpose flags all differentiate correctly") {
    Rng rng(2);
    for (bool ta : {false, true})
        for (bool tb : {false, true}) {
            std::map<std::string, Tensor> in{
                {"a", ta ? randt(rng, {4, 3}) : randt(rng, {3, 4})},
                {"b", tb ? randt(rng, {2, 4}) : randt(rng, {4, 2})}};
            check_grads(in, [ta, tb](Tape& t, std::map<std::string, VarId>& v) {
                VarId y = t.matmul(v["a"], v["b"], ta, tb);  // 3 x 2
                return scalarize(t, t.matmul(y, y, true, false));
            });
        }
}

TEST_CASE("softmax layernorm gelu relu clamp gradients") {
    Rng rng(3);
    std::map<std::string, Tensor> in{{"x", randt(rng, {2, 5})},
                                     {"w", randt(rng, {5}, 0.3)},
                                     {"b", randt(rng, {5}, 0.3)}};
    in.at("w").v[0] += 1.0;
    check_grads(in, [](Tape& t, std::map<std::string, VarId>& v) {
        VarId h = t.layernorm_rows(v["x"], v["w"], v["b"]);
        h = t.gelu(h);
        h = t.softmax_rows(h);
        h = t.relu(t.add(h, v["x"]));
        h = t.clamp(h, 0.05, 0.9);
        return scalarize(t, h);
    }, 1e-5);
}

TEST_CASE("softmax with additive bias matches masked expectations and grads") {
    Rng rng(4);
    Tensor bias({2, 4});
    bias.at(0, 1) = -1e9;
    bias.at(1, 3) = -1e9;
    std::map<std::string, Tensor> in{{"x", randt(rng, {2, 4})}};
    Tape t;
    VarId x = t.param("x", in.at("x"));
    VarId y = t.softmax_rows_bias(x, bias);
    CHECK(t.val(y).at(0, 1) <= 1e-12);
    CHECK(t.val(y).at(1, 3) <= 1e-12);
    check_grads(in, [bias](Tape& tt, std::map<std::string, VarId>& v) {
        VarId s = tt.softmax_rows_bias(v["x"], bias);
        return scalarize(tt, tt.matmul(s, s, false, true));
    });
}

TEST_CASE("row and column rearrangement gradients") {
    Rng rng(5);
    std::map<std::string, Tensor> in{{"x", randt(rng, {4, 6})}, {"y", randt(rng, {2, 6})}};
    check_grads(in, [](Tape& t, std::map<std::string, VarId>& v) {
        VarId a = t.slice_cols(v["x"], 1, 4);
        VarId b = t.slice_cols(v["x"], 3, 6);
        VarId c = t.concat_cols({a, b});             // 4 x 6
        VarId d = t.concat_rows({c, v["y"]});        // 6 x 6
        VarId e = t.gather_rows(d, {5, 0, 0, 3});    // 4 x 6
        VarId f = t.reshape(e, {2, 12});
        VarId g = t.mean_rows_subsets(f, {{0, 1}, {1}, {0}});
        return scalarize(t, g);
    });
}

TEST_CASE("add_rowvec broadcasts and accumulates bias gradient") {
    Rng rng(6);
    std::map<std::string, Tensor> in{{"x", randt(rng, {3, 4})}, {"b", randt(rng, {4})}};
    check_grads(in, [](Tape& t, std::map<std::string, VarId>& v) {
        return scalarize(t, t.add_rowvec(v["x"], v["b"]));
    });
}

TEST_CASE("l2 normalization and zero-column append gradients") {
    Rng rng(7);
    std::map<std::string, Tensor> in{{"x", randt(rng, {3, 5})}};
    check_grads(in, [](Tape& t, std::map<std::string, VarId>& v) {
        VarId n = t.l2_normalize_rows(v["x"]);
        VarId z = t.append_zero_col(n);
        return scalarize(t, t.matmul(z, z, false, true));
    });
    Tape t;
    VarId x = t.param("x", Tensor({1, 3}));
    CHECK_THROWS_AS(t.l2_normalize_rows(x), NumericError);
}

TEST_CASE("conv3x3 tape op gradients") {
    Rng rng(8);
    std::map<std::string, Tensor> in{{"x", randt(rng, {2, 1, 4, 4})},
                                     {"w", randt(rng, {2, 1, 3, 3}, 0.5)},
                                     {"b", randt(rng, {2}, 0.5)}};
    check_grads(in, [](Tape& t, std::map<std::string, VarId>& v) {
        VarId y = t.relu(t.conv3x3(v["x"], v["w"], v["b"]));
        return scalarize(t, y);
    }, 1e-5);
}

TEST_CASE("loss scalar ops gradients") {
    Rng rng(9);
    Tensor p = randt(rng, {2, 6});
    for (auto& x : p.v) x = 0.1 + 0.8 / (1.0 + std::exp(-x));  // keep inside (0,1)
    std::map<std::string, Tensor> in{{"logits", randt(rng, {3, 4})}, {"p", p}};
    std::vector<double> target = {1, 0, 1, 0, 0, 1};
    check_grads(in, [&target](Tape& t, std::map<std::string, VarId>& v) {
        VarId ce = t.weighted_nll_rows(v["logits"], {1, 3, 0}, {1.0, 0.1, 1.0});
        VarId d = t.dice_row(v["p"], 0, target, 1.0);
        VarId b = t.bce_row(v["p"], 1, target);
        return t.linear_comb({{ce, 2.0}, {d, 5.0}, {b, 5.0}});
    }, 1e-5);
}

TEST_CASE("backward accumulates through shared subexpressions") {
    Tensor x({1, 1}, {3.0});
    Tape t;
    VarId a = t.param("x", x);
    VarId y = t.add(a, a);  // dy/dx = 2
    t.backward(y);
    CHECK(t.grad(a).v[0] == 2.0);
}

TEST_CASE("duplicate parameter names are rejected") {
    Tape t;
    t.param("x", Tensor({1}));
    CHECK_THROWS_AS(t.param("x", Tensor({1})), ConfigError);
}
