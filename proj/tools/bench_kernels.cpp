// Compares the parallel kernels against their serial reference variants on
// representative shapes and reports timings plus max deviation.
#include <chrono>
#include <cstdio>
#include <functional>

#include "fisa/kernels.hpp"
#include "fisa/rng.hpp"

using namespace fisa;

namespace {

Tensor random_tensor(Rng& rng, std::vector<int64_t> shape) {
    Tensor t(std::move(shape));
    for (auto& x : t.v) x = rng.normal(0.0, 1.0);
    return t;
}

double ms(const std::function<void()>& fn, int reps) {
    auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < reps; ++i) fn();
    auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double d = 0;
    for (size_t i = 0; i < a.v.size(); ++i) d = std::max(d, std::abs(a.v[i] - b.v[i]));
    return d;
}

}  // namespace

int main() {
    Rng rng(42);
    std::printf("%-28s %10s %10s %8s %10s\n", "kernel", "serial ms", "omp ms", "speedup",
                "max diff");

    for (int64_t n : {64, 128, 256, 512}) {
        Tensor a = random_tensor(rng, {n, n}), b = random_tensor(rng, {n, n});
        Tensor rs, rp;
        const int reps = n <= 128 ? 20 : 5;
        double ts = ms([&] { rs = kernels::serial::matmul(a, b); }, reps);
        double tp = ms([&] { rp = kernels::matmul(a, b); }, reps);
        std::printf("%-28s %10.3f %10.3f %8.2f %10.3g\n",
                    ("matmul " + std::to_string(n) + "x" + std::to_string(n)).c_str(), ts, tp,
                    ts / tp, max_abs_diff(rs, rp));
    }

    for (int64_t rows : {256, 2048}) {
        Tensor a = random_tensor(rng, {rows, 256});
        Tensor rs, rp;
        double ts = ms([&] { rs = kernels::serial::softmax_rows(a); }, 20);
        double tp = ms([&] { rp = kernels::softmax_rows(a); }, 20);
        std::printf("%-28s %10.3f %10.3f %8.2f %10.3g\n",
                    ("softmax_rows " + std::to_string(rows) + "x256").c_str(), ts, tp,
                    ts / tp, max_abs_diff(rs, rp));
    }

    for (int64_t batch : {8, 32}) {
        Tensor x = random_tensor(rng, {batch, 4, 64, 64});
        Tensor w = random_tensor(rng, {8, 4, 3, 3});
        Tensor bb = random_tensor(rng, {8});
        Tensor rs, rp;
        double ts = ms([&] { rs = kernels::serial::conv3x3(x, w, bb); }, 5);
        double tp = ms([&] { rp = kernels::conv3x3(x, w, bb); }, 5);
        std::printf("%-28s %10.3f %10.3f %8.2f %10.3g\n",
                    ("conv3x3 b" + std::to_string(batch) + " 4->8 64x64").c_str(), ts, tp,
                    ts / tp, max_abs_diff(rs, rp));
    }
    return 0;
}
