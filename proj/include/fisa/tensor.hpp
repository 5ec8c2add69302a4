#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace fisa {

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Dense row-major tensor of doubles. Small and value-semantic; all model
/// state and intermediate activations use this type.
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
        v.assign(static_cast<size_t>(numel_of(shape)), 0.0);
    }
    Tensor(std::vector<int64_t> s, std::vector<double> data)
        : shape(std::move(s)), v(std::move(data)) {
        if (static_cast<int64_t>(v.size()) != numel_of(shape))
            throw ShapeError("tensor data size does not match shape");
    }

    static int64_t numel_of(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t d : s) {
            if (d < 0) throw ShapeError("negative dimension");
            n *= d;
        }
        return n;
    }

    int64_t numel() const { return static_cast<int64_t>(v.size()); }
    int64_t rows() const { return shape.empty() ? 0 : shape[0]; }
    int64_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    double& at(int64_t i, int64_t j) { return v[static_cast<size_t>(i * cols() + j)]; }
    double at(int64_t i, int64_t j) const { return v[static_cast<size_t>(i * cols() + j)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    void fill(double x) { std::fill(v.begin(), v.end(), x); }
};

inline std::string shape_str(const std::vector<int64_t>& s) {
    std::string r = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) r += ",";
        r += std::to_string(s[i]);
    }
    return r + "]";
}

}  // namespace fisa
