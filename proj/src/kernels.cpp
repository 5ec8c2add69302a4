#include "fisa/kernels.hpp"

#include <cmath>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace fisa::kernels {

namespace {

inline void check_matmul(const Tensor& a, const Tensor& b, bool ta, bool tb, int64_t& m,
                         int64_t& k, int64_t& n) {
    if (a.shape.size() != 2 || b.shape.size() != 2)
        throw ShapeError("matmul expects 2-D tensors, got " + shape_str(a.shape) + " and " +
                         shape_str(b.shape));
    m = ta ? a.shape[1] : a.shape[0];
    k = ta ? a.shape[0] : a.shape[1];
    int64_t kb = tb ? b.shape[1] : b.shape[0];
    n = tb ? b.shape[0] : b.shape[1];
    if (k != kb)
        throw ShapeError("matmul inner dimension mismatch: " + shape_str(a.shape) + " x " +
                         shape_str(b.shape));
}

inline void matmul_row(const Tensor& a, const Tensor& b, bool ta, bool tb, int64_t m,
                       int64_t k, int64_t n, int64_t i, double* out) {
    for (int64_t j = 0; j < n; ++j) out[j] = 0.0;
    for (int64_t p = 0; p < k; ++p) {
        const double av = ta ? a.v[p * m + i] : a.v[i * k + p];
        if (tb) {
            for (int64_t j = 0; j < n; ++j) out[j] += av * b.v[j * k + p];
        } else {
            for (int64_t j = 0; j < n; ++j) out[j] += av * b.v[p * n + j];
        }
    }
}

inline void softmax_row(const double* in, double* out, int64_t n) {
    double mx = in[0];
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
    double sum = 0.0;
    for (int64_t j = 0; j < n; ++j) {
        out[j] = std::exp(in[j] - mx);
        sum += out[j];
    }
    for (int64_t j = 0; j < n; ++j) out[j] /= sum;
}

inline void check_conv(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.shape.size() != 4 || w.shape.size() != 4)
        throw ShapeError("conv3x3 expects x [N,Cin,H,W] and w [Cout,Cin,3,3]");
    if (w.shape[2] != 3 || w.shape[3] != 3) throw ShapeError("conv3x3 kernel must be 3x3");
    if (w.shape[1] != x.shape[1])
        throw ShapeError("conv3x3 channel mismatch: " + shape_str(x.shape) + " vs " +
                         shape_str(w.shape));
    if (b.numel() != w.shape[0]) throw ShapeError("conv3x3 bias size mismatch");
}

inline double conv_cell(const Tensor& x, const Tensor& w, int64_t n, int64_t co, int64_t y,
                        int64_t xx, int64_t cin, int64_t h, int64_t wd) {
    double acc = 0.0;
    for (int64_t ci = 0; ci < cin; ++ci) {
        const double* xp = &x.v[((n * cin + ci) * h) * wd];
        const double* wp = &w.v[((co * cin + ci) * 3) * 3];
        for (int64_t dy = -1; dy <= 1; ++dy) {
            int64_t sy = y + dy;
            if (sy < 0 || sy >= h) continue;
            for (int64_t dx = -1; dx <= 1; ++dx) {
                int64_t sx = xx + dx;
                if (sx < 0 || sx >= wd) continue;
                acc += xp[sy * wd + sx] * wp[(dy + 1) * 3 + (dx + 1)];
            }
        }
    }
    return acc;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, bool ta, bool tb) {
    int64_t m, k, n;
    check_matmul(a, b, ta, tb, m, k, n);
    Tensor c({m, n});
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (m * n * k > 16384 && !omp_in_parallel())
#endif
    for (int64_t i = 0; i < m; ++i) matmul_row(a, b, ta, tb, m, k, n, i, &c.v[i * n]);
    return c;
}

Tensor softmax_rows(const Tensor& a) {
    if (a.shape.size() != 2) throw ShapeError("softmax_rows expects a 2-D tensor");
    const int64_t m = a.shape[0], n = a.shape[1];
    if (n == 0) throw ShapeError("softmax_rows over zero columns");
    Tensor out({m, n});
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (m * n > 16384 && !omp_in_parallel())
#endif
    for (int64_t i = 0; i < m; ++i) softmax_row(&a.v[i * n], &out.v[i * n], n);
    return out;
}

Tensor conv3x3(const Tensor& x, const Tensor& w, const Tensor& b) {
    check_conv(x, w, b);
    const int64_t nn = x.shape[0], cin = x.shape[1], h = x.shape[2], wd = x.shape[3];
    const int64_t cout = w.shape[0];
    Tensor y({nn, cout, h, wd});
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static) if (nn * cout > 1 && !omp_in_parallel())
#endif
    for (int64_t n = 0; n < nn; ++n)
        for (int64_t co = 0; co < cout; ++co) {
            double* yp = &y.v[((n * cout + co) * h) * wd];
            for (int64_t yy = 0; yy < h; ++yy)
                for (int64_t xx = 0; xx < wd; ++xx)
                    yp[yy * wd + xx] = conv_cell(x, w, n, co, yy, xx, cin, h, wd) + b.v[co];
        }
    return y;
}

void conv3x3_backward(const Tensor& x, const Tensor& w, const Tensor& gy, Tensor& gx,
                      Tensor& gw, Tensor& gb) {
    const int64_t nn = x.shape[0], cin = x.shape[1], h = x.shape[2], wd = x.shape[3];
    const int64_t cout = w.shape[0];
    gx = Tensor(x.shape);
    gw = Tensor(w.shape);
    gb = Tensor({cout});
    for (int64_t n = 0; n < nn; ++n)
        for (int64_t co = 0; co < cout; ++co) {
            const double* gp = &gy.v[((n * cout + co) * h) * wd];
            for (int64_t y = 0; y < h; ++y)
                for (int64_t xx = 0; xx < wd; ++xx) {
                    const double g = gp[y * wd + xx];
                    gb.v[co] += g;
                    for (int64_t ci = 0; ci < cin; ++ci) {
                        const double* xp = &x.v[((n * cin + ci) * h) * wd];
                        double* gxp = &gx.v[((n * cin + ci) * h) * wd];
                        double* gwp = &gw.v[((co * cin + ci) * 3) * 3];
                        for (int64_t dy = -1; dy <= 1; ++dy) {
                            int64_t sy = y + dy;
                            if (sy < 0 || sy >= h) continue;
                            for (int64_t dx = -1; dx <= 1; ++dx) {
                                int64_t sx = xx + dx;
                                if (sx < 0 || sx >= wd) continue;
                                gwp[(dy + 1) * 3 + (dx + 1)] += g * xp[sy * wd + sx];
                                gxp[sy * wd + sx] += g * w.v[((co * cin + ci) * 3 + (dy + 1)) * 3 + (dx + 1)];
                            }
                        }
                    }
                }
        }
}

namespace serial {

Tensor matmul(const Tensor& a, const Tensor& b, bool ta, bool tb) {
    int64_t m, k, n;
    check_matmul(a, b, ta, tb, m, k, n);
    Tensor c({m, n});
    for (int64_t i = 0; i < m; ++i) matmul_row(a, b, ta, tb, m, k, n, i, &c.v[i * n]);
    return c;
}

Tensor softmax_rows(const Tensor& a) {
    if (a.shape.size() != 2) throw ShapeError("softmax_rows expects a 2-D tensor");
    const int64_t m = a.shape[0], n = a.shape[1];
    Tensor out({m, n});
    for (int64_t i = 0; i < m; ++i) softmax_row(&a.v[i * n], &out.v[i * n], n);
    return out;
}

Tensor conv3x3(const Tensor& x, const Tensor& w, const Tensor& b) {
    check_conv(x, w, b);
    const int64_t nn = x.shape[0], cin = x.shape[1], h = x.shape[2], wd = x.shape[3];
    const int64_t cout = w.shape[0];
    Tensor y({nn, cout, h, wd});
    for (int64_t n = 0; n < nn; ++n)
        for (int64_t co = 0; co < cout; ++co)
            for (int64_t yy = 0; yy < h; ++yy)
                for (int64_t xx = 0; xx < wd; ++xx)
                    y.v[(((n * cout + co) * h) + yy) * wd + xx] =
                        conv_cell(x, w, n, co, yy, xx, cin, h, wd) + b.v[co];
    return y;
}

}  // namespace serial

}  // namespace fisa::kernels
