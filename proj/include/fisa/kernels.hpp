#pragma once

#include "fisa/tensor.hpp"

namespace fisa::kernels {

// OpenMP-parallel numeric kernels. Every kernel has a serial twin in
// fisa::kernels::serial with the identical contract; the test suite and the
// benchmark tool compare the two. Summation order inside a row is fixed in
// both variants, so parallel and serial results are bit-identical.

/// C = op(A) * op(B); op transposes when the flag is set. 2-D only.
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);

/// Row-wise softmax of a 2-D tensor.
Tensor softmax_rows(const Tensor& a);

/// 3x3 same-padding convolution. x: [N,Cin,H,W], w: [Cout,Cin,3,3], b: [Cout].
Tensor conv3x3(const Tensor& x, const Tensor& w, const Tensor& b);

/// Gradients of conv3x3 given upstream grad gy; returns (gx, gw, gb) through
/// out parameters.
void conv3x3_backward(const Tensor& x, const Tensor& w, const Tensor& gy, Tensor& gx,
                      Tensor& gw, Tensor& gb);

namespace serial {
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);
Tensor softmax_rows(const Tensor& a);
Tensor conv3x3(const Tensor& x, const Tensor& w, const Tensor& b);
}  // namespace serial

}  // namespace fisa::kernels
