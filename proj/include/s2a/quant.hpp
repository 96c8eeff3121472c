#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "s2a/tensor.hpp"

namespace s2a {

// Asymmetric fixed-point snapshot of a tensor. 4-bit codes are packed two per
// byte, low nibble first; 1-bit masks eight per byte, LSB first. One scale and
// offset per tensor.
struct QuantBlob {
  uint8_t bits = 4;  // 1 or 4
  std::vector<int64_t> shape;
  float s = 0.f;  // step size; 0 iff the source tensor was constant (or a mask)
  float m = 0.f;  // minimum / offset
  std::vector<uint8_t> packed;

  int64_t elements() const { return shape_product(shape); }
  // In-memory footprint the tape charges for this blob: payload plus the
  // scale/min pair for 4-bit codes; masks carry no scale/min.
  size_t live_bytes() const;
};

size_t packed_size(int64_t elements, int bits);

QuantBlob quantize(const Tensor& t, int bits);
Tensor dequantize(const QuantBlob& q);

// Frozen byte layout: bits u8 | rank u8 | dims rank x u32 LE | s f32 LE |
// m f32 LE | packed payload.
std::vector<uint8_t> serialize(const QuantBlob& q);
QuantBlob deserialize_blob(const std::vector<uint8_t>& bytes);

// --- non-parametric layers ---------------------------------------------------

// Softmax over the last dimension, full precision. Row reductions in double.
Tensor softmax_lastdim(const Tensor& x);
// Forward plus the 4-bit saved copy of the output.
std::pair<Tensor, QuantBlob> softmax_forward(const Tensor& x);
// g_x = y * (g_y - <g_y, y>_row), evaluated on the saved (possibly
// dequantized) output.
Tensor softmax_backward(const Tensor& y_saved, const Tensor& g);
Tensor softmax_backward(const QuantBlob& y_saved, const Tensor& g);

// ReLU keeps a 1-bit mask of strictly-positive inputs (x = 0 gates to 0).
std::pair<Tensor, QuantBlob> relu_forward(const Tensor& x);
QuantBlob relu_mask(const Tensor& x);
Tensor relu_backward(const QuantBlob& mask, const Tensor& g);

// GELU y = x * sigmoid(1.702 x), forward always full precision. The saved
// state is the input clipped to [-2, 2] and 4-bit quantized; the quantized
// backward uses the sine fit sigma(1.702 xh) + 0.22 sin(1.5 xh) on the
// dequantized clipped input, the full-precision backward the exact derivative.
std::pair<Tensor, QuantBlob> gelu_forward(const Tensor& x);
Tensor gelu_eval(const Tensor& x);
QuantBlob gelu_saved(const Tensor& x);
Tensor gelu_backward(const QuantBlob& x_saved, const Tensor& g);
Tensor gelu_backward(const Tensor& x_saved, const Tensor& g);

double gelu_derivative_exact(double x);
double gelu_derivative_approx(double x);  // clips its argument to [-2, 2]

// Sup of |approx - exact| over a uniform grid on [-range, range], with the
// clip boundaries included as explicit candidates (the sup sits exactly at
// x = +-2). The default-grid value is frozen below and regression-tested.
double gelu_sup_gap(int64_t grid_points = 24001, double range = 6.0);

constexpr float kGeluClip = 2.0f;
constexpr double kDGelu = 0.0749396409632671;

}  // namespace s2a
