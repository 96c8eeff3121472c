#include "s2a/quant.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace s2a {

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

void check_bits(int bits, const char* who) {
  if (bits != 1 && bits != 4) {
    throw std::invalid_argument(std::string(who) + ": bits must be 1 or 4, got " +
                                std::to_string(bits));
  }
}

}  // namespace

size_t packed_size(int64_t elements, int bits) {
  check_bits(bits, "packed_size");
  const int per_byte = bits == 4 ? 2 : 8;
  return static_cast<size_t>((elements + per_byte - 1) / per_byte);
}

size_t QuantBlob::live_bytes() const {
  return packed.size() + (bits == 4 ? 2 * sizeof(float) : 0);
}

QuantBlob quantize(const Tensor& t, int bits) {
  check_bits(bits, "quantize");
  if (bits != 4) {
    throw std::invalid_argument("quantize: only 4-bit value quantization is supported; "
                                "masks come from relu_mask");
  }
  if (t.data.empty()) {
    throw std::invalid_argument("quantize: empty tensor " + t.shape_str());
  }
  if (!all_finite(t)) {
    throw std::runtime_error("quantize: non-finite value in input tensor");
  }
  float lo = t.data[0], hi = t.data[0];
  for (float v : t.data) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const int levels = 15;  // 2^4 - 1
  QuantBlob q;
  q.bits = 4;
  q.shape = t.shape;
  q.m = lo;
  q.s = (hi - lo) / static_cast<float>(levels);
  q.packed.assign(packed_size(t.size(), 4), 0);
  if (q.s > 0.f) {
    for (int64_t i = 0; i < t.size(); ++i) {
      const double u = (static_cast<double>(t.data[i]) - static_cast<double>(q.m)) /
                       static_cast<double>(q.s);
      // round half away from zero, then clamp to the code range
      long code = std::lround(u);
      code = std::clamp(code, 0l, static_cast<long>(levels));
      q.packed[static_cast<size_t>(i / 2)] |=
          static_cast<uint8_t>(code) << ((i % 2) * 4);  // low nibble first
    }
  }
  // constant tensor: s = 0, all codes 0, m carries the constant
  return q;
}

Tensor dequantize(const QuantBlob& q) {
  check_bits(q.bits, "dequantize");
  const int64_t n = q.elements();
  if (q.packed.size() != packed_size(n, q.bits)) {
    throw std::runtime_error("dequantize: payload has " + std::to_string(q.packed.size()) +
                             " bytes, shape " + shape_to_string(q.shape) + " wants " +
                             std::to_string(packed_size(n, q.bits)));
  }
  Tensor out = Tensor::zeros(q.shape);
  if (q.bits == 4) {
    for (int64_t i = 0; i < n; ++i) {
      const uint8_t code = (q.packed[static_cast<size_t>(i / 2)] >> ((i % 2) * 4)) & 0xF;
      out.data[static_cast<size_t>(i)] = static_cast<float>(
          static_cast<double>(code) * static_cast<double>(q.s) + static_cast<double>(q.m));
    }
  } else {
    for (int64_t i = 0; i < n; ++i) {
      const uint8_t bit = (q.packed[static_cast<size_t>(i / 8)] >> (i % 8)) & 0x1;
      out.data[static_cast<size_t>(i)] = static_cast<float>(bit);
    }
  }
  return out;
}

std::vector<uint8_t> serialize(const QuantBlob& q) {
  check_bits(q.bits, "serialize");
  if (q.shape.size() > 255) throw std::invalid_argument("serialize: rank too large");
  std::vector<uint8_t> out;
  out.reserve(2 + 4 * q.shape.size() + 8 + q.packed.size());
  out.push_back(q.bits);
  out.push_back(static_cast<uint8_t>(q.shape.size()));
  for (int64_t d : q.shape) {
    if (d < 0 || d > 0xFFFFFFFFll) throw std::invalid_argument("serialize: dim out of range");
    const uint32_t u = static_cast<uint32_t>(d);
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<uint8_t>((u >> (8 * b)) & 0xFF));
  }
  auto put_f32 = [&out](float f) {
    uint32_t u;
    std::memcpy(&u, &f, 4);
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<uint8_t>((u >> (8 * b)) & 0xFF));
  };
  put_f32(q.s);
  put_f32(q.m);
  out.insert(out.end(), q.packed.begin(), q.packed.end());
  return out;
}

QuantBlob deserialize_blob(const std::vector<uint8_t>& bytes) {
  size_t pos = 0;
  auto need = [&](size_t n) {
    if (pos + n > bytes.size()) {
      throw std::runtime_error("deserialize_blob: truncated at byte " + std::to_string(pos));
    }
  };
  need(2);
  QuantBlob q;
  q.bits = bytes[pos++];
  if (q.bits != 1 && q.bits != 4) {
    throw std::runtime_error("deserialize_blob: bad bits field " + std::to_string(q.bits));
  }
  const size_t rank = bytes[pos++];
  q.shape.resize(rank);
  for (size_t i = 0; i < rank; ++i) {
    need(4);
    uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= static_cast<uint32_t>(bytes[pos++]) << (8 * b);
    q.shape[i] = static_cast<int64_t>(u);
  }
  auto get_f32 = [&]() {
    need(4);
    uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= static_cast<uint32_t>(bytes[pos++]) << (8 * b);
    float f;
    std::memcpy(&f, &u, 4);
    return f;
  };
  q.s = get_f32();
  q.m = get_f32();
  const size_t want = packed_size(q.elements(), q.bits);
  if (bytes.size() - pos != want) {
    throw std::runtime_error("deserialize_blob: payload is " + std::to_string(bytes.size() - pos) +
                             " bytes, shape " + shape_to_string(q.shape) + " wants " +
                             std::to_string(want));
  }
  q.packed.assign(bytes.begin() + static_cast<long>(pos), bytes.end());
  return q;
}

Tensor softmax_lastdim(const Tensor& x) {
  if (x.rank() < 1 || x.shape.back() < 1) {
    throw std::invalid_argument("softmax: need at least one element per row, got " +
                                x.shape_str());
  }
  if (!all_finite(x)) throw std::runtime_error("softmax: non-finite input");
  const int64_t n = x.shape.back();
  const int64_t rows = x.size() / n;
  Tensor y = Tensor::zeros(x.shape);
  std::vector<double> e(static_cast<size_t>(n));
  for (int64_t r = 0; r < rows; ++r) {
    const float* xr = x.data.data() + r * n;
    float mx = xr[0];
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
    double denom = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      e[static_cast<size_t>(j)] = std::exp(static_cast<double>(xr[j]) - static_cast<double>(mx));
      denom += e[static_cast<size_t>(j)];
    }
    float* yr = y.data.data() + r * n;
    for (int64_t j = 0; j < n; ++j) {
      yr[j] = static_cast<float>(e[static_cast<size_t>(j)] / denom);
    }
  }
  return y;
}

std::pair<Tensor, QuantBlob> softmax_forward(const Tensor& x) {
  Tensor y = softmax_lastdim(x);
  return {y, quantize(y, 4)};
}

Tensor softmax_backward(const Tensor& y_saved, const Tensor& g) {
  if (!same_shape(y_saved, g)) {
    throw std::invalid_argument("softmax_backward: saved " + y_saved.shape_str() +
                                " vs grad " + g.shape_str());
  }
  const int64_t n = y_saved.shape.back();
  const int64_t rows = y_saved.size() / n;
  Tensor gx = Tensor::zeros(y_saved.shape);
  for (int64_t r = 0; r < rows; ++r) {
    const float* yr = y_saved.data.data() + r * n;
    const float* gr = g.data.data() + r * n;
    double dot = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      dot += static_cast<double>(gr[j]) * static_cast<double>(yr[j]);
    }
    float* o = gx.data.data() + r * n;
    for (int64_t j = 0; j < n; ++j) {
      o[j] = static_cast<float>(static_cast<double>(yr[j]) *
                                (static_cast<double>(gr[j]) - dot));
    }
  }
  return gx;
}

Tensor softmax_backward(const QuantBlob& y_saved, const Tensor& g) {
  return softmax_backward(dequantize(y_saved), g);
}

QuantBlob relu_mask(const Tensor& x) {
  if (!all_finite(x)) throw std::runtime_error("relu: non-finite input");
  QuantBlob q;
  q.bits = 1;
  q.shape = x.shape;
  q.s = 0.f;
  q.m = 0.f;
  q.packed.assign(packed_size(x.size(), 1), 0);
  for (int64_t i = 0; i < x.size(); ++i) {
    if (x.data[static_cast<size_t>(i)] > 0.f) {  // strict: x == 0 gates to 0
      q.packed[static_cast<size_t>(i / 8)] |= static_cast<uint8_t>(1u << (i % 8));
    }
  }
  return q;
}

std::pair<Tensor, QuantBlob> relu_forward(const Tensor& x) {
  QuantBlob mask = relu_mask(x);
  Tensor y = x;
  for (float& v : y.data) v = v > 0.f ? v : 0.f;
  return {std::move(y), std::move(mask)};
}

Tensor relu_backward(const QuantBlob& mask, const Tensor& g) {
  if (mask.bits != 1) {
    throw std::invalid_argument("relu_backward: saved state is not a 1-bit mask");
  }
  if (mask.shape != g.shape) {
    throw std::invalid_argument("relu_backward: mask " + shape_to_string(mask.shape) +
                                " vs grad " + g.shape_str());
  }
  Tensor gx = g;
  for (int64_t i = 0; i < g.size(); ++i) {
    const uint8_t bit = (mask.packed[static_cast<size_t>(i / 8)] >> (i % 8)) & 0x1;
    if (!bit) gx.data[static_cast<size_t>(i)] = 0.f;
  }
  return gx;
}

double gelu_derivative_exact(double x) {
  const double u = 1.702 * x;
  const double s = sigmoid(u);
  return s + u * std::exp(-u) * s * s;
}

double gelu_derivative_approx(double x) {
  const double xc = std::clamp(x, -2.0, 2.0);
  return sigmoid(1.702 * xc) + 0.22 * std::sin(1.5 * xc);
}

double gelu_sup_gap(int64_t grid_points, double range) {
  if (grid_points < 2 || range <= 0.0) {
    throw std::invalid_argument("gelu_sup_gap: need >= 2 grid points and positive range");
  }
  const double step = 2.0 * range / static_cast<double>(grid_points - 1);
  double sup = 0.0;
  for (int64_t i = 0; i < grid_points; ++i) {
    const double x = -range + static_cast<double>(i) * step;
    sup = std::max(sup, std::fabs(gelu_derivative_approx(x) - gelu_derivative_exact(x)));
  }
  for (double x : {-2.0, 2.0}) {
    if (std::fabs(x) <= range) {
      sup = std::max(sup, std::fabs(gelu_derivative_approx(x) - gelu_derivative_exact(x)));
    }
  }
  return sup;
}

Tensor gelu_eval(const Tensor& x) {
  if (!all_finite(x)) throw std::runtime_error("gelu: non-finite input");
  Tensor y = x;
  for (float& v : y.data) {
    v = static_cast<float>(static_cast<double>(v) * sigmoid(1.702 * static_cast<double>(v)));
  }
  return y;
}

QuantBlob gelu_saved(const Tensor& x) {
  Tensor clipped = x;
  for (float& v : clipped.data) v = std::clamp(v, -kGeluClip, kGeluClip);
  return quantize(clipped, 4);
}

std::pair<Tensor, QuantBlob> gelu_forward(const Tensor& x) {
  return {gelu_eval(x), gelu_saved(x)};
}

Tensor gelu_backward(const QuantBlob& x_saved, const Tensor& g) {
  Tensor xh = dequantize(x_saved);
  if (!same_shape(xh, g)) {
    throw std::invalid_argument("gelu_backward: saved " + xh.shape_str() + " vs grad " +
                                g.shape_str());
  }
  Tensor gx = g;
  for (int64_t i = 0; i < g.size(); ++i) {
    gx.data[static_cast<size_t>(i)] = static_cast<float>(
        static_cast<double>(g.data[static_cast<size_t>(i)]) *
        gelu_derivative_approx(static_cast<double>(xh.data[static_cast<size_t>(i)])));
  }
  return gx;
}

Tensor gelu_backward(const Tensor& x_saved, const Tensor& g) {
  if (!same_shape(x_saved, g)) {
    throw std::invalid_argument("gelu_backward: saved " + x_saved.shape_str() + " vs grad " +
                                g.shape_str());
  }
  Tensor gx = g;
  for (int64_t i = 0; i < g.size(); ++i) {
    gx.data[static_cast<size_t>(i)] = static_cast<float>(
        static_cast<double>(g.data[static_cast<size_t>(i)]) *
        gelu_derivative_exact(static_cast<double>(x_saved.data[static_cast<size_t>(i)])));
  }
  return gx;
}

}  // namespace s2a
