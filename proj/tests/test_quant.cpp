#include <stdexcept>
#include <cmath>
#include <cstring>
#include <vector>

#include <doctest.h>

#include "s2a/quant.hpp"
#include "s2a/tensor.hpp"

using namespace s2a;

namespace {

float ulp_at(float x) {
  const float a = std::fabs(x);
  return std::nextafterf(a, std::numeric_limits<float>::infinity()) - a;
}

// Per-element reconstruction tolerance: half a step plus one float ulp at the
// largest reconstructable magnitude.
float roundtrip_tol(const QuantBlob& q) {
  const float reach = std::max(std::fabs(q.m), std::fabs(q.m + 15.f * q.s));
  return q.s * 0.5f + ulp_at(reach);
}

}  // namespace

TEST_CASE("4-bit codes hit the expected grid points") {
  const Tensor t({3}, {0.f, 8.f / 15.f, 1.f});
  const QuantBlob q = quantize(t, 4);
  CHECK(q.s == doctest::Approx(1.f / 15.f));
  CHECK(q.m == 0.f);
  // codes 0, 8, 15; low nibble first
  CHECK((q.packed[0] & 0xF) == 0);
  CHECK((q.packed[0] >> 4) == 8);
  CHECK((q.packed[1] & 0xF) == 15);
  const Tensor back = dequantize(q);
  CHECK(back.data[0] == 0.f);
  CHECK(back.data[2] == doctest::Approx(1.f));
}

TEST_CASE("roundtrip bound holds over many random tensors") {
  RandomSource rng(101);
  for (int rep = 0; rep < 300; ++rep) {
    const int64_t n = 1 + int64_t(rng.next_u64() % 257);
    const double lo = rng.uniform(-8.0, 8.0);
    const double hi = lo + rng.uniform(0.0, 10.0);
    const Tensor t = random_uniform(rng, {n}, lo, hi);
    const QuantBlob q = quantize(t, 4);
    const Tensor back = dequantize(q);
    const float tol = roundtrip_tol(q);
    for (int64_t i = 0; i < n; ++i) {
      CHECK(std::fabs(back.data[size_t(i)] - t.data[size_t(i)]) <= tol);
    }
  }
}

TEST_CASE("degenerate tensors: constant and single element") {
  const Tensor c = Tensor::full({17}, 3.25f);
  const QuantBlob qc = quantize(c, 4);
  CHECK(qc.s == 0.f);
  const Tensor back = dequantize(qc);
  for (float v : back.data) CHECK(v == 3.25f);

  const Tensor one = Tensor::scalar(-2.5f);
  const Tensor b1 = dequantize(quantize(one, 4));
  CHECK(b1.data[0] == -2.5f);

  CHECK_THROWS_AS(quantize(Tensor{}, 4), std::invalid_argument);
  Tensor nan_t = Tensor::full({3}, 1.f);
  nan_t.data[1] = std::nanf("");
  CHECK_THROWS_AS(quantize(nan_t, 4), std::runtime_error);
  CHECK_THROWS_AS(quantize(c, 3), std::invalid_argument);
}

TEST_CASE("packing sizes and serialize roundtrip") {
  CHECK(packed_size(5, 4) == 3);
  CHECK(packed_size(16, 1) == 2);
  CHECK(packed_size(9, 1) == 2);

  RandomSource rng(102);
  const Tensor t = random_uniform(rng, {4, 7}, -1.0, 2.0);
  const QuantBlob q = quantize(t, 4);
  const std::vector<uint8_t> bytes = serialize(q);
  const QuantBlob r = deserialize_blob(bytes);
  CHECK(r.bits == q.bits);
  CHECK(r.shape == q.shape);
  CHECK(r.s == q.s);
  CHECK(r.m == q.m);
  CHECK(r.packed == q.packed);

  std::vector<uint8_t> cut(bytes.begin(), bytes.end() - 3);
  CHECK_THROWS_AS(deserialize_blob(cut), std::runtime_error);
  std::vector<uint8_t> empty;
  CHECK_THROWS_AS(deserialize_blob(empty), std::runtime_error);
}

TEST_CASE("blob footprint charges payload plus scale pair") {
  RandomSource rng(103);
  const Tensor t = random_uniform(rng, {10, 10}, -1.0, 1.0);
  CHECK(quantize(t, 4).live_bytes() == 50 + 8);
  CHECK(relu_mask(t).live_bytes() == 13);  // ceil(100/8), no scale pair
}

TEST_CASE("softmax rows sum to one and match a double reference") {
  RandomSource rng(104);
  const Tensor x = random_uniform(rng, {6, 9}, -5.0, 5.0);
  const Tensor y = softmax_lastdim(x);
  for (int64_t r = 0; r < 6; ++r) {
    double s = 0.0;
    for (int64_t c = 0; c < 9; ++c) s += y.data[size_t(r * 9 + c)];
    CHECK(std::fabs(s - 1.0) < 1e-6);
    double mx = -1e300;
    for (int64_t c = 0; c < 9; ++c) mx = std::max(mx, double(x.data[size_t(r * 9 + c)]));
    double den = 0.0;
    for (int64_t c = 0; c < 9; ++c) den += std::exp(double(x.data[size_t(r * 9 + c)]) - mx);
    for (int64_t c = 0; c < 9; ++c) {
      const double want = std::exp(double(x.data[size_t(r * 9 + c)]) - mx) / den;
      CHECK(double(y.data[size_t(r * 9 + c)]) == doctest::Approx(want).epsilon(1e-5));
    }
  }
}

TEST_CASE("softmax backward matches the Jacobian formula") {
  RandomSource rng(105);
  const Tensor x = random_uniform(rng, {4, 8}, -3.0, 3.0);
  const Tensor y = softmax_lastdim(x);
  const Tensor g = random_uniform(rng, {4, 8}, -1.0, 1.0);
  const Tensor gx = softmax_backward(y, g);
  for (int64_t r = 0; r < 4; ++r) {
    double dot = 0.0;
    for (int64_t c = 0; c < 8; ++c) {
      dot += double(g.data[size_t(r * 8 + c)]) * double(y.data[size_t(r * 8 + c)]);
    }
    for (int64_t c = 0; c < 8; ++c) {
      const double want =
          double(y.data[size_t(r * 8 + c)]) * (double(g.data[size_t(r * 8 + c)]) - dot);
      CHECK(double(gx.data[size_t(r * 8 + c)]) == doctest::Approx(want).epsilon(1e-5));
    }
  }
}

TEST_CASE("relu mask is lossless and gates zero") {
  RandomSource rng(106);
  Tensor x = random_uniform(rng, {257}, -1.0, 1.0);
  x.data[0] = 0.f;   // exactly at the threshold
  x.data[1] = -0.f;  // negative zero
  const auto [y, mask] = relu_forward(x);
  const Tensor g = random_uniform(rng, {257}, -2.0, 2.0);
  const Tensor gq = relu_backward(mask, g);
  for (size_t i = 0; i < x.data.size(); ++i) {
    const float want = x.data[i] > 0.f ? g.data[i] : 0.f;
    CHECK(std::memcmp(&gq.data[i], &want, 4) == 0);  // bit-identical
    CHECK(y.data[i] == (x.data[i] > 0.f ? x.data[i] : 0.f));
  }
  CHECK(gq.data[0] == 0.f);
  CHECK(gq.data[1] == 0.f);
}

TEST_CASE("gelu forward values and derivative pins") {
  CHECK(gelu_eval(Tensor::scalar(0.f)).data[0] == 0.f);
  const double s1 = 1.0 / (1.0 + std::exp(-1.702));
  CHECK(double(gelu_eval(Tensor::scalar(1.f)).data[0]) == doctest::Approx(s1).epsilon(1e-6));
  CHECK(gelu_derivative_exact(0.0) == 0.5);
  CHECK(gelu_derivative_approx(0.0) == 0.5);
  // approximation clips: far in the tails it freezes at the x = +-2 values
  CHECK(gelu_derivative_approx(5.0) == gelu_derivative_approx(2.0));
  CHECK(gelu_derivative_approx(-7.0) == gelu_derivative_approx(-2.0));
  // saturates to 1 but the x*sigmoid'(1.702x) term still adds ~3.4e-4 at x=6
  CHECK(gelu_derivative_exact(6.0) == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("gelu sup gap is the frozen constant, attained at the clip edge") {
  const double sup = gelu_sup_gap();
  CHECK(sup == doctest::Approx(kDGelu).epsilon(1e-9));
  const double at_edge = std::fabs(gelu_derivative_exact(2.0) - gelu_derivative_approx(2.0));
  CHECK(at_edge == doctest::Approx(kDGelu).epsilon(1e-9));
  // no grid point beats the edge
  CHECK(sup <= at_edge + 1e-12);
  // a coarse grid that misses x = 2 still reports the edge thanks to the
  // explicit candidates
  CHECK(gelu_sup_gap(101, 6.0) == doctest::Approx(kDGelu).epsilon(1e-9));
}

TEST_CASE("gelu saved state is the clipped quantized input") {
  RandomSource rng(107);
  const Tensor x = random_uniform(rng, {300}, -5.0, 5.0);
  const auto [y, saved] = gelu_forward(x);
  CHECK(y.shape == x.shape);
  // forward is not clipped
  const Tensor y2 = gelu_eval(x);
  for (size_t i = 0; i < y.data.size(); ++i) CHECK(y.data[i] == y2.data[i]);
  const Tensor xh = dequantize(saved);
  for (float v : xh.data) {
    CHECK(v >= -kGeluClip - 1e-3f);
    CHECK(v <= kGeluClip + 1e-3f);
  }
}

TEST_CASE("quantized backward drift shrinks with the value range") {
  // Directional property: smaller input ranges mean finer 4-bit steps, so the
  // quantized-state backward drifts less from the exact one.
  RandomSource rng(108);
  auto drift = [&](double range) {
    const Tensor x = random_uniform(rng, {64, 64}, -range, range);
    const Tensor g = random_uniform(rng, {64, 64}, -1.0, 1.0);
    const Tensor exact = gelu_backward(x, g);
    const Tensor approx = gelu_backward(gelu_saved(x), g);
    double acc = 0.0;
    for (size_t i = 0; i < exact.data.size(); ++i) {
      const double d = double(exact.data[i]) - double(approx.data[i]);
      acc += d * d;
    }
    return std::sqrt(acc);
  };
  const double wide = drift(2.0);   // inside the clip window, pure quantization
  const double narrow = drift(0.2);
  CHECK(narrow < wide);
}
