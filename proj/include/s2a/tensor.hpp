#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string>
#include <vector>

namespace s2a {

// Dense row-major float32 tensor. Values are treated as immutable once
// constructed; training code swaps parameter storage between steps instead of
// aliasing live tensors.
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<float> data;

  Tensor() = default;
  Tensor(std::vector<int64_t> shape_in, std::vector<float> data_in);

  static Tensor zeros(std::vector<int64_t> shape_in);
  static Tensor full(std::vector<int64_t> shape_in, float value);
  static Tensor scalar(float value);

  int64_t size() const;
  int64_t dim(size_t i) const;
  size_t rank() const { return shape.size(); }
  std::string shape_str() const;

  float& at(std::initializer_list<int64_t> idx);
  float at(std::initializer_list<int64_t> idx) const;
};

int64_t shape_product(const std::vector<int64_t>& shape);
std::string shape_to_string(const std::vector<int64_t>& shape);
bool same_shape(const Tensor& a, const Tensor& b);

// Core kernels. Contractions accumulate in double, left to right over the
// contracted index, so results are bit-reproducible per platform.
Tensor matmul(const Tensor& a, const Tensor& b);              // [m,k]x[k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);           // a x b^T
Tensor matmul_tn(const Tensor& a, const Tensor& b);           // a^T x b
Tensor matmul3(const Tensor& a, const Tensor& b);             // [B,m,k]x[B,k,n]
Tensor matmul3_nt(const Tensor& a, const Tensor& b);
Tensor matmul3_tn(const Tensor& a, const Tensor& b);

// x: [..., C_in] treated as rows; w: [C_in, C_out]; b: [C_out].
Tensor pointwise_conv(const Tensor& x, const Tensor& w, const Tensor& b);

// x: [H,W,C]; kernel: [3,3,C]; bias: [C]. Zero padding 1, stride 1.
Tensor depthwise_conv(const Tensor& x, const Tensor& kernel, const Tensor& bias);

// Concatenate along the last dimension; all leading dims must match.
Tensor concat_last_dim(const Tensor& a, const Tensor& b);

// Elementwise / shape plumbing.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float c);
Tensor transpose2(const Tensor& a);                           // [m,n] -> [n,m]
Tensor reshape(const Tensor& a, std::vector<int64_t> shape);  // same element count
double sum_all(const Tensor& a);
double dot_all(const Tensor& a, const Tensor& b);
Tensor sum_rows(const Tensor& a);    // [..., C] -> [C], summing leading dims
Tensor add_rows(const Tensor& x, const Tensor& row);  // broadcast row over leading dims
float max_abs(const Tensor& a);
bool all_finite(const Tensor& a);

// Deterministic RNG. mt19937_64 is bit-exact by the standard; the uniform and
// normal transforms are hand-rolled because std::*_distribution output is
// implementation-defined.
class RandomSource {
 public:
  explicit RandomSource(uint64_t seed) : gen_(seed) {}
  uint64_t next_u64() { return gen_(); }
  // in [lo, hi)
  double uniform(double lo = 0.0, double hi = 1.0);
  double normal(double mean = 0.0, double stddev = 1.0);

 private:
  std::mt19937_64 gen_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

Tensor random_uniform(RandomSource& rng, std::vector<int64_t> shape, double lo, double hi);
Tensor random_normal(RandomSource& rng, std::vector<int64_t> shape, double mean, double stddev);

}  // namespace s2a
