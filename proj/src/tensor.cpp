#include "s2a/tensor.hpp"

#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace s2a {

namespace {

void check_rank(const Tensor& t, size_t r, const char* who) {
  if (t.rank() != r) {
    throw std::invalid_argument(std::string(who) + ": expected rank " +
                                std::to_string(r) + " tensor, got shape " + t.shape_str());
  }
}

}  // namespace

int64_t shape_product(const std::vector<int64_t>& shape) {
  int64_t p = 1;
  for (int64_t d : shape) p *= d;
  return p;
}

std::string shape_to_string(const std::vector<int64_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Tensor::Tensor(std::vector<int64_t> shape_in, std::vector<float> data_in)
    : shape(std::move(shape_in)), data(std::move(data_in)) {
  for (int64_t d : shape) {
    if (d < 1) {
      throw std::invalid_argument("Tensor: non-positive dim in shape " + shape_str());
    }
  }
  if (shape_product(shape) != static_cast<int64_t>(data.size())) {
    throw std::invalid_argument("Tensor: shape " + shape_str() + " wants " +
                                std::to_string(shape_product(shape)) + " elements, got " +
                                std::to_string(data.size()));
  }
}

Tensor Tensor::zeros(std::vector<int64_t> shape_in) {
  int64_t n = shape_product(shape_in);
  if (n < 0) throw std::invalid_argument("Tensor::zeros: bad shape " + shape_to_string(shape_in));
  return Tensor(std::move(shape_in), std::vector<float>(static_cast<size_t>(n), 0.f));
}

Tensor Tensor::full(std::vector<int64_t> shape_in, float value) {
  int64_t n = shape_product(shape_in);
  if (n < 0) throw std::invalid_argument("Tensor::full: bad shape " + shape_to_string(shape_in));
  return Tensor(std::move(shape_in), std::vector<float>(static_cast<size_t>(n), value));
}

Tensor Tensor::scalar(float value) { return Tensor({1}, {value}); }

int64_t Tensor::size() const { return static_cast<int64_t>(data.size()); }

int64_t Tensor::dim(size_t i) const {
  if (i >= shape.size()) {
    throw std::invalid_argument("Tensor::dim: axis " + std::to_string(i) +
                                " out of range for shape " + shape_str());
  }
  return shape[i];
}

std::string Tensor::shape_str() const { return shape_to_string(shape); }

float& Tensor::at(std::initializer_list<int64_t> idx) {
  if (idx.size() != shape.size()) {
    throw std::invalid_argument("Tensor::at: rank mismatch for shape " + shape_str());
  }
  int64_t off = 0;
  size_t i = 0;
  for (int64_t v : idx) {
    if (v < 0 || v >= shape[i]) {
      throw std::invalid_argument("Tensor::at: index out of range for shape " + shape_str());
    }
    off = off * shape[i] + v;
    ++i;
  }
  return data[static_cast<size_t>(off)];
}

float Tensor::at(std::initializer_list<int64_t> idx) const {
  return const_cast<Tensor*>(this)->at(idx);
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_rank(a, 2, "matmul");
  check_rank(b, 2, "matmul");
  if (a.shape[1] != b.shape[0]) {
    throw std::invalid_argument("matmul: inner dims disagree, " + a.shape_str() + " x " +
                                b.shape_str());
  }
  const int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tensor out = Tensor::zeros({m, n});
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int64_t p = 0; p < k; ++p) {
        acc += static_cast<double>(a.data[i * k + p]) * static_cast<double>(b.data[p * n + j]);
      }
      out.data[i * n + j] = static_cast<float>(acc);
    }
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  check_rank(a, 2, "matmul_nt");
  check_rank(b, 2, "matmul_nt");
  if (a.shape[1] != b.shape[1]) {
    throw std::invalid_argument("matmul_nt: inner dims disagree, " + a.shape_str() + " x " +
                                b.shape_str() + "^T");
  }
  const int64_t m = a.shape[0], k = a.shape[1], n = b.shape[0];
  Tensor out = Tensor::zeros({m, n});
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int64_t p = 0; p < k; ++p) {
        acc += static_cast<double>(a.data[i * k + p]) * static_cast<double>(b.data[j * k + p]);
      }
      out.data[i * n + j] = static_cast<float>(acc);
    }
  }
  return out;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  check_rank(a, 2, "matmul_tn");
  check_rank(b, 2, "matmul_tn");
  if (a.shape[0] != b.shape[0]) {
    throw std::invalid_argument("matmul_tn: inner dims disagree, " + a.shape_str() + "^T x " +
                                b.shape_str());
  }
  const int64_t k = a.shape[0], m = a.shape[1], n = b.shape[1];
  Tensor out = Tensor::zeros({m, n});
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int64_t p = 0; p < k; ++p) {
        acc += static_cast<double>(a.data[p * m + i]) * static_cast<double>(b.data[p * n + j]);
      }
      out.data[i * n + j] = static_cast<float>(acc);
    }
  }
  return out;
}

namespace {

Tensor batched(const Tensor& a, const Tensor& b, Tensor (*fn)(const Tensor&, const Tensor&),
               const char* who) {
  if (a.rank() != 3 || b.rank() != 3 || a.shape[0] != b.shape[0]) {
    throw std::invalid_argument(std::string(who) + ": expected matching rank-3 batches, got " +
                                a.shape_str() + " and " + b.shape_str());
  }
  const int64_t B = a.shape[0];
  const int64_t as = a.shape[1] * a.shape[2], bs = b.shape[1] * b.shape[2];
  Tensor out;
  for (int64_t i = 0; i < B; ++i) {
    Tensor sa({a.shape[1], a.shape[2]},
              std::vector<float>(a.data.begin() + i * as, a.data.begin() + (i + 1) * as));
    Tensor sb({b.shape[1], b.shape[2]},
              std::vector<float>(b.data.begin() + i * bs, b.data.begin() + (i + 1) * bs));
    Tensor so = fn(sa, sb);
    if (i == 0) {
      out = Tensor::zeros({B, so.shape[0], so.shape[1]});
    }
    std::copy(so.data.begin(), so.data.end(), out.data.begin() + i * so.size());
  }
  if (B == 0) throw std::invalid_argument(std::string(who) + ": empty batch");
  return out;
}

}  // namespace

Tensor matmul3(const Tensor& a, const Tensor& b) { return batched(a, b, matmul, "matmul3"); }
Tensor matmul3_nt(const Tensor& a, const Tensor& b) { return batched(a, b, matmul_nt, "matmul3_nt"); }
Tensor matmul3_tn(const Tensor& a, const Tensor& b) { return batched(a, b, matmul_tn, "matmul3_tn"); }

Tensor pointwise_conv(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() < 2) {
    throw std::invalid_argument("pointwise_conv: input must have rank >= 2, got " + x.shape_str());
  }
  check_rank(w, 2, "pointwise_conv");
  check_rank(b, 1, "pointwise_conv");
  const int64_t cin = x.shape.back();
  if (w.shape[0] != cin || w.shape[1] != b.shape[0]) {
    throw std::invalid_argument("pointwise_conv: x " + x.shape_str() + " vs w " + w.shape_str() +
                                " vs b " + b.shape_str());
  }
  const int64_t rows = x.size() / cin;
  Tensor flat({rows, cin}, x.data);
  Tensor y = matmul(flat, w);  // exactly matmul + bias broadcast
  y = add_rows(y, b);
  std::vector<int64_t> out_shape = x.shape;
  out_shape.back() = w.shape[1];
  return reshape(y, std::move(out_shape));
}

Tensor depthwise_conv(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
  check_rank(x, 3, "depthwise_conv");
  check_rank(kernel, 3, "depthwise_conv");
  check_rank(bias, 1, "depthwise_conv");
  const int64_t H = x.shape[0], W = x.shape[1], C = x.shape[2];
  if (kernel.shape[0] != 3 || kernel.shape[1] != 3 || kernel.shape[2] != C) {
    throw std::invalid_argument("depthwise_conv: kernel must be [3,3,C], got " +
                                kernel.shape_str() + " for input " + x.shape_str());
  }
  if (bias.shape[0] != C) {
    throw std::invalid_argument("depthwise_conv: bias " + bias.shape_str() +
                                " does not match channels of " + x.shape_str());
  }
  Tensor out = Tensor::zeros({H, W, C});
  for (int64_t h = 0; h < H; ++h) {
    for (int64_t w = 0; w < W; ++w) {
      for (int64_t c = 0; c < C; ++c) {
        double acc = static_cast<double>(bias.data[c]);
        for (int64_t i = 0; i < 3; ++i) {
          for (int64_t j = 0; j < 3; ++j) {
            const int64_t hh = h + i - 1, ww = w + j - 1;
            if (hh < 0 || hh >= H || ww < 0 || ww >= W) continue;  // zero padding
            acc += static_cast<double>(x.data[(hh * W + ww) * C + c]) *
                   static_cast<double>(kernel.data[(i * 3 + j) * C + c]);
          }
        }
        out.data[(h * W + w) * C + c] = static_cast<float>(acc);
      }
    }
  }
  return out;
}

Tensor concat_last_dim(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank() || a.rank() == 0) {
    throw std::invalid_argument("concat_last_dim: rank mismatch, " + a.shape_str() + " vs " +
                                b.shape_str());
  }
  for (size_t i = 0; i + 1 < a.rank(); ++i) {
    if (a.shape[i] != b.shape[i]) {
      throw std::invalid_argument("concat_last_dim: leading dims disagree, " + a.shape_str() +
                                  " vs " + b.shape_str());
    }
  }
  const int64_t ca = a.shape.back(), cb = b.shape.back();
  int64_t lead = 1;
  for (size_t i = 0; i + 1 < a.rank(); ++i) lead *= a.shape[i];
  std::vector<int64_t> out_shape = a.shape;
  out_shape.back() = ca + cb;
  Tensor out = Tensor::zeros(out_shape);
  for (int64_t r = 0; r < lead; ++r) {
    for (int64_t c = 0; c < ca; ++c) out.data[r * (ca + cb) + c] = a.data[r * ca + c];
    for (int64_t c = 0; c < cb; ++c) out.data[r * (ca + cb) + ca + c] = b.data[r * cb + c];
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b)) {
    throw std::invalid_argument("add: shape mismatch, " + a.shape_str() + " vs " + b.shape_str());
  }
  Tensor out = a;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b)) {
    throw std::invalid_argument("sub: shape mismatch, " + a.shape_str() + " vs " + b.shape_str());
  }
  Tensor out = a;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.data[i];
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b)) {
    throw std::invalid_argument("mul: shape mismatch, " + a.shape_str() + " vs " + b.shape_str());
  }
  Tensor out = a;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.data[i];
  return out;
}

Tensor scale(const Tensor& a, float c) {
  Tensor out = a;
  for (float& v : out.data) v *= c;
  return out;
}

Tensor transpose2(const Tensor& a) {
  check_rank(a, 2, "transpose2");
  const int64_t m = a.shape[0], n = a.shape[1];
  Tensor out = Tensor::zeros({n, m});
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) out.data[j * m + i] = a.data[i * n + j];
  }
  return out;
}

Tensor reshape(const Tensor& a, std::vector<int64_t> shape) {
  if (shape_product(shape) != a.size()) {
    throw std::invalid_argument("reshape: cannot view " + a.shape_str() + " as " +
                                shape_to_string(shape));
  }
  Tensor out = a;
  out.shape = std::move(shape);
  return out;
}

double sum_all(const Tensor& a) {
  double acc = 0.0;
  for (float v : a.data) acc += static_cast<double>(v);
  return acc;
}

double dot_all(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b)) {
    throw std::invalid_argument("dot_all: shape mismatch, " + a.shape_str() + " vs " +
                                b.shape_str());
  }
  double acc = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    acc += static_cast<double>(a.data[i]) * static_cast<double>(b.data[i]);
  }
  return acc;
}

Tensor sum_rows(const Tensor& a) {
  if (a.rank() < 1) throw std::invalid_argument("sum_rows: scalar input");
  const int64_t c = a.shape.back();
  if (c == 0) return Tensor::zeros({0});
  const int64_t rows = a.size() / c;
  std::vector<double> acc(static_cast<size_t>(c), 0.0);
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t j = 0; j < c; ++j) acc[j] += static_cast<double>(a.data[r * c + j]);
  }
  Tensor out = Tensor::zeros({c});
  for (int64_t j = 0; j < c; ++j) out.data[j] = static_cast<float>(acc[j]);
  return out;
}

Tensor add_rows(const Tensor& x, const Tensor& row) {
  const int64_t c = x.rank() >= 1 ? x.shape.back() : 0;
  if (c <= 0 || row.size() == 0 || x.size() % row.size() != 0 || row.size() % c != 0) {
    throw std::invalid_argument("add_rows: cannot broadcast " + row.shape_str() + " over " +
                                x.shape_str());
  }
  const int64_t span = row.size();
  Tensor out = x;
  for (int64_t i = 0; i < x.size(); ++i) out.data[i] += row.data[i % span];
  return out;
}

float max_abs(const Tensor& a) {
  float m = 0.f;
  for (float v : a.data) m = std::max(m, std::fabs(v));
  return m;
}

bool all_finite(const Tensor& a) {
  for (float v : a.data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

double RandomSource::uniform(double lo, double hi) {
  const double u = static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  return lo + u * (hi - lo);
}

double RandomSource::normal(double mean, double stddev) {
  if (have_spare_) {
    have_spare_ = false;
    return mean + stddev * spare_;
  }
  double u1 = 0.0;
  do {
    u1 = uniform(0.0, 1.0);
  } while (u1 <= 0.0);
  const double u2 = uniform(0.0, 1.0);
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  have_spare_ = true;
  return mean + stddev * r * std::cos(theta);
}

Tensor random_uniform(RandomSource& rng, std::vector<int64_t> shape, double lo, double hi) {
  Tensor out = Tensor::zeros(std::move(shape));
  for (float& v : out.data) v = static_cast<float>(rng.uniform(lo, hi));
  return out;
}

Tensor random_normal(RandomSource& rng, std::vector<int64_t> shape, double mean, double stddev) {
  Tensor out = Tensor::zeros(std::move(shape));
  for (float& v : out.data) v = static_cast<float>(rng.normal(mean, stddev));
  return out;
}

}  // namespace s2a
