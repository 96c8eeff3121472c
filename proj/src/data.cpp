#include "s2a/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "s2a/quant.hpp"

namespace s2a {
namespace {

uint32_t read_be32(std::ifstream& f, const std::string& path, size_t& offset) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  if (f.gcount() != 4) {
    throw std::runtime_error("idx: " + path + ": truncated at byte " + std::to_string(offset));
  }
  offset += 4;
  return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) | uint32_t(b[3]);
}

std::vector<unsigned char> read_bytes(std::ifstream& f, const std::string& path, size_t& offset,
                                      size_t n) {
  std::vector<unsigned char> buf(n);
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(f.gcount()) != n) {
    throw std::runtime_error("idx: " + path + ": truncated at byte " +
                             std::to_string(offset + static_cast<size_t>(f.gcount())));
  }
  offset += n;
  return buf;
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream fi(images_path, std::ios::binary);
  if (!fi) throw std::runtime_error("idx: cannot open " + images_path);
  size_t off = 0;
  const uint32_t magic_i = read_be32(fi, images_path, off);
  if (magic_i != 2051) {
    throw std::runtime_error("idx: " + images_path + ": bad magic " + std::to_string(magic_i) +
                             " at byte 0 (want 2051)");
  }
  const int64_t n = read_be32(fi, images_path, off);
  const int64_t rows = read_be32(fi, images_path, off);
  const int64_t cols = read_be32(fi, images_path, off);
  if (n <= 0 || rows <= 0 || cols <= 0) {
    throw std::runtime_error("idx: " + images_path + ": non-positive dimension in header");
  }
  const auto pix = read_bytes(fi, images_path, off, static_cast<size_t>(n * rows * cols));

  std::ifstream fl(labels_path, std::ios::binary);
  if (!fl) throw std::runtime_error("idx: cannot open " + labels_path);
  size_t loff = 0;
  const uint32_t magic_l = read_be32(fl, labels_path, loff);
  if (magic_l != 2049) {
    throw std::runtime_error("idx: " + labels_path + ": bad magic " + std::to_string(magic_l) +
                             " at byte 0 (want 2049)");
  }
  const int64_t nl = read_be32(fl, labels_path, loff);
  if (nl != n) {
    throw std::runtime_error("idx: " + labels_path + ": " + std::to_string(nl) +
                             " labels for " + std::to_string(n) + " images");
  }
  const auto lab = read_bytes(fl, labels_path, loff, static_cast<size_t>(nl));

  Dataset d;
  d.images = Tensor::zeros({n, rows, cols, 1});
  for (size_t i = 0; i < pix.size(); ++i) d.images.data[i] = float(pix[i]) / 255.f;
  d.labels.reserve(static_cast<size_t>(n));
  int max_label = 0;
  for (unsigned char l : lab) {
    d.labels.push_back(int(l));
    max_label = std::max(max_label, int(l));
  }
  d.classes = max_label + 1;
  return d;
}

Dataset load_csv(const std::string& path, int64_t image_hw, int64_t channels, int64_t classes) {
  if (image_hw <= 0 || channels <= 0 || classes <= 0) {
    throw std::invalid_argument("csv: image_hw, channels and classes must be positive");
  }
  std::ifstream f(path);
  if (!f) throw std::runtime_error("csv: cannot open " + path);
  const int64_t pixels = image_hw * image_hw * channels;

  std::vector<float> flat;
  std::vector<int> labels;
  std::string line;
  int64_t row = 0;
  while (std::getline(f, line)) {
    ++row;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> vals;
    while (std::getline(ss, cell, ',')) {
      size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(cell, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != cell.size() || cell.empty()) {
        throw std::runtime_error("csv: " + path + ": row " + std::to_string(row) +
                                 ": non-numeric value '" + cell + "'");
      }
      vals.push_back(v);
    }
    if (static_cast<int64_t>(vals.size()) != pixels + 1) {
      throw std::runtime_error("csv: " + path + ": row " + std::to_string(row) + ": expected " +
                               std::to_string(pixels + 1) + " values, got " +
                               std::to_string(vals.size()));
    }
    const double lv = vals[0];
    if (lv != std::floor(lv) || lv < 0 || lv >= double(classes)) {
      throw std::runtime_error("csv: " + path + ": row " + std::to_string(row) + ": label " +
                               std::to_string(lv) + " out of range [0, " +
                               std::to_string(classes) + ")");
    }
    labels.push_back(int(lv));
    for (int64_t i = 1; i <= pixels; ++i) {
      flat.push_back(float(std::clamp(vals[static_cast<size_t>(i)], 0.0, 255.0) / 255.0));
    }
  }
  if (labels.empty()) throw std::runtime_error("csv: " + path + ": no data rows");

  Dataset d;
  const int64_t n = static_cast<int64_t>(labels.size());
  d.images = Tensor::zeros({n, image_hw, image_hw, channels});
  d.images.data = std::move(flat);
  d.labels = std::move(labels);
  d.classes = classes;
  return d;
}

namespace {

// Fixed teacher: class logits mix a global-color part with a quadrant-
// contrast part. A frozen random backbone passes global channel means
// through to its features almost untouched but attenuates position-bound
// structure heavily, so the global part sets the floor a plain probe can
// reach while the quadrant part rewards methods that adapt the
// representation. Weights come from a constant seed so the task itself
// never varies with the user seed; only the sampled images do.
struct Teacher {
  Tensor w, u;  // [ch, classes], [4*ch, classes]
  int64_t hw, ch, classes;
  static constexpr double kAlpha = 1.0;  // quadrant share of the logit

  Teacher(int64_t image_hw, int64_t channels, int64_t n_classes)
      : hw(image_hw), ch(channels), classes(n_classes) {
    RandomSource rng(0x7ea0c4e5u);
    w = random_normal(rng, {channels, n_classes}, 0.0, 1.0);
    u = random_normal(rng, {4 * channels, n_classes}, 0.0, 1.0);
  }

  int label(const float* img) const {
    const int64_t half = hw / 2;
    // per-channel global means and per-quadrant deviations, centered so the
    // DC offset of uniform pixels carries no class information
    std::vector<double> quad(static_cast<size_t>(4 * ch), 0.0);
    std::vector<double> glob(static_cast<size_t>(ch), 0.0);
    for (int64_t r = 0; r < hw; ++r) {
      for (int64_t c = 0; c < hw; ++c) {
        for (int64_t k = 0; k < ch; ++k) {
          const double v = img[(r * hw + c) * ch + k] - 0.5;
          glob[static_cast<size_t>(k)] += v;
          quad[static_cast<size_t>(((r / half) * 2 + c / half) * ch + k)] += v;
        }
      }
    }
    const double inv_all = 1.0 / static_cast<double>(hw * hw);
    const double inv_quad = 4.0 * inv_all;
    for (int64_t k = 0; k < ch; ++k) glob[static_cast<size_t>(k)] *= inv_all;
    for (int64_t q = 0; q < 4; ++q) {
      for (int64_t k = 0; k < ch; ++k) {
        double& d = quad[static_cast<size_t>(q * ch + k)];
        d = d * inv_quad - glob[static_cast<size_t>(k)];
      }
    }
    int best = 0;
    double best_v = -1e300;
    for (int64_t k = 0; k < classes; ++k) {
      double logit = 0.0;
      for (int64_t i = 0; i < ch; ++i) {
        logit += 4.0 * glob[static_cast<size_t>(i)] *
                 w.data[static_cast<size_t>(i * classes + k)];
      }
      for (int64_t i = 0; i < 4 * ch; ++i) {
        logit += kAlpha * 4.0 * quad[static_cast<size_t>(i)] *
                 u.data[static_cast<size_t>(i * classes + k)];
      }
      if (logit > best_v) {
        best_v = logit;
        best = int(k);
      }
    }
    return best;
  }
};

}  // namespace

Dataset make_synthetic(uint64_t seed, int64_t n, int64_t image_hw, int64_t channels,
                       int64_t classes) {
  if (n <= 0 || n % classes != 0) {
    throw std::invalid_argument("synthetic: n must be a positive multiple of classes");
  }
  if (image_hw % 2 != 0) throw std::invalid_argument("synthetic: image_hw must be even");
  const Teacher teacher(image_hw, channels, classes);
  const int64_t quota = n / classes;
  const int64_t img_sz = image_hw * image_hw * channels;

  Dataset d;
  d.images = Tensor::zeros({n, image_hw, image_hw, channels});
  d.labels.assign(static_cast<size_t>(n), 0);
  d.classes = classes;

  RandomSource rng(seed * 0x9E3779B97F4A7C15ull + 0x5371ull);
  std::vector<int64_t> count(static_cast<size_t>(classes), 0);
  std::vector<float> img(static_cast<size_t>(img_sz));
  int64_t accepted = 0;
  for (int64_t attempt = 0; accepted < n; ++attempt) {
    if (attempt > 4000 * n) {
      throw std::runtime_error("synthetic: class balance unreachable, teacher too skewed");
    }
    for (float& v : img) v = float(rng.uniform(0.0, 1.0));
    const int y = teacher.label(img.data());
    if (count[static_cast<size_t>(y)] >= quota) continue;
    ++count[static_cast<size_t>(y)];
    std::copy(img.begin(), img.end(),
              d.images.data.begin() + static_cast<int64_t>(accepted * img_sz));
    d.labels[static_cast<size_t>(accepted)] = y;
    ++accepted;
  }
  return d;
}

std::pair<Dataset, Dataset> split_dataset(const Dataset& d, double val_fraction, uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw std::invalid_argument("split: val_fraction must be in (0, 1)");
  }
  const int64_t n = d.size();
  const int64_t n_val = std::max<int64_t>(1, static_cast<int64_t>(std::llround(n * val_fraction)));
  if (n_val >= n) throw std::invalid_argument("split: validation set would swallow the data");

  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 gen(seed);
  for (int64_t i = n - 1; i > 0; --i) {
    const int64_t j = static_cast<int64_t>(gen() % static_cast<uint64_t>(i + 1));
    std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
  }
  std::vector<int64_t> tr(order.begin(), order.end() - n_val);
  std::vector<int64_t> va(order.end() - n_val, order.end());
  auto out = std::make_pair(take(d, tr), take(d, va));
  out.first.split = "train";
  out.second.split = "val";
  return out;
}

Dataset take(const Dataset& d, const std::vector<int64_t>& idx) {
  const int64_t n = d.size();
  int64_t per = 1;
  for (size_t i = 1; i < d.images.shape.size(); ++i) per *= d.images.shape[i];
  Dataset out;
  std::vector<int64_t> shape = d.images.shape;
  shape[0] = static_cast<int64_t>(idx.size());
  out.images = Tensor::zeros(shape);
  out.labels.reserve(idx.size());
  out.classes = d.classes;
  out.split = d.split;
  for (size_t r = 0; r < idx.size(); ++r) {
    const int64_t i = idx[r];
    if (i < 0 || i >= n) throw std::out_of_range("take: index " + std::to_string(i));
    std::copy_n(d.images.data.begin() + i * per, per,
                out.images.data.begin() + static_cast<int64_t>(r) * per);
    out.labels.push_back(d.labels[static_cast<size_t>(i)]);
  }
  return out;
}

}  // namespace s2a
