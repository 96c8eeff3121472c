#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "s2a/tensor.hpp"

namespace s2a {

struct Dataset {
  Tensor images;            // [n, H, W, c], values in [0, 1]
  std::vector<int> labels;  // each in [0, classes)
  int64_t classes = 0;
  std::string split = "train";

  int64_t size() const { return images.shape.empty() ? 0 : images.shape[0]; }
};

// IDX pair (ubyte images + ubyte labels, big-endian headers). Pixels are
// scaled to [0, 1]; images come out [n, rows, cols, 1]. Malformed input
// reports the byte offset.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

// CSV rows "label,p0,p1,...": one image per row, pixels in [0, 255] scaled to
// [0, 1], row length must be 1 + H*W*c. Errors name the offending row.
Dataset load_csv(const std::string& path, int64_t image_hw, int64_t channels, int64_t classes);

// Built-in patch-classification task: uniform noise images labeled by a fixed
// nonlinear teacher (pooled patch stats through a small GELU net), rejection
// sampled to an exact per-class balance. n must be divisible by classes.
Dataset make_synthetic(uint64_t seed, int64_t n, int64_t image_hw = 8, int64_t channels = 3,
                       int64_t classes = 4);

// Seeded shuffle, then head/tail split. val_fraction in (0, 1).
std::pair<Dataset, Dataset> split_dataset(const Dataset& d, double val_fraction, uint64_t seed);

// Gather rows by index (bounds-checked).
Dataset take(const Dataset& d, const std::vector<int64_t>& idx);

}  // namespace s2a
