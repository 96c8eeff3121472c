#pragma once

// Theoretical training-memory accountant. For a given architecture geometry,
// tuning method, and batch size it enumerates every layer's weight, gradient,
// optimizer, and saved-activation cost a priori. The rules mirror the tape's
// save decisions exactly: a row's name equals the node label that would carry
// those bytes, so a live tape can be audited against the estimate down to the
// byte (verify_against_tape).

#include <cstdint>
#include <string>
#include <vector>

#include "s2a/modules.hpp"
#include "s2a/tape.hpp"

namespace s2a {

struct ArchGeometry {
  std::string name;
  int64_t depth = 0;
  int64_t dim = 0;
  int64_t heads = 0;
  int64_t mlp_hidden = 0;
  int64_t tokens = 0;        // incl. class token
  int64_t patch_tokens = 0;  // tokens - 1
  int64_t patch_dim = 0;     // flattened patch pixels feeding patch_embed
  int64_t classes = 0;
  int64_t lrp_rank = 0;
  int64_t cap_factor = 0;
  int64_t prompt_tokens = 0;
  int64_t lora_rank = 0;
  int64_t adapter_bottleneck = 0;

  int64_t side_dim() const { return cap_factor > 0 ? dim / cap_factor : 0; }
};

ArchGeometry vit_b_16();
ArchGeometry toy_geometry(const ToyViTConfig& cfg);
ArchGeometry geometry_from_json(const std::string& text);
ArchGeometry geometry_from_json_file(const std::string& path);

struct MemoryRow {
  std::string name;
  std::string kind;
  StoragePolicy policy = StoragePolicy::NoSave;
  int64_t param_count = 0;
  int64_t trainable_count = 0;
  int64_t act_elements = 0;
  int64_t blob_count = 0;
  size_t act_bytes = 0;
};

struct MemoryReport {
  std::string arch;
  Method method = Method::S2A;
  int64_t batch = 0;
  bool quantized = false;
  std::vector<MemoryRow> rows;
  int64_t param_count = 0;
  int64_t trainable_count = 0;
  size_t weight_bytes = 0;
  size_t grad_bytes = 0;
  size_t optimizer_bytes = 0;  // two moment buffers per trainable scalar
  size_t activation_bytes = 0;
  size_t total_bytes = 0;

  double total_mib() const;
  double trainable_percent() const;
};

// Bytes a row's saved activations occupy: full32 tensors, packed 4-bit blobs
// (plus their scale/min pair), or packed 1-bit masks. elements must split
// evenly across blobs for packed policies.
size_t row_activation_bytes(StoragePolicy policy, int64_t elements, int64_t blobs);

MemoryReport estimate(const ArchGeometry& g, Method method, int64_t batch, bool quantized);

// Compares the estimate's nonzero rows against a recorded tape's live bytes
// per label, both directions. Returns human-readable mismatches; empty means
// the accountant and the tape agree byte for byte.
std::vector<std::string> verify_against_tape(const MemoryReport& r, const Tape& tape);

std::string render_table(const MemoryReport& r);
std::string report_to_json(const MemoryReport& r);

}  // namespace s2a
