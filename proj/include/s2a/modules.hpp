#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "s2a/ops.hpp"
#include "s2a/tape.hpp"
#include "s2a/tensor.hpp"

namespace s2a {

enum class Method { Full, LinearProbe, BiasOnly, LoRA, Adapter, VPT, S2A };

std::string to_string(Method m);
Method method_from_string(const std::string& s);
const std::vector<Method>& all_methods();

struct Param {
  std::string name;
  std::shared_ptr<Tensor> value;
  bool trainable = false;
  bool no_decay = false;
};

// Ordered parameter registry. Insertion order is the serialization and
// optimizer order, so runs are reproducible.
class ParamStore {
 public:
  std::shared_ptr<Param> add(const std::string& name, Tensor init, bool trainable, bool no_decay);
  std::shared_ptr<Param> get(const std::string& name) const;
  const std::vector<std::shared_ptr<Param>>& all() const { return params_; }

  int64_t total_scalars() const;
  int64_t trainable_scalars() const;
  uint64_t frozen_hash() const;
  uint64_t trainable_hash() const;

  void save(const std::string& path) const;
  // Assigns stored tensors into existing params by name; shapes must match.
  void load(const std::string& path);

 private:
  std::vector<std::shared_ptr<Param>> params_;
  std::map<std::string, size_t> index_;
};

uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 1469598103934665603ull);

struct ToyViTConfig {
  int64_t image_hw = 8;
  int64_t channels_in = 3;
  int64_t patch = 2;
  int64_t dim = 96;
  int64_t heads = 4;
  int64_t depth = 2;
  int64_t mlp_hidden = 384;
  int64_t classes = 4;
  int64_t lrp_rank = 4;        // low-rank prompt factor rank
  int64_t cap_factor = 8;      // channel average pooling ratio
  int64_t prompt_tokens = 4;   // vpt
  int64_t lora_rank = 8;
  int64_t adapter_bottleneck = 12;
  Method method = Method::S2A;
  bool quant_saves = true;     // 4-bit softmax/gelu saves (s2a only)
  uint64_t init_seed = 1337;

  int64_t grid() const { return image_hw / patch; }
  int64_t patch_tokens() const { return grid() * grid(); }
  int64_t tokens() const { return patch_tokens() + 1; }  // + class token
  int64_t patch_dim() const { return patch * patch * channels_in; }
  int64_t side_dim() const { return dim / cap_factor; }
};

// [B, H, W, C] -> [B, patches, patch*patch*C], row-major over patch cells.
Tensor patchify(const Tensor& images, int64_t patch);

// Small vision transformer with swappable tuning methods. The backbone is
// seeded per parameter name, so every method starts from identical frozen
// weights; method-specific modules (head, LoRA, adapters, prompts, LRP, side
// branch) are added on top.
class ToyViT {
 public:
  explicit ToyViT(ToyViTConfig cfg);

  // Records the full forward on the tape and returns the scalar loss node.
  ops::Value forward_loss(Tape& tape, const Tensor& images, const std::vector<int>& labels);
  // Head input features, [B, dim] (or [B, dim + side_dim] under s2a).
  ops::Value forward_features(Tape& tape, const Tensor& images);
  // Inference logits; records nothing trainable and saves nothing.
  Tensor predict_logits(const Tensor& images);

  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  const ToyViTConfig& config() const { return cfg_; }

 private:
  struct Block {
    std::shared_ptr<Param> g1, b1, wqkv, bqkv, wp, bp, g2, b2, w1, bm1, w2, bm2;
    std::shared_ptr<Param> lora_a, lora_b;
    std::shared_ptr<Param> ad1_wd, ad1_bd, ad1_wu, ad1_bu;
    std::shared_ptr<Param> ad2_wd, ad2_bd, ad2_wu, ad2_bu;
    std::shared_ptr<Param> prompt;
    std::shared_ptr<Param> lrp_a, lrp_b;
    std::shared_ptr<Param> lsb_w1, lsb_c1, lsb_k, lsb_kb, lsb_w2, lsb_c2;
  };

  std::shared_ptr<Param> add_param(const std::string& name, std::vector<int64_t> shape,
                                   const std::string& init, bool trainable, bool no_decay);
  NodeId pnode(Tape& tape, const std::shared_ptr<Param>& p);
  ops::Value adapter(Tape& tape, const ops::Value& x, const std::shared_ptr<Param>& wd,
                     const std::shared_ptr<Param>& bd, const std::shared_ptr<Param>& wu,
                     const std::shared_ptr<Param>& bu, const std::string& label);

  ToyViTConfig cfg_;
  ParamStore store_;
  std::shared_ptr<Param> pe_w_, pe_b_, cls_, pos_, fin_g_, fin_b_, head_w_, head_b_;
  std::vector<Block> blocks_;
};

}  // namespace s2a
