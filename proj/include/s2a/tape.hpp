#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "s2a/quant.hpp"

namespace s2a {

enum class StoragePolicy { Full32, Quant4, Mask1, NoSave };
const char* to_string(StoragePolicy p);
StoragePolicy storage_policy_from_string(const std::string& s);

// One retained activation. The payload variant must agree with the policy:
// Full32 holds a Tensor, Quant4 a 4-bit QuantBlob, Mask1 a 1-bit QuantBlob,
// NoSave nothing.
struct SavedSlot {
  StoragePolicy policy = StoragePolicy::NoSave;
  std::variant<std::monostate, Tensor, QuantBlob> payload;

  static SavedSlot none() { return {}; }
  static SavedSlot full32(Tensor t);
  static SavedSlot quant4(QuantBlob q);
  static SavedSlot mask1(QuantBlob q);
  size_t live_bytes() const;
};

using NodeId = int32_t;

struct TapeNode {
  std::string op;
  std::vector<NodeId> parents;
  std::vector<SavedSlot> saved;
  std::vector<int64_t> out_shape;
  std::string label;  // model-layer tag, used by the byte audit
  bool requires_grad = false;
  bool is_leaf = false;
  bool trainable = false;                 // leaves only
  std::shared_ptr<const Tensor> value;    // leaves only; never an activation copy
  std::vector<int64_t> iattr;             // op-specific integer attributes
  std::vector<float> fattr;               // op-specific float attributes
};

class GradStore {
 public:
  explicit GradStore(size_t n) : grads_(n) {}
  bool has(NodeId id) const;
  const Tensor& get(NodeId id) const;
  void accumulate(NodeId id, Tensor g);
  size_t size() const { return grads_.size(); }

 private:
  std::vector<std::optional<Tensor>> grads_;
};

class Tape;

// Context handed to registered backward functions. Backward code may read
// leaf values, this node's saved slots, and (for ops that share a parent's
// retained output) a parent's saved slots. It must check needs() before
// producing a parent gradient so frozen-parameter gradients are never formed.
struct BackwardCtx {
  const Tape& tape;
  const TapeNode& node;
  const Tensor& g;
  GradStore& grads;

  bool needs(size_t parent_idx) const;
  const Tensor& leaf_value(size_t parent_idx) const;
  Tensor saved_tensor(size_t slot) const;         // dequantizes if needed
  Tensor parent_saved_tensor(size_t parent_idx, size_t slot) const;
  void add(size_t parent_idx, Tensor grad_contrib);
};

using BackwardFn = void (*)(BackwardCtx&);

struct OpDef {
  // Allowed policies per saved slot; a node may also save fewer slots than
  // listed (trailing slots optional), but never a policy outside its slot set.
  std::vector<std::vector<StoragePolicy>> slots;
  BackwardFn backward = nullptr;  // null: op never participates in backward
};

const std::map<std::string, OpDef>& op_registry();

class Tape {
 public:
  NodeId input(Tensor value, std::string label = {});
  // Parameter leaf. Values are shared with the owning module, not copied.
  NodeId param(std::shared_ptr<const Tensor> value, bool trainable, std::string label = {});
  NodeId record(const std::string& op, std::vector<NodeId> parents,
                std::vector<SavedSlot> saved, std::vector<int64_t> out_shape,
                std::string label = {}, std::vector<int64_t> iattr = {},
                std::vector<float> fattr = {});

  GradStore backward(NodeId loss) const;

  const TapeNode& node(NodeId id) const;
  size_t size() const { return nodes_.size(); }
  size_t live_activation_bytes() const;
  std::map<std::string, size_t> bytes_by_label() const;

  // Inference mode drops every save request; nothing on such a tape can be
  // differentiated.
  void set_inference_mode(bool on) { inference_ = on; }
  bool inference_mode() const { return inference_; }

  // Memoized parameter nodes so one parameter used twice accumulates into a
  // single gradient entry.
  NodeId param_node(const void* key, const std::shared_ptr<const Tensor>& value, bool trainable,
                    const std::string& label);
  std::optional<NodeId> find_param_node(const void* key) const;

 private:
  std::vector<TapeNode> nodes_;
  std::map<const void*, NodeId> param_ids_;
  bool inference_ = false;
};

// Max over selected scalars of |analytic - central difference| /
// (|central difference| + eps). loss_fn re-evaluates the model after each
// nudge of a parameter scalar.
struct FiniteDiffResult {
  double max_rel_err = 0.0;
  int64_t scalars_checked = 0;
};

FiniteDiffResult finite_diff_check(const std::function<double()>& loss_fn,
                                   const std::vector<std::pair<float*, double>>& targets,
                                   double h = 1e-3, double eps = 1e-8);

}  // namespace s2a
