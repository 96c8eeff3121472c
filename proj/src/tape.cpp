#include "s2a/tape.hpp"

#include <cmath>
#include <stdexcept>

namespace s2a {

const char* to_string(StoragePolicy p) {
  switch (p) {
    case StoragePolicy::Full32: return "full32";
    case StoragePolicy::Quant4: return "quant4";
    case StoragePolicy::Mask1: return "mask1";
    case StoragePolicy::NoSave: return "nosave";
  }
  return "?";
}

StoragePolicy storage_policy_from_string(const std::string& s) {
  if (s == "full32") return StoragePolicy::Full32;
  if (s == "quant4") return StoragePolicy::Quant4;
  if (s == "mask1") return StoragePolicy::Mask1;
  if (s == "nosave") return StoragePolicy::NoSave;
  throw std::invalid_argument("unknown storage policy '" + s + "'");
}

SavedSlot SavedSlot::full32(Tensor t) {
  SavedSlot s;
  s.policy = StoragePolicy::Full32;
  s.payload = std::move(t);
  return s;
}

SavedSlot SavedSlot::quant4(QuantBlob q) {
  if (q.bits != 4) throw std::invalid_argument("SavedSlot::quant4: blob is not 4-bit");
  SavedSlot s;
  s.policy = StoragePolicy::Quant4;
  s.payload = std::move(q);
  return s;
}

SavedSlot SavedSlot::mask1(QuantBlob q) {
  if (q.bits != 1) throw std::invalid_argument("SavedSlot::mask1: blob is not 1-bit");
  SavedSlot s;
  s.policy = StoragePolicy::Mask1;
  s.payload = std::move(q);
  return s;
}

size_t SavedSlot::live_bytes() const {
  switch (policy) {
    case StoragePolicy::Full32:
      return sizeof(float) * static_cast<size_t>(std::get<Tensor>(payload).size());
    case StoragePolicy::Quant4:
      return std::get<QuantBlob>(payload).live_bytes();
    case StoragePolicy::Mask1:
      return std::get<QuantBlob>(payload).packed.size();
    case StoragePolicy::NoSave:
      return 0;
  }
  return 0;
}

bool GradStore::has(NodeId id) const {
  return id >= 0 && static_cast<size_t>(id) < grads_.size() &&
         grads_[static_cast<size_t>(id)].has_value();
}

const Tensor& GradStore::get(NodeId id) const {
  if (!has(id)) {
    throw std::runtime_error("GradStore: no gradient for node " + std::to_string(id));
  }
  return *grads_[static_cast<size_t>(id)];
}

void GradStore::accumulate(NodeId id, Tensor g) {
  if (id < 0 || static_cast<size_t>(id) >= grads_.size()) {
    throw std::runtime_error("GradStore: node id " + std::to_string(id) + " out of range");
  }
  auto& slot = grads_[static_cast<size_t>(id)];
  if (!slot.has_value()) {
    slot = std::move(g);
    return;
  }
  if (!same_shape(*slot, g)) {
    throw std::runtime_error("GradStore: accumulation shape mismatch, " + slot->shape_str() +
                             " vs " + g.shape_str());
  }
  for (size_t i = 0; i < slot->data.size(); ++i) slot->data[i] += g.data[i];
}

bool BackwardCtx::needs(size_t parent_idx) const {
  return tape.node(node.parents.at(parent_idx)).requires_grad;
}

const Tensor& BackwardCtx::leaf_value(size_t parent_idx) const {
  const TapeNode& p = tape.node(node.parents.at(parent_idx));
  if (!p.is_leaf || !p.value) {
    throw std::runtime_error("tape: op '" + node.op + "' expected a leaf parent with a value");
  }
  return *p.value;
}

namespace {

Tensor slot_as_tensor(const SavedSlot& s, const std::string& op) {
  switch (s.policy) {
    case StoragePolicy::Full32:
      return std::get<Tensor>(s.payload);
    case StoragePolicy::Quant4:
    case StoragePolicy::Mask1:
      return dequantize(std::get<QuantBlob>(s.payload));
    case StoragePolicy::NoSave:
      break;
  }
  throw std::runtime_error("tape: corrupted tape, op '" + op +
                           "' needs a saved activation that was not retained");
}

}  // namespace

Tensor BackwardCtx::saved_tensor(size_t slot) const {
  if (slot >= node.saved.size()) {
    throw std::runtime_error("tape: corrupted tape, op '" + node.op + "' is missing saved slot " +
                             std::to_string(slot));
  }
  return slot_as_tensor(node.saved[slot], node.op);
}

Tensor BackwardCtx::parent_saved_tensor(size_t parent_idx, size_t slot) const {
  const TapeNode& p = tape.node(node.parents.at(parent_idx));
  if (slot >= p.saved.size()) {
    throw std::runtime_error("tape: corrupted tape, op '" + node.op +
                             "' needs saved slot " + std::to_string(slot) + " of parent op '" +
                             p.op + "'");
  }
  return slot_as_tensor(p.saved[slot], p.op);
}

void BackwardCtx::add(size_t parent_idx, Tensor grad_contrib) {
  const NodeId pid = node.parents.at(parent_idx);
  const TapeNode& p = tape.node(pid);
  if (!p.requires_grad) {
    throw std::logic_error("tape: op '" + node.op +
                           "' produced a gradient for a frozen/detached parent");
  }
  if (grad_contrib.shape != p.out_shape) {
    throw std::runtime_error("tape: op '" + node.op + "' gradient shape " +
                             grad_contrib.shape_str() + " does not match parent shape " +
                             shape_to_string(p.out_shape));
  }
  grads.accumulate(pid, std::move(grad_contrib));
}

NodeId Tape::input(Tensor value, std::string label) {
  TapeNode n;
  n.op = "input";
  n.out_shape = value.shape;
  n.label = std::move(label);
  n.is_leaf = true;
  n.trainable = false;
  n.requires_grad = false;
  n.value = std::make_shared<const Tensor>(std::move(value));
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Tape::param(std::shared_ptr<const Tensor> value, bool trainable, std::string label) {
  if (!value) throw std::invalid_argument("tape: param with null value");
  TapeNode n;
  n.op = "param";
  n.out_shape = value->shape;
  n.label = std::move(label);
  n.is_leaf = true;
  n.trainable = trainable && !inference_;
  n.requires_grad = n.trainable;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Tape::param_node(const void* key, const std::shared_ptr<const Tensor>& value,
                        bool trainable, const std::string& label) {
  auto it = param_ids_.find(key);
  if (it != param_ids_.end()) return it->second;
  const NodeId id = param(value, trainable, label);
  param_ids_[key] = id;
  return id;
}

std::optional<NodeId> Tape::find_param_node(const void* key) const {
  auto it = param_ids_.find(key);
  if (it == param_ids_.end()) return std::nullopt;
  return it->second;
}

NodeId Tape::record(const std::string& op, std::vector<NodeId> parents,
                    std::vector<SavedSlot> saved, std::vector<int64_t> out_shape,
                    std::string label, std::vector<int64_t> iattr, std::vector<float> fattr) {
  const auto& reg = op_registry();
  auto def_it = reg.find(op);
  if (def_it == reg.end()) {
    throw std::invalid_argument("tape: unknown op kind '" + op + "'");
  }
  const OpDef& def = def_it->second;
  bool needs_grad = false;
  for (NodeId p : parents) {
    if (p < 0 || static_cast<size_t>(p) >= nodes_.size()) {
      throw std::invalid_argument("tape: parent id " + std::to_string(p) +
                                  " out of range for op '" + op + "'");
    }
    needs_grad = needs_grad || nodes_[static_cast<size_t>(p)].requires_grad;
  }
  if (op == "stop_grad") needs_grad = false;
  if (needs_grad && def.backward == nullptr) {
    throw std::invalid_argument("tape: op '" + op +
                                "' has no backward; its inputs must be detached");
  }
  if (saved.size() > def.slots.size()) {
    throw std::invalid_argument("tape: op '" + op + "' declares " + std::to_string(saved.size()) +
                                " saved slots but registers only " +
                                std::to_string(def.slots.size()));
  }
  for (size_t i = 0; i < saved.size(); ++i) {
    const auto& allowed = def.slots[i];
    bool ok = false;
    for (StoragePolicy a : allowed) ok = ok || a == saved[i].policy;
    if (!ok) {
      throw std::invalid_argument("tape: op '" + op + "' slot " + std::to_string(i) +
                                  " may not use policy " + to_string(saved[i].policy));
    }
    const bool holds_tensor = std::holds_alternative<Tensor>(saved[i].payload);
    const bool holds_blob = std::holds_alternative<QuantBlob>(saved[i].payload);
    switch (saved[i].policy) {
      case StoragePolicy::Full32:
        if (!holds_tensor) throw std::invalid_argument("tape: full32 slot without tensor");
        break;
      case StoragePolicy::Quant4:
        if (!holds_blob || std::get<QuantBlob>(saved[i].payload).bits != 4)
          throw std::invalid_argument("tape: quant4 slot without 4-bit blob");
        break;
      case StoragePolicy::Mask1:
        if (!holds_blob || std::get<QuantBlob>(saved[i].payload).bits != 1)
          throw std::invalid_argument("tape: mask1 slot without 1-bit blob");
        break;
      case StoragePolicy::NoSave:
        if (holds_tensor || holds_blob)
          throw std::invalid_argument("tape: nosave slot carrying a payload");
        break;
    }
    if (inference_ && saved[i].policy != StoragePolicy::NoSave) {
      saved[i] = SavedSlot::none();
    }
  }
  TapeNode n;
  n.op = op;
  n.parents = std::move(parents);
  n.saved = std::move(saved);
  n.out_shape = std::move(out_shape);
  n.label = std::move(label);
  n.requires_grad = needs_grad;
  n.iattr = std::move(iattr);
  n.fattr = std::move(fattr);
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

const TapeNode& Tape::node(NodeId id) const {
  if (id < 0 || static_cast<size_t>(id) >= nodes_.size()) {
    throw std::invalid_argument("tape: node id " + std::to_string(id) + " out of range");
  }
  return nodes_[static_cast<size_t>(id)];
}

GradStore Tape::backward(NodeId loss) const {
  const TapeNode& ln = node(loss);
  if (shape_product(ln.out_shape) != 1) {
    throw std::invalid_argument("tape: backward needs a scalar loss node, got shape " +
                                shape_to_string(ln.out_shape));
  }
  GradStore store(nodes_.size());
  if (!ln.requires_grad) return store;  // nothing trainable upstream
  store.accumulate(loss, Tensor::full(ln.out_shape, 1.f));
  const auto& reg = op_registry();
  for (NodeId id = loss; id >= 0; --id) {
    if (!store.has(id)) continue;
    const TapeNode& n = nodes_[static_cast<size_t>(id)];
    if (n.is_leaf) continue;
    const OpDef& def = reg.at(n.op);
    if (def.backward == nullptr) {
      throw std::runtime_error("tape: op '" + n.op + "' received a gradient but has no backward");
    }
    BackwardCtx ctx{*this, n, store.get(id), store};
    def.backward(ctx);
  }
  return store;
}

size_t Tape::live_activation_bytes() const {
  size_t total = 0;
  for (const TapeNode& n : nodes_) {
    for (const SavedSlot& s : n.saved) total += s.live_bytes();
  }
  return total;
}

std::map<std::string, size_t> Tape::bytes_by_label() const {
  std::map<std::string, size_t> out;
  for (const TapeNode& n : nodes_) {
    size_t b = 0;
    for (const SavedSlot& s : n.saved) b += s.live_bytes();
    if (b > 0) out[n.label] += b;
  }
  return out;
}

FiniteDiffResult finite_diff_check(const std::function<double()>& loss_fn,
                                   const std::vector<std::pair<float*, double>>& targets,
                                   double h, double eps) {
  // Two passes: sweep first, then normalize. The error of each scalar is
  // taken relative to max(|analytic|, |fd|) floored by the largest gradient
  // magnitude in the whole sweep. A single-precision forward quantizes the
  // loss to ~1e-7 absolute, so near-zero components carry pure rounding
  // noise; dividing those by their own magnitude would only measure that
  // noise, not the backward functions.
  std::vector<std::pair<double, double>> pairs;
  pairs.reserve(targets.size());
  double scale = eps;
  for (const auto& [ptr, analytic] : targets) {
    const float saved = *ptr;
    *ptr = static_cast<float>(saved + h);
    const double lp = loss_fn();
    *ptr = static_cast<float>(saved - h);
    const double lm = loss_fn();
    *ptr = saved;
    if (!std::isfinite(lp) || !std::isfinite(lm)) {
      throw std::runtime_error("finite_diff_check: non-finite loss during sweep");
    }
    const double fd = (lp - lm) / (2.0 * h);
    pairs.emplace_back(analytic, fd);
    scale = std::max({scale, std::fabs(analytic), std::fabs(fd)});
  }
  FiniteDiffResult r;
  for (const auto& [analytic, fd] : pairs) {
    const double rel =
        std::fabs(analytic - fd) / std::max({std::fabs(analytic), std::fabs(fd), scale});
    r.max_rel_err = std::max(r.max_rel_err, rel);
    r.scalars_checked++;
  }
  return r;
}

}  // namespace s2a
