#include "s2a/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <stdexcept>

#include "s2a/modules.hpp"
#include "s2a/ops.hpp"
#include "s2a/tape.hpp"
#include "s2a/tensor.hpp"

namespace s2a {
namespace {

struct Handle {
  std::shared_ptr<Tensor> t;
  bool trainable;
  std::string name;
};

Handle make_handle(RandomSource& rng, std::vector<int64_t> shape, double lo, double hi,
                   bool trainable, std::string name) {
  return {std::make_shared<Tensor>(random_uniform(rng, std::move(shape), lo, hi)), trainable,
          std::move(name)};
}

NodeId use(Tape& tape, const Handle& h) {
  return tape.param_node(h.t.get(), h.t, h.trainable, h.name);
}

// Rebuilds the graph, returns the loss, and optionally captures analytic
// gradients keyed by parameter storage.
using BuildFn = std::function<double(std::map<const void*, Tensor>*)>;

void collect(const Tape& tape, const GradStore& gs, const std::vector<Handle>& params,
             std::map<const void*, Tensor>* out) {
  for (const Handle& h : params) {
    auto id = tape.find_param_node(h.t.get());
    if (id && gs.has(*id)) (*out)[h.t.get()] = gs.get(*id);
  }
}

GradCheckCase run_case(const std::string& name, const std::vector<Handle>& params,
                       const BuildFn& build, int64_t max_scalars = 400) {
  std::map<const void*, Tensor> grads;
  build(&grads);
  std::vector<std::pair<float*, double>> targets;
  for (const Handle& h : params) {
    if (!h.trainable) continue;
    auto it = grads.find(h.t.get());
    const int64_t n = h.t->size();
    const int64_t take = std::min(n, max_scalars);
    for (int64_t i = 0; i < take; ++i) {
      const int64_t idx = i * n / take;
      const double analytic =
          it == grads.end() ? 0.0 : it->second.data[static_cast<size_t>(idx)];
      targets.emplace_back(&h.t->data[static_cast<size_t>(idx)], analytic);
    }
  }
  auto loss_fn = [&build]() { return build(nullptr); };
  const FiniteDiffResult r = finite_diff_check(loss_fn, targets);
  return {name, r.max_rel_err, r.scalars_checked};
}

// Shared scalar loss head: a fixed random projection, accumulated in double
// so central differences are not drowned by reduction noise.
double finish(Tape& tape, const ops::Value& v, const Tensor& proj,
              std::map<const void*, Tensor>* grads, const std::vector<Handle>& params) {
  const double loss = dot_all(v.t, proj);
  if (grads) {
    ops::Value l = ops::wsum(tape, v, proj, "loss");
    GradStore gs = tape.backward(l.id);
    collect(tape, gs, params, grads);
  }
  return loss;
}

GradCheckCase case_bias_linear(uint64_t seed) {
  RandomSource rng(seed ^ 0xb1a5ull);
  const Tensor x = random_uniform(rng, {3, 5}, -1.0, 1.0);
  std::vector<Handle> ps = {
      make_handle(rng, {5, 6}, -0.8, 0.8, false, "w1"),
      make_handle(rng, {6}, -0.5, 0.5, true, "b1"),
      make_handle(rng, {6, 4}, -0.8, 0.8, false, "w2"),
      make_handle(rng, {4}, -0.5, 0.5, true, "b2"),
  };
  const Tensor proj = random_uniform(rng, {3, 4}, -1.0, 1.0);
  auto build = [&](std::map<const void*, Tensor>* grads) {
    Tape tape;
    ops::Value v = ops::input(tape, x, "x");
    v = ops::linear(tape, v, use(tape, ps[0]), use(tape, ps[1]), "fc1");
    v = ops::gelu(tape, v, StoragePolicy::Full32, "act");
    v = ops::linear(tape, v, use(tape, ps[2]), use(tape, ps[3]), "fc2");
    return finish(tape, v, proj, grads, ps);
  };
  return run_case("bias-linear", ps, build);
}

GradCheckCase case_lrp(uint64_t seed) {
  RandomSource rng(seed ^ 0x14b9ull);
  const Tensor x = random_uniform(rng, {2, 4, 6}, -1.0, 1.0);
  std::vector<Handle> ps = {
      make_handle(rng, {4, 2}, -0.7, 0.7, true, "a"),
      make_handle(rng, {2, 6}, -0.7, 0.7, true, "b"),
  };
  const Tensor proj = random_uniform(rng, {2, 4, 6}, -1.0, 1.0);
  auto build = [&](std::map<const void*, Tensor>* grads) {
    Tape tape;
    ops::Value v = ops::input(tape, x, "x");
    ops::Value m = ops::matmul(tape, ops::leaf(tape, use(tape, ps[0])),
                               ops::leaf(tape, use(tape, ps[1])), "lrp");
    v = ops::add_rows_bcast(tape, v, m, "lrp");
    v = ops::gelu(tape, v, StoragePolicy::Full32, "act");
    return finish(tape, v, proj, grads, ps);
  };
  return run_case("lrp", ps, build);
}

GradCheckCase case_cap(uint64_t seed) {
  RandomSource rng(seed ^ 0xca9ull);
  const Tensor x = random_uniform(rng, {3, 12}, -1.0, 1.0);
  std::vector<Handle> ps = {
      make_handle(rng, {12, 12}, -0.6, 0.6, true, "w"),
      make_handle(rng, {12}, -0.5, 0.5, true, "b"),
  };
  const Tensor proj = random_uniform(rng, {3, 4}, -1.0, 1.0);
  auto build = [&](std::map<const void*, Tensor>* grads) {
    Tape tape;
    ops::Value v = ops::input(tape, x, "x");
    v = ops::linear(tape, v, use(tape, ps[0]), use(tape, ps[1]), "fc");
    v = ops::cap(tape, v, 3, "pool");
    return finish(tape, v, proj, grads, ps);
  };
  return run_case("cap", ps, build);
}

GradCheckCase case_lsb(uint64_t seed) {
  RandomSource rng(seed ^ 0x15bull);
  const Tensor x = random_uniform(rng, {2, 3, 3, 4}, -1.0, 1.0);
  const Tensor yprev = random_uniform(rng, {2, 3, 3, 4}, -1.0, 1.0);
  std::vector<Handle> ps = {
      make_handle(rng, {4, 4}, -0.6, 0.6, true, "pw1.w"),
      make_handle(rng, {4}, -0.3, 0.3, true, "pw1.b"),
      make_handle(rng, {3, 3, 4}, -0.5, 0.5, true, "dw.k"),
      make_handle(rng, {4}, -0.3, 0.3, true, "dw.b"),
      make_handle(rng, {4, 4}, -0.6, 0.6, true, "pw2.w"),
      make_handle(rng, {4}, -0.3, 0.3, true, "pw2.b"),
  };
  const Tensor proj = random_uniform(rng, {2, 3, 3, 4}, -1.0, 1.0);
  auto build = [&](std::map<const void*, Tensor>* grads) {
    Tape tape;
    ops::Value v = ops::input(tape, x, "x");
    v = ops::add(tape, v, ops::input(tape, yprev, "y_prev"), "sum");
    v = ops::linear(tape, v, use(tape, ps[0]), use(tape, ps[1]), "pw1");
    v = ops::dwconv3x3(tape, v, use(tape, ps[2]), use(tape, ps[3]), "dw");
    v = ops::linear(tape, v, use(tape, ps[4]), use(tape, ps[5]), "pw2");
    return finish(tape, v, proj, grads, ps);
  };
  return run_case("lsb", ps, build);
}

GradCheckCase case_affine(uint64_t seed) {
  RandomSource rng(seed ^ 0xaffull);
  const Tensor x = random_uniform(rng, {3, 5, 8}, -1.0, 1.0);
  std::vector<Handle> ps = {
      make_handle(rng, {8}, 0.5, 1.5, true, "g"),
      make_handle(rng, {8}, -0.5, 0.5, true, "b"),
  };
  const Tensor proj = random_uniform(rng, {3, 5, 8}, -1.0, 1.0);
  auto build = [&](std::map<const void*, Tensor>* grads) {
    Tape tape;
    ops::Value v = ops::input(tape, x, "x");
    v = ops::affine(tape, v, use(tape, ps[0]), use(tape, ps[1]), "norm");
    return finish(tape, v, proj, grads, ps);
  };
  return run_case("affine", ps, build);
}

GradCheckCase case_softmax(uint64_t seed) {
  RandomSource rng(seed ^ 0x50f7ull);
  const Tensor x = random_uniform(rng, {3, 7}, -1.0, 1.0);
  std::vector<Handle> ps = {
      make_handle(rng, {7, 6}, -0.8, 0.8, true, "w"),
      make_handle(rng, {6}, -0.5, 0.5, true, "b"),
  };
  const Tensor proj = random_uniform(rng, {3, 6}, -1.0, 1.0);
  auto build = [&](std::map<const void*, Tensor>* grads) {
    Tape tape;
    ops::Value v = ops::input(tape, x, "x");
    v = ops::linear(tape, v, use(tape, ps[0]), use(tape, ps[1]), "fc");
    v = ops::softmax_rows(tape, v, StoragePolicy::Full32, "sm");
    return finish(tape, v, proj, grads, ps);
  };
  return run_case("softmax", ps, build);
}

GradCheckCase case_gelu(uint64_t seed) {
  RandomSource rng(seed ^ 0x6e1ull);
  const Tensor x = random_uniform(rng, {3, 5}, -1.5, 1.5);
  std::vector<Handle> ps = {
      make_handle(rng, {5, 8}, -0.8, 0.8, true, "w"),
      make_handle(rng, {8}, -0.5, 0.5, true, "b"),
  };
  const Tensor proj = random_uniform(rng, {3, 8}, -1.0, 1.0);
  auto build = [&](std::map<const void*, Tensor>* grads) {
    Tape tape;
    ops::Value v = ops::input(tape, x, "x");
    v = ops::linear(tape, v, use(tape, ps[0]), use(tape, ps[1]), "fc");
    v = ops::gelu(tape, v, StoragePolicy::Full32, "act");
    return finish(tape, v, proj, grads, ps);
  };
  return run_case("gelu", ps, build);
}

// Keeps every pre-ReLU magnitude away from the kink so h = 1e-3 central
// differences cannot cross it.
void nudge_away_from_kink(const Tensor& pre, const std::shared_ptr<Tensor>& bias,
                          const std::function<Tensor()>& recompute) {
  for (int tries = 0; tries < 50; ++tries) {
    float closest = 1.f;
    const Tensor cur = tries == 0 ? pre : recompute();
    for (float v : cur.data) closest = std::min(closest, std::fabs(v));
    if (closest > 0.05f) return;
    for (float& b : bias->data) b += 0.037f;
  }
  throw std::runtime_error("gradcheck: could not move pre-relu values off the kink");
}

GradCheckCase case_relu(uint64_t seed) {
  RandomSource rng(seed ^ 0x4e1ull);
  const Tensor x = random_uniform(rng, {3, 8}, -1.0, 1.0);
  std::vector<Handle> ps = {
      make_handle(rng, {8, 6}, -0.8, 0.8, true, "w"),
      make_handle(rng, {6}, -0.4, 0.4, true, "b"),
  };
  const Tensor proj = random_uniform(rng, {3, 6}, -1.0, 1.0);
  auto pre = [&]() {
    Tape tape;
    ops::Value v = ops::input(tape, x, "x");
    v = ops::linear(tape, v, use(tape, ps[0]), use(tape, ps[1]), "fc");
    return v.t;
  };
  nudge_away_from_kink(pre(), ps[1].t, pre);
  auto build = [&](std::map<const void*, Tensor>* grads) {
    Tape tape;
    ops::Value v = ops::input(tape, x, "x");
    v = ops::linear(tape, v, use(tape, ps[0]), use(tape, ps[1]), "fc");
    v = ops::relu(tape, v, StoragePolicy::Mask1, "gate");
    return finish(tape, v, proj, grads, ps);
  };
  return run_case("relu", ps, build);
}

// Value-path attention: q and k come from frozen projections, so the checked
// parameters' true derivatives have no score-path component and the detached
// scores cost nothing in accuracy.
GradCheckCase case_attention(uint64_t seed) {
  RandomSource rng(seed ^ 0xa77ull);
  const Tensor x = random_uniform(rng, {2, 5, 8}, -1.0, 1.0);
  std::vector<Handle> ps = {
      make_handle(rng, {8, 8}, -0.6, 0.6, false, "wq"),
      make_handle(rng, {8}, -0.3, 0.3, false, "bq"),
      make_handle(rng, {8, 8}, -0.6, 0.6, false, "wk"),
      make_handle(rng, {8}, -0.3, 0.3, false, "bk"),
      make_handle(rng, {8, 8}, -0.6, 0.6, true, "wv"),
      make_handle(rng, {8}, -0.3, 0.3, true, "bv"),
      make_handle(rng, {8, 8}, -0.6, 0.6, false, "wo"),
      make_handle(rng, {8}, -0.3, 0.3, true, "bo"),
  };
  const Tensor proj = random_uniform(rng, {2, 5, 8}, -1.0, 1.0);
  auto build = [&](std::map<const void*, Tensor>* grads) {
    Tape tape;
    ops::Value v = ops::input(tape, x, "x");
    ops::Value q = ops::linear(tape, v, use(tape, ps[0]), use(tape, ps[1]), "q");
    ops::Value k = ops::linear(tape, v, use(tape, ps[2]), use(tape, ps[3]), "k");
    ops::Value val = ops::linear(tape, v, use(tape, ps[4]), use(tape, ps[5]), "v");
    q = ops::stop_grad(tape, q, "q");
    k = ops::stop_grad(tape, k, "k");
    ops::Value qh = ops::heads_split(tape, q, 2, "attn");
    ops::Value kh = ops::heads_split(tape, k, 2, "attn");
    ops::Value vh = ops::heads_split(tape, val, 2, "attn");
    ops::Value sc = ops::qk_scores(tape, qh, kh, 0.5f, "attn");
    ops::Value pr = ops::softmax_rows(tape, sc, StoragePolicy::Full32, "attn.sm");
    ops::Value cx = ops::attn_apply(tape, pr, vh, "attn");
    ops::Value mg = ops::heads_merge(tape, cx, 2, 2, "attn");
    ops::Value out = ops::linear(tape, mg, use(tape, ps[6]), use(tape, ps[7]), "proj");
    return finish(tape, out, proj, grads, ps);
  };
  return run_case("attention", ps, build);
}

GradCheckCase case_ce(uint64_t seed) {
  RandomSource rng(seed ^ 0xceull);
  const Tensor x = random_uniform(rng, {4, 6}, -1.0, 1.0);
  const std::vector<int> labels = {0, 2, 1, 3};
  std::vector<Handle> ps = {
      make_handle(rng, {6, 4}, -0.8, 0.8, true, "w"),
      make_handle(rng, {4}, -0.5, 0.5, true, "b"),
  };
  auto build = [&](std::map<const void*, Tensor>* grads) {
    Tape tape;
    ops::Value v = ops::input(tape, x, "x");
    ops::Value loss = ops::ce_head(tape, v, use(tape, ps[0]), use(tape, ps[1]), labels, "head");
    if (grads) {
      GradStore gs = tape.backward(loss.id);
      collect(tape, gs, ps, grads);
    }
    return static_cast<double>(loss.t.data[0]);
  };
  return run_case("ce", ps, build);
}

// Slimmed geometry keeps the model-level sweeps inside the gradcheck time
// budget without losing any op from the composition.
ToyViTConfig small_model_config(uint64_t seed) {
  ToyViTConfig cfg;
  cfg.dim = 32;
  cfg.heads = 2;
  cfg.mlp_hidden = 64;
  cfg.lrp_rank = 2;
  cfg.init_seed = seed;
  return cfg;
}

GradCheckCase case_model_head(uint64_t seed) {
  ToyViTConfig cfg = small_model_config(seed);
  cfg.method = Method::LinearProbe;
  ToyViT model(cfg);
  RandomSource rng(seed ^ 0x30de1ull);
  const Tensor images = random_uniform(rng, {2, cfg.image_hw, cfg.image_hw, cfg.channels_in},
                                       0.0, 1.0);
  const std::vector<int> labels = {1, 3};
  auto hw = model.params().get("head.w");
  auto hb = model.params().get("head.b");
  {
    RandomSource wr(seed ^ 0x77ull);
    *hw->value = random_uniform(wr, hw->value->shape, -0.8, 0.8);
  }
  std::vector<Handle> ps = {{hw->value, true, hw->name}, {hb->value, true, hb->name}};
  auto build = [&](std::map<const void*, Tensor>* grads) {
    Tape tape;
    ops::Value loss = model.forward_loss(tape, images, labels);
    if (grads) {
      GradStore gs = tape.backward(loss.id);
      for (const Handle& h : ps) {
        auto pid = tape.find_param_node(h.t.get());
        if (pid && gs.has(*pid)) (*grads)[h.t.get()] = gs.get(*pid);
      }
    }
    return static_cast<double>(loss.t.data[0]);
  };
  return run_case("model-head", ps, build, 32);
}

// Side-branch parameters reach the head without crossing the detached score
// path, so their model-level gradients are FD-exact. Exercises the backward
// of concat_cols, mean_tokens, reshape and the conv chain in composition.
GradCheckCase case_model_side(uint64_t seed) {
  ToyViTConfig cfg = small_model_config(seed);
  cfg.method = Method::S2A;
  cfg.quant_saves = false;
  ToyViT model(cfg);
  RandomSource rng(seed ^ 0x51deull);
  const Tensor images = random_uniform(rng, {2, cfg.image_hw, cfg.image_hw, cfg.channels_in},
                                       0.0, 1.0);
  const std::vector<int> labels = {0, 2};
  auto hw = model.params().get("head.w");
  {
    RandomSource wr(seed ^ 0x78ull);
    *hw->value = random_uniform(wr, hw->value->shape, -0.8, 0.8);
  }
  std::vector<Handle> ps;
  ps.push_back({hw->value, true, hw->name});
  for (const char* name : {"block0.side.lsb.w1", "block0.side.lsb.k", "block0.side.lsb.b2",
                           "block1.side.lsb.w2", "block1.side.lsb.kb", "block1.mlp.fc2.b"}) {
    auto p = model.params().get(name);
    ps.push_back({p->value, true, p->name});
  }
  auto build = [&](std::map<const void*, Tensor>* grads) {
    Tape tape;
    ops::Value loss = model.forward_loss(tape, images, labels);
    if (grads) {
      GradStore gs = tape.backward(loss.id);
      for (const Handle& h : ps) {
        auto pid = tape.find_param_node(h.t.get());
        if (pid && gs.has(*pid)) (*grads)[h.t.get()] = gs.get(*pid);
      }
    }
    return static_cast<double>(loss.t.data[0]);
  };
  return run_case("model-side", ps, build, 24);
}

}  // namespace

double GradCheckReport::worst() const {
  double w = 0.0;
  for (const GradCheckCase& c : cases) w = std::max(w, c.max_rel_err);
  return w;
}

bool GradCheckReport::pass(double tol) const { return worst() <= tol; }

const std::vector<std::string>& gradcheck_targets() {
  static const std::vector<std::string> t = {"bias-linear", "lrp",  "cap",  "lsb",
                                             "softmax",     "gelu", "relu", "all"};
  return t;
}

GradCheckReport run_gradcheck(const std::string& target, uint64_t seed) {
  const auto& known = gradcheck_targets();
  if (std::find(known.begin(), known.end(), target) == known.end()) {
    throw std::invalid_argument("gradcheck: unknown target '" + target + "'");
  }
  GradCheckReport rep;
  const bool all = target == "all";
  if (all || target == "bias-linear") rep.cases.push_back(case_bias_linear(seed));
  if (all || target == "lrp") rep.cases.push_back(case_lrp(seed));
  if (all || target == "cap") rep.cases.push_back(case_cap(seed));
  if (all || target == "lsb") rep.cases.push_back(case_lsb(seed));
  if (all || target == "softmax") rep.cases.push_back(case_softmax(seed));
  if (all || target == "gelu") rep.cases.push_back(case_gelu(seed));
  if (all || target == "relu") rep.cases.push_back(case_relu(seed));
  if (all) {
    rep.cases.push_back(case_affine(seed));
    rep.cases.push_back(case_attention(seed));
    rep.cases.push_back(case_ce(seed));
    rep.cases.push_back(case_model_head(seed));
    rep.cases.push_back(case_model_side(seed));
  }
  return rep;
}

}  // namespace s2a
