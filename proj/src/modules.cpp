#include "s2a/modules.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace s2a {

std::string to_string(Method m) {
  switch (m) {
    case Method::Full: return "full";
    case Method::LinearProbe: return "linear";
    case Method::BiasOnly: return "bias";
    case Method::LoRA: return "lora";
    case Method::Adapter: return "adapter";
    case Method::VPT: return "vpt";
    case Method::S2A: return "s2a";
  }
  return "?";
}

Method method_from_string(const std::string& s) {
  for (Method m : all_methods())
    if (to_string(m) == s) return m;
  throw std::invalid_argument("unknown method '" + s +
                              "' (expected full|linear|bias|lora|adapter|vpt|s2a)");
}

const std::vector<Method>& all_methods() {
  static const std::vector<Method> ms = {Method::Full,    Method::LinearProbe, Method::BiasOnly,
                                         Method::LoRA,    Method::Adapter,     Method::VPT,
                                         Method::S2A};
  return ms;
}

uint64_t fnv1a64(const void* data, size_t n, uint64_t h) {
  const auto* p = static_cast<const uint8_t*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

std::shared_ptr<Param> ParamStore::add(const std::string& name, Tensor init, bool trainable,
                                       bool no_decay) {
  if (index_.count(name)) {
    throw std::invalid_argument("param '" + name + "' registered twice");
  }
  auto p = std::make_shared<Param>();
  p->name = name;
  p->value = std::make_shared<Tensor>(std::move(init));
  p->trainable = trainable;
  p->no_decay = no_decay;
  index_[name] = params_.size();
  params_.push_back(p);
  return p;
}

std::shared_ptr<Param> ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::invalid_argument("no param named '" + name + "'");
  return params_[it->second];
}

int64_t ParamStore::total_scalars() const {
  int64_t n = 0;
  for (const auto& p : params_) n += p->value->size();
  return n;
}

int64_t ParamStore::trainable_scalars() const {
  int64_t n = 0;
  for (const auto& p : params_)
    if (p->trainable) n += p->value->size();
  return n;
}

namespace {

uint64_t hash_params(const std::vector<std::shared_ptr<Param>>& params, bool trainable) {
  uint64_t h = 1469598103934665603ull;
  for (const auto& p : params) {
    if (p->trainable != trainable) continue;
    h = fnv1a64(p->name.data(), p->name.size(), h);
    h = fnv1a64(p->value->data.data(), p->value->data.size() * sizeof(float), h);
  }
  return h;
}

template <typename T>
void put(std::ofstream& f, T v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::ifstream& f) {
  T v{};
  f.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!f) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

}  // namespace

uint64_t ParamStore::frozen_hash() const { return hash_params(params_, false); }
uint64_t ParamStore::trainable_hash() const { return hash_params(params_, true); }

void ParamStore::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
  f.write("S2AP", 4);
  put<uint32_t>(f, static_cast<uint32_t>(params_.size()));
  for (const auto& p : params_) {
    put<uint32_t>(f, static_cast<uint32_t>(p->name.size()));
    f.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    put<uint8_t>(f, p->trainable ? 1 : 0);
    put<uint32_t>(f, static_cast<uint32_t>(p->value->rank()));
    for (int64_t d : p->value->shape) put<uint32_t>(f, static_cast<uint32_t>(d));
    f.write(reinterpret_cast<const char*>(p->value->data.data()),
            static_cast<std::streamsize>(p->value->data.size() * sizeof(float)));
  }
  if (!f) throw std::runtime_error("checkpoint: write to '" + path + "' failed");
}

void ParamStore::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "S2AP", 4) != 0) {
    throw std::runtime_error("checkpoint: '" + path + "' is not a parameter archive");
  }
  const uint32_t count = take<uint32_t>(f);
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t name_len = take<uint32_t>(f);
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    take<uint8_t>(f);  // stored trainable flag is informational
    const uint32_t rank = take<uint32_t>(f);
    std::vector<int64_t> shape(rank);
    for (uint32_t d = 0; d < rank; ++d) shape[d] = take<uint32_t>(f);
    Tensor t = Tensor::zeros(shape);
    f.read(reinterpret_cast<char*>(t.data.data()),
           static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    if (!f) throw std::runtime_error("checkpoint: truncated data for param '" + name + "'");
    auto it = index_.find(name);
    if (it == index_.end()) {
      throw std::runtime_error("checkpoint: param '" + name + "' does not exist in this model");
    }
    Param& p = *params_[it->second];
    if (p.value->shape != shape) {
      throw std::runtime_error("checkpoint: param '" + name + "' has shape " +
                               shape_to_string(shape) + ", model wants " + p.value->shape_str());
    }
    *p.value = std::move(t);
  }
}

Tensor patchify(const Tensor& images, int64_t patch) {
  if (images.rank() != 4) {
    throw std::invalid_argument("patchify: images must be [B,H,W,C], got " + images.shape_str());
  }
  const int64_t b = images.dim(0), h = images.dim(1), w = images.dim(2), c = images.dim(3);
  if (patch <= 0 || h % patch != 0 || w % patch != 0) {
    throw std::invalid_argument("patchify: patch " + std::to_string(patch) + " does not tile " +
                                images.shape_str());
  }
  const int64_t gh = h / patch, gw = w / patch;
  const int64_t pd = patch * patch * c;
  Tensor out = Tensor::zeros({b, gh * gw, pd});
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t py = 0; py < gh; ++py)
      for (int64_t px = 0; px < gw; ++px) {
        const int64_t tok = py * gw + px;
        int64_t k = 0;
        for (int64_t i = 0; i < patch; ++i)
          for (int64_t j = 0; j < patch; ++j)
            for (int64_t ch = 0; ch < c; ++ch, ++k)
              out.data[static_cast<size_t>((bi * gh * gw + tok) * pd + k)] =
                  images.data[static_cast<size_t>(
                      ((bi * h + py * patch + i) * w + px * patch + j) * c + ch)];
      }
  return out;
}

std::shared_ptr<Param> ToyViT::add_param(const std::string& name, std::vector<int64_t> shape,
                                         const std::string& init, bool trainable, bool no_decay) {
  Tensor t;
  if (init == "zeros") {
    t = Tensor::zeros(std::move(shape));
  } else if (init == "ones") {
    t = Tensor::full(std::move(shape), 1.f);
  } else if (init == "normal") {
    const uint64_t seed = fnv1a64(name.data(), name.size()) ^
                          (cfg_.init_seed * 0x9E3779B97F4A7C15ull);
    RandomSource rng(seed);
    // Xavier: the backbone stays frozen, so it must be signal-preserving at
    // init or its features barely respond to the input at all
    const double fan_in = static_cast<double>(shape.front());
    const double fan_out = static_cast<double>(shape.back());
    const double sigma = std::sqrt(2.0 / (fan_in + fan_out));
    t = random_normal(rng, std::move(shape), 0.0, sigma);
  } else {
    throw std::invalid_argument("unknown init '" + init + "'");
  }
  return store_.add(name, std::move(t), trainable, no_decay);
}

ToyViT::ToyViT(ToyViTConfig cfg) : cfg_(cfg) {
  if (cfg_.patch <= 0 || cfg_.image_hw % cfg_.patch != 0) {
    throw std::invalid_argument("toy vit: patch must tile image_hw");
  }
  if (cfg_.dim % cfg_.heads != 0) {
    throw std::invalid_argument("toy vit: heads must divide dim");
  }
  if (cfg_.dim % cfg_.cap_factor != 0) {
    throw std::invalid_argument("toy vit: cap factor must divide dim");
  }
  if (cfg_.lrp_rank >= std::min(cfg_.tokens(), cfg_.dim)) {
    throw std::invalid_argument("toy vit: lrp rank must stay below min(tokens, dim)");
  }
  const Method m = cfg_.method;
  const bool full = m == Method::Full;
  const bool bias_tuned = full || m == Method::BiasOnly || m == Method::S2A;
  const bool norm_tuned = full || m == Method::Adapter;
  const int64_t c = cfg_.dim, n = cfg_.tokens(), hid = cfg_.mlp_hidden;

  pe_w_ = add_param("patch_embed.w", {cfg_.patch_dim(), c}, "normal", full, false);
  pe_b_ = add_param("patch_embed.b", {c}, "zeros", bias_tuned, true);
  cls_ = add_param("embeddings.cls", {1, c}, "normal", full, true);
  pos_ = add_param("embeddings.pos", {n, c}, "normal", full, true);

  for (int64_t i = 0; i < cfg_.depth; ++i) {
    const std::string bp = "block" + std::to_string(i) + ".";
    Block blk;
    blk.g1 = add_param(bp + "norm1.g", {c}, "ones", norm_tuned, true);
    blk.b1 = add_param(bp + "norm1.b", {c}, "zeros", norm_tuned || bias_tuned, true);
    blk.wqkv = add_param(bp + "qkv.w", {c, 3 * c}, "normal", full, false);
    blk.bqkv = add_param(bp + "qkv.b", {3 * c}, "zeros", bias_tuned, true);
    blk.wp = add_param(bp + "attn.proj.w", {c, c}, "normal", full, false);
    blk.bp = add_param(bp + "attn.proj.b", {c}, "zeros", bias_tuned, true);
    blk.g2 = add_param(bp + "norm2.g", {c}, "ones", norm_tuned, true);
    blk.b2 = add_param(bp + "norm2.b", {c}, "zeros", norm_tuned || bias_tuned, true);
    blk.w1 = add_param(bp + "mlp.fc1.w", {c, hid}, "normal", full, false);
    blk.bm1 = add_param(bp + "mlp.fc1.b", {hid}, "zeros", bias_tuned, true);
    blk.w2 = add_param(bp + "mlp.fc2.w", {hid, c}, "normal", full, false);
    blk.bm2 = add_param(bp + "mlp.fc2.b", {c}, "zeros", bias_tuned, true);
    if (m == Method::LoRA) {
      blk.lora_a = add_param(bp + "qkv.lora.a", {c, cfg_.lora_rank}, "normal", true, false);
      blk.lora_b = add_param(bp + "qkv.lora.b", {cfg_.lora_rank, 3 * c}, "zeros", true, false);
    }
    if (m == Method::Adapter) {
      const int64_t bn = cfg_.adapter_bottleneck;
      blk.ad1_wd = add_param(bp + "attn.adapter.wd", {c, bn}, "normal", true, false);
      blk.ad1_bd = add_param(bp + "attn.adapter.bd", {bn}, "zeros", true, true);
      blk.ad1_wu = add_param(bp + "attn.adapter.wu", {bn, c}, "zeros", true, false);
      blk.ad1_bu = add_param(bp + "attn.adapter.bu", {c}, "zeros", true, true);
      blk.ad2_wd = add_param(bp + "mlp.adapter.wd", {c, bn}, "normal", true, false);
      blk.ad2_bd = add_param(bp + "mlp.adapter.bd", {bn}, "zeros", true, true);
      blk.ad2_wu = add_param(bp + "mlp.adapter.wu", {bn, c}, "zeros", true, false);
      blk.ad2_bu = add_param(bp + "mlp.adapter.bu", {c}, "zeros", true, true);
    }
    if (m == Method::VPT) {
      blk.prompt = add_param(bp + "prompt", {cfg_.prompt_tokens, c}, "normal", true, true);
    }
    if (m == Method::S2A) {
      blk.lrp_a = add_param(bp + "lrp.a", {n, cfg_.lrp_rank}, "zeros", true, true);
      blk.lrp_b = add_param(bp + "lrp.b", {cfg_.lrp_rank, c}, "normal", true, true);
      const int64_t sd = cfg_.side_dim();
      blk.lsb_w1 = add_param(bp + "side.lsb.w1", {sd, sd}, "normal", true, false);
      blk.lsb_c1 = add_param(bp + "side.lsb.b1", {sd}, "zeros", true, true);
      blk.lsb_k = add_param(bp + "side.lsb.k", {3, 3, sd}, "normal", true, false);
      blk.lsb_kb = add_param(bp + "side.lsb.kb", {sd}, "zeros", true, true);
      // nonzero so side features carry signal from step one; a zero side
      // output and the zero head would starve each other of gradient forever
      blk.lsb_w2 = add_param(bp + "side.lsb.w2", {sd, sd}, "normal", true, false);
      blk.lsb_c2 = add_param(bp + "side.lsb.b2", {sd}, "zeros", true, true);
    }
    blocks_.push_back(std::move(blk));
  }

  fin_g_ = add_param("final_norm.g", {c}, "ones", norm_tuned, true);
  fin_b_ = add_param("final_norm.b", {c}, "zeros", norm_tuned || bias_tuned, true);
  const int64_t head_in = m == Method::S2A ? c + cfg_.side_dim() : c;
  // nonzero head: every feature group gets loss gradient from the first step
  head_w_ = add_param("head.w", {head_in, cfg_.classes}, "normal", true, false);
  head_b_ = add_param("head.b", {cfg_.classes}, "zeros", true, true);
}

NodeId ToyViT::pnode(Tape& tape, const std::shared_ptr<Param>& p) {
  // keyed by the tensor storage so the optimizer's find_param_node(value
  // pointer) resolves the same node
  return tape.param_node(p->value.get(), p->value, p->trainable, p->name);
}

ops::Value ToyViT::adapter(Tape& tape, const ops::Value& x, const std::shared_ptr<Param>& wd,
                           const std::shared_ptr<Param>& bd, const std::shared_ptr<Param>& wu,
                           const std::shared_ptr<Param>& bu, const std::string& label) {
  ops::Value z = ops::linear(tape, x, pnode(tape, wd), pnode(tape, bd), label);
  const StoragePolicy pol =
      tape.node(z.id).requires_grad ? StoragePolicy::Full32 : StoragePolicy::NoSave;
  z = ops::gelu(tape, z, pol, label + ".gelu");
  z = ops::linear(tape, z, pnode(tape, wu), pnode(tape, bu), label);
  return ops::add(tape, x, z, label);
}

ops::Value ToyViT::forward_features(Tape& tape, const Tensor& images) {
  const Method m = cfg_.method;
  const int64_t c = cfg_.dim, n = cfg_.tokens(), heads = cfg_.heads;
  const int64_t bsz = images.dim(0);
  const int64_t grid = cfg_.grid(), np = cfg_.patch_tokens(), sd = cfg_.side_dim();
  const float attn_scale = 1.f / std::sqrt(static_cast<float>(c / heads));
  const bool quant = m == Method::S2A && cfg_.quant_saves;

  ops::Value x = ops::input(tape, patchify(images, cfg_.patch), "patches");
  x = ops::linear(tape, x, pnode(tape, pe_w_), pnode(tape, pe_b_), "patch_embed");
  x = ops::insert_tokens(tape, x, pnode(tape, cls_), 0, "embeddings");
  x = ops::add_rows_bcast(tape, x, ops::leaf(tape, pnode(tape, pos_)), "embeddings");

  ops::Value side;
  for (int64_t i = 0; i < cfg_.depth; ++i) {
    const Block& blk = blocks_[static_cast<size_t>(i)];
    const std::string bp = "block" + std::to_string(i);
    int64_t nt = n;
    if (m == Method::VPT) {
      x = ops::insert_tokens(tape, x, pnode(tape, blk.prompt), n, bp + ".prompt");
      nt = n + cfg_.prompt_tokens;
    }
    if (m == Method::S2A) {
      ops::Value lrp = ops::matmul(tape, ops::leaf(tape, pnode(tape, blk.lrp_a)),
                                   ops::leaf(tape, pnode(tape, blk.lrp_b)), bp + ".lrp");
      x = ops::add_rows_bcast(tape, x, lrp, bp + ".lrp");
    }

    ops::Value h = ops::affine(tape, x, pnode(tape, blk.g1), pnode(tape, blk.b1), bp + ".norm1");
    ops::Value qkv = ops::linear(tape, h, pnode(tape, blk.wqkv), pnode(tape, blk.bqkv), bp + ".qkv");
    if (m == Method::LoRA) {
      const std::string ll = bp + ".qkv.lora";
      ops::Value hr = ops::reshape(tape, h, {bsz * nt, c}, ll);
      ops::Value u = ops::matmul(tape, hr, ops::leaf(tape, pnode(tape, blk.lora_a)), ll);
      ops::Value lo = ops::matmul(tape, u, ops::leaf(tape, pnode(tape, blk.lora_b)), ll);
      lo = ops::reshape(tape, lo, {bsz, nt, 3 * c}, ll);
      qkv = ops::add(tape, qkv, lo, ll);
    }

    ops::Value q = ops::slice_cols(tape, qkv, 0, c, bp + ".attn");
    ops::Value k = ops::slice_cols(tape, qkv, c, 2 * c, bp + ".attn");
    ops::Value v = ops::slice_cols(tape, qkv, 2 * c, 3 * c, bp + ".attn");
    // The score path is feature extraction only: gradients reach the tuned
    // modules through the value path and the residuals, so q/k stay detached
    // and no attention operand has to be retained.
    q = ops::stop_grad(tape, q, bp + ".attn");
    k = ops::stop_grad(tape, k, bp + ".attn");
    ops::Value qh = ops::heads_split(tape, q, heads, bp + ".attn");
    ops::Value kh = ops::heads_split(tape, k, heads, bp + ".attn");
    ops::Value vh = ops::heads_split(tape, v, heads, bp + ".attn");
    ops::Value scores = ops::qk_scores(tape, qh, kh, attn_scale, bp + ".attn");
    const bool v_grad = tape.node(vh.id).requires_grad;
    const StoragePolicy spol = !v_grad ? StoragePolicy::NoSave
                               : quant ? StoragePolicy::Quant4
                                       : StoragePolicy::Full32;
    ops::Value probs = ops::softmax_rows(tape, scores, spol, bp + ".attn.softmax");
    ops::Value ctxv = ops::attn_apply(tape, probs, vh, bp + ".attn");
    ops::Value merged = ops::heads_merge(tape, ctxv, bsz, heads, bp + ".attn");
    ops::Value proj =
        ops::linear(tape, merged, pnode(tape, blk.wp), pnode(tape, blk.bp), bp + ".attn.proj");
    if (m == Method::Adapter) {
      proj = adapter(tape, proj, blk.ad1_wd, blk.ad1_bd, blk.ad1_wu, blk.ad1_bu,
                     bp + ".attn.adapter");
    }
    x = ops::add(tape, x, proj, bp);

    ops::Value h2 = ops::affine(tape, x, pnode(tape, blk.g2), pnode(tape, blk.b2), bp + ".norm2");
    ops::Value f1 = ops::linear(tape, h2, pnode(tape, blk.w1), pnode(tape, blk.bm1), bp + ".mlp.fc1");
    const bool g_grad = tape.node(f1.id).requires_grad;
    const StoragePolicy gpol = !g_grad ? StoragePolicy::NoSave
                               : quant ? StoragePolicy::Quant4
                                       : StoragePolicy::Full32;
    ops::Value act = ops::gelu(tape, f1, gpol, bp + ".mlp.gelu");
    ops::Value f2 = ops::linear(tape, act, pnode(tape, blk.w2), pnode(tape, blk.bm2), bp + ".mlp.fc2");
    if (m == Method::Adapter) {
      f2 = adapter(tape, f2, blk.ad2_wd, blk.ad2_bd, blk.ad2_wu, blk.ad2_bu, bp + ".mlp.adapter");
    }
    x = ops::add(tape, x, f2, bp);

    if (m == Method::VPT) {
      x = ops::remove_tokens(tape, x, n, cfg_.prompt_tokens, bp + ".prompt");
    }
    if (m == Method::S2A) {
      // y_i = pw(dw(pw(x_d + y_{i-1}))), carried on the patch grid
      ops::Value tok = ops::remove_tokens(tape, x, 0, 1, bp + ".side");
      ops::Value pooled = ops::cap(tape, tok, cfg_.cap_factor, bp + ".side.cap");
      ops::Value gridv = ops::reshape(tape, pooled, {bsz, grid, grid, sd}, bp + ".side");
      if (i > 0) gridv = ops::add(tape, gridv, side, bp + ".side");
      ops::Value z =
          ops::linear(tape, gridv, pnode(tape, blk.lsb_w1), pnode(tape, blk.lsb_c1), bp + ".side.lsb");
      z = ops::dwconv3x3(tape, z, pnode(tape, blk.lsb_k), pnode(tape, blk.lsb_kb), bp + ".side.lsb");
      z = ops::linear(tape, z, pnode(tape, blk.lsb_w2), pnode(tape, blk.lsb_c2), bp + ".side.lsb");
      side = z;
    }
  }

  x = ops::affine(tape, x, pnode(tape, fin_g_), pnode(tape, fin_b_), "final_norm");
  ops::Value feat = ops::token_at(tape, x, 0, "head");
  if (m == Method::S2A) {
    ops::Value flat = ops::reshape(tape, side, {bsz, np, sd}, "side");
    ops::Value side_feat = ops::mean_tokens(tape, flat, "side");
    feat = ops::concat_cols(tape, feat, side_feat, "head");
  }
  return feat;
}

ops::Value ToyViT::forward_loss(Tape& tape, const Tensor& images,
                                const std::vector<int>& labels) {
  ops::Value feat = forward_features(tape, images);
  return ops::ce_head(tape, feat, pnode(tape, head_w_), pnode(tape, head_b_), labels, "head");
}

Tensor ToyViT::predict_logits(const Tensor& images) {
  Tape tape;
  tape.set_inference_mode(true);
  ops::Value feat = forward_features(tape, images);
  return pointwise_conv(feat.t, *head_w_->value, *head_b_->value);
}

}  // namespace s2a
