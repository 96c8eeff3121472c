#include "s2a/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace s2a {
namespace {

using ops::Value;

void check_rank(const Tensor& t, size_t r, const char* op, const char* arg) {
  if (t.rank() != r) {
    throw std::invalid_argument(std::string(op) + ": " + arg + " must be rank " +
                                std::to_string(r) + ", got " + t.shape_str());
  }
}

const Tensor& leaf_tensor(const Tape& tape, NodeId id, const char* op) {
  const TapeNode& n = tape.node(id);
  if (!n.is_leaf || !n.value) {
    throw std::invalid_argument(std::string(op) + ": expected a leaf node for parameter operand");
  }
  return *n.value;
}

// Operand value for matmul-style backward: leaves are read in place,
// activations come from the node's saved slot.
Tensor operand_value(const BackwardCtx& ctx, size_t parent_idx, size_t slot) {
  const TapeNode& p = ctx.tape.node(ctx.node.parents.at(parent_idx));
  if (p.is_leaf) return *p.value;
  return ctx.saved_tensor(slot);
}

// --- backward functions ------------------------------------------------------

void bw_linear(BackwardCtx& ctx) {
  const auto& x_shape = ctx.tape.node(ctx.node.parents[0]).out_shape;
  const int64_t k = x_shape.back();
  const int64_t m = ctx.node.out_shape.back();
  const int64_t rows = shape_product(x_shape) / k;
  const Tensor g2 = reshape(ctx.g, {rows, m});
  if (ctx.needs(0)) {
    const Tensor& w = ctx.leaf_value(1);
    ctx.add(0, reshape(matmul_nt(g2, w), x_shape));
  }
  if (ctx.needs(1)) {
    const Tensor x2 = reshape(ctx.saved_tensor(0), {rows, k});
    ctx.add(1, matmul_tn(x2, g2));
  }
  if (ctx.needs(2)) ctx.add(2, sum_rows(ctx.g));
}

void bw_matmul(BackwardCtx& ctx) {
  if (ctx.needs(0)) ctx.add(0, matmul_nt(ctx.g, operand_value(ctx, 1, 1)));
  if (ctx.needs(1)) ctx.add(1, matmul_tn(operand_value(ctx, 0, 0), ctx.g));
}

void bw_add(BackwardCtx& ctx) {
  if (ctx.needs(0)) ctx.add(0, ctx.g);
  if (ctx.needs(1)) ctx.add(1, ctx.g);
}

void bw_add_rows(BackwardCtx& ctx) {
  if (ctx.needs(0)) ctx.add(0, ctx.g);
  if (ctx.needs(1)) {
    const auto& rows_shape = ctx.tape.node(ctx.node.parents[1]).out_shape;
    const int64_t span = shape_product(rows_shape);
    const int64_t lead = ctx.g.size() / span;
    Tensor gr = Tensor::zeros(rows_shape);
    for (int64_t j = 0; j < span; ++j) {
      double acc = 0.0;
      for (int64_t l = 0; l < lead; ++l) acc += ctx.g.data[static_cast<size_t>(l * span + j)];
      gr.data[static_cast<size_t>(j)] = static_cast<float>(acc);
    }
    ctx.add(1, std::move(gr));
  }
}

void bw_scale(BackwardCtx& ctx) {
  if (ctx.needs(0)) ctx.add(0, scale(ctx.g, ctx.node.fattr.at(0)));
}

void bw_reshape(BackwardCtx& ctx) {
  if (ctx.needs(0)) ctx.add(0, reshape(ctx.g, ctx.tape.node(ctx.node.parents[0]).out_shape));
}

void bw_slice_cols(BackwardCtx& ctx) {
  if (!ctx.needs(0)) return;
  const auto& x_shape = ctx.tape.node(ctx.node.parents[0]).out_shape;
  const int64_t c = x_shape.back();
  const int64_t from = ctx.node.iattr.at(0);
  const int64_t width = ctx.node.iattr.at(1) - from;
  const int64_t lead = shape_product(x_shape) / c;
  Tensor gx = Tensor::zeros(x_shape);
  for (int64_t l = 0; l < lead; ++l)
    for (int64_t j = 0; j < width; ++j)
      gx.data[static_cast<size_t>(l * c + from + j)] =
          ctx.g.data[static_cast<size_t>(l * width + j)];
  ctx.add(0, std::move(gx));
}

void bw_concat_cols(BackwardCtx& ctx) {
  const auto& a_shape = ctx.tape.node(ctx.node.parents[0]).out_shape;
  const auto& b_shape = ctx.tape.node(ctx.node.parents[1]).out_shape;
  const int64_t ca = a_shape.back();
  const int64_t cb = b_shape.back();
  const int64_t lead = ctx.g.size() / (ca + cb);
  if (ctx.needs(0)) {
    Tensor ga = Tensor::zeros(a_shape);
    for (int64_t l = 0; l < lead; ++l)
      for (int64_t j = 0; j < ca; ++j)
        ga.data[static_cast<size_t>(l * ca + j)] =
            ctx.g.data[static_cast<size_t>(l * (ca + cb) + j)];
    ctx.add(0, std::move(ga));
  }
  if (ctx.needs(1)) {
    Tensor gb = Tensor::zeros(b_shape);
    for (int64_t l = 0; l < lead; ++l)
      for (int64_t j = 0; j < cb; ++j)
        gb.data[static_cast<size_t>(l * cb + j)] =
            ctx.g.data[static_cast<size_t>(l * (ca + cb) + ca + j)];
    ctx.add(1, std::move(gb));
  }
}

void bw_insert_tokens(BackwardCtx& ctx) {
  const auto& x_shape = ctx.tape.node(ctx.node.parents[0]).out_shape;
  const int64_t bsz = x_shape[0], n = x_shape[1], c = x_shape[2];
  const int64_t at = ctx.node.iattr.at(0);
  const int64_t p = ctx.node.iattr.at(1);
  const int64_t n_out = n + p;
  if (ctx.needs(0)) {
    Tensor gx = Tensor::zeros(x_shape);
    for (int64_t b = 0; b < bsz; ++b)
      for (int64_t t = 0; t < n; ++t) {
        const int64_t src = t < at ? t : t + p;
        for (int64_t j = 0; j < c; ++j)
          gx.data[static_cast<size_t>((b * n + t) * c + j)] =
              ctx.g.data[static_cast<size_t>((b * n_out + src) * c + j)];
      }
    ctx.add(0, std::move(gx));
  }
  if (ctx.needs(1)) {
    Tensor gp = Tensor::zeros({p, c});
    for (int64_t t = 0; t < p; ++t)
      for (int64_t j = 0; j < c; ++j) {
        double acc = 0.0;
        for (int64_t b = 0; b < bsz; ++b)
          acc += ctx.g.data[static_cast<size_t>((b * n_out + at + t) * c + j)];
        gp.data[static_cast<size_t>(t * c + j)] = static_cast<float>(acc);
      }
    ctx.add(1, std::move(gp));
  }
}

void bw_remove_tokens(BackwardCtx& ctx) {
  if (!ctx.needs(0)) return;
  const auto& x_shape = ctx.tape.node(ctx.node.parents[0]).out_shape;
  const int64_t bsz = x_shape[0], n = x_shape[1], c = x_shape[2];
  const int64_t at = ctx.node.iattr.at(0);
  const int64_t count = ctx.node.iattr.at(1);
  const int64_t n_out = n - count;
  Tensor gx = Tensor::zeros(x_shape);
  for (int64_t b = 0; b < bsz; ++b)
    for (int64_t t = 0; t < n; ++t) {
      if (t >= at && t < at + count) continue;
      const int64_t src = t < at ? t : t - count;
      for (int64_t j = 0; j < c; ++j)
        gx.data[static_cast<size_t>((b * n + t) * c + j)] =
            ctx.g.data[static_cast<size_t>((b * n_out + src) * c + j)];
    }
  ctx.add(0, std::move(gx));
}

void bw_heads_split(BackwardCtx& ctx) {
  if (!ctx.needs(0)) return;
  const int64_t bsz = ctx.node.iattr.at(0), n = ctx.node.iattr.at(1);
  const int64_t h = ctx.node.iattr.at(2), dh = ctx.node.iattr.at(3);
  Tensor gx = Tensor::zeros({bsz, n, h * dh});
  for (int64_t b = 0; b < bsz; ++b)
    for (int64_t hh = 0; hh < h; ++hh)
      for (int64_t t = 0; t < n; ++t)
        for (int64_t d = 0; d < dh; ++d)
          gx.data[static_cast<size_t>((b * n + t) * h * dh + hh * dh + d)] =
              ctx.g.data[static_cast<size_t>(((b * h + hh) * n + t) * dh + d)];
  ctx.add(0, std::move(gx));
}

void bw_heads_merge(BackwardCtx& ctx) {
  if (!ctx.needs(0)) return;
  const int64_t bsz = ctx.node.iattr.at(0), n = ctx.node.iattr.at(1);
  const int64_t h = ctx.node.iattr.at(2), dh = ctx.node.iattr.at(3);
  Tensor gx = Tensor::zeros({bsz * h, n, dh});
  for (int64_t b = 0; b < bsz; ++b)
    for (int64_t hh = 0; hh < h; ++hh)
      for (int64_t t = 0; t < n; ++t)
        for (int64_t d = 0; d < dh; ++d)
          gx.data[static_cast<size_t>(((b * h + hh) * n + t) * dh + d)] =
              ctx.g.data[static_cast<size_t>((b * n + t) * h * dh + hh * dh + d)];
  ctx.add(0, std::move(gx));
}

void bw_softmax_rows(BackwardCtx& ctx) {
  if (!ctx.needs(0)) return;
  ctx.add(0, softmax_backward(ctx.saved_tensor(0), ctx.g));
}

void bw_attn_apply(BackwardCtx& ctx) {
  if (ctx.needs(1)) {
    // The softmax parent retained its own output; reuse it rather than saving
    // the attention map twice.
    ctx.add(1, matmul3_tn(ctx.parent_saved_tensor(0, 0), ctx.g));
  }
  if (ctx.needs(0)) {
    ctx.add(0, matmul3_nt(ctx.g, ctx.saved_tensor(0)));
  }
}

void bw_gelu(BackwardCtx& ctx) {
  if (!ctx.needs(0)) return;
  const SavedSlot& s = ctx.node.saved.at(0);
  switch (s.policy) {
    case StoragePolicy::Quant4:
      ctx.add(0, gelu_backward(std::get<QuantBlob>(s.payload), ctx.g));
      return;
    case StoragePolicy::Full32:
      ctx.add(0, gelu_backward(std::get<Tensor>(s.payload), ctx.g));
      return;
    default:
      throw std::runtime_error("tape: corrupted tape, gelu backward without a saved input");
  }
}

void bw_relu(BackwardCtx& ctx) {
  if (!ctx.needs(0)) return;
  const SavedSlot& s = ctx.node.saved.at(0);
  if (s.policy == StoragePolicy::Mask1) {
    ctx.add(0, relu_backward(std::get<QuantBlob>(s.payload), ctx.g));
    return;
  }
  if (s.policy == StoragePolicy::Full32) {
    const Tensor& x = std::get<Tensor>(s.payload);
    Tensor gx = Tensor::zeros(x.shape);
    for (size_t i = 0; i < gx.data.size(); ++i) gx.data[i] = x.data[i] > 0.f ? ctx.g.data[i] : 0.f;
    ctx.add(0, std::move(gx));
    return;
  }
  throw std::runtime_error("tape: corrupted tape, relu backward without a saved gate");
}

void bw_cap(BackwardCtx& ctx) {
  if (!ctx.needs(0)) return;
  const auto& x_shape = ctx.tape.node(ctx.node.parents[0]).out_shape;
  const int64_t r = ctx.node.iattr.at(0);
  const int64_t c = x_shape.back();
  const int64_t cr = c / r;
  const int64_t lead = shape_product(x_shape) / c;
  const float inv = 1.f / static_cast<float>(r);
  Tensor gx = Tensor::zeros(x_shape);
  for (int64_t l = 0; l < lead; ++l)
    for (int64_t k = 0; k < cr; ++k) {
      const float gv = ctx.g.data[static_cast<size_t>(l * cr + k)] * inv;
      for (int64_t j = 0; j < r; ++j)
        gx.data[static_cast<size_t>(l * c + k * r + j)] = gv;
    }
  ctx.add(0, std::move(gx));
}

void bw_dwconv(BackwardCtx& ctx) {
  const int64_t bsz = ctx.node.iattr.at(0), h = ctx.node.iattr.at(1);
  const int64_t w = ctx.node.iattr.at(2), c = ctx.node.iattr.at(3);
  auto gidx = [&](int64_t b, int64_t y, int64_t x, int64_t ch) {
    return static_cast<size_t>(((b * h + y) * w + x) * c + ch);
  };
  if (ctx.needs(0)) {
    const Tensor& k = ctx.leaf_value(1);
    Tensor gx = Tensor::zeros({bsz, h, w, c});
    for (int64_t b = 0; b < bsz; ++b)
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
          for (int64_t ch = 0; ch < c; ++ch) {
            double acc = 0.0;
            for (int64_t i = 0; i < 3; ++i) {
              const int64_t oy = y + 1 - i;
              if (oy < 0 || oy >= h) continue;
              for (int64_t j = 0; j < 3; ++j) {
                const int64_t ox = x + 1 - j;
                if (ox < 0 || ox >= w) continue;
                acc += static_cast<double>(ctx.g.data[gidx(b, oy, ox, ch)]) *
                       static_cast<double>(k.data[static_cast<size_t>((i * 3 + j) * c + ch)]);
              }
            }
            gx.data[gidx(b, y, x, ch)] = static_cast<float>(acc);
          }
    ctx.add(0, std::move(gx));
  }
  if (ctx.needs(1)) {
    const Tensor xs = ctx.saved_tensor(0);
    Tensor gk = Tensor::zeros({3, 3, c});
    for (int64_t i = 0; i < 3; ++i)
      for (int64_t j = 0; j < 3; ++j)
        for (int64_t ch = 0; ch < c; ++ch) {
          double acc = 0.0;
          for (int64_t b = 0; b < bsz; ++b)
            for (int64_t y = 0; y < h; ++y) {
              const int64_t sy = y + i - 1;
              if (sy < 0 || sy >= h) continue;
              for (int64_t x = 0; x < w; ++x) {
                const int64_t sx = x + j - 1;
                if (sx < 0 || sx >= w) continue;
                acc += static_cast<double>(xs.data[gidx(b, sy, sx, ch)]) *
                       static_cast<double>(ctx.g.data[gidx(b, y, x, ch)]);
              }
            }
          gk.data[static_cast<size_t>((i * 3 + j) * c + ch)] = static_cast<float>(acc);
        }
    ctx.add(1, std::move(gk));
  }
  if (ctx.needs(2)) ctx.add(2, sum_rows(ctx.g));
}

void bw_affine(BackwardCtx& ctx) {
  const Tensor& gm = ctx.leaf_value(1);
  const int64_t c = gm.size();
  const int64_t lead = ctx.g.size() / c;
  if (ctx.needs(0)) {
    Tensor gx = Tensor::zeros(ctx.tape.node(ctx.node.parents[0]).out_shape);
    for (int64_t l = 0; l < lead; ++l)
      for (int64_t j = 0; j < c; ++j)
        gx.data[static_cast<size_t>(l * c + j)] =
            ctx.g.data[static_cast<size_t>(l * c + j)] * gm.data[static_cast<size_t>(j)];
    ctx.add(0, std::move(gx));
  }
  if (ctx.needs(1)) {
    const Tensor xs = ctx.saved_tensor(0);
    Tensor gg = Tensor::zeros({c});
    for (int64_t j = 0; j < c; ++j) {
      double acc = 0.0;
      for (int64_t l = 0; l < lead; ++l)
        acc += static_cast<double>(ctx.g.data[static_cast<size_t>(l * c + j)]) *
               static_cast<double>(xs.data[static_cast<size_t>(l * c + j)]);
      gg.data[static_cast<size_t>(j)] = static_cast<float>(acc);
    }
    ctx.add(1, std::move(gg));
  }
  if (ctx.needs(2)) ctx.add(2, sum_rows(ctx.g));
}

void bw_mean_tokens(BackwardCtx& ctx) {
  if (!ctx.needs(0)) return;
  const auto& x_shape = ctx.tape.node(ctx.node.parents[0]).out_shape;
  const int64_t bsz = x_shape[0], n = x_shape[1], c = x_shape[2];
  const float inv = 1.f / static_cast<float>(n);
  Tensor gx = Tensor::zeros(x_shape);
  for (int64_t b = 0; b < bsz; ++b)
    for (int64_t t = 0; t < n; ++t)
      for (int64_t j = 0; j < c; ++j)
        gx.data[static_cast<size_t>((b * n + t) * c + j)] =
            ctx.g.data[static_cast<size_t>(b * c + j)] * inv;
  ctx.add(0, std::move(gx));
}

void bw_token_at(BackwardCtx& ctx) {
  if (!ctx.needs(0)) return;
  const auto& x_shape = ctx.tape.node(ctx.node.parents[0]).out_shape;
  const int64_t bsz = x_shape[0], n = x_shape[1], c = x_shape[2];
  const int64_t idx = ctx.node.iattr.at(0);
  Tensor gx = Tensor::zeros(x_shape);
  for (int64_t b = 0; b < bsz; ++b)
    for (int64_t j = 0; j < c; ++j)
      gx.data[static_cast<size_t>((b * n + idx) * c + j)] =
          ctx.g.data[static_cast<size_t>(b * c + j)];
  ctx.add(0, std::move(gx));
}

void bw_wsum(BackwardCtx& ctx) {
  if (!ctx.needs(0)) return;
  ctx.add(0, scale(ctx.leaf_value(1), ctx.g.data.at(0)));
}

void bw_ce_head(BackwardCtx& ctx) {
  const Tensor probs = ctx.saved_tensor(1);
  const int64_t bsz = probs.dim(0);
  const int64_t k = probs.dim(1);
  const float c = ctx.g.data.at(0) / static_cast<float>(bsz);
  Tensor d = Tensor::zeros({bsz, k});
  for (int64_t i = 0; i < bsz; ++i) {
    const int64_t y = ctx.node.iattr.at(static_cast<size_t>(i));
    for (int64_t j = 0; j < k; ++j) {
      const float p = probs.data[static_cast<size_t>(i * k + j)];
      d.data[static_cast<size_t>(i * k + j)] = (p - (j == y ? 1.f : 0.f)) * c;
    }
  }
  if (ctx.needs(0)) ctx.add(0, matmul_nt(d, ctx.leaf_value(1)));
  if (ctx.needs(1)) ctx.add(1, matmul_tn(ctx.saved_tensor(0), d));
  if (ctx.needs(2)) ctx.add(2, sum_rows(d));
}

}  // namespace

const std::map<std::string, OpDef>& op_registry() {
  static const std::map<std::string, OpDef> reg = [] {
    const StoragePolicy F = StoragePolicy::Full32;
    const StoragePolicy Q = StoragePolicy::Quant4;
    const StoragePolicy M = StoragePolicy::Mask1;
    const StoragePolicy N = StoragePolicy::NoSave;
    std::map<std::string, OpDef> r;
    r["input"] = {{}, nullptr};
    r["param"] = {{}, nullptr};
    r["linear"] = {{{F, N}}, bw_linear};
    r["matmul"] = {{{F, N}, {F, N}}, bw_matmul};
    r["add"] = {{}, bw_add};
    r["add_rows"] = {{}, bw_add_rows};
    r["scale"] = {{}, bw_scale};
    r["stop_grad"] = {{}, nullptr};
    r["reshape"] = {{}, bw_reshape};
    r["slice_cols"] = {{}, bw_slice_cols};
    r["concat_cols"] = {{}, bw_concat_cols};
    r["insert_tokens"] = {{}, bw_insert_tokens};
    r["remove_tokens"] = {{}, bw_remove_tokens};
    r["heads_split"] = {{}, bw_heads_split};
    r["heads_merge"] = {{}, bw_heads_merge};
    r["qk_scores"] = {{}, nullptr};
    r["softmax_rows"] = {{{F, Q, N}}, bw_softmax_rows};
    r["attn_apply"] = {{{F, N}}, bw_attn_apply};
    r["gelu"] = {{{F, Q, N}}, bw_gelu};
    r["relu"] = {{{F, M, N}}, bw_relu};
    r["cap"] = {{}, bw_cap};
    r["dwconv"] = {{{F, N}}, bw_dwconv};
    r["affine"] = {{{F, N}}, bw_affine};
    r["mean_tokens"] = {{}, bw_mean_tokens};
    r["token_at"] = {{}, bw_token_at};
    r["wsum"] = {{}, bw_wsum};
    r["ce_head"] = {{{F, N}, {F, N}}, bw_ce_head};
    return r;
  }();
  return reg;
}

namespace ops {

Value input(Tape& tape, Tensor v, const std::string& label) {
  Tensor copy = v;
  const NodeId id = tape.input(std::move(v), label);
  return {std::move(copy), id};
}

Value leaf(Tape& tape, NodeId id) {
  const TapeNode& n = tape.node(id);
  if (!n.is_leaf || !n.value) throw std::invalid_argument("ops::leaf: node is not a leaf");
  return {*n.value, id};
}

Value linear(Tape& tape, const Value& x, NodeId W, NodeId b, const std::string& label) {
  const Tensor& wv = leaf_tensor(tape, W, "linear");
  const Tensor& bv = leaf_tensor(tape, b, "linear");
  check_rank(wv, 2, "linear", "W");
  if (x.t.rank() < 2 || x.t.shape.back() != wv.dim(0)) {
    throw std::invalid_argument("linear: x " + x.t.shape_str() + " does not feed W " +
                                wv.shape_str());
  }
  Tensor y = pointwise_conv(x.t, wv, bv);
  SavedSlot slot =
      tape.node(W).requires_grad ? SavedSlot::full32(x.t) : SavedSlot::none();
  const NodeId id =
      tape.record("linear", {x.id, W, b}, {std::move(slot)}, y.shape, label);
  return {std::move(y), id};
}

Value matmul(Tape& tape, const Value& a, const Value& b, const std::string& label) {
  check_rank(a.t, 2, "matmul", "a");
  check_rank(b.t, 2, "matmul", "b");
  Tensor y = s2a::matmul(a.t, b.t);
  const bool a_req = tape.node(a.id).requires_grad;
  const bool b_req = tape.node(b.id).requires_grad;
  SavedSlot s0 = (b_req && !tape.node(a.id).is_leaf) ? SavedSlot::full32(a.t) : SavedSlot::none();
  SavedSlot s1 = (a_req && !tape.node(b.id).is_leaf) ? SavedSlot::full32(b.t) : SavedSlot::none();
  const NodeId id =
      tape.record("matmul", {a.id, b.id}, {std::move(s0), std::move(s1)}, y.shape, label);
  return {std::move(y), id};
}

Value add(Tape& tape, const Value& a, const Value& b, const std::string& label) {
  Tensor y = s2a::add(a.t, b.t);
  const NodeId id = tape.record("add", {a.id, b.id}, {}, y.shape, label);
  return {std::move(y), id};
}

Value add_rows_bcast(Tape& tape, const Value& x, const Value& rows, const std::string& label) {
  const int64_t span = rows.t.size();
  if (span <= 0 || x.t.size() % span != 0) {
    throw std::invalid_argument("add_rows: " + rows.t.shape_str() + " does not tile " +
                                x.t.shape_str());
  }
  const int64_t lead = x.t.size() / span;
  Tensor y = x.t;
  for (int64_t l = 0; l < lead; ++l)
    for (int64_t j = 0; j < span; ++j)
      y.data[static_cast<size_t>(l * span + j)] += rows.t.data[static_cast<size_t>(j)];
  const NodeId id = tape.record("add_rows", {x.id, rows.id}, {}, y.shape, label);
  return {std::move(y), id};
}

Value scale(Tape& tape, const Value& x, float c, const std::string& label) {
  Tensor y = s2a::scale(x.t, c);
  const NodeId id = tape.record("scale", {x.id}, {}, y.shape, label, {}, {c});
  return {std::move(y), id};
}

Value stop_grad(Tape& tape, const Value& x, const std::string& label) {
  const NodeId id = tape.record("stop_grad", {x.id}, {}, x.t.shape, label);
  return {x.t, id};
}

Value reshape(Tape& tape, const Value& x, std::vector<int64_t> new_shape,
              const std::string& label) {
  Tensor y = s2a::reshape(x.t, std::move(new_shape));
  const NodeId id = tape.record("reshape", {x.id}, {}, y.shape, label);
  return {std::move(y), id};
}

Value slice_cols(Tape& tape, const Value& x, int64_t from, int64_t to, const std::string& label) {
  const int64_t c = x.t.shape.back();
  if (from < 0 || to <= from || to > c) {
    throw std::invalid_argument("slice_cols: range [" + std::to_string(from) + ", " +
                                std::to_string(to) + ") out of " + std::to_string(c) +
                                " columns");
  }
  std::vector<int64_t> out_shape = x.t.shape;
  out_shape.back() = to - from;
  const int64_t lead = x.t.size() / c;
  const int64_t width = to - from;
  Tensor y = Tensor::zeros(out_shape);
  for (int64_t l = 0; l < lead; ++l)
    for (int64_t j = 0; j < width; ++j)
      y.data[static_cast<size_t>(l * width + j)] = x.t.data[static_cast<size_t>(l * c + from + j)];
  const NodeId id = tape.record("slice_cols", {x.id}, {}, y.shape, label, {from, to});
  return {std::move(y), id};
}

Value concat_cols(Tape& tape, const Value& a, const Value& b, const std::string& label) {
  Tensor y = concat_last_dim(a.t, b.t);
  const NodeId id = tape.record("concat_cols", {a.id, b.id}, {}, y.shape, label);
  return {std::move(y), id};
}

Value insert_tokens(Tape& tape, const Value& x, NodeId P, int64_t at, const std::string& label) {
  const Tensor& pv = leaf_tensor(tape, P, "insert_tokens");
  check_rank(x.t, 3, "insert_tokens", "x");
  check_rank(pv, 2, "insert_tokens", "P");
  const int64_t bsz = x.t.dim(0), n = x.t.dim(1), c = x.t.dim(2);
  const int64_t p = pv.dim(0);
  if (pv.dim(1) != c || at < 0 || at > n) {
    throw std::invalid_argument("insert_tokens: P " + pv.shape_str() + " at " +
                                std::to_string(at) + " does not fit x " + x.t.shape_str());
  }
  Tensor y = Tensor::zeros({bsz, n + p, c});
  for (int64_t b = 0; b < bsz; ++b)
    for (int64_t t = 0; t < n + p; ++t) {
      const float* src;
      if (t < at) src = &x.t.data[static_cast<size_t>((b * n + t) * c)];
      else if (t < at + p) src = &pv.data[static_cast<size_t>((t - at) * c)];
      else src = &x.t.data[static_cast<size_t>((b * n + t - p) * c)];
      std::copy(src, src + c, &y.data[static_cast<size_t>((b * (n + p) + t) * c)]);
    }
  const NodeId id = tape.record("insert_tokens", {x.id, P}, {}, y.shape, label, {at, p});
  return {std::move(y), id};
}

Value remove_tokens(Tape& tape, const Value& x, int64_t at, int64_t count,
                    const std::string& label) {
  check_rank(x.t, 3, "remove_tokens", "x");
  const int64_t bsz = x.t.dim(0), n = x.t.dim(1), c = x.t.dim(2);
  if (at < 0 || count <= 0 || at + count > n) {
    throw std::invalid_argument("remove_tokens: range [" + std::to_string(at) + ", " +
                                std::to_string(at + count) + ") out of " + std::to_string(n) +
                                " tokens");
  }
  Tensor y = Tensor::zeros({bsz, n - count, c});
  for (int64_t b = 0; b < bsz; ++b)
    for (int64_t t = 0; t < n - count; ++t) {
      const int64_t src = t < at ? t : t + count;
      const float* sp = &x.t.data[static_cast<size_t>((b * n + src) * c)];
      std::copy(sp, sp + c, &y.data[static_cast<size_t>((b * (n - count) + t) * c)]);
    }
  const NodeId id = tape.record("remove_tokens", {x.id}, {}, y.shape, label, {at, count});
  return {std::move(y), id};
}

Value heads_split(Tape& tape, const Value& x, int64_t heads, const std::string& label) {
  check_rank(x.t, 3, "heads_split", "x");
  const int64_t bsz = x.t.dim(0), n = x.t.dim(1), c = x.t.dim(2);
  if (heads <= 0 || c % heads != 0) {
    throw std::invalid_argument("heads_split: " + std::to_string(heads) +
                                " heads do not divide " + std::to_string(c) + " channels");
  }
  const int64_t dh = c / heads;
  Tensor y = Tensor::zeros({bsz * heads, n, dh});
  for (int64_t b = 0; b < bsz; ++b)
    for (int64_t h = 0; h < heads; ++h)
      for (int64_t t = 0; t < n; ++t)
        for (int64_t d = 0; d < dh; ++d)
          y.data[static_cast<size_t>(((b * heads + h) * n + t) * dh + d)] =
              x.t.data[static_cast<size_t>((b * n + t) * c + h * dh + d)];
  const NodeId id =
      tape.record("heads_split", {x.id}, {}, y.shape, label, {bsz, n, heads, dh});
  return {std::move(y), id};
}

Value heads_merge(Tape& tape, const Value& x, int64_t batch, int64_t heads,
                  const std::string& label) {
  check_rank(x.t, 3, "heads_merge", "x");
  if (batch <= 0 || heads <= 0 || x.t.dim(0) != batch * heads) {
    throw std::invalid_argument("heads_merge: dim 0 of " + x.t.shape_str() + " is not " +
                                std::to_string(batch) + " x " + std::to_string(heads));
  }
  const int64_t n = x.t.dim(1), dh = x.t.dim(2);
  Tensor y = Tensor::zeros({batch, n, heads * dh});
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t h = 0; h < heads; ++h)
      for (int64_t t = 0; t < n; ++t)
        for (int64_t d = 0; d < dh; ++d)
          y.data[static_cast<size_t>((b * n + t) * heads * dh + h * dh + d)] =
              x.t.data[static_cast<size_t>(((b * heads + h) * n + t) * dh + d)];
  const NodeId id =
      tape.record("heads_merge", {x.id}, {}, y.shape, label, {batch, n, heads, dh});
  return {std::move(y), id};
}

Value qk_scores(Tape& tape, const Value& q, const Value& k, float sc, const std::string& label) {
  check_rank(q.t, 3, "qk_scores", "q");
  check_rank(k.t, 3, "qk_scores", "k");
  Tensor y = s2a::scale(matmul3_nt(q.t, k.t), sc);
  const NodeId id = tape.record("qk_scores", {q.id, k.id}, {}, y.shape, label, {}, {sc});
  return {std::move(y), id};
}

Value softmax_rows(Tape& tape, const Value& x, StoragePolicy policy, const std::string& label) {
  Tensor y = softmax_lastdim(x.t);
  SavedSlot slot;
  switch (policy) {
    case StoragePolicy::Full32: slot = SavedSlot::full32(y); break;
    case StoragePolicy::Quant4: slot = SavedSlot::quant4(quantize(y, 4)); break;
    case StoragePolicy::NoSave: slot = SavedSlot::none(); break;
    case StoragePolicy::Mask1:
      throw std::invalid_argument("softmax_rows: mask1 cannot represent probabilities");
  }
  const NodeId id = tape.record("softmax_rows", {x.id}, {std::move(slot)}, y.shape, label);
  return {std::move(y), id};
}

Value attn_apply(Tape& tape, const Value& probs, const Value& v, const std::string& label) {
  if (tape.node(probs.id).op != "softmax_rows") {
    throw std::invalid_argument("attn_apply: probs must come from softmax_rows");
  }
  Tensor y = matmul3(probs.t, v.t);
  SavedSlot slot =
      tape.node(probs.id).requires_grad ? SavedSlot::full32(v.t) : SavedSlot::none();
  const NodeId id =
      tape.record("attn_apply", {probs.id, v.id}, {std::move(slot)}, y.shape, label);
  return {std::move(y), id};
}

Value gelu(Tape& tape, const Value& x, StoragePolicy policy, const std::string& label) {
  Tensor y = gelu_eval(x.t);
  SavedSlot slot;
  switch (policy) {
    case StoragePolicy::Full32: slot = SavedSlot::full32(x.t); break;
    case StoragePolicy::Quant4: slot = SavedSlot::quant4(gelu_saved(x.t)); break;
    case StoragePolicy::NoSave: slot = SavedSlot::none(); break;
    case StoragePolicy::Mask1:
      throw std::invalid_argument("gelu: mask1 cannot reconstruct the derivative");
  }
  const NodeId id = tape.record("gelu", {x.id}, {std::move(slot)}, y.shape, label);
  return {std::move(y), id};
}

Value relu(Tape& tape, const Value& x, StoragePolicy policy, const std::string& label) {
  Tensor y = x.t;
  for (float& v : y.data) v = v > 0.f ? v : 0.f;
  SavedSlot slot;
  switch (policy) {
    case StoragePolicy::Full32: slot = SavedSlot::full32(x.t); break;
    case StoragePolicy::Mask1: slot = SavedSlot::mask1(relu_mask(x.t)); break;
    case StoragePolicy::NoSave: slot = SavedSlot::none(); break;
    case StoragePolicy::Quant4:
      throw std::invalid_argument("relu: quant4 save is wasteful, use mask1");
  }
  const NodeId id = tape.record("relu", {x.id}, {std::move(slot)}, y.shape, label);
  return {std::move(y), id};
}

Value cap(Tape& tape, const Value& x, int64_t r, const std::string& label) {
  const int64_t c = x.t.shape.back();
  if (r <= 0 || c % r != 0) {
    throw std::invalid_argument("cap: pool factor " + std::to_string(r) + " does not divide " +
                                std::to_string(c) + " channels");
  }
  std::vector<int64_t> out_shape = x.t.shape;
  out_shape.back() = c / r;
  const int64_t cr = c / r;
  const int64_t lead = x.t.size() / c;
  Tensor y = Tensor::zeros(out_shape);
  for (int64_t l = 0; l < lead; ++l)
    for (int64_t k = 0; k < cr; ++k) {
      double acc = 0.0;
      for (int64_t j = 0; j < r; ++j)
        acc += x.t.data[static_cast<size_t>(l * c + k * r + j)];
      y.data[static_cast<size_t>(l * cr + k)] = static_cast<float>(acc / static_cast<double>(r));
    }
  const NodeId id = tape.record("cap", {x.id}, {}, y.shape, label, {r});
  return {std::move(y), id};
}

Value dwconv3x3(Tape& tape, const Value& x, NodeId K, NodeId b, const std::string& label) {
  const Tensor& kv = leaf_tensor(tape, K, "dwconv3x3");
  const Tensor& bv = leaf_tensor(tape, b, "dwconv3x3");
  check_rank(x.t, 4, "dwconv3x3", "x");
  const int64_t bsz = x.t.dim(0), h = x.t.dim(1), w = x.t.dim(2), c = x.t.dim(3);
  Tensor y = Tensor::zeros(x.t.shape);
  const size_t plane = static_cast<size_t>(h * w * c);
  for (int64_t bi = 0; bi < bsz; ++bi) {
    Tensor slice{{h, w, c},
                 std::vector<float>(x.t.data.begin() + static_cast<int64_t>(plane) * bi,
                                    x.t.data.begin() + static_cast<int64_t>(plane) * (bi + 1))};
    Tensor out = depthwise_conv(slice, kv, bv);
    std::copy(out.data.begin(), out.data.end(), y.data.begin() + static_cast<int64_t>(plane) * bi);
  }
  SavedSlot slot =
      tape.node(K).requires_grad ? SavedSlot::full32(x.t) : SavedSlot::none();
  const NodeId id =
      tape.record("dwconv", {x.id, K, b}, {std::move(slot)}, y.shape, label, {bsz, h, w, c});
  return {std::move(y), id};
}

Value affine(Tape& tape, const Value& x, NodeId g, NodeId b, const std::string& label) {
  const Tensor& gv = leaf_tensor(tape, g, "affine");
  const Tensor& bv = leaf_tensor(tape, b, "affine");
  const int64_t c = x.t.shape.back();
  if (gv.size() != c || bv.size() != c) {
    throw std::invalid_argument("affine: params " + gv.shape_str() + "/" + bv.shape_str() +
                                " do not match " + std::to_string(c) + " channels");
  }
  const int64_t lead = x.t.size() / c;
  Tensor y = Tensor::zeros(x.t.shape);
  for (int64_t l = 0; l < lead; ++l)
    for (int64_t j = 0; j < c; ++j)
      y.data[static_cast<size_t>(l * c + j)] =
          gv.data[static_cast<size_t>(j)] * x.t.data[static_cast<size_t>(l * c + j)] +
          bv.data[static_cast<size_t>(j)];
  SavedSlot slot =
      tape.node(g).requires_grad ? SavedSlot::full32(x.t) : SavedSlot::none();
  const NodeId id = tape.record("affine", {x.id, g, b}, {std::move(slot)}, y.shape, label);
  return {std::move(y), id};
}

Value mean_tokens(Tape& tape, const Value& x, const std::string& label) {
  check_rank(x.t, 3, "mean_tokens", "x");
  const int64_t bsz = x.t.dim(0), n = x.t.dim(1), c = x.t.dim(2);
  Tensor y = Tensor::zeros({bsz, c});
  for (int64_t b = 0; b < bsz; ++b)
    for (int64_t j = 0; j < c; ++j) {
      double acc = 0.0;
      for (int64_t t = 0; t < n; ++t) acc += x.t.data[static_cast<size_t>((b * n + t) * c + j)];
      y.data[static_cast<size_t>(b * c + j)] = static_cast<float>(acc / static_cast<double>(n));
    }
  const NodeId id = tape.record("mean_tokens", {x.id}, {}, y.shape, label);
  return {std::move(y), id};
}

Value token_at(Tape& tape, const Value& x, int64_t idx, const std::string& label) {
  check_rank(x.t, 3, "token_at", "x");
  const int64_t bsz = x.t.dim(0), n = x.t.dim(1), c = x.t.dim(2);
  if (idx < 0 || idx >= n) {
    throw std::invalid_argument("token_at: index " + std::to_string(idx) + " out of " +
                                std::to_string(n) + " tokens");
  }
  Tensor y = Tensor::zeros({bsz, c});
  for (int64_t b = 0; b < bsz; ++b)
    for (int64_t j = 0; j < c; ++j)
      y.data[static_cast<size_t>(b * c + j)] = x.t.data[static_cast<size_t>((b * n + idx) * c + j)];
  const NodeId id = tape.record("token_at", {x.id}, {}, y.shape, label, {idx});
  return {std::move(y), id};
}

Value wsum(Tape& tape, const Value& x, Tensor R, const std::string& label) {
  if (!same_shape(x.t, R)) {
    throw std::invalid_argument("wsum: projection " + R.shape_str() + " does not match " +
                                x.t.shape_str());
  }
  const double acc = dot_all(x.t, R);
  const NodeId rid = tape.input(std::move(R), label + ".proj");
  Tensor y{{1}, {static_cast<float>(acc)}};
  const NodeId id = tape.record("wsum", {x.id, rid}, {}, y.shape, label);
  return {std::move(y), id};
}

Value ce_head(Tape& tape, const Value& feat, NodeId W, NodeId b,
              const std::vector<int>& labels, const std::string& label) {
  const Tensor& wv = leaf_tensor(tape, W, "ce_head");
  const Tensor& bv = leaf_tensor(tape, b, "ce_head");
  check_rank(feat.t, 2, "ce_head", "feat");
  check_rank(wv, 2, "ce_head", "W");
  const int64_t bsz = feat.t.dim(0);
  const int64_t k = wv.dim(1);
  if (static_cast<int64_t>(labels.size()) != bsz) {
    throw std::invalid_argument("ce_head: " + std::to_string(labels.size()) + " labels for " +
                                std::to_string(bsz) + " rows");
  }
  Tensor logits = pointwise_conv(feat.t, wv, bv);
  Tensor probs = softmax_lastdim(logits);
  double acc = 0.0;
  std::vector<int64_t> iattr;
  iattr.reserve(labels.size());
  for (int64_t i = 0; i < bsz; ++i) {
    const int y = labels[static_cast<size_t>(i)];
    if (y < 0 || y >= k) {
      throw std::invalid_argument("ce_head: label " + std::to_string(y) + " out of " +
                                  std::to_string(k) + " classes at row " + std::to_string(i));
    }
    const double p =
        std::max(static_cast<double>(probs.data[static_cast<size_t>(i * k + y)]), 1e-45);
    acc -= std::log(p);
    iattr.push_back(y);
  }
  const bool any_grad = tape.node(feat.id).requires_grad || tape.node(W).requires_grad ||
                        tape.node(b).requires_grad;
  SavedSlot s0 = tape.node(W).requires_grad ? SavedSlot::full32(feat.t) : SavedSlot::none();
  SavedSlot s1 = any_grad ? SavedSlot::full32(probs) : SavedSlot::none();
  Tensor y{{1}, {static_cast<float>(acc / static_cast<double>(bsz))}};
  const NodeId id = tape.record("ce_head", {feat.id, W, b}, {std::move(s0), std::move(s1)},
                                y.shape, label, std::move(iattr));
  return {std::move(y), id};
}

}  // namespace ops
}  // namespace s2a
