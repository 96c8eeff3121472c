#pragma once

// Differentiable op builders. Each function runs the forward computation
// eagerly, records a node on the tape with whatever the backward pass will
// need (as dictated by the node's storage policy), and returns the result
// paired with its node id. Forward values flow through the caller; the tape
// keeps only structure and saved slots.

#include <string>
#include <vector>

#include "s2a/quant.hpp"
#include "s2a/tape.hpp"
#include "s2a/tensor.hpp"

namespace s2a::ops {

struct Value {
  Tensor t;
  NodeId id = -1;
};

// Wrap a tensor as a graph input (no gradient).
Value input(Tape& tape, Tensor v, const std::string& label);

// View of an existing leaf node (param or input) as a Value.
Value leaf(Tape& tape, NodeId id);

// y = x @ W + b. x: [..., K], W: [K, M], b: [M].
// Saves x iff W is trainable; b alone never forces a save.
Value linear(Tape& tape, const Value& x, NodeId W, NodeId b, const std::string& label);

// General 2-d product a @ b. Each operand is saved only when the other side
// needs it for its gradient and the operand is not already a leaf.
Value matmul(Tape& tape, const Value& a, const Value& b, const std::string& label);

Value add(Tape& tape, const Value& a, const Value& b, const std::string& label);

// x + rows broadcast over leading dims. rows spans the trailing dims of x.
Value add_rows_bcast(Tape& tape, const Value& x, const Value& rows, const std::string& label);

Value scale(Tape& tape, const Value& x, float c, const std::string& label);

// Identity forward, blocks gradient flow.
Value stop_grad(Tape& tape, const Value& x, const std::string& label);

Value reshape(Tape& tape, const Value& x, std::vector<int64_t> new_shape,
              const std::string& label);

// Last-dim column slice [from, to).
Value slice_cols(Tape& tape, const Value& x, int64_t from, int64_t to, const std::string& label);

// Concatenate along the last dim.
Value concat_cols(Tape& tape, const Value& a, const Value& b, const std::string& label);

// Insert the rows of param P ([p, C]) into x ([B, N, C]) at token index `at`,
// yielding [B, N + p, C]. Used for the class token and for prompts.
Value insert_tokens(Tape& tape, const Value& x, NodeId P, int64_t at, const std::string& label);

// Drop `count` tokens starting at `at`.
Value remove_tokens(Tape& tape, const Value& x, int64_t at, int64_t count,
                    const std::string& label);

// [B, N, C] -> [B*H, N, C/H] and back.
Value heads_split(Tape& tape, const Value& x, int64_t heads, const std::string& label);
Value heads_merge(Tape& tape, const Value& x, int64_t batch, int64_t heads,
                  const std::string& label);

// scores = (q @ k^T) * sc on detached q, k ([B*H, N, d]). This op has no
// backward; recording it with grad-requiring inputs is an error.
Value qk_scores(Tape& tape, const Value& q, const Value& k, float sc, const std::string& label);

// Row softmax over the last dim. The node saves its own output y under the
// given policy; downstream attn_apply reads that same slot for its v-gradient.
Value softmax_rows(Tape& tape, const Value& x, StoragePolicy policy, const std::string& label);

// ctxv = probs @ v, batched over the first dim. probs must be a softmax_rows
// node. Saves v iff probs requires grad (it never does in the stock models).
Value attn_apply(Tape& tape, const Value& probs, const Value& v, const std::string& label);

Value gelu(Tape& tape, const Value& x, StoragePolicy policy, const std::string& label);
Value relu(Tape& tape, const Value& x, StoragePolicy policy, const std::string& label);

// Channel average pooling: [..., C] -> [..., C/r], mean over channel groups.
Value cap(Tape& tape, const Value& x, int64_t r, const std::string& label);

// Depthwise 3x3 conv, zero padding 1, stride 1. x: [B, H, W, C], K: [3, 3, C],
// b: [C]. Saves x iff the kernel is trainable.
Value dwconv3x3(Tape& tape, const Value& x, NodeId K, NodeId b, const std::string& label);

// Per-channel affine y = g (*) x + b over the last dim. Saves x iff g is
// trainable.
Value affine(Tape& tape, const Value& x, NodeId g, NodeId b, const std::string& label);

// [B, N, C] -> [B, C], mean over tokens.
Value mean_tokens(Tape& tape, const Value& x, const std::string& label);

// [B, N, C] -> [B, C], token at a fixed index.
Value token_at(Tape& tape, const Value& x, int64_t idx, const std::string& label);

// Scalar loss L = sum(x (*) R) against a fixed projection R. Handy for
// gradient checks of intermediate ops.
Value wsum(Tape& tape, const Value& x, Tensor R, const std::string& label);

// Fused classifier head + mean cross-entropy. feat: [B, D], W: [D, K], b: [K],
// labels in [0, K). Saves feat and the softmax probabilities.
Value ce_head(Tape& tape, const Value& feat, NodeId W, NodeId b,
              const std::vector<int>& labels, const std::string& label);

}  // namespace s2a::ops
