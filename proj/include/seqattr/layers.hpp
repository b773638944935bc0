#pragma once

#include <string>

#include "seqattr/tensor.hpp"

namespace seqattr {

// Parameter bundles for one transformer block. `create` registers freshly
// initialised tensors in declaration order; `bind` looks the same names up
// again after a checkpoint load.

struct AttentionParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  static AttentionParams create(int d_model, ParamStore& params,
                                const std::string& prefix, Rng& rng);
  static AttentionParams bind(const ParamStore& params,
                              const std::string& prefix);
};

struct LayerNormParams {
  Tensor gain, bias;
  static LayerNormParams create(int d_model, ParamStore& params,
                                const std::string& prefix);
  static LayerNormParams bind(const ParamStore& params,
                              const std::string& prefix);
};

struct FfnParams {
  Tensor w1, b1, w2, b2;
  static FfnParams create(int d_model, int d_ff, ParamStore& params,
                          const std::string& prefix, Rng& rng);
  static FfnParams bind(const ParamStore& params, const std::string& prefix);
};

struct MhaResult {
  Tensor output;     // (Lq x d)
  Tensor attn_mean;  // (Lq x Lk) head-averaged weights, detached
};

// Multi-head attention with per-head width d/heads. Queries come from xq,
// keys/values from xkv; a mask (square, xq == xkv length) applies to the
// self-attention case, nullptr means unmasked cross-attention.
MhaResult multi_head_attention(const Tensor& xq, const Tensor& xkv,
                               const AttentionParams& p, int heads,
                               const MaskMatrix* mask);

Tensor ffn_forward(const Tensor& x, const FfnParams& p);

Tensor residual_norm(const Tensor& x, const Tensor& sub,
                     const LayerNormParams& ln);

}  // namespace seqattr
