#include "seqattr/layers.hpp"

#include <cmath>

namespace seqattr {

namespace {
double fan_in_bound(int fan_in) { return std::sqrt(1.0 / fan_in); }
}  // namespace

AttentionParams AttentionParams::create(int d_model, ParamStore& params,
                                        const std::string& prefix, Rng& rng) {
  const double b = fan_in_bound(d_model);
  AttentionParams p;
  p.wq = params.add(prefix + ".wq", Tensor::uniform({d_model, d_model}, rng, b));
  p.bq = params.add(prefix + ".bq", Tensor::zeros({d_model}));
  p.wk = params.add(prefix + ".wk", Tensor::uniform({d_model, d_model}, rng, b));
  p.bk = params.add(prefix + ".bk", Tensor::zeros({d_model}));
  p.wv = params.add(prefix + ".wv", Tensor::uniform({d_model, d_model}, rng, b));
  p.bv = params.add(prefix + ".bv", Tensor::zeros({d_model}));
  p.wo = params.add(prefix + ".wo", Tensor::uniform({d_model, d_model}, rng, b));
  p.bo = params.add(prefix + ".bo", Tensor::zeros({d_model}));
  return p;
}

AttentionParams AttentionParams::bind(const ParamStore& params,
                                      const std::string& prefix) {
  AttentionParams p;
  p.wq = params.get(prefix + ".wq");
  p.bq = params.get(prefix + ".bq");
  p.wk = params.get(prefix + ".wk");
  p.bk = params.get(prefix + ".bk");
  p.wv = params.get(prefix + ".wv");
  p.bv = params.get(prefix + ".bv");
  p.wo = params.get(prefix + ".wo");
  p.bo = params.get(prefix + ".bo");
  return p;
}

LayerNormParams LayerNormParams::create(int d_model, ParamStore& params,
                                        const std::string& prefix) {
  LayerNormParams p;
  p.gain = params.add(prefix + ".g", Tensor::full({d_model}, 1.0));
  p.bias = params.add(prefix + ".b", Tensor::zeros({d_model}));
  return p;
}

LayerNormParams LayerNormParams::bind(const ParamStore& params,
                                      const std::string& prefix) {
  LayerNormParams p;
  p.gain = params.get(prefix + ".g");
  p.bias = params.get(prefix + ".b");
  return p;
}

FfnParams FfnParams::create(int d_model, int d_ff, ParamStore& params,
                            const std::string& prefix, Rng& rng) {
  FfnParams p;
  p.w1 = params.add(prefix + ".w1",
                    Tensor::uniform({d_model, d_ff}, rng, fan_in_bound(d_model)));
  p.b1 = params.add(prefix + ".b1", Tensor::zeros({d_ff}));
  p.w2 = params.add(prefix + ".w2",
                    Tensor::uniform({d_ff, d_model}, rng, fan_in_bound(d_ff)));
  p.b2 = params.add(prefix + ".b2", Tensor::zeros({d_model}));
  return p;
}

FfnParams FfnParams::bind(const ParamStore& params, const std::string& prefix) {
  FfnParams p;
  p.w1 = params.get(prefix + ".w1");
  p.b1 = params.get(prefix + ".b1");
  p.w2 = params.get(prefix + ".w2");
  p.b2 = params.get(prefix + ".b2");
  return p;
}

MhaResult multi_head_attention(const Tensor& xq, const Tensor& xkv,
                               const AttentionParams& p, int heads,
                               const MaskMatrix* mask) {
  const int d = p.wq.dim(0);
  if (d % heads != 0)
    throw ConfigError("multi_head_attention: d_model " + std::to_string(d) +
                      " not divisible by heads " + std::to_string(heads));
  const int dh = d / heads;
  Tensor q = add_rowvec(matmul(xq, p.wq), p.bq);
  Tensor k = add_rowvec(matmul(xkv, p.wk), p.bk);
  Tensor v = add_rowvec(matmul(xkv, p.wv), p.bv);

  const int lq = q.dim(0), lk = k.dim(0);
  std::vector<Tensor> head_outs;
  head_outs.reserve(static_cast<size_t>(heads));
  std::vector<double> attn_sum(static_cast<size_t>(lq) * lk, 0.0);
  for (int h = 0; h < heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, dh);
    Tensor kh = slice_cols(k, h * dh, dh);
    Tensor vh = slice_cols(v, h * dh, dh);
    AttentionResult r = mask ? self_attention(qh, kh, vh, *mask)
                             : cross_attention(qh, kh, vh);
    head_outs.push_back(r.output);
    for (size_t i = 0; i < attn_sum.size(); ++i)
      attn_sum[i] += r.weights.data()[i];
  }
  for (auto& a : attn_sum) a /= heads;

  MhaResult out;
  out.output = add_rowvec(matmul(concat_cols(head_outs), p.wo), p.bo);
  out.attn_mean = Tensor::from({lq, lk}, std::move(attn_sum));
  return out;
}

Tensor ffn_forward(const Tensor& x, const FfnParams& p) {
  Tensor h = gelu(add_rowvec(matmul(x, p.w1), p.b1));
  return add_rowvec(matmul(h, p.w2), p.b2);
}

Tensor residual_norm(const Tensor& x, const Tensor& sub,
                     const LayerNormParams& ln) {
  return layer_norm(add(x, sub), ln.gain, ln.bias);
}

}  // namespace seqattr
