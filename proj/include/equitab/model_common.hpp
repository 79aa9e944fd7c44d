#pragma once

// Pieces shared by both architectures: configuration, parameter init, the
// residual attention + MLP block, attention masks, covariate padding.

#include <cmath>
#include <string>
#include <vector>

#include "equitab/episode.hpp"
#include "equitab/ops.hpp"
#include "equitab/rng.hpp"

namespace equitab {

struct ModelConfig {
  Index d = 64;
  Index n_layers = 6;  // even: alternation pairs
  Index n_heads = 4;
  Index hidden = 128;
  Index p_max = 16;
  Index decoder_hidden = 32;

  void validate() const {
    if (d < 1 || n_layers < 2 || n_heads < 1 || hidden < 1 || p_max < 1 ||
        decoder_hidden < 1)
      throw ConfigError("model config fields must be positive");
    if (d % n_heads != 0)
      throw ConfigError("d=" + std::to_string(d) + " must be divisible by n_heads=" +
                        std::to_string(n_heads));
    if (n_layers % 2 != 0)
      throw ConfigError("n_layers=" + std::to_string(n_layers) + " must be even");
  }
};

template <class S>
struct AttnLayer {
  Tensor<S> wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor<S> ln1_g, ln1_b;
  Tensor<S> w1, b1, w2, b2;
  Tensor<S> ln2_g, ln2_b;

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".wq", wq);
    f(prefix + ".bq", bq);
    f(prefix + ".wk", wk);
    f(prefix + ".bk", bk);
    f(prefix + ".wv", wv);
    f(prefix + ".bv", bv);
    f(prefix + ".wo", wo);
    f(prefix + ".bo", bo);
    f(prefix + ".ln1_g", ln1_g);
    f(prefix + ".ln1_b", ln1_b);
    f(prefix + ".w1", w1);
    f(prefix + ".b1", b1);
    f(prefix + ".w2", w2);
    f(prefix + ".b2", b2);
    f(prefix + ".ln2_g", ln2_g);
    f(prefix + ".ln2_b", ln2_b);
  }
};

namespace detail {

// Variance-scaled uniform fan-in init: U(-a, a) with a = sqrt(3 / fan_in).
template <class S>
Tensor<S> fan_in_uniform(Shape shape, Index fan_in, Rng& rng) {
  const double a = std::sqrt(3.0 / static_cast<double>(fan_in));
  Tensor<S> t = Tensor<S>::zeros(std::move(shape));
  for (Index i = 0; i < t.numel(); ++i)
    t.at(i) = static_cast<S>(rng.uniform(-a, a));
  return t;
}

template <class S>
Tensor<S> gaussian(Shape shape, double stddev, Rng& rng) {
  Tensor<S> t = Tensor<S>::zeros(std::move(shape));
  for (Index i = 0; i < t.numel(); ++i)
    t.at(i) = static_cast<S>(rng.normal(0.0, stddev));
  return t;
}

}  // namespace detail

template <class S>
AttnLayer<S> init_attn_layer(const ModelConfig& cfg, Rng& rng) {
  AttnLayer<S> l;
  const Index d = cfg.d, h = cfg.hidden;
  l.wq = detail::fan_in_uniform<S>({d, d}, d, rng);
  l.bq = Tensor<S>::zeros({d});
  l.wk = detail::fan_in_uniform<S>({d, d}, d, rng);
  l.bk = Tensor<S>::zeros({d});
  l.wv = detail::fan_in_uniform<S>({d, d}, d, rng);
  l.bv = Tensor<S>::zeros({d});
  l.wo = detail::fan_in_uniform<S>({d, d}, d, rng);
  l.bo = Tensor<S>::zeros({d});
  l.ln1_g = Tensor<S>::full({d}, S(1));
  l.ln1_b = Tensor<S>::zeros({d});
  l.w1 = detail::fan_in_uniform<S>({d, h}, d, rng);
  l.b1 = Tensor<S>::zeros({h});
  l.w2 = detail::fan_in_uniform<S>({h, d}, h, rng);
  l.b2 = Tensor<S>::zeros({d});
  l.ln2_g = Tensor<S>::full({d}, S(1));
  l.ln2_b = Tensor<S>::zeros({d});
  return l;
}

// Mask for attention across the q+1 component slots of one sample: slot 0
// (the covariate token) attends to every slot, target slots attend only to
// the covariate token.
template <class S>
Tensor<S> component_mask(Index L) {
  Tensor<S> m = Tensor<S>::zeros({L, L});
  for (Index j = 0; j < L; ++j) m(0, j) = S(1);
  for (Index i = 1; i < L; ++i) m(i, 0) = S(1);
  return m;
}

// Zero-pads the trailing covariate axis to p_max and rescales by p_max / p.
template <class S>
Tensor<S> pad_covariates(const Tensor<S>& x, Index p_max) {
  const Index p = x.shape().back();
  if (p > p_max)
    throw CapacityError("episode has p=" + std::to_string(p) +
                        " covariates but the model was built with p_max=" +
                        std::to_string(p_max));
  Tensor<S> scaled = mul_scalar(x, static_cast<S>(static_cast<double>(p_max) /
                                                  static_cast<double>(p)));
  if (p == p_max) return scaled;
  Shape zshape = x.shape();
  zshape.back() = p_max - p;
  return concat<S>({scaled, Tensor<S>::zeros(zshape)},
                   static_cast<int>(x.rank()) - 1);
}

// One residual multi-head attention + residual MLP block with post-norm,
// applied to (T, L, d): T independent sequences of L tokens.
//
// Admissible keys come in two forms:
//   - `mask` (L, L) with rows as queries, for irregular patterns;
//   - `kv_rows` > 0: keys/values are tokens [0, kv_rows) for every query,
//     which expresses "attend to training rows only" without materializing
//     an (L, L) mask or full-width score tensors.
template <class S>
Tensor<S> attention_block(const Tensor<S>& x, AttnLayer<S>& layer,
                          Index n_heads, const Tensor<S>* mask,
                          Index kv_rows = 0) {
  const Index T = x.extent(0), L = x.extent(1), d = x.extent(2);
  const Index dh = d / n_heads;
  const Index kl = kv_rows > 0 ? kv_rows : L;
  auto split_heads = [&](const Tensor<S>& t, Index len) {
    return transpose(reshape(t, {T, len, n_heads, dh}), 1, 2);  // (T,H,len,dh)
  };
  Tensor<S> kv_src = kl < L ? slice(x, 1, 0, kl) : x;
  Tensor<S> q = mul_scalar(add(matmul(x, layer.wq), layer.bq),
                           static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh))));
  Tensor<S> qh = split_heads(q, L);
  Tensor<S> kh = split_heads(add(matmul(kv_src, layer.wk), layer.bk), kl);
  Tensor<S> vh = split_heads(add(matmul(kv_src, layer.wv), layer.bv), kl);
  Tensor<S> scores = matmul(qh, transpose(kh, 2, 3));  // (T,H,L,kl)
  Tensor<S> w = mask ? softmax_masked(scores, *mask) : softmax(scores);
  Tensor<S> ctx = reshape(transpose(matmul(w, vh), 1, 2), {T, L, d});
  Tensor<S> attn_out = add(matmul(ctx, layer.wo), layer.bo);
  Tensor<S> y = layer_norm(add(x, attn_out), layer.ln1_g, layer.ln1_b);
  Tensor<S> mlp = add(matmul(gelu(add(matmul(y, layer.w1), layer.b1)), layer.w2),
                      layer.b2);
  return layer_norm(add(y, mlp), layer.ln2_g, layer.ln2_b);
}

}  // namespace equitab
