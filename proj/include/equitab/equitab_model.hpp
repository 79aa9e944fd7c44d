#pragma once

// The target-equivariant architecture: a shared-vector component encoder
// with prediction tokens, a backbone alternating attention across component
// slots and across datapoints, and a non-parametric decoder whose attention
// values are the raw training targets. Nothing in the parameterization
// depends on the episode's class count, so any q runs on any checkpoint.

#include <string>
#include <vector>

#include "equitab/model_common.hpp"

namespace equitab {

template <class S>
struct EquiParams {
  Tensor<S> u;       // (p_max, d): covariate token = pad(x) . u
  Tensor<S> v;       // (d): component embedding, shared across all q slots
  Tensor<S> w_pred;  // (d): prediction token standing in for test targets
  std::vector<AttnLayer<S>> layers;
  Tensor<S> dec_w1;  // (1, decoder_hidden)
  Tensor<S> dec_b1;  // (decoder_hidden)
  Tensor<S> dec_w2;  // (decoder_hidden, 1)
  Tensor<S> dec_b2;  // (1)

  template <class F>
  void visit(F&& f) {
    f("enc.u", u);
    f("enc.v", v);
    f("enc.w_pred", w_pred);
    for (std::size_t i = 0; i < layers.size(); ++i)
      layers[i].visit("layer" + std::to_string(i), f);
    f("dec.w1", dec_w1);
    f("dec.b1", dec_b1);
    f("dec.w2", dec_w2);
    f("dec.b2", dec_b2);
  }
};

template <class S>
EquiParams<S> init_equi_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(mix_seed(seed, seed_tag::init));
  EquiParams<S> p;
  p.u = detail::fan_in_uniform<S>({cfg.p_max, cfg.d}, cfg.p_max, rng);
  p.v = detail::gaussian<S>({cfg.d}, 0.02, rng);
  p.w_pred = detail::gaussian<S>({cfg.d}, 0.02, rng);
  for (Index i = 0; i < cfg.n_layers; ++i)
    p.layers.push_back(init_attn_layer<S>(cfg, rng));
  p.dec_w1 = detail::fan_in_uniform<S>({1, cfg.decoder_hidden}, 1, rng);
  p.dec_b1 = Tensor<S>::zeros({cfg.decoder_hidden});
  p.dec_w2 = detail::fan_in_uniform<S>({cfg.decoder_hidden, 1}, cfg.decoder_hidden, rng);
  p.dec_b2 = Tensor<S>::zeros({1});
  return p;
}

// Builds the (B, N+M, q+1, d) token grid: slot 0 holds the covariate token
// pad(x) . u; train rows carry y_j * v in target slot j; test rows carry the
// prediction token in every target slot.
template <class S>
Tensor<S> encode(const EpisodeBatch<S>& batch, const ModelConfig& cfg,
                 EquiParams<S>& params) {
  const Index B = batch.b(), N = batch.n(), M = batch.m(), q = batch.q();
  Tensor<S> xall = concat<S>({batch.X, batch.Xstar}, 1);  // (B,T,p)
  Tensor<S> cov = matmul(pad_covariates(xall, cfg.p_max), params.u);
  cov = reshape(cov, {B, N + M, 1, cfg.d});
  Tensor<S> vrow = reshape(params.v, {1, 1, 1, cfg.d});
  Tensor<S> train_tt = mul(reshape(batch.Y, {B, N, q, 1}), vrow);  // (B,N,q,d)
  Tensor<S> test_tt = broadcast_to(reshape(params.w_pred, {1, 1, 1, cfg.d}),
                                   {B, M, q, cfg.d});
  Tensor<S> tt = concat<S>({train_tt, test_tt}, 1);  // (B,T,q,d)
  return concat<S>({cov, tt}, 2);                    // (B,T,q+1,d)
}

// Attention within each sample across its q+1 component slots.
template <class S>
Tensor<S> attend_components(const Tensor<S>& grid, const ModelConfig& cfg,
                            AttnLayer<S>& layer) {
  const Index B = grid.extent(0), T = grid.extent(1), s = grid.extent(2),
              d = grid.extent(3);
  Tensor<S> mask = component_mask<S>(s);
  Tensor<S> x = reshape(grid, {B * T, s, d});
  Tensor<S> y = attention_block(x, layer, cfg.n_heads, &mask);
  return reshape(y, {B, T, s, d});
}

// Attention across the N+M samples, independently per component slot; every
// row attends to the N training rows only.
template <class S>
Tensor<S> attend_datapoints(const Tensor<S>& grid, const ModelConfig& cfg,
                            AttnLayer<S>& layer, Index n_train) {
  const Index B = grid.extent(0), T = grid.extent(1), s = grid.extent(2),
              d = grid.extent(3);
  if (n_train < 1)
    throw EmptyContextError("attend_datapoints: episode has no training rows");
  if (n_train > T)
    throw ShapeError("attend_datapoints: n_train exceeds the grid rows");
  Tensor<S> x = reshape(transpose(grid, 1, 2), {B * s, T, d});
  Tensor<S> y = attention_block<S>(x, layer, cfg.n_heads, nullptr, n_train);
  return transpose(reshape(y, {B, s, T, d}), 1, 2);
}

// Alternates component attention and datapoint attention, component first.
template <class S>
Tensor<S> backbone(Tensor<S> grid, const ModelConfig& cfg,
                   EquiParams<S>& params, Index n_train) {
  for (Index i = 0; i < cfg.n_layers; ++i) {
    AttnLayer<S>& layer = params.layers[static_cast<std::size_t>(i)];
    grid = (i % 2 == 0) ? attend_components(grid, cfg, layer)
                        : attend_datapoints(grid, cfg, layer, n_train);
  }
  return grid;
}

// Non-parametric decoder: softmax similarity between each test row's full
// token block and every train row's block (scale sqrt((1+q)d)), values are
// the training targets; then a shared scalar MLP correction per class slot.
template <class S>
Tensor<S> decode(const Tensor<S>& grid, const Tensor<S>& train_targets,
                 const ModelConfig& cfg, EquiParams<S>& params) {
  const Index B = grid.extent(0), T = grid.extent(1), s = grid.extent(2),
              d = grid.extent(3);
  const Index N = train_targets.extent(1);
  const Index M = T - N;
  const Index q = s - 1;
  Tensor<S> keys = reshape(slice(grid, 1, 0, N), {B, N, s * d});
  Tensor<S> queries = reshape(slice(grid, 1, N, M), {B, M, s * d});
  Tensor<S> scores =
      mul_scalar(matmul(queries, transpose(keys, 1, 2)),
                 static_cast<S>(1.0 / std::sqrt(static_cast<double>(s * d))));
  Tensor<S> attn = softmax(scores);                 // (B,M,N)
  Tensor<S> ytil = matmul(attn, train_targets);     // (B,M,q)
  Tensor<S> h = gelu(add(matmul(reshape(ytil, {B, M, q, 1}), params.dec_w1),
                         params.dec_b1));
  Tensor<S> corr = reshape(add(matmul(h, params.dec_w2), params.dec_b2),
                           {B, M, q});
  return add(ytil, corr);  // logits; training applies log-softmax over q
}

template <class S>
Tensor<S> equitab_logits(const EpisodeBatch<S>& batch, const ModelConfig& cfg,
                         EquiParams<S>& params) {
  Tensor<S> grid = encode(batch, cfg, params);
  grid = backbone(grid, cfg, params, batch.n());
  return decode(grid, batch.Y, cfg, params);
}

// Class probability rows for every test point, shape (B, M, q).
template <class S>
Tensor<S> equitab_forward(const EpisodeBatch<S>& batch, const ModelConfig& cfg,
                          EquiParams<S>& params) {
  return softmax(equitab_logits(batch, cfg, params).detached());
}

template <class S>
Tensor<S> equitab_forward(const Episode<S>& ep, const ModelConfig& cfg,
                          EquiParams<S>& params) {
  EpisodeBatch<S> batch = EpisodeBatch<S>::of(ep);
  Tensor<S> probs = equitab_forward(batch, cfg, params);
  return detail::reshape_value(probs, {ep.m(), ep.q()});
}

}  // namespace equitab
