#pragma once

// Fixed-width baseline: targets are embedded through a full (q_max, d)
// matrix, the backbone is row attention only, and the decoder MLP emits
// exactly q_max logits. The model is not target-equivariant; the mitigation
// machinery lives here too: permutation ensembling and ECOC-style
// aggregation for class counts above q_max.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "equitab/model_common.hpp"

namespace equitab {

struct BaselineConfig {
  ModelConfig core;
  Index q_max = 5;

  void validate() const {
    core.validate();
    if (q_max < 2) throw ConfigError("baseline q_max must be >= 2");
  }
};

template <class S>
struct BaselineParams {
  Tensor<S> u;  // (p_max, d)
  Tensor<S> v;  // (q_max, d): per-slot columns make this non-equivariant
  std::vector<AttnLayer<S>> layers;
  Tensor<S> dec_w1;  // (d, hidden)
  Tensor<S> dec_b1;  // (hidden)
  Tensor<S> dec_w2;  // (hidden, q_max)
  Tensor<S> dec_b2;  // (q_max)

  template <class F>
  void visit(F&& f) {
    f("enc.u", u);
    f("enc.v", v);
    for (std::size_t i = 0; i < layers.size(); ++i)
      layers[i].visit("layer" + std::to_string(i), f);
    f("dec.w1", dec_w1);
    f("dec.b1", dec_b1);
    f("dec.w2", dec_w2);
    f("dec.b2", dec_b2);
  }
};

template <class S>
BaselineParams<S> init_baseline_params(const BaselineConfig& cfg,
                                       std::uint64_t seed) {
  cfg.validate();
  Rng rng(mix_seed(seed, seed_tag::init));
  const ModelConfig& c = cfg.core;
  BaselineParams<S> p;
  p.u = detail::fan_in_uniform<S>({c.p_max, c.d}, c.p_max, rng);
  p.v = detail::fan_in_uniform<S>({cfg.q_max, c.d}, cfg.q_max, rng);
  for (Index i = 0; i < c.n_layers; ++i)
    p.layers.push_back(init_attn_layer<S>(c, rng));
  p.dec_w1 = detail::fan_in_uniform<S>({c.d, c.hidden}, c.d, rng);
  p.dec_b1 = Tensor<S>::zeros({c.hidden});
  p.dec_w2 = detail::fan_in_uniform<S>({c.hidden, cfg.q_max}, c.hidden, rng);
  p.dec_b2 = Tensor<S>::zeros({cfg.q_max});
  return p;
}

// Logits truncated to the episode's q slots, shape (B, M, q).
template <class S>
Tensor<S> baseline_logits(const EpisodeBatch<S>& batch, const BaselineConfig& cfg,
                          BaselineParams<S>& params) {
  const Index B = batch.b(), N = batch.n(), M = batch.m(), q = batch.q();
  if (q > cfg.q_max)
    throw CapacityError("episode has q=" + std::to_string(q) +
                        " classes but the baseline decoder is fixed at q_max=" +
                        std::to_string(cfg.q_max) +
                        "; route the episode through ecoc_forward");
  if (N < 1)
    throw EmptyContextError("baseline_forward: episode has no training rows");
  const ModelConfig& c = cfg.core;
  Tensor<S> ypad = batch.Y;  // zero-pad targets to q_max
  if (q < cfg.q_max)
    ypad = concat<S>({batch.Y, Tensor<S>::zeros({B, N, cfg.q_max - q})}, 2);
  Tensor<S> xall = concat<S>({batch.X, batch.Xstar}, 1);
  Tensor<S> cov = matmul(pad_covariates(xall, c.p_max), params.u);  // (B,T,d)
  Tensor<S> ytok = matmul(ypad, params.v);                          // (B,N,d)
  Tensor<S> train_tok = add(slice(cov, 1, 0, N), ytok);
  Tensor<S> test_tok = slice(cov, 1, N, M);
  Tensor<S> tokens = concat<S>({train_tok, test_tok}, 1);  // (B,T,d)
  for (auto& layer : params.layers)
    tokens = attention_block<S>(tokens, layer, c.n_heads, nullptr, N);
  Tensor<S> test_out = slice(tokens, 1, N, M);  // (B,M,d)
  Tensor<S> logits_full = add(
      matmul(gelu(add(matmul(test_out, params.dec_w1), params.dec_b1)),
             params.dec_w2),
      params.dec_b2);
  return slice(logits_full, 2, 0, q);
}

template <class S>
Tensor<S> baseline_forward(const EpisodeBatch<S>& batch, const BaselineConfig& cfg,
                           BaselineParams<S>& params) {
  return softmax(baseline_logits(batch, cfg, params).detached());
}

template <class S>
Tensor<S> baseline_forward(const Episode<S>& ep, const BaselineConfig& cfg,
                           BaselineParams<S>& params) {
  EpisodeBatch<S> batch = EpisodeBatch<S>::of(ep);
  return detail::reshape_value(baseline_forward(batch, cfg, params),
                               {ep.m(), ep.q()});
}

// Mean over sigma of sigma^-1(f(X, sigma(Y), X*)) for an explicit
// permutation list; rows stay on the simplex.
template <class S>
Tensor<S> ensemble_forward(const Episode<S>& ep, const BaselineConfig& cfg,
                           BaselineParams<S>& params,
                           const std::vector<PermutationSpec>& perms) {
  if (perms.empty()) throw ConfigError("ensemble_forward: empty permutation set");
  Tensor<S> acc = Tensor<S>::zeros({ep.m(), ep.q()});
  for (const PermutationSpec& perm : perms) {
    Tensor<S> probs = baseline_forward(permute_targets(ep, perm), cfg, params);
    Tensor<S> aligned = apply_inverse_permutation(probs, perm);
    for (Index i = 0; i < acc.numel(); ++i) acc.at(i) += aligned.at(i);
  }
  const S inv = S(1) / static_cast<S>(perms.size());
  for (Index i = 0; i < acc.numel(); ++i) acc.at(i) *= inv;
  return acc;
}

// n_ens i.i.d. uniform permutations derived from `seed`; sequential draws,
// so larger ensembles extend smaller ones with the same seed.
template <class S>
Tensor<S> ensemble_forward(const Episode<S>& ep, const BaselineConfig& cfg,
                           BaselineParams<S>& params, Index n_ens,
                           std::uint64_t seed) {
  if (n_ens < 1) throw ConfigError("ensemble_forward: n_ens must be >= 1");
  Rng rng(mix_seed(seed, seed_tag::ensemble));
  std::vector<PermutationSpec> perms;
  for (Index i = 0; i < n_ens; ++i)
    perms.push_back(PermutationSpec::random(static_cast<int>(ep.q()), rng));
  return ensemble_forward(ep, cfg, params, perms);
}

// ---------------------------------------------------------------------------
// ECOC-style aggregation for K > q_max.

struct CodeBook {
  int k = 0;
  int q_max = 0;
  // Each partition maps class -> group, surjective onto [0, groups(r)).
  std::vector<std::vector<int>> partitions;
};

inline int codebook_groups(const CodeBook& cb, std::size_t r) {
  int g = 0;
  for (int v : cb.partitions[r]) g = std::max(g, v + 1);
  return g;
}

// Every pair of distinct classes must be separated by some partition.
inline bool codebook_covers(const CodeBook& cb) {
  for (int a = 0; a < cb.k; ++a)
    for (int b = a + 1; b < cb.k; ++b) {
      bool split = false;
      for (const auto& part : cb.partitions)
        if (part[static_cast<std::size_t>(a)] != part[static_cast<std::size_t>(b)]) {
          split = true;
          break;
        }
      if (!split) return false;
    }
  return true;
}

// Random balanced partitions until pairwise coverage holds, then a greedy
// pass drops redundant partitions. Deterministic in seed.
inline CodeBook build_codebook(int k, int q_max, std::uint64_t seed) {
  if (k < 2 || q_max < 2)
    throw ConfigError("build_codebook requires K >= 2 and q_max >= 2");
  CodeBook cb;
  cb.k = k;
  cb.q_max = q_max;
  if (k <= q_max) {
    std::vector<int> ident(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) ident[static_cast<std::size_t>(i)] = i;
    cb.partitions.push_back(std::move(ident));
    return cb;
  }
  Rng rng(mix_seed(seed, seed_tag::codebook));
  constexpr int kMaxPartitions = 4096;
  while (!codebook_covers(cb)) {
    if (static_cast<int>(cb.partitions.size()) > kMaxPartitions)
      throw ConfigError("build_codebook: coverage not reached");
    std::vector<int> order = rng.permutation(k);
    std::vector<int> part(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i)
      part[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] =
          i % q_max;
    cb.partitions.push_back(std::move(part));
  }
  // Greedy redundancy drop, front to back.
  for (std::size_t i = 0; i < cb.partitions.size();) {
    CodeBook trial = cb;
    trial.partitions.erase(trial.partitions.begin() + static_cast<long>(i));
    if (!trial.partitions.empty() && codebook_covers(trial))
      cb = std::move(trial);
    else
      ++i;
  }
  return cb;
}

// Relabels the episode by each partition, runs the fixed-width model (with
// optional permutation ensembling per sub-task), and aggregates group
// log-probabilities: score(c) = sum_r log p_r(group_r(c)).
template <class S>
Tensor<S> ecoc_forward(const Episode<S>& ep, const BaselineConfig& cfg,
                       BaselineParams<S>& params, const CodeBook& codebook,
                       Index n_ens = 1, std::uint64_t seed = 0) {
  const Index K = ep.q();
  if (codebook.k != static_cast<int>(K) || codebook.q_max != static_cast<int>(cfg.q_max))
    throw ConfigError("codebook built for (K=" + std::to_string(codebook.k) +
                      ", q_max=" + std::to_string(codebook.q_max) +
                      ") applied to episode with q=" + std::to_string(K));
  if (!codebook_covers(codebook))
    throw ConfigError("codebook does not cover every class pair");

  // Identity path: a single identity partition is exactly the plain model.
  if (codebook.partitions.size() == 1) {
    bool ident = true;
    for (int c = 0; c < codebook.k; ++c)
      if (codebook.partitions[0][static_cast<std::size_t>(c)] != c) ident = false;
    if (ident) {
      return n_ens > 1 ? ensemble_forward(ep, cfg, params, n_ens, seed)
                       : baseline_forward(ep, cfg, params);
    }
  }

  const Index M = ep.m();
  const std::vector<Index> train_labels = labels_of(ep.Y);
  const std::vector<Index> test_labels = labels_of(ep.Ystar);
  Tensor<double> scores = Tensor<double>::zeros({M, K});
  for (std::size_t r = 0; r < codebook.partitions.size(); ++r) {
    const std::vector<int>& part = codebook.partitions[r];
    const Index g = codebook_groups(codebook, r);
    Episode<S> sub;
    sub.X = ep.X;
    sub.Xstar = ep.Xstar;
    sub.Y = Tensor<S>::zeros({ep.n(), g});
    sub.Ystar = Tensor<S>::zeros({M, g});
    for (Index i = 0; i < ep.n(); ++i)
      sub.Y(i, part[static_cast<std::size_t>(train_labels[static_cast<std::size_t>(i)])]) = S(1);
    for (Index i = 0; i < M; ++i)
      sub.Ystar(i, part[static_cast<std::size_t>(test_labels[static_cast<std::size_t>(i)])]) = S(1);
    Tensor<S> probs =
        n_ens > 1
            ? ensemble_forward(sub, cfg, params, n_ens,
                               mix_seed(seed, seed_tag::ensemble, r))
            : baseline_forward(sub, cfg, params);
    for (Index m = 0; m < M; ++m)
      for (Index c = 0; c < K; ++c) {
        const double p = static_cast<double>(
            probs(m, part[static_cast<std::size_t>(c)]));
        scores(m, c) += std::log(std::max(p, 1e-300));
      }
  }
  // Softmax of aggregated scores per row.
  Tensor<S> out = Tensor<S>::zeros({M, K});
  for (Index m = 0; m < M; ++m) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Index c = 0; c < K; ++c) mx = std::max(mx, scores(m, c));
    double sum = 0;
    for (Index c = 0; c < K; ++c) sum += std::exp(scores(m, c) - mx);
    for (Index c = 0; c < K; ++c)
      out(m, c) = static_cast<S>(std::exp(scores(m, c) - mx) / sum);
  }
  return out;
}

}  // namespace equitab
