#pragma once

// Synthetic episode generators. Two documented families:
//   blobs      — Gaussian clusters with random means in [-3,3]^p and a shared
//                isotropic scale chosen so the minimal pairwise mean distance
//                equals `separation` cluster standard deviations;
//   random-mlp — X uniform on [-1,1]^p, labels = argmax of a random 2-layer
//                tanh network's logits plus Gumbel noise at `temperature`.
//
// After raw generation, class identities are composed with a uniform random
// permutation, so the episode distribution is invariant to class relabeling
// regardless of generator asymmetries. Episodes where some class is missing
// from the training split are rejected and resampled.

#include <cmath>
#include <string>
#include <vector>

#include "equitab/episode.hpp"
#include "equitab/errors.hpp"
#include "equitab/rng.hpp"

namespace equitab {

enum class PriorFamily { blobs, random_mlp };

inline std::string to_string(PriorFamily f) {
  return f == PriorFamily::blobs ? "blobs" : "random-mlp";
}

inline PriorFamily prior_family_from_string(const std::string& s) {
  if (s == "blobs") return PriorFamily::blobs;
  if (s == "random-mlp" || s == "random_mlp") return PriorFamily::random_mlp;
  throw ConfigError("unknown prior family '" + s + "'");
}

struct PriorConfig {
  PriorFamily family = PriorFamily::blobs;
  Index n_min = 32, n_max = 224;
  Index m_min = 16, m_max = 64;
  // If positive, N ~ U[n_min, n_max] and M = total_points - N.
  Index total_points = 0;
  Index p_min = 2, p_max = 8;
  // The generator imposes no ceiling on q beyond these ranges.
  Index q_min = 2, q_max = 5;
  double separation = 3.0;
  Index mlp_hidden = 16;
  double temperature = 1.0;
};

struct EpisodeDims {
  Index n = 0, m = 0, p = 0, q = 0;
};

inline void validate_prior(const PriorConfig& c) {
  if (c.n_min > c.n_max || c.m_min > c.m_max || c.p_min > c.p_max ||
      c.q_min > c.q_max)
    throw ConfigError("prior ranges must satisfy min <= max");
  if (c.q_min < 2 || c.p_min < 1 || c.n_min < 1 || c.m_min < 1)
    throw ConfigError("prior ranges must satisfy q >= 2, p >= 1, N >= 1, M >= 1");
  if (c.total_points > 0 && c.total_points <= c.n_max)
    throw ConfigError("total_points must exceed n_max so that M >= 1");
  if (c.n_min < c.q_max)
    throw ConfigError("infeasible ranges: N could be drawn below q (n_min=" +
                      std::to_string(c.n_min) + " < q_max=" +
                      std::to_string(c.q_max) + ")");
  if (c.family == PriorFamily::blobs && c.separation <= 0)
    throw ConfigError("blobs separation must be positive");
  if (c.family == PriorFamily::random_mlp &&
      (c.mlp_hidden < 1 || c.temperature < 0))
    throw ConfigError("random-mlp needs hidden >= 1 and temperature >= 0");
}

inline EpisodeDims draw_dims(const PriorConfig& c, std::uint64_t seed) {
  validate_prior(c);
  Rng rng(mix_seed(seed, seed_tag::dims));
  EpisodeDims d;
  d.n = rng.uniform_int(c.n_min, c.n_max);
  d.m = c.total_points > 0 ? c.total_points - d.n
                           : rng.uniform_int(c.m_min, c.m_max);
  d.p = rng.uniform_int(c.p_min, c.p_max);
  d.q = rng.uniform_int(c.q_min, c.q_max);
  return d;
}

namespace detail {

constexpr int kPriorMaxAttempts = 10000;

inline bool covers_all_classes(const std::vector<int>& labels, Index n_train,
                               Index q) {
  std::vector<bool> seen(static_cast<std::size_t>(q), false);
  for (Index i = 0; i < n_train; ++i)
    seen[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])] = true;
  for (Index j = 0; j < q; ++j)
    if (!seen[static_cast<std::size_t>(j)]) return false;
  return true;
}

// Raw covariates and labels, before relabeling and z-scoring. Labels refer
// to generator clusters / network outputs in canonical order.
inline void generate_raw(const PriorConfig& c, const EpisodeDims& d, Rng& rng,
                         std::vector<double>* xs, std::vector<int>* labels) {
  const Index T = d.n + d.m;
  xs->assign(static_cast<std::size_t>(T * d.p), 0.0);
  labels->assign(static_cast<std::size_t>(T), 0);
  if (c.family == PriorFamily::blobs) {
    std::vector<double> means(static_cast<std::size_t>(d.q * d.p));
    for (double& v : means) v = rng.uniform(-3.0, 3.0);
    double min_dist2 = std::numeric_limits<double>::infinity();
    for (Index a = 0; a < d.q; ++a)
      for (Index b = a + 1; b < d.q; ++b) {
        double s = 0;
        for (Index j = 0; j < d.p; ++j) {
          const double diff = means[static_cast<std::size_t>(a * d.p + j)] -
                              means[static_cast<std::size_t>(b * d.p + j)];
          s += diff * diff;
        }
        min_dist2 = std::min(min_dist2, s);
      }
    const double sigma = std::sqrt(min_dist2) / c.separation;
    for (int attempt = 0;; ++attempt) {
      if (attempt >= kPriorMaxAttempts)
        throw ConfigError("blobs prior: could not cover all classes in train "
                          "after " + std::to_string(kPriorMaxAttempts) +
                          " attempts");
      for (Index i = 0; i < T; ++i)
        (*labels)[static_cast<std::size_t>(i)] =
            static_cast<int>(rng.uniform_int(0, d.q - 1));
      if (covers_all_classes(*labels, d.n, d.q)) break;
    }
    for (Index i = 0; i < T; ++i) {
      const int cl = (*labels)[static_cast<std::size_t>(i)];
      for (Index j = 0; j < d.p; ++j)
        (*xs)[static_cast<std::size_t>(i * d.p + j)] =
            means[static_cast<std::size_t>(cl * d.p + j)] + sigma * rng.normal();
    }
  } else {
    const Index H = c.mlp_hidden;
    for (int attempt = 0;; ++attempt) {
      if (attempt >= kPriorMaxAttempts)
        throw ConfigError("random-mlp prior: could not cover all classes in "
                          "train after " + std::to_string(kPriorMaxAttempts) +
                          " attempts");
      std::vector<double> w1(static_cast<std::size_t>(H * d.p)),
          b1(static_cast<std::size_t>(H)), w2(static_cast<std::size_t>(d.q * H)),
          b2(static_cast<std::size_t>(d.q));
      const double s1 = 1.0 / std::sqrt(static_cast<double>(d.p));
      const double s2 = 1.0 / std::sqrt(static_cast<double>(H));
      for (double& v : w1) v = rng.normal(0.0, s1);
      for (double& v : b1) v = rng.normal(0.0, 0.5);
      for (double& v : w2) v = rng.normal(0.0, s2);
      for (double& v : b2) v = rng.normal(0.0, 0.5);
      for (Index i = 0; i < T; ++i)
        for (Index j = 0; j < d.p; ++j)
          (*xs)[static_cast<std::size_t>(i * d.p + j)] = rng.uniform(-1.0, 1.0);
      std::vector<double> h(static_cast<std::size_t>(H));
      for (Index i = 0; i < T; ++i) {
        for (Index u = 0; u < H; ++u) {
          double acc = b1[static_cast<std::size_t>(u)];
          for (Index j = 0; j < d.p; ++j)
            acc += w1[static_cast<std::size_t>(u * d.p + j)] *
                   (*xs)[static_cast<std::size_t>(i * d.p + j)];
          h[static_cast<std::size_t>(u)] = std::tanh(acc);
        }
        double best = -std::numeric_limits<double>::infinity();
        int best_k = 0;
        for (Index k = 0; k < d.q; ++k) {
          double acc = b2[static_cast<std::size_t>(k)];
          for (Index u = 0; u < H; ++u)
            acc += w2[static_cast<std::size_t>(k * H + u)] *
                   h[static_cast<std::size_t>(u)];
          acc += c.temperature * rng.gumbel();
          if (acc > best) {
            best = acc;
            best_k = static_cast<int>(k);
          }
        }
        (*labels)[static_cast<std::size_t>(i)] = best_k;
      }
      if (covers_all_classes(*labels, d.n, d.q)) break;
    }
  }
}

}  // namespace detail

// Deterministic in (config, dims, seed). If `relabel_out` is non-null it
// receives the uniform relabeling pi applied after raw generation
// (final class = pi[raw generator class]).
template <class S>
Episode<S> sample_episode_with_dims(const PriorConfig& c, const EpisodeDims& d,
                                    std::uint64_t seed,
                                    std::vector<int>* relabel_out = nullptr) {
  validate_prior(c);
  if (d.n < d.q)
    throw ConfigError("infeasible dims: N=" + std::to_string(d.n) + " < q=" +
                      std::to_string(d.q));
  if (d.m < 1 || d.p < 1 || d.q < 2)
    throw ConfigError("infeasible dims: M >= 1, p >= 1, q >= 2 required");

  Rng rng(mix_seed(seed, seed_tag::content));
  std::vector<double> xs;
  std::vector<int> labels;
  detail::generate_raw(c, d, rng, &xs, &labels);

  // Label symmetrization: final class = pi(raw class), pi uniform.
  Rng rrng(mix_seed(seed, seed_tag::relabel));
  std::vector<int> pi = rrng.permutation(static_cast<int>(d.q));
  if (relabel_out) *relabel_out = pi;

  // z-score with train-split statistics; zero-variance columns go to 0.
  const Index T = d.n + d.m;
  for (Index j = 0; j < d.p; ++j) {
    double mean = 0;
    for (Index i = 0; i < d.n; ++i)
      mean += xs[static_cast<std::size_t>(i * d.p + j)];
    mean /= static_cast<double>(d.n);
    double var = 0;
    for (Index i = 0; i < d.n; ++i) {
      const double cdev = xs[static_cast<std::size_t>(i * d.p + j)] - mean;
      var += cdev * cdev;
    }
    var /= static_cast<double>(d.n);
    const double sd = std::sqrt(var);
    const double inv = sd < 1e-12 ? 1.0 : 1.0 / sd;
    for (Index i = 0; i < T; ++i) {
      auto& v = xs[static_cast<std::size_t>(i * d.p + j)];
      v = (v - mean) * inv;
    }
  }

  Episode<S> ep;
  ep.X = Tensor<S>::zeros({d.n, d.p});
  ep.Y = Tensor<S>::zeros({d.n, d.q});
  ep.Xstar = Tensor<S>::zeros({d.m, d.p});
  ep.Ystar = Tensor<S>::zeros({d.m, d.q});
  for (Index i = 0; i < d.n; ++i) {
    for (Index j = 0; j < d.p; ++j)
      ep.X(i, j) = static_cast<S>(xs[static_cast<std::size_t>(i * d.p + j)]);
    ep.Y(i, pi[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])]) = S(1);
  }
  for (Index i = 0; i < d.m; ++i) {
    for (Index j = 0; j < d.p; ++j)
      ep.Xstar(i, j) =
          static_cast<S>(xs[static_cast<std::size_t>((d.n + i) * d.p + j)]);
    ep.Ystar(i, pi[static_cast<std::size_t>(
                   labels[static_cast<std::size_t>(d.n + i)])]) = S(1);
  }
  validate_episode(ep);
  return ep;
}

template <class S>
Episode<S> sample_episode(const PriorConfig& c, std::uint64_t seed) {
  return sample_episode_with_dims<S>(c, draw_dims(c, seed), seed);
}

// B episodes sharing the dims drawn once from `seed`; episode i uses the
// derived seed `seed + i`, so B=1 reduces to sample_episode(seed).
template <class S>
EpisodeBatch<S> sample_batch(const PriorConfig& c, Index batch,
                             std::uint64_t seed) {
  if (batch < 1) throw ConfigError("batch size must be >= 1");
  const EpisodeDims d = draw_dims(c, seed);
  std::vector<Episode<S>> eps;
  eps.reserve(static_cast<std::size_t>(batch));
  for (Index i = 0; i < batch; ++i)
    eps.push_back(sample_episode_with_dims<S>(c, d, seed + static_cast<std::uint64_t>(i)));
  return EpisodeBatch<S>::stack(eps);
}

}  // namespace equitab
