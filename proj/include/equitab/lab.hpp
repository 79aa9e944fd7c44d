#pragma once

// Measurement suite for target-permutation equivariance: violation rate,
// symmetrized predictors, the equivariance gap with standard errors, and
// the squared-loss decomposition identity.
//
// Conventions:
//  - the reference loss estimate for a predictor f is the sigma-averaged
//    form mean_ep mean_sigma l(sigma^-1 f(X, sigma Y, X*), Y*); under a
//    relabel-invariant episode distribution this estimates the plain loss
//    of f, and it makes the exhaustive-sigma algebra below exact on any
//    fixed episode set;
//  - squared loss is the summed-over-classes squared error on probability
//    rows, averaged over test points (the form under which the gap equals
//    the mean squared distance between f and its symmetrization exactly);
//    cross-entropy gets the convexity (non-negativity) check only;
//  - violation counting breaks argmax ties toward the lowest class index on
//    both branches.

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "equitab/episode.hpp"
#include "equitab/models.hpp"

namespace equitab {

enum class GapLoss { cross_entropy, squared };

inline std::string to_string(GapLoss l) {
  return l == GapLoss::cross_entropy ? "ce" : "sq";
}

// Permutation set mode: exhaustive (all q!) or n i.i.d. samples per episode.
struct SigmaMode {
  bool exhaustive = true;
  Index n_samples = 0;
  std::uint64_t seed = 0;
  bool allow_large_exhaustive = false;

  static SigmaMode Exhaustive(bool allow_large = false) {
    SigmaMode m;
    m.exhaustive = true;
    m.allow_large_exhaustive = allow_large;
    return m;
  }
  static SigmaMode Sampled(Index n, std::uint64_t seed) {
    SigmaMode m;
    m.exhaustive = false;
    m.n_samples = n;
    m.seed = seed;
    return m;
  }
};

namespace detail {

// Exhaustive sigma sets are capped at q <= 4 (24 calls per prediction)
// unless explicitly overridden.
inline std::vector<PermutationSpec> sigma_set(int q, const SigmaMode& mode,
                                              std::uint64_t episode_index) {
  if (mode.exhaustive) {
    if (q > 4 && !mode.allow_large_exhaustive)
      throw CostGuardError(
          "exhaustive symmetrization over q=" + std::to_string(q) +
          " needs q! = many model calls; pass allow_large_exhaustive to force");
    return all_permutations(q);
  }
  if (mode.n_samples < 1)
    throw ConfigError("sampled sigma mode needs n_samples >= 1");
  Rng rng(mix_seed(mode.seed, seed_tag::perm, episode_index));
  std::vector<PermutationSpec> out;
  for (Index i = 0; i < mode.n_samples; ++i)
    out.push_back(PermutationSpec::random(q, rng));
  return out;
}

template <class S>
double loss_rows(GapLoss loss, const Tensor<S>& probs, const Tensor<S>& ystar) {
  const Index M = probs.extent(0), q = probs.extent(1);
  double acc = 0;
  if (loss == GapLoss::squared) {
    for (Index m = 0; m < M; ++m)
      for (Index j = 0; j < q; ++j) {
        const double diff = static_cast<double>(probs(m, j)) -
                            static_cast<double>(ystar(m, j));
        acc += diff * diff;
      }
    return acc / static_cast<double>(M);
  }
  constexpr double kFloor = 1e-300;
  for (Index m = 0; m < M; ++m)
    for (Index j = 0; j < q; ++j)
      if (ystar(m, j) == S(1))
        acc += -std::log(std::max(static_cast<double>(probs(m, j)), kFloor));
  return acc / static_cast<double>(M);
}

}  // namespace detail

// f-bar: average of sigma^-1 f(X, sigma Y, X*) over a fixed permutation set
// drawn once (sampled mode) or enumerated (exhaustive, guarded at q <= 4).
template <class S>
Predictor<S> symmetrize(const Predictor<S>& f, int q, const SigmaMode& mode) {
  const std::vector<PermutationSpec> perms = detail::sigma_set(q, mode, 0);
  Predictor<S> out;
  out.name = f.name + ".sym";
  out.fn = [f, perms, q](const Episode<S>& ep) {
    if (static_cast<int>(ep.q()) != q)
      throw PermutationError("symmetrized predictor built for q=" +
                             std::to_string(q) + " applied to episode with q=" +
                             std::to_string(ep.q()));
    Tensor<S> acc = Tensor<S>::zeros({ep.m(), ep.q()});
    for (const PermutationSpec& perm : perms) {
      Tensor<S> probs = f(permute_targets(ep, perm));
      Tensor<S> aligned = apply_inverse_permutation(probs, perm);
      for (Index i = 0; i < acc.numel(); ++i) acc.at(i) += aligned.at(i);
    }
    const S inv = S(1) / static_cast<S>(perms.size());
    for (Index i = 0; i < acc.numel(); ++i) acc.at(i) *= inv;
    return acc;
  };
  return out;
}

// Fraction of (episode, sigma, test point) triples where the argmax of
// sigma^-1 f(sigma ep) differs from the argmax of f(ep).
template <class S>
double violation_rate(const Predictor<S>& f, const std::vector<Episode<S>>& episodes,
                      Index n_perms, std::uint64_t seed) {
  if (n_perms < 1) throw ConfigError("violation_rate: n_perms must be >= 1");
  long total = 0, violated = 0;
  for (std::size_t e = 0; e < episodes.size(); ++e) {
    const Episode<S>& ep = episodes[e];
    const std::vector<Index> base = argmax_rows(f(ep));
    Rng rng(mix_seed(seed, seed_tag::perm, e));
    for (Index t = 0; t < n_perms; ++t) {
      const PermutationSpec perm =
          PermutationSpec::random(static_cast<int>(ep.q()), rng);
      const Tensor<S> moved =
          apply_inverse_permutation(f(permute_targets(ep, perm)), perm);
      const std::vector<Index> pred = argmax_rows(moved);
      for (std::size_t m = 0; m < pred.size(); ++m) {
        ++total;
        if (pred[m] != base[m]) ++violated;
      }
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(violated) / static_cast<double>(total);
}

struct GapReport {
  std::string predictor;
  std::string loss;          // "ce" | "sq"
  double loss_f = 0;         // sigma-averaged loss of f
  double loss_fbar = 0;      // loss of the symmetrized predictor
  double gap = 0;            // loss_f - loss_fbar, exactly as recorded
  double gap_stderr = 0;
  double sq_identity_lhs = 0;  // gap (squared loss only)
  double sq_identity_rhs = 0;  // mean ||f - fbar||^2 (squared loss only)
  double sq_identity_rhs_stderr = 0;
  double violation_rate = -1;  // filled by the caller; -1 = not measured
  long n_episodes = 0;
  long n_perms = 0;  // per episode (q! when exhaustive and q constant)
  bool exhaustive = false;

  // One "key: value" per line.
  std::string format() const {
    std::ostringstream os;
    os.precision(12);
    os << "predictor: " << predictor << "\n";
    os << "loss: " << loss << "\n";
    os << "loss_f: " << loss_f << "\n";
    os << "loss_fbar: " << loss_fbar << "\n";
    os << "gap: " << gap << "\n";
    os << "gap_stderr: " << gap_stderr << "\n";
    if (loss == "sq") {
      os << "sq_identity_lhs: " << sq_identity_lhs << "\n";
      os << "sq_identity_rhs: " << sq_identity_rhs << "\n";
    }
    if (violation_rate >= 0) os << "violation_rate: " << violation_rate << "\n";
    os << "n_episodes: " << n_episodes << "\n";
    os << "n_perms: " << n_perms << "\n";
    os << "exhaustive: " << (exhaustive ? "true" : "false") << "\n";
    return os.str();
  }

  // Machine-readable one-liner for the results log.
  std::string summary_line() const {
    std::ostringstream os;
    os.precision(12);
    os << predictor << "\t" << loss << "\t" << loss_f << "\t" << loss_fbar
       << "\t" << gap << "\t" << gap_stderr << "\t" << violation_rate << "\t"
       << n_episodes << "\t" << n_perms << "\t" << (exhaustive ? 1 : 0);
    return os.str();
  }
};

// Monte-Carlo (or exhaustive over sigma) estimate of the equivariance gap
// on a fixed episode set. Per episode:
//   loss_f_i  = mean_sigma l(sigma^-1 f(sigma ep), Y*)
//   fbar rows = mean_sigma sigma^-1 f(sigma ep)
//   gap_i     = loss_f_i - l(fbar, Y*)        (>= 0 pointwise by Jensen)
// and for squared loss additionally
//   rhs_i     = mean_sigma ||sigma^-1 f(sigma ep) - fbar||^2 / M,
// which equals gap_i exactly (bias-variance decomposition), so the
// exhaustive identity check is algebraic rather than statistical.
template <class S>
GapReport gap_estimate(const Predictor<S>& f, const std::vector<Episode<S>>& episodes,
                       GapLoss loss, const SigmaMode& mode) {
  if (episodes.empty()) throw ConfigError("gap_estimate: no episodes");
  GapReport rep;
  rep.predictor = f.name;
  rep.loss = to_string(loss);
  rep.exhaustive = mode.exhaustive;
  rep.n_episodes = static_cast<long>(episodes.size());

  std::vector<double> gap_i, rhs_i;
  double loss_f_acc = 0, loss_fbar_acc = 0;
  for (std::size_t e = 0; e < episodes.size(); ++e) {
    const Episode<S>& ep = episodes[e];
    const std::vector<PermutationSpec> perms =
        detail::sigma_set(static_cast<int>(ep.q()), mode, e);
    rep.n_perms = static_cast<long>(perms.size());
    const Index M = ep.m(), q = ep.q();
    std::vector<Tensor<S>> aligned;
    aligned.reserve(perms.size());
    double lf = 0;
    for (const PermutationSpec& perm : perms) {
      Tensor<S> probs = f(permute_targets(ep, perm));
      aligned.push_back(apply_inverse_permutation(probs, perm));
      lf += detail::loss_rows(loss, aligned.back(), ep.Ystar);
    }
    lf /= static_cast<double>(perms.size());
    Tensor<S> fbar = Tensor<S>::zeros({M, q});
    for (const Tensor<S>& a : aligned)
      for (Index i = 0; i < fbar.numel(); ++i) fbar.at(i) += a.at(i);
    for (Index i = 0; i < fbar.numel(); ++i)
      fbar.at(i) /= static_cast<S>(perms.size());
    const double lfbar = detail::loss_rows(loss, fbar, ep.Ystar);
    gap_i.push_back(lf - lfbar);
    loss_f_acc += lf;
    loss_fbar_acc += lfbar;
    if (loss == GapLoss::squared) {
      double r = 0;
      for (const Tensor<S>& a : aligned) {
        for (Index i = 0; i < fbar.numel(); ++i) {
          const double diff =
              static_cast<double>(a.at(i)) - static_cast<double>(fbar.at(i));
          r += diff * diff;
        }
      }
      r /= static_cast<double>(perms.size()) * static_cast<double>(M);
      rhs_i.push_back(r);
    }
  }
  const double n = static_cast<double>(episodes.size());
  rep.loss_f = loss_f_acc / n;
  rep.loss_fbar = loss_fbar_acc / n;
  rep.gap = rep.loss_f - rep.loss_fbar;
  double var = 0;
  const double mean_gap = rep.gap;
  for (double g : gap_i) var += (g - mean_gap) * (g - mean_gap);
  var /= std::max(1.0, n - 1.0);
  rep.gap_stderr = std::sqrt(var / n);
  if (loss == GapLoss::squared) {
    rep.sq_identity_lhs = rep.gap;
    double racc = 0;
    for (double r : rhs_i) racc += r;
    rep.sq_identity_rhs = racc / n;
    double rvar = 0;
    for (double r : rhs_i)
      rvar += (r - rep.sq_identity_rhs) * (r - rep.sq_identity_rhs);
    rvar /= std::max(1.0, n - 1.0);
    rep.sq_identity_rhs_stderr = std::sqrt(rvar / n);
  }
  return rep;
}

struct SqIdentityResult {
  bool pass = false;
  double lhs = 0;
  double rhs = 0;
  double margin = 0;     // allowed |lhs - rhs|
  double difference = 0; // observed |lhs - rhs|
  GapReport report;
};

// Asserts the squared-loss decomposition: gap == mean ||f - fbar||^2. In
// exhaustive mode both sides come from the full permutation set and must
// agree to 1e-6. In sampled mode the two sides are estimated from
// independent sigma draws and must agree within 3 combined standard errors.
template <class S>
SqIdentityResult sq_identity_check(const Predictor<S>& f,
                                   const std::vector<Episode<S>>& episodes,
                                   const SigmaMode& mode) {
  SqIdentityResult res;
  if (mode.exhaustive) {
    res.report = gap_estimate(f, episodes, GapLoss::squared, mode);
    res.lhs = res.report.sq_identity_lhs;
    res.rhs = res.report.sq_identity_rhs;
    res.margin = 1e-6;
  } else {
    const SigmaMode lhs_mode =
        SigmaMode::Sampled(mode.n_samples, mix_seed(mode.seed, 0x115));
    const SigmaMode rhs_mode =
        SigmaMode::Sampled(mode.n_samples, mix_seed(mode.seed, 0x2215));
    res.report = gap_estimate(f, episodes, GapLoss::squared, lhs_mode);
    const GapReport rhs_rep = gap_estimate(f, episodes, GapLoss::squared, rhs_mode);
    res.lhs = res.report.gap;
    res.rhs = rhs_rep.sq_identity_rhs;
    res.margin = 3.0 * std::sqrt(res.report.gap_stderr * res.report.gap_stderr +
                                 rhs_rep.sq_identity_rhs_stderr *
                                     rhs_rep.sq_identity_rhs_stderr) +
                 1e-9;
  }
  res.difference = std::abs(res.lhs - res.rhs);
  res.pass = res.difference <= res.margin;
  return res;
}

}  // namespace equitab
