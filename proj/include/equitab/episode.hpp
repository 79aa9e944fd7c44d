#pragma once

#include <algorithm>
#include <iomanip>
#include <istream>
#include <ostream>
#include <vector>

#include "equitab/errors.hpp"
#include "equitab/ops.hpp"
#include "equitab/rng.hpp"
#include "equitab/tensor.hpp"

namespace equitab {

// A permutation sigma of q class slots, stored 0-based:
//   sigma(y)_j = y_{sigma[j]}.
struct PermutationSpec {
  std::vector<int> sigma;
  std::vector<int> sigma_inverse;

  int q() const { return static_cast<int>(sigma.size()); }

  static PermutationSpec from_sigma(std::vector<int> s) {
    PermutationSpec p;
    const int n = static_cast<int>(s.size());
    p.sigma_inverse.assign(static_cast<std::size_t>(n), -1);
    for (int j = 0; j < n; ++j) {
      const int v = s[static_cast<std::size_t>(j)];
      if (v < 0 || v >= n || p.sigma_inverse[static_cast<std::size_t>(v)] != -1)
        throw PermutationError("not a permutation of {0.." + std::to_string(n - 1) +
                               "}");
      p.sigma_inverse[static_cast<std::size_t>(v)] = j;
    }
    p.sigma = std::move(s);
    return p;
  }

  static PermutationSpec identity(int q) {
    std::vector<int> s(static_cast<std::size_t>(q));
    for (int i = 0; i < q; ++i) s[static_cast<std::size_t>(i)] = i;
    return from_sigma(std::move(s));
  }

  static PermutationSpec random(int q, Rng& rng) {
    return from_sigma(rng.permutation(q));
  }

  bool is_identity() const {
    for (int j = 0; j < q(); ++j)
      if (sigma[static_cast<std::size_t>(j)] != j) return false;
    return true;
  }
};

// All q! permutations in lexicographic sigma order.
inline std::vector<PermutationSpec> all_permutations(int q) {
  std::vector<int> s(static_cast<std::size_t>(q));
  for (int i = 0; i < q; ++i) s[static_cast<std::size_t>(i)] = i;
  std::vector<PermutationSpec> out;
  do {
    out.push_back(PermutationSpec::from_sigma(s));
  } while (std::next_permutation(s.begin(), s.end()));
  return out;
}

namespace detail {

template <class S>
Tensor<S> permute_last_axis(const Tensor<S>& t, const std::vector<int>& index) {
  const Index q = t.shape().back();
  if (q != static_cast<Index>(index.size()))
    throw PermutationError("permutation over " + std::to_string(index.size()) +
                           " slots applied to last extent " + std::to_string(q));
  Tensor<S> out = Tensor<S>::zeros(t.shape());
  const Index rows = t.numel() / q;
  const S* ps = t.data();
  S* po = out.data();
  for (Index r = 0; r < rows; ++r)
    for (Index j = 0; j < q; ++j)
      po[r * q + j] = ps[r * q + index[static_cast<std::size_t>(j)]];
  return out;
}

}  // namespace detail

// out[..., j] = in[..., sigma[j]]
template <class S>
Tensor<S> apply_permutation(const Tensor<S>& t, const PermutationSpec& perm) {
  return detail::permute_last_axis(t, perm.sigma);
}

// out[..., j] = in[..., sigma_inverse[j]]
template <class S>
Tensor<S> apply_inverse_permutation(const Tensor<S>& t, const PermutationSpec& perm) {
  return detail::permute_last_axis(t, perm.sigma_inverse);
}

// One task: train pairs, test pairs, one-hot targets. X/Xstar are z-scored
// at construction time (train-split statistics).
template <class S>
struct Episode {
  Tensor<S> X;      // (N, p)
  Tensor<S> Y;      // (N, q)
  Tensor<S> Xstar;  // (M, p)
  Tensor<S> Ystar;  // (M, q)

  Index n() const { return X.extent(0); }
  Index m() const { return Xstar.extent(0); }
  Index p() const { return X.extent(1); }
  Index q() const { return Y.extent(1); }
};

template <class S>
void validate_episode(const Episode<S>& ep) {
  if (ep.X.rank() != 2 || ep.Y.rank() != 2 || ep.Xstar.rank() != 2 ||
      ep.Ystar.rank() != 2)
    throw ShapeError("episode tensors must be rank 2");
  const Index N = ep.n(), M = ep.m(), p = ep.p(), q = ep.q();
  if (q < 2 || p < 1 || M < 1 || N < q)
    throw ConfigError("episode dims violate N >= q >= 2, M >= 1, p >= 1: N=" +
                      std::to_string(N) + " M=" + std::to_string(M) + " p=" +
                      std::to_string(p) + " q=" + std::to_string(q));
  if (ep.Ystar.extent(1) != q || ep.Xstar.extent(1) != p)
    throw ShapeError("episode train/test extents disagree");
  auto check_onehot = [&](const Tensor<S>& t, const char* what) {
    for (Index r = 0; r < t.extent(0); ++r) {
      int ones = 0;
      for (Index j = 0; j < q; ++j) {
        const S v = t(r, j);
        if (v == S(1))
          ++ones;
        else if (v != S(0))
          throw EncodingError(std::string(what) + " row " + std::to_string(r) +
                              " is not one-hot");
      }
      if (ones != 1)
        throw EncodingError(std::string(what) + " row " + std::to_string(r) +
                            " is not one-hot");
    }
  };
  check_onehot(ep.Y, "Y");
  check_onehot(ep.Ystar, "Ystar");
  std::vector<bool> seen(static_cast<std::size_t>(q), false);
  for (Index r = 0; r < N; ++r)
    for (Index j = 0; j < q; ++j)
      if (ep.Y(r, j) == S(1)) seen[static_cast<std::size_t>(j)] = true;
  for (Index j = 0; j < q; ++j)
    if (!seen[static_cast<std::size_t>(j)])
      throw ConfigError("class " + std::to_string(j) +
                        " never appears in the training targets");
}

// Reindexes Y/Ystar columns by sigma; covariates untouched.
template <class S>
Episode<S> permute_targets(const Episode<S>& ep, const PermutationSpec& perm) {
  if (perm.q() != static_cast<int>(ep.q()))
    throw PermutationError("permutation over " + std::to_string(perm.q()) +
                           " classes applied to episode with q=" +
                           std::to_string(ep.q()));
  Episode<S> out;
  out.X = ep.X;
  out.Xstar = ep.Xstar;
  out.Y = apply_permutation(ep.Y, perm);
  out.Ystar = apply_permutation(ep.Ystar, perm);
  return out;
}

template <class S>
std::vector<Index> labels_of(const Tensor<S>& onehot) {
  return argmax_rows(onehot);
}

// B episodes of identical dims stacked into (B, ., .) tensors.
template <class S>
struct EpisodeBatch {
  Tensor<S> X;      // (B, N, p)
  Tensor<S> Y;      // (B, N, q)
  Tensor<S> Xstar;  // (B, M, p)
  Tensor<S> Ystar;  // (B, M, q)

  Index b() const { return X.extent(0); }
  Index n() const { return X.extent(1); }
  Index m() const { return Xstar.extent(1); }
  Index p() const { return X.extent(2); }
  Index q() const { return Y.extent(2); }

  static EpisodeBatch stack(const std::vector<Episode<S>>& eps) {
    if (eps.empty()) throw ConfigError("cannot stack an empty episode list");
    const Index N = eps[0].n(), M = eps[0].m(), p = eps[0].p(), q = eps[0].q();
    for (const Episode<S>& e : eps)
      if (e.n() != N || e.m() != M || e.p() != p || e.q() != q)
        throw ShapeError("episodes in a batch must share (N, M, p, q)");
    const Index B = static_cast<Index>(eps.size());
    EpisodeBatch out;
    out.X = Tensor<S>::zeros({B, N, p});
    out.Y = Tensor<S>::zeros({B, N, q});
    out.Xstar = Tensor<S>::zeros({B, M, p});
    out.Ystar = Tensor<S>::zeros({B, M, q});
    for (Index b = 0; b < B; ++b) {
      std::copy(eps[b].X.data(), eps[b].X.data() + N * p, out.X.data() + b * N * p);
      std::copy(eps[b].Y.data(), eps[b].Y.data() + N * q, out.Y.data() + b * N * q);
      std::copy(eps[b].Xstar.data(), eps[b].Xstar.data() + M * p,
                out.Xstar.data() + b * M * p);
      std::copy(eps[b].Ystar.data(), eps[b].Ystar.data() + M * q,
                out.Ystar.data() + b * M * q);
    }
    return out;
  }

  static EpisodeBatch of(const Episode<S>& ep) { return stack({ep}); }

  Episode<S> episode(Index b) const {
    Episode<S> out;
    const Index N = n(), M = m(), P = p(), Q = q();
    out.X = Tensor<S>::zeros({N, P});
    out.Y = Tensor<S>::zeros({N, Q});
    out.Xstar = Tensor<S>::zeros({M, P});
    out.Ystar = Tensor<S>::zeros({M, Q});
    std::copy(X.data() + b * N * P, X.data() + (b + 1) * N * P, out.X.data());
    std::copy(Y.data() + b * N * Q, Y.data() + (b + 1) * N * Q, out.Y.data());
    std::copy(Xstar.data() + b * M * P, Xstar.data() + (b + 1) * M * P,
              out.Xstar.data());
    std::copy(Ystar.data() + b * M * Q, Ystar.data() + (b + 1) * M * Q,
              out.Ystar.data());
    return out;
  }
};

// Debug dump: "N M p q" header, then X, Y, Xstar, Ystar as row-major
// whitespace-separated floats.
template <class S>
void dump_episode(std::ostream& os, const Episode<S>& ep) {
  os << ep.n() << ' ' << ep.m() << ' ' << ep.p() << ' ' << ep.q() << '\n';
  os << std::setprecision(17);
  auto write = [&](const Tensor<S>& t) {
    for (Index i = 0; i < t.numel(); ++i) {
      if (i) os << ' ';
      os << static_cast<double>(t.at(i));
    }
    os << '\n';
  };
  write(ep.X);
  write(ep.Y);
  write(ep.Xstar);
  write(ep.Ystar);
}

template <class S>
Episode<S> parse_episode(std::istream& is) {
  Index N, M, p, q;
  if (!(is >> N >> M >> p >> q))
    throw IngestionError("episode dump: malformed header line");
  auto read = [&](Shape shape) {
    Tensor<S> t = Tensor<S>::zeros(std::move(shape));
    for (Index i = 0; i < t.numel(); ++i) {
      double v;
      if (!(is >> v))
        throw IngestionError("episode dump: truncated payload");
      t.at(i) = static_cast<S>(v);
    }
    return t;
  };
  Episode<S> ep;
  ep.X = read({N, p});
  ep.Y = read({N, q});
  ep.Xstar = read({M, p});
  ep.Ystar = read({M, q});
  validate_episode(ep);
  return ep;
}

}  // namespace equitab
