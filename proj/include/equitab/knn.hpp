#pragma once

// Euclidean k-nearest-neighbor reference predictor on the episode's
// (already z-scored) covariates. Distance ties break toward the lower
// train-row index; output rows are class frequencies among the k neighbors.

#include <algorithm>
#include <numeric>
#include <vector>

#include "equitab/episode.hpp"

namespace equitab {

template <class S>
Tensor<S> knn_predict(const Episode<S>& ep, Index k) {
  const Index N = ep.n(), M = ep.m(), p = ep.p(), q = ep.q();
  if (k < 1 || k > N)
    throw ConfigError("knn: k=" + std::to_string(k) +
                      " out of range [1, N=" + std::to_string(N) + "]");
  const std::vector<Index> train_labels = labels_of(ep.Y);
  Tensor<S> out = Tensor<S>::zeros({M, q});
  std::vector<std::pair<double, Index>> dist(static_cast<std::size_t>(N));
  for (Index m = 0; m < M; ++m) {
    for (Index i = 0; i < N; ++i) {
      double d2 = 0;
      for (Index j = 0; j < p; ++j) {
        const double diff = static_cast<double>(ep.Xstar(m, j)) -
                            static_cast<double>(ep.X(i, j));
        d2 += diff * diff;
      }
      dist[static_cast<std::size_t>(i)] = {d2, i};
    }
    std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
    for (Index r = 0; r < k; ++r) {
      const Index i = dist[static_cast<std::size_t>(r)].second;
      out(m, train_labels[static_cast<std::size_t>(i)]) += S(1);
    }
    for (Index j = 0; j < q; ++j) out(m, j) /= static_cast<S>(k);
  }
  return out;
}

}  // namespace equitab
