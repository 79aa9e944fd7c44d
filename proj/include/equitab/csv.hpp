#pragma once

// CSV ingestion into the Episode shape. Format: UTF-8, comma-separated,
// header row required, empty cell = missing. Covariate columns must be
// numeric; labels are categorical and one-hot encoded in first-appearance
// (file) order. Missing covariates are imputed with the train-split column
// mean; z-scoring is fitted on the train split only.

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "equitab/episode.hpp"
#include "equitab/rng.hpp"

namespace equitab {

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      cells.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  cells.push_back(cur);
  return cells;
}

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t");
  return s.substr(a, b - a + 1);
}

}  // namespace detail

template <class S>
Episode<S> load_csv(const std::string& path, const std::string& label_column,
                    double split_fraction, std::uint64_t seed) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot read CSV file '" + path + "'");
  if (!(split_fraction > 0.0 && split_fraction < 1.0))
    throw IngestionError("split fraction must lie in (0, 1)");

  std::string line;
  if (!std::getline(in, line))
    throw IngestionError("CSV file '" + path + "' is empty (header required)");
  const std::vector<std::string> header = detail::split_csv_line(line);
  int label_idx = -1;
  for (std::size_t i = 0; i < header.size(); ++i)
    if (detail::trim(header[i]) == label_column) label_idx = static_cast<int>(i);
  if (label_idx < 0)
    throw IngestionError("label column '" + label_column + "' not found in '" +
                         path + "'");
  const Index p = static_cast<Index>(header.size()) - 1;
  if (p < 1) throw IngestionError("CSV needs at least one covariate column");

  constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> xs;            // R x p, NaN = missing
  std::vector<int> labels;           // R
  std::vector<std::string> classes;  // first-appearance order
  long lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::vector<std::string> cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw IngestionError("line " + std::to_string(lineno) + ": expected " +
                           std::to_string(header.size()) + " cells, got " +
                           std::to_string(cells.size()));
    const std::string label = detail::trim(cells[static_cast<std::size_t>(label_idx)]);
    if (label.empty())
      throw IngestionError("line " + std::to_string(lineno) +
                           ": empty label cell");
    int cls = -1;
    for (std::size_t c = 0; c < classes.size(); ++c)
      if (classes[c] == label) cls = static_cast<int>(c);
    if (cls < 0) {
      cls = static_cast<int>(classes.size());
      classes.push_back(label);
    }
    labels.push_back(cls);
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (static_cast<int>(c) == label_idx) continue;
      const std::string cell = detail::trim(cells[c]);
      if (cell.empty()) {
        xs.push_back(kMissing);
        continue;
      }
      try {
        std::size_t used = 0;
        const double v = std::stod(cell, &used);
        if (used != cell.size()) throw std::invalid_argument(cell);
        xs.push_back(v);
      } catch (const std::exception&) {
        throw IngestionError("line " + std::to_string(lineno) + ", column '" +
                             detail::trim(header[c]) + "': non-numeric cell '" +
                             cell + "'");
      }
    }
  }
  const Index R = static_cast<Index>(labels.size());
  const Index q = static_cast<Index>(classes.size());
  if (R < 2) throw IngestionError("CSV '" + path + "' has fewer than 2 data rows");
  if (q < 2) throw IngestionError("CSV '" + path + "' has fewer than 2 classes");

  // Seeded split: shuffle row indices, first floor(frac*R) rows train.
  Rng rng(mix_seed(seed, seed_tag::split));
  std::vector<Index> order(static_cast<std::size_t>(R));
  for (Index i = 0; i < R; ++i) order[static_cast<std::size_t>(i)] = i;
  rng.shuffle(order);
  Index N = static_cast<Index>(std::floor(split_fraction * static_cast<double>(R)));
  N = std::max<Index>(1, std::min<Index>(N, R - 1));
  const Index M = R - N;

  std::vector<bool> in_train(static_cast<std::size_t>(q), false);
  for (Index i = 0; i < N; ++i)
    in_train[static_cast<std::size_t>(
        labels[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])])] = true;
  for (Index c = 0; c < q; ++c)
    if (!in_train[static_cast<std::size_t>(c)])
      throw IngestionError("class '" + classes[static_cast<std::size_t>(c)] +
                           "' appears only in the test split; re-split with a "
                           "different seed or fraction");
  if (N < q)
    throw IngestionError("train split has N=" + std::to_string(N) +
                         " rows but q=" + std::to_string(q) + " classes");

  // Train-split statistics: mean for imputation, mean/std for z-scoring.
  std::vector<double> mean(static_cast<std::size_t>(p), 0.0);
  std::vector<double> sd(static_cast<std::size_t>(p), 0.0);
  for (Index j = 0; j < p; ++j) {
    double acc = 0;
    Index cnt = 0;
    for (Index i = 0; i < N; ++i) {
      const double v = xs[static_cast<std::size_t>(
          order[static_cast<std::size_t>(i)] * p + j)];
      if (!std::isnan(v)) {
        acc += v;
        ++cnt;
      }
    }
    mean[static_cast<std::size_t>(j)] = cnt > 0 ? acc / static_cast<double>(cnt) : 0.0;
    double var = 0;
    for (Index i = 0; i < N; ++i) {
      double v = xs[static_cast<std::size_t>(order[static_cast<std::size_t>(i)] * p + j)];
      if (std::isnan(v)) v = mean[static_cast<std::size_t>(j)];
      const double cdev = v - mean[static_cast<std::size_t>(j)];
      var += cdev * cdev;
    }
    var /= static_cast<double>(N);
    sd[static_cast<std::size_t>(j)] = std::sqrt(var);
  }

  Episode<S> ep;
  ep.X = Tensor<S>::zeros({N, p});
  ep.Y = Tensor<S>::zeros({N, q});
  ep.Xstar = Tensor<S>::zeros({M, p});
  ep.Ystar = Tensor<S>::zeros({M, q});
  auto fill = [&](Index row_out, Index row_in, Tensor<S>& X, Tensor<S>& Y) {
    for (Index j = 0; j < p; ++j) {
      double v = xs[static_cast<std::size_t>(row_in * p + j)];
      if (std::isnan(v)) v = mean[static_cast<std::size_t>(j)];
      const double s = sd[static_cast<std::size_t>(j)];
      v = s < 1e-12 ? 0.0 : (v - mean[static_cast<std::size_t>(j)]) / s;
      X(row_out, j) = static_cast<S>(v);
    }
    Y(row_out, labels[static_cast<std::size_t>(row_in)]) = S(1);
  };
  for (Index i = 0; i < N; ++i)
    fill(i, order[static_cast<std::size_t>(i)], ep.X, ep.Y);
  for (Index i = 0; i < M; ++i)
    fill(i, order[static_cast<std::size_t>(N + i)], ep.Xstar, ep.Ystar);
  validate_episode(ep);
  return ep;
}

}  // namespace equitab
