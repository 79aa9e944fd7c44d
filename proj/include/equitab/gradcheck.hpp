#pragma once

// Central finite-difference audit of tape gradients, 64-bit only.
// For each watched input entry x_i the check compares
//   (L(x_i + h) - L(x_i - h)) / 2h     vs     tape gradient,
// with h = 1e-4 and relative error |fd - ad| / max(1, |fd|, |ad|).

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "equitab/ops.hpp"
#include "equitab/rng.hpp"
#include "equitab/tensor.hpp"

namespace equitab {

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0.0;
  Index checked = 0;
  bool pass = false;
};

constexpr double kGradCheckStep = 1e-4;
constexpr double kGradCheckTol = 1e-5;

// `make_loss` must rebuild the scalar loss from the current contents of
// `leaves` on the given tape. Leaves are perturbed in place.
inline GradCheckResult check_gradients(
    const std::string& name, std::vector<Tensord*> leaves,
    const std::function<Tensord(Tape<double>&)>& make_loss,
    double step = kGradCheckStep, double tol = kGradCheckTol) {
  GradCheckResult res;
  res.name = name;

  auto tape = Tape<double>::create();
  for (Tensord* leaf : leaves) tape->watch(*leaf);
  Tensord loss = make_loss(*tape);
  tape->backward(loss);
  std::vector<Tensord> grads;
  for (Tensord* leaf : leaves) grads.push_back(tape->grad(*leaf));

  auto eval = [&]() {
    auto t = Tape<double>::create();
    for (Tensord* leaf : leaves) t->watch(*leaf);
    return make_loss(*t).at(0);
  };

  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensord& leaf = *leaves[li];
    const Tensord& g = grads[li];
    for (Index i = 0; i < leaf.numel(); ++i) {
      const double x0 = leaf.at(i);
      leaf.at(i) = x0 + step;
      const double lp = eval();
      leaf.at(i) = x0 - step;
      const double lm = eval();
      leaf.at(i) = x0;
      const double fd = (lp - lm) / (2.0 * step);
      const double ad = g.defined() ? g.at(i) : 0.0;
      const double rel =
          std::abs(fd - ad) / std::max({1.0, std::abs(fd), std::abs(ad)});
      res.max_rel_err = std::max(res.max_rel_err, rel);
      ++res.checked;
    }
  }
  res.pass = res.max_rel_err <= tol;
  return res;
}

namespace detail {

inline Tensord random_tensord(Shape shape, Rng& rng, double scale = 1.0) {
  Tensord t = Tensord::zeros(std::move(shape));
  for (Index i = 0; i < t.numel(); ++i) t.at(i) = rng.normal(0.0, scale);
  return t;
}

}  // namespace detail

// Finite-difference checks for every differentiable primitive on random
// inputs of rank <= 4. The loss is a fixed random weighting of the output so
// every output entry contributes.
inline std::vector<GradCheckResult> run_primitive_gradchecks(
    std::uint64_t seed = 1234) {
  std::vector<GradCheckResult> out;
  Rng rng(seed);

  auto weighted = [](const Tensord& y, const Tensord& w) {
    return sum(mul(y, w));
  };

  {
    Tensord a = detail::random_tensord({2, 3, 4}, rng);
    Tensord b = detail::random_tensord({3, 4}, rng);
    Tensord w = detail::random_tensord({2, 3, 4}, rng);
    out.push_back(check_gradients("add.broadcast", {&a, &b}, [&](Tape<double>&) {
      return weighted(add(a, b), w);
    }));
    out.push_back(check_gradients("sub.broadcast", {&a, &b}, [&](Tape<double>&) {
      return weighted(sub(a, b), w);
    }));
    out.push_back(check_gradients("mul.broadcast", {&a, &b}, [&](Tape<double>&) {
      return weighted(mul(a, b), w);
    }));
  }
  {
    Tensord a = detail::random_tensord({3, 5}, rng);
    Tensord w = detail::random_tensord({3, 5}, rng);
    out.push_back(check_gradients("mul_scalar", {&a}, [&](Tape<double>&) {
      return weighted(mul_scalar(a, 1.7), w);
    }));
    out.push_back(check_gradients("add_scalar", {&a}, [&](Tape<double>&) {
      return weighted(add_scalar(a, -0.3), w);
    }));
  }
  {
    Tensord a = detail::random_tensord({2, 3, 4}, rng);
    Tensord b = detail::random_tensord({4, 5}, rng);
    Tensord w = detail::random_tensord({2, 3, 5}, rng);
    out.push_back(check_gradients("matmul.batched_flat", {&a, &b},
                                  [&](Tape<double>&) {
                                    return weighted(matmul(a, b), w);
                                  }));
  }
  {
    Tensord a = detail::random_tensord({2, 2, 3, 4}, rng);
    Tensord b = detail::random_tensord({2, 2, 4, 3}, rng);
    Tensord w = detail::random_tensord({2, 2, 3, 3}, rng);
    out.push_back(check_gradients("matmul.batched_pair", {&a, &b},
                                  [&](Tape<double>&) {
                                    return weighted(matmul(a, b), w);
                                  }));
  }
  {
    Tensord a = detail::random_tensord({1, 3, 4}, rng);
    Tensord b = detail::random_tensord({5, 4, 2}, rng);
    Tensord w = detail::random_tensord({5, 3, 2}, rng);
    out.push_back(check_gradients("matmul.broadcast_batch", {&a, &b},
                                  [&](Tape<double>&) {
                                    return weighted(matmul(a, b), w);
                                  }));
  }
  {
    Tensord a = detail::random_tensord({2, 3, 4}, rng);
    Tensord w = detail::random_tensord({4, 3, 2}, rng);
    out.push_back(check_gradients("transpose", {&a}, [&](Tape<double>&) {
      return weighted(transpose(a, 0, 2), w);
    }));
  }
  {
    Tensord a = detail::random_tensord({2, 12}, rng);
    Tensord w = detail::random_tensord({2, 3, 4}, rng);
    out.push_back(check_gradients("reshape", {&a}, [&](Tape<double>&) {
      return weighted(reshape(a, {2, 3, 4}), w);
    }));
  }
  {
    Tensord a = detail::random_tensord({3, 6, 2}, rng);
    Tensord w = detail::random_tensord({3, 3, 2}, rng);
    out.push_back(check_gradients("slice", {&a}, [&](Tape<double>&) {
      return weighted(slice(a, 1, 2, 3), w);
    }));
  }
  {
    Tensord a = detail::random_tensord({2, 2, 3}, rng);
    Tensord b = detail::random_tensord({2, 4, 3}, rng);
    Tensord w = detail::random_tensord({2, 6, 3}, rng);
    out.push_back(check_gradients("concat", {&a, &b}, [&](Tape<double>&) {
      return weighted(concat<double>({a, b}, 1), w);
    }));
  }
  {
    Tensord a = detail::random_tensord({1, 4, 1}, rng);
    Tensord w = detail::random_tensord({3, 4, 2}, rng);
    out.push_back(check_gradients("broadcast_to", {&a}, [&](Tape<double>&) {
      return weighted(broadcast_to(a, {3, 4, 2}), w);
    }));
  }
  {
    Tensord a = detail::random_tensord({4, 6}, rng, 2.0);
    Tensord w = detail::random_tensord({4, 6}, rng);
    out.push_back(check_gradients("softmax", {&a}, [&](Tape<double>&) {
      return weighted(softmax(a), w);
    }));
    Tensord mask = Tensord::zeros({4, 6});
    Rng mrng(seed + 1);
    for (Index i = 0; i < mask.numel(); ++i)
      mask.at(i) = mrng.uniform() < 0.6 ? 1.0 : 0.0;
    for (Index r = 0; r < 4; ++r) mask.at(r * 6 + (r % 6)) = 1.0;
    out.push_back(check_gradients("softmax_masked", {&a}, [&](Tape<double>&) {
      return weighted(softmax_masked(a, mask), w);
    }));
  }
  {
    Tensord x = detail::random_tensord({3, 5, 7}, rng);
    Tensord gain = detail::random_tensord({7}, rng, 0.5);
    Tensord bias = detail::random_tensord({7}, rng, 0.5);
    Tensord w = detail::random_tensord({3, 5, 7}, rng);
    out.push_back(check_gradients("layer_norm", {&x, &gain, &bias},
                                  [&](Tape<double>&) {
                                    return weighted(layer_norm(x, gain, bias, 1e-5), w);
                                  }));
  }
  {
    Tensord x = detail::random_tensord({4, 9}, rng, 1.5);
    Tensord w = detail::random_tensord({4, 9}, rng);
    out.push_back(check_gradients("gelu", {&x}, [&](Tape<double>&) {
      return weighted(gelu(x), w);
    }));
  }
  {
    Tensord x = detail::random_tensord({3, 4, 2}, rng);
    out.push_back(check_gradients("sum", {&x}, [&](Tape<double>&) {
      return sum(x);
    }));
    out.push_back(check_gradients("mean", {&x}, [&](Tape<double>&) {
      return mean(x);
    }));
  }
  {
    const Index q = 5, rows = 6;
    Tensord logits = detail::random_tensord({rows, q}, rng, 2.0);
    Tensord targets = Tensord::zeros({rows, q});
    Rng trng(seed + 2);
    for (Index r = 0; r < rows; ++r)
      targets.at(r * q + trng.uniform_int(0, q - 1)) = 1.0;
    out.push_back(check_gradients("cross_entropy_from_logits", {&logits},
                                  [&](Tape<double>&) {
                                    return cross_entropy_from_logits(logits, targets);
                                  }));
  }
  return out;
}

}  // namespace equitab
