#include <cmath>
#include <vector>

#include "doctest.h"
#include "equitab/baseline_model.hpp"
#include "equitab/equitab_model.hpp"
#include "equitab/gradcheck.hpp"
#include "equitab/prior.hpp"

using namespace equitab;

namespace {

ModelConfig tiny_cfg() {
  ModelConfig c;
  c.d = 16;
  c.n_layers = 4;
  c.n_heads = 2;
  c.hidden = 32;
  c.p_max = 8;
  c.decoder_hidden = 8;
  return c;
}

PriorConfig eval_prior(Index q_lo, Index q_hi) {
  PriorConfig c;
  c.n_min = 20;
  c.n_max = 40;
  c.m_min = 8;
  c.m_max = 16;
  c.p_min = 2;
  c.p_max = 6;
  c.q_min = q_lo;
  c.q_max = q_hi;
  c.separation = 3.0;
  return c;
}

// Max abs deviation of Eq.-2 style equivariance: sigma^-1(f(sigma(ep))) vs
// f(ep), over explicit permutations.
template <class S, class Fwd>
double equivariance_deviation(const Episode<S>& ep, Fwd&& fwd,
                              const std::vector<PermutationSpec>& perms) {
  Tensor<S> base = fwd(ep);
  double dev = 0;
  for (const PermutationSpec& perm : perms) {
    Tensor<S> moved = fwd(permute_targets(ep, perm));
    dev = std::max(dev, max_abs_diff(apply_inverse_permutation(moved, perm), base));
  }
  return dev;
}

template <class S>
std::vector<PermutationSpec> random_perms(int q, int count, std::uint64_t seed) {
  Rng rng(mix_seed(seed, seed_tag::perm));
  std::vector<PermutationSpec> out;
  for (int i = 0; i < count; ++i) out.push_back(PermutationSpec::random(q, rng));
  return out;
}

}  // namespace

TEST_CASE("encode: one-hot targets scale the shared component vector") {
  ModelConfig cfg = tiny_cfg();
  auto params = init_equi_params<double>(cfg, 1);
  PriorConfig pc = eval_prior(3, 3);
  auto ep = sample_episode<double>(pc, 2);
  auto batch = EpisodeBatch<double>::of(ep);
  auto grid = encode(batch, cfg, params);
  REQUIRE(grid.shape() == Shape{1, ep.n() + ep.m(), ep.q() + 1, cfg.d});
  auto labels = labels_of(ep.Y);
  for (Index i = 0; i < ep.n(); ++i) {
    for (Index j = 0; j < ep.q(); ++j) {
      for (Index u = 0; u < cfg.d; ++u) {
        const double want =
            (j == labels[static_cast<std::size_t>(i)]) ? params.v.at(u) : 0.0;
        CHECK(grid(0, i, j + 1, u) == want);
      }
    }
  }
  // test rows hold the prediction token in every target slot
  for (Index i = 0; i < ep.m(); ++i)
    for (Index j = 0; j < ep.q(); ++j)
      for (Index u = 0; u < cfg.d; ++u)
        CHECK(grid(0, ep.n() + i, j + 1, u) == params.w_pred.at(u));
}

TEST_CASE("encode: zero covariates produce zero covariate tokens") {
  ModelConfig cfg = tiny_cfg();
  auto params = init_equi_params<double>(cfg, 1);
  Episode<double> ep;
  ep.X = Tensord::zeros({3, 2});
  ep.Y = Tensord::from({3, 2}, {1, 0, 0, 1, 1, 0});
  ep.Xstar = Tensord::zeros({1, 2});
  ep.Ystar = Tensord::from({1, 2}, {1, 0});
  auto grid = encode(EpisodeBatch<double>::of(ep), cfg, params);
  for (Index t = 0; t < 4; ++t)
    for (Index u = 0; u < cfg.d; ++u) CHECK(grid(0, t, 0, u) == 0.0);
}

TEST_CASE("encode: permuted targets reindex exactly the target slots") {
  ModelConfig cfg = tiny_cfg();
  auto params = init_equi_params<double>(cfg, 3);
  auto ep = sample_episode<double>(eval_prior(4, 4), 5);
  auto batch = EpisodeBatch<double>::of(ep);
  auto grid = encode(batch, cfg, params);
  auto perm = PermutationSpec::from_sigma({2, 0, 3, 1});
  auto moved = encode(EpisodeBatch<double>::of(permute_targets(ep, perm)), cfg, params);
  const Index T = ep.n() + ep.m();
  for (Index t = 0; t < T; ++t) {
    for (Index u = 0; u < cfg.d; ++u) {
      CHECK(moved(0, t, 0, u) == grid(0, t, 0, u));
      for (Index j = 0; j < 4; ++j)
        CHECK(moved(0, t, j + 1, u) ==
              grid(0, t, perm.sigma[static_cast<std::size_t>(j)] + 1, u));
    }
  }
}

TEST_CASE("encode: p above capacity raises") {
  ModelConfig cfg = tiny_cfg();
  cfg.p_max = 2;
  auto params = init_equi_params<double>(cfg, 1);
  auto ep = sample_episode<double>(eval_prior(3, 3), 1);  // p in [2,6]
  PriorConfig pc = eval_prior(3, 3);
  pc.p_min = pc.p_max = 4;
  ep = sample_episode<double>(pc, 1);
  CHECK_THROWS_AS(encode(EpisodeBatch<double>::of(ep), cfg, params), CapacityError);
}

TEST_CASE("attend_components: target slots depend only on the covariate token") {
  ModelConfig cfg = tiny_cfg();
  auto params = init_equi_params<double>(cfg, 7);
  Rng rng(11);
  const Index B = 2, T = 3, s = 5, d = cfg.d;
  auto grid = Tensord::zeros({B, T, s, d});
  for (Index i = 0; i < grid.numel(); ++i) grid.at(i) = rng.normal();
  auto out = attend_components(grid, cfg, params.layers[0]);

  // zero every target slot except j = 2 and compare slot 2 outputs
  auto ablated = grid.clone();
  for (Index b = 0; b < B; ++b)
    for (Index t = 0; t < T; ++t)
      for (Index j = 1; j < s; ++j)
        if (j != 2)
          for (Index u = 0; u < d; ++u) ablated(b, t, j, u) = 0.0;
  auto out2 = attend_components(ablated, cfg, params.layers[0]);
  for (Index b = 0; b < B; ++b)
    for (Index t = 0; t < T; ++t)
      for (Index u = 0; u < d; ++u)
        CHECK(out2(b, t, 2, u) == doctest::Approx(out(b, t, 2, u)).epsilon(1e-12));
}

TEST_CASE("attend_components: slot permutation equivariance") {
  ModelConfig cfg = tiny_cfg();
  auto params = init_equi_params<double>(cfg, 7);
  Rng rng(13);
  const Index B = 2, T = 4, s = 6, d = cfg.d;
  auto grid = Tensord::zeros({B, T, s, d});
  for (Index i = 0; i < grid.numel(); ++i) grid.at(i) = rng.normal();
  auto out = attend_components(grid, cfg, params.layers[0]);
  auto perm = PermutationSpec::random(static_cast<int>(s - 1), rng);
  // permute target slots 1..s-1 of the input, run, un-permute the output
  auto permuted = Tensord::zeros({B, T, s, d});
  for (Index b = 0; b < B; ++b)
    for (Index t = 0; t < T; ++t)
      for (Index u = 0; u < d; ++u) {
        permuted(b, t, 0, u) = grid(b, t, 0, u);
        for (Index j = 1; j < s; ++j)
          permuted(b, t, j, u) =
              grid(b, t, perm.sigma[static_cast<std::size_t>(j - 1)] + 1, u);
      }
  auto out_p = attend_components(permuted, cfg, params.layers[0]);
  for (Index b = 0; b < B; ++b)
    for (Index t = 0; t < T; ++t)
      for (Index u = 0; u < d; ++u) {
        CHECK(out_p(b, t, 0, u) == doctest::Approx(out(b, t, 0, u)).epsilon(1e-9));
        for (Index j = 1; j < s; ++j)
          CHECK(out_p(b, t, j, u) ==
                doctest::Approx(out(b, t, perm.sigma[static_cast<std::size_t>(j - 1)] + 1, u))
                    .epsilon(1e-9));
      }
}

TEST_CASE("attend_components: degenerate minimal grid keeps its shape") {
  ModelConfig cfg = tiny_cfg();
  auto params = init_equi_params<double>(cfg, 1);
  auto grid = Tensord::full({1, 1, 2, cfg.d}, 0.5);
  auto out = attend_components(grid, cfg, params.layers[0]);
  CHECK(out.shape() == Shape{1, 1, 2, cfg.d});
}

TEST_CASE("attend_datapoints: train-row shuffle leaves test rows unchanged") {
  ModelConfig cfg = tiny_cfg();
  auto params = init_equi_params<double>(cfg, 9);
  Rng rng(17);
  const Index B = 1, N = 6, M = 3, s = 4, d = cfg.d;
  auto grid = Tensord::zeros({B, N + M, s, d});
  for (Index i = 0; i < grid.numel(); ++i) grid.at(i) = rng.normal();
  auto out = attend_datapoints(grid, cfg, params.layers[1], N);
  auto order = rng.permutation(static_cast<int>(N));
  auto shuffled = grid.clone();
  for (Index i = 0; i < N; ++i)
    for (Index j = 0; j < s; ++j)
      for (Index u = 0; u < d; ++u)
        shuffled(0, i, j, u) = grid(0, order[static_cast<std::size_t>(i)], j, u);
  auto out_s = attend_datapoints(shuffled, cfg, params.layers[1], N);
  for (Index i = 0; i < M; ++i)
    for (Index j = 0; j < s; ++j)
      for (Index u = 0; u < d; ++u)
        CHECK(out_s(0, N + i, j, u) ==
              doctest::Approx(out(0, N + i, j, u)).epsilon(1e-9));
}

TEST_CASE("attend_datapoints: dropping a test row changes nothing else") {
  ModelConfig cfg = tiny_cfg();
  auto params = init_equi_params<double>(cfg, 9);
  Rng rng(19);
  const Index N = 5, M = 3, s = 3, d = cfg.d;
  auto grid = Tensord::zeros({1, N + M, s, d});
  for (Index i = 0; i < grid.numel(); ++i) grid.at(i) = rng.normal();
  auto out = attend_datapoints(grid, cfg, params.layers[1], N);
  // drop the last test row
  auto smaller = Tensord::zeros({1, N + M - 1, s, d});
  for (Index t = 0; t < N + M - 1; ++t)
    for (Index j = 0; j < s; ++j)
      for (Index u = 0; u < d; ++u) smaller(0, t, j, u) = grid(0, t, j, u);
  auto out_s = attend_datapoints(smaller, cfg, params.layers[1], N);
  for (Index t = 0; t < N + M - 1; ++t)
    for (Index j = 0; j < s; ++j)
      for (Index u = 0; u < d; ++u)
        CHECK(out_s(0, t, j, u) == doctest::Approx(out(0, t, j, u)).epsilon(1e-9));
}

TEST_CASE("attend_datapoints: N=1 collapses attention onto the single key") {
  ModelConfig cfg = tiny_cfg();
  auto params = init_equi_params<double>(cfg, 21);
  Rng rng(23);
  const Index N = 1, M = 4, s = 3, d = cfg.d;
  auto grid = Tensord::zeros({1, N + M, s, d});
  for (Index i = 0; i < grid.numel(); ++i) grid.at(i) = rng.normal();
  // With one admissible key every attention row must produce the same
  // context vector: the value projection of the single training row.
  auto out = attend_datapoints(grid, cfg, params.layers[1], N);
  CHECK(out.shape() == Shape{1, N + M, s, d});
  // rows with identical input state and a single shared key agree exactly:
  // feed two identical test rows and compare their outputs
  auto grid2 = grid.clone();
  for (Index j = 0; j < s; ++j)
    for (Index u = 0; u < d; ++u) grid2(0, 2, j, u) = grid2(0, 1, j, u);
  auto out2 = attend_datapoints(grid2, cfg, params.layers[1], N);
  for (Index j = 0; j < s; ++j)
    for (Index u = 0; u < d; ++u)
      CHECK(out2(0, 1, j, u) == doctest::Approx(out2(0, 2, j, u)).epsilon(1e-12));
  CHECK_THROWS_AS(attend_datapoints(grid, cfg, params.layers[1], 0),
                  EmptyContextError);
}

TEST_CASE("backbone: shape preserved, dual precision agreement, equivariance") {
  ModelConfig cfg = tiny_cfg();
  auto paramsd = init_equi_params<double>(cfg, 31);
  auto ep = sample_episode<double>(eval_prior(3, 5), 41);
  auto batch = EpisodeBatch<double>::of(ep);
  auto grid = encode(batch, cfg, paramsd);
  auto out = backbone(grid.clone(), cfg, paramsd, ep.n());
  CHECK(out.shape() == grid.shape());

  // 32-bit and 64-bit runs agree within 1e-3 on a small grid
  auto paramsf = init_equi_params<float>(cfg, 31);
  // same seed gives identical doubles rounded to float
  auto epf = sample_episode<float>(eval_prior(3, 5), 41);
  auto outf = equitab_logits(EpisodeBatch<float>::of(epf), cfg, paramsf);
  auto outd = equitab_logits(batch, cfg, paramsd);
  CHECK(max_abs_diff(outf.template cast<double>(), outd.template cast<double>().template cast<double>()) < 1e-3);

  // end-to-end grid permutation equivariance through the backbone
  auto fwd = [&](const Episode<double>& e) {
    return equitab_forward(e, cfg, paramsd);
  };
  const double dev = equivariance_deviation<double>(
      ep, fwd, random_perms<double>(static_cast<int>(ep.q()), 8, 55));
  CHECK(dev < 1e-4);
}

TEST_CASE("decode: uniform attention collapse and single-key exactness") {
  ModelConfig cfg = tiny_cfg();
  auto params = init_equi_params<double>(cfg, 3);
  // zero decoder correction so logits equal the attention average
  params.dec_w1 = Tensord::zeros(params.dec_w1.shape());
  params.dec_b1 = Tensord::zeros(params.dec_b1.shape());
  params.dec_w2 = Tensord::zeros(params.dec_w2.shape());
  params.dec_b2 = Tensord::zeros(params.dec_b2.shape());

  // all-zero embeddings -> uniform attention -> column mean of Y
  auto grid = Tensord::zeros({1, 4, 3, cfg.d});
  auto Y = Tensord::from({1, 2, 2}, {1, 0, 0, 1});
  auto logits = decode(grid, Y, cfg, params);
  CHECK(logits(0, 0, 0) == doctest::Approx(0.5));
  CHECK(logits(0, 0, 1) == doctest::Approx(0.5));
  CHECK(logits(0, 1, 0) == doctest::Approx(0.5));

  // N = 1: the single softmax key returns y_1 exactly
  Rng rng(5);
  auto grid1 = Tensord::zeros({1, 3, 3, cfg.d});
  for (Index i = 0; i < grid1.numel(); ++i) grid1.at(i) = rng.normal();
  auto Y1 = Tensord::from({1, 1, 2}, {0, 1});
  auto logits1 = decode(grid1, Y1, cfg, params);
  for (Index m = 0; m < 2; ++m) {
    CHECK(logits1(0, m, 0) == 0.0);
    CHECK(logits1(0, m, 1) == 1.0);
  }
}

TEST_CASE("decode: with zeroed target encoding the decoder is a linear "
          "non-parametric estimator on the simplex") {
  ModelConfig cfg = tiny_cfg();
  auto params = init_equi_params<double>(cfg, 77);
  params.v = Tensord::zeros(params.v.shape());
  params.w_pred = Tensord::zeros(params.w_pred.shape());
  params.dec_w1 = Tensord::zeros(params.dec_w1.shape());
  params.dec_b1 = Tensord::zeros(params.dec_b1.shape());
  params.dec_w2 = Tensord::zeros(params.dec_w2.shape());
  params.dec_b2 = Tensord::zeros(params.dec_b2.shape());
  auto ep = sample_episode<double>(eval_prior(3, 4), 91);
  auto logits = equitab_logits(EpisodeBatch<double>::of(ep), cfg, params);
  for (Index m = 0; m < ep.m(); ++m) {
    double sum = 0;
    for (Index j = 0; j < ep.q(); ++j) {
      const double v = logits(0, m, j);
      CHECK(v >= -1e-6);
      sum += v;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("forward: target equivariance at random init, 32- and 64-bit") {
  ModelConfig cfg = tiny_cfg();
  auto paramsf = init_equi_params<float>(cfg, 111);
  auto paramsd = init_equi_params<double>(cfg, 111);
  Rng seeds(1);
  for (int trial = 0; trial < 4; ++trial) {
    const Index q = 2 + 4 * trial;  // 2, 6, 10, 14
    PriorConfig pc = eval_prior(q, q);
    auto epd = sample_episode<double>(pc, static_cast<std::uint64_t>(trial + 7));
    auto epf = sample_episode<float>(pc, static_cast<std::uint64_t>(trial + 7));
    auto perms = random_perms<double>(static_cast<int>(q), 5,
                                      static_cast<std::uint64_t>(trial));
    auto fwd_f = [&](const Episode<float>& e) {
      return equitab_forward(e, cfg, paramsf);
    };
    auto fwd_d = [&](const Episode<double>& e) {
      return equitab_forward(e, cfg, paramsd);
    };
    CHECK(equivariance_deviation<float>(epf, fwd_f, perms) < 1e-4);
    CHECK(equivariance_deviation<double>(epd, fwd_d, perms) < 1e-8);
  }
}

TEST_CASE("forward: an unseen q=13 episode runs and yields probability rows") {
  ModelConfig cfg = tiny_cfg();
  auto params = init_equi_params<double>(cfg, 5);
  PriorConfig pc = eval_prior(13, 13);
  auto ep = sample_episode<double>(pc, 3);
  auto probs = equitab_forward(ep, cfg, params);
  REQUIRE(probs.shape() == Shape{ep.m(), 13});
  for (Index m = 0; m < ep.m(); ++m) {
    double sum = 0;
    for (Index j = 0; j < 13; ++j) {
      CHECK(probs(m, j) >= 0.0);
      sum += probs(m, j);
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("full-loss gradient check on a tiny equitab config") {
  ModelConfig cfg;
  cfg.d = 8;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.hidden = 16;
  cfg.p_max = 4;
  cfg.decoder_hidden = 4;
  auto params = init_equi_params<double>(cfg, 13);
  PriorConfig pc;
  pc.n_min = 5;
  pc.n_max = 5;
  pc.m_min = 3;
  pc.m_max = 3;
  pc.p_min = 3;
  pc.p_max = 3;
  pc.q_min = 3;
  pc.q_max = 3;
  auto batch = EpisodeBatch<double>::of(sample_episode<double>(pc, 2));
  std::vector<Tensord*> leaves;
  params.visit([&](const std::string&, Tensord& t) { leaves.push_back(&t); });
  auto res = check_gradients("equitab.loss", leaves, [&](Tape<double>&) {
    return cross_entropy_from_logits(equitab_logits(batch, cfg, params),
                                     batch.Ystar);
  });
  INFO("max rel err ", res.max_rel_err, " over ", res.checked, " entries");
  CHECK(res.pass);
}

TEST_CASE("full-loss gradient check on a tiny baseline config") {
  BaselineConfig cfg;
  cfg.core.d = 8;
  cfg.core.n_layers = 2;
  cfg.core.n_heads = 2;
  cfg.core.hidden = 16;
  cfg.core.p_max = 4;
  cfg.core.decoder_hidden = 4;
  cfg.q_max = 4;
  auto params = init_baseline_params<double>(cfg, 13);
  PriorConfig pc;
  pc.n_min = 5;
  pc.n_max = 5;
  pc.m_min = 3;
  pc.m_max = 3;
  pc.p_min = 3;
  pc.p_max = 3;
  pc.q_min = 3;
  pc.q_max = 3;
  auto batch = EpisodeBatch<double>::of(sample_episode<double>(pc, 2));
  std::vector<Tensord*> leaves;
  params.visit([&](const std::string&, Tensord& t) { leaves.push_back(&t); });
  auto res = check_gradients("baseline.loss", leaves, [&](Tape<double>&) {
    return cross_entropy_from_logits(baseline_logits(batch, cfg, params),
                                     batch.Ystar);
  });
  INFO("max rel err ", res.max_rel_err, " over ", res.checked, " entries");
  CHECK(res.pass);
}

TEST_CASE("baseline: N=1 episode yields a valid probability row") {
  BaselineConfig cfg;
  cfg.core = tiny_cfg();
  cfg.q_max = 5;
  auto params = init_baseline_params<double>(cfg, 3);
  Episode<double> ep;
  ep.X = Tensord::from({1, 2}, {0.3, -0.4});
  ep.Y = Tensord::from({1, 2}, {1, 0});
  ep.Xstar = Tensord::from({2, 2}, {0.1, 0.2, -0.5, 0.7});
  ep.Ystar = Tensord::from({2, 2}, {1, 0, 0, 1});
  auto probs = baseline_forward(ep, cfg, params);
  for (Index m = 0; m < 2; ++m) {
    double sum = 0;
    for (Index j = 0; j < 2; ++j) {
      CHECK(probs(m, j) >= 0.0);
      sum += probs(m, j);
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("baseline: genuinely non-equivariant at random init") {
  BaselineConfig cfg;
  cfg.core = tiny_cfg();
  cfg.q_max = 5;
  auto params = init_baseline_params<double>(cfg, 3);
  auto ep = sample_episode<double>(eval_prior(5, 5), 11);
  auto fwd = [&](const Episode<double>& e) {
    return baseline_forward(e, cfg, params);
  };
  const double dev = equivariance_deviation<double>(
      ep, fwd, random_perms<double>(5, 8, 2));
  CHECK(dev > 1e-3);
}

TEST_CASE("baseline: train-row shuffle invariance still holds") {
  BaselineConfig cfg;
  cfg.core = tiny_cfg();
  cfg.q_max = 5;
  auto params = init_baseline_params<double>(cfg, 3);
  auto ep = sample_episode<double>(eval_prior(3, 5), 13);
  auto base = baseline_forward(ep, cfg, params);
  Rng rng(3);
  auto order = rng.permutation(static_cast<int>(ep.n()));
  Episode<double> shuffled = ep;
  shuffled.X = Tensord::zeros(ep.X.shape());
  shuffled.Y = Tensord::zeros(ep.Y.shape());
  for (Index i = 0; i < ep.n(); ++i) {
    for (Index j = 0; j < ep.p(); ++j)
      shuffled.X(i, j) = ep.X(order[static_cast<std::size_t>(i)], j);
    for (Index j = 0; j < ep.q(); ++j)
      shuffled.Y(i, j) = ep.Y(order[static_cast<std::size_t>(i)], j);
  }
  auto moved = baseline_forward(shuffled, cfg, params);
  CHECK(max_abs_diff(base, moved) < 1e-4);
}

TEST_CASE("baseline: q above capacity points to the ECOC wrapper") {
  BaselineConfig cfg;
  cfg.core = tiny_cfg();
  cfg.q_max = 3;
  auto params = init_baseline_params<double>(cfg, 3);
  auto ep = sample_episode<double>(eval_prior(5, 5), 1);
  CHECK_THROWS_WITH_AS(baseline_forward(ep, cfg, params),
                       doctest::Contains("ecoc_forward"), CapacityError);
}

TEST_CASE("ensemble_forward: identity permutation equals the plain model") {
  BaselineConfig cfg;
  cfg.core = tiny_cfg();
  cfg.q_max = 5;
  auto params = init_baseline_params<double>(cfg, 3);
  auto ep = sample_episode<double>(eval_prior(4, 4), 5);
  auto plain = baseline_forward(ep, cfg, params);
  auto ens = ensemble_forward(ep, cfg, params, {PermutationSpec::identity(4)});
  CHECK(max_abs_diff(plain, ens) == 0.0);
}

TEST_CASE("ensemble_forward: exhaustive permutations symmetrize exactly") {
  BaselineConfig cfg;
  cfg.core = tiny_cfg();
  cfg.q_max = 5;
  auto params = init_baseline_params<double>(cfg, 3);
  auto ep = sample_episode<double>(eval_prior(3, 3), 7);
  auto perms = all_permutations(3);
  REQUIRE(perms.size() == 6);
  auto fbar = [&](const Episode<double>& e) {
    return ensemble_forward(e, cfg, params, all_permutations(3));
  };
  const double dev = equivariance_deviation<double>(ep, fbar, perms);
  CHECK(dev < 1e-10);
  // deterministic in seed and rows remain on the simplex
  auto e1 = ensemble_forward(ep, cfg, params, 4, 99);
  auto e2 = ensemble_forward(ep, cfg, params, 4, 99);
  CHECK(max_abs_diff(e1, e2) == 0.0);
  for (Index m = 0; m < ep.m(); ++m) {
    double sum = 0;
    for (Index j = 0; j < 3; ++j) {
      CHECK(e1(m, j) >= 0.0);
      sum += e1(m, j);
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("codebook construction") {
  // K <= q_max -> single identity partition
  auto cb = build_codebook(4, 5, 1);
  REQUIRE(cb.partitions.size() == 1);
  for (int c = 0; c < 4; ++c) CHECK(cb.partitions[0][static_cast<std::size_t>(c)] == c);

  // K=12, q_max=10 -> at least 2 partitions with verified coverage
  auto cb2 = build_codebook(12, 10, 3);
  CHECK(cb2.partitions.size() >= 2);
  CHECK(codebook_covers(cb2));

  // K=4, q_max=2 -> binary partitions, at least ceil(log2 4) = 2 of them
  auto cb3 = build_codebook(4, 2, 7);
  CHECK(cb3.partitions.size() >= 2);
  CHECK(codebook_covers(cb3));
  for (const auto& part : cb3.partitions)
    for (int v : part) CHECK(v < 2);

  // determinism
  auto cb4 = build_codebook(12, 10, 3);
  CHECK(cb4.partitions == cb2.partitions);

  // all-pairs coverage by enumeration for K up to 30
  for (int k = 2; k <= 30; ++k) {
    auto cbk = build_codebook(k, 5, static_cast<std::uint64_t>(k));
    CHECK(codebook_covers(cbk));
  }
}

TEST_CASE("ecoc_forward: noiseless oracle decode recovers the true class") {
  // Synthetic sub-predictor: probability 1 on the true group. Simulated by
  // aggregating scores directly through the codebook identity used in
  // ecoc_forward: log 1 = 0 for the right group in every partition and a
  // clamp elsewhere separates every class pair by coverage.
  const int K = 9, qmax = 4;
  auto cb = build_codebook(K, qmax, 5);
  REQUIRE(codebook_covers(cb));
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const int truth = static_cast<int>(rng.uniform_int(0, K - 1));
    std::vector<double> score(static_cast<std::size_t>(K), 0.0);
    for (std::size_t r = 0; r < cb.partitions.size(); ++r) {
      const auto& part = cb.partitions[r];
      for (int c = 0; c < K; ++c) {
        const double p = part[static_cast<std::size_t>(c)] ==
                                 part[static_cast<std::size_t>(truth)]
                             ? 1.0
                             : 0.0;
        score[static_cast<std::size_t>(c)] += std::log(std::max(p, 1e-300));
      }
    }
    int best = 0;
    for (int c = 1; c < K; ++c)
      if (score[static_cast<std::size_t>(c)] > score[static_cast<std::size_t>(best)])
        best = c;
    CHECK(best == truth);
  }
}

TEST_CASE("ecoc_forward: identity codebook path equals baseline_forward") {
  BaselineConfig cfg;
  cfg.core = tiny_cfg();
  cfg.q_max = 5;
  auto params = init_baseline_params<double>(cfg, 3);
  auto ep = sample_episode<double>(eval_prior(4, 4), 9);
  auto cb = build_codebook(4, 5, 1);
  auto via_ecoc = ecoc_forward(ep, cfg, params, cb);
  auto plain = baseline_forward(ep, cfg, params);
  CHECK(max_abs_diff(via_ecoc, plain) == 0.0);
}

TEST_CASE("ecoc_forward: q beyond capacity produces valid wide rows") {
  BaselineConfig cfg;
  cfg.core = tiny_cfg();
  cfg.q_max = 4;
  auto params = init_baseline_params<double>(cfg, 3);
  PriorConfig pc = eval_prior(7, 7);
  auto ep = sample_episode<double>(pc, 19);
  auto cb = build_codebook(7, 4, 2);
  auto probs = ecoc_forward(ep, cfg, params, cb);
  REQUIRE(probs.shape() == Shape{ep.m(), 7});
  for (Index m = 0; m < ep.m(); ++m) {
    double sum = 0;
    for (Index j = 0; j < 7; ++j) {
      CHECK(probs(m, j) >= 0.0);
      sum += probs(m, j);
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
  }
  // codebook mismatch is rejected
  auto bad = build_codebook(6, 4, 2);
  CHECK_THROWS_AS(ecoc_forward(ep, cfg, params, bad), ConfigError);
}

TEST_CASE("equitab loss is invariant to target permutations of any episode") {
  ModelConfig cfg = tiny_cfg();
  auto params = init_equi_params<double>(cfg, 81);
  PriorConfig pc = eval_prior(4, 4);
  auto batch = sample_batch<double>(pc, 3, 17);
  auto base = cross_entropy_from_logits(equitab_logits(batch, cfg, params),
                                        batch.Ystar);
  Rng rng(6);
  auto perm = PermutationSpec::random(4, rng);
  // permute one episode of the batch
  std::vector<Episode<double>> eps;
  for (Index b = 0; b < 3; ++b) eps.push_back(batch.episode(b));
  eps[1] = permute_targets(eps[1], perm);
  auto moved = EpisodeBatch<double>::stack(eps);
  auto loss2 = cross_entropy_from_logits(equitab_logits(moved, cfg, params),
                                         moved.Ystar);
  CHECK(std::abs(base.at(0) - loss2.at(0)) < 1e-4);
}
