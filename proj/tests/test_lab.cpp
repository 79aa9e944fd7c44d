#include <cmath>

#include "doctest.h"
#include "equitab/lab.hpp"
#include "equitab/prior.hpp"
#include "equitab/trainer.hpp"

using namespace equitab;

namespace {

ModelConfig lab_cfg() {
  ModelConfig c;
  c.d = 16;
  c.n_layers = 4;
  c.n_heads = 2;
  c.hidden = 32;
  c.p_max = 8;
  c.decoder_hidden = 8;
  return c;
}

PriorConfig lab_prior(Index q) {
  PriorConfig c;
  c.n_min = 16;
  c.n_max = 24;
  c.m_min = 6;
  c.m_max = 10;
  c.p_min = 2;
  c.p_max = 4;
  c.q_min = q;
  c.q_max = q;
  return c;
}

template <class S>
std::vector<Episode<S>> make_episodes(const PriorConfig& pc, int count,
                                      std::uint64_t seed) {
  std::vector<Episode<S>> out;
  for (int i = 0; i < count; ++i)
    out.push_back(sample_episode<S>(pc, mix_seed(seed, seed_tag::task,
                                                 static_cast<std::uint64_t>(i))));
  return out;
}

// Ignores the episode and predicts class 0 with certainty.
template <class S>
Predictor<S> const_predictor() {
  return Predictor<S>{"const", [](const Episode<S>& ep) {
                        Tensor<S> out = Tensor<S>::zeros({ep.m(), ep.q()});
                        for (Index m = 0; m < ep.m(); ++m) out(m, 0) = S(1);
                        return out;
                      }};
}

}  // namespace

TEST_CASE("violation rate: equitab is zero, the baseline is not") {
  auto episodes = make_episodes<double>(lab_prior(5), 8, 3);
  auto equi = make_predictor(make_equitab_model<double>(lab_cfg(), 7));
  CHECK(violation_rate(equi, episodes, 5, 11) == 0.0);

  BaselineConfig bc{lab_cfg(), 5};
  auto fixed = make_predictor(make_fixedq_model<double>(bc, 7));
  CHECK(violation_rate(fixed, episodes, 5, 11) > 0.0);
}

TEST_CASE("violation rate: exhaustively symmetrized baseline is zero") {
  auto episodes = make_episodes<double>(lab_prior(3), 6, 5);
  BaselineConfig bc{lab_cfg(), 5};
  auto fixed = make_predictor(make_fixedq_model<double>(bc, 7));
  auto fbar = symmetrize(fixed, 3, SigmaMode::Exhaustive());
  CHECK(violation_rate(fbar, episodes, 6, 13) == 0.0);
}

TEST_CASE("symmetrize: an equivariant predictor is a fixed point") {
  auto episodes = make_episodes<double>(lab_prior(3), 4, 9);
  auto equi = make_predictor(make_equitab_model<double>(lab_cfg(), 21));
  auto sym = symmetrize(equi, 3, SigmaMode::Exhaustive());
  for (const auto& ep : episodes)
    CHECK(max_abs_diff(equi(ep), sym(ep)) < 1e-4);
}

TEST_CASE("symmetrize: constant predictor averages to uniform") {
  auto episodes = make_episodes<double>(lab_prior(2), 3, 1);
  auto f = const_predictor<double>();
  auto fbar = symmetrize(f, 2, SigmaMode::Exhaustive());
  for (const auto& ep : episodes) {
    auto probs = fbar(ep);
    for (Index m = 0; m < ep.m(); ++m) {
      CHECK(probs(m, 0) == doctest::Approx(0.5));
      CHECK(probs(m, 1) == doctest::Approx(0.5));
    }
  }
}

TEST_CASE("symmetrize: cost guard for large exhaustive sets") {
  auto f = const_predictor<double>();
  CHECK_THROWS_AS(symmetrize(f, 5, SigmaMode::Exhaustive()), CostGuardError);
  CHECK_NOTHROW(symmetrize(f, 5, SigmaMode::Exhaustive(true)));
}

TEST_CASE("symmetrize: sampled mode agrees with exhaustive in expectation") {
  auto episodes = make_episodes<double>(lab_prior(3), 2, 31);
  BaselineConfig bc{lab_cfg(), 5};
  auto fixed = make_predictor(make_fixedq_model<double>(bc, 3));
  auto exact = symmetrize(fixed, 3, SigmaMode::Exhaustive());
  const Episode<double>& ep = episodes[0];
  auto target = exact(ep);
  // 50 resamples of the sampled symmetrizer with n = q!; the mean agrees
  // with the exhaustive average within 3 standard errors, entrywise.
  const int resamples = 50;
  Tensord mean_acc = Tensord::zeros(target.shape());
  Tensord sq_acc = Tensord::zeros(target.shape());
  for (int r = 0; r < resamples; ++r) {
    auto sampled = symmetrize(fixed, 3, SigmaMode::Sampled(6, 1000 + r));
    auto probs = sampled(ep);
    for (Index i = 0; i < probs.numel(); ++i) {
      mean_acc.at(i) += probs.at(i);
      sq_acc.at(i) += probs.at(i) * probs.at(i);
    }
  }
  for (Index i = 0; i < target.numel(); ++i) {
    const double m = mean_acc.at(i) / resamples;
    const double var =
        std::max(0.0, sq_acc.at(i) / resamples - m * m) / (resamples - 1.0);
    const double se = std::sqrt(var);
    CHECK(std::abs(m - target.at(i)) <= 3.0 * se + 1e-9);
  }
}

TEST_CASE("gap: constant predictor at q=2 under squared loss has gap 1/2") {
  auto episodes = make_episodes<double>(lab_prior(2), 6, 17);
  auto f = const_predictor<double>();
  auto rep = gap_estimate(f, episodes, GapLoss::squared, SigmaMode::Exhaustive());
  CHECK(rep.gap == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(rep.gap_stderr == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(rep.sq_identity_rhs == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("gap: equitab model's gap vanishes within noise") {
  auto episodes = make_episodes<double>(lab_prior(3), 16, 23);
  auto equi = make_predictor(make_equitab_model<double>(lab_cfg(), 5));
  auto rep = gap_estimate(equi, episodes, GapLoss::cross_entropy,
                          SigmaMode::Exhaustive());
  CHECK(std::abs(rep.gap) <= 2.0 * rep.gap_stderr + 1e-9);
}

TEST_CASE("gap: baseline cross-entropy gap is non-negative (Jensen)") {
  auto episodes = make_episodes<double>(lab_prior(4), 24, 29);
  BaselineConfig bc{lab_cfg(), 5};
  auto fixed = make_predictor(make_fixedq_model<double>(bc, 13));
  auto rep = gap_estimate(fixed, episodes, GapLoss::cross_entropy,
                          SigmaMode::Exhaustive());
  CHECK(rep.gap >= -2.0 * rep.gap_stderr);
  CHECK(rep.gap > 0.0);  // random init is genuinely non-equivariant
}

TEST_CASE("gap: exhaustive squared-loss gap is never negative") {
  auto episodes = make_episodes<double>(lab_prior(3), 8, 37);
  BaselineConfig bc{lab_cfg(), 5};
  std::vector<Predictor<double>> predictors{
      const_predictor<double>(),
      make_predictor(make_fixedq_model<double>(bc, 41)),
      make_predictor(make_equitab_model<double>(lab_cfg(), 43)),
      make_knn_predictor<double>(3),
  };
  for (const auto& f : predictors) {
    auto rep = gap_estimate(f, episodes, GapLoss::squared, SigmaMode::Exhaustive());
    INFO(f.name);
    CHECK(rep.gap >= -1e-9);
  }
}

TEST_CASE("sq identity: exhaustive equality at 1e-6 on a fixed episode set") {
  auto episodes = make_episodes<double>(lab_prior(3), 32, 41);
  BaselineConfig bc{lab_cfg(), 5};
  auto fixed = make_predictor(make_fixedq_model<double>(bc, 47));
  auto res = sq_identity_check(fixed, episodes, SigmaMode::Exhaustive());
  INFO("lhs ", res.lhs, " rhs ", res.rhs, " diff ", res.difference);
  CHECK(res.pass);
  CHECK(res.difference <= 1e-6);
}

TEST_CASE("sq identity: equitab has both sides at zero") {
  auto episodes = make_episodes<double>(lab_prior(3), 8, 43);
  auto equi = make_predictor(make_equitab_model<double>(lab_cfg(), 3));
  auto res = sq_identity_check(equi, episodes, SigmaMode::Exhaustive());
  CHECK(res.pass);
  CHECK(std::abs(res.lhs) <= 1e-6);
  CHECK(std::abs(res.rhs) <= 1e-6);
}

TEST_CASE("sq identity: sampled mode within combined stderr at q=5") {
  auto episodes = make_episodes<double>(lab_prior(5), 24, 47);
  BaselineConfig bc{lab_cfg(), 5};
  auto fixed = make_predictor(make_fixedq_model<double>(bc, 53));
  auto res = sq_identity_check(fixed, episodes, SigmaMode::Sampled(12, 59));
  INFO("lhs ", res.lhs, " rhs ", res.rhs, " diff ", res.difference, " margin ",
       res.margin);
  CHECK(res.pass);
}

TEST_CASE("ensembling reduces the violation rate of a trained baseline") {
  // A lightly trained model carries real signal; permutation ensembling can
  // then stabilize the argmax. (At random init predictions are pure noise
  // and ensembled branches stay independent, so the rate would not move.)
  TrainConfig tc;
  tc.model = "fixedq";
  tc.total_batches = 150;
  tc.batch_size = 4;
  tc.lr_max = 3e-3;
  tc.warmup_batches = 15;
  tc.eval_every = 150;
  tc.eval_episodes = 4;
  tc.model_cfg = lab_cfg();
  tc.q_max = 5;
  tc.prior = lab_prior(5);
  tc.seed = 61;
  auto model = make_fixedq_model<float>(BaselineConfig{tc.model_cfg, tc.q_max}, 61);
  AdamState<float> adam;
  train_loop(model, adam, tc);

  auto episodes = make_episodes<float>(lab_prior(5), 16, 53);
  auto ens_pred = [&](Index n_ens) {
    return Predictor<float>{"fixedq.ens", [=](const Episode<float>& ep) mutable {
                              return ensemble_forward(ep, model.cfg, model.params,
                                                      n_ens, 71);
                            }};
  };
  const double v1 = violation_rate(ens_pred(1), episodes, 6, 83);
  const double v8 = violation_rate(ens_pred(8), episodes, 6, 83);
  CHECK(v1 > 0.0);
  CHECK(v8 < v1);
}

TEST_CASE("gap report format is stable") {
  auto episodes = make_episodes<double>(lab_prior(2), 3, 61);
  auto f = const_predictor<double>();
  auto rep = gap_estimate(f, episodes, GapLoss::squared, SigmaMode::Exhaustive());
  rep.violation_rate = 0.25;
  const std::string text = rep.format();
  CHECK(text.find("loss_f: ") != std::string::npos);
  CHECK(text.find("gap: ") != std::string::npos);
  CHECK(text.find("violation_rate: ") != std::string::npos);
  CHECK(text.find("exhaustive: true") != std::string::npos);
  const std::string line = rep.summary_line();
  CHECK(std::count(line.begin(), line.end(), '\t') == 9);
}
