#include <algorithm>
#include <filesystem>
#include <sstream>

#include "doctest.h"
#include "equitab/trainer.hpp"

using namespace equitab;

namespace {

TrainConfig tiny_train(const std::string& model, std::uint64_t seed) {
  TrainConfig c;
  c.model = model;
  c.total_batches = 200;
  c.batch_size = 4;
  c.lr_max = 3e-3;
  c.warmup_batches = 20;
  c.seed = seed;
  c.eval_every = 100;
  c.eval_episodes = 8;
  c.model_cfg.d = 16;
  c.model_cfg.n_layers = 2;
  c.model_cfg.n_heads = 2;
  c.model_cfg.hidden = 32;
  c.model_cfg.p_max = 4;
  c.model_cfg.decoder_hidden = 8;
  c.q_max = 3;
  c.prior.n_min = 8;
  c.prior.n_max = 16;
  c.prior.m_min = 4;
  c.prior.m_max = 8;
  c.prior.p_min = 2;
  c.prior.p_max = 3;
  c.prior.q_min = 2;
  c.prior.q_max = 3;
  c.prior.separation = 3.0;
  return c;
}

}  // namespace

TEST_CASE("lr schedule: ramp apex, cosine terminus, cosine midpoint") {
  TrainConfig cfg;
  cfg.total_batches = 1000;
  cfg.warmup_batches = 100;
  cfg.lr_max = 2e-4;
  CHECK(lr_at(0, cfg) == 0.0);
  CHECK(lr_at(100, cfg) == doctest::Approx(2e-4).epsilon(1e-12));
  CHECK(lr_at(1000, cfg) == 0.0);
  CHECK(lr_at(100 + 450, cfg) == doctest::Approx(1e-4).epsilon(1e-9));
  // continuity and non-negativity across the whole domain
  double prev = lr_at(0, cfg);
  for (long s = 1; s <= 1000; ++s) {
    const double v = lr_at(s, cfg);
    CHECK(v >= 0.0);
    CHECK(std::abs(v - prev) < 2e-4 * 0.02);
    prev = v;
  }
  CHECK_THROWS_AS(lr_at(1001, cfg), ConfigError);
}

TEST_CASE("adam first step with unit gradients moves by about -lr") {
  auto p = Tensord::from({3}, {1.0, 2.0, 3.0});
  std::vector<Tensord*> params{&p};
  std::vector<Tensord> grads{Tensord::full({3}, 1.0)};
  AdamState<double> st;
  adam_step(params, grads, st, 0.01);
  for (Index i = 0; i < 3; ++i)
    CHECK(p.at(i) == doctest::Approx((i + 1.0) - 0.01).epsilon(1e-6));
}

TEST_CASE("adam with zero gradients leaves parameters unchanged") {
  auto p = Tensord::from({2}, {0.5, -0.5});
  std::vector<Tensord*> params{&p};
  std::vector<Tensord> grads{Tensord::zeros({2})};
  AdamState<double> st;
  adam_step(params, grads, st, 0.1);
  adam_step(params, grads, st, 0.1);
  CHECK(p.at(0) == 0.5);
  CHECK(p.at(1) == -0.5);
}

TEST_CASE("adam rejects non-finite gradients with the step index") {
  auto p = Tensord::from({2}, {0.5, -0.5});
  std::vector<Tensord*> params{&p};
  std::vector<Tensord> grads{Tensord::from({2}, {1.0, std::numeric_limits<double>::quiet_NaN()})};
  AdamState<double> st;
  st.t = 41;
  try {
    adam_step(params, grads, st, 0.1);
    FAIL("expected TrainingDivergenceError");
  } catch (const TrainingDivergenceError& e) {
    CHECK(e.step == 42);
  }
}

TEST_CASE("loss_on_batch of a uniform predictor is ln q") {
  BaselineConfig bc;
  bc.core.d = 8;
  bc.core.n_layers = 2;
  bc.core.n_heads = 2;
  bc.core.hidden = 16;
  bc.core.p_max = 4;
  bc.q_max = 4;
  FixedqModel<double> model{bc, init_baseline_params<double>(bc, 1)};
  // all-zero parameters force zero logits, i.e. uniform predictions
  model.visit_params([](const std::string&, Tensord& t) {
    t = Tensord::zeros(t.shape());
  });
  PriorConfig pc;
  pc.n_min = 8;
  pc.n_max = 8;
  pc.m_min = 4;
  pc.m_max = 4;
  pc.p_min = 2;
  pc.p_max = 2;
  pc.q_min = 4;
  pc.q_max = 4;
  auto batch = sample_batch<double>(pc, 2, 7);
  auto loss = loss_on_batch(model, batch);
  CHECK(loss.at(0) == doctest::Approx(std::log(4.0)).epsilon(1e-9));
}

TEST_CASE("training is deterministic: bit-identical parameters at step 100") {
  TrainConfig cfg = tiny_train("equitab", 5);
  cfg.total_batches = 100;
  auto run = [&]() {
    auto model = make_equitab_model<float>(cfg.model_cfg, cfg.seed);
    AdamState<float> adam;
    train_loop(model, adam, cfg);
    std::vector<float> flat;
    model.visit_params([&](const std::string&, Tensorf& t) {
      flat.insert(flat.end(), t.data(), t.data() + t.numel());
    });
    return flat;
  };
  auto a = run();
  auto b = run();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("loss decreases over the first 200 steps (median over 5 seeds)") {
  int improved = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    TrainConfig cfg = tiny_train("equitab", seed);
    auto model = make_equitab_model<float>(cfg.model_cfg, cfg.seed);
    AdamState<float> adam;
    TrainResult res = train_loop(model, adam, cfg, 0, nullptr, true);
    REQUIRE(res.batch_losses.size() == 200);
    double head = 0, tail = 0;
    for (int i = 0; i < 20; ++i) {
      head += res.batch_losses[static_cast<std::size_t>(i)];
      tail += res.batch_losses[res.batch_losses.size() - 1 - static_cast<std::size_t>(i)];
    }
    if (tail < head) ++improved;
  }
  CHECK(improved >= 3);  // median over 5 seeds decreases
}

TEST_CASE("gradient norms stay finite through a 1000-step smoke run") {
  TrainConfig cfg = tiny_train("fixedq", 11);
  cfg.total_batches = 1000;
  cfg.eval_every = 1000;
  auto model = make_fixedq_model<float>(BaselineConfig{cfg.model_cfg, cfg.q_max},
                                        cfg.seed);
  AdamState<float> adam;
  CHECK_NOTHROW(train_loop(model, adam, cfg));
}

TEST_CASE("checkpoint: save -> load -> save is byte-identical") {
  TrainConfig cfg = tiny_train("equitab", 3);
  auto model = make_equitab_model<float>(cfg.model_cfg, 3);
  AdamState<float> adam;
  cfg.total_batches = 5;
  cfg.warmup_batches = 2;
  train_loop(model, adam, cfg);
  Checkpoint ckpt = to_checkpoint(model, 5, 3, &adam);
  const std::string bytes1 = serialize_checkpoint(ckpt);
  Checkpoint back = parse_checkpoint(bytes1, "mem");
  const std::string bytes2 = serialize_checkpoint(back);
  CHECK(bytes1 == bytes2);
  CHECK(back.step == 5);
  CHECK(back.seed == 3);
  CHECK(back.model == "equitab");
}

TEST_CASE("checkpoint: distinct corruption errors") {
  auto model = make_equitab_model<float>(tiny_train("equitab", 1).model_cfg, 1);
  const std::string bytes = serialize_checkpoint(to_checkpoint(model, 0, 1));

  // truncated payload
  try {
    parse_checkpoint(bytes.substr(0, bytes.size() - 4), "mem");
    FAIL("expected truncation error");
  } catch (const CheckpointError& e) {
    CHECK(e.kind == CheckpointError::Kind::truncated_payload);
  }
  // surplus payload counts as a tensor mismatch
  try {
    parse_checkpoint(bytes + std::string(4, '\0'), "mem");
    FAIL("expected tensor mismatch");
  } catch (const CheckpointError& e) {
    CHECK(e.kind == CheckpointError::Kind::tensor_mismatch);
  }
  // corrupt header
  try {
    std::string bad = bytes;
    bad[0] = 'x';
    parse_checkpoint(bad, "mem");
    FAIL("expected corrupt header");
  } catch (const CheckpointError& e) {
    CHECK(e.kind == CheckpointError::Kind::corrupt_header);
  }
  // version mismatch
  try {
    std::string bad = bytes;
    bad.replace(bad.find("v1"), 2, "v9");
    parse_checkpoint(bad, "mem");
    FAIL("expected version mismatch");
  } catch (const CheckpointError& e) {
    CHECK(e.kind == CheckpointError::Kind::version_mismatch);
  }
}

TEST_CASE("checkpoint round trip reproduces the model exactly") {
  ModelConfig mc = tiny_train("equitab", 9).model_cfg;
  auto model = make_equitab_model<float>(mc, 9);
  Checkpoint ckpt = parse_checkpoint(
      serialize_checkpoint(to_checkpoint(model, 0, 9)), "mem");
  auto back = equitab_from_checkpoint<float>(ckpt);
  PriorConfig pc = tiny_train("equitab", 9).prior;
  auto ep = sample_episode<float>(pc, 13);
  CHECK(max_abs_diff(model.episode_probs(ep), back.episode_probs(ep)) == 0.0);
}

TEST_CASE("resume from checkpoint replays uninterrupted training") {
  TrainConfig cfg = tiny_train("equitab", 21);
  cfg.total_batches = 40;
  cfg.eval_every = 40;

  // uninterrupted run
  auto full = make_equitab_model<float>(cfg.model_cfg, cfg.seed);
  AdamState<float> adam_full;
  TrainResult full_res = train_loop(full, adam_full, cfg, 0, nullptr, true);

  // stop at 20, checkpoint, resume
  TrainConfig half = cfg;
  half.total_batches = 20;
  auto part = make_equitab_model<float>(cfg.model_cfg, cfg.seed);
  AdamState<float> adam_part;
  train_loop(part, adam_part, half);
  Checkpoint ckpt = parse_checkpoint(
      serialize_checkpoint(to_checkpoint(part, 20, cfg.seed, &adam_part)), "mem");

  AdamState<float> adam_resumed;
  auto resumed = equitab_from_checkpoint<float>(ckpt, &adam_resumed);
  CHECK(adam_resumed.t == 20);
  TrainResult res = train_loop(resumed, adam_resumed, cfg, ckpt.step, nullptr, true);
  REQUIRE(res.batch_losses.size() == 20);
  for (std::size_t i = 0; i < 20; ++i)
    CHECK(std::abs(res.batch_losses[i] - full_res.batch_losses[20 + i]) <= 1e-6);
}
