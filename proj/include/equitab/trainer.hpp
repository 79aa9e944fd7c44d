#pragma once

// Pre-training loop: Adam with linear warmup + cosine decay, minimizing the
// mean test-point cross-entropy over generated episode batches. Batch b's
// content is a pure function of (seed, b), so restarts from a checkpoint
// replay the uninterrupted run exactly.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "equitab/models.hpp"
#include "equitab/prior.hpp"

namespace equitab {

struct TrainConfig {
  std::string model = "equitab";  // "equitab" | "fixedq"
  long total_batches = 20000;
  Index batch_size = 16;
  double lr_max = 1e-4;
  long warmup_batches = 500;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  long eval_every = 500;
  Index eval_episodes = 64;
  double grad_clip = 0.0;  // 0 disables clipping
  PriorConfig prior;
  ModelConfig model_cfg;
  Index q_max = 5;  // fixedq only

  void validate() const {
    if (model != "equitab" && model != "fixedq")
      throw ConfigError("unknown model selector '" + model + "'");
    if (total_batches < 0 || warmup_batches < 0 ||
        warmup_batches > total_batches)
      throw ConfigError("need 0 <= warmup_batches <= total_batches");
    if (lr_max <= 0) throw ConfigError("lr_max must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
    validate_prior(prior);
    model_cfg.validate();
  }
};

// Linear ramp 0 -> lr_max over the warmup, then cosine decay to 0 at
// total_batches. Continuous and non-negative on [0, total_batches].
inline double lr_at(long step, const TrainConfig& cfg) {
  if (step < 0 || step > cfg.total_batches)
    throw ConfigError("lr_at: step " + std::to_string(step) +
                      " outside [0, " + std::to_string(cfg.total_batches) + "]");
  if (cfg.warmup_batches > 0 && step <= cfg.warmup_batches)
    return cfg.lr_max * static_cast<double>(step) /
           static_cast<double>(cfg.warmup_batches);
  if (step >= cfg.total_batches) return 0.0;
  const double span = static_cast<double>(cfg.total_batches - cfg.warmup_batches);
  const double frac = static_cast<double>(step - cfg.warmup_batches) / span;
  return cfg.lr_max * 0.5 * (1.0 + std::cos(M_PI * frac));
}

// One Adam update with bias correction. Raises TrainingDivergenceError when
// the incoming gradients are not finite.
template <class S>
void adam_step(const std::vector<Tensor<S>*>& params,
               const std::vector<Tensor<S>>& grads, AdamState<S>& state,
               double lr, double beta1 = 0.9, double beta2 = 0.999,
               double eps = 1e-8) {
  if (params.size() != grads.size())
    throw ConfigError("adam_step: " + std::to_string(params.size()) +
                      " params vs " + std::to_string(grads.size()) + " grads");
  if (state.m.empty()) {
    for (const Tensor<S>* p : params) {
      state.m.push_back(Tensor<S>::zeros(p->shape()));
      state.v.push_back(Tensor<S>::zeros(p->shape()));
    }
  }
  double sq = 0;
  for (const Tensor<S>& g : grads)
    if (g.defined()) sq += sum_sq(g);
  if (!std::isfinite(sq))
    throw TrainingDivergenceError(state.t + 1,
                                  "non-finite gradient at step " +
                                      std::to_string(state.t + 1));
  ++state.t;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<S>& p = *params[i];
    Tensor<S>& m = state.m[i];
    Tensor<S>& v = state.v[i];
    const Index n = p.numel();
    const S* g = grads[i].defined() ? grads[i].data() : nullptr;
    S* pm = m.data();
    S* pv = v.data();
    S* pp = p.data();
    for (Index j = 0; j < n; ++j) {
      const double gj = g ? static_cast<double>(g[j]) : 0.0;
      const double mj = beta1 * static_cast<double>(pm[j]) + (1.0 - beta1) * gj;
      const double vj = beta2 * static_cast<double>(pv[j]) + (1.0 - beta2) * gj * gj;
      pm[j] = static_cast<S>(mj);
      pv[j] = static_cast<S>(vj);
      const double mhat = mj / bc1;
      const double vhat = vj / bc2;
      pp[j] = static_cast<S>(static_cast<double>(pp[j]) -
                             lr * mhat / (std::sqrt(vhat) + eps));
    }
  }
}

// Mean cross-entropy over all test points of all episodes in the batch.
template <class Model, class S = typename Model::Scalar>
Tensor<S> loss_on_batch(Model& model, const EpisodeBatch<S>& batch) {
  return cross_entropy_from_logits(model.batch_logits(batch), batch.Ystar);
}

struct EvalResult {
  double loss = 0;
  double accuracy = 0;
};

// Fixed held-out episode set derived from (seed, eval stream); identical at
// every eval point of a run.
template <class Model, class S = typename Model::Scalar>
EvalResult evaluate_model(Model& model, const PriorConfig& prior,
                          Index episodes, std::uint64_t seed) {
  EvalResult res;
  for (Index i = 0; i < episodes; ++i) {
    const std::uint64_t eseed =
        mix_seed(seed, seed_tag::eval, static_cast<std::uint64_t>(i));
    Episode<S> ep = sample_episode<S>(prior, eseed);
    EpisodeBatch<S> b = EpisodeBatch<S>::of(ep);
    res.loss += static_cast<double>(loss_on_batch(model, b).at(0));
    const Tensor<S> probs = model.episode_probs(ep);
    const auto pred = argmax_rows(probs);
    const auto truth = labels_of(ep.Ystar);
    Index hit = 0;
    for (std::size_t j = 0; j < pred.size(); ++j)
      if (pred[j] == truth[j]) ++hit;
    res.accuracy += static_cast<double>(hit) / static_cast<double>(ep.m());
  }
  res.loss /= static_cast<double>(episodes);
  res.accuracy /= static_cast<double>(episodes);
  return res;
}

struct TrainResult {
  long steps = 0;
  double final_train_loss = 0;
  EvalResult final_eval;
  std::vector<double> batch_losses;  // one entry per processed batch
};

// Runs batches [start_step, total_batches). The log receives one
// tab-separated line per eval: step, lr, train loss (mean since the last
// eval), eval loss, eval accuracy, wall-clock seconds. `on_eval` fires at
// every eval point (checkpoint rolling happens there).
template <class Model, class S = typename Model::Scalar>
TrainResult train_loop(Model& model, AdamState<S>& adam, const TrainConfig& cfg,
                       long start_step = 0, std::ostream* log = nullptr,
                       bool record_losses = false,
                       const std::function<void(long)>& on_eval = {}) {
  cfg.validate();
  std::vector<Tensor<S>*> param_ptrs;
  model.visit_params([&](const std::string&, Tensor<S>& t) {
    param_ptrs.push_back(&t);
  });

  TrainResult result;
  const auto t0 = std::chrono::steady_clock::now();
  double window_loss = 0;
  long window_count = 0;
  auto emit = [&](long step, double lr, const EvalResult& ev) {
    if (!log) return;
    char line[256];
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    const double train_loss = window_count > 0 ? window_loss / window_count : 0.0;
    std::snprintf(line, sizeof(line), "%ld\t%.8g\t%.8g\t%.8g\t%.8g\t%.3f\n",
                  step, lr, train_loss, ev.loss, ev.accuracy, secs);
    (*log) << line;
    log->flush();
  };

  for (long b = start_step; b < cfg.total_batches; ++b) {
    const double lr = lr_at(b + 1, cfg);
    const std::uint64_t bseed =
        mix_seed(cfg.seed, seed_tag::batch, static_cast<std::uint64_t>(b));
    EpisodeBatch<S> batch = sample_batch<S>(cfg.prior, cfg.batch_size, bseed);

    auto tape = Tape<S>::create();
    for (Tensor<S>* p : param_ptrs) tape->watch(*p);
    Tensor<S> loss = loss_on_batch(model, batch);
    const double loss_val = static_cast<double>(loss.at(0));
    if (!std::isfinite(loss_val))
      throw TrainingDivergenceError(b + 1, "non-finite loss at step " +
                                               std::to_string(b + 1));
    tape->backward(loss);
    std::vector<Tensor<S>> grads;
    grads.reserve(param_ptrs.size());
    for (Tensor<S>* p : param_ptrs) grads.push_back(tape->grad(*p));
    tape->clear();

    if (cfg.grad_clip > 0) {
      double sq = 0;
      for (const Tensor<S>& g : grads)
        if (g.defined()) sq += sum_sq(g);
      const double norm = std::sqrt(sq);
      if (std::isfinite(norm) && norm > cfg.grad_clip) {
        const S scale = static_cast<S>(cfg.grad_clip / norm);
        for (Tensor<S>& g : grads)
          if (g.defined())
            for (Index i = 0; i < g.numel(); ++i) g.at(i) *= scale;
      }
    }
    adam_step(param_ptrs, grads, adam, lr, cfg.beta1, cfg.beta2, cfg.adam_eps);

    window_loss += loss_val;
    ++window_count;
    if (record_losses) result.batch_losses.push_back(loss_val);
    result.final_train_loss = loss_val;
    result.steps = b + 1;

    if ((b + 1) % cfg.eval_every == 0 || b + 1 == cfg.total_batches) {
      EvalResult ev = evaluate_model(model, cfg.prior, cfg.eval_episodes, cfg.seed);
      emit(b + 1, lr, ev);
      result.final_eval = ev;
      window_loss = 0;
      window_count = 0;
      if (on_eval) on_eval(b + 1);
    }
  }
  return result;
}

}  // namespace equitab
