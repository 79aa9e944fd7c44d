#pragma once

// Model wrappers behind the "equitab" / "fixedq" selector strings, the
// type-erased episode predictor used by the measurement lab and the bench,
// and the bridges between parameter structs and checkpoints.

#include <functional>
#include <map>
#include <memory>
#include <string>

#include "equitab/baseline_model.hpp"
#include "equitab/checkpoint.hpp"
#include "equitab/equitab_model.hpp"
#include "equitab/knn.hpp"
#include "equitab/kvconfig.hpp"

namespace equitab {

// A predictor maps an episode to (M, q) class probability rows. Copies are
// cheap; captured parameters share storage.
template <class S>
struct Predictor {
  std::string name;
  std::function<Tensor<S>(const Episode<S>&)> fn;
  Tensor<S> operator()(const Episode<S>& ep) const { return fn(ep); }
};

template <class S>
struct EquitabModel {
  using Scalar = S;
  ModelConfig cfg;
  EquiParams<S> params;

  std::string name() const { return "equitab"; }
  Tensor<S> batch_logits(const EpisodeBatch<S>& b) {
    return equitab_logits(b, cfg, params);
  }
  Tensor<S> episode_probs(const Episode<S>& ep) {
    return equitab_forward(ep, cfg, params);
  }
  template <class F>
  void visit_params(F&& f) {
    params.visit(std::forward<F>(f));
  }
};

template <class S>
struct FixedqModel {
  using Scalar = S;
  BaselineConfig cfg;
  BaselineParams<S> params;

  std::string name() const { return "fixedq"; }
  Tensor<S> batch_logits(const EpisodeBatch<S>& b) {
    return baseline_logits(b, cfg, params);
  }
  Tensor<S> episode_probs(const Episode<S>& ep) {
    return baseline_forward(ep, cfg, params);
  }
  template <class F>
  void visit_params(F&& f) {
    params.visit(std::forward<F>(f));
  }
};

template <class S>
EquitabModel<S> make_equitab_model(const ModelConfig& cfg, std::uint64_t seed) {
  return EquitabModel<S>{cfg, init_equi_params<S>(cfg, seed)};
}

template <class S>
FixedqModel<S> make_fixedq_model(const BaselineConfig& cfg, std::uint64_t seed) {
  return FixedqModel<S>{cfg, init_baseline_params<S>(cfg, seed)};
}

template <class S>
Predictor<S> make_predictor(EquitabModel<S> model) {
  return Predictor<S>{"equitab", [model](const Episode<S>& ep) mutable {
                        return model.episode_probs(ep);
                      }};
}

// The fixed-width model's episode route: native below q_max; above it, the
// published mitigation pipeline — ECOC decomposition with permutation
// ensembling per sub-task.
template <class S>
Predictor<S> make_predictor(FixedqModel<S> model, Index ecoc_ens = 4,
                            std::uint64_t ecoc_seed = 0) {
  return Predictor<S>{
      "fixedq", [model, ecoc_ens, ecoc_seed](const Episode<S>& ep) mutable {
        if (ep.q() <= model.cfg.q_max) return model.episode_probs(ep);
        CodeBook cb = build_codebook(static_cast<int>(ep.q()),
                                     static_cast<int>(model.cfg.q_max), ecoc_seed);
        return ecoc_forward(ep, model.cfg, model.params, cb, ecoc_ens, ecoc_seed);
      }};
}

template <class S>
Predictor<S> make_knn_predictor(Index k) {
  return Predictor<S>{"knn", [k](const Episode<S>& ep) {
                        return knn_predict(ep, k);
                      }};
}

// ---------------------------------------------------------------------------
// Config maps (checkpoint echo).

inline KvMap model_config_to_map(const ModelConfig& c) {
  KvMap m;
  m["d"] = std::to_string(c.d);
  m["n_layers"] = std::to_string(c.n_layers);
  m["n_heads"] = std::to_string(c.n_heads);
  m["hidden"] = std::to_string(c.hidden);
  m["p_max"] = std::to_string(c.p_max);
  m["decoder_hidden"] = std::to_string(c.decoder_hidden);
  return m;
}

inline ModelConfig model_config_from_map(const KvMap& m) {
  ModelConfig c;
  c.d = kv_get_long(m, "d", c.d);
  c.n_layers = kv_get_long(m, "n_layers", c.n_layers);
  c.n_heads = kv_get_long(m, "n_heads", c.n_heads);
  c.hidden = kv_get_long(m, "hidden", c.hidden);
  c.p_max = kv_get_long(m, "p_max", c.p_max);
  c.decoder_hidden = kv_get_long(m, "decoder_hidden", c.decoder_hidden);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Checkpoint bridges. Adam moments ride along as "adam.m.<name>" /
// "adam.v.<name>" tensors so training resumes exactly.

template <class S>
struct AdamState {
  std::vector<Tensor<S>> m, v;
  long t = 0;
};

namespace detail {

template <class Params>
void params_to_checkpoint(Params& params, Checkpoint* ckpt) {
  params.visit([&](const std::string& name, auto& t) {
    ckpt->tensors.emplace_back(name, t.template cast<float>());
  });
}

template <class Params>
void params_from_checkpoint(const Checkpoint& ckpt, Params& params) {
  params.visit([&](const std::string& name, auto& t) {
    using TS = typename std::decay_t<decltype(t)>::Scalar;
    const Tensorf* src = ckpt.find(name);
    if (!src)
      throw CheckpointError(CheckpointError::Kind::tensor_mismatch,
                            "checkpoint is missing tensor '" + name + "'");
    if (src->shape() != t.shape())
      throw CheckpointError(CheckpointError::Kind::tensor_mismatch,
                            "tensor '" + name + "' has shape " +
                                shape_str(src->shape()) + ", expected " +
                                shape_str(t.shape()));
    t = src->template cast<TS>();
  });
}

template <class S, class Params>
void adam_to_checkpoint(Params& params, const AdamState<S>& adam,
                        Checkpoint* ckpt) {
  std::size_t i = 0;
  params.visit([&](const std::string& name, auto&) {
    ckpt->tensors.emplace_back("adam.m." + name,
                               adam.m[i].template cast<float>());
    ckpt->tensors.emplace_back("adam.v." + name,
                               adam.v[i].template cast<float>());
    ++i;
  });
  ckpt->config["adam_t"] = std::to_string(adam.t);
}

template <class S, class Params>
bool adam_from_checkpoint(const Checkpoint& ckpt, Params& params,
                          AdamState<S>* adam) {
  if (!kv_has(ckpt.config, "adam_t")) return false;
  adam->m.clear();
  adam->v.clear();
  adam->t = kv_get_long(ckpt.config, "adam_t", 0);
  bool complete = true;
  params.visit([&](const std::string& name, auto& t) {
    const Tensorf* m = ckpt.find("adam.m." + name);
    const Tensorf* v = ckpt.find("adam.v." + name);
    if (!m || !v || m->shape() != t.shape() || v->shape() != t.shape()) {
      complete = false;
      return;
    }
    adam->m.push_back(m->template cast<S>());
    adam->v.push_back(v->template cast<S>());
  });
  if (!complete)
    throw CheckpointError(CheckpointError::Kind::tensor_mismatch,
                          "checkpoint has a partial optimizer state");
  return true;
}

}  // namespace detail

template <class S>
Checkpoint to_checkpoint(EquitabModel<S>& model, long step, std::uint64_t seed,
                         const AdamState<S>* adam = nullptr) {
  Checkpoint ckpt;
  ckpt.model = model.name();
  ckpt.step = step;
  ckpt.seed = seed;
  ckpt.config = model_config_to_map(model.cfg);
  detail::params_to_checkpoint(model.params, &ckpt);
  if (adam && !adam->m.empty()) detail::adam_to_checkpoint(model.params, *adam, &ckpt);
  return ckpt;
}

template <class S>
Checkpoint to_checkpoint(FixedqModel<S>& model, long step, std::uint64_t seed,
                         const AdamState<S>* adam = nullptr) {
  Checkpoint ckpt;
  ckpt.model = model.name();
  ckpt.step = step;
  ckpt.seed = seed;
  ckpt.config = model_config_to_map(model.cfg.core);
  ckpt.config["q_max"] = std::to_string(model.cfg.q_max);
  detail::params_to_checkpoint(model.params, &ckpt);
  if (adam && !adam->m.empty()) detail::adam_to_checkpoint(model.params, *adam, &ckpt);
  return ckpt;
}

template <class S>
EquitabModel<S> equitab_from_checkpoint(const Checkpoint& ckpt,
                                        AdamState<S>* adam = nullptr) {
  if (ckpt.model != "equitab")
    throw CheckpointError(CheckpointError::Kind::tensor_mismatch,
                          "checkpoint holds model '" + ckpt.model +
                              "', expected 'equitab'");
  EquitabModel<S> model;
  model.cfg = model_config_from_map(ckpt.config);
  model.params = init_equi_params<S>(model.cfg, ckpt.seed);
  detail::params_from_checkpoint(ckpt, model.params);
  if (adam) detail::adam_from_checkpoint(ckpt, model.params, adam);
  return model;
}

template <class S>
FixedqModel<S> fixedq_from_checkpoint(const Checkpoint& ckpt,
                                      AdamState<S>* adam = nullptr) {
  if (ckpt.model != "fixedq")
    throw CheckpointError(CheckpointError::Kind::tensor_mismatch,
                          "checkpoint holds model '" + ckpt.model +
                              "', expected 'fixedq'");
  FixedqModel<S> model;
  model.cfg.core = model_config_from_map(ckpt.config);
  model.cfg.q_max = kv_get_long(ckpt.config, "q_max", 5);
  model.cfg.validate();
  model.params = init_baseline_params<S>(model.cfg, ckpt.seed);
  detail::params_from_checkpoint(ckpt, model.params);
  if (adam) detail::adam_from_checkpoint(ckpt, model.params, adam);
  return model;
}

template <class S>
Predictor<S> predictor_from_checkpoint(const Checkpoint& ckpt,
                                       Index ecoc_ens = 4,
                                       std::uint64_t ecoc_seed = 0) {
  if (ckpt.model == "equitab")
    return make_predictor(equitab_from_checkpoint<S>(ckpt));
  if (ckpt.model == "fixedq")
    return make_predictor(fixedq_from_checkpoint<S>(ckpt), ecoc_ens, ecoc_seed);
  throw CheckpointError(CheckpointError::Kind::corrupt_header,
                        "unknown model selector '" + ckpt.model + "'");
}

}  // namespace equitab
