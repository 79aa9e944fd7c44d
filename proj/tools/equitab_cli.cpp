// Command-line harness: train | grid | bench | equigap | gradcheck.
// Every command resolves a flat key=value config (defaults <- --config file
// <- repeated --set overrides <- --seed/--out flags), runs, and writes a
// manifest echoing the fully resolved config plus artifact checksums, so a
// run can be reproduced from its manifest alone.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "equitab/csv.hpp"
#include "equitab/gradcheck.hpp"
#include "equitab/lab.hpp"
#include "equitab/trainer.hpp"

namespace fs = std::filesystem;
using namespace equitab;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// Config resolution.

struct RunConfig {
  std::string command;
  KvMap cfg;  // fully resolved
  fs::path out;
};

KvMap shared_defaults() {
  KvMap d;
  d["model"] = "equitab";
  d["precision"] = "f32";
  d["seed"] = "0";
  d["d"] = "64";
  d["n_layers"] = "6";
  d["n_heads"] = "4";
  d["hidden"] = "128";
  d["p_max"] = "16";
  d["decoder_hidden"] = "32";
  d["q_max"] = "5";
  d["prior.family"] = "blobs";
  d["prior.n_min"] = "32";
  d["prior.n_max"] = "224";
  d["prior.m_min"] = "16";
  d["prior.m_max"] = "64";
  d["prior.total_points"] = "256";
  d["prior.p_min"] = "2";
  d["prior.p_max"] = "8";
  d["prior.q_min"] = "2";
  d["prior.q_max"] = "5";
  d["prior.separation"] = "3";
  d["prior.mlp_hidden"] = "16";
  d["prior.temperature"] = "1";
  return d;
}

KvMap command_defaults(const std::string& command) {
  KvMap d = shared_defaults();
  if (command == "train") {
    d["total_batches"] = "20000";
    d["batch_size"] = "16";
    d["lr_max"] = "1e-4";
    d["warmup_batches"] = "500";
    d["beta1"] = "0.9";
    d["beta2"] = "0.999";
    d["adam_eps"] = "1e-8";
    d["eval_every"] = "500";
    d["eval_episodes"] = "64";
    d["grad_clip"] = "0";
    d["resume"] = "";
  } else if (command == "grid") {
    d["precision"] = "f64";
    d["checkpoints"] = "";
    d["grid.resolution"] = "40";
    d["grid.orderings"] = "3";
    d["ecoc_ens"] = "4";
  } else if (command == "bench") {
    d["checkpoints"] = "";
    d["bench.suite"] = "seen,unseen";
    d["bench.tasks"] = "16";
    d["bench.unseen_q"] = "8";
    d["bench.knn_k"] = "5";
    d["bench.csv"] = "";
    d["ecoc_ens"] = "4";
  } else if (command == "equigap") {
    d["precision"] = "f64";
    d["checkpoints"] = "";
    d["lab.episodes"] = "32";
    d["lab.n_perms"] = "10";
    d["lab.exhaustive"] = "true";
    d["lab.samples"] = "12";
    d["lab.sweep"] = "1,2,4,8";
    d["ecoc_ens"] = "4";
  } else if (command == "gradcheck") {
    // no extra keys
  }
  return d;
}

// Keys written by manifests that are not configuration.
bool informational_key(const std::string& key) {
  return key.rfind("run.", 0) == 0 || key.rfind("artifact.", 0) == 0;
}

RunConfig resolve_config(const std::string& command, const std::string& config_path,
                         const std::vector<std::string>& sets,
                         const std::string& seed_flag, const std::string& out_dir) {
  RunConfig rc;
  rc.command = command;
  rc.cfg = command_defaults(command);
  if (!config_path.empty()) {
    for (const auto& [k, v] : parse_kv_file(config_path)) {
      if (informational_key(k)) continue;
      if (!rc.cfg.count(k))
        throw ConfigError(config_path + ": unknown key '" + k + "' for command '" +
                          command + "'");
      rc.cfg[k] = v;
    }
  }
  for (const std::string& kv : sets) {
    const std::size_t eq = kv.find('=');
    if (eq == std::string::npos)
      throw ConfigError("--set expects key=value, got '" + kv + "'");
    const std::string k = detail::kv_trim(kv.substr(0, eq));
    const std::string v = detail::kv_trim(kv.substr(eq + 1));
    if (!rc.cfg.count(k))
      throw ConfigError("--set: unknown key '" + k + "' for command '" + command + "'");
    rc.cfg[k] = v;
  }
  if (!seed_flag.empty()) rc.cfg["seed"] = seed_flag;
  rc.out = out_dir;
  fs::create_directories(rc.out);
  return rc;
}

PriorConfig prior_from(const KvMap& cfg) {
  PriorConfig p;
  p.family = prior_family_from_string(kv_get(cfg, "prior.family", "blobs"));
  p.n_min = kv_get_long(cfg, "prior.n_min", p.n_min);
  p.n_max = kv_get_long(cfg, "prior.n_max", p.n_max);
  p.m_min = kv_get_long(cfg, "prior.m_min", p.m_min);
  p.m_max = kv_get_long(cfg, "prior.m_max", p.m_max);
  p.total_points = kv_get_long(cfg, "prior.total_points", p.total_points);
  p.p_min = kv_get_long(cfg, "prior.p_min", p.p_min);
  p.p_max = kv_get_long(cfg, "prior.p_max", p.p_max);
  p.q_min = kv_get_long(cfg, "prior.q_min", p.q_min);
  p.q_max = kv_get_long(cfg, "prior.q_max", p.q_max);
  p.separation = kv_get_double(cfg, "prior.separation", p.separation);
  p.mlp_hidden = kv_get_long(cfg, "prior.mlp_hidden", p.mlp_hidden);
  p.temperature = kv_get_double(cfg, "prior.temperature", p.temperature);
  return p;
}

ModelConfig model_from(const KvMap& cfg) {
  ModelConfig m;
  m.d = kv_get_long(cfg, "d", m.d);
  m.n_layers = kv_get_long(cfg, "n_layers", m.n_layers);
  m.n_heads = kv_get_long(cfg, "n_heads", m.n_heads);
  m.hidden = kv_get_long(cfg, "hidden", m.hidden);
  m.p_max = kv_get_long(cfg, "p_max", m.p_max);
  m.decoder_hidden = kv_get_long(cfg, "decoder_hidden", m.decoder_hidden);
  return m;
}

std::vector<std::string> split_list(const std::string& s, char delim = ',') {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == delim) {
      if (!detail::kv_trim(cur).empty()) out.push_back(detail::kv_trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!detail::kv_trim(cur).empty()) out.push_back(detail::kv_trim(cur));
  return out;
}

// ---------------------------------------------------------------------------
// Manifest.

// Replaces column `col` of every tab-separated data line with "-" so that
// wall-clock fields do not enter checksums or byte comparisons.
std::string mask_tsv_column(const std::string& content, std::size_t col) {
  std::istringstream in(content);
  std::ostringstream out;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> fields;
    std::string cur;
    for (char c : line) {
      if (c == '\t') {
        fields.push_back(cur);
        cur.clear();
      } else {
        cur += c;
      }
    }
    fields.push_back(cur);
    if (col < fields.size()) {
      bool numeric = !fields[col].empty() &&
                     fields[col].find_first_not_of("0123456789.eE+-") == std::string::npos;
      if (numeric) fields[col] = "-";
    }
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) out << '\t';
      out << fields[i];
    }
    out << '\n';
  }
  return out.str();
}

struct Artifact {
  std::string name;
  std::string file;    // relative to out dir
  int masked_col = -1; // tab column holding wall-clock, -1 = none
};

void write_manifest(const RunConfig& rc, const std::vector<Artifact>& artifacts) {
  KvMap m = rc.cfg;
  m["run.command"] = rc.command;
  for (const Artifact& a : artifacts) {
    const std::string content = read_file((rc.out / a.file).string());
    const std::uint64_t h =
        a.masked_col >= 0
            ? fnv1a64(mask_tsv_column(content, static_cast<std::size_t>(a.masked_col)))
            : fnv1a64(content);
    char hex[32];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
    m["artifact." + a.name + ".file"] = a.file;
    m["artifact." + a.name + (a.masked_col >= 0 ? ".fnv1a64_masked" : ".fnv1a64")] = hex;
  }
  write_file((rc.out / "manifest.txt").string(), serialize_kv(m));
}

// ---------------------------------------------------------------------------
// train

template <class S>
int run_train(const RunConfig& rc) {
  TrainConfig tc;
  tc.model = kv_get(rc.cfg, "model", "equitab");
  tc.total_batches = kv_get_long(rc.cfg, "total_batches", 20000);
  tc.batch_size = kv_get_long(rc.cfg, "batch_size", 16);
  tc.lr_max = kv_get_double(rc.cfg, "lr_max", 1e-4);
  tc.warmup_batches = kv_get_long(rc.cfg, "warmup_batches", 500);
  tc.beta1 = kv_get_double(rc.cfg, "beta1", 0.9);
  tc.beta2 = kv_get_double(rc.cfg, "beta2", 0.999);
  tc.adam_eps = kv_get_double(rc.cfg, "adam_eps", 1e-8);
  tc.seed = kv_get_u64(rc.cfg, "seed", 0);
  tc.eval_every = kv_get_long(rc.cfg, "eval_every", 500);
  tc.eval_episodes = kv_get_long(rc.cfg, "eval_episodes", 64);
  tc.grad_clip = kv_get_double(rc.cfg, "grad_clip", 0);
  tc.prior = prior_from(rc.cfg);
  tc.model_cfg = model_from(rc.cfg);
  tc.q_max = kv_get_long(rc.cfg, "q_max", 5);
  tc.validate();

  const std::string resume = kv_get(rc.cfg, "resume", "");
  const fs::path ckpt_path = rc.out / "model.ckpt";
  const fs::path log_path = rc.out / "train.log";

  auto run_model = [&](auto model) {
    AdamState<S> adam;
    long start_step = 0;
    if (!resume.empty()) {
      Checkpoint ckpt = load_checkpoint(resume);
      model = std::decay_t<decltype(model)>();
      if constexpr (std::is_same_v<std::decay_t<decltype(model)>, EquitabModel<S>>)
        model = equitab_from_checkpoint<S>(ckpt, &adam);
      else
        model = fixedq_from_checkpoint<S>(ckpt, &adam);
      start_step = ckpt.step;
    }
    std::ofstream log(log_path, resume.empty() ? std::ios::trunc : std::ios::app);
    auto save = [&](long step) {
      Checkpoint ckpt = to_checkpoint(model, step, tc.seed, &adam);
      save_checkpoint(ckpt_path.string(), ckpt);
    };
    train_loop(model, adam, tc, start_step, &log, false,
               [&](long step) { save(step); });
    if (tc.total_batches == 0 || start_step >= tc.total_batches)
      save(start_step);  // init-only runs still emit a checkpoint
    return 0;
  };

  if (tc.model == "equitab") {
    run_model(make_equitab_model<S>(tc.model_cfg, tc.seed));
  } else {
    run_model(make_fixedq_model<S>(BaselineConfig{tc.model_cfg, tc.q_max}, tc.seed));
  }
  write_manifest(rc, {Artifact{"checkpoint", "model.ckpt", -1},
                      Artifact{"train_log", "train.log", 5}});
  std::cout << "train: wrote " << (rc.out / "model.ckpt").string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// grid

// Nine training points on a 3x3 lattice in [-1,1]^2, one class each; the
// test set is a dense resolution^2 lattice. Covariates are z-scored with the
// train-point statistics, mirroring the synthetic priors.
template <class S>
Episode<S> grid_episode(Index resolution) {
  Episode<S> ep;
  ep.X = Tensor<S>::zeros({9, 2});
  ep.Y = Tensor<S>::zeros({9, 9});
  for (Index i = 0; i < 9; ++i) {
    ep.X(i, 0) = static_cast<S>(static_cast<double>(i % 3) - 1.0);
    ep.X(i, 1) = static_cast<S>(static_cast<double>(i / 3) - 1.0);
    ep.Y(i, i) = S(1);
  }
  const Index cells = resolution * resolution;
  ep.Xstar = Tensor<S>::zeros({cells, 2});
  ep.Ystar = Tensor<S>::zeros({cells, 9});
  for (Index iy = 0; iy < resolution; ++iy) {
    for (Index ix = 0; ix < resolution; ++ix) {
      const Index c = iy * resolution + ix;
      ep.Xstar(c, 0) = static_cast<S>(
          resolution == 1 ? 0.0
                          : -1.0 + 2.0 * static_cast<double>(ix) /
                                       static_cast<double>(resolution - 1));
      ep.Xstar(c, 1) = static_cast<S>(
          resolution == 1 ? 0.0
                          : -1.0 + 2.0 * static_cast<double>(iy) /
                                       static_cast<double>(resolution - 1));
      ep.Ystar(c, 0) = S(1);  // placeholder; grid predictions ignore targets
    }
  }
  // z-score on train stats: mean 0, population std sqrt(2/3) per column
  const double inv_sd = 1.0 / std::sqrt(2.0 / 3.0);
  Episode<S> z = ep;
  z.X = ep.X.clone();
  z.Xstar = ep.Xstar.clone();
  for (Index i = 0; i < z.X.numel(); ++i)
    z.X.at(i) = static_cast<S>(static_cast<double>(z.X.at(i)) * inv_sd);
  for (Index i = 0; i < z.Xstar.numel(); ++i)
    z.Xstar.at(i) = static_cast<S>(static_cast<double>(z.Xstar.at(i)) * inv_sd);
  return z;
}

template <class S>
int run_grid(const RunConfig& rc) {
  const Index resolution = kv_get_long(rc.cfg, "grid.resolution", 40);
  const Index orderings = kv_get_long(rc.cfg, "grid.orderings", 3);
  const std::uint64_t seed = kv_get_u64(rc.cfg, "seed", 0);
  const Index ecoc_ens = kv_get_long(rc.cfg, "ecoc_ens", 4);
  if (resolution < 1 || orderings < 1)
    throw ConfigError("grid needs resolution >= 1 and orderings >= 1");
  const std::vector<std::string> ckpts = split_list(kv_get(rc.cfg, "checkpoints", ""));
  if (ckpts.empty()) throw ConfigError("grid: no checkpoints given");

  Episode<S> ep = grid_episode<S>(resolution);
  std::vector<PermutationSpec> perms{PermutationSpec::identity(9)};
  Rng rng(mix_seed(seed, seed_tag::perm));
  for (Index o = 1; o < orderings; ++o)
    perms.push_back(PermutationSpec::random(9, rng));

  // train-point reference file (original coordinates)
  {
    std::ostringstream os;
    os << "x1,x2,class\n";
    for (Index i = 0; i < 9; ++i)
      os << static_cast<double>(i % 3) - 1.0 << ","
         << static_cast<double>(i / 3) - 1.0 << "," << i << "\n";
    write_file((rc.out / "grid_train_points.csv").string(), os.str());
  }

  std::vector<Artifact> artifacts{Artifact{"train_points", "grid_train_points.csv", -1}};
  for (std::size_t c = 0; c < ckpts.size(); ++c) {
    Checkpoint ckpt = load_checkpoint(ckpts[c]);
    Predictor<S> pred = predictor_from_checkpoint<S>(ckpt, ecoc_ens, seed);
    std::ostringstream os;
    os << "ordering_id,x1,x2,pred_class\n";
    for (Index o = 0; o < orderings; ++o) {
      Tensor<S> probs = pred(permute_targets(ep, perms[static_cast<std::size_t>(o)]));
      Tensor<S> aligned =
          apply_inverse_permutation(probs, perms[static_cast<std::size_t>(o)]);
      const std::vector<Index> cls = argmax_rows(aligned);
      for (Index iy = 0; iy < resolution; ++iy)
        for (Index ix = 0; ix < resolution; ++ix) {
          const Index cell = iy * resolution + ix;
          const double x1 =
              resolution == 1 ? 0.0
                              : -1.0 + 2.0 * static_cast<double>(ix) /
                                           static_cast<double>(resolution - 1);
          const double x2 =
              resolution == 1 ? 0.0
                              : -1.0 + 2.0 * static_cast<double>(iy) /
                                           static_cast<double>(resolution - 1);
          os << o << "," << x1 << "," << x2 << ","
             << cls[static_cast<std::size_t>(cell)] << "\n";
        }
    }
    const std::string fname =
        "grid_" + ckpt.model + "_" + std::to_string(c) + ".csv";
    write_file((rc.out / fname).string(), os.str());
    artifacts.push_back(Artifact{"grid_" + std::to_string(c), fname, -1});
    std::cout << "grid: wrote " << (rc.out / fname).string() << "\n";
  }
  write_manifest(rc, artifacts);
  return 0;
}

// ---------------------------------------------------------------------------
// bench

template <class S>
int run_bench(const RunConfig& rc) {
  const std::uint64_t seed = kv_get_u64(rc.cfg, "seed", 0);
  const Index n_tasks = kv_get_long(rc.cfg, "bench.tasks", 16);
  const Index knn_k = kv_get_long(rc.cfg, "bench.knn_k", 5);
  const Index unseen_q = kv_get_long(rc.cfg, "bench.unseen_q", 8);
  const Index ecoc_ens = kv_get_long(rc.cfg, "ecoc_ens", 4);
  const PriorConfig base_prior = prior_from(rc.cfg);

  struct Task {
    std::string name;
    Episode<S> ep;
  };
  std::vector<Task> tasks;
  for (const std::string& suite : split_list(kv_get(rc.cfg, "bench.suite", ""))) {
    if (suite == "seen") {
      for (Index i = 0; i < n_tasks; ++i) {
        char name[64];
        std::snprintf(name, sizeof(name), "seen/%03lld", static_cast<long long>(i));
        tasks.push_back(
            {name, sample_episode<S>(base_prior,
                                     mix_seed(seed, seed_tag::task,
                                              static_cast<std::uint64_t>(i)))});
      }
    } else if (suite == "unseen") {
      PriorConfig p = base_prior;
      p.q_min = p.q_max = unseen_q;
      for (Index i = 0; i < n_tasks; ++i) {
        char name[64];
        std::snprintf(name, sizeof(name), "unseen/%03lld", static_cast<long long>(i));
        tasks.push_back(
            {name, sample_episode<S>(
                       p, mix_seed(seed, seed_tag::task,
                                   static_cast<std::uint64_t>(1000 + i)))});
      }
    } else if (suite == "csv") {
      // bench.csv entries look like path:label_column:train_fraction
      for (const std::string& spec : split_list(kv_get(rc.cfg, "bench.csv", ""))) {
        const std::vector<std::string> parts = split_list(spec, ':');
        if (parts.size() != 3)
          throw ConfigError("bench.csv entry '" + spec +
                            "' is not path:label:fraction");
        const double frac = std::stod(parts[2]);
        tasks.push_back({"csv/" + fs::path(parts[0]).stem().string(),
                         load_csv<S>(parts[0], parts[1], frac, seed)});
      }
    } else {
      throw ConfigError("unknown bench suite '" + suite + "'");
    }
  }
  if (tasks.empty()) throw ConfigError("bench: no tasks in the suite");

  struct NamedPredictor {
    std::string name;
    Predictor<S> pred;
  };
  std::vector<NamedPredictor> models;
  models.push_back({"knn", make_knn_predictor<S>(knn_k)});
  const std::vector<std::string> ckpts = split_list(kv_get(rc.cfg, "checkpoints", ""));
  for (std::size_t c = 0; c < ckpts.size(); ++c) {
    Checkpoint ckpt = load_checkpoint(ckpts[c]);
    models.push_back({ckpt.model + "_" + std::to_string(c),
                      predictor_from_checkpoint<S>(ckpt, ecoc_ens, seed)});
  }

  struct Row {
    std::string task, model, acc, rel, secs;
    double acc_v = -1, rel_v = 0, secs_v = 0;
  };
  std::vector<Row> rows;
  for (const Task& task : tasks) {
    // knn reference accuracy first (it is models[0])
    double knn_acc = 0;
    for (const NamedPredictor& m : models) {
      Row row;
      row.task = task.name;
      row.model = m.name;
      const auto truth = labels_of(task.ep.Ystar);
      try {
        const auto t0 = Clock::now();
        Tensor<S> probs = m.pred(task.ep);
        row.secs_v = seconds_since(t0);
        const auto pred = argmax_rows(probs);
        Index hit = 0;
        for (std::size_t i = 0; i < pred.size(); ++i)
          if (pred[i] == truth[i]) ++hit;
        row.acc_v = static_cast<double>(hit) / static_cast<double>(task.ep.m());
        if (m.name == "knn") knn_acc = row.acc_v;
        row.rel_v = knn_acc > 0 ? 100.0 * (row.acc_v - knn_acc) / knn_acc : 0.0;
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.6f", row.acc_v);
        row.acc = buf;
        std::snprintf(buf, sizeof(buf), "%.4f", row.rel_v);
        row.rel = buf;
        std::snprintf(buf, sizeof(buf), "%.4f", row.secs_v);
        row.secs = buf;
      } catch (const CapacityError&) {
        row.acc = "unsupported";
        row.rel = "-";
        row.secs = "-";
      }
      rows.push_back(row);
    }
  }

  // medians per (suite, model) over supported tasks
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n == 0 ? 0.0 : (n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]));
  };
  std::vector<Row> medians;
  std::vector<std::string> suites;
  for (const Row& r : rows) {
    const std::string suite = r.task.substr(0, r.task.find('/'));
    if (std::find(suites.begin(), suites.end(), suite) == suites.end())
      suites.push_back(suite);
  }
  for (const std::string& suite : suites) {
    for (const NamedPredictor& m : models) {
      std::vector<double> accs, rels, secs;
      for (const Row& r : rows)
        if (r.model == m.name && r.acc_v >= 0 &&
            r.task.substr(0, r.task.find('/')) == suite) {
          accs.push_back(r.acc_v);
          rels.push_back(r.rel_v);
          secs.push_back(r.secs_v);
        }
      if (accs.empty()) continue;
      Row row;
      row.task = suite + "/median";
      row.model = m.name;
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%.6f", median(accs));
      row.acc = buf;
      std::snprintf(buf, sizeof(buf), "%.4f", median(rels));
      row.rel = buf;
      std::snprintf(buf, sizeof(buf), "%.4f", median(secs));
      row.secs = buf;
      medians.push_back(row);
    }
  }
  for (const Row& r : medians) rows.push_back(r);
  std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    return a.task != b.task ? a.task < b.task : a.model < b.model;
  });

  std::ostringstream os;
  os << "task\tmodel\taccuracy\trel_acc_vs_knn\tseconds\n";
  for (const Row& r : rows)
    os << r.task << "\t" << r.model << "\t" << r.acc << "\t" << r.rel << "\t"
       << r.secs << "\n";
  write_file((rc.out / "results.tsv").string(), os.str());
  write_manifest(rc, {Artifact{"results", "results.tsv", 4}});
  std::cout << "bench: wrote " << (rc.out / "results.tsv").string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// equigap

template <class S>
int run_equigap(const RunConfig& rc) {
  const std::uint64_t seed = kv_get_u64(rc.cfg, "seed", 0);
  const Index n_episodes = kv_get_long(rc.cfg, "lab.episodes", 32);
  const Index n_perms = kv_get_long(rc.cfg, "lab.n_perms", 10);
  const bool exhaustive = kv_get_bool(rc.cfg, "lab.exhaustive", true);
  const Index samples = kv_get_long(rc.cfg, "lab.samples", 12);
  const Index ecoc_ens = kv_get_long(rc.cfg, "ecoc_ens", 4);
  const PriorConfig prior = prior_from(rc.cfg);
  const std::vector<std::string> ckpts = split_list(kv_get(rc.cfg, "checkpoints", ""));
  if (ckpts.empty()) throw ConfigError("equigap: no checkpoints given");

  std::vector<Episode<S>> episodes;
  for (Index i = 0; i < n_episodes; ++i)
    episodes.push_back(sample_episode<S>(
        prior, mix_seed(seed, seed_tag::task, static_cast<std::uint64_t>(i))));
  Index max_q = 0;
  for (const auto& ep : episodes) max_q = std::max(max_q, ep.q());
  const SigmaMode mode = (exhaustive && max_q <= 4)
                             ? SigmaMode::Exhaustive()
                             : SigmaMode::Sampled(samples, mix_seed(seed, 0x5163));

  std::vector<Artifact> artifacts;
  std::ostringstream results_log;
  for (std::size_t c = 0; c < ckpts.size(); ++c) {
    Checkpoint ckpt = load_checkpoint(ckpts[c]);
    Predictor<S> pred = predictor_from_checkpoint<S>(ckpt, ecoc_ens, seed);
    const std::string name = ckpt.model + "_" + std::to_string(c);

    const double viol = violation_rate(pred, episodes, n_perms, seed);
    GapReport ce = gap_estimate(pred, episodes, GapLoss::cross_entropy, mode);
    ce.violation_rate = viol;
    SqIdentityResult sq = sq_identity_check(pred, episodes, mode);
    sq.report.violation_rate = viol;

    std::ostringstream os;
    os << ce.format() << "\n" << sq.report.format();
    os.precision(12);
    os << "sq_identity_pass: " << (sq.pass ? "true" : "false") << "\n";
    os << "sq_identity_difference: " << sq.difference << "\n";
    os << "sq_identity_margin: " << sq.margin << "\n";
    const std::string fname = "gap_report_" + name + ".txt";
    write_file((rc.out / fname).string(), os.str());
    artifacts.push_back(Artifact{"gap_" + std::to_string(c), fname, -1});
    results_log << name << "\t" << ce.summary_line() << "\n";
    results_log << name << "\t" << sq.report.summary_line() << "\n";

    // ensemble sweep, fixed-width model only
    if (ckpt.model == "fixedq") {
      auto model = fixedq_from_checkpoint<S>(ckpt);
      std::ostringstream sw;
      sw << "n_ens\tmean_violation\n";
      for (const std::string& tok : split_list(kv_get(rc.cfg, "lab.sweep", "1,2,4,8"))) {
        const Index n_ens = std::stol(tok);
        Predictor<S> ens{"fixedq.ens",
                         [model, n_ens, seed](const Episode<S>& ep) mutable {
                           return ensemble_forward(ep, model.cfg, model.params,
                                                   n_ens, seed);
                         }};
        sw << n_ens << "\t" << violation_rate(ens, episodes, n_perms, seed) << "\n";
      }
      const std::string sname = "sweep_" + name + ".tsv";
      write_file((rc.out / sname).string(), sw.str());
      artifacts.push_back(Artifact{"sweep_" + std::to_string(c), sname, -1});
    }
    std::cout << "equigap: " << name << " violation " << viol << " gap "
              << ce.gap << " +/- " << ce.gap_stderr << "\n";
  }
  // appended machine-readable summaries
  {
    std::ofstream log(rc.out / "results.log", std::ios::app);
    log << results_log.str();
  }
  std::vector<Artifact> final_artifacts = artifacts;
  final_artifacts.push_back(Artifact{"results_log", "results.log", -1});
  write_manifest(rc, final_artifacts);
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck

int run_gradcheck(const RunConfig& rc) {
  std::ostringstream os;
  bool all_pass = true;
  auto report = [&](const GradCheckResult& r) {
    char line[160];
    std::snprintf(line, sizeof(line), "[%s] %-28s max_rel_err=%.3g over %lld entries\n",
                  r.pass ? "ok" : "FAIL", r.name.c_str(), r.max_rel_err,
                  static_cast<long long>(r.checked));
    os << line;
    std::cout << line;
    all_pass = all_pass && r.pass;
  };
  for (const GradCheckResult& r : run_primitive_gradchecks(kv_get_u64(rc.cfg, "seed", 1234)))
    report(r);

  // full-loss checks on tiny configs of both models
  {
    ModelConfig mc;
    mc.d = 8;
    mc.n_layers = 2;
    mc.n_heads = 2;
    mc.hidden = 16;
    mc.p_max = 4;
    mc.decoder_hidden = 4;
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
    {
      auto params = init_equi_params<double>(mc, 13);
      std::vector<Tensord*> leaves;
      params.visit([&](const std::string&, Tensord& t) { leaves.push_back(&t); });
      report(check_gradients("equitab.full_loss", leaves, [&](Tape<double>&) {
        return cross_entropy_from_logits(equitab_logits(batch, mc, params),
                                         batch.Ystar);
      }));
    }
    {
      BaselineConfig bc{mc, 4};
      auto params = init_baseline_params<double>(bc, 13);
      std::vector<Tensord*> leaves;
      params.visit([&](const std::string&, Tensord& t) { leaves.push_back(&t); });
      report(check_gradients("fixedq.full_loss", leaves, [&](Tape<double>&) {
        return cross_entropy_from_logits(baseline_logits(batch, bc, params),
                                         batch.Ystar);
      }));
    }
  }
  write_file((rc.out / "gradcheck.txt").string(), os.str());
  write_manifest(rc, {Artifact{"gradcheck", "gradcheck.txt", -1}});
  return all_pass ? 0 : 1;
}

template <class S>
int dispatch(const RunConfig& rc) {
  if (rc.command == "train") return run_train<S>(rc);
  if (rc.command == "grid") return run_grid<S>(rc);
  if (rc.command == "bench") return run_bench<S>(rc);
  if (rc.command == "equigap") return run_equigap<S>(rc);
  throw ConfigError("unknown command '" + rc.command + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"target-equivariant in-context tabular learner"};
  app.require_subcommand(1);

  std::string config_path, seed_flag, out_dir = "out";
  std::vector<std::string> sets;
  app.add_option("--config", config_path, "flat key=value config file");
  app.add_option("--seed", seed_flag, "base seed (overrides config)");
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--set", sets, "override: key=value (repeatable)");

  for (const char* name : {"train", "grid", "bench", "equigap", "gradcheck"})
    app.add_subcommand(name)->fallthrough();

  CLI11_PARSE(app, argc, argv);
  const std::string command = app.get_subcommands().front()->get_name();

  try {
    RunConfig rc = resolve_config(command, config_path, sets, seed_flag, out_dir);
    if (command == "gradcheck") return run_gradcheck(rc);
    const std::string precision = kv_get(rc.cfg, "precision", "f32");
    if (precision == "f64") return dispatch<double>(rc);
    if (precision == "f32") return dispatch<float>(rc);
    throw ConfigError("precision must be f32 or f64, got '" + precision + "'");
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
