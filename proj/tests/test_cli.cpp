// Exercises the built CLI end to end: schemas, determinism of emitted
// files, config errors, manifest-based reruns.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "equitab/checkpoint.hpp"
#include "equitab/kvconfig.hpp"

namespace fs = std::filesystem;
using namespace equitab;

namespace {

struct CliResult {
  int exit_code = -1;
  std::string output;
};

CliResult run_cli(const std::string& args) {
  const std::string cmd = std::string(EQUITAB_CLI_PATH) + " " + args + " 2>&1";
  CliResult res;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[4096];
  while (std::fgets(buf, sizeof(buf), pipe)) res.output += buf;
  const int status = pclose(pipe);
  res.exit_code = WEXITSTATUS(status);
  return res;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "equitab_cli_tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Strips wall-clock fields (a given tab column) before comparing.
std::string mask_column(const std::string& content, std::size_t col) {
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
    if (col < fields.size()) fields[col] = "-";
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) out << '\t';
      out << fields[i];
    }
    out << '\n';
  }
  return out.str();
}

const std::string kTinyTrain =
    " --set total_batches=30 --set warmup_batches=5 --set eval_every=10"
    " --set eval_episodes=4 --set batch_size=4 --set lr_max=1e-3"
    " --set d=16 --set n_layers=2 --set n_heads=2 --set hidden=32"
    " --set decoder_hidden=8 --set p_max=8"
    " --set prior.n_min=8 --set prior.n_max=12 --set prior.total_points=0"
    " --set prior.m_min=4 --set prior.m_max=6 --set prior.p_min=2"
    " --set prior.p_max=3 --set prior.q_min=2 --set prior.q_max=3";

}  // namespace

TEST_CASE("train: emits checkpoint, log and manifest; reruns are identical") {
  const fs::path a = fresh_dir("train_a");
  const fs::path b = fresh_dir("train_b");
  auto r1 = run_cli("train --out " + a.string() + " --seed 11" + kTinyTrain);
  INFO(r1.output);
  REQUIRE(r1.exit_code == 0);
  auto r2 = run_cli("train --out " + b.string() + " --seed 11" + kTinyTrain);
  REQUIRE(r2.exit_code == 0);

  // checkpoint loads and is byte-identical across reruns
  CHECK(read_file((a / "model.ckpt").string()) ==
        read_file((b / "model.ckpt").string()));
  Checkpoint ckpt = load_checkpoint((a / "model.ckpt").string());
  CHECK(ckpt.model == "equitab");
  CHECK(ckpt.step == 30);

  // log schema: 6 tab-separated columns, steps at 10/20/30
  const std::string log = read_file((a / "train.log").string());
  std::istringstream ls(log);
  std::string line;
  int lines = 0;
  while (std::getline(ls, line)) {
    ++lines;
    CHECK(std::count(line.begin(), line.end(), '\t') == 5);
  }
  CHECK(lines == 3);
  CHECK(log.substr(0, 3) == "10\t");

  // identical after masking the wall-clock column
  CHECK(mask_column(read_file((a / "train.log").string()), 5) ==
        mask_column(read_file((b / "train.log").string()), 5));

  // manifest echoes the resolved config and checksums
  const KvMap manifest = parse_kv_file((a / "manifest.txt").string());
  CHECK(kv_get(manifest, "run.command", "") == "train");
  CHECK(kv_get(manifest, "seed", "") == "11");
  CHECK(kv_get(manifest, "total_batches", "") == "30");
  CHECK(kv_has(manifest, "artifact.checkpoint.fnv1a64"));
}

TEST_CASE("train: resume continues the log without step gaps") {
  const fs::path a = fresh_dir("resume_a");
  auto r1 = run_cli("train --out " + a.string() + " --seed 3" + kTinyTrain +
                    " --set total_batches=20");
  REQUIRE(r1.exit_code == 0);
  auto r2 = run_cli("train --out " + a.string() + " --seed 3" + kTinyTrain +
                    " --set total_batches=30 --set resume=" +
                    (a / "model.ckpt").string());
  INFO(r2.output);
  REQUIRE(r2.exit_code == 0);
  const std::string log = read_file((a / "train.log").string());
  std::istringstream ls(log);
  std::string line;
  std::vector<long> steps;
  while (std::getline(ls, line)) steps.push_back(std::stol(line));
  CHECK(steps == std::vector<long>{10, 20, 30});
}

TEST_CASE("train: manifest reruns reproduce the checkpoint byte for byte") {
  const fs::path a = fresh_dir("manifest_a");
  const fs::path b = fresh_dir("manifest_b");
  REQUIRE(run_cli("train --out " + a.string() + " --seed 5" + kTinyTrain).exit_code == 0);
  auto r = run_cli("train --out " + b.string() + " --config " +
                   (a / "manifest.txt").string());
  INFO(r.output);
  REQUIRE(r.exit_code == 0);
  CHECK(read_file((a / "model.ckpt").string()) ==
        read_file((b / "model.ckpt").string()));
}

TEST_CASE("config errors: line numbers and unknown keys") {
  const fs::path dir = fresh_dir("cfg");
  write_file((dir / "bad.cfg").string(), "total_batches = 5\nthis is junk\n");
  auto r = run_cli("train --out " + dir.string() + " --config " +
                   (dir / "bad.cfg").string());
  CHECK(r.exit_code != 0);
  CHECK(r.output.find(":2") != std::string::npos);

  auto r2 = run_cli("train --out " + dir.string() + " --set nonsense=1");
  CHECK(r2.exit_code != 0);
  CHECK(r2.output.find("nonsense") != std::string::npos);
}

TEST_CASE("grid: schema, row count, cross-run determinism") {
  const fs::path t = fresh_dir("grid_train");
  REQUIRE(run_cli("train --out " + t.string() + " --seed 2" + kTinyTrain +
                  " --set total_batches=0 --set warmup_batches=0")
              .exit_code == 0);
  const fs::path a = fresh_dir("grid_a");
  const fs::path b = fresh_dir("grid_b");
  const std::string args = " --seed 9 --set checkpoints=" +
                           (t / "model.ckpt").string() +
                           " --set grid.resolution=5 --set grid.orderings=3";
  REQUIRE(run_cli("grid --out " + a.string() + args).exit_code == 0);
  REQUIRE(run_cli("grid --out " + b.string() + args).exit_code == 0);
  const std::string csv = read_file((a / "grid_equitab_0.csv").string());
  std::istringstream cs(csv);
  std::string line;
  REQUIRE(std::getline(cs, line));
  CHECK(line == "ordering_id,x1,x2,pred_class");
  int rows = 0;
  while (std::getline(cs, line)) ++rows;
  CHECK(rows == 5 * 5 * 3);
  CHECK(csv == read_file((b / "grid_equitab_0.csv").string()));

  // degenerate resolution=1 emits one row per ordering
  const fs::path c = fresh_dir("grid_c");
  REQUIRE(run_cli("grid --out " + c.string() + " --seed 9 --set checkpoints=" +
                  (t / "model.ckpt").string() + " --set grid.resolution=1")
              .exit_code == 0);
  const std::string tiny = read_file((c / "grid_equitab_0.csv").string());
  CHECK(std::count(tiny.begin(), tiny.end(), '\n') == 4);  // header + 3 rows
}

TEST_CASE("bench: schema, knn self-comparison, determinism") {
  const fs::path t = fresh_dir("bench_train");
  REQUIRE(run_cli("train --out " + t.string() + " --seed 2" + kTinyTrain)
              .exit_code == 0);
  const fs::path a = fresh_dir("bench_a");
  const fs::path b = fresh_dir("bench_b");
  const std::string args =
      " --seed 13 --set checkpoints=" + (t / "model.ckpt").string() +
      " --set bench.tasks=3 --set bench.suite=seen --set p_max=8"
      " --set prior.n_min=10 --set prior.n_max=14 --set prior.total_points=0"
      " --set prior.m_min=5 --set prior.m_max=6 --set prior.p_min=2"
      " --set prior.p_max=3 --set prior.q_min=2 --set prior.q_max=3";
  REQUIRE(run_cli("bench --out " + a.string() + args).exit_code == 0);
  REQUIRE(run_cli("bench --out " + b.string() + args).exit_code == 0);
  const std::string tsv = read_file((a / "results.tsv").string());
  std::istringstream ts(tsv);
  std::string line;
  REQUIRE(std::getline(ts, line));
  CHECK(line == "task\tmodel\taccuracy\trel_acc_vs_knn\tseconds");
  int knn_rows = 0;
  while (std::getline(ts, line)) {
    if (line.find("\tknn\t") != std::string::npos &&
        line.find("median") == std::string::npos) {
      ++knn_rows;
      CHECK(line.find("\t0.0000\t") != std::string::npos);  // rel vs itself
    }
  }
  CHECK(knn_rows == 3);
  CHECK(mask_column(tsv, 4) ==
        mask_column(read_file((b / "results.tsv").string()), 4));
}

TEST_CASE("equigap: reports, sweep table, determinism") {
  const fs::path t = fresh_dir("gap_train");
  REQUIRE(run_cli("train --out " + t.string() + " --seed 2 --set model=fixedq" +
                  kTinyTrain + " --set total_batches=0 --set warmup_batches=0")
              .exit_code == 0);
  const fs::path a = fresh_dir("gap_a");
  const fs::path b = fresh_dir("gap_b");
  const std::string args =
      " --seed 17 --set checkpoints=" + (t / "model.ckpt").string() +
      " --set lab.episodes=4 --set lab.n_perms=3 --set p_max=8"
      " --set prior.n_min=10 --set prior.n_max=12 --set prior.total_points=0"
      " --set prior.m_min=4 --set prior.m_max=5 --set prior.p_min=2"
      " --set prior.p_max=3 --set prior.q_min=3 --set prior.q_max=3"
      " --set lab.sweep=1,2";
  REQUIRE(run_cli("equigap --out " + a.string() + args).exit_code == 0);
  REQUIRE(run_cli("equigap --out " + b.string() + args).exit_code == 0);
  const std::string rep = read_file((a / "gap_report_fixedq_0.txt").string());
  CHECK(rep.find("gap: ") != std::string::npos);
  CHECK(rep.find("violation_rate: ") != std::string::npos);
  CHECK(rep == read_file((b / "gap_report_fixedq_0.txt").string()));
  const std::string sweep = read_file((a / "sweep_fixedq_0.tsv").string());
  CHECK(sweep.find("n_ens\tmean_violation") == 0);
  CHECK(read_file((a / "results.log").string()) ==
        read_file((b / "results.log").string()));
}

TEST_CASE("gradcheck command passes and writes its report") {
  const fs::path a = fresh_dir("gradcheck");
  auto r = run_cli("gradcheck --out " + a.string());
  INFO(r.output);
  CHECK(r.exit_code == 0);
  const std::string rep = read_file((a / "gradcheck.txt").string());
  CHECK(rep.find("[ok] equitab.full_loss") != std::string::npos);
  CHECK(rep.find("FAIL") == std::string::npos);
}
