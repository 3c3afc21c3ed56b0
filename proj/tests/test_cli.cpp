// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

namespace fs = std::filesystem;

namespace {

const fs::path& work_dir() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "latent_depth_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

int run(const std::string& args, const std::string& stdout_file = "") {
  std::string cmd = "cd '" + work_dir().string() + "' && '" LATENT_DEPTH_CLI "' " + args;
  cmd += stdout_file.empty() ? " >/dev/null" : " >'" + stdout_file + "'";
  cmd += " 2>/dev/null";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(work_dir() / p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

const std::string kSmall =
    "--tasks m2o-diverse4 --vocab 20 --train-examples 32 --gating latent --encoder-gating static "
    "--encoder-layers 1 --decoder-layers 3 --model-dim 8 --ffn-dim 16 --heads 2 --K 1.5 "
    "--validate-every 3 --batch-size 4";

}  // namespace

TEST_CASE("gen-corpus") {
  CHECK(run("gen-corpus --tasks m2o-diverse4 --seed 7 --out c1") == 0);
  CHECK(run("gen-corpus --tasks m2o-diverse4 --seed 7 --out c2") == 0);
  for (const char* f : {"corpus.json", "manifest.json", "task0.train.txt", "task3.test.txt"}) {
    CHECK(slurp(fs::path("c1") / f) == slurp(fs::path("c2") / f));
    CHECK(!slurp(fs::path("c1") / f).empty());
  }
  CHECK(run("gen-corpus --tasks m2o-diverse4 --seed 7") == 2);
  CHECK(run("gen-corpus --tasks m2o-diverse4 --vocab 8 --out c3") == 2);
  CHECK(run("gen-corpus --tasks nonsense --out c4") == 2);
}

TEST_CASE("train, resume, eval, prune and export") {
  CHECK(run("train " + kSmall + " --steps 6 --out r1 --checkpoint-every 3") == 0);
  for (const char* f : {"manifest.json", "metrics.csv", "validation.csv", "utilization.csv", "hist.bin",
                        "checkpoints/final.json", "checkpoints/step-000003.json"}) {
    CHECK(fs::exists(work_dir() / "r1" / f));
  }
  CHECK(slurp("r1/metrics.csv").rfind("step,task,nll,kl,depth_loss,beta_effective,total\n", 0) == 0);

  CHECK(run("train --config r1/manifest.json --out r2") == 0);
  CHECK(slurp("r1/metrics.csv") == slurp("r2/metrics.csv"));

  fs::create_directories(work_dir() / "r3");
  fs::copy_file(work_dir() / "r1/manifest.json", work_dir() / "r3/manifest.json");
  CHECK(run("train --resume r1/checkpoints/step-000003.json --out r3") == 0);
  CHECK(slurp("r1/metrics.csv") == slurp("r3/metrics.csv"));
  CHECK(slurp("r1/validation.csv") == slurp("r3/validation.csv"));

  CHECK(run("train " + kSmall + " --steps 6 --out r4 --beta -1") == 2);
  CHECK(run("train " + kSmall + " --steps 6 --out r4 --prior beta:0,1") == 2);
  CHECK(run("train --out r5") == 2);

  CHECK(run("eval --checkpoint r1/checkpoints/final.json", "e1.csv") == 0);
  CHECK(run("eval --checkpoint r1/checkpoints/final.json", "e2.csv") == 0);
  CHECK(slurp("e1.csv") == slurp("e2.csv"));
  CHECK(slurp("e1.csv").rfind("task,nll,accuracy,effective_depth\n", 0) == 0);
  CHECK(run("eval --checkpoint missing.json") == 2);

  CHECK(run("prune --checkpoint r1/checkpoints/final.json --threshold 0 --out p0", "p0.txt") == 0);
  const auto report = slurp("p0.txt");
  const auto pos = report.find("parameters: ");
  REQUIRE(pos != std::string::npos);
  const auto line = report.substr(pos, report.find('\n', pos) - pos);
  const auto arrow = line.find(" -> ");
  CHECK(line.substr(12, arrow - 12) == line.substr(arrow + 4));
  CHECK(report.find("task 3 decoder mask") != std::string::npos);
  CHECK(fs::exists(work_dir() / "p0/pruned.json"));
  CHECK(run("eval --checkpoint p0/pruned.json --tasks m2o-diverse4 --vocab 20 --train-examples 32") == 0);

  CHECK(run("export --history r1/hist.bin --out u.csv") == 0);
  CHECK(slurp("u.csv") == slurp("r1/utilization.csv"));
  CHECK(run("export --history missing.bin --out u2.csv") == 2);
}

TEST_CASE("divergence exit code") {
  CHECK(run("train " + kSmall + " --steps 12 --out d1 --lr 1e300 --warmup 1") == 3);
}

TEST_CASE("gradcheck and probe") {
  CHECK(run("gradcheck --layers 2 --model-dim 16 --ffn-dim 24 --heads 2") == 0);
  CHECK(run("gradcheck --layers 2 --model-dim 16 --ffn-dim 24 --heads 2 --norm none") == 0);
  CHECK(run("gradcheck --layers 2 --model-dim 16 --ffn-dim 24 --heads 2 --tolerance 0") == 4);
  CHECK(run("gradcheck --layers 2 --precision 32") == 2);
  CHECK(run("gradcheck --checkpoint r1/checkpoints/final.json") == 0);

  CHECK(run("probe --gates zeros --layers 3 --model-dim 16 --ffn-dim 24 --heads 2", "probe.csv") == 0);
  const auto csv = slurp("probe.csv");
  CHECK(csv.rfind("assignment,stack,layer,grad_norm\n", 0) == 0);
  std::string decoder_norm;
  std::size_t rows = 0;
  for (std::size_t at = csv.find('\n') + 1; at < csv.size(); at = csv.find('\n', at) + 1) {
    const auto row = csv.substr(at, csv.find('\n', at) - at);
    if (row.find(",decoder,") == std::string::npos) continue;
    const auto value = row.substr(row.rfind(',') + 1);
    if (decoder_norm.empty()) decoder_norm = value;
    CHECK(value == decoder_norm);
    ++rows;
  }
  CHECK(rows == 4);
}
