#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;

namespace {

std::string cli_path() { return ACTDIFF_CLI_PATH; }

int run_cli(const std::string& args, const fs::path& dir) {
  const std::string cmd = "cd " + dir.string() + " && " + cli_path() + " " + args +
                          " >> cli_stdout.txt 2>> cli_stderr.txt";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

size_t line_count(const std::string& s) {
  size_t n = 0;
  for (char c : s)
    if (c == '\n') ++n;
  return n;
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("actdiff_cli_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

// small everything: quick to generate, train and decode
void write_small_config(const fs::path& path) {
  nlohmann::json j;
  j["seed"] = 7;
  j["n_tasks"] = 300;
  j["data"] = {{"num_bins", 32}, {"context_vocab", 32}};
  j["model"] = {{"embed_dim", 16}, {"layers", 1}, {"heads", 2}, {"ff_dim", 32}};
  j["train"] = {{"steps", 12}, {"batch_size", 4}, {"log_every", 6}};
  j["decode"] = {{"rounds", 5}};
  j["eval"] = {{"episodes", 8}};
  std::ofstream out(path);
  out << j.dump(2);
}

}  // namespace

TEST_CASE("cli pipeline: gen-data, train, decode, eval, ablate") {
  TempDir tmp;
  write_small_config(tmp.path / "config.json");

  REQUIRE(run_cli("gen-data --config config.json --out data", tmp.path) == 0);
  CHECK(fs::exists(tmp.path / "data/dataset.bin"));
  CHECK(fs::exists(tmp.path / "data/tokenizer.json"));
  CHECK(fs::exists(tmp.path / "data/manifest.json"));

  // same seed, same bytes
  REQUIRE(run_cli("gen-data --config config.json --out data2", tmp.path) == 0);
  CHECK(read_file(tmp.path / "data/dataset.bin") == read_file(tmp.path / "data2/dataset.bin"));

  REQUIRE(run_cli("train --config config.json --data data/dataset.bin"
                  " --tokenizer data/tokenizer.json --out run",
                  tmp.path) == 0);
  CHECK(fs::exists(tmp.path / "run/model.bin"));
  CHECK(fs::exists(tmp.path / "run/model.json"));
  CHECK(fs::exists(tmp.path / "run/train_log.csv"));

  // same config and seed: the checkpoint reproduces byte-for-byte
  REQUIRE(run_cli("train --config config.json --data data/dataset.bin"
                  " --tokenizer data/tokenizer.json --out run2",
                  tmp.path) == 0);
  CHECK(read_file(tmp.path / "run/model.bin") == read_file(tmp.path / "run2/model.bin"));

  REQUIRE(run_cli("decode --config config.json --model run/model"
                  " --tokenizer data/tokenizer.json --data data/dataset.bin"
                  " --episode 3 --trace --out dec",
                  tmp.path) == 0);
  CHECK(fs::exists(tmp.path / "dec/decoded.json"));
  const std::string trace = read_file(tmp.path / "dec/trace.jsonl");
  CHECK(line_count(trace) == 5);  // one record per round

  const nlohmann::json decoded = nlohmann::json::parse(read_file(tmp.path / "dec/decoded.json"));
  CHECK(decoded.at("nfe").get<int>() == 5);
  CHECK(decoded.at("tokens").size() == 56);

  REQUIRE(run_cli("eval --config config.json --model run/model"
                  " --tokenizer data/tokenizer.json --data data/dataset.bin --out ev",
                  tmp.path) == 0);
  const std::string eval_csv = read_file(tmp.path / "ev/eval.csv");
  CHECK(eval_csv.rfind("success_rate,episodes,mean_nfe,", 0) == 0);
  CHECK(line_count(eval_csv) == 2);

  REQUIRE(run_cli("ablate --config config.json --model run/model"
                  " --tokenizer data/tokenizer.json --data data/dataset.bin"
                  " --episodes 4 --out ab",
                  tmp.path) == 0);
  const std::string ablation = read_file(tmp.path / "ab/ablation.csv");
  CHECK(line_count(ablation) == 13);

  // manifests embed the config fingerprint
  const nlohmann::json manifest = nlohmann::json::parse(read_file(tmp.path / "ev/manifest.json"));
  CHECK(manifest.contains("config_fingerprint"));
  CHECK(manifest.at("command") == "eval");
}

TEST_CASE("cli rejects unknown config keys with a usage exit") {
  TempDir tmp;
  {
    std::ofstream out(tmp.path / "bad.json");
    out << R"({"seed": 1, "train": {"learning_rte": 0.1}})";
  }
  CHECK(run_cli("gen-data --config bad.json --out x", tmp.path) == 2);
  const std::string err = read_file(tmp.path / "cli_stderr.txt");
  CHECK(err.find("learning_rte") != std::string::npos);
}

TEST_CASE("cli maps bad flags to exit code 2") {
  TempDir tmp;
  CHECK(run_cli("decode --no-such-flag", tmp.path) == 2);
  CHECK(run_cli("", tmp.path) == 2);  // a subcommand is required
}

TEST_CASE("cli reports missing inputs as io errors") {
  TempDir tmp;
  write_small_config(tmp.path / "config.json");
  CHECK(run_cli("train --config config.json --data nope.bin --tokenizer nope.json --out r",
                tmp.path) == 1);
  const std::string err = read_file(tmp.path / "cli_stderr.txt");
  CHECK(err.find("[io]") != std::string::npos);
}
