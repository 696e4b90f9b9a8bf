#include "support.hpp"

#include <doctest.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

using namespace tokenedit;
using namespace tokenedit::testing;
namespace fs = std::filesystem;

namespace {

// A model small enough to train in seconds.
const std::vector<std::string> kSmall = {"model.n_layers=2",     "model.d_model=32", "model.d_mlp=64",
                                         "train.epochs=2",       "edit.target_layers=[0]",
                                         "valuation.kl_factor=0.0625"};

cli::Invocation invocation(const std::string& command, const fs::path& dir,
                           std::vector<std::string> overrides = kSmall) {
  cli::Invocation inv;
  inv.command = command;
  inv.overrides = std::move(overrides);
  inv.config = cli::load_config(std::nullopt, inv.overrides);
  inv.output_dir = dir;
  return inv;
}

void run(const cli::Invocation& inv) {
  std::istringstream in;
  std::ostringstream out;
  cli::run(inv, in, out);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in);
  return {std::istreambuf_iterator<char>(in), {}};
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

void pipeline(const fs::path& dir) {
  for (const char* c : {"gen-corpus", "train", "cov", "edit"}) run(invocation(c, dir));
  run(invocation("eval", dir));
  auto eval = invocation("eval", dir);
  eval.checkpoint = dir / "edited.ckpt";
  run(eval);
}

struct Exit {
  int code;
  std::string stderr_text;
};

Exit run_binary(const std::string& args) {
  const std::string cmd = std::string("\"") + TOKENEDIT_CLI_PATH + "\" " + args + " 2>&1 1>/dev/null";
  FILE* pipe = ::popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::string text;
  std::array<char, 512> buf{};
  while (std::fgets(buf.data(), buf.size(), pipe)) text += buf.data();
  const int status = ::pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, text};
}

}  // namespace

TEST_CASE("config defaults and round trip") {
  const auto c = cli::PipelineConfig::defaults();
  CHECK(c.edit.target_layers == std::vector<int>{0});
  CHECK(c.edit.moment_weight == 100.0);
  CHECK(c.valuation.clamp_factor == 1.5);
  CHECK(c.valuation.weight_decay == 0.0);
  CHECK_NOTHROW(c.validate());
  const nlohmann::json j = c;
  CHECK(nlohmann::json(j.get<cli::PipelineConfig>()) == j);
  CHECK(cli::config_hash(j.get<cli::PipelineConfig>()) == cli::config_hash(c));

  cli::PipelineConfig bad = c;
  bad.edit.target_layers = {c.model.n_layers};
  try {
    bad.validate();
    FAIL("expected an invalid config");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kInvalidConfig);
  }
}

TEST_CASE("strict merge and overrides") {
  nlohmann::json base = {{"a", 1}, {"b", {{"c", "x"}, {"d", 2}}}};
  cli::merge_strict(base, {{"b", {{"c", "y"}}}});
  CHECK(base == nlohmann::json{{"a", 1}, {"b", {{"c", "y"}, {"d", 2}}}});
  CHECK_THROWS(cli::merge_strict(base, {{"b", {{"e", 1}}}}));
  CHECK_THROWS(cli::merge_strict(base, {{"z", 1}}));

  cli::apply_override(base, "a=3.5");
  CHECK(base["a"] == 3.5);
  cli::apply_override(base, "b.c=plain words");
  CHECK(base["b"]["c"] == "plain words");
  cli::apply_override(base, "b.d=[1,2]");
  CHECK(base["b"]["d"] == nlohmann::json::array({1, 2}));
  CHECK_THROWS(cli::apply_override(base, "b.nope=1"));
  CHECK_THROWS(cli::apply_override(base, "no_equals_sign"));

  // Later overrides win.
  const auto c = cli::load_config(std::nullopt, {"edit.moment_weight=7", "edit.moment_weight=9"});
  CHECK(c.edit.moment_weight == 9.0);

  const auto dir = scratch_dir("cli_config_file");
  {
    std::ofstream out(dir / "c.json");
    out << R"({"seed": 5, "edit": {"moment_weight": 11}})";
  }
  const auto f = cli::load_config(dir / "c.json", {"seed=6"});
  CHECK(f.seed == 6);
  CHECK(f.edit.moment_weight == 11.0);
  {
    std::ofstream out(dir / "typo.json");
    out << R"({"edit": {"moment_wieght": 11}})";
  }
  CHECK_THROWS(cli::load_config(dir / "typo.json", {}));
}

TEST_CASE("stage hashes follow the sections that shape each artifact") {
  const auto base = cli::PipelineConfig::defaults();
  auto c = base;
  c.edit.moment_weight *= 2;
  c.valuation.kl_factor = 0;
  CHECK(cli::corpus_stage_hash(c) == cli::corpus_stage_hash(base));
  CHECK(cli::model_stage_hash(c) == cli::model_stage_hash(base));
  CHECK(cli::cache_stage_hash(c) == cli::cache_stage_hash(base));
  CHECK(cli::config_hash(c) != cli::config_hash(base));

  c = base;
  c.train.epochs += 1;
  CHECK(cli::corpus_stage_hash(c) == cli::corpus_stage_hash(base));
  CHECK(cli::model_stage_hash(c) != cli::model_stage_hash(base));
  CHECK(cli::cache_stage_hash(c) != cli::cache_stage_hash(base));

  c = base;
  c.covariance.positions = PositionSelection::kCompletionOnly;
  CHECK(cli::model_stage_hash(c) == cli::model_stage_hash(base));
  CHECK(cli::cache_stage_hash(c) != cli::cache_stage_hash(base));

  c = base;
  c.corpus.seed += 1;
  CHECK(cli::corpus_stage_hash(c) != cli::corpus_stage_hash(base));
  CHECK(cli::model_stage_hash(c) != cli::model_stage_hash(base));
}

TEST_CASE("golden pipeline is byte-reproducible") {
  const auto a = scratch_dir("cli_golden_a"), b = scratch_dir("cli_golden_b");
  pipeline(a);
  pipeline(b);

  for (const char* f : {"vocab.json", "corpus.jsonl", "model.ckpt", "edited.ckpt", "caches/layer_0.cov",
                        "reports/eval_model_full.json", "reports/eval_edited_edit.json",
                        "reports/eval_edited_paraphrase.json", "reports/eval_edited_full.json"}) {
    INFO(f);
    CHECK(slurp(a / f) == slurp(b / f));
  }
  // Wall-clock timing is the only field allowed to differ.
  auto ra = read_json(a / "reports/edit_report.json"), rb = read_json(b / "reports/edit_report.json");
  ra.erase("seconds");
  rb.erase("seconds");
  CHECK(ra == rb);

  const auto edited = read_json(a / "reports/eval_edited_full.json");
  const auto before = read_json(a / "reports/eval_model_full.json");
  // Frozen from the first run of this configuration.
  CHECK(edited["weights"] == "366d48ff102aa42f");
  CHECK(edited["reference_weights"] == before["weights"]);
  CHECK(edited["schema_version"] == before["schema_version"]);
  CHECK(edited["checkpoint"] == "edited.ckpt");

  const auto manifest = read_json(a / "edit.manifest.json");
  CHECK(manifest["overrides"] == nlohmann::json(kSmall));
  CHECK(manifest["config"]["edit"]["target_layers"] == nlohmann::json::array({0}));
  CHECK(manifest["config_hash"] == edited["config_hash"]);
  CHECK(manifest["inputs"].contains("checkpoint"));
  CHECK(manifest["inputs"].contains("cache_layer_0"));

  SUBCASE("a changed model section is refused downstream") {
    auto overrides = kSmall;
    overrides.push_back("model.d_mlp=48");
    try {
      run(invocation("cov", a, overrides));
      FAIL("expected a fingerprint mismatch");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kFingerprintMismatch);
      CHECK(static_cast<int>(e.code()) == 4);
    }
  }
  SUBCASE("a changed covariance section invalidates the caches only") {
    auto overrides = kSmall;
    overrides.push_back("covariance.positions=\"completion_only\"");
    CHECK_THROWS_AS(run(invocation("edit", a, overrides)), FingerprintMismatch);
    CHECK_NOTHROW(run(invocation("eval", a, overrides)));
  }
}

TEST_CASE("missing inputs and unknown commands") {
  const auto dir = scratch_dir("cli_missing");
  try {
    run(invocation("train", dir));
    FAIL("expected not_found");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kNotFound);
    CHECK(std::string(e.what()).find("gen-corpus") != std::string::npos);
  }
  try {
    run(invocation("fly", dir));
    FAIL("expected a usage error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kUsage);
  }
}

TEST_CASE("binary exit codes and error json") {
  const auto dir = scratch_dir("cli_binary");
  const auto no_command = run_binary("");
  CHECK(no_command.code == 2);
  CHECK(nlohmann::json::parse(no_command.stderr_text)["error"] == "usage");

  const auto bad_key = run_binary("--output-dir " + dir.string() + " --set nope=1 gen-corpus");
  CHECK(bad_key.code == 3);
  const auto j = nlohmann::json::parse(bad_key.stderr_text);
  CHECK(j["exit_code"] == 3);
  CHECK(j["message"].get<std::string>().find("nope") != std::string::npos);

  const auto missing = run_binary("--output-dir " + dir.string() + " train");
  CHECK(missing.code == 8);
  CHECK(nlohmann::json::parse(missing.stderr_text)["error"] == "not_found");

  CHECK(run_binary("--output-dir " + dir.string() + " --set train.epochs=0 gen-corpus").code == 0);
  CHECK(fs::exists(dir / "gen-corpus.manifest.json"));
}
