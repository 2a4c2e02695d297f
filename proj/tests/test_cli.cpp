#include <gtest/gtest.h>

#include <fstream>
#include <iterator>
#include <sstream>

#include "cbllm/checkpoint.hpp"
#include "cbllm/cli.hpp"
#include "cbllm/util.hpp"
#include "test_util.hpp"

namespace cbllm {
namespace {

using nlohmann::json;
using testing::data_path;
using testing::TempDir;

struct CliRun {
  int code = 0;
  std::string out, err;
  json result() const { return json::parse(out); }
};

CliRun cli(std::vector<std::string> args) {
  args.insert(args.begin(), "cbllm");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  CliRun r;
  r.code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// A small version of the news corpus so pipeline runs take a second.
class CliPipeline : public ::testing::Test {
 protected:
  void SetUp() override {
    SynthSpec spec = load_synth_spec(data_path("synth/news.json"));
    spec.samples_per_category = 40;
    spec.test_per_category = 12;
    write_file(spec_path(), spec.to_json().dump());
  }
  std::string spec_path() const { return dir.file("spec.json"); }
  std::vector<std::string> tiny_model() const { return {"--d-model", "16", "--layers", "1", "--heads", "2", "--context", "32"}; }
  std::vector<std::string> with(std::vector<std::string> a, const std::vector<std::string>& b) const {
    a.insert(a.end(), b.begin(), b.end());
    return a;
  }
  CliRun train_gen(const std::string& out, bool adversarial = true) {
    auto args = with({"train-gen", "--spec", spec_path(), "--epochs", "1", "--model", out}, tiny_model());
    if (!adversarial) args.push_back("--no-adversarial");
    return cli(args);
  }

  TempDir dir;
};

TEST(Cli, UnknownFlagPrintsUsageAndExitsOne) {
  CliRun r = cli({"explain", "--bogus"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("--bogus"), std::string::npos);
  EXPECT_NE(r.err.find("Usage:"), std::string::npos);
}

TEST(Cli, MissingOrUnknownCommandExitsOne) {
  EXPECT_EQ(cli({}).code, 1);
  EXPECT_EQ(cli({"frobnicate"}).code, 1);
}

TEST(Cli, HelpExitsZero) {
  CliRun r = cli({"steer", "--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("--neuron"), std::string::npos);
}

TEST(Cli, MissingInputIsValidationError) {
  TempDir dir;
  CliRun r = cli({"explain", "--model", dir.file("absent.json"), "--text", "hello"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("does not exist"), std::string::npos);
}

TEST(Cli, UnwritableOutputIsRuntimeFault) {
  TempDir dir;
  CliRun r = cli({"synth", "--spec", data_path("synth/news.json"), "--corpus", dir.file("c.jsonl"), "--out",
               dir.file("no/such/dir/r.json")});
  EXPECT_EQ(r.code, 2);
}

TEST(Cli, ConfigFileAppliesAndFlagsWin) {
  TempDir dir;
  write_file(dir.file("cfg.json"),
             json{{"spec", data_path("synth/news.json")}, {"corpus", dir.file("c.jsonl")}, {"seed", 3}}.dump());
  CliRun from_config = cli({"synth", "--config", dir.file("cfg.json")});
  ASSERT_EQ(from_config.code, 0) << from_config.err;
  EXPECT_EQ(from_config.result()["seed"], 3);
  CliRun flag_wins = cli({"synth", "--config", dir.file("cfg.json"), "--seed", "5"});
  ASSERT_EQ(flag_wins.code, 0) << flag_wins.err;
  EXPECT_EQ(flag_wins.result()["seed"], 5);
  EXPECT_NE(from_config.result()["corpus_hash"], flag_wins.result()["corpus_hash"]);

  write_file(dir.file("bad.json"), json{{"no-such-flag", 1}}.dump());
  CliRun bad = cli({"synth", "--config", dir.file("bad.json")});
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.err.find("no-such-flag"), std::string::npos);
  write_file(dir.file("broken.json"), "{not json");
  EXPECT_EQ(cli({"synth", "--config", dir.file("broken.json")}).code, 1);
}

TEST(Cli, SynthWritesALoadableCorpus) {
  TempDir dir;
  CliRun r = cli({"synth", "--spec", data_path("synth/sentiment.json"), "--corpus", dir.file("s.jsonl")});
  ASSERT_EQ(r.code, 0) << r.err;
  const json j = r.result();
  auto samples = load_jsonl(dir.file("s.jsonl"), j["categories"].size());
  EXPECT_EQ(samples.size(), j["train"].get<std::size_t>() + j["test"].get<std::size_t>());
}

TEST_F(CliPipeline, NoAccScoresGiveTheUncorrectedArm) {
  CliRun raw = cli({"score", "--spec", spec_path(), "--concepts", data_path("concepts/news.json"), "--scores",
                 dir.file("raw.json"), "--no-acc"});
  ASSERT_EQ(raw.code, 0) << raw.err;
  EXPECT_FALSE(raw.result()["corrected"].get<bool>());
  EXPECT_FALSE(load_scores(dir.file("raw.json")).corrected);
  CliRun acc = cli({"score", "--spec", spec_path(), "--concepts", data_path("concepts/news.json"), "--scores",
                 dir.file("acc.json")});
  ASSERT_EQ(acc.code, 0) << acc.err;
  EXPECT_TRUE(acc.result()["corrected"].get<bool>());
  EXPECT_LT(acc.result()["nonzero_fraction"].get<double>(), raw.result()["nonzero_fraction"].get<double>());

  CliRun cls = cli(with({"train-cls", "--spec", spec_path(), "--concepts", data_path("concepts/news.json"), "--scores",
                      dir.file("raw.json"), "--epochs", "1", "--model", dir.file("noacc.json")},
                     tiny_model()));
  ASSERT_EQ(cls.code, 0) << cls.err;
  EXPECT_FALSE(cls.result()["acc"].get<bool>());
  EXPECT_FALSE(load_classifier(dir.file("noacc.json")).meta["acc"].get<bool>());
}

TEST_F(CliPipeline, ScoresMustMatchTheTrainSplit) {
  SynthSpec other = load_synth_spec(spec_path());
  other.samples_per_category = 20;
  write_file(dir.file("other.json"), other.to_json().dump());
  ASSERT_EQ(cli({"score", "--spec", dir.file("other.json"), "--concepts", data_path("concepts/news.json"), "--scores",
                 dir.file("s.json")})
                .code,
            0);
  CliRun r = cli(with({"train-cls", "--spec", spec_path(), "--concepts", data_path("concepts/news.json"), "--scores",
                    dir.file("s.json"), "--model", dir.file("m.json")},
                   tiny_model()));
  EXPECT_EQ(r.code, 1);
}

TEST_F(CliPipeline, TrainClsIsDeterministicAndExplainMatchesTheLibrary) {
  auto args = with({"train-cls", "--spec", spec_path(), "--concepts", data_path("concepts/news.json"), "--epochs", "1",
                    "--seed", "4"},
                   tiny_model());
  CliRun a = cli(with(args, {"--model", dir.file("a.json")}));
  CliRun b = cli(with(args, {"--model", dir.file("b.json")}));
  ASSERT_EQ(a.code, 0) << a.err;
  ASSERT_EQ(b.code, 0) << b.err;
  json ja = a.result(), jb = b.result();
  ja.erase("model");
  jb.erase("model");
  EXPECT_EQ(ja.dump(), jb.dump());
  EXPECT_EQ(slurp(dir.file("a.bin")), slurp(dir.file("b.bin")));

  const std::string text = "the coach at the stadium";
  CliRun e = cli({"explain", "--model", dir.file("a.json"), "--text", text, "--r", "3"});
  ASSERT_EQ(e.code, 0) << e.err;
  EXPECT_EQ(e.out, load_classifier(dir.file("a.json")).explain(text, 3).to_json().dump(2) + "\n");
  EXPECT_EQ(cli({"explain", "--model", dir.file("a.json"), "--text", text, "--r", "0"}).code, 1);
}

TEST_F(CliPipeline, UnlearnReportsAndSavesTheMask) {
  ASSERT_EQ(cli(with({"train-cls", "--spec", spec_path(), "--concepts", data_path("concepts/news.json"), "--epochs", "1",
                      "--model", dir.file("m.json")},
                     tiny_model()))
                .code,
            0);
  CliRun r = cli({"unlearn", "--model", dir.file("m.json"), "--spec", spec_path(), "--concept", "3", "--save",
               dir.file("u.json")});
  ASSERT_EQ(r.code, 0) << r.err;
  const json j = r.result();
  EXPECT_EQ(j["index"], 3);
  EXPECT_TRUE(j["mask"][3].get<bool>());
  EXPECT_EQ(j["report"]["samples"], 48);
  EXPECT_TRUE(load_classifier(dir.file("u.json")).unlearned(3));
  EXPECT_EQ(cli({"unlearn", "--model", dir.file("m.json"), "--concept", "no such concept"}).code, 1);
}

TEST_F(CliPipeline, SteerRecordsTheOverride) {
  ASSERT_EQ(train_gen(dir.file("g.json")).code, 0);
  CliRun r = cli({"steer", "--model", dir.file("g.json"), "--neuron", "2", "--value", "100", "--max-tokens", "6", "--seed", "1"});
  ASSERT_EQ(r.code, 0) << r.err;
  const json t = r.result();
  EXPECT_EQ(t["steer"]["neuron"], 2);
  EXPECT_EQ(t["steer"]["value"], 100.0);
  bool found = false;
  for (const auto& iv : t["generation"]["interventions"]) {
    if (iv["neuron"] == 2) {
      EXPECT_EQ(iv["value"], 100.0);
      found = true;
    } else {
      EXPECT_EQ(iv["value"], 0.0);
    }
  }
  EXPECT_TRUE(found);
  ASSERT_FALSE(t["generation"]["steps"].empty());
  for (const auto& step : t["generation"]["steps"]) EXPECT_EQ(step["activations"][2], 100.0);
  EXPECT_EQ(cli({"steer", "--model", dir.file("g.json"), "--neuron", "4"}).code, 1);
  EXPECT_EQ(cli({"steer", "--model", dir.file("g.json")}).code, 1);
}

TEST_F(CliPipeline, GenerateIsSeededAndMatchesTheLibrary) {
  ASSERT_EQ(train_gen(dir.file("g.json")).code, 0);
  auto args = std::vector<std::string>{"generate", "--model", dir.file("g.json"), "--max-tokens", "8", "--seed", "11"};
  CliRun a = cli(args), b = cli(args);
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_EQ(a.out, b.out);
  GenerativeModel m = load_generator(dir.file("g.json"));
  GenerateOptions go;
  go.max_tokens = 8;
  go.seed = 11;
  GenerationResult lib = generate(m, {}, {}, go);
  const json transcript = a.result();
  std::vector<int> ids;
  for (const auto& s : transcript["generation"]["steps"]) ids.push_back(s["id"]);
  EXPECT_EQ(ids, lib.tokens);
  EXPECT_EQ(transcript["id"], generation_transcript(m, lib, go)["id"]);
  EXPECT_EQ(cli({"generate", "--model", dir.file("g.json"), "--intervene", "7=1"}).code, 1);
  EXPECT_EQ(cli({"generate", "--model", dir.file("g.json"), "--intervene", "x"}).code, 1);
}

TEST_F(CliPipeline, TrainGenCheckpointsOmitTheProbeUnlessAsked) {
  ASSERT_EQ(train_gen(dir.file("inf.json")).code, 0);
  EXPECT_FALSE(load_generator(dir.file("inf.json")).has_probe());
  CliRun r = cli(with({"train-gen", "--spec", spec_path(), "--epochs", "1", "--with-probe", "--model", dir.file("full.json")},
                   tiny_model()));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(load_generator(dir.file("full.json")).has_probe());
}

TEST_F(CliPipeline, EvalAblationPrintsTheDelta) {
  ASSERT_EQ(train_gen(dir.file("adv.json")).code, 0);
  ASSERT_EQ(train_gen(dir.file("noadv.json"), false).code, 0);
  CliRun r = cli({"eval", "--metric", "steerability", "--spec", spec_path(), "--model", dir.file("adv.json"), "--ablation",
               dir.file("noadv.json"), "--n-per-category", "3", "--max-tokens", "10"});
  ASSERT_EQ(r.code, 0) << r.err;
  const json j = r.result();
  const double a = j["model"]["metrics"]["steerability"]["value"];
  const double b = j["ablation"]["metrics"]["steerability"]["value"];
  EXPECT_DOUBLE_EQ(j["delta"]["steerability"].get<double>(), a - b);
  EXPECT_TRUE(j["model"]["context"]["adversarial"].get<bool>());
  EXPECT_FALSE(j["ablation"]["context"]["adversarial"].get<bool>());
  EXPECT_NE(r.err.find("delta steerability"), std::string::npos);
  EXPECT_EQ(cli({"eval", "--metric", "nonsense", "--spec", spec_path(), "--model", dir.file("adv.json")}).code, 1);
}

TEST_F(CliPipeline, ReportNeuronsForAGenerator) {
  ASSERT_EQ(train_gen(dir.file("g.json")).code, 0);
  CliRun r = cli({"report-neurons", "--model", dir.file("g.json"), "--top", "3"});
  ASSERT_EQ(r.code, 0) << r.err;
  const json j = r.result();
  ASSERT_EQ(j["neurons"].size(), 4u);
  EXPECT_EQ(j["neurons"][0]["top_tokens"].size(), 3u);
}

}  // namespace
}  // namespace cbllm
