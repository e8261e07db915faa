#include "test_support.hpp"
#include "ultraad/cli.hpp"
#include "ultraad/metrics_eval.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

namespace ultraad {
namespace {

namespace fs = std::filesystem;
using testing_support::slurp;
using testing_support::TempDir;

struct CliRun {
  int code;
  std::string out;
  std::string err;
};

CliRun cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

// Synthetic knobs small enough for sub-second runs.
std::vector<std::string> small(std::vector<std::string> args) {
  for (const char* o : {"synth.dim=16", "synth.grid_h=4", "synth.grid_w=4", "synth.height=16", "synth.width=16",
                        "synth.num_layers=2", "synth.samples_per_class=8", "synth.blob_radius_min=3",
                        "synth.blob_radius_max=6"}) {
    args.push_back("--override");
    args.push_back(o);
  }
  return args;
}

std::size_t count_ext(const fs::path& dir, const std::string& ext) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(dir)) n += e.path().extension() == ext;
  return n;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream is(p);
  return nlohmann::json::parse(is);
}

TEST(CliSynth, DefaultConfigWritesEveryBundle) {
  TempDir dir("cli_synth");
  const CliRun r = cli({"synth", "--out", (dir / "data").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(count_ext(dir / "data", ".ueb"), 120U);
  EXPECT_TRUE(fs::exists(dir / "data" / "manifest.json"));
  EXPECT_TRUE(fs::exists(dir / "data" / "config.resolved.json"));
}

TEST(CliSynth, SeedRepeatGivesIdenticalBytes) {
  TempDir dir("cli_synth");
  ASSERT_EQ(cli(small({"synth", "--seed", "3", "--out", (dir / "a").string()})).code, 0);
  ASSERT_EQ(cli(small({"synth", "--seed", "3", "--out", (dir / "b").string()})).code, 0);
  for (const auto& e : fs::directory_iterator(dir / "a")) {
    EXPECT_EQ(slurp(e.path()), slurp(dir / "b" / e.path().filename())) << e.path();
  }
}

TEST(CliSynth, InvalidDimFails) {
  TempDir dir("cli_synth");
  const CliRun r = cli({"synth", "--override", "synth.dim=4", "--out", (dir / "d").string()});
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("D must be at least 8"), std::string::npos) << r.err;
}

TEST(CliUsage, MissingSubcommand) {
  EXPECT_EQ(cli({}).code, 2);
}

TEST(CliUsage, UnknownOption) {
  EXPECT_EQ(cli({"train", "--bogus"}).code, 2);
}

TEST(CliUsage, Help) {
  const CliRun r = cli({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("gradcheck"), std::string::npos);
}

TEST(CliUsage, MalformedOverride) {
  TempDir dir("cli_usage");
  EXPECT_NE(cli({"synth", "--override", "novalue", "--out", dir.path().string()}).code, 0);
}

class CliPipeline : public ::testing::Test {
 protected:
  TempDir dir{"cli_pipe"};
  std::string data() const { return (dir / "data").string(); }
  void SetUp() override { ASSERT_EQ(cli(small({"synth", "--out", data()})).code, 0); }
  CliRun train(const std::string& out, std::vector<std::string> extra = {}) {
    std::vector<std::string> args{"train", "--override", "data=" + data(), "--shots", "2", "--out", out};
    args.insert(args.end(), extra.begin(), extra.end());
    return cli(args);
  }
  CliRun eval(const std::string& out) { return cli({"eval", "--override", "data=" + data(), "--out", out}); }
};

TEST_F(CliPipeline, TrainWithZeroEpochsStoresInitialization) {
  const std::string out = (dir / "run0").string();
  ASSERT_EQ(train(out, {"--override", "train.epochs=0"}).code, 0);
  const TrainedModel ckpt = load_checkpoint(fs::path(out) / "checkpoint.utm");
  const Dataset ds = read_dataset(data());
  auto [support, query] = build_fewshot_split(ds, 2, 0);
  TrainedModel init = init_model(support, read_dataset_prompts(data()), ModelConfig{}, 0);
  TrainedModel loaded = ckpt;
  auto a = trainable_parameters(loaded), b = trainable_parameters(init);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(*a[i].value, *b[i].value) << a[i].name;
  EXPECT_TRUE(fs::exists(fs::path(out) / "loss.csv"));
}

TEST_F(CliPipeline, BadDataPath) {
  const CliRun r = cli({"train", "--override", "data=/nonexistent/data", "--out", (dir / "x").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_FALSE(r.err.empty());
}

TEST_F(CliPipeline, MissingConfigFile) {
  EXPECT_EQ(cli({"train", "--config", "/nonexistent/c.json"}).code, 2);
}

TEST_F(CliPipeline, EvalMatchesLibraryAndExportsMaps) {
  const std::string out = (dir / "run").string();
  ASSERT_EQ(train(out, {"--override", "train.epochs=5", "--override", "train.learning_rate=0.01"}).code, 0);
  const CliRun r = eval(out);
  ASSERT_EQ(r.code, 0) << r.err;

  const TrainedModel model = load_checkpoint(fs::path(out) / "checkpoint.utm");
  const Dataset ds = read_dataset(data());
  auto [support, query] = build_fewshot_split(ds, 2, 0);
  EvalReport expected = evaluate(model, query);
  expected.shots = 2;
  EXPECT_EQ(read_json(fs::path(out) / "report.json")[0], expected.to_json());
  EXPECT_EQ(count_ext(fs::path(out) / "maps", ".pgm"), query.bundles.size());
  EXPECT_EQ(count_ext(fs::path(out) / "maps", ".uam"), query.bundles.size());
  EXPECT_TRUE(fs::exists(fs::path(out) / "report.csv"));
  EXPECT_TRUE(fs::exists(fs::path(out) / "scores.csv"));
}

TEST_F(CliPipeline, EvalWithoutCheckpoint) {
  EXPECT_EQ(eval((dir / "empty").string()).code, 2);
}

TEST_F(CliPipeline, ResolvedConfigReproducesOutputs) {
  const std::string a = (dir / "a").string(), b = (dir / "b").string();
  ASSERT_EQ(train(a, {"--override", "train.epochs=4"}).code, 0);
  ASSERT_EQ(cli({"train", "--config", a + "/config.resolved.json", "--out", b}).code, 0);
  EXPECT_EQ(slurp(fs::path(a) / "checkpoint.utm"), slurp(fs::path(b) / "checkpoint.utm"));
  EXPECT_EQ(slurp(fs::path(a) / "loss.csv"), slurp(fs::path(b) / "loss.csv"));
}

TEST_F(CliPipeline, AblateWritesOneReportPerVariant) {
  const std::string out = (dir / "abl").string();
  const CliRun r = cli({"ablate", "--override", "data=" + data(), "--seed", "0", "--shots", "2", "--override",
                     "train.epochs=3", "--out", out});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* v : {"full", "no_domain_prompts", "no_cls_loss", "no_pif"}) {
    EXPECT_TRUE(fs::exists(fs::path(out) / (std::string("report_") + v + ".json"))) << v;
    EXPECT_TRUE(fs::exists(fs::path(out) / (std::string("report_") + v + ".csv"))) << v;
  }
  // variant=full agrees with train + eval on the same seed.
  const std::string run = (dir / "single").string();
  ASSERT_EQ(train(run, {"--override", "train.epochs=3"}).code, 0);
  ASSERT_EQ(eval(run).code, 0);
  const auto full = read_json(fs::path(out) / "report_full.json")[0]["metrics"];
  const auto single = read_json(fs::path(run) / "report.json")[0]["metrics"];
  EXPECT_EQ(full, single);
}

TEST_F(CliPipeline, AblateRejectsUnknownVariant) {
  const CliRun r = cli({"ablate", "--override", "data=" + data(), "--override", "experiment.variants=[\"no_magic\"]",
                     "--out", (dir / "abl").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("no_magic"), std::string::npos);
}

TEST(CliGradcheck, PassesAtDefaultThreshold) {
  TempDir dir("cli_gc");
  const CliRun r = cli(small({"gradcheck", "--shots", "2", "--out", dir.path().string()}));
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_NE(r.out.find("PASS"), std::string::npos);
  for (const char* name : {"mini_net.w1", "mini_net.b2", "prompt.u", "prompt.cond_w", "prompt.cond_b", "fusion.w_q",
                           "fusion.w_k", "fusion.w_v", "fusion.w_o", "adapter.0.weight", "adapter.1.bias",
                           "memory.features"}) {
    EXPECT_NE(r.out.find(name), std::string::npos) << name;
  }
}

TEST(CliGradcheck, FailsAtUnattainableThreshold) {
  TempDir dir("cli_gc");
  const CliRun r = cli(small({"gradcheck", "--shots", "2", "--override", "gradcheck.threshold=1e-12", "--override",
                           "gradcheck.trained_steps=3", "--out", dir.path().string()}));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("FAIL"), std::string::npos);
}

EvalReport identity_eval_on_symmetric_data(const TempDir& dir) {
  std::vector<std::string> args{"synth", "--out", (dir / "sym").string()};
  for (const char* o : {"synth.dim=16", "synth.grid_h=8", "synth.grid_w=8", "synth.height=64", "synth.width=64",
                        "synth.num_layers=1", "synth.samples_per_class=200", "synth.blob_radius_min=8",
                        "synth.blob_radius_max=16", "synth.signal_strength=0"}) {
    args.push_back("--override");
    args.push_back(o);
  }
  EXPECT_EQ(cli(args).code, 0);
  const std::string run = (dir / "run").string();
  EXPECT_EQ(cli({"train", "--override", "data=" + (dir / "sym").string(), "--override", "train.epochs=0",
                 "--shots", "4", "--out", run})
                .code,
            0);
  EXPECT_EQ(cli({"eval", "--override", "data=" + (dir / "sym").string(), "--override", "eval.export_maps=false",
                 "--out", run})
                .code,
            0);
  std::ifstream is(fs::path(run) / "report.json");
  const auto j = nlohmann::json::parse(is)[0]["metrics"];
  EvalReport r;
  r.metrics.image_auroc_binary = j.at("image_auroc_binary").get<double>();
  r.metrics.pixel_auroc = j.at("pixel_auroc").get<double>();
  return r;
}

TEST(CliEval, IdentityCheckpointOnSymmetricDataIsChance) {
  TempDir dir("cli_sym");
  const EvalReport r = identity_eval_on_symmetric_data(dir);
  EXPECT_NEAR(*r.metrics.image_auroc_binary, 0.5, 0.05);
  EXPECT_NEAR(*r.metrics.pixel_auroc, 0.5, 0.05);
  EXPECT_FALSE(fs::exists(dir / "run" / "maps"));
}

TEST(CliTrain, DefaultSyntheticLossTrendsDown) {
  TempDir dir("cli_default");
  ASSERT_EQ(cli({"synth", "--out", (dir / "data").string()}).code, 0);
  ASSERT_EQ(cli({"train", "--override", "data=" + (dir / "data").string(), "--shots", "4", "--out",
                 (dir / "run").string()})
                .code,
            0);
  std::ifstream is(dir / "run" / "loss.csv");
  std::string line;
  std::getline(is, line);
  ASSERT_EQ(line, "epoch,dice,focal,ce,total");
  std::vector<double> totals;
  while (std::getline(is, line)) totals.push_back(std::stod(line.substr(line.rfind(',') + 1)));
  ASSERT_EQ(totals.size(), 201U);
  int down = 0;
  for (std::size_t i = 1; i < totals.size(); ++i) down += totals[i] < totals[i - 1];
  EXPECT_GE(down, 0.8 * (totals.size() - 1));
}

}  // namespace
}  // namespace ultraad
