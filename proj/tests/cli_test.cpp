#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "lensvdc/cli.hpp"
#include "oracles.hpp"
#include "synthetic.hpp"

namespace lensvdc {
namespace {

namespace fs = std::filesystem;

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(std::move(args), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() /
          ("lensvdc_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  std::string path(const std::string& name) const { return (dir / name).string(); }

  std::string generated_trace(const std::string& name = "trace.jsonl") {
    const Outcome r = run({"trace", "generate", "--layers", "6", "--hidden", "12", "--heads", "3", "--vocab-size", "40",
                       "--grid-h", "2", "--grid-w", "3", "--max-new", "8", "--seed", "5", "-o", path(name)});
    EXPECT_EQ(r.code, 0) << r.err;
    return path(name);
  }

  std::string synthetic_trace(std::uint64_t seed, bool grids = true) {
    std::mt19937_64 rng(seed);
    testing::SyntheticSpec spec;
    spec.layers = 6;
    spec.steps = 10;
    spec.vocab = 32;
    DecodeTrace tr = testing::random_trace(rng, spec);
    if (!grids) {
      tr.grid.reset();
      for (auto& st : tr.steps) {
        for (auto& rec : st.layers) {
          rec.visual_grid.reset();
          rec.instruction_attn.reset();
        }
      }
    }
    const std::string p = path("synthetic_" + std::to_string(seed) + ".jsonl");
    std::ofstream(p, std::ios::binary) << trace_to_string(tr);
    return p;
  }

  fs::path dir;
};

TEST_F(CliTest, ValidateGeneratedTrace) {
  const Outcome r = run({"trace", "validate", generated_trace()});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out, "OK\n");
}

TEST_F(CliTest, ValidateReportsViolations) {
  const std::string p = generated_trace();
  std::string text = slurp(p);
  text.replace(text.find("\"group_ratio\":["), 15, "\"group_ratio\":[-");
  std::ofstream(p, std::ios::binary | std::ios::trunc) << text;
  const Outcome r = run({"trace", "validate", p});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("group_ratio"), std::string::npos) << r.err;
}

TEST_F(CliTest, GateHeatmapsWithoutGridNamesField) {
  const Outcome r = run({"analyze", "gate", synthetic_trace(1, false), "--out-dir", path("gate"), "--heatmaps"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("'grid'"), std::string::npos) << r.err;
}

TEST_F(CliTest, GateGridCsvRoundTrip) {
  const std::string trace = generated_trace();
  const Outcome r = run({"analyze", "gate", trace, "--out-dir", path("gate"), "--heatmaps"});
  ASSERT_EQ(r.code, 0) << r.err;
  const DecodeTrace tr = trace_from_string(slurp(trace));
  const StageSpec stages = default_stages(tr.num_layers);
  const GateReport rep = gate_report(tr, stages, true);
  for (std::size_t i = 0; i < stages.stages.size(); ++i) {
    std::ifstream in(dir / "gate" / ("stage_avg_" + stages.stages[i].name + ".csv"));
    ASSERT_TRUE(in) << stages.stages[i].name;
    const Matrix m = csv::read_grid(in);
    ASSERT_EQ(m.rows(), rep.stage_avg[i].rows());
    ASSERT_EQ(m.cols(), rep.stage_avg[i].cols());
    for (std::size_t k = 0; k < m.data().size(); ++k) EXPECT_NEAR(m.data()[k], rep.stage_avg[i].data()[k], 1e-12);
  }
  EXPECT_TRUE(fs::exists(dir / "gate" / "instruction_heatmap.csv"));
  EXPECT_TRUE(fs::exists(dir / "gate" / "inter_stage_Global_Approach.csv"));
}

TEST_F(CliTest, CorrectMatchesOracle) {
  const std::string p = synthetic_trace(2);
  const Outcome r = run({"correct", p, "--validation", "attn-ffn", "--skip-layers", "2"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  const DecodeTrace tr = trace_from_string(slurp(p));
  const auto want = oracle::correct(tr, "attn-ffn", "attn-ffn-layer", 2);
  EXPECT_EQ(j.at("corrected_ids").get<std::vector<TokenId>>(), want);
  EXPECT_EQ(j.at("config").at("skip_layers"), 2);
}

TEST_F(CliTest, SkipAtLayerCountIsRejected) {
  const Outcome r = run({"correct", synthetic_trace(3), "--skip-layers", "6"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("skip-layers"), std::string::npos);
}

TEST_F(CliTest, ByteIdenticalAcrossRuns) {
  const std::string a = generated_trace("a.jsonl");
  const std::string b = generated_trace("b.jsonl");
  EXPECT_EQ(slurp(a), slurp(b));
  const Outcome ra = run({"report", a, "--out-dir", path("ra")});
  const Outcome rb = run({"report", b, "--out-dir", path("rb")});
  ASSERT_EQ(ra.code, 0) << ra.err;
  EXPECT_EQ(ra.out, rb.out);
  for (const auto& entry : fs::directory_iterator(dir / "ra")) {
    EXPECT_EQ(slurp(entry.path()), slurp(dir / "rb" / entry.path().filename())) << entry.path();
  }
  const Outcome oa = run({"decode-vdc", "--seed", "5", "--max-new", "6"});
  const Outcome ob = run({"decode-vdc", "--seed", "5", "--max-new", "6"});
  EXPECT_EQ(oa.code, 0) << oa.err;
  EXPECT_EQ(oa.out, ob.out);
}

TEST_F(CliTest, ReportHistogramTotalEqualsReplaced) {
  const Outcome r = run({"report", synthetic_trace(4), "--out-dir", path("report")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j.at("histogram_total"), j.at("replaced"));
  EXPECT_GT(j.at("replaced").get<std::size_t>(), 0u);
  std::ifstream hist(dir / "report" / "correction_layers.csv");
  std::string line;
  std::getline(hist, line);
  EXPECT_EQ(line, "layer,replacements,occurrences");
  std::size_t total = 0;
  while (std::getline(hist, line)) {
    const auto a = line.find(','), b = line.find(',', a + 1);
    total += std::stoul(line.substr(a + 1, b - a - 1));
  }
  EXPECT_EQ(total, j.at("replaced").get<std::size_t>());
  EXPECT_TRUE(fs::exists(dir / "report" / "rank1_changes_attn.csv"));
  EXPECT_TRUE(fs::exists(dir / "report" / "top5_ffn_t10.csv"));
}

TEST_F(CliTest, SadReport) {
  const Outcome r = run({"analyze", "sad", synthetic_trace(5), "--skip-layers", "1", "-o", path("sad.json")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(slurp(path("sad.json")));
  EXPECT_EQ(j.at("skip_layers"), 1);
  EXPECT_EQ(j.at("steps").size(), 10u);
}

TEST_F(CliTest, ModelFileDrivesGeneration) {
  ASSERT_EQ(run({"model", "new", "--layers", "4", "--seed", "11", "-o", path("m.json")}).code, 0);
  const Outcome from_file = run({"trace", "generate", "--model", path("m.json"), "--max-new", "4"});
  const Outcome from_flags = run({"trace", "generate", "--layers", "4", "--seed", "11", "--max-new", "4"});
  ASSERT_EQ(from_file.code, 0) << from_file.err;
  EXPECT_EQ(from_file.out, from_flags.out);

  auto j = nlohmann::json::parse(slurp(path("m.json")));
  j["checksum"] = "0000000000000000";
  std::ofstream(path("m.json"), std::ios::trunc) << j.dump();
  EXPECT_EQ(run({"trace", "generate", "--model", path("m.json")}).code, 2);
}

TEST_F(CliTest, EvalChair) {
  std::ofstream(path("lex.json")) << R"({"apple":["apple","apples"],"table":["table","desk"],"dog":["dog"]})";
  std::ofstream(path("corpus.jsonl")) << R"({"caption":"an apple and a dog","objects":["apple"]})" << "\n"
                                      << R"({"caption":"a desk","objects":["table"]})" << "\n";
  const Outcome r = run({"eval", "chair", "--lexicon", path("lex.json"), "--corpus", path("corpus.jsonl")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_DOUBLE_EQ(j.at("chair_s").get<double>(), 0.5);
  EXPECT_DOUBLE_EQ(j.at("chair_i").get<double>(), 1.0 / 3.0);
}

TEST_F(CliTest, ExitCodes) {
  EXPECT_EQ(run({"frobnicate"}).code, 1);
  EXPECT_EQ(run({"correct"}).code, 1);
  EXPECT_EQ(run({"correct", "x", "--validation", "bogus"}).code, 1);
  EXPECT_EQ(run({"--help"}).code, 0);
  EXPECT_EQ(run({"trace", "validate", path("missing.jsonl")}).code, 3);
  std::ofstream(path("bad.jsonl")) << "{\"version\":1,\n";
  EXPECT_EQ(run({"trace", "validate", path("bad.jsonl")}).code, 2);
  const std::string blocker = path("file");
  std::ofstream(blocker) << "x";
  EXPECT_EQ(run({"report", synthetic_trace(6), "--out-dir", blocker + "/sub"}).code, 3);
}

}  // namespace
}  // namespace lensvdc
