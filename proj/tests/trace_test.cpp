#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "lensvdc/trace.hpp"
#include "synthetic.hpp"

namespace lensvdc {
namespace {

DecodeTrace minimal_trace() {
  std::mt19937_64 rng(11);
  testing::SyntheticSpec spec;
  spec.layers = 2;
  spec.steps = 1;
  return testing::random_trace(rng, spec);
}

bool mentions(const std::vector<Violation>& v, const std::string& needle) {
  for (const auto& x : v) {
    if (x.to_string().find(needle) != std::string::npos) return true;
  }
  return false;
}

TEST(Validate, WellFormedTraceHasNoViolations) { EXPECT_TRUE(validate(minimal_trace()).empty()); }

TEST(Validate, BadGroupRatioIsNamed) {
  DecodeTrace tr = minimal_trace();
  tr.steps[0].layers[0].group_ratio = {0.5, 0.5, 0.5, -0.5};
  const auto v = validate(tr);
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(v[0].field, "group_ratio");
  EXPECT_NE(v[0].to_string().find("ratio sum/negativity at step 1 layer 1"), std::string::npos);
}

TEST(Validate, UnsortedStreamIsNamed) {
  DecodeTrace tr = minimal_trace();
  auto& list = tr.steps[0].layers[1].stream(StreamKind::FfnOut);
  std::swap(list[0], list[3]);
  const auto v = validate(tr);
  ASSERT_FALSE(v.empty());
  EXPECT_TRUE(mentions(v, "streams.ffn: not sorted"));
  EXPECT_EQ(v[0].layer, 2u);
}

TEST(Validate, StructuralViolations) {
  DecodeTrace tr = minimal_trace();
  tr.topk = 4;
  tr.steps[0].t = 3;
  tr.steps[0].layers.pop_back();
  tr.steps[0].emitted.normalized = "Wrong";
  tr.segments.instruction = {5, 5};
  const auto v = validate(tr);
  EXPECT_TRUE(mentions(v, "topk"));
  EXPECT_TRUE(mentions(v, "t: expected 1"));
  EXPECT_TRUE(mentions(v, "layers: expected 2"));
  EXPECT_TRUE(mentions(v, "emitted: normalized form"));
  EXPECT_TRUE(mentions(v, "segments.instruction"));
}

TEST(Validate, EmptySystemSegmentIsAllowed) {
  DecodeTrace tr = minimal_trace();
  tr.segments.system = {0, 0};
  EXPECT_TRUE(validate(tr).empty());
}

TEST(Validate, IsTotalOnGarbage) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    DecodeTrace tr = minimal_trace();
    tr.num_layers = rng() % 4;
    tr.topk = rng() % 8;
    tr.vocab_size = rng() % 20;
    tr.segments.vision = {rng() % 10, rng() % 10};
    if (rng() % 2) tr.grid.reset();
    if (rng() % 2) tr.steps[0].layers[0].visual_grid = std::vector<double>(rng() % 9, -1.0);
    if (rng() % 2) tr.steps[0].layers[0].instruction_attn.reset();
    if (rng() % 2) tr.steps[0].layers.clear();
    EXPECT_NO_THROW(validate(tr));
  }
}

TEST(WriteTrace, HeaderLineComesFirst) {
  const std::string text = trace_to_string(minimal_trace());
  EXPECT_EQ(text.rfind("{\"version\":1,\"num_layers\":2,\"vocab_size\":16,\"topk\":5,\"grid\":", 0), 0u);
}

TEST(WriteTrace, AbsentOptionalFieldsAreOmitted) {
  DecodeTrace tr = minimal_trace();
  tr.grid.reset();
  for (auto& rec : tr.steps[0].layers) {
    rec.visual_grid.reset();
    rec.instruction_attn.reset();
  }
  const std::string text = trace_to_string(tr);
  EXPECT_EQ(text.find("visual_grid"), std::string::npos);
  EXPECT_EQ(text.find("instruction_attn"), std::string::npos);
  EXPECT_EQ(text.find("\"grid\""), std::string::npos);
  EXPECT_EQ(text.find("null"), std::string::npos);
  EXPECT_EQ(trace_from_string(text), tr);
}

TEST(WriteTrace, RejectsInvalidTrace) {
  DecodeTrace tr = minimal_trace();
  tr.steps[0].layers[0].group_ratio = {1.0, 1.0, 0.0, 0.0};
  std::ostringstream os;
  EXPECT_THROW(write_trace(tr, os), ValidationError);
}

TEST(WriteTrace, StepFieldOrder) {
  const std::string text = trace_to_string(minimal_trace());
  const std::string step = text.substr(text.find('\n') + 1);
  EXPECT_EQ(step.rfind("{\"t\":1,\"emitted\":{\"id\":", 0), 0u);
  EXPECT_LT(step.find("\"group_ratio\""), step.find("\"visual_grid\""));
  EXPECT_LT(step.find("\"visual_grid\""), step.find("\"instruction_attn\""));
  EXPECT_LT(step.find("\"streams\":{\"layer\""), step.find("\"attn\""));
}

TEST(ReadTrace, RoundTripIsExactProperty) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    testing::SyntheticSpec spec;
    spec.layers = 2 + rng() % 6;
    spec.steps = rng() % 5;
    spec.topk = 5 + rng() % 4;
    const DecodeTrace tr = testing::random_trace(rng, spec);
    const std::string text = trace_to_string(tr);
    EXPECT_EQ(trace_from_string(text), tr);
    EXPECT_EQ(trace_to_string(trace_from_string(text)), text);
  }
}

TEST(ReadTrace, TruncatedFileNamesLastCompleteLine) {
  std::mt19937_64 rng(14);
  testing::SyntheticSpec spec;
  spec.steps = 3;
  const std::string text = trace_to_string(testing::random_trace(rng, spec));
  const std::string cut = text.substr(0, text.size() - 40);
  try {
    trace_from_string(cut);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line, 4u);
    EXPECT_NE(std::string(e.what()).find("last complete line 3"), std::string::npos);
  }
}

TEST(ReadTrace, UnsupportedVersion) {
  std::string text = trace_to_string(minimal_trace());
  text.replace(text.find("\"version\":1"), 11, "\"version\":2");
  try {
    trace_from_string(text);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("unsupported version"), std::string::npos);
  }
}

TEST(ReadTrace, UnknownFieldsWarnAndAreIgnored) {
  const DecodeTrace tr = minimal_trace();
  std::string text = trace_to_string(tr);
  text.insert(1, "\"producer\":\"x\",");
  std::vector<std::string> warnings;
  EXPECT_EQ(trace_from_string(text, &warnings), tr);
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find("producer"), std::string::npos);
}

TEST(ReadTrace, InvariantViolationIsValidationError) {
  std::string text = trace_to_string(minimal_trace());
  const auto pos = text.find("\"group_ratio\":[");
  text.replace(pos, 15, "\"group_ratio\":[-");
  EXPECT_THROW(trace_from_string(text), ValidationError);
}

TEST(ReadTrace, MissingFieldIsParseErrorWithLine) {
  std::string text = trace_to_string(minimal_trace());
  text.replace(text.find("\"t\":1,"), 6, "");
  try {
    trace_from_string(text);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line, 2u);
  }
}

}  // namespace
}  // namespace lensvdc
