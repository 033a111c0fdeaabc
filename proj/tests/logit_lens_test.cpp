#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "lensvdc/logit_lens.hpp"

namespace lensvdc {
namespace {

TEST(Normalize, RuleApplication) {
  EXPECT_EQ(normalize_token("\xE2\x96\x81" "Black"), "black");
  EXPECT_EQ(normalize_token("red"), "red");
  EXPECT_EQ(normalize_token("\xC4\xA0" "Standing"), "standing");
  EXPECT_EQ(normalize_token(" \xE2\x96\x81" "Dog"), "dog");
}

TEST(Normalize, CustomMarkers) {
  const std::vector<std::string> markers = {"##"};
  EXPECT_EQ(normalize_token("##Ing", markers), "ing");
  EXPECT_EQ(normalize_token("\xE2\x96\x81" "x", markers), "\xE2\x96\x81" "x");
}

TEST(Normalize, IdempotentProperty) {
  std::mt19937_64 rng(21);
  const std::vector<std::string> pieces = {"\xE2\x96\x81", "\xC4\xA0", " ", "A", "b", "Z", "#", "x", "\xC3\x89"};
  const std::vector<std::vector<std::string>> marker_sets = {default_markers(), {"A"}, {"ab", "B"}, {"#", " "}};
  for (int trial = 0; trial < 2000; ++trial) {
    std::string s;
    for (std::size_t i = 0, n = rng() % 8; i < n; ++i) s += pieces[rng() % pieces.size()];
    const auto& markers = marker_sets[rng() % marker_sets.size()];
    const std::string once = normalize_token(s, markers);
    EXPECT_EQ(normalize_token(once, markers), once) << s;
  }
  const Vocab v = toy_vocab(200);
  for (const auto& s : v.surfaces) EXPECT_EQ(normalize_token(normalize_token(s)), normalize_token(s));
}

TEST(Project, IdentityUnembeddingPicksBasisIndex) {
  const std::size_t d = 8;
  std::vector<double> h(d, 0.0);
  h[3] = std::sqrt(static_cast<double>(d));  // unit RMS
  const std::vector<double> gain(d, 1.0);
  const auto logits = project(h, gain, Matrix::identity(d));
  EXPECT_EQ(topk(logits, 1)[0].index, 3u);
}

TEST(Project, ZeroHiddenGivesZeroLogitsAndTokenZero) {
  const std::vector<double> h(4, 0.0), gain(4, 1.0);
  Matrix u(4, 10, 1.0);
  const auto logits = project(h, gain, u);
  for (double x : logits) EXPECT_EQ(x, 0.0);
  EXPECT_EQ(topk(logits, 1)[0].index, 0u);
}

TEST(Project, MatchesNormThenMatmul) {
  std::mt19937_64 rng(22);
  std::uniform_real_distribution<double> un(-1.0, 1.0);
  std::vector<double> h(8), gain(8);
  for (double& x : h) x = un(rng);
  for (double& x : gain) x = un(rng);
  Matrix u(8, 16);
  for (double& x : u.data()) x = un(rng);
  double ms = 0.0;
  for (double x : h) ms += x * x;
  const double inv = 1.0 / std::sqrt(ms / 8.0 + 1e-6);
  const auto logits = project(h, gain, u);
  for (std::size_t v = 0; v < 16; ++v) {
    double want = 0.0;
    for (std::size_t i = 0; i < 8; ++i) want += h[i] * inv * gain[i] * u(i, v);
    EXPECT_NEAR(logits[v], want, 1e-12);
  }
  LensOptions raw;
  raw.apply_final_norm = false;
  const auto unnormed = project(h, gain, u, raw);
  for (std::size_t v = 0; v < 16; ++v) {
    double want = 0.0;
    for (std::size_t i = 0; i < 8; ++i) want += h[i] * u(i, v);
    EXPECT_NEAR(unnormed[v], want, 1e-12);
  }
}

TEST(Project, ShapeMismatchThrows) {
  const std::vector<double> h(3, 1.0), gain(3, 1.0);
  EXPECT_THROW(project(h, gain, Matrix(4, 4)), ShapeError);
}

TEST(Candidates, NormalizesSurface) {
  Vocab v;
  for (int i = 0; i < 10; ++i) v.surfaces.push_back("w" + std::to_string(i));
  v.surfaces[7] = "Black";
  std::vector<double> logits(10, 0.0);
  logits[7] = 3.0;
  const auto c = candidates(logits, v, 3);
  EXPECT_EQ(c[0].token_id, 7u);
  EXPECT_EQ(c[0].surface, "Black");
  EXPECT_EQ(c[0].normalized, "black");
}

TEST(Candidates, AllEqualLogitsTieBreakById) {
  const Vocab v = toy_vocab(8);
  const std::vector<double> logits(8, 1.5);
  const auto c = candidates(logits, v, 3);
  ASSERT_EQ(c.size(), 3u);
  EXPECT_EQ(c[0].token_id, 0u);
  EXPECT_EQ(c[1].token_id, 1u);
  EXPECT_EQ(c[2].token_id, 2u);
}

TEST(Candidates, MatchSortOracleProperty) {
  std::mt19937_64 rng(23);
  const Vocab v = toy_vocab(64);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> logits(64);
    for (double& x : logits) x = static_cast<double>(rng() % 16) * 0.25;
    std::vector<TokenId> order(64);
    for (TokenId i = 0; i < 64; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](TokenId a, TokenId b) { return logits[a] > logits[b]; });
    const auto c = candidates(logits, v, 5);
    std::set<TokenId> seen;
    for (std::size_t i = 0; i < 5; ++i) {
      EXPECT_EQ(c[i].token_id, order[i]);
      EXPECT_EQ(c[i].score, logits[order[i]]);
      if (i > 0) {
        EXPECT_LE(c[i].score, c[i - 1].score);
      }
      seen.insert(c[i].token_id);
    }
    EXPECT_EQ(seen.size(), 5u);
  }
}

TEST(Candidates, KOutOfRange) {
  const Vocab v = toy_vocab(8);
  const std::vector<double> logits(8, 0.0);
  EXPECT_THROW(candidates(logits, v, 9), std::out_of_range);
  EXPECT_THROW(candidates(logits, v, 0), std::out_of_range);
}

TEST(Vocab, JsonRoundTrip) {
  const Vocab v = toy_vocab(60);
  EXPECT_EQ(vocab_from_json(vocab_to_json(v)).surfaces, v.surfaces);
  EXPECT_THROW(vocab_from_json(nlohmann::json::object()), std::invalid_argument);
}

}  // namespace
}  // namespace lensvdc
