// SPDX-License-Identifier: Apache-2.0
//
// Text metrics are checked against small oracles written directly from the
// metric definitions (string-keyed counting, recursive LCS, exhaustive edit
// scripts) rather than against the library code paths.
#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <set>
#include <sstream>
#include <unordered_map>

#include "lslm/metrics.hpp"
#include "oracles.hpp"

using namespace lslm;
using namespace lslm::metrics;
using lslm::oracle::load_fixture;
namespace oracle = lslm::oracle;

namespace {

motion::JointClip random_clip(Rng& rng, int frames) {
  motion::JointClip c;
  c.frames = frames;
  for (int i = 0; i < frames * motion::kJoints; ++i)
    c.positions.emplace_back(rng.uniform(-1, 1), rng.uniform(0, 2), rng.uniform(-1, 1));
  return c;
}

}  // namespace

TEST(Bleu, HandCases) {
  EXPECT_DOUBLE_EQ(bleu({make_sample("a", "a b x y", "a b c d")}, 1), 0.5);
  EXPECT_DOUBLE_EQ(bleu({make_sample("a", "a b c d", "a b c d"), make_sample("b", "x y", "x y")}, 4), 1.0);
  EXPECT_EQ(bleu({make_sample("a", "", "a b")}, 4), 0.0);
}

TEST(Bleu, MatchesOracleOnFixture) {
  const auto c = load_fixture("metrics10.jsonl");
  ASSERT_EQ(c.size(), 10u);
  EXPECT_NEAR(bleu(c, 1), oracle::bleu(c, 1), 1e-6);
  EXPECT_NEAR(bleu(c, 4), oracle::bleu(c, 4), 1e-6);
}

TEST(Rouge, HandCasesAndOracle) {
  EXPECT_DOUBLE_EQ(rouge_l({make_sample("a", "x y", "x y")}), 1.0);
  EXPECT_EQ(rouge_l({make_sample("a", "x y", "p q")}), 0.0);
  const double p = 1.0, r = 0.75, b2 = 1.44;
  EXPECT_NEAR(rouge_l({make_sample("a", "a c d", "a b c d")}), (1 + b2) * p * r / (r + b2 * p), 1e-12);
  const auto c = load_fixture("metrics10.jsonl");
  EXPECT_NEAR(rouge_l(c), oracle::rouge(c), 1e-6);
}

TEST(Cider, OracleAndInvariances) {
  const auto c = load_fixture("metrics10.jsonl");
  EXPECT_NEAR(cider(c), oracle::cider(c), 1e-6);
  const EvalCorpus same = {make_sample("a", "red apple falls down", "red apple falls down"),
                           make_sample("b", "blue sky far above", "blue sky far above"),
                           make_sample("c", "green grass grows tall", "green grass grows tall")};
  EXPECT_NEAR(cider(same), oracle::cider(same), 1e-6);
  EXPECT_NEAR(cider(same), 10.0, 1e-9);
  EvalCorpus doubled = c;
  doubled.insert(doubled.end(), c.begin(), c.end());
  EXPECT_NEAR(cider(doubled), cider(c), 1e-9);
  EXPECT_EQ(cider({make_sample("a", "p q", "x y"), make_sample("b", "x y", "x y")}) * 2,
            cider({make_sample("b", "x y", "x y"), make_sample("a", "p q", "x y")}) * 2);
  EXPECT_TRUE(cider_detail({make_sample("a", "x", "x")}).degenerate_idf);
}

TEST(Wer, HandCases) {
  auto t = [](const char* s) { return data::words(s); };
  auto a = wer_align(t("a b c"), t("a b c"));
  EXPECT_EQ(a.errors(), 0);
  a = wer_align(t("a b c"), t("a x c"));
  EXPECT_EQ(a.sub, 1);
  EXPECT_NEAR(a.wer(), 100.0 / 3, 1e-12);
  a = wer_align(t("a b"), t("a b c d"));
  EXPECT_EQ(a.ins, 2);
  EXPECT_DOUBLE_EQ(a.wer(), 100.0);
  a = wer_align(t("a b"), t("b a"));
  EXPECT_EQ(a.del, 1);
  EXPECT_EQ(a.ins, 1);
  EXPECT_EQ(a.sub, 0);
  a = wer_align(t("a"), t("b"));
  EXPECT_EQ(a.sub, 1);
  a = wer_align({}, t("x y"));
  EXPECT_TRUE(a.empty_reference);
  EXPECT_DOUBLE_EQ(a.wer(), 200.0);
}

TEST(Wer, CostMatchesExhaustiveOracle) {
  for (const auto& s : load_fixture("metrics10.jsonl")) {
    const auto a = wer_align(s.ref, s.hyp);
    EXPECT_EQ(a.errors(), oracle::min_edits(s.ref, s.hyp, 0, 0)) << s.id;
    EXPECT_EQ(static_cast<std::size_t>(a.sub + a.del + std::count(a.ops.begin(), a.ops.end(), Edit::match)), s.ref.size());
    EXPECT_EQ(static_cast<std::size_t>(a.sub + a.ins + std::count(a.ops.begin(), a.ops.end(), Edit::match)), s.hyp.size());
  }
}

TEST(Wer, DecompositionMatchesPreferenceOracle) {
  for (const char* name : {"metrics10.jsonl", "insertion_heavy.jsonl"})
    for (const auto& s : load_fixture(name)) {
      const auto a = wer_align(s.ref, s.hyp);
      const auto o = oracle::wer_ids(s.ref, s.hyp);
      EXPECT_EQ(a.sub, o.sub) << s.id;
      EXPECT_EQ(a.ins, o.ins) << s.id;
      EXPECT_EQ(a.del, o.del) << s.id;
    }
}

TEST(Report, ConsistencyAndInsertionHeavyRegime) {
  for (const char* name : {"metrics10.jsonl", "insertion_heavy.jsonl"}) {
    const auto r = evaluate_corpus(load_fixture(name));
    long sum = 0;
    for (const auto& s : r.per_sample) sum += s.sub + s.ins + s.del;
    EXPECT_EQ(sum, r.sub_total + r.ins_total + r.del_total);
    EXPECT_NEAR(r.wer * r.ref_words / 100.0, static_cast<double>(sum), 1e-9);
    EXPECT_GE(r.ins, 0);
    EXPECT_GE(r.del, 0);
    EXPECT_GE(r.sub, 0);
  }
  const auto heavy = evaluate_corpus(load_fixture("insertion_heavy.jsonl"));
  EXPECT_GT(heavy.wer, 100.0);
  EXPECT_TRUE(std::isfinite(heavy.wer));
  EXPECT_GT(heavy.ins_total, heavy.del_total + heavy.sub_total);
}

TEST(Report, EchoAndEmptyOutputModels) {
  const auto c = load_fixture("metrics10.jsonl");
  EvalCorpus echo = c, empty = c;
  for (auto& s : echo) s.hyp = s.ref;
  for (auto& s : empty) s.hyp.clear();
  const auto e = evaluate_corpus(echo);
  EXPECT_DOUBLE_EQ(e.bleu1, 1.0);
  EXPECT_DOUBLE_EQ(e.wer, 0.0);
  const auto z = evaluate_corpus(empty);
  EXPECT_EQ(z.bleu1, 0.0);
  EXPECT_EQ(z.bleu4, 0.0);
  EXPECT_DOUBLE_EQ(z.wer, 100.0);
  EXPECT_EQ(static_cast<std::size_t>(z.del_total), z.ref_words);
}

TEST(Report, InvariantUnderReordering) {
  auto c = load_fixture("metrics10.jsonl");
  const auto a = evaluate_corpus(c);
  std::reverse(c.begin(), c.end());
  const auto b = evaluate_corpus(c);
  EXPECT_NEAR(a.bleu4, b.bleu4, 1e-12);
  EXPECT_NEAR(a.rougeL, b.rougeL, 1e-12);
  EXPECT_NEAR(a.cider, b.cider, 1e-12);
  EXPECT_EQ(a.wer, b.wer);
}

TEST(MotionMetrics, TrivialAndRigidCases) {
  Rng rng(3);
  const auto gt = random_clip(rng, 4);
  EXPECT_EQ(mpjpe(gt, gt), 0.0);
  EXPECT_LT(pampjpe(gt, gt), 1e-12);
  const Eigen::Vector3d t(0.3, -0.4, 1.2);
  auto shifted = gt;
  for (auto& p : shifted.positions) p += t;
  EXPECT_NEAR(mpjpe(shifted, gt), t.norm(), 1e-12);
  EXPECT_LT(pampjpe(shifted, gt), 1e-9);
  for (int trial = 0; trial < 10; ++trial) {
    const Eigen::Matrix3d r = Eigen::Quaterniond::UnitRandom().toRotationMatrix();
    const double s = rng.uniform(0.5, 2.0);
    auto moved = gt;
    for (auto& p : moved.positions) p = s * r * p + t;
    EXPECT_LT(pampjpe(moved, gt), 1e-6);
  }
  auto other = gt;
  other.frames = 3;
  other.positions.resize(3 * motion::kJoints);
  EXPECT_THROW(mpjpe(other, gt), ShapeError);
}

TEST(MotionMetrics, ProcrustesNeverWorse) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = random_clip(rng, 3), b = random_clip(rng, 3);
    EXPECT_LE(pampjpe(a, b), mpjpe(a, b) + 1e-9);
  }
}

TEST(Fid, GaussianOracle) {
  Rng rng(17);
  const int n = 100000;
  Eigen::MatrixXd a(n, 1), b(n, 1);
  for (int i = 0; i < n; ++i) {
    a(i, 0) = rng.normal(0, 1);
    b(i, 0) = rng.normal(3, 1);
  }
  EXPECT_NEAR(fid(a, b), 9.0, 0.2);
  EXPECT_LT(fid(a, a), 1e-6);
  EXPECT_NEAR(fid(a, b), fid(b, a), 1e-6);
  // Equal means, variance 1 vs 4: (sigma_a - sigma_b)^2 = 1.
  Eigen::MatrixXd c = 2.0 * a;
  const double va = (a.array() - a.mean()).square().sum() / (n - 1);
  const double vc = (c.array() - c.mean()).square().sum() / (n - 1);
  EXPECT_NEAR(fid(a, c), std::pow(a.mean() - c.mean(), 2) + std::pow(std::sqrt(va) - std::sqrt(vc), 2), 1e-9);
  EXPECT_NEAR(fid(a, c), 1.0, 0.05);
}

TEST(Fid, MultivariateMatchesDiagonalClosedForm) {
  Rng rng(2);
  const int n = 4000, d = 3;
  Eigen::MatrixXd a(n, d), b(n, d);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < d; ++k) {
      a(i, k) = rng.normal(0, 1.0 + k);
      b(i, k) = rng.normal(0.5, 2.0);
    }
  const auto r = fid_detail(a, b);
  EXPECT_FALSE(r.rank_deficient);
  // Independent axes: sum over axes of (mu diff)^2 + (sd diff)^2, up to sampling noise.
  double expect = 0;
  for (int k = 0; k < d; ++k) expect += 0.25 + std::pow(1.0 + k - 2.0, 2);
  EXPECT_NEAR(r.value, expect, 0.25);
  EXPECT_TRUE(fid_detail(a.topRows(3), b.topRows(3)).rank_deficient);
}
