// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <set>

#include "lslm/vq.hpp"
#include "oracles.hpp"

using namespace lslm;
using namespace lslm::vq;

namespace {

TokenizerConfig small(int K = 16) {
  TokenizerConfig c;
  c.codebook_size = K;
  c.code_dim = 8;
  c.width = 16;
  c.batch = 4;
  c.window = 16;
  c.steps = 50;
  c.seed = 3;
  return c;
}

motion::MotionSequence random_seq(int rows, Rng& rng) {
  motion::MotionSequence s;
  s.rows = rows;
  s.normalized = true;
  s.stats_id = "t";
  s.features.resize(static_cast<std::size_t>(rows) * motion::kFeatureDim);
  for (auto& v : s.features) v = static_cast<float>(rng.normal(0, 1));
  return s;
}


}  // namespace

TEST(Quantize, HandCases) {
  const std::vector<float> cb = {0, 0, 1, 1, 5, 5, -2, 3};
  EXPECT_EQ(nearest_codes<float>(std::vector<float>{0.2f, 0.1f}, cb, 2), (std::vector<std::int64_t>{0}));
  EXPECT_EQ(nearest_codes<float>(std::vector<float>{-2, 3}, cb, 2), (std::vector<std::int64_t>{3}));
  EXPECT_EQ(nearest_codes<float>(std::vector<float>{0.5f, 0.5f}, cb, 2), (std::vector<std::int64_t>{0}));
  EXPECT_THROW(nearest_codes<float>(std::vector<float>{0, 0}, std::vector<float>{}, 2), Error);
  EXPECT_THROW(nearest_codes<float>(std::vector<float>{0, 0, 0}, cb, 2), ShapeError);
}

TEST(Quantize, MatchesExhaustiveScan) {
  for (int K : {2, 64, 1024}) {
    Rng rng(static_cast<std::uint64_t>(K));
    const int d = 8, n = 1000;
    std::vector<float> z(static_cast<std::size_t>(n) * d), cb(static_cast<std::size_t>(K) * d);
    for (auto& v : z) v = static_cast<float>(rng.normal(0, 1));
    for (auto& v : cb) v = static_cast<float>(rng.normal(0, 1));
    // plant exact ties: some latents are midpoints of two duplicated codes
    for (int k = 0; k + 1 < K && k < 20; k += 2)
      std::copy_n(cb.begin() + k * d, d, cb.begin() + (k + 1) * d);
    for (int i = 0; i < 20; ++i) std::copy_n(cb.begin() + (i % K) * d, d, z.begin() + i * d);
    const Eigen::MatrixXd Z = Eigen::Map<Eigen::Matrix<float, -1, -1, Eigen::RowMajor>>(z.data(), n, d).cast<double>();
    const Eigen::MatrixXd C = Eigen::Map<Eigen::Matrix<float, -1, -1, Eigen::RowMajor>>(cb.data(), K, d).cast<double>();
    EXPECT_EQ(nearest_codes<float>(z, cb, d), oracle::scan(Z, C)) << "K=" << K;
  }
}

TEST(Quantize, Idempotent) {
  Tokenizer tok(small());
  Rng rng(1);
  const auto z = tok.encode(random_seq(32, rng));
  auto [ids, q] = tok.quantize(z);
  EXPECT_EQ(tok.quantize(q).first, ids);
}

TEST(VQLoss, HandFixtures) {
  const auto s = Tensord::from({1, 2}, {0.3, -0.7});
  const auto e = Tensord::from({1, 2}, {1, 0});
  const auto q = Tensord::from({1, 2}, {0, 0});
  const auto zero = vq_loss(s, s, e, e, 0.25);
  EXPECT_EQ(zero.total.item(), 0.0);
  const auto l = vq_loss(s, s, e, q, 1.0);
  EXPECT_NEAR(l.embed.item(), 1.0, 1e-12);
  EXPECT_NEAR(l.commit.item(), 1.0, 1e-12);
  EXPECT_NEAR(l.total.item(), 2.0, 1e-12);
  // recon is the mean absolute error over elements
  const auto l2 = vq_loss(s, Tensord::from({1, 2}, {0.0, 0.0}), q, q, 0.25);
  EXPECT_NEAR(l2.recon.item(), (0.3 + 0.7) / 2, 1e-12);
  EXPECT_NEAR(vq_loss(s, s, e, q, 0.25).total.item(), 1.25, 1e-12);
}

TEST(VQLoss, GradientRouting) {
  auto e = Tensord::from({2, 2}, {1, 0, 0.5, -1}, true);
  auto cb = Tensord::from({3, 2}, {0, 0, 1, 1, 0.4, -0.9}, true);
  const auto ids = nearest_codes<double>(e.data(), cb.data(), 2);
  const auto q = embedding(cb, ids);
  auto w = Tensord::from({2, 2}, {1, 0.5, -0.5, 2}, true);  // stand-in decoder
  const auto s = Tensord::from({2, 2}, {0.2, 0.2, 0.1, 0.0});
  const auto s_hat = matmul(straight_through(q, e), w);

  auto only = [&](int term, double beta) {
    e.zero_grad();
    cb.zero_grad();
    w.zero_grad();
    const auto l = vq_loss(s, s_hat, e, q, beta);
    backward(term == 1 ? l.recon : term == 2 ? l.embed : l.commit);
  };
  auto nonzero = [](const Tensord& t) {
    for (double g : t.grad())
      if (g != 0.0) return true;
    return false;
  };
  only(1, 0.25);
  EXPECT_TRUE(nonzero(e));
  EXPECT_TRUE(nonzero(w));
  EXPECT_FALSE(nonzero(cb));
  only(2, 0.25);
  EXPECT_FALSE(nonzero(e));
  EXPECT_FALSE(nonzero(w));
  EXPECT_TRUE(nonzero(cb));
  // codebook gradient is 2 (c - e) / rows for the selected codes
  const auto g = cb.grad();
  std::vector<double> expect(6, 0.0);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j)
      expect[static_cast<std::size_t>(ids[i] * 2 + j)] += 2 * (cb.data()[ids[i] * 2 + j] - e.data()[i * 2 + j]) / 2;
  for (int i = 0; i < 6; ++i) EXPECT_NEAR(g[i], expect[i], 1e-12);
  only(3, 0.25);
  EXPECT_TRUE(nonzero(e));
  EXPECT_FALSE(nonzero(cb));
  EXPECT_FALSE(nonzero(w));
  only(3, 0.0);
  EXPECT_FALSE(nonzero(e));
}

TEST(VQLoss, CodebookGradientMatchesFiniteDifference) {
  const auto e = Tensord::from({1, 2}, {0.3, 0.8});
  const std::vector<double> c0 = {0.1, 0.5, -2, -2};
  auto embed_at = [&](const std::vector<double>& c) {
    const auto cb = Tensord::from({2, 2}, c);
    return vq_loss(e, e, e, embedding(cb, std::vector<std::int64_t>{0}), 0.25).embed.item();
  };
  auto cb = Tensord::from({2, 2}, c0, true);
  backward(vq_loss(e, e, e, embedding(cb, std::vector<std::int64_t>{0}), 0.25).embed);
  for (int i = 0; i < 4; ++i) {
    auto p = c0, m = c0;
    p[i] += 1e-6;
    m[i] -= 1e-6;
    EXPECT_NEAR(cb.grad()[i], (embed_at(p) - embed_at(m)) / 2e-6, 1e-6);
  }
}

TEST(Tokenizer, LatentLength) {
  Tokenizer tok(small());
  Rng rng(2);
  EXPECT_EQ(tok.encode(random_seq(64, rng)).dim(0), 16);
  for (int rows = 5; rows <= 21; ++rows) {
    const auto z = tok.encode(random_seq(rows, rng));
    EXPECT_EQ(z.dim(0), (rows + 3) / 4);
    EXPECT_EQ(z.dim(1), 8);
  }
  EXPECT_THROW(tok.encode(random_seq(4, rng)), Error);
}

TEST(Tokenizer, BatchIndependence) {
  Tokenizer tok(small());
  Rng rng(4);
  const auto a = random_seq(22, rng), b = random_seq(40, rng);
  NoGradGuard ng;
  const auto za = tok.encode(a), zb = tok.encode(b);
  std::vector<float> x(2 * 40 * motion::kFeatureDim, 0.0f);
  std::copy(a.features.begin(), a.features.end(), x.begin());
  std::copy(b.features.begin(), b.features.end(), x.begin() + 40 * motion::kFeatureDim);
  const auto z = tok.encode_batch(Tensorf::from({2, 40, motion::kFeatureDim}, x), {22, 40});
  for (std::int64_t i = 0; i < za.numel(); ++i) EXPECT_NEAR(z.data()[i], za.data()[i], 1e-5);
  for (std::int64_t i = 0; i < zb.numel(); ++i) EXPECT_NEAR(z.data()[10 * 8 + i], zb.data()[i], 1e-5);
  for (int t = 6; t < 10; ++t)
    for (int j = 0; j < 8; ++j) EXPECT_EQ(z.data()[t * 8 + j], 0.0f);
}

TEST(Tokenizer, ConstantInputGivesConstantInteriorLatents) {
  Tokenizer tok(small());
  motion::MotionSequence s;
  s.rows = 256;
  s.normalized = true;
  s.features.assign(256 * motion::kFeatureDim, 0.0f);
  for (int r = 0; r < 256; ++r)
    for (int c = 0; c < motion::kFeatureDim; ++c) s.features[r * motion::kFeatureDim + c] = 0.01f * (c % 13);
  const auto z = tok.encode(s);
  // zero padding only perturbs latents within the receptive field of an edge
  for (int t = 8; t < 56; ++t)
    for (int j = 0; j < 8; ++j) EXPECT_NEAR(z.data()[t * 8 + j], z.data()[8 * 8 + j], 1e-5);
}

TEST(Tokenizer, DecodeShapeAndIndexPath) {
  Tokenizer tok(small());
  Rng rng(5);
  const auto s = random_seq(23, rng);
  const auto tc = tok.tokenize(s);
  EXPECT_EQ(tc.length(), 6);
  for (auto i : tc.indices) EXPECT_LT(i, 16);
  const auto a = tok.decode_indices(tc.indices, s.rows, "t");
  const auto b = tok.decode(Tensorf::from({6, 8}, tc.quantized), s.rows, "t");
  EXPECT_EQ(a.rows, 23);
  EXPECT_EQ(a.features.size(), s.features.size());
  EXPECT_EQ(a.features, b.features);
  auto bad = tc.indices;
  bad[0] = 16;
  EXPECT_THROW(tok.decode_indices(bad, s.rows, "t"), Error);
}

TEST(Tokenizer, ReconstructionLossIgnoresPadding) {
  Tokenizer tok(small());
  Rng rng(6);
  const auto s = random_seq(18, rng);
  auto loss_with_pad = [&](int T, float fill) {
    std::vector<float> x(static_cast<std::size_t>(T) * motion::kFeatureDim, fill);
    std::copy(s.features.begin(), s.features.end(), x.begin());
    WindowBatch wb{Tensorf::from({1, T, motion::kFeatureDim}, x), {18}};
    NoGradGuard ng;
    const auto e = tok.encode_batch(wb.x, wb.rows);
    auto [ids, q] = tok.quantize(e);
    const auto s_hat = tok.decode_batch(q, wb.rows);
    return vq_loss(wb.x, s_hat, e, q, 0.25, rows_mask(wb.rows, T), rows_mask(wb.rows, static_cast<int>(e.dim(1)), 4))
        .total.item();
  };
  EXPECT_NEAR(loss_with_pad(20, 0.0f), loss_with_pad(32, 0.0f), 1e-5);
  EXPECT_NEAR(loss_with_pad(20, 0.0f), loss_with_pad(32, 9.0f), 1e-5);
}

TEST(Training, LossDecreasesOnFixedBatch) {
  Tokenizer tok(small());
  Rng rng(7);
  std::vector<motion::MotionSequence> corpus = {random_seq(16, rng), random_seq(16, rng)};
  Trainer tr(tok, corpus);
  Rng pick(1);
  const auto wb = sample_windows(corpus, 2, 16, pick);
  const double first = tr.step_on(wb).total;
  double last = first;
  for (int i = 0; i < 49; ++i) last = tr.step_on(wb).total;
  EXPECT_LT(last, first);
}

TEST(Training, DeterministicForSeed) {
  auto run = [] {
    Tokenizer tok(small());
    Rng rng(8);
    std::vector<motion::MotionSequence> corpus = {random_seq(20, rng), random_seq(30, rng)};
    train_tokenizer(tok, corpus);
    std::vector<float> all;
    for (const auto& [_, t] : tok.params()) all.insert(all.end(), t.values().begin(), t.values().end());
    return all;
  };
  EXPECT_EQ(run(), run());
}

TEST(Training, UsageConcentratesWithoutReset) {
  motion::SynthConfig sc;
  sc.gesture_vocab = 2;
  sc.samples = 20;
  const auto corpus = motion::synth_corpus(sc);
  std::vector<motion::MotionSequence> seqs;
  for (const auto& s : corpus.samples) seqs.push_back(motion::extract_features(s.clip));
  const auto stats = motion::compute_stats(seqs);
  for (auto& s : seqs) s = motion::normalize(s, stats);
  auto c = small(1024);
  c.dead_code_reset = false;
  c.steps = 30;
  Tokenizer tok(c);
  train_tokenizer(tok, seqs);
  EXPECT_LT(codebook_report(tok, seqs, stats).active_codes, 103);
}

TEST(Training, InitialResetSeedsEveryCode) {
  Rng rng(9);
  std::vector<motion::MotionSequence> corpus = {random_seq(20, rng)};
  Tokenizer tok(small(32));
  Trainer tr(tok, corpus);
  EXPECT_EQ(tr.step().reset_codes, 32);
  EXPECT_EQ(tr.step().reset_codes, 0);
}

TEST(CodebookReport, PerplexityBounds) {
  EXPECT_DOUBLE_EQ(perplexity({0, 7, 0}), 1.0);
  EXPECT_NEAR(perplexity({5, 5, 5, 5}), 4.0, 1e-12);
  EXPECT_LE(perplexity({1, 2, 3, 4, 5}), 5.0);
}

TEST(Config, JsonRoundTripAndValidation) {
  auto c = small();
  c.beta = 0.5;
  const auto back = tokenizer_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_THROW(tokenizer_config_from_json({{"downsample", 3}}), ConfigError);
  EXPECT_THROW(tokenizer_config_from_json({{"codebook_size", 1}}), ConfigError);
  EXPECT_THROW(tokenizer_config_from_json({{"bogus", 1}}), ConfigError);
}
