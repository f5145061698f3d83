// SPDX-License-Identifier: Apache-2.0
//
// Text metrics (BLEU, ROUGE-L, CIDEr, WER) over single-reference corpora
// and motion metrics (MPJPE, PAMPJPE, FID).
#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "lslm/dataset.hpp"
#include "lslm/errors.hpp"
#include "lslm/motion.hpp"

namespace lslm::metrics {

using Tokens = std::vector<std::string>;

struct EvalSample {
  std::string id;
  Tokens hyp;
  Tokens ref;
};

using EvalCorpus = std::vector<EvalSample>;

inline EvalSample make_sample(std::string id, const std::string& hyp, const std::string& ref) {
  return {std::move(id), data::words(hyp), data::words(ref)};
}

using NgramCounts = std::map<Tokens, int>;

inline NgramCounts ngrams(const Tokens& t, int n) {
  NgramCounts out;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= t.size(); ++i)
    ++out[Tokens(t.begin() + static_cast<std::ptrdiff_t>(i), t.begin() + static_cast<std::ptrdiff_t>(i) + n)];
  return out;
}

// ---------------------------------------------------------------------------
// BLEU

inline constexpr const char* kBleuSmoothing = "add-one on n>1 precisions whose corpus match count is zero";

/// Corpus BLEU: clipped n-gram precisions pooled over the corpus, geometric
/// mean over n = 1..max_n, brevity penalty exp(1 - r/c) when c <= r.
inline double bleu(const EvalCorpus& corpus, int max_n) {
  if (corpus.empty()) throw Error("bleu: empty corpus");
  double hyp_len = 0, ref_len = 0;
  std::vector<double> match(static_cast<std::size_t>(max_n) + 1, 0.0), total(match.size(), 0.0);
  for (const auto& s : corpus) {
    hyp_len += static_cast<double>(s.hyp.size());
    ref_len += static_cast<double>(s.ref.size());
    for (int n = 1; n <= max_n; ++n) {
      const auto h = ngrams(s.hyp, n), r = ngrams(s.ref, n);
      for (const auto& [g, c] : h) {
        auto it = r.find(g);
        match[n] += std::min(c, it == r.end() ? 0 : it->second);
        total[n] += c;
      }
    }
  }
  if (hyp_len == 0 || match[1] == 0) return 0.0;
  double log_p = 0;
  for (int n = 1; n <= max_n; ++n) {
    double m = match[n], t = total[n];
    if (n > 1 && m == 0) {
      m += 1;
      t += 1;
    }
    log_p += std::log(m / t);
  }
  const double bp = hyp_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / hyp_len);
  return bp * std::exp(log_p / max_n);
}

// ---------------------------------------------------------------------------
// ROUGE-L

inline constexpr double kRougeBeta2 = 1.44;

inline std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline double rouge_l_sample(const Tokens& hyp, const Tokens& ref, double beta2 = kRougeBeta2) {
  const auto lcs = static_cast<double>(lcs_length(hyp, ref));
  if (lcs == 0) return 0.0;
  const double p = lcs / static_cast<double>(hyp.size()), r = lcs / static_cast<double>(ref.size());
  return (1 + beta2) * p * r / (r + beta2 * p);
}

/// Mean per-sample LCS F-measure.
inline double rouge_l(const EvalCorpus& corpus, double beta2 = kRougeBeta2) {
  if (corpus.empty()) throw Error("rouge_l: empty corpus");
  double sum = 0;
  for (const auto& s : corpus) sum += rouge_l_sample(s.hyp, s.ref, beta2);
  return sum / static_cast<double>(corpus.size());
}

// ---------------------------------------------------------------------------
// CIDEr

struct CiderResult {
  double score = 0;
  bool degenerate_idf = false;  // fewer than two samples
};

/// Mean over samples of the average over n = 1..4 of the TF-IDF cosine
/// between hypothesis and reference n-gram vectors, times 10.  Document
/// frequencies count the sentences of the evaluated corpus (hypotheses and
/// references) containing each n-gram.
inline CiderResult cider_detail(const EvalCorpus& corpus) {
  if (corpus.empty()) throw Error("cider: empty corpus");
  constexpr int kMaxN = 4;
  CiderResult res;
  res.degenerate_idf = corpus.size() < 2;
  const double docs = 2.0 * static_cast<double>(corpus.size());
  std::vector<std::map<Tokens, double>> df(kMaxN + 1);
  for (const auto& s : corpus)
    for (int n = 1; n <= kMaxN; ++n) {
      for (const auto& [g, _] : ngrams(s.hyp, n)) df[n][g] += 1;
      for (const auto& [g, _] : ngrams(s.ref, n)) df[n][g] += 1;
    }
  auto vec = [&](const Tokens& t, int n) {
    std::map<Tokens, double> v;
    const auto c = ngrams(t, n);
    double len = 0;
    for (const auto& [_, k] : c) len += k;
    for (const auto& [g, k] : c) v[g] = (k / len) * std::log(docs / df[n].at(g));
    return v;
  };
  double total = 0;
  for (const auto& s : corpus) {
    double per = 0;
    for (int n = 1; n <= kMaxN; ++n) {
      const auto h = vec(s.hyp, n), r = vec(s.ref, n);
      double dot = 0, nh = 0, nr = 0;
      for (const auto& [g, x] : h) {
        nh += x * x;
        auto it = r.find(g);
        if (it != r.end()) dot += x * it->second;
      }
      for (const auto& [_, x] : r) nr += x * x;
      if (nh > 0 && nr > 0) per += dot / (std::sqrt(nh) * std::sqrt(nr));
    }
    total += per / kMaxN;
  }
  res.score = 10.0 * total / static_cast<double>(corpus.size());
  return res;
}

inline double cider(const EvalCorpus& corpus) { return cider_detail(corpus).score; }

// ---------------------------------------------------------------------------
// WER

enum class Edit { match, substitution, insertion, deletion };

struct WerAlignment {
  int sub = 0, ins = 0, del = 0;
  std::size_t ref_words = 0;
  bool empty_reference = false;
  std::vector<Edit> ops;  // in reference order

  int errors() const { return sub + ins + del; }
  /// Percentage; an empty reference divides by one.
  double wer() const { return 100.0 * errors() / static_cast<double>(std::max<std::size_t>(ref_words, 1)); }
};

/// Unit-cost Levenshtein alignment.  The backtrace walks from the end and,
/// among predecessors on an optimal path, prefers match, then deletion,
/// then insertion, then substitution.
inline WerAlignment wer_align(const Tokens& ref, const Tokens& hyp) {
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<std::vector<int>> d(n + 1, std::vector<int>(m + 1, 0));
  for (std::size_t i = 0; i <= n; ++i) d[i][0] = static_cast<int>(i);
  for (std::size_t j = 0; j <= m; ++j) d[0][j] = static_cast<int>(j);
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j)
      d[i][j] = std::min({d[i - 1][j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1), d[i - 1][j] + 1, d[i][j - 1] + 1});
  WerAlignment a;
  a.ref_words = n;
  a.empty_reference = n == 0;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && ref[i - 1] == hyp[j - 1] && d[i][j] == d[i - 1][j - 1]) {
      a.ops.push_back(Edit::match);
      --i, --j;
    } else if (i > 0 && d[i][j] == d[i - 1][j] + 1) {
      a.ops.push_back(Edit::deletion);
      ++a.del;
      --i;
    } else if (j > 0 && d[i][j] == d[i][j - 1] + 1) {
      a.ops.push_back(Edit::insertion);
      ++a.ins;
      --j;
    } else {
      a.ops.push_back(Edit::substitution);
      ++a.sub;
      --i, --j;
    }
  }
  std::reverse(a.ops.begin(), a.ops.end());
  return a;
}

// ---------------------------------------------------------------------------
// Report

struct SampleResult {
  std::string id;
  std::string hyp, ref;
  int sub = 0, ins = 0, del = 0;
  std::size_t ref_words = 0;
  bool empty_reference = false;
};

struct EvalReport {
  std::size_t samples = 0;
  double bleu1 = 0, bleu4 = 0, rougeL = 0, cider = 0;
  double wer = 0;  // percent, may exceed 100
  double ins = 0, del = 0, sub = 0;  // mean per sample
  long ins_total = 0, del_total = 0, sub_total = 0;
  std::size_t ref_words = 0;
  double ins_pct = 0, del_pct = 0, sub_pct = 0;  // of reference words
  int empty_references = 0;
  bool cider_degenerate = false;
  std::vector<SampleResult> per_sample;

  nlohmann::ordered_json to_json(bool with_samples = true) const {
    nlohmann::ordered_json j;
    j["samples"] = samples;
    j["bleu1"] = bleu1;
    j["bleu4"] = bleu4;
    j["rougeL"] = rougeL;
    j["cider"] = cider;
    j["wer"] = wer;
    j["ins"] = ins;
    j["del"] = del;
    j["sub"] = sub;
    j["ins_total"] = ins_total;
    j["del_total"] = del_total;
    j["sub_total"] = sub_total;
    j["ins_pct"] = ins_pct;
    j["del_pct"] = del_pct;
    j["sub_pct"] = sub_pct;
    j["ref_words"] = ref_words;
    j["empty_references"] = empty_references;
    j["bleu_smoothing"] = kBleuSmoothing;
    j["rouge_beta2"] = kRougeBeta2;
    j["cider_degenerate_idf"] = cider_degenerate;
    if (with_samples) {
      j["per_sample"] = nlohmann::ordered_json::array();
      for (const auto& s : per_sample)
        j["per_sample"].push_back({{"id", s.id}, {"hyp", s.hyp}, {"ref", s.ref}, {"sub", s.sub}, {"ins", s.ins},
                                   {"del", s.del}, {"ref_words", s.ref_words}});
    }
    return j;
  }
};

inline std::string join(const Tokens& t) {
  std::string out;
  for (const auto& w : t) out += (out.empty() ? "" : " ") + w;
  return out;
}

inline EvalReport evaluate_corpus(const EvalCorpus& corpus) {
  if (corpus.empty()) throw Error("evaluate: empty corpus");
  EvalReport r;
  r.samples = corpus.size();
  r.bleu1 = bleu(corpus, 1);
  r.bleu4 = bleu(corpus, 4);
  r.rougeL = rouge_l(corpus);
  const auto c = cider_detail(corpus);
  r.cider = c.score;
  r.cider_degenerate = c.degenerate_idf;
  for (const auto& s : corpus) {
    const auto a = wer_align(s.ref, s.hyp);
    r.sub_total += a.sub;
    r.ins_total += a.ins;
    r.del_total += a.del;
    r.ref_words += a.ref_words;
    if (a.empty_reference) ++r.empty_references;
    r.per_sample.push_back({s.id, join(s.hyp), join(s.ref), a.sub, a.ins, a.del, a.ref_words, a.empty_reference});
  }
  const double n = static_cast<double>(corpus.size());
  const double denom = static_cast<double>(std::max<std::size_t>(r.ref_words, 1));
  r.wer = 100.0 * static_cast<double>(r.sub_total + r.ins_total + r.del_total) / denom;
  r.ins = static_cast<double>(r.ins_total) / n;
  r.del = static_cast<double>(r.del_total) / n;
  r.sub = static_cast<double>(r.sub_total) / n;
  r.ins_pct = 100.0 * static_cast<double>(r.ins_total) / denom;
  r.del_pct = 100.0 * static_cast<double>(r.del_total) / denom;
  r.sub_pct = 100.0 * static_cast<double>(r.sub_total) / denom;
  return r;
}

// ---------------------------------------------------------------------------
// Motion metrics

inline void check_same_shape(const motion::JointClip& a, const motion::JointClip& b, const char* what) {
  if (a.frames != b.frames || a.positions.size() != b.positions.size())
    throw ShapeError(std::string(what) + ": clips differ in shape (" + std::to_string(a.frames) + " vs " +
                     std::to_string(b.frames) + " frames)");
  if (a.frames == 0) throw ShapeError(std::string(what) + ": empty clips");
}

/// Mean per-joint Euclidean error, meters.
inline double mpjpe(const motion::JointClip& pred, const motion::JointClip& gt) {
  check_same_shape(pred, gt, "mpjpe");
  double s = 0;
  for (std::size_t i = 0; i < pred.positions.size(); ++i) s += (pred.positions[i] - gt.positions[i]).norm();
  return s / static_cast<double>(pred.positions.size());
}

/// Similarity transform (s, R, t) minimizing sum |s R x + t - y|^2.
inline Eigen::Matrix3Xd similarity_align(const Eigen::Matrix3Xd& x, const Eigen::Matrix3Xd& y) {
  const Eigen::Vector3d mx = x.rowwise().mean(), my = y.rowwise().mean();
  const Eigen::Matrix3Xd xc = x.colwise() - mx, yc = y.colwise() - my;
  const double var_x = xc.squaredNorm() / static_cast<double>(x.cols());
  if (var_x == 0) return my.replicate(1, y.cols());
  const Eigen::Matrix3d cov = yc * xc.transpose() / static_cast<double>(x.cols());
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d s = Eigen::Matrix3d::Identity();
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0) s(2, 2) = -1;
  const Eigen::Matrix3d r = svd.matrixU() * s * svd.matrixV().transpose();
  const double scale = (svd.singularValues().asDiagonal() * s).trace() / var_x;
  return ((scale * r * xc).colwise() + my);
}

/// MPJPE after per-frame optimal similarity alignment of pred onto gt.
inline double pampjpe(const motion::JointClip& pred, const motion::JointClip& gt) {
  check_same_shape(pred, gt, "pampjpe");
  const int J = static_cast<int>(pred.positions.size() / static_cast<std::size_t>(pred.frames));
  double s = 0;
  for (int t = 0; t < pred.frames; ++t) {
    Eigen::Matrix3Xd x(3, J), y(3, J);
    for (int j = 0; j < J; ++j) {
      x.col(j) = pred.positions[static_cast<std::size_t>(t) * J + j];
      y.col(j) = gt.positions[static_cast<std::size_t>(t) * J + j];
    }
    s += (similarity_align(x, y) - y).colwise().norm().sum();
  }
  return s / static_cast<double>(pred.positions.size());
}

struct FidResult {
  double value = 0;
  bool rank_deficient = false;
};

/// Frechet distance between Gaussians fitted to two sample sets (rows are
/// samples).  The trace of the covariance product root is taken from the
/// eigenvalues of A^1/2 B A^1/2, clamped at zero.
inline FidResult fid_detail(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.cols() != b.cols()) throw ShapeError("fid: feature widths differ");
  if (a.rows() < 2 || b.rows() < 2) throw Error("fid: each set needs at least 2 samples");
  FidResult res;
  res.rank_deficient = a.rows() < a.cols() + 1 || b.rows() < b.cols() + 1;
  const Eigen::RowVectorXd ma = a.colwise().mean(), mb = b.colwise().mean();
  const Eigen::MatrixXd ac = a.rowwise() - ma, bc = b.rowwise() - mb;
  const Eigen::MatrixXd ca = ac.transpose() * ac / static_cast<double>(a.rows() - 1);
  const Eigen::MatrixXd cb = bc.transpose() * bc / static_cast<double>(b.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(ca);
  const Eigen::VectorXd la = ea.eigenvalues().cwiseMax(0.0);
  const Eigen::MatrixXd sa = ea.eigenvectors() * la.cwiseSqrt().asDiagonal() * ea.eigenvectors().transpose();
  Eigen::MatrixXd mid = sa * cb * sa;
  mid = 0.5 * (mid + mid.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> em(mid, Eigen::EigenvaluesOnly);
  const double tr_sqrt = em.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  res.value = (ma - mb).squaredNorm() + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
  if (res.value < 0 && res.value > -1e-9) res.value = 0;
  return res;
}

inline double fid(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) { return fid_detail(a, b).value; }

struct MotionEvalReport {
  double mpjpe = 0;
  double pampjpe = 0;
  double fid = 0;
};

}  // namespace lslm::metrics
