// SPDX-License-Identifier: Apache-2.0
//
// Motion tokenizer: a temporal-convolution encoder that downsamples feature
// rows by q, nearest-neighbour quantization against a learned codebook, and
// a transposed-convolution decoder back to feature rows.
#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lslm/errors.hpp"
#include "lslm/metrics.hpp"
#include "lslm/motion.hpp"
#include "lslm/ops.hpp"
#include "lslm/optim.hpp"
#include "lslm/rng.hpp"

namespace lslm::vq {

struct TokenizerConfig {
  int codebook_size = 1024;
  int code_dim = 64;
  int downsample = 4;
  int width = 128;
  int res_blocks = 2;  // per resolution level
  double beta = 0.25;
  double lr = 2e-4;
  double weight_decay = 0.0;
  int batch = 16;
  int window = 64;  // feature rows per training window
  int steps = 2000;
  int reset_every = 200;
  bool cosine_decay = false;  // lr follows a half cosine down to lr / 10 over `steps`
  bool dead_code_reset = true;
  bool ema_codebook = false;
  double ema_decay = 0.99;
  std::uint64_t seed = 1;

  /// Single-core settings: smaller batch, so a larger step size with decay.
  static TokenizerConfig desk() {
    TokenizerConfig c;
    c.lr = 2e-3;
    c.cosine_decay = true;
    return c;
  }

  int levels() const {
    int l = 0;
    while ((1 << l) < downsample) ++l;
    return l;
  }

  /// Usage EMA below this marks a code as dead.
  double dead_threshold() const { return 1.0 / (4.0 * codebook_size); }

  void validate() const {
    if (codebook_size < 2) throw ConfigError("tokenizer: codebook_size must be >= 2");
    if (code_dim <= 0) throw ConfigError("tokenizer: code_dim must be positive");
    if (downsample < 1 || (downsample & (downsample - 1)) != 0)
      throw ConfigError("tokenizer: downsample must be a power of two");
    if (width <= 0 || res_blocks < 0) throw ConfigError("tokenizer: bad width or depth");
    if (beta < 0) throw ConfigError("tokenizer: beta must be nonnegative");
    if (batch < 1 || steps < 0 || reset_every < 1) throw ConfigError("tokenizer: bad batch/steps/reset_every");
    if (window < downsample + 1) throw ConfigError("tokenizer: window shorter than q + 1 rows");
  }
};

inline nlohmann::ordered_json to_json(const TokenizerConfig& c) {
  return {{"codebook_size", c.codebook_size}, {"code_dim", c.code_dim},   {"downsample", c.downsample},
          {"width", c.width},                 {"res_blocks", c.res_blocks}, {"beta", c.beta},
          {"lr", c.lr},                       {"weight_decay", c.weight_decay}, {"batch", c.batch},
          {"window", c.window},               {"steps", c.steps},         {"reset_every", c.reset_every},
          {"cosine_decay", c.cosine_decay},
          {"dead_code_reset", c.dead_code_reset}, {"ema_codebook", c.ema_codebook}, {"ema_decay", c.ema_decay},
          {"seed", c.seed}};
}

/// Reads a config object; keys not listed in to_json are rejected.
inline TokenizerConfig tokenizer_config_from_json(const nlohmann::json& j) {
  TokenizerConfig c;
  const auto known = to_json(c);
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.contains(it.key())) throw ConfigError("tokenizer config: unknown key '" + it.key() + "'");
  auto get = [&](const char* k, auto& v) {
    if (j.contains(k)) v = j.at(k).get<std::decay_t<decltype(v)>>();
  };
  try {
    get("codebook_size", c.codebook_size);
    get("code_dim", c.code_dim);
    get("downsample", c.downsample);
    get("width", c.width);
    get("res_blocks", c.res_blocks);
    get("beta", c.beta);
    get("lr", c.lr);
    get("weight_decay", c.weight_decay);
    get("batch", c.batch);
    get("window", c.window);
    get("steps", c.steps);
    get("reset_every", c.reset_every);
    get("cosine_decay", c.cosine_decay);
    get("dead_code_reset", c.dead_code_reset);
    get("ema_codebook", c.ema_codebook);
    get("ema_decay", c.ema_decay);
    get("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("tokenizer config: ") + e.what());
  }
  c.validate();
  return c;
}

/// Latent length for `rows` feature rows.
inline int latent_length(int rows, int q) { return (rows + q - 1) / q; }

// ---------------------------------------------------------------------------
// Quantization

/// Index of the nearest codebook row for each latent row.  Squared
/// distances are accumulated in double; ties go to the lowest index.
template <class T>
std::vector<std::int64_t> nearest_codes(std::span<const T> latents, std::span<const T> codebook, std::int64_t dim) {
  if (codebook.empty()) throw Error("quantize: empty codebook");
  if (dim <= 0 || latents.size() % static_cast<std::size_t>(dim) || codebook.size() % static_cast<std::size_t>(dim))
    throw ShapeError("quantize: latent and codebook widths do not match");
  const auto n = static_cast<std::int64_t>(latents.size()) / dim;
  const auto k = static_cast<std::int64_t>(codebook.size()) / dim;
  std::vector<std::int64_t> out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const T* z = latents.data() + i * dim;
    double best = std::numeric_limits<double>::infinity();
    std::int64_t arg = 0;
    for (std::int64_t c = 0; c < k; ++c) {
      const T* e = codebook.data() + c * dim;
      double d = 0;
      for (std::int64_t j = 0; j < dim; ++j) {
        const double diff = static_cast<double>(z[j]) - static_cast<double>(e[j]);
        d += diff * diff;
      }
      if (d < best) {
        best = d;
        arg = c;
      }
    }
    out[static_cast<std::size_t>(i)] = arg;
  }
  return out;
}

struct TokenizedClip {
  std::vector<std::int64_t> indices;
  std::vector<float> quantized;  // L x d
  int source_rows = 0;
  int length() const { return static_cast<int>(indices.size()); }
};

// ---------------------------------------------------------------------------
// Loss

template <class T>
struct VQLoss {
  Tensor<T> total, recon, embed, commit;
};

/// L1 reconstruction (mean over unmasked elements) plus
/// |sg(e) - z|^2 and beta |e - sg(z)|^2 (sums over the code dimension,
/// means over unmasked latent rows).
template <class T>
VQLoss<T> vq_loss(const Tensor<T>& s, const Tensor<T>& s_hat, const Tensor<T>& encoder_out,
                  const Tensor<T>& quantized, double beta, std::span<const std::uint8_t> row_mask = {},
                  std::span<const std::uint8_t> latent_mask = {}) {
  VQLoss<T> l;
  l.recon = l1_distance(s_hat, s, row_mask);
  l.embed = squared_l2_distance(stop_gradient(encoder_out), quantized, latent_mask);
  l.commit = scale(squared_l2_distance(encoder_out, stop_gradient(quantized), latent_mask), static_cast<T>(beta));
  l.total = add(add(l.recon, l.embed), l.commit);
  return l;
}

// ---------------------------------------------------------------------------
// Model

class Tokenizer {
 public:
  Tokenizer() = default;
  explicit Tokenizer(const TokenizerConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(mix_seed(cfg_.seed, 0x70c));
    const int W = cfg_.width, D = motion::kFeatureDim, d = cfg_.code_dim;
    conv("enc.in", 3, D, W, rng, kRelu);
    for (int l = 0; l < cfg_.levels(); ++l) {
      const std::string p = "enc.down" + std::to_string(l);
      conv(p, 4, W, W, rng, kRelu);
      for (int r = 0; r < cfg_.res_blocks; ++r) resblock(p + ".res" + std::to_string(r), rng);
    }
    conv("enc.out", 3, W, d, rng);
    conv("dec.in", 3, d, W, rng, kRelu);
    for (int l = 0; l < cfg_.levels(); ++l) {
      const std::string p = "dec.up" + std::to_string(l);
      for (int r = 0; r < cfg_.res_blocks; ++r) resblock(p + ".res" + std::to_string(r), rng);
      // stride 2 with k=4: each output row sees two taps
      const double bound = kRelu * std::sqrt(3.0 / (2.0 * W));
      add_param(p + ".w", {W, 4, W}, uniform(rng, W * 4 * W, bound));
      add_param(p + ".b", {W}, std::vector<float>(static_cast<std::size_t>(W), 0.0f));
    }
    conv("dec.out", 3, W, D, rng, 0.0);  // reconstruction starts at the feature mean
    const double cb = 1.0 / cfg_.codebook_size;
    add_param("codebook", {cfg_.codebook_size, d}, uniform(rng, cfg_.codebook_size * d, cb));
    usage_.assign(static_cast<std::size_t>(cfg_.codebook_size), 0.0);
  }

  const TokenizerConfig& config() const { return cfg_; }
  NamedTensors<float>& params() { return params_; }
  const NamedTensors<float>& params() const { return params_; }
  Tensorf& param(const std::string& name) {
    for (auto& [n, t] : params_)
      if (n == name) return t;
    throw Error("tokenizer: no parameter '" + name + "'");
  }
  const Tensorf& param(const std::string& name) const { return const_cast<Tokenizer*>(this)->param(name); }
  Tensorf& codebook() { return param("codebook"); }
  const Tensorf& codebook() const { return param("codebook"); }
  std::vector<double>& usage() { return usage_; }
  const std::vector<double>& usage() const { return usage_; }

  /// Codebook excluded (it is updated by gradient of the embed term or EMA).
  NamedTensors<float> network_params() const {
    NamedTensors<float> out;
    for (const auto& p : params_)
      if (p.first != "codebook") out.push_back(p);
    return out;
  }

  /// x [B, T, 623] with T a multiple of q and `rows[b]` valid rows per
  /// sample (rounded up to q internally); returns [B, T/q, d].
  Tensorf encode_batch(const Tensorf& x, const std::vector<int>& rows) const {
    check_input(x, rows);
    const auto xin = mask_rows(x, exact_mask(rows, static_cast<int>(x.dim(0)), static_cast<int>(x.dim(1))));
    Tensorf h = masked(relu(conv1d(xin, p("enc.in.w"), p("enc.in.b"), 1, 1)), rows, 1);
    for (int l = 0; l < cfg_.levels(); ++l) {
      const std::string pre = "enc.down" + std::to_string(l);
      const int f = 1 << (l + 1);
      h = masked(relu(conv1d(h, p(pre + ".w"), p(pre + ".b"), 2, 1)), rows, f);
      for (int r = 0; r < cfg_.res_blocks; ++r) h = res(pre + ".res" + std::to_string(r), h, rows, f);
    }
    return masked(conv1d(h, p("enc.out.w"), p("enc.out.b"), 1, 1), rows, cfg_.downsample);
  }

  /// z [B, L, d] -> [B, L*q, 623]; rows beyond `rows[b]` are zeroed.
  Tensorf decode_batch(const Tensorf& z, const std::vector<int>& rows) const {
    const int q = cfg_.downsample;
    Tensorf h = masked(relu(conv1d(z, p("dec.in.w"), p("dec.in.b"), 1, 1)), rows, q);
    for (int l = 0; l < cfg_.levels(); ++l) {
      const std::string pre = "dec.up" + std::to_string(l);
      const int f = q >> l;
      for (int r = 0; r < cfg_.res_blocks; ++r) h = res(pre + ".res" + std::to_string(r), h, rows, f);
      h = masked(relu(conv_transpose1d(h, p(pre + ".w"), p(pre + ".b"), 2, 1)), rows, f / 2);
    }
    return mask_rows(conv1d(h, p("dec.out.w"), p("dec.out.b"), 1, 1), exact_mask(rows, static_cast<int>(z.dim(0)), static_cast<int>(z.dim(1)) * q));
  }

  /// Nearest-code lookup for latents [.., d]; returns ids and the gathered rows.
  std::pair<std::vector<std::int64_t>, Tensorf> quantize(const Tensorf& latents) const {
    auto ids = nearest_codes<float>(latents.data(), codebook().data(), cfg_.code_dim);
    Tensorf q = reshape(embedding(codebook(), ids), latents.shape());
    return {std::move(ids), std::move(q)};
  }

  Tensorf lookup(const std::vector<std::int64_t>& ids) const {
    for (auto i : ids)
      if (i < 0 || i >= cfg_.codebook_size)
        throw Error("decode: index " + std::to_string(i) + " outside codebook of size " + std::to_string(cfg_.codebook_size));
    return embedding(codebook(), ids);
  }

  /// Pre-quantization latents of one clip, [L, d].
  Tensorf encode(const motion::MotionSequence& seq) const {
    const int q = cfg_.downsample;
    if (seq.rows < q + 1)
      throw Error("encode: clip has " + std::to_string(seq.rows) + " rows, needs at least " + std::to_string(q + 1));
    const int padded = latent_length(seq.rows, q) * q;
    std::vector<float> x(static_cast<std::size_t>(padded) * motion::kFeatureDim, 0.0f);
    std::copy(seq.features.begin(), seq.features.end(), x.begin());
    const auto z = encode_batch(Tensorf::from({1, padded, motion::kFeatureDim}, std::move(x)), {seq.rows});
    return reshape(z, {z.dim(1), z.dim(2)});
  }

  TokenizedClip tokenize(const motion::MotionSequence& seq) const {
    NoGradGuard ng;
    const auto z = encode(seq);
    auto [ids, qv] = quantize(z);
    return {std::move(ids), qv.to_vector(), seq.rows};
  }

  /// Feature rows decoded from quantized vectors [L, d].
  motion::MotionSequence decode(const Tensorf& quantized, int rows, const std::string& stats_id) const {
    NoGradGuard ng;
    const auto L = quantized.dim(0);
    if (rows > L * cfg_.downsample || rows < 1) throw Error("decode: row count incompatible with latent length");
    const auto out = decode_batch(reshape(quantized, {1, L, quantized.dim(1)}), {rows});
    motion::MotionSequence s;
    s.rows = rows;
    s.features.assign(out.values().begin(), out.values().begin() + static_cast<std::ptrdiff_t>(rows) * motion::kFeatureDim);
    s.normalized = true;
    s.stats_id = stats_id;
    return s;
  }

  motion::MotionSequence decode_indices(const std::vector<std::int64_t>& ids, int rows, const std::string& stats_id) const {
    NoGradGuard ng;
    return decode(lookup(ids), rows, stats_id);
  }

 private:
  static std::vector<float> uniform(Rng& rng, std::int64_t n, double bound) {
    std::vector<float> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = static_cast<float>(rng.uniform(-bound, bound));
    return v;
  }

  void add_param(const std::string& name, Shape shape, std::vector<float> v) {
    params_.emplace_back(name, Tensorf::from(std::move(shape), std::move(v), true));
  }

  static constexpr double kRelu = 1.4142135623730951;

  /// Uniform init with variance gain^2 / fan_in.
  void conv(const std::string& name, int k, int cin, int cout, Rng& rng, double gain = 1.0) {
    const double bound = gain * std::sqrt(3.0 / static_cast<double>(k * cin));
    add_param(name + ".w", {k, cin, cout}, uniform(rng, static_cast<std::int64_t>(k) * cin * cout, bound));
    add_param(name + ".b", {cout}, std::vector<float>(static_cast<std::size_t>(cout), 0.0f));
  }

  void resblock(const std::string& name, Rng& rng) {
    conv(name + ".a", 3, cfg_.width, cfg_.width, rng, kRelu);
    conv(name + ".b", 1, cfg_.width, cfg_.width, rng, 0.0);  // block starts as identity
  }

  const Tensorf& p(const std::string& name) const { return param(name); }

  Tensorf res(const std::string& name, const Tensorf& h, const std::vector<int>& rows, int f) const {
    auto t = relu(conv1d(h, p(name + ".a.w"), p(name + ".a.b"), 1, 1));
    t = conv1d(t, p(name + ".b.w"), p(name + ".b.b"), 1, 0);
    return masked(add(h, t), rows, f);
  }

  /// Row mask for tensors at 1/f of the input resolution.
  static std::vector<std::uint8_t> level_mask(const std::vector<int>& rows, int batch, int T, int q_total, int f) {
    std::vector<std::uint8_t> m(static_cast<std::size_t>(batch) * T, 0);
    for (int b = 0; b < batch; ++b) {
      const int valid = latent_length(rows[static_cast<std::size_t>(b)], q_total) * (q_total / f);
      for (int t = 0; t < std::min(valid, T); ++t) m[static_cast<std::size_t>(b) * T + t] = 1;
    }
    return m;
  }

  static std::vector<std::uint8_t> exact_mask(const std::vector<int>& rows, int batch, int T) {
    std::vector<std::uint8_t> m(static_cast<std::size_t>(batch) * T, 0);
    for (int b = 0; b < batch; ++b)
      for (int t = 0; t < std::min(rows[static_cast<std::size_t>(b)], T); ++t) m[static_cast<std::size_t>(b) * T + t] = 1;
    return m;
  }

  Tensorf masked(const Tensorf& h, const std::vector<int>& rows, int f) const {
    const int B = static_cast<int>(h.dim(0)), T = static_cast<int>(h.dim(1));
    return mask_rows(h, level_mask(rows, B, T, cfg_.downsample, f));
  }

  void check_input(const Tensorf& x, const std::vector<int>& rows) const {
    if (x.rank() != 3 || x.dim(2) != motion::kFeatureDim)
      throw ShapeError("encode: expected [B, T, 623], got " + shape_str(x.shape()));
    if (x.dim(1) % cfg_.downsample != 0) throw ShapeError("encode: T must be a multiple of q");
    if (static_cast<std::int64_t>(rows.size()) != x.dim(0)) throw ShapeError("encode: one row count per sample");
    for (int r : rows)
      if (r < cfg_.downsample + 1 || r > x.dim(1))
        throw Error("encode: clip of " + std::to_string(r) + " rows is shorter than q + 1 or longer than T");
  }

  TokenizerConfig cfg_;
  NamedTensors<float> params_;
  std::vector<double> usage_;
};

// ---------------------------------------------------------------------------
// Training

struct StepLog {
  int step = 0;
  double total = 0, recon = 0, embed = 0, commit = 0;
  int active_codes = 0;
  int reset_codes = 0;
};

struct TrainReport {
  std::vector<StepLog> log;
  double initial_loss = 0;
  double final_loss = 0;  // mean over the last min(50, steps) steps
};

/// A batch of training windows cut from normalized sequences.
struct WindowBatch {
  Tensorf x;  // [B, window, 623]
  std::vector<int> rows;
};

inline WindowBatch sample_windows(const std::vector<motion::MotionSequence>& corpus, int batch, int window, Rng& rng) {
  WindowBatch wb;
  std::vector<float> x(static_cast<std::size_t>(batch) * window * motion::kFeatureDim, 0.0f);
  for (int b = 0; b < batch; ++b) {
    const auto& s = corpus[rng.index(corpus.size())];
    const int take = std::min(window, s.rows);
    const int start = s.rows > window ? static_cast<int>(rng.integer(0, s.rows - window)) : 0;
    std::copy_n(s.features.begin() + static_cast<std::ptrdiff_t>(start) * motion::kFeatureDim,
                static_cast<std::ptrdiff_t>(take) * motion::kFeatureDim,
                x.begin() + static_cast<std::ptrdiff_t>(b) * window * motion::kFeatureDim);
    wb.rows.push_back(take);
  }
  wb.x = Tensorf::from({batch, window, motion::kFeatureDim}, std::move(x));
  return wb;
}

inline std::vector<std::uint8_t> rows_mask(const std::vector<int>& rows, int T, int q = 1) {
  std::vector<std::uint8_t> m(rows.size() * static_cast<std::size_t>(T), 0);
  for (std::size_t b = 0; b < rows.size(); ++b) {
    const int valid = q == 1 ? rows[b] : latent_length(rows[b], q);
    for (int t = 0; t < std::min(valid, T); ++t) m[b * static_cast<std::size_t>(T) + static_cast<std::size_t>(t)] = 1;
  }
  return m;
}

class Trainer {
 public:
  Trainer(Tokenizer& tok, const std::vector<motion::MotionSequence>& corpus)
      : tok_(tok), corpus_(corpus), rng_(mix_seed(tok.config().seed, 0x7a1)) {
    const auto& c = tok_.config();
    for (const auto& s : corpus_) {
      if (!s.normalized) throw Error("train_tokenizer: corpus must be normalized");
      if (s.rows < c.downsample + 1) throw Error("train_tokenizer: clip shorter than q + 1 rows");
    }
    if (corpus_.empty()) throw Error("train_tokenizer: empty corpus");
    AdamWConfig ac;
    ac.lr = c.lr;
    ac.weight_decay = c.weight_decay;
    opt_.add_group("network", tok_.network_params(), ac);
    AdamWConfig cc = ac;
    cc.weight_decay = 0;
    opt_.add_group("codebook", {{"codebook", tok_.codebook()}}, cc);
    if (c.ema_codebook) opt_.freeze("codebook");
  }

  AdamW<float>& optimizer() { return opt_; }

  /// One optimizer step on a freshly sampled window batch.
  StepLog step() {
    const auto& c = tok_.config();
    auto wb = sample_windows(corpus_, c.batch, window(), rng_);
    return step_on(wb);
  }

  StepLog step_on(const WindowBatch& wb) {
    const auto& c = tok_.config();
    StepLog log;
    log.step = step_;
    const auto e = tok_.encode_batch(wb.x, wb.rows);
    const auto latent_mask = rows_mask(wb.rows, static_cast<int>(e.dim(1)), c.downsample);
    if (c.dead_code_reset && step_ % c.reset_every == 0) log.reset_codes = reset_dead_codes(e, latent_mask);
    auto [ids, q] = tok_.quantize(e);
    const auto s_hat = tok_.decode_batch(straight_through(q, e), wb.rows);
    const auto row_mask = rows_mask(wb.rows, static_cast<int>(wb.x.dim(1)));
    const auto loss = vq_loss(wb.x, s_hat, e, q, c.beta, row_mask, latent_mask);
    log.total = loss.total.item();
    log.recon = loss.recon.item();
    log.embed = loss.embed.item();
    log.commit = loss.commit.item();
    if (!std::isfinite(log.total))
      throw NumericError("train_tokenizer: non-finite loss at step " + std::to_string(step_));
    opt_.zero_grad();
    backward(loss.total);
    if (c.cosine_decay && c.steps > 1) {
      const double t = std::min(1.0, static_cast<double>(step_) / (c.steps - 1));
      const double lr = c.lr * (0.1 + 0.9 * 0.5 * (1 + std::cos(3.141592653589793 * t)));
      opt_.set_lr("network", lr);
      opt_.set_lr("codebook", lr);
    }
    opt_.step();
    update_usage(ids, latent_mask);
    if (c.ema_codebook) ema_update(e, ids, latent_mask);
    for (double u : tok_.usage()) log.active_codes += u >= c.dead_threshold() ? 1 : 0;
    ++step_;
    return log;
  }

  int steps_done() const { return step_; }

 private:
  int window() const {
    const int q = tok_.config().downsample;
    return (tok_.config().window + q - 1) / q * q;
  }

  void update_usage(const std::vector<std::int64_t>& ids, const std::vector<std::uint8_t>& mask) {
    auto& u = tok_.usage();
    std::vector<double> hits(u.size(), 0.0);
    double n = 0;
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (mask[i]) {
        hits[static_cast<std::size_t>(ids[i])] += 1;
        n += 1;
      }
    if (n == 0) return;
    for (std::size_t k = 0; k < u.size(); ++k) u[k] = 0.99 * u[k] + 0.01 * hits[k] / n;
  }

  /// Re-seeds codes whose usage EMA fell below threshold with encoder
  /// outputs from the current batch (plus small noise to keep them distinct).
  /// Rows are drawn without replacement until every row has been used once.
  int reset_dead_codes(const Tensorf& e, const std::vector<std::uint8_t>& mask) {
    const auto& c = tok_.config();
    const int d = c.code_dim;
    std::vector<std::size_t> live_rows;
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask[i]) live_rows.push_back(i);
    if (live_rows.empty()) return 0;
    const auto& ev = e.values();
    double sd = 0;
    for (float v : ev) sd += static_cast<double>(v) * v;
    sd = std::sqrt(sd / static_cast<double>(ev.size())) + 1e-6;
    auto cb = tok_.codebook().mutable_data();
    auto& state = opt_.mutable_state("codebook")[0];
    int count = 0;
    std::size_t next = live_rows.size();
    for (int k = 0; k < c.codebook_size; ++k) {
      if (tok_.usage()[static_cast<std::size_t>(k)] >= c.dead_threshold()) continue;
      if (next == live_rows.size()) {
        rng_.shuffle(live_rows);
        next = 0;
      }
      const std::size_t r = live_rows[next++];
      for (int j = 0; j < d; ++j) {
        cb[static_cast<std::size_t>(k) * d + j] =
            ev[r * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)] + static_cast<float>(rng_.normal(0, 0.01 * sd));
        if (!state.m.empty()) {
          state.m[static_cast<std::size_t>(k) * d + j] = 0;
          state.v[static_cast<std::size_t>(k) * d + j] = 0;
        }
      }
      tok_.usage()[static_cast<std::size_t>(k)] = c.dead_threshold();
      ++count;
    }
    return count;
  }

  void ema_update(const Tensorf& e, const std::vector<std::int64_t>& ids, const std::vector<std::uint8_t>& mask) {
    const auto& c = tok_.config();
    const int d = c.code_dim;
    std::vector<double> sum(static_cast<std::size_t>(c.codebook_size) * d, 0.0), cnt(static_cast<std::size_t>(c.codebook_size), 0.0);
    const auto& ev = e.values();
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!mask[i]) continue;
      const auto k = static_cast<std::size_t>(ids[i]);
      cnt[k] += 1;
      for (int j = 0; j < d; ++j) sum[k * d + j] += ev[i * d + j];
    }
    auto cb = tok_.codebook().mutable_data();
    for (std::size_t k = 0; k < cnt.size(); ++k) {
      if (cnt[k] == 0) continue;
      for (int j = 0; j < d; ++j) {
        const double mean = sum[k * d + j] / cnt[k];
        cb[k * d + j] = static_cast<float>(c.ema_decay * cb[k * d + j] + (1 - c.ema_decay) * mean);
      }
    }
  }

  Tokenizer& tok_;
  const std::vector<motion::MotionSequence>& corpus_;
  Rng rng_;
  AdamW<float> opt_;
  int step_ = 0;
};

/// Runs config().steps optimizer steps.  `on_step` sees every log entry.
inline TrainReport train_tokenizer(Tokenizer& tok, const std::vector<motion::MotionSequence>& corpus,
                                   const std::function<void(const StepLog&)>& on_step = {}) {
  Trainer tr(tok, corpus);
  TrainReport rep;
  for (int s = 0; s < tok.config().steps; ++s) {
    rep.log.push_back(tr.step());
    if (on_step) on_step(rep.log.back());
  }
  if (!rep.log.empty()) {
    rep.initial_loss = rep.log.front().total;
    const std::size_t tail = std::min<std::size_t>(50, rep.log.size());
    double s = 0;
    for (std::size_t i = rep.log.size() - tail; i < rep.log.size(); ++i) s += rep.log[i].total;
    rep.final_loss = s / static_cast<double>(tail);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Codebook study

struct CodebookReport {
  int codebook_size = 0;
  std::vector<std::int64_t> usage;
  int active_codes = 0;
  double perplexity = 0;
  double mpjpe = 0, pampjpe = 0, fid = 0;
  bool fid_rank_deficient = false;

  nlohmann::ordered_json to_json() const {
    return {{"K", codebook_size},      {"fid", fid},         {"mpjpe", mpjpe},
            {"pampjpe", pampjpe},      {"perplexity", perplexity}, {"active_codes", active_codes},
            {"fid_rank_deficient", fid_rank_deficient}};
  }
};

inline double perplexity(const std::vector<std::int64_t>& usage) {
  double n = 0, h = 0;
  for (auto u : usage) n += static_cast<double>(u);
  if (n == 0) return 0;
  for (auto u : usage)
    if (u > 0) {
      const double p = static_cast<double>(u) / n;
      h -= p * std::log(p);
    }
  return std::exp(h);
}

/// Reconstruction quality and code usage over normalized clips.  FID
/// compares time-averaged encoder latents of the originals with those of
/// their reconstructions.
inline CodebookReport codebook_report(const Tokenizer& tok, const std::vector<motion::MotionSequence>& clips,
                                      const motion::FeatureStats& stats) {
  NoGradGuard ng;
  const auto& c = tok.config();
  CodebookReport r;
  r.codebook_size = c.codebook_size;
  r.usage.assign(static_cast<std::size_t>(c.codebook_size), 0);
  Eigen::MatrixXd real(static_cast<Eigen::Index>(clips.size()), c.code_dim), fake(real.rows(), c.code_dim);
  double mp = 0, pa = 0;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    const auto tc = tok.tokenize(clips[i]);
    for (auto id : tc.indices) ++r.usage[static_cast<std::size_t>(id)];
    const auto rec = tok.decode_indices(tc.indices, clips[i].rows, clips[i].stats_id);
    const auto gt_j = motion::features_to_joints(clips[i], stats);
    const auto rec_j = motion::features_to_joints(rec, stats);
    mp += metrics::mpjpe(rec_j, gt_j);
    pa += metrics::pampjpe(rec_j, gt_j);
    auto pool = [&](const motion::MotionSequence& s, Eigen::MatrixXd& dst) {
      const auto z = tok.encode(s);
      const auto L = z.dim(0);
      for (int j = 0; j < c.code_dim; ++j) {
        double acc = 0;
        for (std::int64_t t = 0; t < L; ++t) acc += z.values()[static_cast<std::size_t>(t * c.code_dim + j)];
        dst(static_cast<Eigen::Index>(i), j) = acc / static_cast<double>(L);
      }
    };
    pool(clips[i], real);
    pool(rec, fake);
  }
  r.mpjpe = mp / static_cast<double>(clips.size());
  r.pampjpe = pa / static_cast<double>(clips.size());
  for (auto u : r.usage) r.active_codes += u > 0 ? 1 : 0;
  r.perplexity = perplexity(r.usage);
  if (clips.size() >= 2) {
    const auto f = metrics::fid_detail(real, fake);
    r.fid = f.value;
    r.fid_rank_deficient = f.rank_deficient;
  }
  return r;
}

}  // namespace lslm::vq
