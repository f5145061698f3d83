// SPDX-License-Identifier: Apache-2.0
//
// Small decoder-only language model: token and learned position
// embeddings, pre-norm causal self-attention blocks, final norm and an
// untied output head.
#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "lslm/errors.hpp"
#include "lslm/ops.hpp"
#include "lslm/optim.hpp"
#include "lslm/rng.hpp"

namespace lslm::lm {

inline constexpr int kMaxLength = 250;

struct LMConfig {
  int vocab = 0;
  int d_model = 256;
  int n_layers = 4;
  int n_heads = 4;
  int max_length = kMaxLength;
  double dropout = 0.0;
  std::uint64_t seed = 1;

  void validate() const {
    if (vocab < 5) throw ConfigError("lm: vocabulary must hold at least the special tokens");
    if (d_model <= 0 || n_layers < 1 || n_heads < 1) throw ConfigError("lm: bad model size");
    if (d_model % n_heads != 0) throw ConfigError("lm: d_model must be divisible by n_heads");
    if (max_length != kMaxLength) throw ConfigError("lm: max_length is fixed at 250");
    if (dropout < 0 || dropout >= 1) throw ConfigError("lm: dropout must be in [0, 1)");
  }
};

inline nlohmann::ordered_json to_json(const LMConfig& c) {
  return {{"vocab", c.vocab},     {"d_model", c.d_model},       {"n_layers", c.n_layers}, {"n_heads", c.n_heads},
          {"max_length", c.max_length}, {"dropout", c.dropout}, {"seed", c.seed}};
}

inline LMConfig lm_config_from_json(const nlohmann::json& j) {
  LMConfig c;
  const auto known = to_json(c);
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.contains(it.key())) throw ConfigError("lm config: unknown key '" + it.key() + "'");
  try {
    c.vocab = j.value("vocab", c.vocab);
    c.d_model = j.value("d_model", c.d_model);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.max_length = j.value("max_length", c.max_length);
    c.dropout = j.value("dropout", c.dropout);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("lm config: ") + e.what());
  }
  return c;
}

inline const std::vector<std::string>& group_names() {
  static const std::vector<std::string> g = {"llm.embedding", "llm.blocks", "llm.head"};
  return g;
}

/// Mean cross-entropy over positions whose mask is set.  logits [.., V].
inline Tensorf lm_loss(const Tensorf& logits, std::span<const std::int64_t> targets,
                       std::span<const std::uint8_t> mask) {
  const auto V = logits.dim(-1);
  return cross_entropy(reshape(logits, {logits.numel() / V, V}), targets, mask);
}

class LanguageModel {
 public:
  LanguageModel() = default;
  explicit LanguageModel(const LMConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(mix_seed(cfg_.seed, 0x11a));
    const int D = cfg_.d_model, V = cfg_.vocab;
    const double resid = 0.02 / std::sqrt(2.0 * cfg_.n_layers);
    add_param("llm.embedding", "llm.tok_emb", {V, D}, normal(rng, V * D, 0.02));
    add_param("llm.embedding", "llm.pos_emb", {cfg_.max_length, D}, normal(rng, cfg_.max_length * D, 0.02));
    for (int l = 0; l < cfg_.n_layers; ++l) {
      const std::string p = "llm.block" + std::to_string(l);
      add_param("llm.blocks", p + ".ln1.g", {D}, fill(D, 1));
      add_param("llm.blocks", p + ".ln1.b", {D}, fill(D, 0));
      add_param("llm.blocks", p + ".qkv.w", {D, 3 * D}, normal(rng, 3 * D * D, 0.02));
      add_param("llm.blocks", p + ".qkv.b", {3 * D}, fill(3 * D, 0));
      add_param("llm.blocks", p + ".proj.w", {D, D}, normal(rng, D * D, resid));
      add_param("llm.blocks", p + ".proj.b", {D}, fill(D, 0));
      add_param("llm.blocks", p + ".ln2.g", {D}, fill(D, 1));
      add_param("llm.blocks", p + ".ln2.b", {D}, fill(D, 0));
      add_param("llm.blocks", p + ".fc1.w", {D, 4 * D}, normal(rng, 4 * D * D, 0.02));
      add_param("llm.blocks", p + ".fc1.b", {4 * D}, fill(4 * D, 0));
      add_param("llm.blocks", p + ".fc2.w", {4 * D, D}, normal(rng, 4 * D * D, resid));
      add_param("llm.blocks", p + ".fc2.b", {D}, fill(D, 0));
    }
    add_param("llm.blocks", "llm.ln_f.g", {D}, fill(D, 1));
    add_param("llm.blocks", "llm.ln_f.b", {D}, fill(D, 0));
    add_param("llm.head", "llm.head.w", {D, V}, normal(rng, D * V, 0.02));
    add_param("llm.head", "llm.head.b", {V}, fill(V, 0));
  }

  const LMConfig& config() const { return cfg_; }
  NamedTensors<float>& params() { return params_; }
  const NamedTensors<float>& params() const { return params_; }

  NamedTensors<float> group(const std::string& name) const {
    NamedTensors<float> out;
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (groups_[i] == name) out.push_back(params_[i]);
    if (out.empty()) throw ConfigError("lm: unknown parameter group '" + name + "'");
    return out;
  }

  const Tensorf& param(const std::string& name) const {
    for (const auto& [n, t] : params_)
      if (n == name) return t;
    throw Error("lm: no parameter '" + name + "'");
  }
  Tensorf& param(const std::string& name) { return const_cast<Tensorf&>(std::as_const(*this).param(name)); }

  /// Token embedding rows [n, D].
  Tensorf embed(std::span<const std::int64_t> ids) const {
    for (auto id : ids)
      if (id < 0 || id >= cfg_.vocab)
        throw Error("lm: token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(cfg_.vocab));
    return embedding(param("llm.tok_emb"), ids);
  }

  /// x [B, T, D] -> logits [B, T, V].  Sequences are right-padded, so the
  /// causal mask alone keeps real positions from seeing padding.
  Tensorf forward(const Tensorf& x, Rng* dropout_rng = nullptr) const {
    if (x.rank() != 3 || x.dim(2) != cfg_.d_model)
      throw ShapeError("lm: expected [B, T, " + std::to_string(cfg_.d_model) + "], got " + shape_str(x.shape()));
    const auto B = x.dim(0), T = x.dim(1);
    const std::int64_t D = cfg_.d_model, H = cfg_.n_heads, dh = D / H;
    if (T > cfg_.max_length)
      throw Error("lm: sequence of " + std::to_string(T) + " exceeds the limit of " + std::to_string(cfg_.max_length));
    if (T == 0) throw ShapeError("lm: empty sequence");
    auto drop = [&](const Tensorf& t) {
      if (!dropout_rng || cfg_.dropout <= 0) return t;
      return dropout(t, cfg_.dropout, [&] { return dropout_rng->uniform(); });
    };

    Tensorf h = add(x, narrow(param("llm.pos_emb"), 0, 0, T));
    h = drop(h);
    Buffer<float> causal(static_cast<std::size_t>(T * T), 0.0f);
    for (std::int64_t i = 0; i < T; ++i)
      for (std::int64_t j = i + 1; j < T; ++j) causal[static_cast<std::size_t>(i * T + j)] = -1e9f;
    const auto mask = Tensorf::from_buffer({T, T}, std::move(causal));
    const float scale_qk = 1.0f / std::sqrt(static_cast<float>(dh));

    for (int l = 0; l < cfg_.n_layers; ++l) {
      const std::string p = "llm.block" + std::to_string(l);
      const auto a = layer_norm(h, param(p + ".ln1.g"), param(p + ".ln1.b"));
      const auto qkv = linear(a, param(p + ".qkv.w"), param(p + ".qkv.b"));  // [B, T, 3D]
      auto heads = [&](int part) {
        const auto s = narrow(reshape(qkv, {B * T, 3 * D}), 1, part * D, D);
        return reshape(permute0213(reshape(s, {B, T, H, dh})), {B * H, T, dh});
      };
      const auto q = heads(0), k = heads(1), v = heads(2);
      const auto att = softmax(add(scale(bmm(q, k, true), scale_qk), mask));
      const auto o = reshape(permute0213(reshape(bmm(drop(att), v), {B, H, T, dh})), {B, T, D});
      h = add(h, drop(linear(o, param(p + ".proj.w"), param(p + ".proj.b"))));
      const auto m = layer_norm(h, param(p + ".ln2.g"), param(p + ".ln2.b"));
      const auto f = linear(gelu(linear(m, param(p + ".fc1.w"), param(p + ".fc1.b"))), param(p + ".fc2.w"),
                            param(p + ".fc2.b"));
      h = add(h, drop(f));
    }
    h = layer_norm(h, param("llm.ln_f.g"), param("llm.ln_f.b"));
    return linear(h, param("llm.head.w"), param("llm.head.b"));
  }

  /// Greedy decoding after `prefix` [P, D].  Returns generated ids without
  /// the terminating EOS.
  std::vector<std::int64_t> generate(const Tensorf& prefix, int max_new, std::int64_t eos) const {
    NoGradGuard ng;
    if (prefix.rank() != 2 || prefix.dim(1) != cfg_.d_model) throw ShapeError("generate: prefix must be [P, D]");
    const auto P = prefix.dim(0);
    const int budget = std::min<int>(max_new, cfg_.max_length - static_cast<int>(P));
    std::vector<std::int64_t> out;
    Tensorf seq = prefix;
    for (int s = 0; s < budget; ++s) {
      const auto T = seq.dim(0);
      const auto logits = forward(reshape(seq, {1, T, cfg_.d_model}));
      const float* row = logits.values().data() + (T - 1) * cfg_.vocab;
      std::int64_t best = 0;
      for (int v = 1; v < cfg_.vocab; ++v)
        if (row[v] > row[best]) best = v;
      if (best == eos) break;
      out.push_back(best);
      seq = concat<float>({seq, embed(std::vector<std::int64_t>{best})});
    }
    return out;
  }

 private:
  static std::vector<float> normal(Rng& rng, std::int64_t n, double sd) {
    std::vector<float> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = static_cast<float>(rng.normal(0.0, sd));
    return v;
  }
  static std::vector<float> fill(std::int64_t n, float value) { return std::vector<float>(static_cast<std::size_t>(n), value); }

  void add_param(const std::string& group, const std::string& name, Shape shape, std::vector<float> v) {
    params_.emplace_back(name, Tensorf::from(std::move(shape), v, true));
    groups_.push_back(group);
  }

  LMConfig cfg_;
  NamedTensors<float> params_;
  std::vector<std::string> groups_;
};

}  // namespace lslm::lm
