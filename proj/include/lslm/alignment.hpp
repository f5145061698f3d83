// SPDX-License-Identifier: Apache-2.0
//
// Projection of quantized motion vectors into the language model's
// embedding space, and splicing of those rows into a text prompt at the
// motion placeholder.
#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lslm/dataset.hpp"
#include "lslm/errors.hpp"
#include "lslm/lm.hpp"
#include "lslm/ops.hpp"
#include "lslm/optim.hpp"
#include "lslm/rng.hpp"
#include "lslm/templates.hpp"

namespace lslm::align {

/// Two linear layers with GELU between: code_dim -> d_model -> d_model.
class AlignmentMLP {
 public:
  AlignmentMLP() = default;
  AlignmentMLP(int code_dim, int d_model, std::uint64_t seed) : in_(code_dim), out_(d_model) {
    if (code_dim <= 0 || d_model <= 0) throw ConfigError("alignment: widths must be positive");
    Rng rng(mix_seed(seed, 0xa11));
    layer("mlp.fc1", code_dim, d_model, rng);
    layer("mlp.fc2", d_model, d_model, rng);
  }

  int in_width() const { return in_; }
  int out_width() const { return out_; }
  NamedTensors<float>& params() { return params_; }
  const NamedTensors<float>& params() const { return params_; }

  Tensorf& param(const std::string& name) {
    for (auto& [n, t] : params_)
      if (n == name) return t;
    throw Error("alignment: no parameter '" + name + "'");
  }
  const Tensorf& param(const std::string& name) const { return const_cast<AlignmentMLP*>(this)->param(name); }

  /// z [L, code_dim] -> [L, d_model].
  Tensorf project(const Tensorf& z) const {
    if (z.rank() != 2 || z.dim(1) != in_)
      throw ShapeError("alignment: expected [L, " + std::to_string(in_) + "], got " + shape_str(z.shape()));
    const auto h = gelu(linear(z, param("mlp.fc1.w"), param("mlp.fc1.b")));
    return linear(h, param("mlp.fc2.w"), param("mlp.fc2.b"));
  }

 private:
  void layer(const std::string& name, int fan_in, int fan_out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<float> w(static_cast<std::size_t>(fan_in) * fan_out);
    for (auto& v : w) v = static_cast<float>(rng.uniform(-bound, bound));
    params_.emplace_back(name + ".w", Tensorf::from({fan_in, fan_out}, w, true));
    params_.emplace_back(name + ".b", Tensorf::zeros({fan_out}, true));
  }

  int in_ = 0, out_ = 0;
  NamedTensors<float> params_;
};

struct FusedPrompt {
  Tensorf embeddings;                // [T - 1 + L, d_model]
  std::vector<std::uint8_t> gesture;  // 1 on rows taken from the motion
  std::int64_t motion_start = 0;
  std::int64_t motion_length = 0;
  std::int64_t length() const { return embeddings.dim(0); }
};

/// Replaces the single MOTION id of `prompt_ids` with the rows of `e_sign`.
inline FusedPrompt fuse(std::span<const std::int64_t> prompt_ids, const Tensorf& e_sign, const lm::LanguageModel& model) {
  std::int64_t at = -1;
  int count = 0;
  for (std::size_t i = 0; i < prompt_ids.size(); ++i)
    if (prompt_ids[i] == data::TextVocab::kMotion) {
      at = static_cast<std::int64_t>(i);
      ++count;
    }
  if (count != 1)
    throw Error("fuse: prompt must contain exactly one motion placeholder, found " + std::to_string(count));
  if (e_sign.rank() != 2 || e_sign.dim(1) != model.config().d_model)
    throw ShapeError("fuse: motion rows must be [L, d_model], got " + shape_str(e_sign.shape()));
  const auto L = e_sign.dim(0);
  if (L == 0) throw Error("fuse: empty motion segment");
  const auto n = static_cast<std::int64_t>(prompt_ids.size());
  std::vector<Tensorf> parts;
  if (at > 0) parts.push_back(model.embed(prompt_ids.subspan(0, static_cast<std::size_t>(at))));
  parts.push_back(e_sign);
  if (at + 1 < n) parts.push_back(model.embed(prompt_ids.subspan(static_cast<std::size_t>(at + 1))));
  FusedPrompt f;
  f.embeddings = parts.size() == 1 ? parts[0] : concat(parts);
  f.gesture.assign(static_cast<std::size_t>(n - 1 + L), 0);
  for (std::int64_t i = 0; i < L; ++i) f.gesture[static_cast<std::size_t>(at + i)] = 1;
  f.motion_start = at;
  f.motion_length = L;
  return f;
}

/// Prompt ids: BOS followed by the rendered prompt text.
inline std::vector<std::int64_t> prompt_ids(const data::TextVocab& vocab, const std::string& prompt) {
  std::vector<std::int64_t> ids = {data::TextVocab::kBos};
  const auto body = vocab.encode(prompt);
  ids.insert(ids.end(), body.begin(), body.end());
  return ids;
}

/// Caption ids followed by EOS.
inline std::vector<std::int64_t> answer_ids(const data::TextVocab& vocab, const std::string& caption) {
  auto ids = vocab.encode(caption);
  ids.push_back(data::TextVocab::kEos);
  return ids;
}

/// One training sequence: fused prompt followed by the answer tokens (EOS
/// is predicted, not fed).  targets[t] is the token expected after
/// position t; mask covers the answer region only.
struct Example {
  Tensorf inputs;  // [T, d_model]
  std::vector<std::int64_t> targets;
  std::vector<std::uint8_t> mask;
  std::int64_t prompt_length = 0;
  std::int64_t length() const { return inputs.dim(0); }
};

/// Token budget check without building anything: prompt - 1 + L + answer.
inline bool fits(std::size_t prompt_len, std::int64_t L, std::size_t answer_len, int max_tokens = lm::kMaxLength) {
  return static_cast<std::int64_t>(prompt_len) - 1 + L + static_cast<std::int64_t>(answer_len) <= max_tokens;
}

/// `quantized` [L, code_dim].  Returns nothing when the example would
/// exceed the token budget.
inline std::optional<Example> build_training_example(const std::string& caption, const Tensorf& quantized, int template_id,
                                                     const templates::TemplateBank& bank, const data::TextVocab& vocab,
                                                     const AlignmentMLP& phi, const lm::LanguageModel& model) {
  const auto r = bank.render(template_id, caption);
  const auto pids = prompt_ids(vocab, r.prompt);
  const auto ans = answer_ids(vocab, r.target);
  if (!fits(pids.size(), quantized.dim(0), ans.size())) return std::nullopt;
  const auto fused = fuse(pids, phi.project(quantized), model);
  const std::vector<std::int64_t> fed(ans.begin(), ans.end() - 1);
  Example ex;
  ex.prompt_length = fused.length();
  ex.inputs = fed.empty() ? fused.embeddings : concat<float>({fused.embeddings, model.embed(fed)});
  const auto T = ex.length();
  ex.targets.assign(static_cast<std::size_t>(T), data::TextVocab::kPad);
  ex.mask.assign(static_cast<std::size_t>(T), 0);
  for (std::size_t i = 0; i < ans.size(); ++i) {
    const auto t = static_cast<std::size_t>(ex.prompt_length - 1) + i;
    ex.targets[t] = ans[i];
    ex.mask[t] = 1;
  }
  return ex;
}

/// Right-pads examples with zero rows into [B, T_max, d_model].
struct PaddedBatch {
  Tensorf inputs;
  std::vector<std::int64_t> targets;
  std::vector<std::uint8_t> mask;
};

inline PaddedBatch pad_batch(const std::vector<Example>& xs) {
  if (xs.empty()) throw Error("pad_batch: empty batch");
  std::int64_t T = 0;
  for (const auto& x : xs) T = std::max(T, x.length());
  const auto D = xs[0].inputs.dim(1);
  std::vector<Tensorf> rows;
  PaddedBatch b;
  for (const auto& x : xs) {
    rows.push_back(x.inputs);
    const auto pad = T - x.length();
    if (pad > 0) rows.push_back(Tensorf::zeros({pad, D}));
    b.targets.insert(b.targets.end(), x.targets.begin(), x.targets.end());
    b.targets.insert(b.targets.end(), static_cast<std::size_t>(pad), data::TextVocab::kPad);
    b.mask.insert(b.mask.end(), x.mask.begin(), x.mask.end());
    b.mask.insert(b.mask.end(), static_cast<std::size_t>(pad), 0);
  }
  b.inputs = reshape(concat(rows), {static_cast<std::int64_t>(xs.size()), T, D});
  return b;
}

}  // namespace lslm::align
