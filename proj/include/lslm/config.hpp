// SPDX-License-Identifier: Apache-2.0
//
// One flat run configuration covering every stage.  Missing keys take the
// desk defaults; unknown keys are rejected at every level.
#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <vector>

#include "lslm/errors.hpp"
#include "lslm/io.hpp"
#include "lslm/lm.hpp"
#include "lslm/vq.hpp"

namespace lslm::config {

enum class Pretrain { mlp, joint, staged };
enum class Instruct { llm, joint, none };

inline const char* name(Pretrain p) {
  switch (p) {
    case Pretrain::mlp: return "mlp";
    case Pretrain::joint: return "joint";
    default: return "staged";
  }
}

inline const char* name(Instruct i) {
  switch (i) {
    case Instruct::llm: return "llm";
    case Instruct::joint: return "joint";
    default: return "none";
  }
}

inline Pretrain parse_pretrain(const std::string& s) {
  if (s == "mlp") return Pretrain::mlp;
  if (s == "joint") return Pretrain::joint;
  if (s == "staged") return Pretrain::staged;
  throw ConfigError("unknown pretrain scheme '" + s + "' (expected mlp, joint or staged)");
}

inline Instruct parse_instruct(const std::string& s) {
  if (s == "llm") return Instruct::llm;
  if (s == "joint") return Instruct::joint;
  if (s == "none") return Instruct::none;
  throw ConfigError("unknown instruct scheme '" + s + "' (expected llm, joint or none)");
}

struct SchemeSpec {
  Pretrain pretrain = Pretrain::joint;
  Instruct instruct = Instruct::llm;
  double lr_mlp = 2e-4;
  double lr_llm = 1e-4;
  double weight_decay = 0.0;
  int pretrain_steps = 1000;  // staged: split evenly between the two phases
  int instruct_steps = 1000;
  int batch = 8;
  int log_every = 50;
  int eval_every = 0;  // 0: evaluate only before and after each stage
};

struct EvalOptions {
  std::vector<std::string> splits = {"val"};
  int max_new = 40;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::string corpus;   // manifest.jsonl
  std::string run_dir = "run";
  vq::TokenizerConfig tokenizer = vq::TokenizerConfig::desk();
  lm::LMConfig lm;
  SchemeSpec scheme;
  EvalOptions eval;

  void validate() const {
    tokenizer.validate();
    if (lm.d_model <= 0 || lm.n_layers < 1 || lm.n_heads < 1 || lm.d_model % lm.n_heads != 0)
      throw ConfigError("lm: bad model size");
    if (lm.max_length != lm::kMaxLength) throw ConfigError("lm: max_length is fixed at 250");
    if (scheme.lr_mlp <= 0 || scheme.lr_llm <= 0) throw ConfigError("scheme: learning rates must be positive");
    if (scheme.pretrain_steps < 0 || scheme.instruct_steps < 0) throw ConfigError("scheme: negative step budget");
    if (scheme.pretrain == Pretrain::staged && scheme.pretrain_steps < 2)
      throw ConfigError("scheme: staged pretraining needs at least 2 steps");
    if (scheme.batch < 1 || scheme.log_every < 1 || scheme.eval_every < 0) throw ConfigError("scheme: bad batch or intervals");
    if (eval.max_new < 1) throw ConfigError("eval: max_new must be positive");
    for (const auto& s : eval.splits)
      if (s != "train" && s != "val" && s != "test") throw ConfigError("eval: unknown split '" + s + "'");
  }
};

inline nlohmann::ordered_json to_json(const SchemeSpec& s) {
  return {{"pretrain", name(s.pretrain)}, {"instruct", name(s.instruct)}, {"lr_mlp", s.lr_mlp},
          {"lr_llm", s.lr_llm},           {"weight_decay", s.weight_decay}, {"pretrain_steps", s.pretrain_steps},
          {"instruct_steps", s.instruct_steps}, {"batch", s.batch}, {"log_every", s.log_every},
          {"eval_every", s.eval_every}};
}

inline nlohmann::ordered_json to_json(const RunConfig& c) {
  nlohmann::ordered_json lmj = lm::to_json(c.lm);
  lmj.erase("vocab");  // fixed by the corpus vocabulary
  nlohmann::ordered_json j;
  j["seed"] = c.seed;
  j["corpus"] = c.corpus;
  j["run_dir"] = c.run_dir;
  j["tokenizer"] = vq::to_json(c.tokenizer);
  j["lm"] = lmj;
  j["scheme"] = to_json(c.scheme);
  j["eval"] = {{"splits", c.eval.splits}, {"max_new", c.eval.max_new}};
  return j;
}

namespace detail {

inline void check_keys(const nlohmann::json& j, const nlohmann::ordered_json& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.contains(it.key())) throw ConfigError(where + ": unknown key '" + it.key() + "'");
}

}  // namespace detail

/// Sub-configs without an explicit seed inherit the run seed.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  const auto defaults = to_json(c);
  detail::check_keys(j, defaults, "config");
  try {
    c.seed = j.value("seed", c.seed);
    c.corpus = j.value("corpus", c.corpus);
    c.run_dir = j.value("run_dir", c.run_dir);

    nlohmann::json tok = vq::to_json(c.tokenizer);
    tok["seed"] = c.seed;
    if (j.contains("tokenizer")) {
      detail::check_keys(j["tokenizer"], defaults["tokenizer"], "config.tokenizer");
      tok.update(j["tokenizer"]);
    }
    c.tokenizer = vq::tokenizer_config_from_json(tok);

    nlohmann::json lmj = defaults["lm"];
    lmj["seed"] = c.seed;
    if (j.contains("lm")) {
      detail::check_keys(j["lm"], defaults["lm"], "config.lm");
      lmj.update(j["lm"]);
    }
    c.lm = lm::lm_config_from_json(lmj);

    if (j.contains("scheme")) {
      const auto& s = j["scheme"];
      detail::check_keys(s, defaults["scheme"], "config.scheme");
      if (s.contains("pretrain")) c.scheme.pretrain = parse_pretrain(s["pretrain"].get<std::string>());
      if (s.contains("instruct")) c.scheme.instruct = parse_instruct(s["instruct"].get<std::string>());
      c.scheme.lr_mlp = s.value("lr_mlp", c.scheme.lr_mlp);
      c.scheme.lr_llm = s.value("lr_llm", c.scheme.lr_llm);
      c.scheme.weight_decay = s.value("weight_decay", c.scheme.weight_decay);
      c.scheme.pretrain_steps = s.value("pretrain_steps", c.scheme.pretrain_steps);
      c.scheme.instruct_steps = s.value("instruct_steps", c.scheme.instruct_steps);
      c.scheme.batch = s.value("batch", c.scheme.batch);
      c.scheme.log_every = s.value("log_every", c.scheme.log_every);
      c.scheme.eval_every = s.value("eval_every", c.scheme.eval_every);
    }
    if (j.contains("eval")) {
      const auto& e = j["eval"];
      detail::check_keys(e, defaults["eval"], "config.eval");
      c.eval.splits = e.value("splits", c.eval.splits);
      c.eval.max_new = e.value("max_new", c.eval.max_new);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  } catch (const std::runtime_error& e) {
    throw ConfigError(e.what());
  }
  return run_config_from_json(j);
}

}  // namespace lslm::config
