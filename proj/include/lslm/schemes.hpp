// SPDX-License-Identifier: Apache-2.0
//
// Stage orchestration: tokenizer training, gesture-caption pretraining under
// the mlp / joint / staged freezing schemes, and instruction tuning.
//
// Run directory:
//   config.json            effective config of the latest stage
//   tokenizer/             stage-1 checkpoint (tokenizer + feature stats)
//   tokens.jsonl           stage-1 code indices for every manifest entry
//   tokenizer_report.json  codebook usage and reconstruction on the train split
//   pretrain_init/         freshly initialized phi + backbone
//   pretrain_a/ pretrain_b/  staged sub-phases
//   pretrain/  instruct/   stage outputs
//   metrics.jsonl          one record per evaluation
//   train_log.jsonl        periodic training losses
#pragma once

#include <nlohmann/json.hpp>

#include <chrono>
#include <filesystem>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "lslm/alignment.hpp"
#include "lslm/checkpoint.hpp"
#include "lslm/config.hpp"
#include "lslm/dataset.hpp"
#include "lslm/lm.hpp"
#include "lslm/metrics.hpp"
#include "lslm/motion.hpp"
#include "lslm/templates.hpp"
#include "lslm/vq.hpp"

namespace lslm::schemes {

namespace fs = std::filesystem;
using config::Instruct;
using config::Pretrain;
using config::RunConfig;

using Progress = std::function<void(const std::string&)>;

inline const std::vector<std::string>& group_names() {
  static const std::vector<std::string> g = {"tokenizer", "mlp", "llm.embedding", "llm.blocks", "llm.head"};
  return g;
}

/// Parameter group owning a checkpoint tensor ("stats" for normalization data).
inline std::string group_of(const std::string& tensor) {
  auto starts = [&](const char* p) { return tensor.rfind(p, 0) == 0; };
  if (starts("tokenizer.")) return "tokenizer";
  if (starts("stats.")) return "stats";
  if (starts("mlp.")) return "mlp";
  if (tensor == "llm.tok_emb" || tensor == "llm.pos_emb") return "llm.embedding";
  if (starts("llm.head.")) return "llm.head";
  if (starts("llm.")) return "llm.blocks";
  throw Error("no parameter group for tensor '" + tensor + "'");
}

inline std::set<std::string> backbone_groups() { return {"llm.embedding", "llm.blocks", "llm.head"}; }

/// Trainable groups of a pretraining scheme; `phase` is 0 or 1 for staged.
inline std::set<std::string> trainable(Pretrain p, int phase = 0) {
  auto all = backbone_groups();
  switch (p) {
    case Pretrain::mlp: return {"mlp"};
    case Pretrain::joint: all.insert("mlp"); return all;
    default: return phase == 0 ? std::set<std::string>{"mlp"} : all;
  }
}

inline std::set<std::string> trainable(Instruct i) {
  auto all = backbone_groups();
  switch (i) {
    case Instruct::llm: return all;
    case Instruct::joint: all.insert("mlp"); return all;
    default: return {};
  }
}

// ---------------------------------------------------------------------------
// Model bundle

struct Model {
  vq::Tokenizer tokenizer;
  motion::FeatureStats stats;
  data::TextVocab vocab;
  align::AlignmentMLP phi;
  lm::LanguageModel lm;
  bool has_backbone = false;
};

inline void put_stats(ckpt::Checkpoint& c, const motion::FeatureStats& s) {
  c.put("stats.mean", Tensorf::from({motion::kFeatureDim}, s.mean));
  c.put("stats.std", Tensorf::from({motion::kFeatureDim}, s.std));
  c.extra["stats_id"] = s.id;
}

inline motion::FeatureStats get_stats(const ckpt::Checkpoint& c) {
  motion::FeatureStats s;
  s.mean = c.at("stats.mean").values;
  s.std = c.at("stats.std").values;
  s.id = c.extra.at("stats_id").get<std::string>();
  return s;
}

/// Tokenizer + stats; backbone tensors are added when present.
inline ckpt::Checkpoint make_checkpoint(const Model& m, const std::string& stage, const RunConfig& cfg,
                                        const std::set<std::string>& trainable_groups) {
  ckpt::Checkpoint c;
  c.stage = stage;
  c.config = config::to_json(cfg);
  c.extra["tokenizer"] = vq::to_json(m.tokenizer.config());
  put_stats(c, m.stats);
  c.put_all(m.tokenizer.params(), "tokenizer.");
  if (m.has_backbone) {
    c.extra["lm"] = lm::to_json(m.lm.config());
    c.extra["vocab"] = m.vocab.tokens();
    c.put_all(m.phi.params());
    c.put_all(m.lm.params());
  }
  for (const auto& g : group_names())
    if (g == "tokenizer" || m.has_backbone) c.set_frozen(g, trainable_groups.count(g) == 0);
  return c;
}

inline Model model_from_checkpoint(const ckpt::Checkpoint& c) {
  Model m;
  try {
    m.tokenizer = vq::Tokenizer(vq::tokenizer_config_from_json(c.extra.at("tokenizer")));
    m.stats = get_stats(c);
    if (c.extra.contains("lm")) {
      const auto toks = c.extra.at("vocab").get<std::vector<std::string>>();
      m.vocab = data::TextVocab::from_words({toks.begin() + data::TextVocab::kSpecials, toks.end()});
      if (m.vocab.tokens() != toks) throw FormatError("checkpoint: vocabulary is not in canonical order");
      m.lm = lm::LanguageModel(lm::lm_config_from_json(c.extra.at("lm")));
      m.phi = align::AlignmentMLP(m.tokenizer.config().code_dim, m.lm.config().d_model, 0);
      m.has_backbone = true;
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  c.restore_all(m.tokenizer.params(), "tokenizer.");
  if (m.has_backbone) {
    c.restore_all(m.phi.params());
    c.restore_all(m.lm.params());
  }
  return m;
}

inline Model load_model(const fs::path& dir) { return model_from_checkpoint(ckpt::load(dir)); }

// ---------------------------------------------------------------------------
// Freeze state

/// Optimizer over phi and the backbone groups.  The tokenizer is never
/// registered; asking to train it is a stage-ordering error.
class StageState {
 public:
  StageState(Model& m, const config::SchemeSpec& s) {
    AdamWConfig mlp{.lr = s.lr_mlp, .weight_decay = s.weight_decay};
    AdamWConfig llm{.lr = s.lr_llm, .weight_decay = s.weight_decay};
    opt_.add_group("mlp", m.phi.params(), mlp);
    for (const auto& g : backbone_groups()) opt_.add_group(g, m.lm.group(g), llm);
    for (const auto& g : opt_.group_names()) opt_.freeze(g);
  }

  void freeze(const std::vector<std::string>& groups) {
    for (const auto& g : groups) {
      if (g == "tokenizer") continue;
      check(g);
      opt_.freeze(g);
    }
  }

  void unfreeze(const std::vector<std::string>& groups) {
    for (const auto& g : groups) {
      if (g == "tokenizer") throw StageOrderError("the tokenizer is fixed after stage 1 and cannot be trained again");
      check(g);
      opt_.unfreeze(g);
    }
  }

  /// Exactly `groups` trainable, everything else frozen.
  void set_trainable(const std::set<std::string>& groups) {
    freeze(opt_.group_names());
    unfreeze({groups.begin(), groups.end()});
  }

  std::set<std::string> trainable() const {
    std::set<std::string> out;
    for (const auto& g : opt_.group_names())
      if (!opt_.frozen(g)) out.insert(g);
    return out;
  }

  AdamW<float>& optimizer() { return opt_; }
  int step = 0;

 private:
  void check(const std::string& g) const {
    if (!opt_.has_group(g)) throw ConfigError("unknown parameter group '" + g + "'");
  }
  AdamW<float> opt_;
};

// ---------------------------------------------------------------------------
// Data

struct Pair {
  std::string id;
  std::string caption;
  data::Split split = data::Split::none;
  Tensorf quantized;  // [L, code_dim], constant
  std::vector<std::int64_t> indices;
};

inline motion::MotionSequence load_normalized(const fs::path& file, const motion::FeatureStats& stats) {
  auto seq = motion::read_motion(file);
  if (seq.normalized) {
    if (seq.stats_id != stats.id)
      throw FormatError(file.string() + ": normalized with statistics '" + seq.stats_id + "', expected '" + stats.id + "'");
    return seq;
  }
  return motion::normalize(seq, stats);
}

inline Pair pair_from(const Model& m, const std::string& id, const std::string& caption, data::Split split,
                      const motion::MotionSequence& normalized) {
  const auto tc = m.tokenizer.tokenize(normalized);
  Pair p;
  p.id = id;
  p.caption = caption;
  p.split = split;
  p.indices = tc.indices;
  p.quantized = Tensorf::from({tc.length(), m.tokenizer.config().code_dim}, tc.quantized);
  return p;
}

inline std::vector<Pair> load_pairs(const Model& m, const data::Manifest& man) {
  std::vector<Pair> out;
  for (const auto& e : man.entries)
    out.push_back(pair_from(m, e.id, e.text, e.split, load_normalized(man.motion_file(e), m.stats)));
  return out;
}

inline std::vector<Pair> in_split(const std::vector<Pair>& ps, data::Split s) {
  std::vector<Pair> out;
  for (const auto& p : ps)
    if (p.split == s) out.push_back(p);
  return out;
}

// ---------------------------------------------------------------------------
// Inference and evaluation

/// Greedy translation of one quantized clip.  `prompt` is rendered template
/// text containing the MOTION token.
inline std::string translate(const Model& m, const Tensorf& quantized, const std::string& prompt, int max_new) {
  NoGradGuard ng;
  if (!m.has_backbone) throw StageOrderError("translation needs a pretrain or instruct checkpoint");
  const auto ids = align::prompt_ids(m.vocab, prompt);
  const auto fused = align::fuse(ids, m.phi.project(quantized), m.lm);
  return m.vocab.decode(m.lm.generate(fused.embeddings, max_new, data::TextVocab::kEos));
}

inline std::string prompt_for(const templates::TemplateBank& bank, int template_id) {
  return bank.render(template_id, "").prompt;
}

inline metrics::EvalReport evaluate_pairs(const Model& m, const std::vector<Pair>& pairs, int template_id, int max_new,
                                          const templates::TemplateBank& bank = templates::TemplateBank::standard()) {
  const auto prompt = prompt_for(bank, template_id);
  metrics::EvalCorpus corpus;
  for (const auto& p : pairs) corpus.push_back(metrics::make_sample(p.id, translate(m, p.quantized, prompt, max_new), p.caption));
  return metrics::evaluate_corpus(corpus);
}

inline std::string template_label(int template_id) {
  return template_id == templates::TemplateBank::kPretrain ? "pretrain" : std::to_string(template_id);
}

// ---------------------------------------------------------------------------
// JSONL logs: rerunning a stage replaces that stage's records

class JsonlLog {
 public:
  JsonlLog(fs::path path, std::string stage) : path_(std::move(path)), stage_(std::move(stage)) {
    if (!fs::exists(path_)) return;
    std::istringstream in(io::read_file(path_));
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::ordered_json::parse(line);
      if (j.value("stage", std::string{}) != stage_) kept_ += line + "\n";
    }
  }

  void add(nlohmann::ordered_json record) {
    nlohmann::ordered_json j;
    j["stage"] = stage_;
    for (auto it = record.begin(); it != record.end(); ++it) j[it.key()] = it.value();
    added_ += j.dump() + "\n";
    io::write_file(path_, kept_ + added_);
  }

 private:
  fs::path path_;
  std::string stage_;
  std::string kept_, added_;
};

inline nlohmann::ordered_json metrics_record(int step, const std::string& split, int template_id,
                                             const metrics::EvalReport& r) {
  return {{"step", step},     {"split", split},       {"template", template_label(template_id)},
          {"bleu1", r.bleu1}, {"bleu4", r.bleu4},     {"rougeL", r.rougeL},
          {"cider", r.cider}, {"wer", r.wer},         {"ins", r.ins},
          {"del", r.del},     {"sub", r.sub},         {"samples", r.samples}};
}

// ---------------------------------------------------------------------------
// Training loop

struct LoopOptions {
  int steps = 0;
  int batch = 8;
  bool instruct = false;
  int log_every = 50;
  std::string phase;
};

struct LoopResult {
  std::vector<double> losses;
  int skipped = 0;  // examples dropped for exceeding the token budget
};

/// Cycles through `train` in seeded epoch order.  Instruction examples draw a
/// non-holdout template per example.
inline LoopResult train_loop(Model& m, StageState& st, const std::vector<Pair>& train, const LoopOptions& o,
                             const templates::TemplateBank& bank, Rng& rng, JsonlLog& log,
                             const std::function<void(int)>& after_step = {}) {
  if (train.empty()) throw Error("training: no training pairs");
  LoopResult res;
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t cursor = order.size();
  Rng drop_rng(rng.engine()());
  double window_loss = 0;
  int window_n = 0;
  for (int s = 0; s < o.steps; ++s) {
    std::vector<align::Example> exs;
    std::size_t attempts = 0;
    while (static_cast<int>(exs.size()) < o.batch && attempts++ < 2 * (train.size() + static_cast<std::size_t>(o.batch))) {
      if (cursor == order.size()) {
        rng.shuffle(order);
        cursor = 0;
      }
      const auto& p = train[order[cursor++]];
      const int tid = o.instruct ? bank.sample(rng) : templates::TemplateBank::kPretrain;
      auto ex = align::build_training_example(p.caption, p.quantized, tid, bank, m.vocab, m.phi, m.lm);
      if (ex) exs.push_back(std::move(*ex));
      else ++res.skipped;
    }
    if (exs.empty()) throw Error("training: every example exceeds the token budget");
    const auto b = align::pad_batch(exs);
    const auto loss = lm::lm_loss(m.lm.forward(b.inputs, m.lm.config().dropout > 0 ? &drop_rng : nullptr), b.targets, b.mask);
    const double v = loss.item();
    if (!std::isfinite(v)) throw NumericError("training: non-finite loss at step " + std::to_string(st.step));
    st.optimizer().zero_grad();
    backward(loss);
    st.optimizer().step();
    res.losses.push_back(v);
    window_loss += v;
    ++window_n;
    ++st.step;
    if (st.step % o.log_every == 0 || s + 1 == o.steps) {
      log.add({{"phase", o.phase}, {"step", st.step}, {"loss", window_loss / window_n}});
      window_loss = 0;
      window_n = 0;
    }
    if (after_step) after_step(st.step);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Stages

inline fs::path run_path(const RunConfig& c, const char* sub) { return fs::path(c.run_dir) / sub; }

inline void write_config(const RunConfig& c) {
  io::write_file(fs::path(c.run_dir) / "config.json", config::to_json(c).dump(2) + "\n");
}

inline data::Manifest open_corpus(const RunConfig& c) {
  if (c.corpus.empty()) throw ConfigError("config: 'corpus' (path to manifest.jsonl) is required");
  if (!fs::exists(c.corpus)) throw ConfigError("corpus manifest not found: " + c.corpus);
  return data::read_manifest(c.corpus);
}

/// Stage 1: normalization statistics from the train split, then the VQ tokenizer.
inline ckpt::Checkpoint run_stage1(const RunConfig& cfg, const Progress& progress = {}) {
  cfg.validate();
  const auto man = open_corpus(cfg);
  std::vector<motion::MotionSequence> raw;
  for (const auto& e : man.in_split(data::Split::train)) {
    auto s = motion::read_motion(man.motion_file(e));
    if (s.normalized) throw FormatError(man.motion_file(e).string() + ": stage 1 expects unnormalized features");
    raw.push_back(std::move(s));
  }
  if (raw.empty()) throw ConfigError("stage 1: the corpus has no train split");
  Model m;
  m.stats = motion::compute_stats(raw);
  std::vector<motion::MotionSequence> train;
  for (const auto& s : raw) train.push_back(motion::normalize(s, m.stats));
  m.tokenizer = vq::Tokenizer(cfg.tokenizer);
  write_config(cfg);

  JsonlLog log(fs::path(cfg.run_dir) / "train_log.jsonl", "tokenizer");
  const auto rep = vq::train_tokenizer(m.tokenizer, train, [&](const vq::StepLog& s) {
    if ((s.step + 1) % cfg.scheme.log_every == 0 || s.step == 0 || s.step + 1 == cfg.tokenizer.steps) {
      log.add({{"step", s.step + 1}, {"loss", s.total}, {"recon", s.recon}, {"embed", s.embed}, {"commit", s.commit},
               {"active_codes", s.active_codes}});
      if (progress)
        progress("tokenizer step " + std::to_string(s.step + 1) + "/" + std::to_string(cfg.tokenizer.steps) +
                 " loss " + std::to_string(s.total));
    }
  });

  auto c = make_checkpoint(m, "tokenizer", cfg, {});
  c.extra["initial_loss"] = rep.initial_loss;
  c.extra["final_loss"] = rep.final_loss;
  ckpt::save(c, run_path(cfg, "tokenizer"));

  std::string tokens;
  for (const auto& e : man.entries) {
    const auto tc = m.tokenizer.tokenize(load_normalized(man.motion_file(e), m.stats));
    tokens += nlohmann::ordered_json{{"id", e.id}, {"split", data::split_name(e.split)}, {"indices", tc.indices}}.dump() + "\n";
  }
  io::write_file(fs::path(cfg.run_dir) / "tokens.jsonl", tokens);
  auto report = vq::codebook_report(m.tokenizer, train, m.stats).to_json();
  report["initial_loss"] = rep.initial_loss;
  report["final_loss"] = rep.final_loss;
  io::write_file(fs::path(cfg.run_dir) / "tokenizer_report.json", report.dump(2) + "\n");
  return c;
}

namespace detail {

inline ckpt::Checkpoint require(const fs::path& dir, const std::string& what, const std::string& command) {
  if (!ckpt::exists(dir))
    throw StageOrderError(what + " checkpoint not found in " + dir.string() + "; run `lslm " + command + "` first");
  return ckpt::load(dir);
}

inline void check_tokenizer_unchanged(const ckpt::Checkpoint& before, const ckpt::Checkpoint& after) {
  for (const auto& name : ckpt::changed_tensors(before, after)) {
    const auto g = group_of(name);
    if (g == "tokenizer" || g == "stats") throw StageOrderError("tokenizer tensor '" + name + "' changed after stage 1");
  }
}

struct EvalSet {
  std::string split;
  std::vector<Pair> pairs;
};

inline std::vector<EvalSet> eval_sets(const RunConfig& cfg, const std::vector<Pair>& all) {
  std::vector<EvalSet> out;
  for (const auto& s : cfg.eval.splits) {
    auto ps = in_split(all, data::parse_split(s));
    if (!ps.empty()) out.push_back({s, std::move(ps)});
  }
  return out;
}

inline void evaluate_into(JsonlLog& log, const Model& m, const std::vector<EvalSet>& sets, int step,
                          const std::vector<int>& template_ids, int max_new, const templates::TemplateBank& bank,
                          const Progress& progress) {
  for (const auto& s : sets)
    for (int t : template_ids) {
      const auto r = evaluate_pairs(m, s.pairs, t, max_new, bank);
      log.add(metrics_record(step, s.split, t, r));
      if (progress)
        progress("eval step " + std::to_string(step) + " " + s.split + " template " + template_label(t) + ": bleu1 " +
                 std::to_string(r.bleu1) + " wer " + std::to_string(r.wer));
    }
}

inline void abort_dump(const Model& m, const RunConfig& cfg, const std::string& stage, const StageState& st) {
  auto c = make_checkpoint(m, stage + "_abort", cfg, st.trainable());
  c.extra["step"] = st.step;
  ckpt::save(c, fs::path(cfg.run_dir) / (stage + "_abort"));
}

}  // namespace detail

/// Stage 2: gesture-caption pretraining with the configured freezing scheme.
inline ckpt::Checkpoint run_pretrain(const RunConfig& cfg, const Progress& progress = {}) {
  cfg.validate();
  const auto tok_ckpt = detail::require(run_path(cfg, "tokenizer"), "tokenizer", "train-tokenizer");
  const auto man = open_corpus(cfg);
  const auto bank = templates::TemplateBank::standard();
  Model m = model_from_checkpoint(tok_ckpt);
  m.vocab = data::build_vocab(man.entries, 1, bank.texts());
  auto lc = cfg.lm;
  lc.vocab = m.vocab.size();
  m.lm = lm::LanguageModel(lc);
  m.phi = align::AlignmentMLP(m.tokenizer.config().code_dim, lc.d_model, mix_seed(cfg.seed, 0xf1));
  m.has_backbone = true;
  write_config(cfg);

  const auto init = make_checkpoint(m, "init", cfg, {});
  ckpt::save(init, run_path(cfg, "pretrain_init"));
  const auto pairs = load_pairs(m, man);
  const auto train = in_split(pairs, data::Split::train);
  const auto sets = detail::eval_sets(cfg, pairs);
  JsonlLog metrics(fs::path(cfg.run_dir) / "metrics.jsonl", "pretrain");
  JsonlLog losses(fs::path(cfg.run_dir) / "train_log.jsonl", "pretrain");
  const std::vector<int> tmpl = {templates::TemplateBank::kPretrain};
  detail::evaluate_into(metrics, m, sets, 0, tmpl, cfg.eval.max_new, bank, progress);

  StageState st(m, cfg.scheme);
  Rng rng(mix_seed(cfg.seed, 0x9e7));
  auto periodic = [&](int step) {
    if (cfg.scheme.eval_every > 0 && step % cfg.scheme.eval_every == 0 && step < cfg.scheme.pretrain_steps)
      detail::evaluate_into(metrics, m, sets, step, tmpl, cfg.eval.max_new, bank, progress);
    if (progress && step % cfg.scheme.log_every == 0)
      progress("pretrain step " + std::to_string(step) + "/" + std::to_string(cfg.scheme.pretrain_steps));
  };
  LoopOptions o{.steps = cfg.scheme.pretrain_steps, .batch = cfg.scheme.batch, .instruct = false,
                .log_every = cfg.scheme.log_every, .phase = config::name(cfg.scheme.pretrain)};
  int skipped = 0;
  try {
    if (cfg.scheme.pretrain == Pretrain::staged) {
      const int steps_a = cfg.scheme.pretrain_steps / 2;
      st.set_trainable(trainable(Pretrain::staged, 0));
      o.steps = steps_a;
      o.phase = "staged_a";
      skipped += train_loop(m, st, train, o, bank, rng, losses, periodic).skipped;
      ckpt::save(make_checkpoint(m, "pretrain_a", cfg, st.trainable()), run_path(cfg, "pretrain_a"));
      st.optimizer().reset_state();
      st.set_trainable(trainable(Pretrain::staged, 1));
      o.steps = cfg.scheme.pretrain_steps - steps_a;
      o.phase = "staged_b";
      skipped += train_loop(m, st, train, o, bank, rng, losses, periodic).skipped;
      ckpt::save(make_checkpoint(m, "pretrain_b", cfg, st.trainable()), run_path(cfg, "pretrain_b"));
    } else {
      st.set_trainable(trainable(cfg.scheme.pretrain));
      skipped += train_loop(m, st, train, o, bank, rng, losses, periodic).skipped;
    }
  } catch (const NumericError&) {
    detail::abort_dump(m, cfg, "pretrain", st);
    throw;
  }

  auto out = make_checkpoint(m, "pretrain", cfg, st.trainable());
  out.extra["scheme"] = config::name(cfg.scheme.pretrain);
  out.extra["steps"] = st.step;
  out.extra["skipped_examples"] = skipped;
  detail::check_tokenizer_unchanged(tok_ckpt, out);
  ckpt::save(out, run_path(cfg, "pretrain"));
  detail::evaluate_into(metrics, m, sets, st.step, tmpl, cfg.eval.max_new, bank, progress);
  return out;
}

/// Stage 3: instruction tuning with a random non-holdout template per example.
inline ckpt::Checkpoint run_instruct(const RunConfig& cfg, const Progress& progress = {}) {
  cfg.validate();
  const auto tok_ckpt = detail::require(run_path(cfg, "tokenizer"), "tokenizer", "train-tokenizer");
  const auto pre = detail::require(run_path(cfg, "pretrain"), "pretrain", "pretrain");
  detail::check_tokenizer_unchanged(tok_ckpt, pre);
  const auto man = open_corpus(cfg);
  const auto bank = templates::TemplateBank::standard();
  Model m = model_from_checkpoint(pre);
  write_config(cfg);

  const auto pairs = load_pairs(m, man);
  const auto train = in_split(pairs, data::Split::train);
  const auto sets = detail::eval_sets(cfg, pairs);
  JsonlLog metrics(fs::path(cfg.run_dir) / "metrics.jsonl", "instruct");
  JsonlLog losses(fs::path(cfg.run_dir) / "train_log.jsonl", "instruct");
  std::vector<int> tmpl = {bank.training_ids().front()};
  detail::evaluate_into(metrics, m, sets, 0, tmpl, cfg.eval.max_new, bank, progress);

  StageState st(m, cfg.scheme);
  st.set_trainable(trainable(cfg.scheme.instruct));
  Rng rng(mix_seed(cfg.seed, 0x1a5));
  int skipped = 0;
  if (cfg.scheme.instruct != Instruct::none) {
    LoopOptions o{.steps = cfg.scheme.instruct_steps, .batch = cfg.scheme.batch, .instruct = true,
                  .log_every = cfg.scheme.log_every, .phase = config::name(cfg.scheme.instruct)};
    try {
      skipped = train_loop(m, st, train, o, bank, rng, losses, [&](int step) {
                  if (cfg.scheme.eval_every > 0 && step % cfg.scheme.eval_every == 0 && step < o.steps)
                    detail::evaluate_into(metrics, m, sets, step, tmpl, cfg.eval.max_new, bank, progress);
                  if (progress && step % cfg.scheme.log_every == 0)
                    progress("instruct step " + std::to_string(step) + "/" + std::to_string(o.steps));
                }).skipped;
    } catch (const NumericError&) {
      detail::abort_dump(m, cfg, "instruct", st);
      throw;
    }
  }
  auto out = make_checkpoint(m, "instruct", cfg, st.trainable());
  out.extra["scheme"] = config::name(cfg.scheme.instruct);
  out.extra["pretrain_scheme"] = pre.extra.value("scheme", std::string{});
  out.extra["steps"] = st.step;
  out.extra["skipped_examples"] = skipped;
  detail::check_tokenizer_unchanged(tok_ckpt, out);
  ckpt::save(out, run_path(cfg, "instruct"));
  for (int h : bank.holdout_ids()) tmpl.push_back(h);
  detail::evaluate_into(metrics, m, sets, st.step, tmpl, cfg.eval.max_new, bank, progress);
  return out;
}

// ---------------------------------------------------------------------------
// Codebook-size sweep

struct StudyRow {
  vq::CodebookReport report;
  double initial_loss = 0, final_loss = 0, seconds = 0;
};

/// Trains (or, with `train == false`, reloads) one tokenizer per size under
/// out_dir/k<K>/ and reports reconstruction on the test split.
inline std::vector<StudyRow> codebook_study(const RunConfig& cfg, const std::vector<int>& sizes, const fs::path& out_dir,
                                            bool train, const Progress& progress = {}) {
  if (sizes.empty()) throw ConfigError("codebook-study: no sizes given");
  const auto man = open_corpus(cfg);
  std::vector<motion::MotionSequence> raw;
  for (const auto& e : man.in_split(data::Split::train)) raw.push_back(motion::read_motion(man.motion_file(e)));
  if (raw.empty()) throw ConfigError("codebook-study: the corpus has no train split");
  const auto stats = motion::compute_stats(raw);
  std::vector<motion::MotionSequence> train_set, eval_set;
  for (const auto& s : raw) train_set.push_back(motion::normalize(s, stats));
  auto eval_entries = man.in_split(data::Split::test);
  if (eval_entries.empty()) eval_entries = man.in_split(data::Split::train);
  for (const auto& e : eval_entries) eval_set.push_back(load_normalized(man.motion_file(e), stats));

  std::vector<StudyRow> rows;
  for (int K : sizes) {
    auto tc = cfg.tokenizer;
    tc.codebook_size = K;
    const auto dir = out_dir / ("k" + std::to_string(K));
    Model m;
    m.stats = stats;
    StudyRow row;
    if (train) {
      m.tokenizer = vq::Tokenizer(tc);
      const auto t0 = std::chrono::steady_clock::now();
      const auto rep = vq::train_tokenizer(m.tokenizer, train_set, [&](const vq::StepLog& s) {
        if (progress && (s.step + 1) % cfg.scheme.log_every == 0)
          progress("K=" + std::to_string(K) + " step " + std::to_string(s.step + 1) + " loss " + std::to_string(s.total));
      });
      row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      row.initial_loss = rep.initial_loss;
      row.final_loss = rep.final_loss;
      auto c = make_checkpoint(m, "tokenizer", cfg, {});
      c.extra["initial_loss"] = rep.initial_loss;
      c.extra["final_loss"] = rep.final_loss;
      ckpt::save(c, dir);
    } else {
      const auto c = detail::require(dir, "codebook-study K=" + std::to_string(K), "codebook-study");
      m = model_from_checkpoint(c);
      if (get_stats(c).id != stats.id) throw FormatError(dir.string() + ": stats do not match the corpus");
      row.initial_loss = c.extra.value("initial_loss", 0.0);
      row.final_loss = c.extra.value("final_loss", 0.0);
    }
    row.report = vq::codebook_report(m.tokenizer, eval_set, stats);
    rows.push_back(row);
  }

  std::string csv = "K,fid,mpjpe,pampjpe,perplexity,active_codes,initial_loss,final_loss\n";
  nlohmann::ordered_json j;
  j["config"] = config::to_json(cfg);
  j["eval_split"] = man.in_split(data::Split::test).empty() ? "train" : "test";
  j["rows"] = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    std::ostringstream line;
    line.precision(9);
    line << r.report.codebook_size << ',' << r.report.fid << ',' << r.report.mpjpe << ',' << r.report.pampjpe << ','
         << r.report.perplexity << ',' << r.report.active_codes << ',' << r.initial_loss << ',' << r.final_loss << '\n';
    csv += line.str();
    auto row = r.report.to_json();
    row["initial_loss"] = r.initial_loss;
    row["final_loss"] = r.final_loss;
    j["rows"].push_back(row);
  }
  io::write_file(out_dir / "codebook_study.csv", csv);
  io::write_file(out_dir / "codebook_study.json", j.dump(2) + "\n");
  return rows;
}

}  // namespace lslm::schemes
