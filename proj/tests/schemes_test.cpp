// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <unistd.h>

#include "lslm/schemes.hpp"

using namespace lslm;
using namespace lslm::schemes;
namespace fs = std::filesystem;

namespace {

fs::path root() { return fs::temp_directory_path() / ("lslm_schemes_" + std::to_string(::getpid())); }

fs::path corpus_dir() {
  static const fs::path dir = [] {
    const auto d = root() / "corpus";
    fs::remove_all(d);
    motion::SynthConfig sc;
    sc.samples = 20;
    sc.gesture_vocab = 4;
    sc.seed = 11;
    data::write_synth_corpus(sc, d);
    return d;
  }();
  return dir;
}

nlohmann::json tiny_json(const std::string& run) {
  return {{"seed", 5},
          {"corpus", (corpus_dir() / "manifest.jsonl").string()},
          {"run_dir", (root() / run).string()},
          {"tokenizer",
           {{"codebook_size", 16}, {"code_dim", 8}, {"width", 16}, {"res_blocks", 0}, {"steps", 6}, {"batch", 2},
            {"window", 16}}},
          {"lm", {{"d_model", 16}, {"n_layers", 1}, {"n_heads", 2}}},
          {"scheme", {{"pretrain_steps", 4}, {"instruct_steps", 3}, {"batch", 2}, {"log_every", 2}, {"lr_mlp", 1e-2}, {"lr_llm", 1e-2}}},
          {"eval", {{"splits", {"val"}}, {"max_new", 4}}}};
}

config::RunConfig tiny(const std::string& run) {
  fs::remove_all(root() / run);
  return config::run_config_from_json(tiny_json(run));
}

/// Shares one stage-1 result between runs.
config::RunConfig with_tokenizer(const std::string& run) {
  static const fs::path tok = [] {
    auto c = tiny("stage1");
    run_stage1(c);
    return root() / "stage1" / "tokenizer";
  }();
  auto c = tiny(run);
  fs::create_directories(c.run_dir);
  fs::copy(tok, fs::path(c.run_dir) / "tokenizer", fs::copy_options::recursive);
  return c;
}

std::set<std::string> changed_groups(const fs::path& a, const fs::path& b) {
  std::set<std::string> out;
  for (const auto& n : ckpt::changed_tensors(ckpt::load(a), ckpt::load(b))) out.insert(group_of(n));
  return out;
}

std::set<std::string> tensors_in(const ckpt::Checkpoint& c, const std::set<std::string>& groups) {
  std::set<std::string> out;
  for (const auto& t : c.tensors)
    if (groups.count(group_of(t.name))) out.insert(t.name);
  return out;
}

std::vector<nlohmann::json> read_jsonl(const fs::path& p) {
  std::vector<nlohmann::json> out;
  std::istringstream in(io::read_file(p));
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(nlohmann::json::parse(line));
  return out;
}

}  // namespace

TEST(RunConfig, DefaultsRoundTripAndUnknownKeys) {
  const auto c = config::run_config_from_json(nlohmann::json::object());
  EXPECT_EQ(c.tokenizer.lr, vq::TokenizerConfig::desk().lr);
  EXPECT_EQ(c.lm.d_model, 256);
  EXPECT_EQ(c.scheme.lr_mlp, 2 * c.scheme.lr_llm);
  EXPECT_EQ(config::to_json(config::run_config_from_json(config::to_json(c))), config::to_json(c));
  const auto seeded = config::run_config_from_json({{"seed", 9}});
  EXPECT_EQ(seeded.tokenizer.seed, 9u);
  EXPECT_EQ(seeded.lm.seed, 9u);
  EXPECT_THROW(config::run_config_from_json({{"sed", 1}}), ConfigError);
  EXPECT_THROW(config::run_config_from_json({{"scheme", {{"pretrain_step", 1}}}}), ConfigError);
  EXPECT_THROW(config::run_config_from_json({{"tokenizer", {{"K", 1}}}}), ConfigError);
  EXPECT_THROW(config::run_config_from_json({{"lm", {{"vocab", 10}}}}), ConfigError);
  EXPECT_THROW(config::run_config_from_json({{"scheme", {{"pretrain", "frozen"}}}}), ConfigError);
  EXPECT_THROW(config::run_config_from_json({{"lm", {{"max_length", 512}}}}), ConfigError);
  EXPECT_THROW(config::run_config_from_json({{"eval", {{"splits", {"dev"}}}}}), ConfigError);
}

TEST(SynthData, SplitsDigestsAndGuards) {
  const auto a = root() / "synth_a", b = root() / "synth_b";
  fs::remove_all(a);
  fs::remove_all(b);
  motion::SynthConfig sc;
  sc.samples = 30;
  sc.seed = 4;
  const auto es = data::write_synth_corpus(sc, a);
  int n[3] = {0, 0, 0};
  for (const auto& e : es) ++n[static_cast<int>(e.split)];
  EXPECT_EQ(n[0], 24);
  EXPECT_EQ(n[1], 3);
  EXPECT_EQ(n[2], 3);
  data::write_synth_corpus(sc, b);
  EXPECT_EQ(io::file_digest(a / "manifest.jsonl"), io::file_digest(b / "manifest.jsonl"));
  for (const auto& e : es) EXPECT_EQ(io::file_digest(a / e.motion_path), io::file_digest(b / e.motion_path));
  EXPECT_THROW(data::write_synth_corpus(sc, a), ConfigError);
  EXPECT_NO_THROW(data::write_synth_corpus(sc, a, true));
  sc.gesture_vocab = 1;
  EXPECT_THROW(data::write_synth_corpus(sc, root() / "synth_c"), ConfigError);
}

TEST(Stages, OrderingIsEnforced) {
  const auto c = tiny("order");
  EXPECT_THROW(run_pretrain(c), StageOrderError);
  EXPECT_THROW(run_instruct(c), StageOrderError);
  const auto d = with_tokenizer("order2");
  EXPECT_THROW(run_instruct(d), StageOrderError);
}

TEST(Stages, TokenizerCheckpointReloadsAndReproducesIndices) {
  with_tokenizer("warm");
  const auto dir = root() / "stage1";
  const auto c = ckpt::load(dir / "tokenizer");
  EXPECT_EQ(c.stage, "tokenizer");
  EXPECT_EQ(c.freeze, (std::vector<std::pair<std::string, bool>>{{"tokenizer", true}}));
  const auto m = model_from_checkpoint(c);
  ckpt::save(make_checkpoint(m, c.stage, config::run_config_from_json(c.config), {}), root() / "resave");
  // extra carries training losses that a re-export does not know
  auto a = c;
  a.extra.erase("initial_loss");
  a.extra.erase("final_loss");
  EXPECT_TRUE(ckpt::changed_tensors(a, ckpt::load(root() / "resave")).empty());

  const auto man = data::read_manifest(corpus_dir() / "manifest.jsonl");
  const auto rows = read_jsonl(dir / "tokens.jsonl");
  ASSERT_EQ(rows.size(), man.entries.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto tc = m.tokenizer.tokenize(load_normalized(man.motion_file(man.entries[i]), m.stats));
    EXPECT_EQ(rows[i]["id"], man.entries[i].id);
    EXPECT_EQ(rows[i]["indices"].get<std::vector<std::int64_t>>(), tc.indices);
  }
}

TEST(Stages, PretrainSchemesChangeExactlyTheirGroups) {
  for (auto scheme : {Pretrain::mlp, Pretrain::joint, Pretrain::staged}) {
    auto c = with_tokenizer(std::string("pre_") + config::name(scheme));
    c.scheme.pretrain = scheme;
    const auto out = run_pretrain(c);
    const fs::path run = c.run_dir;
    const auto init = ckpt::load(run / "pretrain_init");
    auto expect = trainable(scheme, 0);
    for (const auto& g : trainable(scheme, 1)) expect.insert(g);
    EXPECT_EQ(changed_groups(run / "pretrain_init", run / "pretrain"), expect) << config::name(scheme);
    // every tensor of a trainable group moved, not just some
    EXPECT_EQ(ckpt::changed_tensors(init, out), tensors_in(init, expect)) << config::name(scheme);
    const auto vs_stage1 = changed_groups(run / "tokenizer", run / "pretrain");
    EXPECT_EQ(vs_stage1.count("tokenizer") + vs_stage1.count("stats"), 0u);
    if (scheme == Pretrain::staged) {
      EXPECT_EQ(changed_groups(run / "pretrain_init", run / "pretrain_a"), (std::set<std::string>{"mlp"}));
      EXPECT_EQ(changed_groups(run / "pretrain_a", run / "pretrain_b"), backbone_groups());
      EXPECT_TRUE(changed_groups(run / "pretrain_b", run / "pretrain").empty());
    }
    const auto last = trainable(scheme, 1);
    for (const auto& [g, frozen] : out.freeze) EXPECT_EQ(frozen, last.count(g) == 0) << g;
    EXPECT_EQ(ckpt::load(run / "pretrain").freeze, out.freeze);
  }
}

TEST(Stages, InstructSchemesChangeExactlyTheirGroups) {
  for (auto scheme : {Instruct::llm, Instruct::joint}) {
    auto c = with_tokenizer(std::string("ins_") + config::name(scheme));
    c.scheme.pretrain = Pretrain::mlp;
    c.scheme.instruct = scheme;
    run_pretrain(c);
    run_instruct(c);
    const fs::path run = c.run_dir;
    EXPECT_EQ(changed_groups(run / "pretrain", run / "instruct"), trainable(scheme)) << config::name(scheme);
  }
}

TEST(Stages, MetricsRowsCarryEveryField) {
  auto c = with_tokenizer("metrics");
  run_pretrain(c);
  run_instruct(c);
  const auto rows = read_jsonl(fs::path(c.run_dir) / "metrics.jsonl");
  // pretrain: before + after; instruct: before + after with template 0 and two holdouts
  ASSERT_EQ(rows.size(), 2u + 1u + 3u);
  for (const auto& r : rows)
    for (const char* k : {"stage", "step", "split", "bleu1", "bleu4", "rougeL", "cider", "wer", "ins", "del", "sub"})
      EXPECT_TRUE(r.contains(k)) << k;
  EXPECT_EQ(rows.front()["stage"], "pretrain");
  EXPECT_EQ(rows.back()["stage"], "instruct");
  EXPECT_EQ(rows.back()["step"], 3);
  // rerunning a stage replaces its own rows
  run_instruct(c);
  EXPECT_EQ(read_jsonl(fs::path(c.run_dir) / "metrics.jsonl").size(), rows.size());
}

TEST(Stages, RepeatedRunsAreByteIdentical) {
  std::vector<std::string> digests[2];
  for (int k = 0; k < 2; ++k) {
    auto c = tiny("det");
    c.scheme.pretrain = Pretrain::staged;
    run_stage1(c);
    run_pretrain(c);
    run_instruct(c);
    const fs::path run = c.run_dir;
    for (const char* sub : {"tokenizer", "pretrain_init", "pretrain_a", "pretrain_b", "pretrain", "instruct"})
      for (const char* f : {ckpt::kIndexFile, ckpt::kBlobFile}) digests[k].push_back(io::file_digest(run / sub / f));
    for (const char* f : {"metrics.jsonl", "train_log.jsonl", "tokens.jsonl", "tokenizer_report.json", "config.json"})
      digests[k].push_back(io::file_digest(run / f));
  }
  EXPECT_EQ(digests[0], digests[1]);
}

TEST(Stages, EmptyOutputModelScoresZero) {
  auto c = with_tokenizer("empty");
  run_pretrain(c);
  auto m = load_model(fs::path(c.run_dir) / "pretrain");
  m.lm.param("llm.head.b").mutable_data()[data::TextVocab::kEos] = 1e4f;
  const auto man = data::read_manifest(c.corpus);
  const auto pairs = in_split(load_pairs(m, man), data::Split::val);
  const auto r = evaluate_pairs(m, pairs, templates::TemplateBank::kPretrain, 8);
  EXPECT_EQ(r.bleu1, 0.0);
  EXPECT_EQ(r.wer, 100.0);
  EXPECT_EQ(r.del_total, static_cast<long>(r.ref_words));
  EXPECT_EQ(r.ins_total + r.sub_total, 0);
}

TEST(Freeze, FrozenGroupsKeepParametersAndState) {
  Model m;
  lm::LMConfig lc;
  lc.vocab = 9;
  lc.d_model = 8;
  lc.n_layers = 1;
  lc.n_heads = 2;
  m.lm = lm::LanguageModel(lc);
  m.phi = align::AlignmentMLP(4, 8, 2);
  m.has_backbone = true;
  config::SchemeSpec spec;
  spec.lr_mlp = spec.lr_llm = 1e-2;
  StageState st(m, spec);
  st.set_trainable({"mlp"});
  EXPECT_EQ(st.trainable(), (std::set<std::string>{"mlp"}));
  auto snapshot = [&] {
    std::vector<std::vector<float>> v;
    for (const auto& [_, t] : m.lm.params()) v.push_back(t.to_vector());
    return v;
  };
  const auto before = snapshot();
  const auto phi_before = m.phi.param("mlp.fc1.w").to_vector();
  Rng rng(1);
  auto step = [&] {
    std::vector<float> z(12);
    for (auto& x : z) x = static_cast<float>(rng.normal());
    const auto e = m.phi.project(Tensorf::from({3, 4}, z));
    const auto logits = m.lm.forward(reshape(e, {1, 3, 8}));
    st.optimizer().zero_grad();
    backward(lm::lm_loss(logits, std::vector<std::int64_t>{5, 6, 7}, std::vector<std::uint8_t>{1, 1, 1}));
    st.optimizer().step();
  };
  for (int i = 0; i < 100; ++i) step();
  EXPECT_EQ(snapshot(), before);
  for (const auto& g : backbone_groups())
    for (const auto& s : st.optimizer().state(g)) {
      EXPECT_EQ(s.step, 0);
      EXPECT_TRUE(s.m.empty());
    }
  EXPECT_NE(m.phi.param("mlp.fc1.w").to_vector(), phi_before);
  st.unfreeze({"llm.blocks"});
  step();
  const auto after = snapshot();
  for (std::size_t i = 0; i < after.size(); ++i) {
    const auto g = group_of(m.lm.params()[i].first);
    if (g == "llm.blocks") EXPECT_NE(after[i], before[i]) << m.lm.params()[i].first;
    else EXPECT_EQ(after[i], before[i]) << m.lm.params()[i].first;
  }
  EXPECT_THROW(st.unfreeze({"tokenizer"}), StageOrderError);
  EXPECT_THROW(st.freeze({"llm.nothing"}), ConfigError);
}
