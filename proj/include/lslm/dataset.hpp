// SPDX-License-Identifier: Apache-2.0
//
// Manifests, seeded train/val/test splitting, the word vocabulary, and
// padded batches.
#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "lslm/errors.hpp"
#include "lslm/io.hpp"
#include "lslm/motion.hpp"
#include "lslm/rng.hpp"

namespace lslm::data {

inline constexpr int kMaxTokens = 250;

enum class Split { train, val, test, none };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    default: return "";
  }
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  if (s.empty()) return Split::none;
  throw ConfigError("unknown split '" + s + "'");
}

struct ManifestEntry {
  std::string id;
  std::string motion_path;  // relative to the manifest directory
  std::string text;
  Split split = Split::none;
};

struct Manifest {
  std::filesystem::path root;
  std::vector<ManifestEntry> entries;

  std::filesystem::path motion_file(const ManifestEntry& e) const { return root / e.motion_path; }

  std::vector<ManifestEntry> in_split(Split s) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries)
      if (e.split == s) out.push_back(e);
    return out;
  }
};

inline std::string to_jsonl(const std::vector<ManifestEntry>& entries) {
  std::string out;
  for (const auto& e : entries) {
    nlohmann::ordered_json j;
    j["id"] = e.id;
    j["motion_path"] = e.motion_path;
    j["text"] = e.text;
    j["split"] = split_name(e.split);
    out += j.dump() + "\n";
  }
  return out;
}

inline void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
  io::write_file(path, to_jsonl(entries));
}

inline Manifest read_manifest(const std::filesystem::path& path) {
  Manifest m;
  m.root = path.parent_path();
  std::istringstream in(io::read_file(path));
  std::string line;
  std::set<std::string> ids;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ManifestEntry e;
      e.id = j.at("id").get<std::string>();
      e.motion_path = j.at("motion_path").get<std::string>();
      e.text = j.at("text").get<std::string>();
      e.split = parse_split(j.value("split", std::string{}));
      if (!ids.insert(e.id).second) throw FormatError("duplicate id '" + e.id + "'");
      m.entries.push_back(std::move(e));
    } catch (const nlohmann::json::exception& ex) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
    }
  }
  return m;
}

/// Split sizes for n entries: floor(0.1 n) each for val and test, the rest train.
struct SplitSizes {
  std::size_t train, val, test;
};

inline SplitSizes split_sizes(std::size_t n) {
  const std::size_t tenth = n / 10;
  return {n - 2 * tenth, tenth, tenth};
}

/// Seeded shuffle, then the first 80% train, next 10% val, last 10% test.
inline std::vector<ManifestEntry> assign_splits(std::vector<ManifestEntry> entries, std::uint64_t seed) {
  if (entries.size() < 10) throw ConfigError("split: need at least 10 entries, got " + std::to_string(entries.size()));
  std::vector<std::size_t> order(entries.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(mix_seed(seed, 0x5117));
  rng.shuffle(order);
  const auto sz = split_sizes(entries.size());
  for (std::size_t k = 0; k < order.size(); ++k)
    entries[order[k]].split = k < sz.train ? Split::train : k < sz.train + sz.val ? Split::val : Split::test;
  return entries;
}

// ---------------------------------------------------------------------------
// Vocabulary

inline std::vector<std::string> words(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string w;
  while (in >> w) {
    std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    out.push_back(w);
  }
  return out;
}

inline constexpr const char* kMotionToken = "<MOTION>";

class TextVocab {
 public:
  static constexpr int kPad = 0, kBos = 1, kEos = 2, kUnk = 3, kMotion = 4;
  static constexpr int kSpecials = 5;

  TextVocab() : tokens_{"<PAD>", "<BOS>", "<EOS>", "<UNK>", kMotionToken} { reindex(); }

  /// Dense ids: specials first, then words in sorted order.
  static TextVocab from_words(const std::set<std::string>& ws) {
    TextVocab v;
    for (const auto& w : ws)
      if (!v.index_.count(w)) v.tokens_.push_back(w);
    v.reindex();
    return v;
  }

  int size() const { return static_cast<int>(tokens_.size()); }
  int id(const std::string& w) const {
    auto it = index_.find(w);
    return it == index_.end() ? kUnk : it->second;
  }
  bool contains(const std::string& w) const { return index_.count(w) > 0; }
  const std::string& token(int id) const {
    if (id < 0 || id >= size()) throw Error("vocab: id " + std::to_string(id) + " out of range");
    return tokens_[static_cast<std::size_t>(id)];
  }
  const std::vector<std::string>& tokens() const { return tokens_; }

  /// Lowercased whitespace tokens; "<motion>" maps to the placeholder id.
  std::vector<std::int64_t> encode(const std::string& text) const {
    std::vector<std::int64_t> out;
    for (const auto& w : words(text)) out.push_back(w == "<motion>" ? kMotion : id(w));
    return out;
  }

  /// Joins word tokens, dropping specials.
  std::string decode(const std::vector<std::int64_t>& ids) const {
    std::string out;
    for (auto i : ids) {
      if (i < kSpecials && i != kUnk) continue;
      if (!out.empty()) out += ' ';
      out += token(static_cast<int>(i));
    }
    return out;
  }

  std::string to_json() const {
    nlohmann::ordered_json j;
    j["specials"] = {{"pad", kPad}, {"bos", kBos}, {"eos", kEos}, {"unk", kUnk}, {"motion", kMotion}};
    nlohmann::ordered_json map = nlohmann::ordered_json::object();
    for (int i = 0; i < size(); ++i) map[tokens_[static_cast<std::size_t>(i)]] = i;
    j["tokens"] = map;
    return j.dump(1) + "\n";
  }

  static TextVocab from_json(const std::string& text) {
    TextVocab v;
    try {
      const auto j = nlohmann::json::parse(text);
      const auto& map = j.at("tokens");
      std::vector<std::string> toks(map.size());
      for (auto it = map.begin(); it != map.end(); ++it) {
        const auto i = it.value().get<std::size_t>();
        if (i >= toks.size() || !toks[i].empty()) throw FormatError("vocab: ids are not dense");
        toks[i] = it.key();
      }
      v.tokens_ = std::move(toks);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("vocab: ") + e.what());
    }
    if (v.tokens_.size() < kSpecials || v.tokens_[kMotion] != kMotionToken) throw FormatError("vocab: bad specials block");
    v.reindex();
    return v;
  }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_[tokens_[i]] = static_cast<int>(i);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

/// Words of the train-split captions with count >= min_count, plus every
/// word of `extra_texts` (the fixed instruction bank).
inline TextVocab build_vocab(const std::vector<ManifestEntry>& entries, int min_count,
                             const std::vector<std::string>& extra_texts = {}) {
  std::map<std::string, int> counts;
  bool any = false;
  for (const auto& e : entries) {
    if (e.split != Split::train) continue;
    any = true;
    for (const auto& w : words(e.text)) ++counts[w];
  }
  if (!any) throw ConfigError("build_vocab: empty train split");
  std::set<std::string> keep;
  for (const auto& [w, c] : counts)
    if (c >= min_count) keep.insert(w);
  for (const auto& t : extra_texts)
    for (const auto& w : words(t))
      if (w != "<motion>") keep.insert(w);
  return TextVocab::from_words(keep);
}

// ---------------------------------------------------------------------------
// Batches

struct Batch {
  std::vector<std::string> ids;
  int max_frames = 0;
  std::vector<float> motion;                 // B x max_frames x 623, zero padded
  std::vector<std::uint8_t> frame_mask;      // B x max_frames
  std::vector<int> frames;                   // per sample
  int max_target = 0;
  std::vector<std::int64_t> targets;         // B x max_target, PAD padded, caption + EOS
  std::vector<std::uint8_t> target_mask;     // B x max_target
  std::vector<std::vector<std::int64_t>> prompts;

  std::size_t size() const { return ids.size(); }
};

struct BatchOptions {
  int batch_size = 8;
  std::uint64_t seed = 0;
  int epoch = 0;
  int downsample = 4;  // latent rows per motion row, for the length budget
  int max_tokens = kMaxTokens;
};

/// Loads a feature sequence for an entry.
using MotionLoader = std::function<motion::MotionSequence(const ManifestEntry&)>;
/// Renders prompt ids for an entry (one MOTION placeholder).
using PromptFn = std::function<std::vector<std::int64_t>(const ManifestEntry&)>;

struct BatchStream {
  std::vector<Batch> batches;
  int skipped_over_length = 0;
};

inline int latent_length(int rows, int q) { return (rows + q - 1) / q; }

/// One epoch over `entries` in an order fixed by (seed, epoch).  Samples
/// whose prompt (with the placeholder expanded to the latent length) plus
/// target exceed max_tokens are skipped and counted.
inline BatchStream iterate_batches(const std::vector<ManifestEntry>& entries, const TextVocab& vocab,
                                   const BatchOptions& opt, const MotionLoader& load, const PromptFn& prompt) {
  if (opt.batch_size < 1) throw ConfigError("batch size must be positive");
  std::vector<std::size_t> order(entries.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(mix_seed(opt.seed, static_cast<std::uint64_t>(opt.epoch)));
  rng.shuffle(order);

  BatchStream out;
  struct Item {
    std::string id;
    motion::MotionSequence seq;
    std::vector<std::int64_t> target, prompt;
  };
  std::vector<Item> pending;
  auto flush = [&] {
    if (pending.empty()) return;
    Batch b;
    for (const auto& it : pending) {
      b.max_frames = std::max(b.max_frames, it.seq.rows);
      b.max_target = std::max(b.max_target, static_cast<int>(it.target.size()));
    }
    const std::size_t B = pending.size();
    b.motion.assign(B * b.max_frames * motion::kFeatureDim, 0.0f);
    b.frame_mask.assign(B * b.max_frames, 0);
    b.targets.assign(B * b.max_target, TextVocab::kPad);
    b.target_mask.assign(B * b.max_target, 0);
    for (std::size_t i = 0; i < B; ++i) {
      auto& it = pending[i];
      std::copy(it.seq.features.begin(), it.seq.features.end(),
                b.motion.begin() + static_cast<std::ptrdiff_t>(i * b.max_frames * motion::kFeatureDim));
      std::fill_n(b.frame_mask.begin() + static_cast<std::ptrdiff_t>(i * b.max_frames), it.seq.rows, 1);
      std::copy(it.target.begin(), it.target.end(), b.targets.begin() + static_cast<std::ptrdiff_t>(i * b.max_target));
      std::fill_n(b.target_mask.begin() + static_cast<std::ptrdiff_t>(i * b.max_target), it.target.size(), 1);
      b.ids.push_back(std::move(it.id));
      b.frames.push_back(it.seq.rows);
      b.prompts.push_back(std::move(it.prompt));
    }
    out.batches.push_back(std::move(b));
    pending.clear();
  };

  for (std::size_t k : order) {
    const auto& e = entries[k];
    Item it;
    it.id = e.id;
    it.seq = load(e);
    it.target = vocab.encode(e.text);
    it.target.push_back(TextVocab::kEos);
    it.prompt = prompt(e);
    const auto motions = std::count(it.prompt.begin(), it.prompt.end(), TextVocab::kMotion);
    if (motions != 1) throw Error("prompt for '" + e.id + "' must hold exactly one motion placeholder");
    const auto total = static_cast<int>(it.prompt.size()) - 1 + latent_length(it.seq.rows, opt.downsample) +
                       static_cast<int>(it.target.size());
    if (total > opt.max_tokens) {
      ++out.skipped_over_length;
      continue;
    }
    pending.push_back(std::move(it));
    if (static_cast<int>(pending.size()) == opt.batch_size) flush();
  }
  flush();
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpus on disk

/// Writes manifest.jsonl, motions/<id>.{bin,json} (unnormalized features)
/// and synth.json under `out`.  A non-empty `out` is refused unless `force`.
inline std::vector<ManifestEntry> write_synth_corpus(const motion::SynthConfig& cfg, const std::filesystem::path& out,
                                                     bool force = false) {
  namespace fs = std::filesystem;
  if (cfg.gesture_vocab < 2) throw ConfigError("synth-data: --gesture-vocab must be at least 2 (one gesture is a degenerate corpus)");
  if (fs::exists(out) && !fs::is_empty(out)) {
    if (!force) throw ConfigError("synth-data: output directory " + out.string() + " is not empty (use --force)");
    fs::remove_all(out / "motions");
    fs::remove(out / "manifest.jsonl");
    fs::remove(out / "synth.json");
  }
  const auto corpus = motion::synth_corpus(cfg);
  std::vector<ManifestEntry> entries;
  const int width = std::max<int>(4, static_cast<int>(std::to_string(cfg.samples).size()));
  for (std::size_t i = 0; i < corpus.samples.size(); ++i) {
    std::string num = std::to_string(i);
    const std::string id = "s" + std::string(static_cast<std::size_t>(width) - std::min<std::size_t>(num.size(), width), '0') + num;
    const std::string rel = "motions/" + id + ".bin";
    motion::write_motion(out / rel, id, motion::extract_features(corpus.samples[i].clip));
    entries.push_back({id, rel, corpus.samples[i].text, Split::none});
  }
  entries = assign_splits(std::move(entries), cfg.seed);
  write_manifest(out / "manifest.jsonl", entries);
  nlohmann::ordered_json j;
  j["seed"] = cfg.seed;
  j["samples"] = cfg.samples;
  j["gesture_vocab"] = cfg.gesture_vocab;
  j["min_words"] = cfg.min_words;
  j["max_words"] = cfg.max_words;
  j["motif_frames"] = cfg.motif_frames;
  j["transition_frames"] = cfg.transition_frames;
  j["vocabulary"] = corpus.vocabulary;
  j["feature_layout"] = motion::layout::kTag;
  io::write_file(out / "synth.json", j.dump(2) + "\n");
  return entries;
}

}  // namespace lslm::data
