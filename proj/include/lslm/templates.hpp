// SPDX-License-Identifier: Apache-2.0
//
// Instruction template bank: a bare pretraining frame plus instruction
// variants, each holding one motion placeholder.
#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "lslm/dataset.hpp"
#include "lslm/errors.hpp"
#include "lslm/io.hpp"
#include "lslm/rng.hpp"

namespace lslm::templates {

inline constexpr const char* kMotionPlaceholder = "<Motion_Placeholder>";
inline constexpr const char* kCaptionPlaceholder = "<Caption_Placeholder>";

struct Instruction {
  int id = 0;
  std::string text;
  bool holdout = false;
  std::string origin;
};

struct Rendered {
  std::string prompt;
  std::string target;
};

inline std::size_t count_of(const std::string& s, const std::string& needle) {
  std::size_t n = 0;
  for (auto p = s.find(needle); p != std::string::npos; p = s.find(needle, p + needle.size())) ++n;
  return n;
}

inline std::string replace_all(std::string s, const std::string& from, const std::string& to) {
  for (auto p = s.find(from); p != std::string::npos; p = s.find(from, p + to.size())) s.replace(p, from.size(), to);
  return s;
}

class TemplateBank {
 public:
  static constexpr int kPretrain = -1;

  TemplateBank() = default;
  TemplateBank(std::string pretrain_input, std::string pretrain_output, std::vector<Instruction> instructions)
      : pretrain_input_(std::move(pretrain_input)),
        pretrain_output_(std::move(pretrain_output)),
        instructions_(std::move(instructions)) {
    validate();
  }

  static TemplateBank from_json(const std::string& text) {
    try {
      const auto j = nlohmann::json::parse(text);
      std::vector<Instruction> ins;
      for (const auto& e : j.at("instructions"))
        ins.push_back({e.at("id").get<int>(), e.at("text").get<std::string>(), e.at("holdout").get<bool>(),
                       e.value("origin", std::string{})});
      return TemplateBank(j.at("pretrain").at("input").get<std::string>(),
                          j.at("pretrain").at("output").get<std::string>(), std::move(ins));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("templates: ") + e.what());
    }
  }

  static TemplateBank load(const std::filesystem::path& path) { return from_json(io::read_file(path)); }

  /// The bank shipped with the library.
  static TemplateBank standard() { return load(std::filesystem::path(LSLM_DATA_DIR) / "templates.json"); }

  std::string to_json() const {
    nlohmann::ordered_json j;
    j["pretrain"] = {{"input", pretrain_input_}, {"output", pretrain_output_}};
    j["instructions"] = nlohmann::ordered_json::array();
    for (const auto& i : instructions_)
      j["instructions"].push_back({{"id", i.id}, {"text", i.text}, {"holdout", i.holdout}, {"origin", i.origin}});
    return j.dump(2) + "\n";
  }

  const std::vector<Instruction>& instructions() const { return instructions_; }
  std::size_t size() const { return instructions_.size(); }

  const Instruction& at(int id) const {
    for (const auto& i : instructions_)
      if (i.id == id) return i;
    throw ConfigError("templates: unknown template id " + std::to_string(id));
  }

  std::vector<int> holdout_ids() const {
    std::vector<int> out;
    for (const auto& i : instructions_)
      if (i.holdout) out.push_back(i.id);
    return out;
  }

  std::vector<int> training_ids() const {
    std::vector<int> out;
    for (const auto& i : instructions_)
      if (!i.holdout) out.push_back(i.id);
    return out;
  }

  /// Uniform over the non-holdout templates.
  int sample(Rng& rng) const {
    const auto ids = training_ids();
    if (ids.empty()) throw ConfigError("templates: no trainable templates");
    return ids[rng.index(ids.size())];
  }

  /// Prompt text with the placeholder written as the reserved token, and
  /// the caption verbatim as target.  `kPretrain` selects the bare frame.
  Rendered render(int id, const std::string& caption) const {
    if (caption.find(kMotionPlaceholder) != std::string::npos || caption.find(kCaptionPlaceholder) != std::string::npos ||
        contains_motion_token(caption))
      throw ConfigError("templates: caption contains a reserved placeholder");
    const std::string& input = id == kPretrain ? pretrain_input_ : at(id).text;
    Rendered r;
    r.prompt = replace_all(input, kMotionPlaceholder, data::kMotionToken);
    r.target = replace_all(pretrain_output_, kCaptionPlaceholder, caption);
    return r;
  }

  /// Every instruction text with the placeholder removed (vocabulary source).
  std::vector<std::string> texts() const {
    std::vector<std::string> out;
    for (const auto& i : instructions_) out.push_back(replace_all(i.text, kMotionPlaceholder, " "));
    return out;
  }

 private:
  static bool contains_motion_token(const std::string& caption) {
    for (const auto& w : data::words(caption))
      if (w == "<motion>") return true;
    return false;
  }

  void validate() const {
    if (count_of(pretrain_input_, kMotionPlaceholder) != 1)
      throw FormatError("templates: pretraining input needs exactly one motion placeholder");
    if (count_of(pretrain_output_, kCaptionPlaceholder) != 1)
      throw FormatError("templates: pretraining output needs exactly one caption placeholder");
    std::vector<int> seen;
    for (const auto& i : instructions_) {
      if (count_of(i.text, kMotionPlaceholder) != 1)
        throw FormatError("templates: template " + std::to_string(i.id) + " needs exactly one motion placeholder");
      if (count_of(i.text, kCaptionPlaceholder) != 0)
        throw FormatError("templates: template " + std::to_string(i.id) + " contains a caption placeholder");
      for (int s : seen)
        if (s == i.id) throw FormatError("templates: duplicate id " + std::to_string(i.id));
      seen.push_back(i.id);
    }
  }

  std::string pretrain_input_;
  std::string pretrain_output_;
  std::vector<Instruction> instructions_;
};

}  // namespace lslm::templates
