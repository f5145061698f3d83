// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint directories: index.json names every tensor with its shape,
// byte range in tensors.bin and SHA-256 digest; blobs are little-endian
// float32.  Saving a loaded checkpoint reproduces both files byte for byte.
#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "lslm/errors.hpp"
#include "lslm/io.hpp"
#include "lslm/optim.hpp"
#include "lslm/tensor.hpp"

namespace lslm::ckpt {

inline constexpr int kFormatVersion = 1;
inline constexpr const char* kIndexFile = "index.json";
inline constexpr const char* kBlobFile = "tensors.bin";

struct TensorRecord {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  std::string stage;
  std::vector<TensorRecord> tensors;
  std::vector<std::pair<std::string, bool>> freeze;  // group -> frozen
  nlohmann::ordered_json config = nlohmann::ordered_json::object();
  nlohmann::ordered_json extra = nlohmann::ordered_json::object();

  void put(const std::string& name, const Tensorf& t) {
    for (const auto& r : tensors)
      if (r.name == name) throw Error("checkpoint: duplicate tensor '" + name + "'");
    tensors.push_back({name, t.shape(), t.to_vector()});
  }

  void put_all(const NamedTensors<float>& ts, const std::string& prefix = "") {
    for (const auto& [n, t] : ts) put(prefix + n, t);
  }

  bool has(const std::string& name) const {
    for (const auto& r : tensors)
      if (r.name == name) return true;
    return false;
  }

  const TensorRecord& at(const std::string& name) const {
    for (const auto& r : tensors)
      if (r.name == name) return r;
    throw FormatError("checkpoint: missing tensor '" + name + "'");
  }

  /// Copies stored values into `t`; shapes must agree.
  void restore(const std::string& name, Tensorf& t) const {
    const auto& r = at(name);
    if (r.shape != t.shape())
      throw FormatError("checkpoint: tensor '" + name + "' has shape " + shape_str(r.shape) + ", model expects " +
                        shape_str(t.shape()));
    auto d = t.mutable_data();
    std::copy(r.values.begin(), r.values.end(), d.begin());
  }

  void restore_all(NamedTensors<float>& ts, const std::string& prefix = "") const {
    for (auto& [n, t] : ts) restore(prefix + n, t);
  }

  void set_frozen(const std::string& group, bool frozen) {
    for (auto& [g, f] : freeze)
      if (g == group) {
        f = frozen;
        return;
      }
    freeze.emplace_back(group, frozen);
  }
};

inline std::string index_json(const Checkpoint& c, const std::vector<std::string>& digests) {
  nlohmann::ordered_json j;
  j["format_version"] = kFormatVersion;
  j["stage"] = c.stage;
  j["tensors"] = nlohmann::ordered_json::array();
  std::size_t offset = 0;
  for (std::size_t i = 0; i < c.tensors.size(); ++i) {
    const auto& r = c.tensors[i];
    const std::size_t bytes = r.values.size() * 4;
    j["tensors"].push_back({{"name", r.name},
                            {"shape", r.shape},
                            {"dtype", "f32"},
                            {"file", kBlobFile},
                            {"offset", offset},
                            {"bytes", bytes},
                            {"digest", digests[i]}});
    offset += bytes;
  }
  j["freeze"] = nlohmann::ordered_json::object();
  for (const auto& [g, f] : c.freeze) j["freeze"][g] = f;
  j["config"] = c.config;
  j["extra"] = c.extra;
  return j.dump(2) + "\n";
}

inline void save(const Checkpoint& c, const std::filesystem::path& dir) {
  std::string blob;
  std::vector<std::string> digests;
  for (const auto& r : c.tensors) {
    if (static_cast<std::int64_t>(r.values.size()) != shape_numel(r.shape))
      throw Error("checkpoint: tensor '" + r.name + "' size does not match its shape");
    const auto bytes = io::encode_f32<float>(r.values);
    digests.push_back(io::sha256_hex(bytes));
    blob += bytes;
  }
  std::filesystem::create_directories(dir);
  io::write_file(dir / kBlobFile, blob);
  io::write_file(dir / kIndexFile, index_json(c, digests));
}

inline bool exists(const std::filesystem::path& dir) { return std::filesystem::exists(dir / kIndexFile); }

inline Checkpoint load(const std::filesystem::path& dir) {
  if (!ckpt::exists(dir)) throw FormatError("checkpoint: no " + std::string(kIndexFile) + " in " + dir.string());
  const auto blob = io::read_file(dir / kBlobFile);
  Checkpoint c;
  try {
    const auto j = nlohmann::ordered_json::parse(io::read_file(dir / kIndexFile));
    if (j.at("format_version").get<int>() != kFormatVersion)
      throw FormatError("checkpoint: unsupported format version " + j.at("format_version").dump());
    c.stage = j.at("stage").get<std::string>();
    std::size_t expect_offset = 0;
    for (const auto& t : j.at("tensors")) {
      TensorRecord r;
      r.name = t.at("name").get<std::string>();
      r.shape = t.at("shape").get<Shape>();
      if (t.at("dtype").get<std::string>() != "f32") throw FormatError("checkpoint: tensor '" + r.name + "' is not f32");
      const auto offset = t.at("offset").get<std::size_t>();
      const auto bytes = t.at("bytes").get<std::size_t>();
      if (offset != expect_offset || offset + bytes > blob.size() ||
          bytes != static_cast<std::size_t>(shape_numel(r.shape)) * 4)
        throw FormatError("checkpoint: tensor '" + r.name + "' has an inconsistent byte range");
      const std::string_view slice(blob.data() + offset, bytes);
      if (io::sha256_hex(slice) != t.at("digest").get<std::string>())
        throw FormatError("checkpoint: digest mismatch for tensor '" + r.name + "'");
      r.values = io::decode_f32(slice);
      c.tensors.push_back(std::move(r));
      expect_offset += bytes;
    }
    if (expect_offset != blob.size()) throw FormatError("checkpoint: trailing bytes in " + std::string(kBlobFile));
    for (auto it = j.at("freeze").begin(); it != j.at("freeze").end(); ++it) c.freeze.emplace_back(it.key(), it.value().get<bool>());
    c.config = j.at("config");
    c.extra = j.at("extra");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint " + dir.string() + ": " + e.what());
  }
  return c;
}

/// Names of tensors whose stored bytes differ (or exist on one side only).
inline std::set<std::string> changed_tensors(const Checkpoint& a, const Checkpoint& b) {
  std::map<std::string, const TensorRecord*> left;
  for (const auto& r : a.tensors) left[r.name] = &r;
  std::set<std::string> out;
  for (const auto& r : b.tensors) {
    auto it = left.find(r.name);
    if (it == left.end()) {
      out.insert(r.name);
      continue;
    }
    if (io::encode_f32<float>(it->second->values) != io::encode_f32<float>(r.values) || it->second->shape != r.shape)
      out.insert(r.name);
    left.erase(it);
  }
  for (const auto& [n, _] : left) out.insert(n);
  return out;
}

}  // namespace lslm::ckpt
