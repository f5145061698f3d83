// SPDX-License-Identifier: Apache-2.0
//
// 52-joint skeletal motion: the per-frame 623-channel feature vector,
// its inverse back to joint positions, z-score statistics, motion files,
// and a procedural gesture corpus.
//
// Coordinates are meters, y up; a character at rest faces +z with its left
// side on +x.  Velocities are per frame.
#pragma once

#include <Eigen/Geometry>
#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "lslm/errors.hpp"
#include "lslm/io.hpp"
#include "lslm/rng.hpp"

namespace lslm::motion {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline constexpr int kJoints = 52;
inline constexpr int kFeatureDim = 623;

/// Channel layout of one feature row.
namespace layout {
inline constexpr int kRootAngularVel = 0;   // 1: yaw change to next frame
inline constexpr int kRootLinearVel = 1;    // 2: ground-plane (x, z) in facing frame
inline constexpr int kRootHeight = 3;       // 1
inline constexpr int kLocalPositions = 4;   // 51 x 3: offset from rest, facing frame
inline constexpr int kLocalRotations = 157; // 51 x 6: continuous 6-D rotations
inline constexpr int kLocalVelocities = 463;// 52 x 3: facing frame
inline constexpr int kFootContacts = 619;   // 4: l-ankle, l-foot, r-ankle, r-foot
inline constexpr int kEnd = 623;
inline constexpr const char* kTag = "rv1-lv2-h1-pos153-rot306-vel156-contact4";
static_assert(kEnd == kFeatureDim);
static_assert(1 + 2 + 1 + 51 * 3 + 51 * 6 + 52 * 3 + 4 == kFeatureDim);
}  // namespace layout

inline constexpr double kContactThreshold = 0.02;  // m/frame
inline constexpr double kSynthFps = 20.0;

/// Body (22) plus two hands (15 each); the root is joint 0.
struct Skeleton {
  std::array<int, kJoints> parent{};
  std::array<Vec3, kJoints> offset{};  // rest offset from the parent joint
  std::array<const char*, kJoints> name{};
  double rest_root_height = 0.93;

  static const Skeleton& standard() {
    static const Skeleton s = build();
    return s;
  }

  /// Rest-pose position of each joint relative to the root.
  std::array<Vec3, kJoints> rest_relative() const {
    std::array<Vec3, kJoints> p{};
    p[0] = Vec3::Zero();
    for (int j = 1; j < kJoints; ++j) p[j] = p[parent[j]] + offset[j];
    return p;
  }

  std::array<int, 4> foot_joints() const { return {7, 10, 8, 11}; }

 private:
  static Skeleton build() {
    Skeleton s;
    struct J {
      const char* n;
      int p;
      double x, y, z;
    };
    const J body[22] = {
        {"pelvis", -1, 0, 0, 0},           {"left_hip", 0, 0.06, -0.09, 0},
        {"right_hip", 0, -0.06, -0.09, 0}, {"spine1", 0, 0, 0.11, -0.02},
        {"left_knee", 1, 0.04, -0.38, 0},  {"right_knee", 2, -0.04, -0.38, 0},
        {"spine2", 3, 0, 0.13, 0},         {"left_ankle", 4, -0.01, -0.40, -0.04},
        {"right_ankle", 5, 0.01, -0.40, -0.04}, {"spine3", 6, 0, 0.05, 0.02},
        {"left_foot", 7, 0.02, -0.06, 0.12},    {"right_foot", 8, -0.02, -0.06, 0.12},
        {"neck", 9, 0, 0.21, -0.03},       {"left_collar", 9, 0.08, 0.12, -0.01},
        {"right_collar", 9, -0.08, 0.12, -0.01}, {"head", 12, 0, 0.09, 0.05},
        {"left_shoulder", 13, 0.11, 0.03, -0.02}, {"right_shoulder", 14, -0.11, 0.03, -0.02},
        {"left_elbow", 16, 0.26, 0, -0.02}, {"right_elbow", 17, -0.26, 0, -0.02},
        {"left_wrist", 18, 0.25, 0.01, 0},  {"right_wrist", 19, -0.25, 0.01, 0},
    };
    for (int j = 0; j < 22; ++j) {
      s.name[j] = body[j].n;
      s.parent[j] = body[j].p;
      s.offset[j] = Vec3(body[j].x, body[j].y, body[j].z);
    }
    // Finger chains: base offset from the wrist, then two phalanx lengths.
    struct Finger {
      const char* n[3];
      double bx, by, bz, l2, l3;
    };
    const Finger left[5] = {
        {{"left_index1", "left_index2", "left_index3"}, 0.09, -0.005, 0.025, 0.035, 0.025},
        {{"left_middle1", "left_middle2", "left_middle3"}, 0.095, 0, 0.005, 0.035, 0.025},
        {{"left_pinky1", "left_pinky2", "left_pinky3"}, 0.08, -0.01, -0.04, 0.02, 0.018},
        {{"left_ring1", "left_ring2", "left_ring3"}, 0.09, -0.005, -0.02, 0.03, 0.022},
        {{"left_thumb1", "left_thumb2", "left_thumb3"}, 0.025, -0.015, 0.03, 0.03, 0.025},
    };
    static const char* right_names[15] = {
        "right_index1", "right_index2", "right_index3", "right_middle1", "right_middle2",
        "right_middle3", "right_pinky1", "right_pinky2", "right_pinky3",  "right_ring1",
        "right_ring2",  "right_ring3",  "right_thumb1", "right_thumb2",  "right_thumb3"};
    for (int side = 0; side < 2; ++side) {
      const int wrist = side == 0 ? 20 : 21;
      const double mirror = side == 0 ? 1.0 : -1.0;
      for (int f = 0; f < 5; ++f) {
        const int base = 22 + side * 15 + f * 3;
        const auto& fg = left[f];
        for (int k = 0; k < 3; ++k) {
          s.name[base + k] = side == 0 ? fg.n[k] : right_names[f * 3 + k];
          s.parent[base + k] = k == 0 ? wrist : base + k - 1;
        }
        s.offset[base] = Vec3(mirror * fg.bx, fg.by, fg.bz);
        s.offset[base + 1] = Vec3(mirror * fg.l2, 0, 0);
        s.offset[base + 2] = Vec3(mirror * fg.l3, 0, 0);
      }
    }
    return s;
  }
};

/// Global joint positions over time.  When present, `local_rot6d` carries
/// exact local joint rotations (51 non-root joints x 6 values per frame);
/// otherwise rotations are derived from bone directions.
struct JointClip {
  int frames = 0;
  double fps = kSynthFps;
  std::vector<Vec3> positions;  // frames x 52
  std::optional<std::vector<double>> local_rot6d;

  const Vec3& at(int t, int j) const { return positions[static_cast<std::size_t>(t) * kJoints + j]; }
  Vec3& at(int t, int j) { return positions[static_cast<std::size_t>(t) * kJoints + j]; }
};

/// Feature rows of one clip.
struct MotionSequence {
  int rows = 0;
  std::vector<float> features;  // rows x 623
  std::string layout = layout::kTag;
  bool normalized = false;
  std::string stats_id;
  double fps = kSynthFps;

  float at(int r, int c) const { return features[static_cast<std::size_t>(r) * kFeatureDim + c]; }
  float& at(int r, int c) { return features[static_cast<std::size_t>(r) * kFeatureDim + c]; }
};

struct FeatureStats {
  std::vector<float> mean;
  std::vector<float> std;
  std::string id;

  static FeatureStats identity() {
    return {std::vector<float>(kFeatureDim, 0.0f), std::vector<float>(kFeatureDim, 1.0f), "identity"};
  }
};

// ---------------------------------------------------------------------------
// Rotation helpers

inline Mat3 rot_y(double angle) { return Eigen::AngleAxisd(angle, Vec3::UnitY()).toRotationMatrix(); }

inline double wrap_angle(double a) {
  while (a > std::numbers::pi) a -= 2 * std::numbers::pi;
  while (a <= -std::numbers::pi) a += 2 * std::numbers::pi;
  return a;
}

/// First two columns of the rotation matrix, column-major.
inline std::array<double, 6> to_rot6d(const Mat3& r) {
  return {r(0, 0), r(1, 0), r(2, 0), r(0, 1), r(1, 1), r(2, 1)};
}

/// Gram-Schmidt reconstruction of a rotation from its 6-D form.
inline Mat3 from_rot6d(std::span<const double> v) {
  Vec3 a(v[0], v[1], v[2]), b(v[3], v[4], v[5]);
  Vec3 c1 = a.normalized();
  Vec3 c2 = (b - c1.dot(b) * c1).normalized();
  Mat3 r;
  r.col(0) = c1;
  r.col(1) = c2;
  r.col(2) = c1.cross(c2);
  return r;
}

/// Facing angle about +y from the hip and shoulder axes (0 when facing +z).
inline double heading(const JointClip& clip, int t) {
  const Vec3 across = (clip.at(t, 2) - clip.at(t, 1)) + (clip.at(t, 17) - clip.at(t, 16));
  Vec3 fwd = Vec3::UnitY().cross(across);
  fwd.y() = 0;
  if (fwd.norm() < 1e-12) return 0.0;
  fwd.normalize();
  return std::atan2(fwd.x(), fwd.z());
}

// ---------------------------------------------------------------------------
// Feature extraction

inline void validate(const JointClip& clip) {
  if (clip.frames < 2) throw Error("motion: clip needs at least 2 frames, got " + std::to_string(clip.frames));
  if (clip.positions.size() != static_cast<std::size_t>(clip.frames) * kJoints)
    throw ShapeError("motion: position count does not match frames x 52");
  for (const auto& p : clip.positions)
    if (!p.allFinite()) throw NumericError("motion: non-finite joint position");
  if (clip.local_rot6d) {
    if (clip.local_rot6d->size() != static_cast<std::size_t>(clip.frames) * 51 * 6)
      throw ShapeError("motion: rotation count does not match frames x 51 x 6");
    for (double v : *clip.local_rot6d)
      if (!std::isfinite(v)) throw NumericError("motion: non-finite rotation");
  }
}

namespace detail {

/// Swing rotation of every bone relative to its parent bone, in the facing
/// frame of frame t (used when exact rotations are unavailable).
inline std::array<Mat3, kJoints> derived_local_rotations(const JointClip& clip, int t, const Mat3& to_facing) {
  const auto& sk = Skeleton::standard();
  std::array<Mat3, kJoints> swing{};
  std::array<Mat3, kJoints> local{};
  swing[0] = Mat3::Identity();
  local[0] = Mat3::Identity();
  for (int j = 1; j < kJoints; ++j) {
    const Vec3 rest = sk.offset[j].normalized();
    Vec3 cur = to_facing * (clip.at(t, j) - clip.at(t, sk.parent[j]));
    if (cur.norm() < 1e-12) cur = rest;
    swing[j] = Eigen::Quaterniond::FromTwoVectors(rest, cur.normalized()).toRotationMatrix();
    local[j] = swing[sk.parent[j]].transpose() * swing[j];
  }
  return local;
}

}  // namespace detail

/// M frames -> M-1 feature rows (velocities consume one frame).
inline MotionSequence extract_features(const JointClip& clip) {
  validate(clip);
  const auto& sk = Skeleton::standard();
  const auto rest = sk.rest_relative();
  const auto feet = sk.foot_joints();
  MotionSequence seq;
  seq.rows = clip.frames - 1;
  seq.fps = clip.fps;
  seq.features.assign(static_cast<std::size_t>(seq.rows) * kFeatureDim, 0.0f);
  std::vector<double> theta(static_cast<std::size_t>(clip.frames));
  for (int t = 0; t < clip.frames; ++t) theta[t] = heading(clip, t);

  for (int t = 0; t < seq.rows; ++t) {
    const Mat3 to_facing = rot_y(-theta[t]);
    const Vec3 root = clip.at(t, 0);
    auto put = [&](int c, double v) { seq.at(t, c) = static_cast<float>(v); };

    put(layout::kRootAngularVel, wrap_angle(theta[t + 1] - theta[t]));
    const Vec3 lv = to_facing * (clip.at(t + 1, 0) - root);
    put(layout::kRootLinearVel, lv.x());
    put(layout::kRootLinearVel + 1, lv.z());
    put(layout::kRootHeight, root.y());

    for (int j = 1; j < kJoints; ++j) {
      const Vec3 local = to_facing * (clip.at(t, j) - root) - rest[j];
      for (int a = 0; a < 3; ++a) put(layout::kLocalPositions + (j - 1) * 3 + a, local[a]);
    }

    if (clip.local_rot6d) {
      const double* r = clip.local_rot6d->data() + static_cast<std::size_t>(t) * 51 * 6;
      for (int k = 0; k < 51 * 6; ++k) put(layout::kLocalRotations + k, r[k]);
    } else {
      const auto local = detail::derived_local_rotations(clip, t, to_facing);
      for (int j = 1; j < kJoints; ++j) {
        const auto r6 = to_rot6d(local[j]);
        for (int k = 0; k < 6; ++k) put(layout::kLocalRotations + (j - 1) * 6 + k, r6[k]);
      }
    }

    for (int j = 0; j < kJoints; ++j) {
      const Vec3 v = to_facing * (clip.at(t + 1, j) - clip.at(t, j));
      for (int a = 0; a < 3; ++a) put(layout::kLocalVelocities + j * 3 + a, v[a]);
    }

    for (int f = 0; f < 4; ++f) {
      const double speed = (clip.at(t + 1, feet[f]) - clip.at(t, feet[f])).norm();
      put(layout::kFootContacts + f, speed < kContactThreshold ? 1.0 : 0.0);
    }
  }
  return seq;
}

// ---------------------------------------------------------------------------
// Normalization

/// Per-channel mean and standard deviation over every row of the corpus.
/// The standard deviation is floored at 1e-6.  Values are rounded to
/// float32 before the id is computed so saved and in-memory stats agree.
inline FeatureStats compute_stats(const std::vector<MotionSequence>& corpus) {
  std::int64_t n = 0;
  std::vector<double> sum(kFeatureDim, 0.0), sq(kFeatureDim, 0.0);
  for (const auto& s : corpus) {
    if (s.normalized) throw Error("compute_stats: corpus must be unnormalized");
    for (int r = 0; r < s.rows; ++r)
      for (int c = 0; c < kFeatureDim; ++c) sum[c] += s.at(r, c);
    n += s.rows;
  }
  if (n == 0) throw Error("compute_stats: empty corpus");
  std::vector<double> mu(kFeatureDim);
  for (int c = 0; c < kFeatureDim; ++c) mu[c] = sum[c] / static_cast<double>(n);
  for (const auto& s : corpus)
    for (int r = 0; r < s.rows; ++r)
      for (int c = 0; c < kFeatureDim; ++c) {
        const double d = s.at(r, c) - mu[c];
        sq[c] += d * d;
      }
  FeatureStats st;
  st.mean.resize(kFeatureDim);
  st.std.resize(kFeatureDim);
  for (int c = 0; c < kFeatureDim; ++c) {
    st.mean[c] = static_cast<float>(mu[c]);
    st.std[c] = static_cast<float>(std::max(std::sqrt(sq[c] / static_cast<double>(n)), 1e-6));
  }
  st.id = io::sha256_hex(io::encode_f32<float>(st.mean) + io::encode_f32<float>(st.std)).substr(0, 16);
  return st;
}

inline MotionSequence normalize(const MotionSequence& seq, const FeatureStats& st) {
  if (seq.normalized) throw Error("normalize: sequence already normalized with " + seq.stats_id);
  MotionSequence out = seq;
  for (int r = 0; r < seq.rows; ++r)
    for (int c = 0; c < kFeatureDim; ++c) out.at(r, c) = (seq.at(r, c) - st.mean[c]) / st.std[c];
  out.normalized = true;
  out.stats_id = st.id;
  return out;
}

inline MotionSequence denormalize(const MotionSequence& seq, const FeatureStats& st) {
  if (!seq.normalized) return seq;
  if (seq.stats_id != st.id)
    throw Error("denormalize: sequence normalized with unknown statistics '" + seq.stats_id + "' (have '" +
                st.id + "')");
  MotionSequence out = seq;
  for (int r = 0; r < seq.rows; ++r)
    for (int c = 0; c < kFeatureDim; ++c) out.at(r, c) = seq.at(r, c) * st.std[c] + st.mean[c];
  out.normalized = false;
  out.stats_id.clear();
  return out;
}

// ---------------------------------------------------------------------------
// Inverse: features back to joints

/// Recovers one frame per feature row by integrating the root trajectory
/// from the origin with zero initial heading.
inline JointClip features_to_joints(const MotionSequence& seq, const FeatureStats& stats) {
  const MotionSequence raw = denormalize(seq, stats);
  const auto rest = Skeleton::standard().rest_relative();
  JointClip clip;
  clip.frames = raw.rows;
  clip.fps = raw.fps;
  clip.positions.resize(static_cast<std::size_t>(raw.rows) * kJoints);
  double theta = 0.0;
  Vec3 root(0.0, 0.0, 0.0);
  for (int t = 0; t < raw.rows; ++t) {
    root.y() = raw.at(t, layout::kRootHeight);
    const Mat3 from_facing = rot_y(theta);
    clip.at(t, 0) = root;
    for (int j = 1; j < kJoints; ++j) {
      const int c = layout::kLocalPositions + (j - 1) * 3;
      const Vec3 local(raw.at(t, c), raw.at(t, c + 1), raw.at(t, c + 2));
      clip.at(t, j) = root + from_facing * (local + rest[j]);
    }
    const Vec3 lv(raw.at(t, layout::kRootLinearVel), 0.0, raw.at(t, layout::kRootLinearVel + 1));
    root += from_facing * lv;
    theta += raw.at(t, layout::kRootAngularVel);
  }
  return clip;
}

/// Moves the first root to the ground-plane origin and rotates the clip
/// so the first frame faces +z (the frame features_to_joints recovers in).
inline JointClip canonicalize(const JointClip& clip) {
  JointClip out = clip;
  const double theta0 = heading(clip, 0);
  const Mat3 r = rot_y(-theta0);
  const Vec3 origin(clip.at(0, 0).x(), 0.0, clip.at(0, 0).z());
  for (auto& p : out.positions) p = r * (p - origin);
  return out;
}

// ---------------------------------------------------------------------------
// Motion files: <name>.bin holds rows x dims float32 (little-endian,
// frame-major); <name>.json is the sidecar header.

inline std::filesystem::path sidecar_path(const std::filesystem::path& bin) {
  auto p = bin;
  p.replace_extension(".json");
  return p;
}

inline void write_motion(const std::filesystem::path& bin, const std::string& id, const MotionSequence& seq) {
  nlohmann::ordered_json h;
  h["id"] = id;
  h["frames"] = seq.rows;
  h["dims"] = kFeatureDim;
  h["fps"] = seq.fps;
  h["normalized"] = seq.normalized;
  h["stats_id"] = seq.stats_id;
  io::write_file(sidecar_path(bin), h.dump(2) + "\n");
  io::write_file(bin, io::encode_f32<float>(seq.features));
}

inline MotionSequence read_motion(const std::filesystem::path& bin, std::string* id = nullptr) {
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(io::read_file(sidecar_path(bin)));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("motion header " + sidecar_path(bin).string() + ": " + e.what());
  }
  MotionSequence seq;
  try {
    seq.rows = h.at("frames").get<int>();
    const int dims = h.at("dims").get<int>();
    if (dims != kFeatureDim) throw FormatError("motion file " + bin.string() + ": dims " + std::to_string(dims) + " != 623");
    seq.fps = h.at("fps").get<double>();
    seq.normalized = h.at("normalized").get<bool>();
    seq.stats_id = h.at("stats_id").get<std::string>();
    if (id) *id = h.at("id").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("motion header " + sidecar_path(bin).string() + ": " + e.what());
  }
  seq.features = io::decode_f32(io::read_file(bin));
  if (seq.rows < 1 || seq.features.size() != static_cast<std::size_t>(seq.rows) * kFeatureDim)
    throw FormatError("motion file " + bin.string() + ": blob holds " + std::to_string(seq.features.size()) +
                      " values, header says " + std::to_string(seq.rows) + " x 623");
  for (float v : seq.features)
    if (!std::isfinite(v)) throw FormatError("motion file " + bin.string() + ": non-finite value");
  return seq;
}

// ---------------------------------------------------------------------------
// Procedural gesture corpus

struct SynthConfig {
  std::uint64_t seed = 1;
  int gesture_vocab = 8;
  int samples = 1000;
  int min_words = 2;
  int max_words = 4;
  int motif_frames = 20;
  int transition_frames = 4;
};

/// A gesture word: sinusoidal local-rotation offsets on one joint group.
struct Motif {
  std::string word;
  int group = 0;
  std::vector<int> joints;
  std::vector<Vec3> amplitude;  // per joint, radians per axis
  std::vector<Vec3> cycles;     // per joint, cycles over the motif
  std::vector<Vec3> phase;
};

struct SynthSample {
  JointClip clip;
  std::string text;
  std::vector<int> words;
};

struct SynthCorpus {
  std::vector<std::string> vocabulary;
  std::vector<Motif> motifs;
  std::vector<SynthSample> samples;
};

namespace detail {

inline const std::vector<std::string>& word_list() {
  static const std::vector<std::string> w = {
      "hello", "thank", "you", "please", "good", "morning", "friend", "help", "name", "what", "where", "how",
      "home", "school", "work", "water", "eat", "drink", "family", "mother", "father", "sister", "brother",
      "learn", "sign", "language", "yes", "no", "today", "tomorrow", "night", "happy", "sorry", "again",
      "slow", "fast", "book", "read", "write", "play", "time", "day", "week", "year", "deaf", "hearing",
      "teacher", "student", "want", "need", "like", "love", "see", "go", "come", "stop", "finish", "more",
      "later", "now", "understand", "question", "answer", "meet"};
  return w;
}

inline std::vector<std::vector<int>> joint_groups() {
  return {
      {13, 16, 18, 20, 22, 23, 25, 26, 28, 31, 34, 35},  // left arm and fingers
      {14, 17, 19, 21, 37, 38, 40, 41, 43, 46, 49, 50},  // right arm and fingers
      {3, 6, 9, 12, 15},                                  // spine, neck, head
  };
}

/// Arms held in front of the chest, elbows bent.
inline std::array<Vec3, kJoints> neutral_pose() {
  std::array<Vec3, kJoints> a{};
  for (auto& v : a) v = Vec3::Zero();
  a[16] = Vec3(0, 0, -1.1);
  a[17] = Vec3(0, 0, 1.1);
  a[18] = Vec3(0, -1.2, 0);
  a[19] = Vec3(0, 1.2, 0);
  return a;
}

inline Mat3 euler(const Vec3& a) {
  return (Eigen::AngleAxisd(a.z(), Vec3::UnitZ()) * Eigen::AngleAxisd(a.y(), Vec3::UnitY()) *
          Eigen::AngleAxisd(a.x(), Vec3::UnitX()))
      .toRotationMatrix();
}

using Pose = std::array<Vec3, kJoints>;  // local euler angles

/// Forward kinematics of one frame.  `root_pos` is the pelvis position and
/// angles[0] its global orientation.
inline void pose_frame(const Pose& angles, const Vec3& root_pos, Vec3* positions, double* rot6d) {
  const auto& sk = Skeleton::standard();
  std::array<Mat3, kJoints> global{};
  for (int j = 0; j < kJoints; ++j) {
    const Mat3 local = euler(angles[j]);
    if (j == 0) {
      global[0] = local;
      positions[0] = root_pos;
    } else {
      const int p = sk.parent[j];
      positions[j] = positions[p] + global[p] * sk.offset[j];
      global[j] = global[p] * local;
      if (rot6d) {
        const auto r = to_rot6d(local);
        std::copy(r.begin(), r.end(), rot6d + (j - 1) * 6);
      }
    }
  }
}

inline Pose motif_pose(const Motif& m, int t, int frames) {
  Pose p = neutral_pose();
  const double u = static_cast<double>(t) / frames;
  for (std::size_t k = 0; k < m.joints.size(); ++k)
    for (int a = 0; a < 3; ++a)
      p[m.joints[k]][a] += m.amplitude[k][a] * std::sin(2 * std::numbers::pi * m.cycles[k][a] * u + m.phase[k][a]);
  return p;
}

inline std::vector<Vec3> render_motif(const Motif& m, int frames) {
  std::vector<Vec3> pos(static_cast<std::size_t>(frames) * kJoints);
  const Vec3 root(0, Skeleton::standard().rest_root_height, 0);
  for (int t = 0; t < frames; ++t) pose_frame(motif_pose(m, t, frames), root, pos.data() + t * kJoints, nullptr);
  return pos;
}

inline double motif_distance(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]).norm();
  return d / static_cast<double>(a.size());
}

inline double max_speed(const std::vector<Vec3>& pos, int frames, double fps) {
  double v = 0;
  for (int t = 0; t + 1 < frames; ++t)
    for (int j = 0; j < kJoints; ++j)
      v = std::max(v, (pos[(t + 1) * kJoints + j] - pos[t * kJoints + j]).norm() * fps);
  return v;
}

inline Motif random_motif(Rng& rng, const std::string& word, int group) {
  static const double cycle_choices[] = {0.5, 1.0, 1.5};
  Motif m;
  m.word = word;
  m.group = group;
  m.joints = joint_groups()[static_cast<std::size_t>(group)];
  const double amp_hi = group == 2 ? 0.25 : 0.4;
  for (std::size_t k = 0; k < m.joints.size(); ++k) {
    Vec3 amp, cyc, ph;
    for (int a = 0; a < 3; ++a) {
      amp[a] = rng.uniform(0.1, amp_hi);
      cyc[a] = cycle_choices[rng.index(3)];
      ph[a] = rng.uniform(0, 2 * std::numbers::pi);
    }
    m.amplitude.push_back(amp);
    m.cycles.push_back(cyc);
    m.phase.push_back(ph);
  }
  return m;
}

}  // namespace detail

inline constexpr double kMinMotifDistance = 0.05;  // m, mean per-joint
inline constexpr double kMaxJointSpeed = 5.0;      // m/s

/// Generates a deterministic corpus of gesture sentences.  Each word owns a
/// motif; a sample concatenates motifs with linear blends in joint-angle
/// space and its text is the word sequence.  The pelvis sways slightly.
inline SynthCorpus synth_corpus(const SynthConfig& cfg) {
  if (cfg.gesture_vocab < 2) throw ConfigError("synth_corpus: gesture vocabulary must be at least 2");
  if (cfg.min_words < 1 || cfg.max_words < cfg.min_words) throw ConfigError("synth_corpus: bad words-per-sample range");
  if (cfg.samples < 0) throw ConfigError("synth_corpus: negative sample count");
  Rng rng(cfg.seed);
  SynthCorpus corpus;
  const auto& words = detail::word_list();
  for (int w = 0; w < cfg.gesture_vocab; ++w)
    corpus.vocabulary.push_back(w < static_cast<int>(words.size()) ? words[w] : "sign" + std::to_string(w));

  const int groups = static_cast<int>(detail::joint_groups().size());
  std::vector<std::vector<Vec3>> rendered;
  for (int w = 0; w < cfg.gesture_vocab; ++w) {
    bool ok = false;
    for (int attempt = 0; attempt < 200 && !ok; ++attempt) {
      auto m = detail::random_motif(rng, corpus.vocabulary[w], w % groups);
      auto pos = detail::render_motif(m, cfg.motif_frames);
      ok = detail::max_speed(pos, cfg.motif_frames, kSynthFps) < kMaxJointSpeed * 0.8;
      for (std::size_t o = 0; ok && o < rendered.size(); ++o)
        ok = detail::motif_distance(pos, rendered[o]) > kMinMotifDistance;
      if (ok) {
        corpus.motifs.push_back(std::move(m));
        rendered.push_back(std::move(pos));
      }
    }
    if (!ok) throw Error("synth_corpus: could not place a distinct motif for word " + std::to_string(w));
  }

  const double root_h = Skeleton::standard().rest_root_height;
  for (int s = 0; s < cfg.samples; ++s) {
    SynthSample sample;
    const auto k = static_cast<int>(rng.integer(cfg.min_words, cfg.max_words));
    for (int i = 0; i < k; ++i) sample.words.push_back(static_cast<int>(rng.index(static_cast<std::size_t>(cfg.gesture_vocab))));
    const double sway_phase = rng.uniform(0, 2 * std::numbers::pi);

    std::vector<detail::Pose> poses;
    for (int i = 0; i < k; ++i) {
      const auto& m = corpus.motifs[static_cast<std::size_t>(sample.words[i])];
      if (i > 0) {
        const auto from = poses.back();
        const auto to = detail::motif_pose(m, 0, cfg.motif_frames);
        for (int b = 1; b <= cfg.transition_frames; ++b) {
          const double u = static_cast<double>(b) / (cfg.transition_frames + 1);
          detail::Pose p;
          for (int j = 0; j < kJoints; ++j) p[j] = (1 - u) * from[j] + u * to[j];
          poses.push_back(p);
        }
      }
      for (int t = 0; t < cfg.motif_frames; ++t) poses.push_back(detail::motif_pose(m, t, cfg.motif_frames));
    }

    auto& clip = sample.clip;
    clip.frames = static_cast<int>(poses.size());
    clip.fps = kSynthFps;
    clip.positions.resize(poses.size() * kJoints);
    clip.local_rot6d = std::vector<double>(poses.size() * 51 * 6);
    for (int t = 0; t < clip.frames; ++t) {
      const double u = 2 * std::numbers::pi * t / 60.0 + sway_phase;
      poses[t][0] = Vec3(0, 0.05 * std::sin(u) - 0.05 * std::sin(sway_phase), 0);
      const Vec3 root(0.01 * (std::sin(u) - std::sin(sway_phase)), root_h, 0);
      detail::pose_frame(poses[t], root, clip.positions.data() + t * kJoints,
                         clip.local_rot6d->data() + static_cast<std::size_t>(t) * 51 * 6);
    }
    for (std::size_t i = 0; i < sample.words.size(); ++i)
      sample.text += (i ? " " : "") + corpus.vocabulary[static_cast<std::size_t>(sample.words[i])];
    corpus.samples.push_back(std::move(sample));
  }
  return corpus;
}

}  // namespace lslm::motion
