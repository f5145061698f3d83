// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lslm/tensor.hpp"

namespace lslm {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// First/second moment buffers and step count of one parameter tensor.
struct AdamWState {
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t step = 0;
};

/// One AdamW update with decoupled weight decay:
///   theta <- theta - lr * wd * theta
///   theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)
/// Moments are kept in double regardless of the parameter type.
template <class T>
void adamw_step(std::span<T> param, std::span<const T> grad, AdamWState& state, const AdamWConfig& cfg) {
  if (state.m.size() != param.size()) {
    state.m.assign(param.size(), 0.0);
    state.v.assign(param.size(), 0.0);
    state.step = 0;
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad.empty() ? 0.0 : static_cast<double>(grad[i]);
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
    double p = static_cast<double>(param[i]);
    p -= cfg.lr * cfg.weight_decay * p;
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    p -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    param[i] = static_cast<T>(p);
  }
}

/// Ordered list of named parameter tensors.
template <class T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

/// AdamW over named parameter groups.  A frozen group is skipped entirely:
/// neither its parameters nor its optimizer state change.
template <class T>
class AdamW {
 public:
  void add_group(const std::string& name, NamedTensors<T> params, AdamWConfig cfg) {
    if (groups_.count(name)) throw ConfigError("optimizer: duplicate group '" + name + "'");
    Group g;
    g.params = std::move(params);
    g.cfg = cfg;
    g.state.resize(g.params.size());
    order_.push_back(name);
    groups_.emplace(name, std::move(g));
  }

  bool has_group(const std::string& name) const { return groups_.count(name) > 0; }

  void freeze(const std::string& name) { group(name).frozen = true; }
  void unfreeze(const std::string& name) { group(name).frozen = false; }
  bool frozen(const std::string& name) const { return group(name).frozen; }

  void set_lr(const std::string& name, double lr) { group(name).cfg.lr = lr; }
  const AdamWConfig& config(const std::string& name) const { return group(name).cfg; }

  /// Drops all moment buffers (used between training phases).
  void reset_state() {
    for (auto& [_, g] : groups_)
      for (auto& s : g.state) s = AdamWState{};
  }

  void step() {
    for (const auto& name : order_) {
      auto& g = groups_.at(name);
      if (g.frozen) continue;
      for (std::size_t i = 0; i < g.params.size(); ++i) {
        auto& p = g.params[i].second;
        std::span<const T> grad = p.has_grad() ? p.grad_view() : std::span<const T>{};
        adamw_step<T>(p.mutable_data(), grad, g.state[i], g.cfg);
      }
    }
  }

  void zero_grad() {
    for (auto& [_, g] : groups_)
      for (auto& [__, p] : g.params) p.zero_grad();
  }

  const std::vector<AdamWState>& state(const std::string& name) const { return group(name).state; }
  std::vector<AdamWState>& mutable_state(const std::string& name) { return group(name).state; }
  const NamedTensors<T>& params(const std::string& name) const { return group(name).params; }
  const std::vector<std::string>& group_names() const { return order_; }

 private:
  struct Group {
    NamedTensors<T> params;
    AdamWConfig cfg;
    std::vector<AdamWState> state;
    bool frozen = false;
  };

  Group& group(const std::string& name) {
    auto it = groups_.find(name);
    if (it == groups_.end()) throw ConfigError("optimizer: unknown group '" + name + "'");
    return it->second;
  }
  const Group& group(const std::string& name) const {
    auto it = groups_.find(name);
    if (it == groups_.end()) throw ConfigError("optimizer: unknown group '" + name + "'");
    return it->second;
  }

  std::map<std::string, Group> groups_;
  std::vector<std::string> order_;
};

}  // namespace lslm
