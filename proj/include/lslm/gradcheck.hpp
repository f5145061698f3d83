// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference checks for every differentiable operation, run
// in 64-bit.  Each case draws random shapes and values, reduces the op's
// output to a scalar with a fixed random weighting, and compares the
// backward() gradient of every input with (f(x+h) - f(x-h)) / 2h.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "lslm/ops.hpp"
#include "lslm/rng.hpp"

namespace lslm {

struct GradcheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  int cases_per_op = 20;
  std::uint64_t seed = 20240521;
  /// Negative control: scale the analytic gradient of this op by 1.01.
  std::string corrupt_op;
};

struct GradcheckResult {
  std::string op;
  int cases = 0;
  double max_rel_error = 0.0;
  bool passed = true;
};

namespace gradcheck_detail {

using Fn = std::function<Tensord(const std::vector<Tensord>&)>;

inline double rel_error(const std::vector<double>& a, const std::vector<double>& n) {
  double diff = 0, na = 0, nn = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - n[i]) * (a[i] - n[i]);
    na += a[i] * a[i];
    nn += n[i] * n[i];
  }
  const double scale = std::max(std::sqrt(na), std::sqrt(nn));
  if (scale < 1e-12) return std::sqrt(diff);
  return std::sqrt(diff) / scale;
}

inline Tensord random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensord::from(std::move(shape), std::move(v));
}

/// Values bounded away from zero (for kinks at 0).
inline Tensord away_from_zero(Rng& rng, Shape shape) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.1, 1.0);
  return Tensord::from(std::move(shape), std::move(v));
}

/// Weighted sum of op(inputs) with a fixed random weighting.
inline Fn weighted(Rng& rng, Fn op, const std::vector<Tensord>& probe) {
  Tensord out;
  {
    NoGradGuard ng;
    out = op(probe);
  }
  if (out.numel() == 1) return op;
  auto w = random_tensor(rng, out.shape());
  return [op, w](const std::vector<Tensord>& xs) { return sum(mul(op(xs), w)); };
}

/// Compares backward() of `analytic` against finite differences of
/// `numeric` (usually the same function).  Returns the worst relative error
/// over all inputs.
inline double check(const Fn& analytic, const Fn& numeric, std::vector<Tensord> inputs, double h, double corrupt) {
  std::vector<Tensord> leaves;
  for (auto& x : inputs) leaves.push_back(x.clone(true));
  backward(analytic(leaves));
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    std::vector<double> a = leaves[k].grad();
    for (auto& v : a) v *= corrupt;
    std::vector<double> n(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      NoGradGuard ng;
      auto plus = inputs;
      auto minus = inputs;
      plus[k] = inputs[k].clone(false);
      minus[k] = inputs[k].clone(false);
      plus[k].mutable_data()[i] += h;
      minus[k].mutable_data()[i] -= h;
      n[i] = (numeric(plus).item() - numeric(minus).item()) / (2 * h);
    }
    worst = std::max(worst, rel_error(a, n));
  }
  return worst;
}

inline Shape random_shape(Rng& rng, int min_rank, int max_rank, int max_dim = 4) {
  Shape s(static_cast<std::size_t>(rng.integer(min_rank, max_rank)));
  for (auto& d : s) d = rng.integer(1, max_dim);
  return s;
}

inline std::vector<std::uint8_t> random_mask(Rng& rng, std::int64_t n) {
  std::vector<std::uint8_t> m(static_cast<std::size_t>(n));
  for (auto& v : m) v = rng.uniform() < 0.7 ? 1 : 0;
  m[rng.index(static_cast<std::size_t>(n))] = 1;
  return m;
}

struct Case {
  Fn analytic;
  Fn numeric;
  std::vector<Tensord> inputs;
};

using CaseFactory = std::function<Case(Rng&)>;

inline Case same(Rng& rng, Fn op, std::vector<Tensord> inputs) {
  auto f = weighted(rng, op, inputs);
  return {f, f, std::move(inputs)};
}

inline std::vector<std::pair<std::string, CaseFactory>> factories() {
  std::vector<std::pair<std::string, CaseFactory>> f;
  auto binary = [](auto opfn) {
    return [opfn](Rng& rng) {
      Shape a = random_shape(rng, 1, 3);
      Shape b = a;
      if (rng.uniform() < 0.5) b.erase(b.begin(), b.begin() + static_cast<std::ptrdiff_t>(rng.index(a.size())));
      return same(rng, [opfn](const std::vector<Tensord>& x) { return opfn(x[0], x[1]); },
                  {random_tensor(rng, a), random_tensor(rng, b)});
    };
  };
  f.emplace_back("add", binary([](const Tensord& a, const Tensord& b) { return add(a, b); }));
  f.emplace_back("sub", binary([](const Tensord& a, const Tensord& b) { return sub(a, b); }));
  f.emplace_back("mul", binary([](const Tensord& a, const Tensord& b) { return mul(a, b); }));
  f.emplace_back("scale", [](Rng& rng) {
    const double s = rng.uniform(-2, 2);
    return same(rng, [s](const std::vector<Tensord>& x) { return scale(x[0], s); },
                {random_tensor(rng, random_shape(rng, 1, 3))});
  });
  f.emplace_back("relu", [](Rng& rng) {
    return same(rng, [](const std::vector<Tensord>& x) { return relu(x[0]); },
                {away_from_zero(rng, random_shape(rng, 1, 3))});
  });
  f.emplace_back("gelu", [](Rng& rng) {
    return same(rng, [](const std::vector<Tensord>& x) { return gelu(x[0]); },
                {random_tensor(rng, random_shape(rng, 1, 3), -3, 3)});
  });
  f.emplace_back("sum", [](Rng& rng) {
    return same(rng, [](const std::vector<Tensord>& x) { return sum(x[0]); },
                {random_tensor(rng, random_shape(rng, 1, 3))});
  });
  f.emplace_back("mean", [](Rng& rng) {
    return same(rng, [](const std::vector<Tensord>& x) { return mean(x[0]); },
                {random_tensor(rng, random_shape(rng, 1, 3))});
  });
  f.emplace_back("l1_distance", [](Rng& rng) {
    Shape s = random_shape(rng, 2, 3);
    auto a = random_tensor(rng, s);
    auto gap = away_from_zero(rng, s);
    auto b = Tensord::from_buffer(s, a.values());
    for (std::size_t i = 0; i < gap.values().size(); ++i) b.mutable_data()[i] += gap[i];
    auto mask = random_mask(rng, detail::rows_of(s));
    return same(rng, [mask](const std::vector<Tensord>& x) { return l1_distance(x[0], x[1], mask); }, {a, b});
  });
  f.emplace_back("squared_l2_distance", [](Rng& rng) {
    Shape s = random_shape(rng, 2, 3);
    auto mask = random_mask(rng, detail::rows_of(s));
    return same(rng, [mask](const std::vector<Tensord>& x) { return squared_l2_distance(x[0], x[1], mask); },
                {random_tensor(rng, s), random_tensor(rng, s)});
  });
  f.emplace_back("cross_entropy", [](Rng& rng) {
    const auto n = rng.integer(1, 5), v = rng.integer(2, 7);
    std::vector<std::int64_t> tgt(static_cast<std::size_t>(n));
    for (auto& t : tgt) t = rng.integer(0, v - 1);
    auto mask = random_mask(rng, n);
    return same(rng, [tgt, mask](const std::vector<Tensord>& x) { return cross_entropy(x[0], tgt, mask); },
                {random_tensor(rng, {n, v}, -2, 2)});
  });
  f.emplace_back("reshape", [](Rng& rng) {
    Shape s = random_shape(rng, 2, 3);
    const Shape flat{shape_numel(s)};
    return same(rng, [flat](const std::vector<Tensord>& x) { return reshape(x[0], flat); },
                {random_tensor(rng, s)});
  });
  f.emplace_back("permute0213", [](Rng& rng) {
    return same(rng, [](const std::vector<Tensord>& x) { return permute0213(x[0]); },
                {random_tensor(rng, random_shape(rng, 4, 4))});
  });
  f.emplace_back("concat", [](Rng& rng) {
    Shape tail = random_shape(rng, 0, 2);
    std::vector<Tensord> parts;
    const auto count = rng.integer(1, 3);
    for (int i = 0; i < count; ++i) {
      Shape s{rng.integer(1, 3)};
      s.insert(s.end(), tail.begin(), tail.end());
      parts.push_back(random_tensor(rng, s));
    }
    return same(rng, [](const std::vector<Tensord>& x) { return concat(x); }, parts);
  });
  f.emplace_back("narrow", [](Rng& rng) {
    Shape s = random_shape(rng, 1, 3, 5);
    const int dim = static_cast<int>(rng.index(s.size()));
    const auto start = rng.integer(0, s[dim] - 1);
    const auto len = rng.integer(1, s[dim] - start);
    return same(rng, [dim, start, len](const std::vector<Tensord>& x) { return narrow(x[0], dim, start, len); },
                {random_tensor(rng, s)});
  });
  f.emplace_back("matmul", [](Rng& rng) {
    Shape a = random_shape(rng, 1, 3);
    const Shape b{a.back(), rng.integer(1, 4)};
    return same(rng, [](const std::vector<Tensord>& x) { return matmul(x[0], x[1]); },
                {random_tensor(rng, a), random_tensor(rng, b)});
  });
  f.emplace_back("bmm", [](Rng& rng) {
    const auto B = rng.integer(1, 3), N = rng.integer(1, 4), K = rng.integer(1, 4), M = rng.integer(1, 4);
    return same(rng, [](const std::vector<Tensord>& x) { return bmm(x[0], x[1]); },
                {random_tensor(rng, {B, N, K}), random_tensor(rng, {B, K, M})});
  });
  f.emplace_back("bmm_transposed", [](Rng& rng) {
    const auto B = rng.integer(1, 3), N = rng.integer(1, 4), K = rng.integer(1, 4), M = rng.integer(1, 4);
    return same(rng, [](const std::vector<Tensord>& x) { return bmm(x[0], x[1], true); },
                {random_tensor(rng, {B, N, K}), random_tensor(rng, {B, M, K})});
  });
  f.emplace_back("linear", [](Rng& rng) {
    Shape a = random_shape(rng, 1, 3);
    const auto out = rng.integer(1, 4);
    return same(rng, [](const std::vector<Tensord>& x) { return linear(x[0], x[1], x[2]); },
                {random_tensor(rng, a), random_tensor(rng, {a.back(), out}), random_tensor(rng, {out})});
  });
  f.emplace_back("conv1d", [](Rng& rng) {
    const auto B = rng.integer(1, 2), Cin = rng.integer(1, 3), Cout = rng.integer(1, 3);
    const auto k = rng.integer(1, 4);
    const int stride = static_cast<int>(rng.integer(1, 2));
    const int pad = static_cast<int>(rng.integer(0, k / 2 + 1));
    const auto T = rng.integer(std::max<std::int64_t>(1, k - 2 * pad), 7);
    return same(rng,
                [stride, pad](const std::vector<Tensord>& x) { return conv1d(x[0], x[1], x[2], stride, pad); },
                {random_tensor(rng, {B, T, Cin}), random_tensor(rng, {k, Cin, Cout}), random_tensor(rng, {Cout})});
  });
  f.emplace_back("conv_transpose1d", [](Rng& rng) {
    const auto B = rng.integer(1, 2), Cin = rng.integer(1, 3), Cout = rng.integer(1, 3);
    const auto k = rng.integer(2, 4);
    const int stride = static_cast<int>(rng.integer(1, 2));
    const int pad = static_cast<int>(rng.integer(0, (k - 1) / 2));
    const auto T = rng.integer(1, 5);
    return same(rng,
                [stride, pad](const std::vector<Tensord>& x) {
                  return conv_transpose1d(x[0], x[1], x[2], stride, pad);
                },
                {random_tensor(rng, {B, T, Cin}), random_tensor(rng, {Cin, k, Cout}), random_tensor(rng, {Cout})});
  });
  f.emplace_back("layer_norm", [](Rng& rng) {
    Shape s = random_shape(rng, 1, 3);
    s.back() = rng.integer(2, 6);
    const Shape p{s.back()};
    return same(rng, [](const std::vector<Tensord>& x) { return layer_norm(x[0], x[1], x[2]); },
                {random_tensor(rng, s), random_tensor(rng, p, 0.5, 1.5), random_tensor(rng, p)});
  });
  f.emplace_back("softmax", [](Rng& rng) {
    return same(rng, [](const std::vector<Tensord>& x) { return softmax(x[0]); },
                {random_tensor(rng, random_shape(rng, 1, 3), -2, 2)});
  });
  f.emplace_back("embedding", [](Rng& rng) {
    const auto V = rng.integer(1, 6), D = rng.integer(1, 4);
    std::vector<std::int64_t> ids(static_cast<std::size_t>(rng.integer(1, 6)));
    for (auto& i : ids) i = rng.integer(0, V - 1);
    return same(rng, [ids](const std::vector<Tensord>& x) { return embedding(x[0], ids); },
                {random_tensor(rng, {V, D})});
  });
  f.emplace_back("mask_rows", [](Rng& rng) {
    Shape s = random_shape(rng, 1, 3);
    auto mask = random_mask(rng, detail::rows_of(s));
    return same(rng, [mask](const std::vector<Tensord>& x) { return mask_rows(x[0], mask); },
                {random_tensor(rng, s)});
  });
  // Encoder-side Jacobian of the straight-through path must be the identity.
  f.emplace_back("straight_through", [](Rng& rng) {
    Shape s = random_shape(rng, 1, 3);
    auto q = random_tensor(rng, s);
    auto w = random_tensor(rng, s);
    Fn analytic = [q, w](const std::vector<Tensord>& x) { return sum(mul(straight_through(q, x[0]), w)); };
    Fn numeric = [w](const std::vector<Tensord>& x) { return sum(mul(x[0], w)); };
    return Case{analytic, numeric, {random_tensor(rng, s)}};
  });
  // Gradient through sg[.] must be exactly zero.
  f.emplace_back("stop_gradient", [](Rng& rng) {
    Shape s = random_shape(rng, 1, 3);
    auto w = random_tensor(rng, s);
    Fn analytic = [w](const std::vector<Tensord>& x) { return sum(mul(stop_gradient(x[0]), w)); };
    Fn numeric = [w](const std::vector<Tensord>& x) { return scale(sum(mul(x[0], w)), 0.0); };
    return Case{analytic, numeric, {random_tensor(rng, s)}};
  });
  return f;
}

}  // namespace gradcheck_detail

/// Names of every operation the suite covers.
inline std::vector<std::string> gradcheck_ops() {
  std::vector<std::string> names;
  for (const auto& [name, _] : gradcheck_detail::factories()) names.push_back(name);
  return names;
}

inline std::vector<GradcheckResult> run_gradcheck(const GradcheckOptions& opt = {}) {
  std::vector<GradcheckResult> results;
  Rng rng(opt.seed);
  for (const auto& [name, factory] : gradcheck_detail::factories()) {
    GradcheckResult r;
    r.op = name;
    const double corrupt = name == opt.corrupt_op ? 1.01 : 1.0;
    for (int c = 0; c < opt.cases_per_op; ++c) {
      auto cs = factory(rng);
      const double err = gradcheck_detail::check(cs.analytic, cs.numeric, cs.inputs, opt.step, corrupt);
      r.max_rel_error = std::max(r.max_rel_error, err);
      ++r.cases;
    }
    r.passed = r.max_rel_error < opt.tolerance;
    results.push_back(r);
  }
  return results;
}

}  // namespace lslm
