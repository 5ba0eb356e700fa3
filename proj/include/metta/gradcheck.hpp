#pragma once

// Central finite-difference checks of the tape's analytic gradients. The
// reference side re-evaluates the forward kernels in double precision and
// never touches the backward code.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "metta/autodiff.hpp"
#include "metta/ops.hpp"
#include "metta/rng.hpp"
#include "metta/tensor.hpp"

namespace metta {


struct GradCheckOptions {
  double step = 1e-3;
  double tolerance = 1e-2;
  // Denominator floor of the relative error, so that gradients that are
  // exactly zero on both sides compare as equal.
  double floor = 1e-3;
  std::size_t instances = 100;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  std::string op;
  std::size_t instances = 0;
  std::size_t failures = 0;        // instances with at least one element over tolerance
  std::size_t elements = 0;        // gradient entries compared
  double max_relative_error = 0.0;
  bool passed() const { return instances > 0 && failures == 0; }
};

/// One randomised instance: float inputs, a tape builder producing a scalar
/// loss from the input nodes, and the same loss evaluated in double.
struct GradCase {
  std::vector<Tensor> inputs;
  std::function<NodeId(Tape&, std::span<const NodeId>)> build;
  std::function<double(std::span<const DTensor>)> reference;
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Worst relative error over every input element of one case.
inline double check_case(const GradCase& c, const GradCheckOptions& opts, std::size_t* compared = nullptr) {
  Tape tape;
  std::vector<NodeId> ids;
  for (const Tensor& t : c.inputs) ids.push_back(tape.parameter(t));
  const NodeId loss = c.build(tape, ids);
  const Gradients grads = backward(tape, loss);

  std::vector<DTensor> x;
  for (const Tensor& t : c.inputs) x.push_back(t.cast<double>());
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const bool has = grads.has(ids[i]);
    for (std::size_t j = 0; j < x[i].size(); ++j) {
      const double saved = x[i][j];
      x[i][j] = saved + opts.step;
      const double up = c.reference(x);
      x[i][j] = saved - opts.step;
      const double down = c.reference(x);
      x[i][j] = saved;
      const double numeric = (up - down) / (2.0 * opts.step);
      const double analytic = has ? static_cast<double>(grads[ids[i]][j]) : 0.0;
      worst = std::max(worst, relative_error(analytic, numeric, opts.floor));
      if (compared) ++*compared;
    }
  }
  return worst;
}

namespace gradcase {

inline Tensor uniform(CounterRng& rng, Shape shape, double lo, double hi) {
  Tensor t(std::move(shape));
  for (float& v : t.data()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

// Values bounded away from zero, for the ReLU kink.
inline Tensor away_from_zero(CounterRng& rng, Shape shape, double margin) {
  Tensor t(std::move(shape));
  for (float& v : t.data()) v = static_cast<float>((rng.coin() ? 1.0 : -1.0) * rng.uniform(margin, 1.0));
  return t;
}

// Distinct values on a 0.01 grid, so no window maximum can change under a
// perturbation of one step.
inline Tensor distinct(CounterRng& rng, Shape shape) {
  Tensor t(std::move(shape));
  std::vector<std::size_t> perm(t.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(0.01 * static_cast<double>(perm[i]) - 0.3);
  return t;
}

inline std::size_t pick(CounterRng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng.below(hi - lo + 1));
}

template <std::floating_point T>
double weighted(const BasicTensor<T>& x, const Tensor& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += static_cast<double>(x[i]) * w[i];
  return s;
}

// Readout: loss = sum(out * w) with random w, so the check covers the full
// vector-Jacobian product of tensor-valued ops.
inline GradCase readout_case(std::vector<Tensor> inputs, Shape out_shape, CounterRng& rng,
                             std::function<NodeId(Tape&, std::span<const NodeId>)> op,
                             std::function<DTensor(std::span<const DTensor>)> ref) {
  Tensor w = uniform(rng, std::move(out_shape), -1.0, 1.0);
  GradCase c;
  c.inputs = std::move(inputs);
  c.build = [op, w](Tape& t, std::span<const NodeId> ids) { return t.weighted_sum(op(t, ids), w); };
  c.reference = [ref, w](std::span<const DTensor> x) { return weighted(ref(x), w); };
  return c;
}

inline GradCase conv2d(CounterRng& rng) {
  const std::size_t ci = pick(rng, 1, 3), co = pick(rng, 1, 3), k = pick(rng, 1, 3);
  const long stride = static_cast<long>(pick(rng, 1, 2)), pad = static_cast<long>(pick(rng, 0, 1));
  const std::size_t h = pick(rng, k, 6), w = pick(rng, k, 6);
  Tensor x = uniform(rng, {ci, h, w}, -1, 1);
  Tensor kern = uniform(rng, {co, ci, k, k}, -1, 1);
  const Shape out = metta::conv2d(x, kern, stride, pad).shape();
  return readout_case(
      {x, kern}, out, rng, [=](Tape& t, std::span<const NodeId> id) { return t.conv2d(id[0], id[1], stride, pad); },
      [=](std::span<const DTensor> v) { return metta::conv2d(v[0], v[1], stride, pad); });
}

inline GradCase relu(CounterRng& rng) {
  const Shape shape{pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 4)};
  return readout_case(
      {away_from_zero(rng, shape, 0.05)}, shape, rng, [](Tape& t, std::span<const NodeId> id) { return t.relu(id[0]); },
      [](std::span<const DTensor> v) { return metta::relu(v[0]); });
}

inline GradCase maxpool2d(CounterRng& rng) {
  const std::size_t window = pick(rng, 1, 3);
  const long stride = static_cast<long>(pick(rng, 1, 2));
  Tensor x = distinct(rng, {pick(rng, 1, 2), pick(rng, window, 6), pick(rng, window, 6)});
  const auto win = static_cast<long>(window);
  const Shape out = metta::maxpool2d(x, win, stride).shape();
  return readout_case(
      {x}, out, rng, [=](Tape& t, std::span<const NodeId> id) { return t.maxpool2d(id[0], win, stride); },
      [=](std::span<const DTensor> v) { return metta::maxpool2d(v[0], win, stride); });
}

inline GradCase global_avg_pool(CounterRng& rng) {
  const std::size_t c = pick(rng, 1, 4);
  return readout_case(
      {uniform(rng, {c, pick(rng, 1, 5), pick(rng, 1, 5)}, -1, 1)}, {c}, rng,
      [](Tape& t, std::span<const NodeId> id) { return t.global_avg_pool(id[0]); },
      [](std::span<const DTensor> v) { return metta::global_avg_pool(v[0]); });
}

inline GradCase dense(CounterRng& rng) {
  const std::size_t d = pick(rng, 1, 6), k = pick(rng, 1, 5);
  return readout_case(
      {uniform(rng, {d}, -1, 1), uniform(rng, {k, d}, -1, 1), uniform(rng, {k}, -1, 1)}, {k}, rng,
      [](Tape& t, std::span<const NodeId> id) { return t.dense(id[0], id[1], id[2]); },
      [](std::span<const DTensor> v) { return metta::dense(v[0], v[1], v[2]); });
}

inline GradCase softmax(CounterRng& rng) {
  const std::size_t k = pick(rng, 1, 6);
  return readout_case(
      {uniform(rng, {k}, -3, 3)}, {k}, rng, [](Tape& t, std::span<const NodeId> id) { return t.softmax(id[0]); },
      [](std::span<const DTensor> v) { return metta::softmax(v[0]); });
}

inline GradCase cross_entropy(CounterRng& rng) {
  const std::size_t k = pick(rng, 1, 6), label = static_cast<std::size_t>(rng.below(k));
  Tensor p({k});
  double total = 0.0;
  for (float& v : p.data()) total += (v = static_cast<float>(rng.uniform(0.2, 1.0)));
  for (float& v : p.data()) v = static_cast<float>(v / total);
  GradCase c;
  c.inputs = {p};
  c.build = [label](Tape& t, std::span<const NodeId> id) { return t.cross_entropy(id[0], label); };
  c.reference = [label](std::span<const DTensor> v) { return metta::cross_entropy(v[0], label); };
  return c;
}

inline GradCase softmax_cross_entropy(CounterRng& rng) {
  const std::size_t k = pick(rng, 1, 6), label = static_cast<std::size_t>(rng.below(k));
  GradCase c;
  c.inputs = {uniform(rng, {k}, -3, 3)};
  c.build = [label](Tape& t, std::span<const NodeId> id) { return t.softmax_cross_entropy(id[0], label); };
  c.reference = [label](std::span<const DTensor> v) { return metta::nll_from_logits(v[0], label); };
  return c;
}

inline GradCase sum(CounterRng& rng) {
  GradCase c;
  c.inputs = {uniform(rng, {pick(rng, 1, 8)}, -1, 1)};
  c.build = [](Tape& t, std::span<const NodeId> id) { return t.sum(id[0]); };
  c.reference = [](std::span<const DTensor> v) {
    double s = 0.0;
    for (double x : v[0].data()) s += x;
    return s;
  };
  return c;
}

inline GradCase mean(CounterRng& rng) {
  const std::size_t n = pick(rng, 1, 5);
  GradCase c;
  for (std::size_t i = 0; i < n; ++i) c.inputs.push_back(uniform(rng, {1}, -2, 2));
  c.build = [](Tape& t, std::span<const NodeId> id) { return t.mean(id); };
  c.reference = [](std::span<const DTensor> v) {
    double s = 0.0;
    for (const auto& x : v) s += x[0];
    return s / static_cast<double>(v.size());
  };
  return c;
}

// conv(3x3, pad 1) -> relu -> maxpool(2,2) -> conv(3x3, stride 2, pad 1) -> relu
// -> global_avg_pool -> dense -> softmax cross-entropy
namespace composed_detail {

struct Forward {
  DTensor pre1, pooled_in, pre2;
  double loss;
};

inline Forward run(std::span<const DTensor> v, std::size_t label) {
  Forward f;
  f.pre1 = metta::conv2d(v[0], v[1], 1, 1);
  f.pooled_in = metta::relu(f.pre1);
  const DTensor pooled = metta::maxpool2d(f.pooled_in, 2, 2);
  f.pre2 = metta::conv2d(pooled, v[2], 2, 1);
  const DTensor logits = metta::dense(metta::global_avg_pool(metta::relu(f.pre2)), v[3], v[4]);
  f.loss = metta::nll_from_logits(logits, label);
  return f;
}

// Every ReLU input at least `margin` from zero and every positive pooling
// window with a unique maximum by at least `margin`.
inline bool well_separated(const Forward& f, double margin) {
  for (double z : f.pre1.data()) {
    if (std::abs(z) < margin) return false;
  }
  for (double z : f.pre2.data()) {
    if (std::abs(z) < margin) return false;
  }
  const DTensor& x = f.pooled_in;
  for (std::size_t c = 0; c < x.dim(0); ++c) {
    for (std::size_t oh = 0; oh + 1 < x.dim(1); oh += 2) {
      for (std::size_t ow = 0; ow + 1 < x.dim(2); ow += 2) {
        double vals[4] = {x.at(c, oh, ow), x.at(c, oh, ow + 1), x.at(c, oh + 1, ow), x.at(c, oh + 1, ow + 1)};
        std::sort(vals, vals + 4);
        if (vals[3] > 0.0 && vals[3] - vals[2] < margin) return false;
      }
    }
  }
  return true;
}

}  // namespace composed_detail

inline GradCase composed(CounterRng& rng) {
  for (;;) {
    const std::size_t ci = pick(rng, 1, 2), c1 = pick(rng, 2, 3), c2 = pick(rng, 2, 3), k = pick(rng, 2, 4);
    const std::size_t h = pick(rng, 4, 7), w = pick(rng, 4, 7), label = static_cast<std::size_t>(rng.below(k));
    std::vector<Tensor> in{uniform(rng, {ci, h, w}, 0, 1), uniform(rng, {c1, ci, 3, 3}, -0.6, 0.6),
                           uniform(rng, {c2, c1, 3, 3}, -0.6, 0.6), uniform(rng, {k, c2}, -1, 1),
                           uniform(rng, {k}, -0.5, 0.5)};
    std::vector<DTensor> d;
    for (const Tensor& t : in) d.push_back(t.cast<double>());
    if (!composed_detail::well_separated(composed_detail::run(d, label), 2e-2)) continue;
    GradCase c;
    c.inputs = std::move(in);
    c.build = [label](Tape& t, std::span<const NodeId> id) {
      NodeId x = t.relu(t.conv2d(id[0], id[1], 1, 1));
      x = t.maxpool2d(x, 2, 2);
      x = t.relu(t.conv2d(x, id[2], 2, 1));
      return t.softmax_cross_entropy(t.dense(t.global_avg_pool(x), id[3], id[4]), label);
    };
    c.reference = [label](std::span<const DTensor> v) { return composed_detail::run(v, label).loss; };
    return c;
  }
}

}  // namespace gradcase

struct GradCaseFamily {
  std::string name;
  GradCase (*make)(CounterRng&);
};

inline std::vector<GradCaseFamily> gradient_case_families() {
  return {{"conv2d", gradcase::conv2d},
          {"relu", gradcase::relu},
          {"maxpool2d", gradcase::maxpool2d},
          {"global_avg_pool", gradcase::global_avg_pool},
          {"dense", gradcase::dense},
          {"softmax", gradcase::softmax},
          {"cross_entropy", gradcase::cross_entropy},
          {"softmax_cross_entropy", gradcase::softmax_cross_entropy},
          {"sum", gradcase::sum},
          {"mean", gradcase::mean},
          {"composed", gradcase::composed}};
}

inline GradCheckResult run_gradient_check(const GradCaseFamily& family, std::size_t family_index,
                                          const GradCheckOptions& opts) {
  GradCheckResult result;
  result.op = family.name;
  for (std::size_t i = 0; i < opts.instances; ++i) {
    CounterRng rng({opts.seed, static_cast<std::uint64_t>(Stream::kTrial), static_cast<std::uint64_t>(family_index), i});
    const double err = check_case(family.make(rng), opts, &result.elements);
    result.max_relative_error = std::max(result.max_relative_error, err);
    if (!(err < opts.tolerance)) ++result.failures;
    ++result.instances;
  }
  return result;
}

inline std::vector<GradCheckResult> run_all_gradient_checks(const GradCheckOptions& opts) {
  std::vector<GradCheckResult> out;
  const auto families = gradient_case_families();
  for (std::size_t i = 0; i < families.size(); ++i) out.push_back(run_gradient_check(families[i], i, opts));
  return out;
}

}  // namespace metta
