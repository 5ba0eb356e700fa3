#pragma once

// Randomised property suites over the estimator and the numeric kernels.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "metta/augment.hpp"
#include "metta/core.hpp"
#include "metta/model.hpp"
#include "metta/ops.hpp"
#include "metta/rng.hpp"
#include "metta/tensor.hpp"

namespace metta {

struct PropertyResult {
  std::string name;
  std::size_t trials = 0;
  std::size_t violations = 0;
  double worst = 0.0;  // largest observed violation margin (or error)
  double tolerance = 0.0;
  bool passed() const { return trials > 0 && violations == 0; }
};

namespace property_detail {

struct RandomHeadTrial {
  LinearHead head;
  std::vector<Tensor> embeddings;
  std::size_t label = 0;
};

// Non-negative embeddings, as produced after a ReLU and average pool.
inline RandomHeadTrial random_head_trial(CounterRng& rng, std::size_t samples) {
  const std::size_t dim = 2 + rng.below(15), classes = 2 + rng.below(9);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
  RandomHeadTrial t;
  t.head = LinearHead::zeros(classes, dim);
  for (float& w : t.head.weight.data()) w = static_cast<float>(rng.normal() * scale);
  for (float& b : t.head.bias.data()) b = static_cast<float>(rng.normal() * 0.5);
  for (std::size_t s = 0; s < samples; ++s) {
    Tensor a({dim});
    for (float& v : a.data()) v = static_cast<float>(rng.uniform(0.0, 2.0));
    t.embeddings.push_back(std::move(a));
  }
  t.label = rng.below(classes);
  return t;
}

inline DTensor mean_in_double(std::span<const Tensor> vs) {
  DTensor m(vs.front().shape());
  for (const Tensor& v : vs) {
    for (std::size_t d = 0; d < m.size(); ++d) m[d] += v[d];
  }
  for (double& x : m.data()) x /= static_cast<double>(vs.size());
  return m;
}

}  // namespace property_detail

/// NLL of the mean-embedding prediction never exceeds the average per-sample
/// NLL. Evaluated in double from the logits.
inline PropertyResult check_jensen_bound(std::uint64_t seed, std::size_t trials = 10000,
                                         std::vector<std::size_t> sample_counts = {2, 4, 8},
                                         double tolerance = 1e-6) {
  PropertyResult r{"jensen_bound", 0, 0, -std::numeric_limits<double>::infinity(), tolerance};
  for (std::size_t i = 0; i < trials; ++i) {
    CounterRng rng({seed, static_cast<std::uint64_t>(Stream::kTrial), 1, i});
    const std::size_t s = sample_counts[i % sample_counts.size()];
    const auto t = property_detail::random_head_trial(rng, s);
    const DTensor w = t.head.weight.cast<double>(), b = t.head.bias.cast<double>();
    double per_sample = 0.0;
    for (const Tensor& a : t.embeddings) per_sample += nll_from_logits(dense(a.cast<double>(), w, b), t.label);
    per_sample /= static_cast<double>(s);
    const double mean_nll = nll_from_logits(dense(property_detail::mean_in_double(t.embeddings), w, b), t.label);
    const double excess = mean_nll - per_sample;
    r.worst = std::max(r.worst, excess);
    if (excess > tolerance) ++r.violations;
    ++r.trials;
  }
  return r;
}

/// Averaging logits and averaging embeddings give the same probabilities.
inline PropertyResult check_logit_average_equivalence(std::uint64_t seed, std::size_t trials = 1000,
                                                      double tolerance = 1e-6) {
  PropertyResult r{"logit_average_equivalence", 0, 0, 0.0, tolerance};
  for (std::size_t i = 0; i < trials; ++i) {
    CounterRng rng({seed, static_cast<std::uint64_t>(Stream::kTrial), 2, i});
    const auto t = property_detail::random_head_trial(rng, 1 + rng.below(16));
    const Tensor a = metta_from_embeddings(t.head, t.embeddings);
    const Tensor b = logit_average_from_embeddings(t.head, t.embeddings);
    double diff = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) diff = std::max(diff, std::abs(static_cast<double>(a[k]) - b[k]));
    r.worst = std::max(r.worst, diff);
    if (!(diff < tolerance)) ++r.violations;
    ++r.trials;
  }
  return r;
}

/// For a finite group policy, the mean embedding of g(x) equals that of x
/// for every member g.
inline PropertyResult check_group_invariance(const Checkpoint& ckpt, std::span<const Tensor> images,
                                             const AugmentationPolicy& policy, double tolerance = 1e-5) {
  if (policy.kind != PolicyKind::kFlipGroup && policy.kind != PolicyKind::kRot90Group) {
    throw ValueError("group invariance needs FlipGroup or Rot90Group, got " + to_string(policy.kind));
  }
  PropertyResult r{"group_invariance_" + to_string(policy.kind), 0, 0, 0.0, tolerance};
  for (const Tensor& x : images) {
    const Tensor base = mean_embedding(ckpt, x, policy, 1, 0, 0).mean;
    for (const TransformParams& g : enumerate_group(policy, x.dim(1), x.dim(2))) {
      const Tensor moved = mean_embedding(ckpt, apply_transform(x, g), policy, 1, 0, 0).mean;
      double diff = 0.0;
      for (std::size_t d = 0; d < base.size(); ++d) diff = std::max(diff, std::abs(static_cast<double>(base[d]) - moved[d]));
      r.worst = std::max(r.worst, diff);
      if (!(diff < tolerance)) ++r.violations;
      ++r.trials;
    }
  }
  return r;
}

inline Tensor random_logits(CounterRng& rng) {
  Tensor z({1 + rng.below(12)});
  const double spread = std::pow(10.0, rng.uniform(-2.0, 3.0));
  for (float& v : z.data()) v = static_cast<float>(rng.uniform(-spread, spread));
  return z;
}

inline PropertyResult check_softmax_normalization(std::uint64_t seed, std::size_t trials = 10000,
                                                  double tolerance = 1e-6) {
  PropertyResult r{"softmax_sums_to_one", 0, 0, 0.0, tolerance};
  for (std::size_t i = 0; i < trials; ++i) {
    CounterRng rng({seed, static_cast<std::uint64_t>(Stream::kTrial), 3, i});
    const Tensor p = softmax(random_logits(rng));
    double total = 0.0;
    bool in_range = true;
    for (float v : p.data()) {
      total += v;
      in_range = in_range && v >= 0.0f && v <= 1.0f;
    }
    const double err = std::abs(total - 1.0);
    r.worst = std::max(r.worst, err);
    if (!(err <= tolerance) || !in_range) ++r.violations;
    ++r.trials;
  }
  return r;
}

/// cross_entropy(softmax(z), y) = logsumexp(z) - z_y wherever the probability
/// is above the clamp floor, and logsumexp(z + c) = logsumexp(z) + c.
inline PropertyResult check_log_sum_exp_identity(std::uint64_t seed, std::size_t trials = 10000,
                                                 double tolerance = 1e-5) {
  PropertyResult r{"log_sum_exp_identity", 0, 0, 0.0, tolerance};
  for (std::size_t i = 0; i < trials; ++i) {
    CounterRng rng({seed, static_cast<std::uint64_t>(Stream::kTrial), 4, i});
    const Tensor z = random_logits(rng);
    const double lse = log_sum_exp(z.data());
    const Tensor p = softmax(z);
    double err = 0.0;
    for (std::size_t k = 0; k < z.size(); ++k) {
      if (p[k] < kProbabilityFloor) continue;
      err = std::max(err, std::abs(cross_entropy(p, k) - (lse - static_cast<double>(z[k]))));
    }
    const double shift = rng.uniform(-100.0, 100.0);
    DTensor shifted = z.cast<double>();
    for (double& v : shifted.data()) v += shift;
    err = std::max(err, std::abs(log_sum_exp(std::span<const double>(shifted.data())) - (lse + shift)));
    r.worst = std::max(r.worst, err);
    if (!(err <= tolerance)) ++r.violations;
    ++r.trials;
  }
  return r;
}

}  // namespace metta
