#pragma once

// Augmentation-averaged inference: mean embeddings with variance, TTA
// (probability averaging), MeTTA (softmax of the mean embedding through the
// head), logit averaging, and a cosine retrieval index over mean embeddings.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "metta/augment.hpp"
#include "metta/dataset.hpp"
#include "metta/errors.hpp"
#include "metta/model.hpp"
#include "metta/ops.hpp"
#include "metta/parallel.hpp"
#include "metta/tensor.hpp"

namespace metta {

/// Per-image summary of the embeddings of S augmentation samples.
struct EmbeddingStats {
  Tensor mean;
  Tensor variance;  // population variance, elementwise
  std::size_t sample_count = 0;
  std::string policy;
  std::uint64_t image_id = 0;
};

/// Key for per-image augmentation streams derived from pixel content, so
/// results do not depend on where an image sits in a dataset.
inline std::uint64_t image_key(const Tensor& image) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::size_t d : image.shape()) h = splitmix64(h ^ d);
  const auto* bytes = reinterpret_cast<const unsigned char*>(image.data().data());
  for (std::size_t b = 0; b < image.size() * sizeof(float); ++b) {
    h ^= bytes[b];
    h *= 0x100000001b3ull;
  }
  return h;
}

/// Transforms used for one image: the exact member list for enumerable
/// policies (S is ignored), otherwise S counter-keyed samples.
inline std::vector<TransformParams> transform_plan(const AugmentationPolicy& policy, std::size_t height,
                                                   std::size_t width, std::size_t samples,
                                                   std::uint64_t global_seed, std::uint64_t image_index) {
  if (policy.enumerable()) return enumerate_group(policy, height, width);
  if (samples < 1) throw ValueError("number of augmentation samples must be >= 1");
  std::vector<TransformParams> plan;
  plan.reserve(samples);
  for (std::size_t s = 0; s < samples; ++s) {
    plan.push_back(sample_transform(policy, height, width, global_seed, image_index, s));
  }
  return plan;
}

/// Embeddings of every planned augmentation, in sample order. Forward passes
/// may run on METTA_THREADS workers; slot s always holds sample s.
inline std::vector<Tensor> sample_embeddings(const Checkpoint& ckpt, const Tensor& image,
                                             const AugmentationPolicy& policy, std::size_t samples,
                                             std::uint64_t global_seed, std::uint64_t image_index) {
  check_image(ckpt.config, image);
  const auto plan = transform_plan(policy, image.dim(1), image.dim(2), samples, global_seed, image_index);
  return parallel_map(plan.size(), [&](std::size_t s) { return embed(ckpt, apply_transform(image, plan[s])); });
}

/// Elementwise mean, accumulated in double in ascending sample order.
inline Tensor mean_of(std::span<const Tensor> vectors) {
  if (vectors.empty()) throw ValueError("mean of an empty set");
  const Shape& shape = vectors.front().shape();
  std::vector<double> acc(vectors.front().size(), 0.0);
  for (const Tensor& v : vectors) {
    require_shape(v, shape, "mean_of");
    for (std::size_t d = 0; d < acc.size(); ++d) acc[d] += v[d];
  }
  Tensor out(shape);
  for (std::size_t d = 0; d < acc.size(); ++d) out[d] = static_cast<float>(acc[d] / static_cast<double>(vectors.size()));
  return out;
}

/// Mean and two-pass population variance over the given samples.
inline EmbeddingStats summarize_embeddings(std::span<const Tensor> samples) {
  if (samples.empty()) throw ValueError("summarize_embeddings: no samples");
  const std::size_t dim = samples.front().size();
  const double n = static_cast<double>(samples.size());
  std::vector<double> mean(dim, 0.0), var(dim, 0.0);
  for (const Tensor& s : samples) {
    require_shape(s, samples.front().shape(), "summarize_embeddings");
    for (std::size_t d = 0; d < dim; ++d) mean[d] += s[d];
  }
  for (double& m : mean) m /= n;
  for (const Tensor& s : samples) {
    for (std::size_t d = 0; d < dim; ++d) {
      const double dev = static_cast<double>(s[d]) - mean[d];
      var[d] += dev * dev;
    }
  }
  EmbeddingStats stats;
  stats.mean = Tensor(samples.front().shape());
  stats.variance = Tensor(samples.front().shape());
  for (std::size_t d = 0; d < dim; ++d) {
    stats.mean[d] = static_cast<float>(mean[d]);
    stats.variance[d] = static_cast<float>(var[d] / n);
  }
  stats.sample_count = samples.size();
  return stats;
}

inline Tensor central_embedding(const Checkpoint& ckpt, const Tensor& image,
                                const AugmentationPolicy& central = AugmentationPolicy::central_crop()) {
  if (central.kind != PolicyKind::kCentralCrop) throw ValueError("central_embedding requires a CentralCrop policy");
  check_image(ckpt.config, image);
  return embed(ckpt, apply_transform(image, sample_transform(central, image.dim(1), image.dim(2), 0, 0, 0)));
}

inline EmbeddingStats mean_embedding(const Checkpoint& ckpt, const Tensor& image, const AugmentationPolicy& policy,
                                     std::size_t samples, std::uint64_t global_seed, std::uint64_t image_index) {
  if (samples < 1) throw ValueError("mean_embedding: S must be >= 1");
  const auto embs = sample_embeddings(ckpt, image, policy, samples, global_seed, image_index);
  EmbeddingStats stats = summarize_embeddings(embs);
  stats.policy = policy.descriptor();
  stats.image_id = image_index;
  return stats;
}

/// Probability averaging: mean_s softmax(W a_s + b).
inline Tensor tta_from_embeddings(const LinearHead& head, std::span<const Tensor> embeddings) {
  if (embeddings.empty()) throw ValueError("tta: no embeddings");
  std::vector<Tensor> probs;
  probs.reserve(embeddings.size());
  for (const Tensor& a : embeddings) {
    head.check(a.size());
    probs.push_back(softmax(head.logits(a)));
  }
  return mean_of(probs);
}

/// softmax(W mean_s(a_s) + b).
inline Tensor metta_from_embeddings(const LinearHead& head, std::span<const Tensor> embeddings) {
  const Tensor mean = mean_of(embeddings);
  head.check(mean.size());
  return softmax(head.logits(mean));
}

/// Logit averaging: softmax(mean_s(W a_s + b)). Same prediction as MeTTA by
/// linearity of the head.
inline Tensor logit_average_from_embeddings(const LinearHead& head, std::span<const Tensor> embeddings) {
  if (embeddings.empty()) throw ValueError("logit averaging: no embeddings");
  std::vector<Tensor> logits;
  logits.reserve(embeddings.size());
  for (const Tensor& a : embeddings) {
    head.check(a.size());
    logits.push_back(head.logits(a));
  }
  return softmax(mean_of(logits));
}

inline Tensor tta_predict(const Checkpoint& ckpt, const LinearHead& head, const Tensor& image,
                          const AugmentationPolicy& policy, std::size_t samples, std::uint64_t global_seed,
                          std::uint64_t image_index) {
  head.check(ckpt.config.embedding_dim);
  return tta_from_embeddings(head, sample_embeddings(ckpt, image, policy, samples, global_seed, image_index));
}

inline Tensor metta_predict(const Checkpoint& ckpt, const LinearHead& head, const Tensor& image,
                            const AugmentationPolicy& policy, std::size_t samples, std::uint64_t global_seed,
                            std::uint64_t image_index) {
  head.check(ckpt.config.embedding_dim);
  return metta_from_embeddings(head, sample_embeddings(ckpt, image, policy, samples, global_seed, image_index));
}

// ---------------------------------------------------------------------------
// Retrieval

inline Tensor l2_normalized(const Tensor& v) {
  double sq = 0.0;
  for (float x : v.data()) sq += static_cast<double>(x) * x;
  if (!(sq > 0.0)) throw ValueError("cannot L2-normalise a zero embedding");
  const double inv = 1.0 / std::sqrt(sq);
  Tensor out(v.shape());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i] * inv);
  return out;
}

inline double dot(const Tensor& a, const Tensor& b) {
  require_shape(b, a.shape(), "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

/// Immutable corpus of unit-norm mean embeddings; safe for concurrent queries.
struct RetrievalIndex {
  std::vector<std::size_t> ids;
  std::vector<Tensor> vectors;
  std::string policy;
  std::size_t samples = 1;
  std::uint64_t seed = 0;

  std::size_t size() const noexcept { return ids.size(); }
};

struct Match {
  std::size_t id = 0;
  double score = 0.0;
  friend bool operator==(const Match&, const Match&) = default;
};

/// Unit-norm mean embedding of one image, with augmentation streams keyed by
/// the image content.
inline Tensor retrieval_vector(const Checkpoint& ckpt, const Tensor& image, const AugmentationPolicy& policy,
                               std::size_t samples, std::uint64_t seed) {
  return l2_normalized(mean_embedding(ckpt, image, policy, samples, seed, image_key(image)).mean);
}

inline RetrievalIndex build_index(const Checkpoint& ckpt, const Dataset& corpus, const AugmentationPolicy& policy,
                                  std::size_t samples = 1, std::uint64_t seed = 0) {
  if (corpus.empty()) throw ValueError("build_index: empty corpus");
  RetrievalIndex index;
  index.policy = policy.descriptor();
  index.samples = samples;
  index.seed = seed;
  index.vectors = parallel_map(corpus.size(), [&](std::size_t i) {
    return retrieval_vector(ckpt, corpus.images[i], policy, samples, seed);
  });
  for (std::size_t i = 0; i < corpus.size(); ++i) index.ids.push_back(i);
  return index;
}

/// Top-k by cosine similarity, descending; equal scores go to the lower id.
inline std::vector<Match> rank_by_cosine(const RetrievalIndex& index, const Tensor& unit_query, std::size_t k) {
  if (k < 1 || k > index.size()) {
    throw ValueError("query k=" + std::to_string(k) + " outside [1, " + std::to_string(index.size()) + "]");
  }
  std::vector<Match> all;
  all.reserve(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    all.push_back({index.ids[i], std::clamp(dot(index.vectors[i], unit_query), -1.0, 1.0)});
  }
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(),
                    [](const Match& a, const Match& b) { return a.score != b.score ? a.score > b.score : a.id < b.id; });
  all.resize(k);
  return all;
}

inline std::vector<Match> query_index(const RetrievalIndex& index, const Checkpoint& ckpt, const Tensor& query,
                                      const AugmentationPolicy& policy, std::size_t k) {
  if (k < 1 || k > index.size()) {
    throw ValueError("query k=" + std::to_string(k) + " outside [1, " + std::to_string(index.size()) + "]");
  }
  return rank_by_cosine(index, retrieval_vector(ckpt, query, policy, index.samples, index.seed), k);
}

// ---------------------------------------------------------------------------
// Embedding dump: `image_id,sample_index,dim_0..dim_{D-1}`; per image one row
// per sample, then a row with sample_index -1 holding the mean.

struct EmbeddingDumpRow {
  std::uint64_t image_id = 0;
  long sample_index = 0;
  std::vector<float> values;
  friend bool operator==(const EmbeddingDumpRow&, const EmbeddingDumpRow&) = default;
};

inline std::string format_float(float v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

inline void append_dump_rows(std::vector<EmbeddingDumpRow>& rows, std::uint64_t image_id,
                             std::span<const Tensor> samples) {
  for (std::size_t s = 0; s < samples.size(); ++s) {
    rows.push_back({image_id, static_cast<long>(s), samples[s].values()});
  }
  rows.push_back({image_id, -1, mean_of(samples).values()});
}

inline void write_embedding_dump(const std::filesystem::path& path, std::span<const EmbeddingDumpRow> rows,
                                 std::size_t dim) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "image_id,sample_index";
  for (std::size_t d = 0; d < dim; ++d) out << ",dim_" << d;
  out << '\n';
  for (const auto& row : rows) {
    if (row.values.size() != dim) throw ShapeError("embedding dump: row width mismatch");
    out << row.image_id << ',' << row.sample_index;
    for (float v : row.values) out << ',' << format_float(v);
    out << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

inline std::vector<EmbeddingDumpRow> read_embedding_dump(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("image_id,sample_index", 0) != 0) {
    throw FormatError(path.string() + ": missing embedding dump header");
  }
  std::vector<EmbeddingDumpRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream cells(line);
    std::string cell;
    EmbeddingDumpRow row;
    std::getline(cells, cell, ',');
    row.image_id = std::stoull(cell);
    std::getline(cells, cell, ',');
    row.sample_index = std::stol(cell);
    while (std::getline(cells, cell, ',')) {
      float v = 0.0f;
      auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (ec != std::errc{}) throw FormatError(path.string() + ": bad number '" + cell + "'");
      row.values.push_back(v);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace metta
