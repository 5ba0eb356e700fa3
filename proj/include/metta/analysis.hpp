#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "metta/augment.hpp"
#include "metta/core.hpp"
#include "metta/dataset.hpp"
#include "metta/errors.hpp"
#include "metta/model.hpp"
#include "metta/ops.hpp"
#include "metta/parallel.hpp"

namespace metta {

enum class Method { kCentral, kMetta, kTta };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::kCentral: return "central";
    case Method::kMetta: return "metta";
    case Method::kTta: return "tta";
  }
  return "?";
}

inline Method parse_method(const std::string& name) {
  for (Method m : {Method::kCentral, Method::kMetta, Method::kTta}) {
    if (to_string(m) == name) return m;
  }
  throw ValueError("unknown inference method '" + name + "'");
}

struct EvalRow {
  Method method = Method::kCentral;
  std::size_t samples = 1;
  double top1 = 0.0;
  double nll = 0.0;
  std::uint64_t seed = 0;
  friend bool operator==(const EvalRow&, const EvalRow&) = default;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::string dataset;
  std::string checkpoint;
  std::uint64_t seed = 0;

  const EvalRow& row(Method m, std::size_t samples) const {
    for (const auto& r : rows) {
      if (r.method == m && (m == Method::kCentral || r.samples == samples)) return r;
    }
    throw ValueError("report has no row for " + to_string(m) + " S=" + std::to_string(samples));
  }
};

struct PredictionScore {
  bool correct = false;
  double nll = 0.0;
};

inline PredictionScore score_prediction(const Tensor& probs, std::size_t label) {
  return {argmax<float>(probs.data()) == label, cross_entropy(probs, label)};
}

namespace detail {

// Sequential aggregation in image order.
inline std::pair<double, double> aggregate(std::span<const PredictionScore> scores) {
  if (scores.empty()) return {0.0, 0.0};
  std::size_t correct = 0;
  double nll = 0.0;
  for (const auto& s : scores) {
    correct += s.correct ? 1 : 0;
    nll += s.nll;
  }
  const double n = static_cast<double>(scores.size());
  return {static_cast<double>(correct) / n, nll / n};
}

}  // namespace detail

/// Linear evaluation of several inference methods at several sample counts.
/// Sample streams are keyed by image content, so sample s of an image is the
/// same draw for every S; the S-sample estimate uses the first S draws.
inline EvalReport evaluate_methods(const Checkpoint& ckpt, const LinearHead& head, const Dataset& ds,
                                   std::span<const Method> methods, const AugmentationPolicy& policy,
                                   std::span<const std::size_t> sample_counts, std::uint64_t seed) {
  head.check(ckpt.config.embedding_dim);
  ds.validate();
  if (head.num_classes() < ds.num_classes) throw ShapeError("evaluate: head has fewer classes than the dataset");
  bool stochastic = false;
  for (Method m : methods) stochastic = stochastic || m != Method::kCentral;
  std::size_t max_s = 0;
  for (std::size_t s : sample_counts) {
    if (s < 1) throw ValueError("evaluate: S must be >= 1");
    max_s = std::max(max_s, s);
  }
  if (stochastic && max_s == 0) throw ValueError("evaluate: no sample counts given");

  struct PerImage {
    std::vector<PredictionScore> central;               // 0 or 1 entries
    std::vector<std::vector<PredictionScore>> by_count;  // [count][metta, tta]
  };
  const bool want_central = std::find(methods.begin(), methods.end(), Method::kCentral) != methods.end();
  const auto per_image = parallel_map(ds.size(), [&](std::size_t i) {
    PerImage out;
    const Tensor& image = ds.images[i];
    const std::size_t label = ds.labels[i];
    if (want_central) out.central.push_back(score_prediction(softmax(head.logits(central_embedding(ckpt, image))), label));
    if (stochastic) {
      const auto embs = sample_embeddings(ckpt, image, policy, max_s, seed, image_key(image));
      for (std::size_t s : sample_counts) {
        const std::span<const Tensor> first(embs.data(), policy.enumerable() ? embs.size() : s);
        out.by_count.push_back({score_prediction(metta_from_embeddings(head, first), label),
                                score_prediction(tta_from_embeddings(head, first), label)});
      }
    }
    return out;
  });

  EvalReport report;
  report.seed = seed;
  std::vector<PredictionScore> column(ds.size());
  for (Method m : methods) {
    if (m == Method::kCentral) {
      for (std::size_t i = 0; i < ds.size(); ++i) column[i] = per_image[i].central[0];
      const auto [top1, nll] = detail::aggregate(column);
      report.rows.push_back({m, 1, top1, nll, seed});
      continue;
    }
    for (std::size_t c = 0; c < sample_counts.size(); ++c) {
      for (std::size_t i = 0; i < ds.size(); ++i) column[i] = per_image[i].by_count[c][m == Method::kMetta ? 0 : 1];
      const auto [top1, nll] = detail::aggregate(column);
      report.rows.push_back({m, sample_counts[c], top1, nll, seed});
    }
  }
  return report;
}

inline EvalReport evaluate(const Checkpoint& ckpt, const LinearHead& head, const Dataset& ds, Method method,
                           const AugmentationPolicy& policy, std::size_t samples, std::uint64_t seed) {
  const Method methods[] = {method};
  const std::size_t counts[] = {samples};
  return evaluate_methods(ckpt, head, ds, methods, policy, counts, seed);
}

// ---------------------------------------------------------------------------
// 1-d interpolation between the mean embedding and an endpoint embedding.

enum class Endpoint { kCentralCrop, kSingleAugmentation };

inline std::string to_string(Endpoint e) {
  return e == Endpoint::kCentralCrop ? "central_crop" : "single_augmentation";
}

inline Endpoint parse_endpoint(const std::string& name) {
  if (name == "central_crop") return Endpoint::kCentralCrop;
  if (name == "single_augmentation") return Endpoint::kSingleAugmentation;
  throw ValueError("unknown interpolation endpoint '" + name + "'");
}

struct InterpolationCurve {
  Endpoint endpoint = Endpoint::kCentralCrop;
  std::vector<double> alphas;
  std::vector<double> nll;
  std::vector<double> accuracy;
};

inline std::vector<double> default_alpha_grid() {
  std::vector<double> a;
  for (int i = 0; i <= 10; ++i) a.push_back(i / 10.0);
  return a;
}

inline void validate_alphas(std::span<const double> alphas) {
  if (alphas.size() < 2) throw ValueError("alpha grid needs at least the endpoints 0 and 1");
  for (std::size_t i = 0; i < alphas.size(); ++i) {
    if (!(alphas[i] >= 0.0 && alphas[i] <= 1.0)) throw ValueError("alpha values must lie in [0, 1]");
    if (i > 0 && !(alphas[i] > alphas[i - 1])) throw ValueError("alpha values must be strictly ascending");
  }
  if (alphas.front() != 0.0 || alphas.back() != 1.0) throw ValueError("alpha grid must include 0 and 1");
}

/// e(alpha) = (1 - alpha) * mean + alpha * endpoint
inline Tensor lerp(const Tensor& mean, const Tensor& endpoint, double alpha) {
  require_shape(endpoint, mean.shape(), "interpolation endpoint");
  Tensor out(mean.shape());
  for (std::size_t d = 0; d < mean.size(); ++d) {
    out[d] = static_cast<float>((1.0 - alpha) * static_cast<double>(mean[d]) + alpha * static_cast<double>(endpoint[d]));
  }
  return out;
}

/// Per alpha: metrics of the head on e(alpha), averaged per image (and over
/// the S augmentation endpoints for kSingleAugmentation), then over images.
inline InterpolationCurve interpolate_curve(const Checkpoint& ckpt, const LinearHead& head, const Dataset& ds,
                                            Endpoint endpoint, std::span<const double> alphas,
                                            const AugmentationPolicy& policy, std::size_t samples,
                                            std::uint64_t seed) {
  validate_alphas(alphas);
  head.check(ckpt.config.embedding_dim);
  if (ds.empty()) throw ValueError("interpolate_curve: empty dataset");
  struct PerAlpha {
    std::vector<double> nll, accuracy;
  };
  const auto per_image = parallel_map(ds.size(), [&](std::size_t i) {
    const Tensor& image = ds.images[i];
    const std::size_t label = ds.labels[i];
    const auto embs = sample_embeddings(ckpt, image, policy, samples, seed, image_key(image));
    const Tensor mean = mean_of(embs);
    const std::vector<Tensor> centre =
        endpoint == Endpoint::kCentralCrop ? std::vector<Tensor>{central_embedding(ckpt, image)} : std::vector<Tensor>{};
    const std::vector<Tensor>& ends = endpoint == Endpoint::kCentralCrop ? centre : embs;
    PerAlpha out;
    for (double a : alphas) {
      double nll = 0.0, acc = 0.0;
      for (const Tensor& e : ends) {
        const auto s = score_prediction(softmax(head.logits(lerp(mean, e, a))), label);
        nll += s.nll;
        acc += s.correct ? 1.0 : 0.0;
      }
      out.nll.push_back(nll / static_cast<double>(ends.size()));
      out.accuracy.push_back(acc / static_cast<double>(ends.size()));
    }
    return out;
  });

  InterpolationCurve curve;
  curve.endpoint = endpoint;
  curve.alphas.assign(alphas.begin(), alphas.end());
  const double n = static_cast<double>(ds.size());
  for (std::size_t k = 0; k < alphas.size(); ++k) {
    double nll = 0.0, acc = 0.0;
    for (const auto& img : per_image) {
      nll += img.nll[k];
      acc += img.accuracy[k];
    }
    curve.nll.push_back(nll / n);
    curve.accuracy.push_back(acc / n);
  }
  return curve;
}

// ---------------------------------------------------------------------------
// Prediction jitter across augmentation samples.

struct JitterRow {
  std::uint64_t image_id = 0;
  std::size_t cls = 0;
  double prob_mean = 0.0, prob_std = 0.0, prob_min = 0.0, prob_max = 0.0;
  std::size_t argmax_flips = 0;
  friend bool operator==(const JitterRow&, const JitterRow&) = default;
};

struct JitterProfile {
  std::vector<JitterRow> rows;
  // Per image: the S per-sample probability vectors the rows summarise.
  std::vector<std::uint64_t> image_ids;
  std::vector<std::vector<Tensor>> sample_probs;
};

/// Per-class mean, population std, min and max over samples, plus the number
/// of samples whose argmax differs from the most frequent argmax (ties to the
/// lowest class).
inline std::vector<JitterRow> jitter_rows(std::uint64_t image_id, std::span<const Tensor> probs) {
  if (probs.size() < 2) throw ValueError("jitter statistics need S >= 2");
  const std::size_t classes = probs.front().size();
  std::vector<std::size_t> votes(classes, 0), winners;
  for (const Tensor& p : probs) {
    require_shape(p, probs.front().shape(), "jitter probabilities");
    winners.push_back(argmax<float>(p.data()));
    ++votes[winners.back()];
  }
  const std::size_t majority = static_cast<std::size_t>(std::max_element(votes.begin(), votes.end()) - votes.begin());
  const std::size_t flips = static_cast<std::size_t>(std::count_if(winners.begin(), winners.end(),
                                                                   [&](std::size_t w) { return w != majority; }));
  std::vector<JitterRow> rows;
  const double n = static_cast<double>(probs.size());
  for (std::size_t c = 0; c < classes; ++c) {
    double sum = 0.0, lo = probs.front()[c], hi = probs.front()[c];
    for (const Tensor& p : probs) {
      sum += p[c];
      lo = std::min<double>(lo, p[c]);
      hi = std::max<double>(hi, p[c]);
    }
    const double mean = sum / n;
    double sq = 0.0;
    for (const Tensor& p : probs) sq += (p[c] - mean) * (p[c] - mean);
    rows.push_back({image_id, c, mean, std::sqrt(sq / n), lo, hi, flips});
  }
  return rows;
}

inline JitterProfile jitter_stats(const Checkpoint& ckpt, const LinearHead& head, const Dataset& subset,
                                  const AugmentationPolicy& policy, std::size_t samples, std::uint64_t seed) {
  if (samples < 2) throw ValueError("jitter_stats: S must be >= 2");
  head.check(ckpt.config.embedding_dim);
  JitterProfile profile;
  profile.sample_probs = parallel_map(subset.size(), [&](std::size_t i) {
    const Tensor& image = subset.images[i];
    const auto embs = sample_embeddings(ckpt, image, policy, samples, seed, image_key(image));
    std::vector<Tensor> probs;
    for (const Tensor& e : embs) probs.push_back(softmax(head.logits(e)));
    return probs;
  });
  for (std::size_t i = 0; i < subset.size(); ++i) {
    profile.image_ids.push_back(i);
    for (auto& row : jitter_rows(i, profile.sample_probs[i])) profile.rows.push_back(row);
  }
  return profile;
}

// ---------------------------------------------------------------------------
// Report emission.
//
//   EvalReport CSV:  method,S,top1,nll,seed
//   Curve CSV:       alpha,endpoint,nll,accuracy
//   Jitter CSV:      image_id,class,prob_mean,prob_std,prob_min,prob_max,argmax_flips

enum class ReportFormat { kCsv, kJson };

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace detail {

inline std::ofstream open_report(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  return out;
}

inline void finish(std::ofstream& out, const std::filesystem::path& path) {
  out.flush();
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace detail

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"method", to_string(row.method)}, {"S", row.samples}, {"top1", row.top1}, {"nll", row.nll},
                    {"seed", row.seed}});
  }
  return {{"dataset", r.dataset}, {"checkpoint", r.checkpoint}, {"seed", r.seed}, {"rows", rows}};
}

inline nlohmann::json to_json(const std::vector<InterpolationCurve>& curves) {
  nlohmann::json points = nlohmann::json::array();
  for (const auto& c : curves) {
    for (std::size_t k = 0; k < c.alphas.size(); ++k) {
      points.push_back({{"alpha", c.alphas[k]}, {"endpoint", to_string(c.endpoint)}, {"nll", c.nll[k]},
                        {"accuracy", c.accuracy[k]}});
    }
  }
  return {{"points", points}};
}

inline nlohmann::json to_json(const JitterProfile& p) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : p.rows) {
    rows.push_back({{"image_id", r.image_id}, {"class", r.cls}, {"prob_mean", r.prob_mean}, {"prob_std", r.prob_std},
                    {"prob_min", r.prob_min}, {"prob_max", r.prob_max}, {"argmax_flips", r.argmax_flips}});
  }
  return {{"rows", rows}};
}

inline void emit_report(const EvalReport& r, const std::filesystem::path& path, ReportFormat format) {
  auto out = detail::open_report(path);
  if (format == ReportFormat::kJson) {
    out << to_json(r).dump(2) << '\n';
  } else {
    out << "method,S,top1,nll,seed\n";
    for (const auto& row : r.rows) {
      out << to_string(row.method) << ',' << row.samples << ',' << format_double(row.top1) << ','
          << format_double(row.nll) << ',' << row.seed << '\n';
    }
  }
  detail::finish(out, path);
}

inline void emit_report(const std::vector<InterpolationCurve>& curves, const std::filesystem::path& path,
                        ReportFormat format) {
  auto out = detail::open_report(path);
  if (format == ReportFormat::kJson) {
    out << to_json(curves).dump(2) << '\n';
  } else {
    out << "alpha,endpoint,nll,accuracy\n";
    for (const auto& c : curves) {
      for (std::size_t k = 0; k < c.alphas.size(); ++k) {
        out << format_double(c.alphas[k]) << ',' << to_string(c.endpoint) << ',' << format_double(c.nll[k]) << ','
            << format_double(c.accuracy[k]) << '\n';
      }
    }
  }
  detail::finish(out, path);
}

inline void emit_report(const InterpolationCurve& curve, const std::filesystem::path& path, ReportFormat format) {
  emit_report(std::vector<InterpolationCurve>{curve}, path, format);
}

inline void emit_report(const JitterProfile& p, const std::filesystem::path& path, ReportFormat format) {
  auto out = detail::open_report(path);
  if (format == ReportFormat::kJson) {
    out << to_json(p).dump(2) << '\n';
  } else {
    out << "image_id,class,prob_mean,prob_std,prob_min,prob_max,argmax_flips\n";
    for (const auto& r : p.rows) {
      out << r.image_id << ',' << r.cls << ',' << format_double(r.prob_mean) << ',' << format_double(r.prob_std)
          << ',' << format_double(r.prob_min) << ',' << format_double(r.prob_max) << ',' << r.argmax_flips << '\n';
    }
  }
  detail::finish(out, path);
}

/// Per-sample probability matrix behind a jitter profile:
/// `image_id,sample_index,p_0..p_{K-1}`.
inline void emit_sample_probabilities(const JitterProfile& p, const std::filesystem::path& path) {
  auto out = detail::open_report(path);
  const std::size_t classes = p.sample_probs.empty() || p.sample_probs[0].empty() ? 0 : p.sample_probs[0][0].size();
  out << "image_id,sample_index";
  for (std::size_t c = 0; c < classes; ++c) out << ",p_" << c;
  out << '\n';
  for (std::size_t i = 0; i < p.sample_probs.size(); ++i) {
    for (std::size_t s = 0; s < p.sample_probs[i].size(); ++s) {
      out << p.image_ids[i] << ',' << s;
      for (float v : p.sample_probs[i][s].data()) out << ',' << format_float(v);
      out << '\n';
    }
  }
  detail::finish(out, path);
}

/// Minimal CSV reader for the report files above: header row plus string
/// cells, with double-quoted cells.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return i;
    }
    throw FormatError("csv: no column '" + name + "'");
  }
};

inline CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  auto split = [](const std::string& line) {
    std::vector<std::string> cells(1);
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      const char c = line[i];
      if (c == '"') {
        if (quoted && i + 1 < line.size() && line[i + 1] == '"') {
          cells.back() += '"';
          ++i;
        } else {
          quoted = !quoted;
        }
      } else if (c == ',' && !quoted) {
        cells.emplace_back();
      } else {
        cells.back() += c;
      }
    }
    return cells;
  };
  CsvTable table;
  std::string line;
  if (std::getline(in, line)) table.header = split(line);
  while (std::getline(in, line)) {
    if (!line.empty()) table.rows.push_back(split(line));
  }
  return table;
}

}  // namespace metta
