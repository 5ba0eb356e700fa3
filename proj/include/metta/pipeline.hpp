#pragma once

// Pipeline stages behind the `metta` subcommands. Stages exchange data only
// through files in the output directory.

#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "metta/analysis.hpp"
#include "metta/augment.hpp"
#include "metta/config.hpp"
#include "metta/core.hpp"
#include "metta/dataset.hpp"
#include "metta/errors.hpp"
#include "metta/gradcheck.hpp"
#include "metta/model.hpp"
#include "metta/properties.hpp"
#include "metta/rng.hpp"

namespace metta {

namespace artifact {
inline constexpr char kTrain[] = "train.mtds";
inline constexpr char kTest[] = "test.mtds";
inline constexpr char kBackbone[] = "backbone.mtck";
inline constexpr char kBackboneLoss[] = "backbone_loss.csv";
inline constexpr char kLinear[] = "linear.mtck";
inline constexpr char kLinearLoss[] = "linear_loss.csv";
inline constexpr char kEvalCsv[] = "eval_report.csv";
inline constexpr char kEvalJson[] = "eval_report.json";
inline constexpr char kInterpCsv[] = "interp_curve.csv";
inline constexpr char kInterpJson[] = "interp_curve.json";
inline constexpr char kJitter[] = "jitter.csv";
inline constexpr char kJitterSamples[] = "jitter_samples.csv";
inline constexpr char kRetrieval[] = "retrieval_report.csv";
inline constexpr char kEmbeddings[] = "embeddings.csv";
inline constexpr char kGradCheck[] = "grad_check.csv";
inline constexpr char kSelftest[] = "selftest.csv";
}  // namespace artifact

/// Seed of the held-out split, derived from the dataset seed.
inline std::uint64_t test_split_seed(std::uint64_t seed) {
  return mix_key({seed, static_cast<std::uint64_t>(Stream::kDataset), 0x7e57});
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

class Pipeline {
 public:
  Pipeline(ExperimentConfig cfg, std::ostream& log = std::cout) : cfg_(std::move(cfg)), log_(log) {}

  const ExperimentConfig& config() const { return cfg_; }
  std::filesystem::path out(const char* name) const { return cfg_.output_dir / name; }

  void gen_data() {
    std::filesystem::create_directories(cfg_.output_dir);
    const DatasetConfig& d = cfg_.dataset;
    Dataset train, test;
    if (d.path) {
      train = load_dataset(*d.path / artifact::kTrain);
      test = load_dataset(*d.path / artifact::kTest);
      if (train.image_shape() != test.image_shape() || train.num_classes != test.num_classes) {
        throw FormatError("train and test splits under " + d.path->string() + " disagree in geometry or classes");
      }
    } else {
      train = gen_shapes_dataset(d.seed, d.count, d.classes, d.image_size, d.channels);
      test = gen_shapes_dataset(test_split_seed(d.seed), d.test_count, d.classes, d.image_size, d.channels);
    }
    save_dataset(train, out(artifact::kTrain));
    save_dataset(test, out(artifact::kTest));
    log_ << "gen-data: " << train.size() << " train / " << test.size() << " test images, " << train.num_classes
         << " classes, " << train.channels << "x" << train.height << "x" << train.width << "\n";
  }

  void train_backbone_stage() {
    const Dataset train = load_split(artifact::kTrain);
    BackboneConfig bc{train.channels, train.height, train.width, cfg_.stages, cfg_.embedding_dim};
    bc.validate();
    const TrainingConfig& t = cfg_.training;
    const TrainOptions opts{t.epochs, t.batch, static_cast<float>(t.learning_rate), static_cast<float>(t.momentum),
                            t.seed};
    auto trained = train_backbone(build_backbone(bc, cfg_.init_seed), train, t.policy, opts);
    save_checkpoint(trained.value, out(artifact::kBackbone));
    write_loss(out(artifact::kBackboneLoss), trained.epoch_loss);
    log_ << "train-backbone: " << t.epochs << " epochs, final loss "
         << (trained.epoch_loss.empty() ? 0.0 : trained.epoch_loss.back()) << ", hash "
         << hex64(backbone_hash(trained.value)) << "\n";
  }

  void train_linear_stage() {
    Checkpoint ckpt = load_artifact_checkpoint(artifact::kBackbone, "train-backbone");
    const Dataset train = load_split(artifact::kTrain);
    const LinearConfig& l = cfg_.training.linear;
    const TrainOptions opts{l.epochs, l.batch, static_cast<float>(l.learning_rate), static_cast<float>(l.momentum),
                            l.seed};
    auto trained = train_linear_head(ckpt, train, cfg_.training.policy, opts);
    ckpt.set_head(trained.value);
    save_checkpoint(ckpt, out(artifact::kLinear));
    write_loss(out(artifact::kLinearLoss), trained.epoch_loss);
    log_ << "train-linear: " << l.epochs << " epochs, final loss "
         << (trained.epoch_loss.empty() ? 0.0 : trained.epoch_loss.back()) << "\n";
  }

  EvalReport eval_stage() {
    const Checkpoint ckpt = load_linear();
    const Dataset test = load_split(artifact::kTest);
    EvalReport report = evaluate_methods(ckpt, ckpt.head(), test, cfg_.eval.methods, cfg_.eval_policy(),
                                         cfg_.eval.sample_counts, cfg_.eval.seed);
    report.dataset = dataset_descriptor(test);
    report.checkpoint = "backbone_hash=" + hex64(backbone_hash(ckpt));
    emit_report(report, out(artifact::kEvalCsv), ReportFormat::kCsv);
    emit_report(report, out(artifact::kEvalJson), ReportFormat::kJson);
    for (const auto& r : report.rows) {
      log_ << "eval: " << to_string(r.method) << " S=" << r.samples << " top1=" << r.top1 << " nll=" << r.nll << "\n";
    }
    return report;
  }

  std::vector<InterpolationCurve> interp_stage() {
    const Checkpoint ckpt = load_linear();
    const Dataset test = analysis_subset(cfg_.analysis.interp_subset);
    std::vector<InterpolationCurve> curves;
    for (Endpoint e : {Endpoint::kCentralCrop, Endpoint::kSingleAugmentation}) {
      curves.push_back(interpolate_curve(ckpt, ckpt.head(), test, e, cfg_.analysis.alphas, cfg_.eval_policy(),
                                         cfg_.analysis.samples, cfg_.analysis.seed));
      const auto& c = curves.back();
      log_ << "interp: " << to_string(e) << " nll(alpha=0)=" << c.nll.front() << " nll(alpha=1)=" << c.nll.back()
           << "\n";
    }
    emit_report(curves, out(artifact::kInterpCsv), ReportFormat::kCsv);
    emit_report(curves, out(artifact::kInterpJson), ReportFormat::kJson);
    return curves;
  }

  JitterProfile jitter_stage() {
    const Checkpoint ckpt = load_linear();
    const Dataset subset = analysis_subset(cfg_.analysis.jitter_subset);
    JitterProfile p = jitter_stats(ckpt, ckpt.head(), subset, cfg_.eval_policy(), cfg_.analysis.samples,
                                   cfg_.analysis.seed);
    emit_report(p, out(artifact::kJitter), ReportFormat::kCsv);
    emit_sample_probabilities(p, out(artifact::kJitterSamples));
    std::size_t flipping = 0;
    for (std::size_t i = 0; i < p.rows.size(); ++i) {
      if (p.rows[i].cls == 0 && p.rows[i].argmax_flips > 0) ++flipping;
    }
    log_ << "jitter: " << p.image_ids.size() << " images, " << flipping << " with argmax flips\n";
    return p;
  }

  struct RetrievalRow {
    std::string policy;
    std::size_t corpus = 0;
    double recall_at_1 = 0.0;
    double self_at_1 = 0.0;
  };

  /// Recall@1 of perturbed queries (one random resized crop + flip of each
  /// corpus image) against single-scale and multi-scale indexes, plus the
  /// self-retrieval rate of the unperturbed images.
  std::vector<RetrievalRow> retrieve_stage() {
    const Checkpoint ckpt = load_artifact_checkpoint(artifact::kBackbone, "train-backbone");
    const Dataset corpus = analysis_subset(cfg_.analysis.retrieval_corpus);
    const std::uint64_t seed = cfg_.analysis.seed;
    const AugmentationPolicy perturb = AugmentationPolicy::random_resized_crop_flip(0.5, 1.0);
    std::vector<Tensor> queries;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      const Tensor& x = corpus.images[i];
      const TransformParams t = sample_transform(perturb, x.dim(1), x.dim(2), seed, image_key(x), 0);
      queries.push_back(apply_transform(x, t));
    }

    std::vector<RetrievalRow> rows;
    for (const AugmentationPolicy& policy :
         {AugmentationPolicy::central_crop(1.0), AugmentationPolicy::multi_scale(cfg_.analysis.retrieval_scales)}) {
      const RetrievalIndex index = build_index(ckpt, corpus, policy, 1, seed);
      std::size_t hits = 0, self = 0;
      for (std::size_t i = 0; i < corpus.size(); ++i) {
        hits += query_index(index, ckpt, queries[i], policy, 1).front().id == i;
        self += rank_by_cosine(index, index.vectors[i], 1).front().id == i;
      }
      const double n = static_cast<double>(corpus.size());
      rows.push_back({policy.descriptor(), corpus.size(), static_cast<double>(hits) / n, static_cast<double>(self) / n});
      log_ << "retrieve: " << rows.back().policy << " recall@1=" << rows.back().recall_at_1 << "\n";
    }

    std::ofstream csv = detail::open_report(out(artifact::kRetrieval));
    csv << "policy,corpus_size,recall_at_1,self_retrieval_at_1\n";
    for (const auto& r : rows) {
      csv << '"' << r.policy << "\"," << r.corpus << ',' << format_double(r.recall_at_1) << ','
          << format_double(r.self_at_1) << '\n';
    }
    detail::finish(csv, out(artifact::kRetrieval));

    const AugmentationPolicy multi = AugmentationPolicy::multi_scale(cfg_.analysis.retrieval_scales);
    std::vector<EmbeddingDumpRow> dump;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      const Tensor& x = corpus.images[i];
      append_dump_rows(dump, i, sample_embeddings(ckpt, x, multi, 1, seed, image_key(x)));
    }
    write_embedding_dump(out(artifact::kEmbeddings), dump, ckpt.config.embedding_dim);
    return rows;
  }

 private:
  Dataset load_split(const char* name) const {
    const auto path = out(name);
    if (!std::filesystem::exists(path)) {
      throw IoError("missing artifact " + path.string() + " (run gen-data first)");
    }
    return load_dataset(path);
  }

  Checkpoint load_artifact_checkpoint(const char* name, const char* producer) const {
    const auto path = out(name);
    if (!std::filesystem::exists(path)) {
      throw IoError("missing artifact " + path.string() + " (run " + producer + " first)");
    }
    return load_checkpoint(path);
  }

  Checkpoint load_linear() const {
    Checkpoint ckpt = load_artifact_checkpoint(artifact::kLinear, "train-linear");
    if (!ckpt.has_head()) {
      throw FormatError("checkpoint " + out(artifact::kLinear).string() + " has no linear head (run train-linear)");
    }
    return ckpt;
  }

  Dataset analysis_subset(std::size_t count) const {
    const Dataset test = load_split(artifact::kTest);
    return count == 0 ? test : test.subset(0, count);
  }

  std::string dataset_descriptor(const Dataset& ds) const {
    const DatasetConfig& d = cfg_.dataset;
    std::string src = d.path ? "path=" + d.path->string() : "shapes(seed=" + std::to_string(d.seed) + ")";
    return src + ";split=test;count=" + std::to_string(ds.size()) + ";classes=" + std::to_string(ds.num_classes) +
           ";shape=" + to_string(ds.image_shape());
  }

  static void write_loss(const std::filesystem::path& path, const std::vector<double>& loss) {
    std::ofstream csv = detail::open_report(path);
    csv << "epoch,loss\n";
    for (std::size_t e = 0; e < loss.size(); ++e) csv << e << ',' << format_double(loss[e]) << '\n';
    detail::finish(csv, path);
  }

  ExperimentConfig cfg_;
  std::ostream& log_;
};

// ---------------------------------------------------------------------------
// Config-free suites

inline std::vector<GradCheckResult> run_grad_check(std::uint64_t seed, std::ostream& log,
                                                   const std::optional<std::filesystem::path>& csv_path) {
  GradCheckOptions opts;
  opts.seed = seed;
  const auto results = run_all_gradient_checks(opts);
  for (const auto& r : results) {
    log << "grad-check: " << r.op << " " << (r.passed() ? "ok" : "FAIL") << " instances=" << r.instances
        << " failures=" << r.failures << " max_rel_error=" << r.max_relative_error << "\n";
  }
  if (csv_path) {
    std::ofstream csv = detail::open_report(*csv_path);
    csv << "op,instances,elements,failures,max_rel_error,passed\n";
    for (const auto& r : results) {
      csv << r.op << ',' << r.instances << ',' << r.elements << ',' << r.failures << ','
          << format_double(r.max_relative_error) << ',' << (r.passed() ? 1 : 0) << '\n';
    }
    detail::finish(csv, *csv_path);
  }
  return results;
}

/// Jensen bound, logit-averaging equivalence, finite-group invariance on a
/// freshly initialised backbone, and the softmax / log-sum-exp identities.
inline std::vector<PropertyResult> run_selftest(std::uint64_t seed, std::ostream& log,
                                                const std::optional<std::filesystem::path>& csv_path) {
  std::vector<PropertyResult> results;
  results.push_back(check_jensen_bound(seed));
  results.push_back(check_logit_average_equivalence(seed));
  const BackboneConfig bc{1, 16, 16, {{8, 2}, {16, 2}}, 16};
  const Checkpoint ckpt = build_backbone(bc, seed);
  const Dataset images = gen_shapes_dataset(seed, 12, 6, 16);
  results.push_back(check_group_invariance(ckpt, images.images, AugmentationPolicy::flip_group()));
  results.push_back(check_group_invariance(ckpt, images.images, AugmentationPolicy::rot90_group()));
  results.push_back(check_softmax_normalization(seed));
  results.push_back(check_log_sum_exp_identity(seed));
  for (const auto& r : results) {
    log << "selftest: " << r.name << " " << (r.passed() ? "ok" : "FAIL") << " trials=" << r.trials
        << " violations=" << r.violations << " worst=" << r.worst << " tol=" << r.tolerance << "\n";
  }
  if (csv_path) {
    std::ofstream csv = detail::open_report(*csv_path);
    csv << "property,trials,violations,worst,tolerance,passed\n";
    for (const auto& r : results) {
      csv << r.name << ',' << r.trials << ',' << r.violations << ',' << format_double(r.worst) << ','
          << format_double(r.tolerance) << ',' << (r.passed() ? 1 : 0) << '\n';
    }
    detail::finish(csv, *csv_path);
  }
  return results;
}

}  // namespace metta
