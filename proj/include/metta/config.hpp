#pragma once

// JSON experiment configuration for the command-line pipeline.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "metta/analysis.hpp"
#include "metta/augment.hpp"
#include "metta/errors.hpp"
#include "metta/model.hpp"

namespace metta {

struct DatasetConfig {
  // Either generated (seed, counts, geometry) or loaded from `path`, a
  // directory holding train.mtds and test.mtds.
  std::optional<std::filesystem::path> path;
  std::uint64_t seed = 0;
  std::size_t count = 0, test_count = 0, classes = 0, image_size = 0, channels = 1;
};

struct LinearConfig {
  std::size_t epochs = 0, batch = 0;
  double learning_rate = 0.0, momentum = 0.0;
  std::uint64_t seed = 0;
};

struct TrainingConfig {
  std::size_t epochs = 0, batch = 0;
  double learning_rate = 0.0, momentum = 0.0;
  std::uint64_t seed = 0;
  AugmentationPolicy policy;
  LinearConfig linear;
};

struct EvalConfig {
  std::vector<Method> methods;
  std::vector<std::size_t> sample_counts;
  std::uint64_t seed = 0;
  std::optional<AugmentationPolicy> policy;  // defaults to the training policy
};

struct AnalysisConfig {
  std::vector<double> alphas;
  std::size_t samples = 0;
  std::size_t interp_subset = 0;  // 0 = whole test split
  std::size_t jitter_subset = 0;
  std::size_t retrieval_corpus = 0;
  std::vector<double> retrieval_scales;
  std::uint64_t seed = 0;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  std::vector<StageSpec> stages;
  std::size_t embedding_dim = 0;
  std::uint64_t init_seed = 0;
  TrainingConfig training;
  EvalConfig eval;
  AnalysisConfig analysis;
  std::filesystem::path output_dir;

  /// Replace every seed in the configuration.
  void override_seed(std::uint64_t seed) {
    dataset.seed = seed;
    init_seed = seed;
    training.seed = seed;
    training.linear.seed = seed;
    eval.seed = seed;
    analysis.seed = seed;
  }

  AugmentationPolicy eval_policy() const { return eval.policy.value_or(training.policy); }
};

namespace config_detail {

using nlohmann::json;

// Walks a JSON object, collecting the dotted names of missing keys so they
// can be reported together.
class Section {
 public:
  Section(const json* node, std::string prefix, std::vector<std::string>& missing)
      : node_(node), prefix_(std::move(prefix)), missing_(missing) {}

  bool present() const { return node_ != nullptr; }
  bool has(const std::string& key) const { return node_ && node_->contains(key); }

  template <class T>
  T get(const std::string& key, T fallback = T{}) {
    seen_.insert(key);
    if (!has(key)) {
      if (node_) missing_.push_back(name(key));
      return fallback;
    }
    return convert<T>(key);
  }

  template <class T>
  std::optional<T> optional(const std::string& key) {
    seen_.insert(key);
    if (!has(key)) return std::nullopt;
    return convert<T>(key);
  }

  Section child(const std::string& key, bool required = true) {
    seen_.insert(key);
    if (!has(key)) {
      if (required && node_) missing_.push_back(name(key));
      return Section(nullptr, name(key), missing_);
    }
    const json& sub = node_->at(key);
    if (!sub.is_object()) throw ConfigError("config key '" + name(key) + "' must be an object");
    return Section(&sub, name(key), missing_);
  }

  const json& raw(const std::string& key) const { return node_->at(key); }
  std::string name(const std::string& key) const { return prefix_.empty() ? key : prefix_ + "." + key; }

  void reject_unknown() const {
    if (!node_) return;
    for (const auto& [key, value] : node_->items()) {
      if (!seen_.count(key)) throw ConfigError("unknown config key '" + name(key) + "'");
    }
  }

 private:
  template <class T>
  T convert(const std::string& key) const {
    const json& v = node_->at(key);
    if constexpr (std::is_unsigned_v<T>) {
      if (!v.is_number_unsigned()) throw ConfigError("config key '" + name(key) + "' must be a non-negative integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError("config key '" + name(key) + "' must be a number");
    }
    try {
      return v.get<T>();
    } catch (const json::exception&) {
      throw ConfigError("config key '" + name(key) + "' has the wrong type");
    }
  }

  const json* node_;
  std::string prefix_;
  std::vector<std::string>& missing_;
  std::set<std::string> seen_;
};

inline AugmentationPolicy parse_policy(Section s) {
  AugmentationPolicy p;
  try {
    p.kind = parse_policy_kind(s.get<std::string>("kind", "CentralCrop"));
  } catch (const ValueError& e) {
    throw ConfigError(s.name("kind") + ": " + e.what());
  }
  if (auto v = s.optional<double>("crop_fraction")) p.crop_fraction = *v;
  if (auto v = s.optional<double>("s_lo")) p.scale_lo = *v;
  if (auto v = s.optional<double>("s_hi")) p.scale_hi = *v;
  if (auto v = s.optional<std::size_t>("size")) p.output_size = *v;
  if (auto v = s.optional<std::vector<double>>("scales")) p.scales = *v;
  if (p.kind == PolicyKind::kMultiScale && p.scales.empty()) p.scales = AugmentationPolicy::multi_scale().scales;
  s.reject_unknown();
  try {
    p.validate();
  } catch (const ValueError& e) {
    throw ConfigError(s.name("kind") + ": " + e.what());
  }
  return p;
}

}  // namespace config_detail

inline ExperimentConfig parse_config(const nlohmann::json& root) {
  using config_detail::Section;
  if (!root.is_object()) throw ConfigError("config root must be a JSON object");
  std::vector<std::string> missing;
  Section top(&root, "", missing);
  ExperimentConfig cfg;

  cfg.output_dir = top.get<std::string>("output_dir");

  Section ds = top.child("dataset");
  if (ds.has("path")) {
    cfg.dataset.path = ds.get<std::string>("path");
  } else if (ds.present()) {
    cfg.dataset.seed = ds.get<std::uint64_t>("seed");
    cfg.dataset.count = ds.get<std::size_t>("count");
    cfg.dataset.test_count = ds.get<std::size_t>("test_count");
    cfg.dataset.classes = ds.get<std::size_t>("classes");
    cfg.dataset.image_size = ds.get<std::size_t>("image_size");
    cfg.dataset.channels = ds.optional<std::size_t>("channels").value_or(1);
  }
  ds.reject_unknown();

  Section bb = top.child("backbone");
  if (bb.present() && bb.has("stages")) {
    const auto& stages = bb.raw("stages");
    if (!stages.is_array() || stages.empty()) throw ConfigError("config key 'backbone.stages' must be a non-empty array");
    for (std::size_t i = 0; i < stages.size(); ++i) {
      const std::string prefix = "backbone.stages[" + std::to_string(i) + "]";
      if (!stages[i].is_object()) throw ConfigError("config key '" + prefix + "' must be an object");
      Section st(&stages[i], prefix, missing);
      cfg.stages.push_back({st.get<std::size_t>("channels"), st.get<std::size_t>("stride")});
      st.reject_unknown();
    }
  }
  bb.get<nlohmann::json>("stages");
  cfg.embedding_dim = bb.get<std::size_t>("embedding_dim");
  cfg.init_seed = bb.get<std::uint64_t>("init_seed");
  bb.reject_unknown();

  Section tr = top.child("training");
  cfg.training.epochs = tr.get<std::size_t>("epochs");
  cfg.training.batch = tr.get<std::size_t>("batch");
  cfg.training.learning_rate = tr.get<double>("lr");
  cfg.training.momentum = tr.get<double>("momentum");
  cfg.training.seed = tr.get<std::uint64_t>("seed");
  Section pol = tr.child("policy");
  if (pol.present()) cfg.training.policy = config_detail::parse_policy(pol);
  Section lin = tr.child("linear");
  cfg.training.linear.epochs = lin.get<std::size_t>("epochs");
  cfg.training.linear.batch = lin.get<std::size_t>("batch");
  cfg.training.linear.learning_rate = lin.get<double>("lr");
  cfg.training.linear.momentum = lin.get<double>("momentum");
  cfg.training.linear.seed = lin.get<std::uint64_t>("seed");
  lin.reject_unknown();
  tr.reject_unknown();

  Section ev = top.child("eval");
  for (const auto& m : ev.get<std::vector<std::string>>("methods")) {
    try {
      cfg.eval.methods.push_back(parse_method(m));
    } catch (const ValueError& e) {
      throw ConfigError(std::string("eval.methods: ") + e.what());
    }
  }
  cfg.eval.sample_counts = ev.get<std::vector<std::size_t>>("S");
  cfg.eval.seed = ev.get<std::uint64_t>("seed");
  Section epol = ev.child("policy", false);
  if (epol.present()) cfg.eval.policy = config_detail::parse_policy(epol);
  ev.reject_unknown();

  Section an = top.child("analysis");
  cfg.analysis.alphas = an.get<std::vector<double>>("alphas");
  cfg.analysis.samples = an.get<std::size_t>("S");
  cfg.analysis.jitter_subset = an.get<std::size_t>("jitter_subset");
  cfg.analysis.retrieval_corpus = an.get<std::size_t>("retrieval_corpus");
  cfg.analysis.seed = an.get<std::uint64_t>("seed");
  cfg.analysis.interp_subset = an.optional<std::size_t>("interp_subset").value_or(0);
  cfg.analysis.retrieval_scales =
      an.optional<std::vector<double>>("retrieval_scales").value_or(AugmentationPolicy::multi_scale().scales);
  an.reject_unknown();
  top.reject_unknown();

  if (!missing.empty()) {
    std::string msg = "missing config keys:";
    for (const auto& k : missing) msg += " " + k;
    throw ConfigError(msg);
  }

  if (cfg.eval.methods.empty()) throw ConfigError("eval.methods must not be empty");
  if (cfg.eval.sample_counts.empty()) throw ConfigError("eval.S must not be empty");
  for (std::size_t s : cfg.eval.sample_counts) {
    if (s == 0) throw ConfigError("eval.S entries must be >= 1");
  }
  try {
    validate_alphas(cfg.analysis.alphas);
  } catch (const ValueError& e) {
    throw ConfigError(std::string("analysis.alphas: ") + e.what());
  }
  if (cfg.analysis.samples < 2) throw ConfigError("analysis.S must be >= 2");
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path.string());
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(root);
}

}  // namespace metta
