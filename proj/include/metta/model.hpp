#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "metta/augment.hpp"
#include "metta/autodiff.hpp"
#include "metta/binary_io.hpp"
#include "metta/dataset.hpp"
#include "metta/errors.hpp"
#include "metta/ops.hpp"
#include "metta/optim.hpp"
#include "metta/parallel.hpp"
#include "metta/rng.hpp"
#include "metta/tensor.hpp"

namespace metta {

struct StageSpec {
  std::size_t channels = 0;
  std::size_t stride = 1;
  friend bool operator==(const StageSpec&, const StageSpec&) = default;
};

/// Stack of 3x3 conv (zero pad 1) + ReLU stages followed by global average
/// pooling; the pooled vector is the embedding.
struct BackboneConfig {
  static constexpr std::size_t kKernel = 3;
  static constexpr std::size_t kPad = 1;

  std::size_t channels = 1, height = 32, width = 32;
  std::vector<StageSpec> stages;
  std::size_t embedding_dim = 0;

  static BackboneConfig standard(std::size_t channels = 1, std::size_t height = 32, std::size_t width = 32) {
    return BackboneConfig{channels, height, width, {{16, 2}, {32, 2}, {64, 2}}, 64};
  }

  void validate() const {
    if (channels == 0 || height == 0 || width == 0) throw ValueError("backbone: input shape must be positive");
    if (stages.empty()) throw ValueError("backbone: at least one stage required");
    for (const StageSpec& s : stages) {
      if (s.channels == 0 || s.stride == 0) throw ValueError("backbone: stage channels and stride must be positive");
    }
    if (embedding_dim != stages.back().channels) {
      throw ValueError("backbone: embedding_dim " + std::to_string(embedding_dim) +
                       " must equal last stage channels " + std::to_string(stages.back().channels));
    }
  }

  Shape stage_kernel_shape(std::size_t i) const {
    const std::size_t in = i == 0 ? channels : stages[i - 1].channels;
    return {stages[i].channels, in, kKernel, kKernel};
  }

  /// Sum over stages of out * in * 3 * 3 (convolutions carry no bias).
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < stages.size(); ++i) n += shape_size(stage_kernel_shape(i));
    return n;
  }

  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

struct LinearHead {
  Tensor weight;  // [classes, embedding_dim]
  Tensor bias;    // [classes]

  std::size_t num_classes() const { return weight.empty() ? 0 : weight.dim(0); }

  static LinearHead zeros(std::size_t classes, std::size_t dim) {
    return LinearHead{Tensor({classes, dim}), Tensor({classes})};
  }

  void check(std::size_t embedding_dim) const {
    if (weight.rank() != 2 || bias.rank() != 1 || bias.dim(0) != weight.dim(0)) {
      throw ShapeError("linear head: inconsistent weight " + to_string(weight.shape()) + " / bias " +
                       to_string(bias.shape()));
    }
    if (weight.dim(1) != embedding_dim) {
      throw ShapeError("linear head expects embeddings of size " + std::to_string(weight.dim(1)) + ", got " +
                       std::to_string(embedding_dim));
    }
  }

  Tensor logits(const Tensor& embedding) const { return dense(embedding, weight, bias); }

  friend bool operator==(const LinearHead&, const LinearHead&) = default;
};

struct TrainingMetadata {
  std::uint64_t seed = 0;
  std::uint32_t epochs = 0;
  std::string policy;
  friend bool operator==(const TrainingMetadata&, const TrainingMetadata&) = default;
};

inline std::string stage_param_name(std::size_t i) { return "stage" + std::to_string(i) + ".weight"; }
inline constexpr char kHeadWeight[] = "head.weight";
inline constexpr char kHeadBias[] = "head.bias";
inline constexpr char kTrainHeadWeight[] = "train_head.weight";
inline constexpr char kTrainHeadBias[] = "train_head.bias";

/// Backbone parameters plus up to two linear heads: the temporary head used
/// while training the backbone ("train_head.*") and the linear-evaluation
/// head ("head.*").
struct Checkpoint {
  BackboneConfig config;
  std::map<std::string, Tensor> params;
  TrainingMetadata meta;

  const Tensor& stage_weight(std::size_t i) const { return params.at(stage_param_name(i)); }

  bool has_head() const { return params.contains(kHeadWeight) && params.contains(kHeadBias); }
  LinearHead head() const {
    if (!has_head()) throw ValueError("checkpoint has no linear evaluation head");
    return LinearHead{params.at(kHeadWeight), params.at(kHeadBias)};
  }
  void set_head(LinearHead h) {
    h.check(config.embedding_dim);
    params[kHeadWeight] = std::move(h.weight);
    params[kHeadBias] = std::move(h.bias);
  }

  bool has_training_head() const { return params.contains(kTrainHeadWeight) && params.contains(kTrainHeadBias); }
  LinearHead training_head() const {
    if (!has_training_head()) throw ValueError("checkpoint has no training head");
    return LinearHead{params.at(kTrainHeadWeight), params.at(kTrainHeadBias)};
  }
  void set_training_head(LinearHead h) {
    h.check(config.embedding_dim);
    params[kTrainHeadWeight] = std::move(h.weight);
    params[kTrainHeadBias] = std::move(h.bias);
  }

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

/// FNV-1a over the raw bytes of every backbone tensor, in stage order.
inline std::uint64_t backbone_hash(const Checkpoint& ckpt) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::size_t i = 0; i < ckpt.config.stages.size(); ++i) {
    const Tensor& w = ckpt.stage_weight(i);
    const auto* bytes = reinterpret_cast<const unsigned char*>(w.data().data());
    for (std::size_t b = 0; b < w.size() * sizeof(float); ++b) {
      h ^= bytes[b];
      h *= 0x100000001b3ull;
    }
  }
  return h;
}

/// He-style uniform initialisation: U(-sqrt(6 / fan_in), sqrt(6 / fan_in)).
inline Checkpoint build_backbone(const BackboneConfig& cfg, std::uint64_t init_seed) {
  cfg.validate();
  Checkpoint ckpt;
  ckpt.config = cfg;
  ckpt.meta.seed = init_seed;
  for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
    const Shape shape = cfg.stage_kernel_shape(i);
    const double fan_in = static_cast<double>(shape[1] * shape[2] * shape[3]);
    const double bound = std::sqrt(6.0 / fan_in);
    CounterRng rng({init_seed, static_cast<std::uint64_t>(Stream::kInit), i});
    Tensor w(shape);
    for (float& v : w.data()) v = static_cast<float>(rng.uniform(-bound, bound));
    ckpt.params.emplace(stage_param_name(i), std::move(w));
  }
  return ckpt;
}

inline void check_image(const BackboneConfig& cfg, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != cfg.channels) {
    throw ShapeError("embed: expected a [" + std::to_string(cfg.channels) + ",H,W] image, got " +
                     to_string(image.shape()));
  }
}

/// Forward pass to the globally pooled embedding. Spatial size may differ
/// from the configured one (multi-scale inputs); channels may not.
inline Tensor embed(const Checkpoint& ckpt, const Tensor& image) {
  check_image(ckpt.config, image);
  Tensor x = image;
  for (std::size_t i = 0; i < ckpt.config.stages.size(); ++i) {
    x = relu(conv2d(x, ckpt.stage_weight(i), static_cast<long>(ckpt.config.stages[i].stride),
                    static_cast<long>(BackboneConfig::kPad)));
  }
  return global_avg_pool(x);
}

inline NodeId embed_on_tape(Tape& tape, const BackboneConfig& cfg, std::span<const NodeId> stage_weights,
                            const Tensor& image) {
  check_image(cfg, image);
  NodeId x = tape.constant(image);
  for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
    x = tape.relu(tape.conv2d(x, stage_weights[i], static_cast<long>(cfg.stages[i].stride),
                              static_cast<long>(BackboneConfig::kPad)));
  }
  return tape.global_avg_pool(x);
}

struct TrainOptions {
  std::size_t epochs = 1;
  std::size_t batch = 32;
  float learning_rate = 0.05f;
  float momentum = 0.9f;
  std::uint64_t seed = 0;
};

template <class Result>
struct Trained {
  Result value;
  std::vector<double> epoch_loss;  // mean per-sample training loss of each epoch
};

namespace detail {

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  CounterRng rng({seed, static_cast<std::uint64_t>(Stream::kShuffle), epoch});
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

inline void check_training_inputs(const Dataset& ds, const TrainOptions& opts) {
  if (ds.empty()) throw ValueError("training requires a non-empty dataset");
  if (opts.batch == 0) throw ValueError("batch size must be positive");
  ds.validate();
}

}  // namespace detail

/// Augmented supervised training: every minibatch image is replaced by one
/// augmentation sample (keyed by seed, image index and epoch) and the backbone
/// is trained jointly with a temporary softmax head ("train_head").
inline Trained<Checkpoint> train_backbone(Checkpoint ckpt, const Dataset& ds, const AugmentationPolicy& policy,
                                          const TrainOptions& opts) {
  detail::check_training_inputs(ds, opts);
  policy.validate();
  const BackboneConfig& cfg = ckpt.config;
  if (ds.channels != cfg.channels) throw ShapeError("train_backbone: dataset channels do not match backbone");
  if (!ckpt.has_training_head() || ckpt.training_head().num_classes() != ds.num_classes) {
    ckpt.set_training_head(LinearHead::zeros(ds.num_classes, cfg.embedding_dim));
  }

  const std::size_t stages = cfg.stages.size();
  std::vector<Tensor> params;
  for (std::size_t i = 0; i < stages; ++i) params.push_back(ckpt.stage_weight(i));
  params.push_back(ckpt.params.at(kTrainHeadWeight));
  params.push_back(ckpt.params.at(kTrainHeadBias));

  OptimizerState opt(opts.learning_rate, opts.momentum);
  std::vector<double> history;
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    const auto order = detail::epoch_order(ds.size(), opts.seed, epoch);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += opts.batch) {
      const std::size_t end = std::min(order.size(), start + opts.batch);
      Tape tape;
      std::vector<NodeId> nodes;
      for (const Tensor& p : params) nodes.push_back(tape.parameter(p));
      const std::span<const NodeId> stage_nodes(nodes.data(), stages);
      std::vector<NodeId> losses;
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t idx = order[b];
        const TransformParams t = sample_transform(policy, ds.height, ds.width, opts.seed, idx, epoch);
        const NodeId emb = embed_on_tape(tape, cfg, stage_nodes, apply_transform(ds.images[idx], t));
        const NodeId logits = tape.dense(emb, nodes[stages], nodes[stages + 1]);
        losses.push_back(tape.softmax_cross_entropy(logits, ds.labels[idx]));
        loss_sum += tape.value(losses.back())[0];
      }
      const NodeId loss = tape.mean(losses);
      const Gradients grads = backward(tape, loss);
      std::vector<Tensor> g;
      g.reserve(nodes.size());
      for (NodeId n : nodes) g.push_back(grads[n]);
      sgd_step(params, g, opt);
    }
    history.push_back(loss_sum / static_cast<double>(ds.size()));
  }

  for (std::size_t i = 0; i < stages; ++i) ckpt.params[stage_param_name(i)] = std::move(params[i]);
  ckpt.params[kTrainHeadWeight] = std::move(params[stages]);
  ckpt.params[kTrainHeadBias] = std::move(params[stages + 1]);
  ckpt.meta = TrainingMetadata{opts.seed, static_cast<std::uint32_t>(ckpt.meta.epochs + opts.epochs),
                               policy.descriptor()};
  return {std::move(ckpt), std::move(history)};
}

/// Linear evaluation head on the frozen backbone. Minimises the augmented
/// cross-entropy mean_s -log softmax(W a(x_s) + b)_y, the per-augmentation
/// upper bound of the mean-embedding loss; embeddings for each epoch are
/// computed with one fresh augmentation per image.
inline Trained<LinearHead> train_linear_head(const Checkpoint& ckpt, const Dataset& ds,
                                             const AugmentationPolicy& policy, const TrainOptions& opts) {
  detail::check_training_inputs(ds, opts);
  policy.validate();
  if (ds.channels != ckpt.config.channels) throw ShapeError("train_linear_head: dataset channels do not match backbone");

  std::vector<Tensor> params{Tensor({ds.num_classes, ckpt.config.embedding_dim}), Tensor({ds.num_classes})};
  OptimizerState opt(opts.learning_rate, opts.momentum);
  std::vector<double> history;
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    const std::vector<Tensor> embeddings = parallel_map(ds.size(), [&](std::size_t i) {
      const TransformParams t = sample_transform(policy, ds.height, ds.width, opts.seed, i, epoch);
      return embed(ckpt, apply_transform(ds.images[i], t));
    });
    const auto order = detail::epoch_order(ds.size(), opts.seed, epoch);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += opts.batch) {
      const std::size_t end = std::min(order.size(), start + opts.batch);
      Tape tape;
      const NodeId w = tape.parameter(params[0]);
      const NodeId b = tape.parameter(params[1]);
      std::vector<NodeId> losses;
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t idx = order[k];
        const NodeId logits = tape.dense(tape.constant(embeddings[idx]), w, b);
        losses.push_back(tape.softmax_cross_entropy(logits, ds.labels[idx]));
        loss_sum += tape.value(losses.back())[0];
      }
      const Gradients grads = backward(tape, tape.mean(losses));
      const std::vector<Tensor> g{grads[w], grads[b]};
      sgd_step(params, g, opt);
    }
    history.push_back(loss_sum / static_cast<double>(ds.size()));
  }
  return {LinearHead{std::move(params[0]), std::move(params[1])}, std::move(history)};
}

inline constexpr char kCheckpointMagic[] = "MTCK";
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// MTCK v1 layout:
///   "MTCK", u32 version
///   config: u32 C, H, W, u32 stage count, (u32 channels, u32 stride) per stage, u32 embedding_dim
///   metadata: u32 seed low, u32 seed high, u32 epochs, u32 policy length, policy bytes
///   u32 tensor count, then per tensor (sorted by name):
///     u16 name length, name, u8 rank, u32 dims[rank], f32 payload
inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  io::Writer w;
  w.bytes(std::string_view(kCheckpointMagic, 4));
  w.u32(kCheckpointVersion);
  const BackboneConfig& cfg = ckpt.config;
  w.u32(static_cast<std::uint32_t>(cfg.channels));
  w.u32(static_cast<std::uint32_t>(cfg.height));
  w.u32(static_cast<std::uint32_t>(cfg.width));
  w.u32(static_cast<std::uint32_t>(cfg.stages.size()));
  for (const StageSpec& s : cfg.stages) {
    w.u32(static_cast<std::uint32_t>(s.channels));
    w.u32(static_cast<std::uint32_t>(s.stride));
  }
  w.u32(static_cast<std::uint32_t>(cfg.embedding_dim));
  w.u32(static_cast<std::uint32_t>(ckpt.meta.seed & 0xFFFFFFFFu));
  w.u32(static_cast<std::uint32_t>(ckpt.meta.seed >> 32));
  w.u32(ckpt.meta.epochs);
  w.u32(static_cast<std::uint32_t>(ckpt.meta.policy.size()));
  w.bytes(ckpt.meta.policy);
  w.u32(static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& [name, t] : ckpt.params) {
    if (name.size() > 0xFFFF) throw ValueError("parameter name too long: " + name);
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name);
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    w.f32s(t.data());
  }
  w.save(path);
}

namespace detail {

inline void check_head_params(const Checkpoint& ckpt, const char* weight, const char* bias, const std::string& what) {
  const bool has_w = ckpt.params.contains(weight), has_b = ckpt.params.contains(bias);
  if (has_w != has_b) throw FormatError(what + ": " + (has_w ? bias : weight) + " missing");
  if (has_w) {
    try {
      LinearHead{ckpt.params.at(weight), ckpt.params.at(bias)}.check(ckpt.config.embedding_dim);
    } catch (const ShapeError& e) {
      throw FormatError(what + ": " + e.what());
    }
  }
}

}  // namespace detail

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string what = "checkpoint " + path.string();
  io::Reader r = io::Reader::open(path, what);
  if (r.bytes(4) != std::string_view(kCheckpointMagic, 4)) throw FormatError(what + ": bad magic");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));

  Checkpoint ckpt;
  BackboneConfig& cfg = ckpt.config;
  cfg.channels = r.u32();
  cfg.height = r.u32();
  cfg.width = r.u32();
  const std::uint32_t stages = r.u32();
  if (stages > 1024) throw FormatError(what + ": implausible stage count");
  for (std::uint32_t i = 0; i < stages; ++i) {
    StageSpec s;
    s.channels = r.u32();
    s.stride = r.u32();
    cfg.stages.push_back(s);
  }
  cfg.embedding_dim = r.u32();
  try {
    cfg.validate();
  } catch (const ValueError& e) {
    throw FormatError(what + ": " + e.what());
  }
  const std::uint64_t lo = r.u32(), hi = r.u32();
  ckpt.meta.seed = lo | (hi << 32);
  ckpt.meta.epochs = r.u32();
  ckpt.meta.policy = r.bytes(r.u32());

  const std::uint32_t count = r.u32();
  for (std::uint32_t n = 0; n < count; ++n) {
    std::string name = r.bytes(r.u16());
    const std::uint8_t rank = r.u8();
    if (rank == 0) throw FormatError(what + ": tensor " + name + " has rank 0");
    Shape shape(rank);
    for (auto& d : shape) {
      d = r.u32();
      if (d == 0) throw FormatError(what + ": tensor " + name + " has a zero dimension");
    }
    const std::size_t size = shape_size(shape);
    if (r.remaining() < size * 4) throw FormatError(what + ": truncated file");
    std::vector<float> values(size);
    r.f32s(values);
    if (!ckpt.params.emplace(name, Tensor(std::move(shape), std::move(values))).second) {
      throw FormatError(what + ": duplicate tensor " + name);
    }
  }
  r.expect_end();

  std::size_t expected = cfg.stages.size();
  for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
    const std::string name = stage_param_name(i);
    auto it = ckpt.params.find(name);
    if (it == ckpt.params.end()) throw FormatError(what + ": missing parameter " + name);
    if (it->second.shape() != cfg.stage_kernel_shape(i)) {
      throw FormatError(what + ": parameter " + name + " has shape " + to_string(it->second.shape()) +
                        ", expected " + to_string(cfg.stage_kernel_shape(i)));
    }
  }
  detail::check_head_params(ckpt, kHeadWeight, kHeadBias, what);
  detail::check_head_params(ckpt, kTrainHeadWeight, kTrainHeadBias, what);
  expected += ckpt.has_head() ? 2 : 0;
  expected += ckpt.has_training_head() ? 2 : 0;
  if (ckpt.params.size() != expected) throw FormatError(what + ": unexpected extra tensors");
  return ckpt;
}

}  // namespace metta
