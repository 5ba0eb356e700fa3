#pragma once

// Reverse-mode differentiation over a fixed op vocabulary. A Tape records
// operations in execution order (so inputs always precede outputs); backward
// replays the records in reverse and accumulates gradients in double.

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "metta/errors.hpp"
#include "metta/ops.hpp"
#include "metta/tensor.hpp"

namespace metta {

using NodeId = std::size_t;

namespace detail {

struct ConvRecord {
  NodeId input, kernel, output;
  ConvGeometry geom;
  std::vector<float> columns;
};
struct ReluRecord {
  NodeId input, output;
};
struct MaxPoolRecord {
  NodeId input, output;
  std::vector<std::size_t> argmax;
};
struct GlobalAvgPoolRecord {
  NodeId input, output;
};
struct DenseRecord {
  NodeId input, weight, bias, output;
};
struct SoftmaxRecord {
  NodeId input, output;
};
struct CrossEntropyRecord {
  NodeId probs, output;
  std::size_t label;
};
struct SoftmaxCrossEntropyRecord {
  NodeId logits, output;
  std::size_t label;
  Tensor probs;
};
struct SumRecord {
  NodeId input, output;
};
struct WeightedSumRecord {
  NodeId input, output;
  Tensor weights;
};
struct MeanRecord {
  std::vector<NodeId> inputs;
  NodeId output;
};

using Record = std::variant<ConvRecord, ReluRecord, MaxPoolRecord, GlobalAvgPoolRecord, DenseRecord,
                            SoftmaxRecord, CrossEntropyRecord, SoftmaxCrossEntropyRecord, SumRecord,
                            WeightedSumRecord, MeanRecord>;

}  // namespace detail

class Gradients;

class Tape {
 public:
  NodeId parameter(Tensor value) { return push(std::move(value), true); }
  NodeId constant(Tensor value) { return push(std::move(value), false); }

  NodeId conv2d(NodeId input, NodeId kernel, long stride, long pad) {
    const Tensor& x = value(input);
    const Tensor& k = value(kernel);
    ConvGeometry g = conv_geometry(x.shape(), k.shape(), stride, pad);
    std::vector<float> cols = im2col(x, g);
    Tensor out = conv2d_from_columns<float>(cols, k, g);
    const NodeId id = push(std::move(out), needs(input) || needs(kernel));
    records_.emplace_back(detail::ConvRecord{input, kernel, id, g, std::move(cols)});
    return id;
  }

  NodeId relu(NodeId input) {
    const NodeId id = push(metta::relu(value(input)), needs(input));
    records_.emplace_back(detail::ReluRecord{input, id});
    return id;
  }

  NodeId maxpool2d(NodeId input, long window, long stride) {
    std::vector<std::size_t> argmax;
    Tensor out = metta::maxpool2d(value(input), window, stride, &argmax);
    const NodeId id = push(std::move(out), needs(input));
    records_.emplace_back(detail::MaxPoolRecord{input, id, std::move(argmax)});
    return id;
  }

  NodeId global_avg_pool(NodeId input) {
    const NodeId id = push(metta::global_avg_pool(value(input)), needs(input));
    records_.emplace_back(detail::GlobalAvgPoolRecord{input, id});
    return id;
  }

  NodeId dense(NodeId input, NodeId weight, NodeId bias) {
    Tensor out = metta::dense(value(input), value(weight), value(bias));
    const NodeId id = push(std::move(out), needs(input) || needs(weight) || needs(bias));
    records_.emplace_back(detail::DenseRecord{input, weight, bias, id});
    return id;
  }

  NodeId softmax(NodeId logits) {
    const NodeId id = push(metta::softmax(value(logits)), needs(logits));
    records_.emplace_back(detail::SoftmaxRecord{logits, id});
    return id;
  }

  NodeId cross_entropy(NodeId probs, std::size_t label) {
    const double loss = metta::cross_entropy(value(probs), label);
    const NodeId id = push(Tensor({1}, {static_cast<float>(loss)}), needs(probs));
    records_.emplace_back(detail::CrossEntropyRecord{probs, id, label});
    return id;
  }

  /// Fused softmax + cross-entropy on logits; gradient is softmax - onehot.
  NodeId softmax_cross_entropy(NodeId logits, std::size_t label) {
    const Tensor& z = value(logits);
    const double loss = nll_from_logits(z, label);
    Tensor probs = metta::softmax(z);
    const NodeId id = push(Tensor({1}, {static_cast<float>(loss)}), needs(logits));
    records_.emplace_back(detail::SoftmaxCrossEntropyRecord{logits, id, label, std::move(probs)});
    return id;
  }

  NodeId sum(NodeId input) {
    double s = 0.0;
    for (float v : value(input).data()) s += v;
    const NodeId id = push(Tensor({1}, {static_cast<float>(s)}), needs(input));
    records_.emplace_back(detail::SumRecord{input, id});
    return id;
  }

  /// sum_i input[i] * weights[i]; turns any tensor-valued node into a scalar
  /// whose gradient is a full vector-Jacobian product.
  NodeId weighted_sum(NodeId input, Tensor weights) {
    require_shape(weights, value(input).shape(), "weighted_sum");
    double s = 0.0;
    const Tensor& x = value(input);
    for (std::size_t i = 0; i < x.size(); ++i) s += static_cast<double>(x[i]) * weights[i];
    const NodeId id = push(Tensor({1}, {static_cast<float>(s)}), needs(input));
    records_.emplace_back(detail::WeightedSumRecord{input, id, std::move(weights)});
    return id;
  }

  /// Arithmetic mean of scalar nodes.
  NodeId mean(std::span<const NodeId> scalars) {
    if (scalars.empty()) throw ShapeError("mean: no inputs");
    double s = 0.0;
    bool grad = false;
    for (NodeId n : scalars) {
      if (value(n).size() != 1) throw ShapeError("mean: inputs must be scalars");
      s += value(n)[0];
      grad = grad || needs(n);
    }
    const NodeId id = push(Tensor({1}, {static_cast<float>(s / static_cast<double>(scalars.size()))}), grad);
    records_.emplace_back(detail::MeanRecord{std::vector<NodeId>(scalars.begin(), scalars.end()), id});
    return id;
  }

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }
  std::size_t node_count() const noexcept { return nodes_.size(); }
  std::size_t op_count() const noexcept { return records_.size(); }

 private:
  friend Gradients backward(const Tape&, NodeId);

  struct Node {
    Tensor value;
    bool requires_grad;
  };

  bool needs(NodeId id) const { return nodes_.at(id).requires_grad; }

  NodeId push(Tensor value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), requires_grad});
    return nodes_.size() - 1;
  }

  std::vector<Node> nodes_;
  std::vector<detail::Record> records_;
};

/// Gradient of a scalar loss with respect to every node that requires grad.
class Gradients {
 public:
  bool has(NodeId id) const { return id < grads_.size() && !grads_[id].empty(); }

  const Tensor& operator[](NodeId id) const {
    if (!has(id)) throw ValueError("no gradient recorded for node " + std::to_string(id));
    return grads_[id];
  }

 private:
  friend Gradients backward(const Tape&, NodeId);
  std::vector<Tensor> grads_;
};

namespace detail {

class BackwardPass {
 public:
  explicit BackwardPass(const Tape& tape) : tape_(tape), grads_(tape.node_count()) {}

  std::vector<double>& grad(NodeId id) {
    auto& g = grads_[id];
    if (g.empty()) g.assign(tape_.value(id).size(), 0.0);
    return g;
  }
  bool live(NodeId id) const { return !grads_[id].empty(); }
  bool wants(NodeId id) const { return tape_.requires_grad(id); }
  const Tensor& value(NodeId id) const { return tape_.value(id); }
  std::vector<std::vector<double>>& all() { return grads_; }

  void operator()(const ConvRecord& r) {
    const auto& g = grads_[r.output];
    const ConvGeometry& geo = r.geom;
    const std::size_t patch = geo.patch_size(), positions = geo.positions();
    const Tensor& kernel = value(r.kernel);
    if (wants(r.kernel)) {
      auto& gk = grad(r.kernel);
      for (std::size_t co = 0; co < geo.out_channels; ++co) {
        const double* go = g.data() + co * positions;
        for (std::size_t k = 0; k < patch; ++k) {
          const float* col = r.columns.data() + k * positions;
          double s = 0.0;
          for (std::size_t p = 0; p < positions; ++p) s += go[p] * static_cast<double>(col[p]);
          gk[co * patch + k] += s;
        }
      }
    }
    if (wants(r.input)) {
      auto& gx = grad(r.input);
      std::vector<double> dcol(positions);
      std::size_t row = 0;
      for (std::size_t c = 0; c < geo.in_channels; ++c) {
        for (std::size_t kh = 0; kh < geo.kernel_height; ++kh) {
          for (std::size_t kw = 0; kw < geo.kernel_width; ++kw, ++row) {
            std::fill(dcol.begin(), dcol.end(), 0.0);
            for (std::size_t co = 0; co < geo.out_channels; ++co) {
              const double w = kernel[co * patch + row];
              const double* go = g.data() + co * positions;
              for (std::size_t p = 0; p < positions; ++p) dcol[p] += w * go[p];
            }
            for (std::size_t oh = 0; oh < geo.out_height; ++oh) {
              const long ih = static_cast<long>(oh * geo.stride + kh) - static_cast<long>(geo.pad);
              if (ih < 0 || ih >= static_cast<long>(geo.in_height)) continue;
              for (std::size_t ow = 0; ow < geo.out_width; ++ow) {
                const long iw = static_cast<long>(ow * geo.stride + kw) - static_cast<long>(geo.pad);
                if (iw < 0 || iw >= static_cast<long>(geo.in_width)) continue;
                gx[(c * geo.in_height + static_cast<std::size_t>(ih)) * geo.in_width + static_cast<std::size_t>(iw)] +=
                    dcol[oh * geo.out_width + ow];
              }
            }
          }
        }
      }
    }
  }

  void operator()(const ReluRecord& r) {
    if (!wants(r.input)) return;
    const auto& g = grads_[r.output];
    const Tensor& x = value(r.input);
    auto& gx = grad(r.input);
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (x[i] > 0.0f) gx[i] += g[i];
    }
  }

  void operator()(const MaxPoolRecord& r) {
    if (!wants(r.input)) return;
    const auto& g = grads_[r.output];
    auto& gx = grad(r.input);
    for (std::size_t o = 0; o < r.argmax.size(); ++o) gx[r.argmax[o]] += g[o];
  }

  void operator()(const GlobalAvgPoolRecord& r) {
    if (!wants(r.input)) return;
    const auto& g = grads_[r.output];
    const Tensor& x = value(r.input);
    const std::size_t area = x.dim(1) * x.dim(2);
    auto& gx = grad(r.input);
    for (std::size_t c = 0; c < x.dim(0); ++c) {
      const double share = g[c] / static_cast<double>(area);
      for (std::size_t i = 0; i < area; ++i) gx[c * area + i] += share;
    }
  }

  void operator()(const DenseRecord& r) {
    const auto& g = grads_[r.output];
    const Tensor& x = value(r.input);
    const Tensor& w = value(r.weight);
    const std::size_t rows = w.dim(0), cols = w.dim(1);
    if (wants(r.input)) {
      auto& gx = grad(r.input);
      for (std::size_t row = 0; row < rows; ++row) {
        for (std::size_t c = 0; c < cols; ++c) gx[c] += static_cast<double>(w[row * cols + c]) * g[row];
      }
    }
    if (wants(r.weight)) {
      auto& gw = grad(r.weight);
      for (std::size_t row = 0; row < rows; ++row) {
        for (std::size_t c = 0; c < cols; ++c) gw[row * cols + c] += g[row] * static_cast<double>(x[c]);
      }
    }
    if (wants(r.bias)) {
      auto& gb = grad(r.bias);
      for (std::size_t row = 0; row < rows; ++row) gb[row] += g[row];
    }
  }

  void operator()(const SoftmaxRecord& r) {
    if (!wants(r.input)) return;
    const auto& g = grads_[r.output];
    const Tensor& p = value(r.output);
    double dot = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) dot += g[i] * static_cast<double>(p[i]);
    auto& gz = grad(r.input);
    for (std::size_t i = 0; i < p.size(); ++i) gz[i] += static_cast<double>(p[i]) * (g[i] - dot);
  }

  void operator()(const CrossEntropyRecord& r) {
    if (!wants(r.probs)) return;
    const double g = grads_[r.output][0];
    const double p = value(r.probs)[r.label];
    auto& gp = grad(r.probs);
    if (p > kProbabilityFloor) gp[r.label] += -g / p;
  }

  void operator()(const SoftmaxCrossEntropyRecord& r) {
    if (!wants(r.logits)) return;
    const double g = grads_[r.output][0];
    auto& gz = grad(r.logits);
    for (std::size_t i = 0; i < r.probs.size(); ++i) {
      const double onehot = i == r.label ? 1.0 : 0.0;
      gz[i] += g * (static_cast<double>(r.probs[i]) - onehot);
    }
  }

  void operator()(const SumRecord& r) {
    if (!wants(r.input)) return;
    const double g = grads_[r.output][0];
    for (double& v : grad(r.input)) v += g;
  }

  void operator()(const WeightedSumRecord& r) {
    if (!wants(r.input)) return;
    const double g = grads_[r.output][0];
    auto& gx = grad(r.input);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g * static_cast<double>(r.weights[i]);
  }

  void operator()(const MeanRecord& r) {
    const double g = grads_[r.output][0] / static_cast<double>(r.inputs.size());
    for (NodeId n : r.inputs) {
      if (wants(n)) grad(n)[0] += g;
    }
  }

 private:
  const Tape& tape_;
  std::vector<std::vector<double>> grads_;
};

inline NodeId output_of(const Record& record) {
  return std::visit([](const auto& r) { return r.output; }, record);
}

}  // namespace detail

/// Gradients of the scalar node `loss` with respect to every node that
/// requires grad. Records are replayed strictly in reverse tape order, so the
/// result is deterministic.
inline Gradients backward(const Tape& tape, NodeId loss) {
  if (tape.value(loss).size() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " + to_string(tape.value(loss).shape()));
  }
  detail::BackwardPass pass(tape);
  if (tape.requires_grad(loss)) pass.grad(loss)[0] = 1.0;
  for (auto it = tape.records_.rbegin(); it != tape.records_.rend(); ++it) {
    const NodeId out = detail::output_of(*it);
    if (out > loss || !pass.live(out)) continue;
    std::visit(pass, *it);
  }
  Gradients result;
  result.grads_.resize(tape.node_count());
  auto& raw = pass.all();
  for (NodeId id = 0; id < raw.size(); ++id) {
    if (raw[id].empty()) continue;
    std::vector<float> values(raw[id].begin(), raw[id].end());
    result.grads_[id] = Tensor(tape.value(id).shape(), std::move(values));
  }
  return result;
}

}  // namespace metta
