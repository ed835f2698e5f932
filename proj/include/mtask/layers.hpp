#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "mtask/graph.hpp"
#include "mtask/rng.hpp"

namespace mtask {

struct ParamRef {
  std::string name;
  Tensor* tensor;
};

// Binds model parameters into a graph as leaves, once per tensor per step.
// Re-binding the same tensor returns the existing node, so fan-out (e.g. a
// parameter used by both the data loss and the sharing penalty) accumulates
// into a single gradient.
class ParamBinder {
 public:
  ParamBinder(Graph& g, bool trainable) : g_(&g), trainable_(trainable) {}

  NodeId bind(const ParamRef& p) {
    auto it = by_tensor_.find(p.tensor);
    if (it != by_tensor_.end()) return it->second;
    Tensor t = *p.tensor;
    t.requires_grad = trainable_;
    NodeId id = g_->leaf(std::move(t));
    by_tensor_.emplace(p.tensor, id);
    bound_.push_back({p, id});
    return id;
  }

  const std::vector<std::pair<ParamRef, NodeId>>& bound() const { return bound_; }

 private:
  Graph* g_;
  bool trainable_;
  std::unordered_map<const Tensor*, NodeId> by_tensor_;
  std::vector<std::pair<ParamRef, NodeId>> bound_;
};

enum class NormMode { Layer, Batch };

// Learnable per-feature affine normalization. Layer mode normalizes each
// sample over its H units; batch mode normalizes each feature over the
// mini-batch (biased variance) and tracks running statistics for inference.
struct NormLayer {
  NormMode mode = NormMode::Layer;
  Tensor gamma, beta;  // [H]
  double epsilon = 1e-5;
  double momentum = 0.1;
  Tensor running_mean, running_var;  // batch mode only

  static NormLayer layer_norm(int features, double epsilon = 1e-5);
  static NormLayer batch_norm(int features, double epsilon = 1e-5, double momentum = 0.1);

  int features() const { return gamma.shape.empty() ? 0 : gamma.shape[0]; }

  // x is [m, H]. Batch mode in training requires m >= 2 and updates the
  // running statistics as a side effect; inference normalizes by them.
  NodeId forward(Graph& g, ParamBinder& pb, NodeId x, bool training);

  std::vector<ParamRef> params(const std::string& prefix);
  std::vector<ParamRef> state(const std::string& prefix);  // running stats
};

struct Dense {
  Tensor W;  // [in, out]
  Tensor b;  // [out]

  static Dense init(int in, int out, Rng& rng);
  NodeId forward(Graph& g, ParamBinder& pb, NodeId x) const;
  std::vector<ParamRef> params(const std::string& prefix);
};

// 3x3 convolution (stride 1, pad 1) -> relu -> 2x2 max-pool.
struct ConvBlock {
  Tensor W;  // [oc, ic, 3, 3]
  Tensor b;  // [oc]

  static ConvBlock init(int ic, int oc, Rng& rng);
  NodeId forward(Graph& g, ParamBinder& pb, NodeId x) const;
  std::vector<ParamRef> params(const std::string& prefix);
};

struct ArchSpec {
  int image_size = 32;
  int in_channels = 3;
  std::vector<int> conv_channels = {8, 16, 32};
  int feature_dim = 64;
  int n_classes = 21;
  double portion_scale = 984.0;  // regression head output is scaled by this

  int conv_out_hw() const;  // spatial size after all pooling stages
  int flat_dim() const;     // flattened feature size entering the fc layer
  void validate() const;
  bool operator==(const ArchSpec&) const = default;
};

// Stack of conv blocks plus one fully-connected layer producing a flat
// feature vector. Two backbones built from the same spec have index-aligned
// parameter vectors; flattening order is layer index, weight before bias,
// row-major within each tensor.
class Backbone {
 public:
  Backbone() = default;
  Backbone(const ArchSpec& spec, Rng& rng);

  // images [N, in_channels, S, S] -> features [N, feature_dim]
  NodeId forward(Graph& g, ParamBinder& pb, NodeId images) const;

  std::vector<ParamRef> params(const std::string& prefix);
  std::vector<double> flatten_params() const;
  int layer_count() const { return static_cast<int>(blocks_.size()) + 1; }
  // Learnable tensors of one layer (weight, bias), layer < layer_count().
  std::vector<Tensor*> layer_tensors(int layer);
  const ArchSpec& spec() const { return spec_; }

 private:
  ArchSpec spec_;
  std::vector<ConvBlock> blocks_;
  Dense fc_;
};

}  // namespace mtask
