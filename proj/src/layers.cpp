#include "mtask/layers.hpp"

#include <cmath>

namespace mtask {

namespace {

Tensor uniform_init(Shape shape, double fan_in, double fan_out, Rng& rng) {
  double s = std::sqrt(6.0 / (fan_in + fan_out));
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.values) v = rng.uniform(-s, s);
  return t;
}

// 1 / sqrt(v + eps), composed so gradients flow through the statistics.
NodeId rsqrt_eps(Graph& g, NodeId v, double eps) {
  NodeId shifted = g.add(v, g.scalar(eps));
  return g.exp(g.mul(g.log(shifted), g.scalar(-0.5)));
}

}  // namespace

NormLayer NormLayer::layer_norm(int features, double epsilon) {
  NormLayer n;
  n.mode = NormMode::Layer;
  n.gamma = Tensor::full({features}, 1.0);
  n.beta = Tensor::zeros({features});
  n.epsilon = epsilon;
  return n;
}

NormLayer NormLayer::batch_norm(int features, double epsilon, double momentum) {
  NormLayer n;
  n.mode = NormMode::Batch;
  n.gamma = Tensor::full({features}, 1.0);
  n.beta = Tensor::zeros({features});
  n.epsilon = epsilon;
  n.momentum = momentum;
  n.running_mean = Tensor::zeros({features});
  n.running_var = Tensor::full({features}, 1.0);
  return n;
}

NodeId NormLayer::forward(Graph& g, ParamBinder& pb, NodeId x, bool training) {
  Shape xs = g.value(x).shape;  // copy: binding params below may reallocate the node store
  int H = features();
  if (xs.size() != 2 || xs[1] != H)
    throw ShapeError("norm: input " + shape_str(xs) + " does not match " + std::to_string(H) +
                     " features");
  if (epsilon < 0.0) throw ShapeError("norm: epsilon must be non-negative");

  NodeId gamma_n = pb.bind({"gamma", &gamma});
  NodeId beta_n = pb.bind({"beta", &beta});
  int m = xs[0];

  NodeId xhat;
  if (mode == NormMode::Layer) {
    NodeId mu = g.mean(x, 1);        // per sample over its H units
    NodeId var = g.variance(x, 1);
    NodeId centered = g.sub(x, g.broadcast_to(mu, {m, H}, 0));
    xhat = g.mul(centered, g.broadcast_to(rsqrt_eps(g, var, epsilon), {m, H}, 0));
  } else if (training) {
    if (m < 2)
      throw ShapeError("batch norm: training requires a batch of at least 2 samples, got " +
                       std::to_string(m));
    NodeId mu = g.mean(x, 0);        // per feature over the batch
    NodeId var = g.variance(x, 0);   // biased
    NodeId centered = g.sub(x, mu);
    xhat = g.mul(centered, rsqrt_eps(g, var, epsilon));
    const std::vector<double>& mu_v = g.value(mu).values;
    const std::vector<double>& var_v = g.value(var).values;
    for (int j = 0; j < H; ++j) {
      running_mean.values[j] = (1.0 - momentum) * running_mean.values[j] + momentum * mu_v[j];
      running_var.values[j] = (1.0 - momentum) * running_var.values[j] + momentum * var_v[j];
    }
  } else {
    NodeId mu = g.constant(running_mean);
    NodeId var = g.constant(running_var);
    NodeId centered = g.sub(x, mu);
    xhat = g.mul(centered, rsqrt_eps(g, var, epsilon));
  }
  return g.add(g.mul(xhat, gamma_n), beta_n);
}

std::vector<ParamRef> NormLayer::params(const std::string& prefix) {
  return {{prefix + ".gamma", &gamma}, {prefix + ".beta", &beta}};
}

std::vector<ParamRef> NormLayer::state(const std::string& prefix) {
  if (mode != NormMode::Batch) return {};
  return {{prefix + ".running_mean", &running_mean}, {prefix + ".running_var", &running_var}};
}

Dense Dense::init(int in, int out, Rng& rng) {
  Dense d;
  d.W = uniform_init({in, out}, in, out, rng);
  d.b = Tensor::zeros({out});
  return d;
}

NodeId Dense::forward(Graph& g, ParamBinder& pb, NodeId x) const {
  NodeId w = pb.bind({"W", const_cast<Tensor*>(&W)});
  NodeId bias = pb.bind({"b", const_cast<Tensor*>(&b)});
  return g.add(g.matmul(x, w), bias);
}

std::vector<ParamRef> Dense::params(const std::string& prefix) {
  return {{prefix + ".W", &W}, {prefix + ".b", &b}};
}

ConvBlock ConvBlock::init(int ic, int oc, Rng& rng) {
  ConvBlock c;
  c.W = uniform_init({oc, ic, 3, 3}, ic * 9.0, oc * 9.0, rng);
  c.b = Tensor::zeros({oc});
  return c;
}

NodeId ConvBlock::forward(Graph& g, ParamBinder& pb, NodeId x) const {
  NodeId w = pb.bind({"W", const_cast<Tensor*>(&W)});
  NodeId bias = pb.bind({"b", const_cast<Tensor*>(&b)});
  return g.maxpool2d(g.relu(g.conv2d(x, w, bias, 1, 1)), 2);
}

std::vector<ParamRef> ConvBlock::params(const std::string& prefix) {
  return {{prefix + ".W", &W}, {prefix + ".b", &b}};
}

int ArchSpec::conv_out_hw() const {
  int s = image_size;
  for (size_t i = 0; i < conv_channels.size(); ++i) s /= 2;
  return s;
}

int ArchSpec::flat_dim() const {
  int c = conv_channels.empty() ? in_channels : conv_channels.back();
  return c * conv_out_hw() * conv_out_hw();
}

void ArchSpec::validate() const {
  if (image_size < 1 || in_channels < 1 || feature_dim < 1 || n_classes < 2)
    throw ConfigError("arch: image_size/in_channels/feature_dim/n_classes out of range");
  int s = image_size;
  for (size_t i = 0; i < conv_channels.size(); ++i) {
    if (conv_channels[i] < 1) throw ConfigError("arch: conv channel count must be positive");
    if (s % 2 != 0)
      throw ConfigError("arch: image_size " + std::to_string(image_size) +
                        " is not divisible by 2^" + std::to_string(conv_channels.size()));
    s /= 2;
  }
  if (s < 1) throw ConfigError("arch: too many pooling stages for image_size");
  if (portion_scale <= 0.0) throw ConfigError("arch: portion_scale must be positive");
}

Backbone::Backbone(const ArchSpec& spec, Rng& rng) : spec_(spec) {
  spec.validate();
  int ic = spec.in_channels;
  for (int oc : spec.conv_channels) {
    blocks_.push_back(ConvBlock::init(ic, oc, rng));
    ic = oc;
  }
  fc_ = Dense::init(spec.flat_dim(), spec.feature_dim, rng);
}

NodeId Backbone::forward(Graph& g, ParamBinder& pb, NodeId images) const {
  Shape s = g.value(images).shape;  // copy: forwards below append nodes
  Shape expect = {s.empty() ? 0 : s[0], spec_.in_channels, spec_.image_size, spec_.image_size};
  if (s.size() != 4 || s[1] != expect[1] || s[2] != expect[2] || s[3] != expect[3])
    throw ShapeError("backbone: input " + shape_str(s) + " does not match configured " +
                     shape_str(expect));
  NodeId h = images;
  for (const ConvBlock& b : blocks_) h = b.forward(g, pb, h);
  h = g.reshape(h, {s[0], spec_.flat_dim()});
  return fc_.forward(g, pb, h);
}

std::vector<ParamRef> Backbone::params(const std::string& prefix) {
  std::vector<ParamRef> out;
  for (size_t i = 0; i < blocks_.size(); ++i) {
    auto p = blocks_[i].params(prefix + ".block" + std::to_string(i));
    out.insert(out.end(), p.begin(), p.end());
  }
  auto p = fc_.params(prefix + ".fc");
  out.insert(out.end(), p.begin(), p.end());
  return out;
}

std::vector<double> Backbone::flatten_params() const {
  std::vector<double> flat;
  auto self = const_cast<Backbone*>(this);
  for (const ParamRef& p : self->params("bb"))
    flat.insert(flat.end(), p.tensor->values.begin(), p.tensor->values.end());
  return flat;
}

std::vector<Tensor*> Backbone::layer_tensors(int layer) {
  if (layer < 0 || layer >= layer_count())
    throw ShapeError("backbone: layer index " + std::to_string(layer) + " out of range");
  if (layer < static_cast<int>(blocks_.size()))
    return {&blocks_[static_cast<size_t>(layer)].W, &blocks_[static_cast<size_t>(layer)].b};
  return {&fc_.W, &fc_.b};
}

}  // namespace mtask
