#include "mtask/multitask.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "mtask/rng.hpp"

namespace mtask {

const std::vector<std::pair<std::string, TaskMode>>& mode_names() {
  static const std::vector<std::pair<std::string, TaskMode>> names = {
      {"classification_only", TaskMode::ClassificationOnly},
      {"portion_only", TaskMode::PortionOnly},
      {"hps", TaskMode::HardSharing},
      {"sps", TaskMode::SoftSharing},
      {"sps_cdfa", TaskMode::SoftSharingCdfa},
      {"sps_cdfa_bn", TaskMode::SoftSharingCdfaBn},
      {"sps_cdfa_ln", TaskMode::SoftSharingCdfaLn},
      {"sps_cdfa_ln_bn", TaskMode::SoftSharingCdfaLnBn},
  };
  return names;
}

std::string mode_to_string(TaskMode mode) {
  for (const auto& [name, m] : mode_names())
    if (m == mode) return name;
  throw ConfigError("unknown mode value");
}

TaskMode mode_from_string(const std::string& name) {
  for (const auto& [n, m] : mode_names())
    if (n == name) return m;
  std::ostringstream os;
  os << "unknown mode '" << name << "'; valid modes:";
  for (const auto& [n, m] : mode_names()) os << " " << n;
  throw ConfigError(os.str());
}

bool mode_has_classifier(TaskMode m) { return m != TaskMode::PortionOnly; }
bool mode_has_regressor(TaskMode m) { return m != TaskMode::ClassificationOnly; }
bool mode_is_hard(TaskMode m) { return m == TaskMode::HardSharing; }
bool mode_is_soft(TaskMode m) {
  return m == TaskMode::SoftSharing || mode_has_cdfa(m);
}
bool mode_has_cdfa(TaskMode m) {
  return m == TaskMode::SoftSharingCdfa || m == TaskMode::SoftSharingCdfaBn ||
         m == TaskMode::SoftSharingCdfaLn || m == TaskMode::SoftSharingCdfaLnBn;
}
bool mode_cdfa_ln(TaskMode m) {
  return m == TaskMode::SoftSharingCdfaLn || m == TaskMode::SoftSharingCdfaLnBn;
}
bool mode_cdfa_bn(TaskMode m) {
  return m == TaskMode::SoftSharingCdfaBn || m == TaskMode::SoftSharingCdfaLnBn;
}

FusionHead FusionHead::init(int feature_dim, bool use_ln, bool use_bn, const FusionConfig& cfg,
                            double portion_scale, Rng& rng) {
  FusionHead f;
  f.cfg = cfg;
  f.use_ln = use_ln;
  f.use_bn = use_bn;
  f.portion_scale = portion_scale;
  if (use_ln) {
    if (cfg.ln_placement == LnPlacement::PreConcat) {
      f.ln_c = NormLayer::layer_norm(feature_dim, cfg.epsilon);
      f.ln_r = NormLayer::layer_norm(feature_dim, cfg.epsilon);
    } else {
      f.ln_joint = NormLayer::layer_norm(2 * feature_dim, cfg.epsilon);
    }
  }
  if (use_bn) f.bn = NormLayer::batch_norm(2 * feature_dim, cfg.epsilon, cfg.momentum);
  f.fc = Dense::init(2 * feature_dim, 1, rng);
  return f;
}

NodeId FusionHead::forward(Graph& g, ParamBinder& pb, NodeId x_p, NodeId x_c, bool training,
                           NodeId* pre_fc) {
  Shape sp = g.value(x_p).shape;
  Shape sc = g.value(x_c).shape;
  if (sp != sc || sp.size() != 2)
    throw ShapeError("cdfa: feature shapes " + shape_str(sp) + " and " + shape_str(sc) +
                     " must match");
  if (cfg.detach_xc) x_c = g.constant(g.value(x_c));

  NodeId joint;
  if (use_ln && cfg.ln_placement == LnPlacement::PreConcat) {
    NodeId np = ln_r.forward(g, pb, x_p, training);
    NodeId nc = ln_c.forward(g, pb, x_c, training);
    joint = g.concat(np, nc);
    if (use_bn) joint = bn.forward(g, pb, joint, training);
  } else {
    joint = g.concat(x_p, x_c);
    if (use_ln && use_bn && cfg.norm_order == NormOrder::BnThenLn) {
      joint = bn.forward(g, pb, joint, training);
      joint = ln_joint.forward(g, pb, joint, training);
    } else {
      if (use_ln) joint = ln_joint.forward(g, pb, joint, training);
      if (use_bn) joint = bn.forward(g, pb, joint, training);
    }
  }
  if (pre_fc) *pre_fc = joint;
  NodeId out = fc.forward(g, pb, joint);
  return g.mul(out, g.scalar(portion_scale));
}

std::vector<ParamRef> FusionHead::params(const std::string& prefix) {
  std::vector<ParamRef> out;
  auto append = [&](std::vector<ParamRef> v) { out.insert(out.end(), v.begin(), v.end()); };
  if (use_ln) {
    if (cfg.ln_placement == LnPlacement::PreConcat) {
      append(ln_r.params(prefix + ".ln_r"));
      append(ln_c.params(prefix + ".ln_c"));
    } else {
      append(ln_joint.params(prefix + ".ln_joint"));
    }
  }
  if (use_bn) append(bn.params(prefix + ".bn"));
  append(fc.params(prefix + ".fc"));
  return out;
}

std::vector<ParamRef> FusionHead::state(const std::string& prefix) {
  if (!use_bn) return {};
  return bn.state(prefix + ".bn");
}

TwinModel::TwinModel(TwinModelConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.arch.validate();
  if (!(cfg_.shared_layer_fraction > 0.0 && cfg_.shared_layer_fraction <= 1.0))
    throw ConfigError("shared_layer_fraction must be in (0, 1]");
  TaskMode m = cfg_.mode;

  if (mode_has_classifier(m)) {
    Rng rng_c(stream_seed(seed, "classifier"));
    bb_c_.emplace(cfg_.arch, rng_c);
    head_class_ = Dense::init(cfg_.arch.feature_dim, cfg_.arch.n_classes, rng_c);
  }
  if (mode_has_regressor(m)) {
    Rng rng_r(stream_seed(seed, "regressor"));
    if (!mode_is_hard(m)) bb_r_.emplace(cfg_.arch, rng_r);
    if (mode_has_cdfa(m)) {
      Rng rng_f(stream_seed(seed, "fusion"));
      fusion_ = FusionHead::init(cfg_.arch.feature_dim, mode_cdfa_ln(m), mode_cdfa_bn(m),
                                 cfg_.fusion, cfg_.arch.portion_scale, rng_f);
    } else {
      head_portion_ = Dense::init(cfg_.arch.feature_dim, 1, rng_r);
    }
  }
}

const Backbone& TwinModel::backbone_c() const {
  if (!bb_c_) throw ConfigError("model has no classification backbone");
  return *bb_c_;
}
const Backbone& TwinModel::backbone_r() const {
  if (mode_is_hard(cfg_.mode)) return backbone_c();
  if (!bb_r_) throw ConfigError("model has no regression backbone");
  return *bb_r_;
}
Backbone& TwinModel::backbone_c() { return const_cast<Backbone&>(std::as_const(*this).backbone_c()); }
Backbone& TwinModel::backbone_r() { return const_cast<Backbone&>(std::as_const(*this).backbone_r()); }

TwinModel::Forward TwinModel::forward(Graph& g, ParamBinder& pb, NodeId images,
                                      bool training) const {
  Forward out;
  TaskMode m = cfg_.mode;
  auto self = const_cast<TwinModel*>(this);

  if (mode_has_classifier(m)) {
    out.features_c = bb_c_->forward(g, pb, images);
    out.logits = head_class_->forward(g, pb, out.features_c);
  }
  if (mode_has_regressor(m)) {
    out.features_r = mode_is_hard(m) ? out.features_c : bb_r_->forward(g, pb, images);
    if (mode_has_cdfa(m)) {
      out.portion =
          self->fusion_->forward(g, pb, out.features_r, out.features_c, training, &out.pre_fc);
    } else {
      NodeId raw = head_portion_->forward(g, pb, out.features_r);
      out.portion = g.mul(raw, g.scalar(cfg_.arch.portion_scale));
    }
  }
  return out;
}

NodeId TwinModel::sharing_penalty(Graph& g, ParamBinder& pb) const {
  if (!mode_is_soft(cfg_.mode))
    throw ConfigError("sharing penalty requires a soft-sharing mode, got " +
                      mode_to_string(cfg_.mode));
  auto self = const_cast<TwinModel*>(this);
  Backbone& c = self->backbone_c();
  Backbone& r = self->backbone_r();
  int shared = static_cast<int>(
      std::ceil(cfg_.shared_layer_fraction * static_cast<double>(c.layer_count())));
  shared = std::min(shared, c.layer_count());

  NodeId acc = g.scalar(0.0);
  for (int layer = 0; layer < shared; ++layer) {
    auto tc = c.layer_tensors(layer);
    auto tr = r.layer_tensors(layer);
    for (size_t i = 0; i < tc.size(); ++i) {
      if (tc[i]->values.size() != tr[i]->values.size())
        throw ShapeError("sharing penalty: parameter length mismatch at layer " +
                         std::to_string(layer) + ": " + std::to_string(tc[i]->values.size()) +
                         " vs " + std::to_string(tr[i]->values.size()));
      NodeId pc = pb.bind({"f_c.layer" + std::to_string(layer), tc[i]});
      NodeId pr = pb.bind({"f_r.layer" + std::to_string(layer), tr[i]});
      NodeId flat_c = g.reshape(pc, {static_cast<int>(tc[i]->values.size())});
      NodeId flat_r = g.reshape(pr, {static_cast<int>(tr[i]->values.size())});
      acc = g.add(acc, g.sum(g.square(g.sub(flat_c, flat_r))));
    }
  }
  return acc;
}

std::vector<ParamRef> TwinModel::parameters() const {
  auto self = const_cast<TwinModel*>(this);
  std::vector<ParamRef> out;
  auto append = [&](std::vector<ParamRef> v) { out.insert(out.end(), v.begin(), v.end()); };
  if (self->bb_c_) append(self->bb_c_->params("f_c"));
  if (self->head_class_) append(self->head_class_->params("head_c"));
  if (self->bb_r_) append(self->bb_r_->params("f_r"));
  if (self->head_portion_) append(self->head_portion_->params("head_r"));
  if (self->fusion_) append(self->fusion_->params("fusion"));
  return out;
}

std::vector<ParamRef> TwinModel::norm_state() const {
  auto self = const_cast<TwinModel*>(this);
  if (self->fusion_) return self->fusion_->state("fusion");
  return {};
}

NodeId classification_loss(Graph& g, NodeId logits, const std::vector<int>& labels) {
  Shape s = g.value(logits).shape;
  if (s.size() != 2 || static_cast<size_t>(s[0]) != labels.size())
    throw ShapeError("classification loss: logits " + shape_str(s) + " do not match " +
                     std::to_string(labels.size()) + " labels");
  int m = s[0], n = s[1];
  for (int y : labels)
    if (y < 0 || y >= n)
      throw Error("classification loss: label " + std::to_string(y) + " out of range [0, " +
                  std::to_string(n) + ")");

  // max-shift as a detached constant: softmax is shift-invariant, so the
  // gradient is unchanged and exp cannot overflow
  Tensor shift = Tensor::zeros({m, n});
  Tensor onehot = Tensor::zeros({m, n});
  const std::vector<double>& lv = g.value(logits).values;
  for (int i = 0; i < m; ++i) {
    double mx = lv[static_cast<size_t>(i) * n];
    for (int j = 1; j < n; ++j) mx = std::max(mx, lv[static_cast<size_t>(i) * n + j]);
    for (int j = 0; j < n; ++j) shift.values[static_cast<size_t>(i) * n + j] = mx;
    onehot.values[static_cast<size_t>(i) * n + labels[static_cast<size_t>(i)]] = 1.0;
  }
  NodeId shifted = g.sub(logits, g.constant(shift));
  NodeId log_norm = g.log(g.sum(g.exp(shifted), 1));  // [m]
  NodeId log_probs = g.sub(shifted, g.broadcast_to(log_norm, {m, n}, 0));
  NodeId picked = g.sum(g.mul(g.constant(onehot), log_probs), -1);
  return g.mul(picked, g.scalar(-1.0 / m));
}

NodeId regression_loss(Graph& g, NodeId prediction, const std::vector<double>& targets) {
  Shape s = g.value(prediction).shape;
  int m = static_cast<int>(targets.size());
  if (numel_of(s) != m)
    throw ShapeError("regression loss: prediction " + shape_str(s) + " does not match " +
                     std::to_string(m) + " targets");
  for (double z : targets)
    if (!std::isfinite(z)) throw Error("regression loss: non-finite target");
  NodeId flat = g.reshape(prediction, {m});
  NodeId z = g.constant(Tensor({m}, targets));
  return g.mean(g.abs(g.sub(z, flat)), -1);
}

NodeId overall_loss(Graph& g, NodeId l_c, NodeId l_r, NodeId l_ps, const LossWeights& w) {
  if (w.lambda_c < 0.0 || w.lambda_r < 0.0 || w.lambda_ps < 0.0)
    throw ConfigError("loss weights must be non-negative");
  NodeId acc = g.mul(l_c, g.scalar(w.lambda_c));
  acc = g.add(acc, g.mul(l_r, g.scalar(w.lambda_r)));
  return g.add(acc, g.mul(l_ps, g.scalar(w.lambda_ps)));
}

LossBreakdown LossNodes::values(const Graph& g, const LossWeights& w) const {
  LossBreakdown b;
  b.l_c = g.value(l_c).values[0];
  b.l_r = g.value(l_r).values[0];
  b.l_ps = g.value(l_ps).values[0];
  b.overall = w.lambda_c * b.l_c + w.lambda_r * b.l_r + w.lambda_ps * b.l_ps;
  return b;
}

LossNodes build_losses(Graph& g, ParamBinder& pb, const TwinModel& model, NodeId images,
                       const std::vector<int>& labels, const std::vector<double>& portions,
                       const LossWeights& weights, bool training) {
  LossNodes nodes;
  nodes.fwd = model.forward(g, pb, images, training);
  TaskMode m = model.config().mode;
  nodes.l_c = mode_has_classifier(m) ? classification_loss(g, nodes.fwd.logits, labels)
                                     : g.scalar(0.0);
  nodes.l_r = mode_has_regressor(m) ? regression_loss(g, nodes.fwd.portion, portions)
                                    : g.scalar(0.0);
  nodes.l_ps = mode_is_soft(m) ? model.sharing_penalty(g, pb) : g.scalar(0.0);
  nodes.overall = overall_loss(g, nodes.l_c, nodes.l_r, nodes.l_ps, weights);
  return nodes;
}

void TrainConfig::validate() const {
  if (epochs <= 0) throw ConfigError("train: epochs must be positive");
  if (batch_size < 2) throw ConfigError("train: batch_size must be at least 2");
  if (!(base_lr > 0.0)) throw ConfigError("train: base_lr must be positive");
  if (!(lr_drop_factor > 0.0)) throw ConfigError("train: lr_drop_factor must be positive");
  if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be non-negative");
  for (size_t i = 1; i < lr_drop_epochs.size(); ++i)
    if (lr_drop_epochs[i] <= lr_drop_epochs[i - 1])
      throw ConfigError("train: lr_drop_epochs must be strictly increasing");
  if (weights.lambda_c < 0.0 || weights.lambda_r < 0.0 || weights.lambda_ps < 0.0)
    throw ConfigError("train: loss weights must be non-negative");
}

void Adam::step(const std::vector<ParamRef>& params,
                const std::vector<const std::vector<double>*>& grads, double lr,
                double weight_decay) {
  if (params.size() != grads.size()) throw ConfigError("adam: gradient count mismatch");
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i].tensor->values.size(), 0.0);
      v_[i].assign(params[i].tensor->values.size(), 0.0);
    }
  }
  if (m_.size() != params.size()) throw ConfigError("adam: parameter set changed between steps");
  ++t_;
  double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t i = 0; i < params.size(); ++i) {
    std::vector<double>& theta = params[i].tensor->values;
    const std::vector<double>& grad = *grads[i];
    if (grad.size() != theta.size()) throw ConfigError("adam: gradient size mismatch");
    for (size_t k = 0; k < theta.size(); ++k) {
      double gk = grad[k] + weight_decay * theta[k];
      m_[i][k] = beta1_ * m_[i][k] + (1.0 - beta1_) * gk;
      v_[i][k] = beta2_ * v_[i][k] + (1.0 - beta2_) * gk * gk;
      double mhat = m_[i][k] / bc1;
      double vhat = v_[i][k] / bc2;
      theta[k] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

Tensor batch_images(const std::vector<SampleView>& samples, const std::vector<size_t>& indices) {
  if (indices.empty()) throw DataError("batch_images: empty batch");
  const SampleView& first = samples[indices[0]];
  int H = first.height, W = first.width, C = first.channels;
  Tensor t = Tensor::zeros({static_cast<int>(indices.size()), C, H, W});
  for (size_t b = 0; b < indices.size(); ++b) {
    const SampleView& s = samples[indices[b]];
    if (s.height != H || s.width != W || s.channels != C)
      throw DataError("batch_images: mixed image sizes in one batch");
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        for (int c = 0; c < C; ++c)
          t.values[((b * C + c) * H + y) * W + x] =
              static_cast<double>(s.pixels[(y * W + x) * C + c]);
  }
  return t;
}

namespace {

double lr_at_epoch(const TrainConfig& cfg, int epoch) {  // epoch is 1-based
  double lr = cfg.base_lr;
  for (int drop : cfg.lr_drop_epochs)
    if (epoch > drop) lr *= cfg.lr_drop_factor;
  return lr;
}

}  // namespace

std::vector<EpochRecord> train(TwinModel& model, const std::vector<SampleView>& samples,
                               const TrainConfig& cfg) {
  cfg.validate();
  if (samples.empty()) throw DataError("train: empty dataset");

  std::vector<ParamRef> params = model.parameters();
  Adam adam;
  Rng shuffle_rng(stream_seed(cfg.seed, "shuffle"));
  std::vector<size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);

  std::vector<EpochRecord> trace;
  trace.reserve(static_cast<size_t>(cfg.epochs));

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double lr = lr_at_epoch(cfg, epoch);
    shuffle_rng.shuffle(order);

    double sum_c = 0.0, sum_r = 0.0, sum_ps = 0.0;
    int steps = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
      size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      if (end - start < 2) break;  // drop trailing single-sample batch
      std::vector<size_t> batch(order.begin() + static_cast<long>(start),
                                order.begin() + static_cast<long>(end));
      std::vector<int> labels;
      std::vector<double> portions;
      labels.reserve(batch.size());
      portions.reserve(batch.size());
      for (size_t idx : batch) {
        labels.push_back(samples[idx].label);
        portions.push_back(samples[idx].portion);
      }

      Graph g;
      ParamBinder pb(g, true);
      NodeId images = g.constant(batch_images(samples, batch));
      LossNodes nodes = build_losses(g, pb, model, images, labels, portions, cfg.weights, true);
      LossBreakdown step_loss = nodes.values(g, cfg.weights);
      if (!std::isfinite(step_loss.overall))
        throw DivergenceError("train: non-finite loss at epoch " + std::to_string(epoch) +
                              ", step " + std::to_string(steps + 1));

      GradMap grads = g.backward(nodes.overall);
      std::vector<const std::vector<double>*> aligned;
      aligned.reserve(params.size());
      std::unordered_map<const Tensor*, NodeId> bound_ids;
      for (const auto& [ref, id] : pb.bound()) bound_ids.emplace(ref.tensor, id);
      for (const ParamRef& p : params) {
        auto it = bound_ids.find(p.tensor);
        if (it == bound_ids.end())
          throw ConfigError("train: parameter " + p.name + " was not used in the step graph");
        aligned.push_back(&grads.at(it->second));
      }
      adam.step(params, aligned, lr, cfg.weight_decay);

      sum_c += step_loss.l_c;
      sum_r += step_loss.l_r;
      sum_ps += step_loss.l_ps;
      ++steps;
    }
    if (steps == 0) throw DataError("train: dataset too small for the configured batch size");

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.loss.l_c = sum_c / steps;
    rec.loss.l_r = sum_r / steps;
    rec.loss.l_ps = sum_ps / steps;
    rec.loss.overall = cfg.weights.lambda_c * rec.loss.l_c + cfg.weights.lambda_r * rec.loss.l_r +
                       cfg.weights.lambda_ps * rec.loss.l_ps;
    trace.push_back(rec);
  }
  return trace;
}

Prediction predict(const TwinModel& model, const std::vector<SampleView>& samples,
                   int batch_size) {
  if (batch_size < 1) throw ConfigError("predict: batch_size must be positive");
  Prediction out;
  TaskMode m = model.config().mode;
  for (size_t start = 0; start < samples.size(); start += static_cast<size_t>(batch_size)) {
    size_t end = std::min(samples.size(), start + static_cast<size_t>(batch_size));
    std::vector<size_t> batch;
    for (size_t i = start; i < end; ++i) batch.push_back(i);

    Graph g;
    ParamBinder pb(g, false);
    NodeId images = g.constant(batch_images(samples, batch));
    TwinModel::Forward fwd = model.forward(g, pb, images, false);

    if (mode_has_classifier(m)) {
      const Tensor& logits = g.value(fwd.logits);
      int n = logits.shape[1];
      for (size_t i = 0; i < batch.size(); ++i) {
        int best = 0;
        for (int j = 1; j < n; ++j)
          if (logits.values[i * n + j] > logits.values[i * n + best]) best = j;
        out.classes.push_back(best);
      }
    }
    if (mode_has_regressor(m)) {
      const Tensor& p = g.value(fwd.portion);
      for (size_t i = 0; i < batch.size(); ++i) out.portions.push_back(p.values[i]);
    }
  }
  return out;
}

}  // namespace mtask
