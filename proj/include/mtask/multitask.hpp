#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mtask/layers.hpp"

namespace mtask {

// One row of the experiment matrix. The first two train a single task; hps
// shares one backbone between both heads; the sps variants train twin
// backbones under the parameter-sharing penalty, optionally fusing the
// classifier's features into the portion head (cdfa) with LN/BN variants.
enum class TaskMode {
  ClassificationOnly,
  PortionOnly,
  HardSharing,
  SoftSharing,
  SoftSharingCdfa,
  SoftSharingCdfaBn,
  SoftSharingCdfaLn,
  SoftSharingCdfaLnBn,
};

const std::vector<std::pair<std::string, TaskMode>>& mode_names();
std::string mode_to_string(TaskMode mode);
TaskMode mode_from_string(const std::string& name);  // unknown -> ConfigError listing valid names

bool mode_has_classifier(TaskMode m);
bool mode_has_regressor(TaskMode m);
bool mode_is_hard(TaskMode m);
bool mode_is_soft(TaskMode m);
bool mode_has_cdfa(TaskMode m);
bool mode_cdfa_ln(TaskMode m);
bool mode_cdfa_bn(TaskMode m);

enum class LnPlacement { PreConcat, PostConcat };
enum class NormOrder { LnThenBn, BnThenLn };  // applies to post-concat LN only

struct FusionConfig {
  // Default on: the portion head reads x_c without pushing gradients into the
  // classification trunk. At this model scale the scaled L1 gradient
  // otherwise drowns out the cross-entropy signal; set false for the
  // fully-joint variant.
  bool detach_xc = true;
  LnPlacement ln_placement = LnPlacement::PreConcat;
  NormOrder norm_order = NormOrder::LnThenBn;
  double epsilon = 1e-5;
  double momentum = 0.1;
  bool operator==(const FusionConfig&) const = default;
};

// Portion head with cross-domain feature fusion: optionally layer-normalize
// the two feature vectors, concatenate as (x_p, x_c), optionally
// batch-normalize, then a fully-connected map to one output scaled to
// portion units.
struct FusionHead {
  FusionConfig cfg;
  bool use_ln = false, use_bn = false;
  NormLayer ln_c, ln_r, ln_joint;
  NormLayer bn;
  Dense fc;  // [2*feature_dim, 1]
  double portion_scale = 1.0;

  static FusionHead init(int feature_dim, bool use_ln, bool use_bn, const FusionConfig& cfg,
                         double portion_scale, Rng& rng);

  // x_p, x_c are [m, feature_dim]; returns portion predictions [m, 1].
  // pre_fc, when given, receives the node feeding the fully-connected layer.
  NodeId forward(Graph& g, ParamBinder& pb, NodeId x_p, NodeId x_c, bool training,
                 NodeId* pre_fc = nullptr);

  std::vector<ParamRef> params(const std::string& prefix);
  std::vector<ParamRef> state(const std::string& prefix);
};

struct TwinModelConfig {
  ArchSpec arch;
  TaskMode mode = TaskMode::SoftSharing;
  FusionConfig fusion;
  double shared_layer_fraction = 1.0;  // of backbone layers, from the bottom
};

class TwinModel {
 public:
  TwinModel() = default;
  // Parameter init draws from per-component streams derived from `seed`, so a
  // single-task model and the matching half of a twin model see identical
  // draws.
  TwinModel(TwinModelConfig cfg, uint64_t seed);

  struct Forward {
    NodeId logits = -1;      // [m, n_classes] when the mode has a classifier
    NodeId portion = -1;     // [m, 1] when the mode has a regressor
    NodeId features_c = -1;  // x_c
    NodeId features_r = -1;  // x_p
    NodeId pre_fc = -1;      // fusion input to the fc layer (cdfa modes)
  };
  Forward forward(Graph& g, ParamBinder& pb, NodeId images, bool training) const;

  // Sum of squared differences over the shared slice of the twin backbones
  // (soft-sharing modes only).
  NodeId sharing_penalty(Graph& g, ParamBinder& pb) const;

  std::vector<ParamRef> parameters() const;  // learnables, stable order
  std::vector<ParamRef> norm_state() const;  // BN running stats

  const TwinModelConfig& config() const { return cfg_; }
  const Backbone& backbone_c() const;
  const Backbone& backbone_r() const;
  Backbone& backbone_c();
  Backbone& backbone_r();

 private:
  TwinModelConfig cfg_;
  std::optional<Backbone> bb_c_, bb_r_;
  std::optional<Dense> head_class_;
  std::optional<Dense> head_portion_;
  std::optional<FusionHead> fusion_;
};

// Mean cross-entropy of softmax(logits) against integer labels.
NodeId classification_loss(Graph& g, NodeId logits, const std::vector<int>& labels);

// Mean absolute error |z - prediction| in portion units.
NodeId regression_loss(Graph& g, NodeId prediction, const std::vector<double>& targets);

struct LossWeights {
  double lambda_c = 1.0, lambda_r = 1.0, lambda_ps = 1.0;
  bool operator==(const LossWeights&) const = default;
};

NodeId overall_loss(Graph& g, NodeId l_c, NodeId l_r, NodeId l_ps, const LossWeights& w);

struct LossBreakdown {
  double l_c = 0.0, l_r = 0.0, l_ps = 0.0;
  double overall = 0.0;
};

struct LossNodes {
  NodeId l_c = -1, l_r = -1, l_ps = -1, overall = -1;
  TwinModel::Forward fwd;
  LossBreakdown values(const Graph& g, const LossWeights& w) const;
};

// Builds the full loss graph for one batch. Losses absent from the mode are
// zero constants, so every trace logs all three components.
LossNodes build_losses(Graph& g, ParamBinder& pb, const TwinModel& model, NodeId images,
                       const std::vector<int>& labels, const std::vector<double>& portions,
                       const LossWeights& weights, bool training);

struct TrainConfig {
  int epochs = 60;
  double base_lr = 1e-3;
  std::vector<int> lr_drop_epochs = {20, 40};  // 1-based; lr drops after these epochs
  double lr_drop_factor = 0.1;
  double weight_decay = 1e-4;
  int batch_size = 32;
  // lambda_ps calibrated for these parameter counts: at 1.0 the penalty's
  // per-coordinate pull dominates Adam's normalized steps and ties the twins
  // together. The unweighted sum stays available via config.
  LossWeights weights{1.0, 1.0, 0.003};
  uint64_t seed = 1;
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

class Adam {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  // grads[i] pairs with params[i]; weight decay is added to the gradient
  // (loss-coupled L2).
  void step(const std::vector<ParamRef>& params, const std::vector<const std::vector<double>*>& grads,
            double lr, double weight_decay);

 private:
  double beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Non-owning view of one labeled image, pixels in HWC float order.
struct SampleView {
  const float* pixels = nullptr;
  int height = 0, width = 0, channels = 0;
  int label = -1;
  double portion = 0.0;
};

Tensor batch_images(const std::vector<SampleView>& samples, const std::vector<size_t>& indices);

struct EpochRecord {
  int epoch = 0;  // 1-based
  LossBreakdown loss;
  double lr = 0.0;
};

// Seeded-shuffle mini-batch Adam training. Trailing batches smaller than 2
// samples are dropped. Throws DivergenceError when the overall loss stops
// being finite, naming the epoch and step.
std::vector<EpochRecord> train(TwinModel& model, const std::vector<SampleView>& samples,
                               const TrainConfig& cfg);

struct Prediction {
  std::vector<int> classes;       // empty when the mode has no classifier
  std::vector<double> portions;   // empty when the mode has no regressor
};

Prediction predict(const TwinModel& model, const std::vector<SampleView>& samples,
                   int batch_size = 64);

}  // namespace mtask
