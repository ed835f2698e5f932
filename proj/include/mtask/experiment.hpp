#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mtask/checkpoint.hpp"
#include "mtask/data.hpp"
#include "mtask/metrics.hpp"

namespace mtask {

// Data pipeline knobs on top of the raw generator parameters.
struct DataConfig {
  GenParams gen;
  double test_fraction = 0.2;
  int train_target = 80;  // balanced-augment target for each train class
  bool augment_before_split = false;  // mirror the leaky order some pipelines use
  bool operator==(const DataConfig&) const = default;
};

struct ExperimentConfig {
  std::string mode = "sps_cdfa_ln_bn";
  uint64_t seed = 1;
  std::string dataset_dir;  // when set, load this instead of generating
  std::string out_dir = "runs";
  ArchSpec arch;
  TrainConfig train;
  FusionConfig fusion;
  double shared_layer_fraction = 1.0;
  double mccr_constant = 1.0;
  DataConfig data;
  bool operator==(const ExperimentConfig&) const = default;
};

// Full-defaulting JSON codec; arch.image_size and arch.n_classes are slaved
// to the data section, and train.seed to the experiment seed, so a resolved
// config is always self-consistent and round-trips losslessly.
ExperimentConfig experiment_config_from_json(const std::string& text);
std::string experiment_config_to_json(const ExperimentConfig& cfg, bool pretty = false);
ExperimentConfig load_experiment_config(const std::string& path);

TwinModelConfig model_config_of(const ExperimentConfig& cfg);

// generate -> split -> augment train classes (default), or the
// augment-then-split order when configured.
Dataset build_dataset(const DataConfig& cfg);
// Loads cfg.dataset_dir when set, otherwise builds synthetically; updates
// arch dims from the actual dataset.
Dataset obtain_dataset(ExperimentConfig& cfg);

MetricsReport evaluate_model(const TwinModel& model, const Dataset& ds, SplitTag split,
                             double mccr_constant);

std::filesystem::path cmd_gen_data(const ExperimentConfig& cfg, bool force);

struct RunResult {
  std::filesystem::path run_dir;
  std::vector<EpochRecord> trace;
  MetricsReport test_report;
};
RunResult cmd_train(const ExperimentConfig& cfg);

MetricsReport cmd_eval(const std::string& checkpoint_path, const std::string& dataset_dir,
                       const std::string& split, const std::string& out_dir,
                       double mccr_constant = 1.0);

struct AblationRow {
  std::string mode;
  bool failed = false;
  std::string error;
  std::optional<double> accuracy, mae, mae_correct, mccr;  // means over seeds
};
struct AblationResult {
  std::vector<AblationRow> rows;
  std::vector<uint64_t> seeds;
  bool any_failed() const;
  std::string to_text() const;
  std::string to_csv() const;
  std::string to_json() const;
};

// Runs every mode with every seed on one shared dataset; rows without CDFA
// leave MAE-Correct/MCCR blank. jobs > 1 runs experiments in parallel; each
// run is self-contained, so results do not depend on scheduling.
AblationResult cmd_ablation(const ExperimentConfig& base, const std::vector<uint64_t>& seeds,
                            int jobs = 2);

struct GradcheckLine {
  std::string component;
  double max_rel_err = 0.0;
  int flagged = 0;
  bool pass = false;
};
// One line per primitive, per norm layer, per loss, and the full fusion head.
std::vector<GradcheckLine> gradcheck_all(double tolerance = 1e-4);

}  // namespace mtask
