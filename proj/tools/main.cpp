#include <cstdlib>
#include <iomanip>
#include <iostream>

#include <CLI11.hpp>

#include "mtask/experiment.hpp"

namespace {

// distinct exit codes for scripting
constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitDivergence = 4;
constexpr int kExitGradcheck = 5;

struct GlobalArgs {
  std::string config_path;
  std::optional<uint64_t> seed;
  std::string out_dir;
  bool force = false;
};

mtask::ExperimentConfig resolve_config(const GlobalArgs& args) {
  std::string path = args.config_path;
  if (path.empty())
    if (const char* env = std::getenv("MTASK_CONFIG")) path = env;
  mtask::ExperimentConfig cfg =
      path.empty() ? mtask::ExperimentConfig{} : mtask::load_experiment_config(path);
  if (args.seed) {
    cfg.seed = *args.seed;
    cfg.train.seed = *args.seed;
  }
  if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
  return cfg;
}

std::vector<uint64_t> parse_seeds(const std::string& text) {
  std::vector<uint64_t> seeds;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (part.empty()) continue;
    seeds.push_back(std::stoull(part));
  }
  if (seeds.empty()) throw mtask::ConfigError("ablation: empty seed list");
  return seeds;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-task classification + portion regression experiments on synthetic data"};
  app.require_subcommand(1);

  GlobalArgs args;
  app.add_option("--config", args.config_path, "experiment config JSON (env: MTASK_CONFIG)");
  uint64_t seed_opt = 0;
  CLI::Option* seed_flag = app.add_option("--seed", seed_opt, "override the experiment seed");
  app.add_option("--out", args.out_dir, "override the output directory");
  app.add_flag("--force", args.force, "overwrite non-empty targets");

  CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic dataset directory");
  CLI::App* train_cmd = app.add_subcommand("train", "train one experiment configuration");
  std::string train_dataset;
  train_cmd->add_option("--dataset", train_dataset, "dataset directory (overrides config)");
  std::string train_mode;
  train_cmd->add_option("--mode", train_mode, "experiment mode (overrides config)");

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint against a dataset");
  std::string eval_checkpoint, eval_dataset, eval_split = "test";
  eval_cmd->add_option("--checkpoint", eval_checkpoint, "checkpoint file")->required();
  eval_cmd->add_option("--dataset", eval_dataset, "dataset directory")->required();
  eval_cmd->add_option("--split", eval_split, "train, test or all");

  CLI::App* abl = app.add_subcommand("ablation", "run every mode over a shared seed set");
  std::string seeds_text = "1,2,3";
  int jobs = 2;
  abl->add_option("--seeds", seeds_text, "comma-separated training seeds");
  abl->add_option("--jobs", jobs, "parallel runs");

  CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference check of every component");

  for (CLI::App* sub : app.get_subcommands(nullptr)) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (seed_flag->count() > 0) args.seed = seed_opt;

    if (gen->parsed()) {
      mtask::ExperimentConfig cfg = resolve_config(args);
      std::filesystem::path dir = mtask::cmd_gen_data(cfg, args.force);
      mtask::Dataset ds = mtask::load_dataset(dir.string());
      std::cout << "dataset: " << dir.string() << "\n"
                << "items: " << ds.items.size() << " across " << ds.n_classes << " classes\n";
      return kExitOk;
    }

    if (train_cmd->parsed()) {
      mtask::ExperimentConfig cfg = resolve_config(args);
      if (!train_dataset.empty()) cfg.dataset_dir = train_dataset;
      if (!train_mode.empty()) {
        mtask::mode_from_string(train_mode);
        cfg.mode = train_mode;
      }
      mtask::RunResult res = mtask::cmd_train(cfg);
      std::cout << "run: " << res.run_dir.string() << "\n"
                << "final overall loss: " << res.trace.back().loss.overall << "\n"
                << "test report: " << res.test_report.to_json() << "\n";
      return kExitOk;
    }

    if (eval_cmd->parsed()) {
      mtask::ExperimentConfig cfg = resolve_config(args);
      mtask::MetricsReport rep =
          mtask::cmd_eval(eval_checkpoint, eval_dataset, eval_split, cfg.out_dir,
                          cfg.mccr_constant);
      std::cout << rep.to_json() << "\n";
      return kExitOk;
    }

    if (abl->parsed()) {
      mtask::ExperimentConfig cfg = resolve_config(args);
      mtask::AblationResult result = mtask::cmd_ablation(cfg, parse_seeds(seeds_text), jobs);
      std::filesystem::path out(cfg.out_dir);
      std::filesystem::create_directories(out);
      std::ofstream(out / "ablation.txt") << result.to_text();
      std::ofstream(out / "ablation.csv") << result.to_csv();
      std::ofstream(out / "ablation.json") << result.to_json() << "\n";
      std::cout << result.to_text();
      if (result.any_failed()) {
        std::cerr << "ablation: one or more runs failed\n";
        return kExitDivergence;
      }
      return kExitOk;
    }

    if (gc->parsed()) {
      std::vector<mtask::GradcheckLine> lines = mtask::gradcheck_all();
      bool all_pass = true;
      for (const mtask::GradcheckLine& l : lines) {
        std::cout << std::left << std::setw(18) << l.component << (l.pass ? "PASS" : "FAIL")
                  << "  max rel err " << std::scientific << std::setprecision(2) << l.max_rel_err;
        if (l.flagged > 0) std::cout << "  (" << l.flagged << " kink entries skipped)";
        std::cout << std::defaultfloat << "\n";
        all_pass = all_pass && l.pass;
      }
      return all_pass ? kExitOk : kExitGradcheck;
    }
  } catch (const mtask::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const mtask::DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const mtask::DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitUsage;
}
