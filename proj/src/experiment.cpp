#include "mtask/experiment.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <future>
#include <iomanip>
#include <mutex>
#include <semaphore>
#include <sstream>

#include <json.hpp>

namespace mtask {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json(const std::string& text, const char* what) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string(what) + ": invalid JSON: " + e.what());
  }
}

std::string timestamp_utc() {
  auto now = std::chrono::system_clock::now();
  std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y%m%d-%H%M%S");
  return os.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  out << text;
  if (!out) throw DataError("cannot write '" + path.string() + "'");
}

std::mutex results_log_mutex;

void append_results_log(const fs::path& out_dir, const std::string& line) {
  std::lock_guard<std::mutex> lock(results_log_mutex);
  fs::create_directories(out_dir);
  std::ofstream out(out_dir / "results.jsonl", std::ios::app);
  out << line << "\n";
}

}  // namespace

ExperimentConfig experiment_config_from_json(const std::string& text) {
  json j = read_json(text, "experiment config");
  ExperimentConfig cfg;
  cfg.mode = j.value("mode", cfg.mode);
  mode_from_string(cfg.mode);  // reject unknown modes early
  cfg.seed = j.value("seed", cfg.seed);
  cfg.dataset_dir = j.value("dataset_dir", cfg.dataset_dir);
  cfg.out_dir = j.value("out_dir", cfg.out_dir);
  cfg.shared_layer_fraction = j.value("shared_layer_fraction", cfg.shared_layer_fraction);
  cfg.mccr_constant = j.value("mccr_constant", cfg.mccr_constant);

  if (j.contains("arch")) {
    const json& a = j.at("arch");
    cfg.arch.in_channels = a.value("in_channels", cfg.arch.in_channels);
    cfg.arch.conv_channels = a.value("conv_channels", cfg.arch.conv_channels);
    cfg.arch.feature_dim = a.value("feature_dim", cfg.arch.feature_dim);
    cfg.arch.portion_scale = a.value("portion_scale", cfg.arch.portion_scale);
  }
  if (j.contains("train")) {
    const json& t = j.at("train");
    cfg.train.epochs = t.value("epochs", cfg.train.epochs);
    cfg.train.base_lr = t.value("base_lr", cfg.train.base_lr);
    cfg.train.lr_drop_epochs = t.value("lr_drop_epochs", cfg.train.lr_drop_epochs);
    cfg.train.lr_drop_factor = t.value("lr_drop_factor", cfg.train.lr_drop_factor);
    cfg.train.weight_decay = t.value("weight_decay", cfg.train.weight_decay);
    cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
    cfg.train.weights.lambda_c = t.value("lambda_c", cfg.train.weights.lambda_c);
    cfg.train.weights.lambda_r = t.value("lambda_r", cfg.train.weights.lambda_r);
    cfg.train.weights.lambda_ps = t.value("lambda_ps", cfg.train.weights.lambda_ps);
  }
  if (j.contains("fusion")) {
    const json& f = j.at("fusion");
    cfg.fusion.detach_xc = f.value("detach_xc", cfg.fusion.detach_xc);
    std::string place = f.value("ln_placement", std::string("pre_concat"));
    if (place == "pre_concat") cfg.fusion.ln_placement = LnPlacement::PreConcat;
    else if (place == "post_concat") cfg.fusion.ln_placement = LnPlacement::PostConcat;
    else throw ConfigError("fusion: unknown ln_placement '" + place + "'");
    std::string order = f.value("norm_order", std::string("ln_then_bn"));
    if (order == "ln_then_bn") cfg.fusion.norm_order = NormOrder::LnThenBn;
    else if (order == "bn_then_ln") cfg.fusion.norm_order = NormOrder::BnThenLn;
    else throw ConfigError("fusion: unknown norm_order '" + order + "'");
    cfg.fusion.epsilon = f.value("epsilon", cfg.fusion.epsilon);
    cfg.fusion.momentum = f.value("momentum", cfg.fusion.momentum);
  }
  if (j.contains("data")) {
    const json& d = j.at("data");
    cfg.data.gen.n_classes = d.value("n_classes", cfg.data.gen.n_classes);
    cfg.data.gen.per_class = d.value("per_class", cfg.data.gen.per_class);
    cfg.data.gen.image_size = d.value("image_size", cfg.data.gen.image_size);
    cfg.data.gen.imbalance = d.value("imbalance", cfg.data.gen.imbalance);
    cfg.data.gen.z_max = d.value("z_max", cfg.data.gen.z_max);
    cfg.data.gen.seed = d.value("seed", cfg.data.gen.seed);
    cfg.data.test_fraction = d.value("test_fraction", cfg.data.test_fraction);
    cfg.data.train_target = d.value("train_target", cfg.data.train_target);
    cfg.data.augment_before_split = d.value("augment_before_split", cfg.data.augment_before_split);
  }

  // single sources of truth: image dims and class count follow the data
  // section, the shuffle seed follows the experiment seed
  cfg.arch.image_size = cfg.data.gen.image_size;
  cfg.arch.n_classes = cfg.data.gen.n_classes;
  cfg.train.seed = cfg.seed;
  return cfg;
}

std::string experiment_config_to_json(const ExperimentConfig& cfg, bool pretty) {
  json j{
      {"mode", cfg.mode},
      {"seed", cfg.seed},
      {"dataset_dir", cfg.dataset_dir},
      {"out_dir", cfg.out_dir},
      {"shared_layer_fraction", cfg.shared_layer_fraction},
      {"mccr_constant", cfg.mccr_constant},
      {"arch",
       {{"in_channels", cfg.arch.in_channels},
        {"conv_channels", cfg.arch.conv_channels},
        {"feature_dim", cfg.arch.feature_dim},
        {"portion_scale", cfg.arch.portion_scale}}},
      {"train",
       {{"epochs", cfg.train.epochs},
        {"base_lr", cfg.train.base_lr},
        {"lr_drop_epochs", cfg.train.lr_drop_epochs},
        {"lr_drop_factor", cfg.train.lr_drop_factor},
        {"weight_decay", cfg.train.weight_decay},
        {"batch_size", cfg.train.batch_size},
        {"lambda_c", cfg.train.weights.lambda_c},
        {"lambda_r", cfg.train.weights.lambda_r},
        {"lambda_ps", cfg.train.weights.lambda_ps}}},
      {"fusion",
       {{"detach_xc", cfg.fusion.detach_xc},
        {"ln_placement",
         cfg.fusion.ln_placement == LnPlacement::PreConcat ? "pre_concat" : "post_concat"},
        {"norm_order", cfg.fusion.norm_order == NormOrder::LnThenBn ? "ln_then_bn" : "bn_then_ln"},
        {"epsilon", cfg.fusion.epsilon},
        {"momentum", cfg.fusion.momentum}}},
      {"data",
       {{"n_classes", cfg.data.gen.n_classes},
        {"per_class", cfg.data.gen.per_class},
        {"image_size", cfg.data.gen.image_size},
        {"imbalance", cfg.data.gen.imbalance},
        {"z_max", cfg.data.gen.z_max},
        {"seed", cfg.data.gen.seed},
        {"test_fraction", cfg.data.test_fraction},
        {"train_target", cfg.data.train_target},
        {"augment_before_split", cfg.data.augment_before_split}}},
  };
  return pretty ? j.dump(2) : j.dump();
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  std::string text((std::istreambuf_iterator<char>(in)), {});
  return experiment_config_from_json(text);
}

TwinModelConfig model_config_of(const ExperimentConfig& cfg) {
  TwinModelConfig mc;
  mc.arch = cfg.arch;
  mc.mode = mode_from_string(cfg.mode);
  mc.fusion = cfg.fusion;
  mc.shared_layer_fraction = cfg.shared_layer_fraction;
  return mc;
}

Dataset build_dataset(const DataConfig& cfg) {
  Dataset ds = generate_synthetic_dataset(cfg.gen);
  if (cfg.augment_before_split) {
    // the order described for the source data: balance everything, then split
    int total_target = static_cast<int>(
        std::lround(cfg.train_target / std::max(1e-9, 1.0 - cfg.test_fraction)));
    ds = balanced_augment(ds, total_target, cfg.gen.seed);
    ds = split_train_test(ds, cfg.test_fraction, cfg.gen.seed);
  } else {
    // leak-free default: test items never have augmented siblings
    ds = split_train_test(ds, cfg.test_fraction, cfg.gen.seed);
    ds = balanced_augment(ds, cfg.train_target, cfg.gen.seed);
  }
  return ds;
}

Dataset obtain_dataset(ExperimentConfig& cfg) {
  Dataset ds;
  if (!cfg.dataset_dir.empty()) {
    ds = load_dataset(cfg.dataset_dir);
    if (ds.items.empty()) throw DataError("dataset '" + cfg.dataset_dir + "' is empty");
    cfg.arch.image_size = ds.items[0].image.height;
    cfg.arch.in_channels = ds.items[0].image.channels;
    cfg.arch.n_classes = ds.n_classes;
    cfg.data.gen = ds.gen;
  } else {
    ds = build_dataset(cfg.data);
  }
  return ds;
}

MetricsReport evaluate_model(const TwinModel& model, const Dataset& ds, SplitTag split,
                             double mccr_constant) {
  std::vector<SampleView> views = ds.views(split);
  if (views.empty()) throw DataError("evaluate: no samples in the requested split");
  Prediction pred = predict(model, views);
  TaskMode m = model.config().mode;

  std::vector<EvalRecord> records(views.size());
  for (size_t i = 0; i < views.size(); ++i) {
    if (mode_has_classifier(m)) {
      records[i].predicted_class = pred.classes[i];
      records[i].true_class = views[i].label;
    }
    if (mode_has_regressor(m)) {
      records[i].predicted_portion = pred.portions[i];
      records[i].true_portion = views[i].portion;
    }
  }
  MetricsReport rep = build_report(records, mccr_constant);
  rep.mode = mode_to_string(m);
  rep.split = split == SplitTag::Train ? "train" : (split == SplitTag::Test ? "test" : "all");
  return rep;
}

fs::path cmd_gen_data(const ExperimentConfig& cfg, bool force) {
  if (cfg.data.gen.n_classes < 2) throw ConfigError("gen-data: n_classes must be at least 2");
  if (cfg.data.gen.per_class < 1) throw ConfigError("gen-data: per_class must be at least 1");
  fs::path dir = cfg.dataset_dir.empty() ? fs::path(cfg.out_dir) / "dataset"
                                         : fs::path(cfg.dataset_dir);
  if (fs::exists(dir) && !fs::is_empty(dir) && !force)
    throw DataError("gen-data: '" + dir.string() + "' exists and is not empty (use --force)");
  Dataset ds = build_dataset(cfg.data);
  save_dataset(ds, dir.string());
  return dir;
}

RunResult cmd_train(const ExperimentConfig& base_cfg) {
  ExperimentConfig cfg = base_cfg;
  Dataset ds = obtain_dataset(cfg);

  fs::path run_dir = fs::path(cfg.out_dir) /
                     (cfg.mode + "_s" + std::to_string(cfg.seed) + "_" + timestamp_utc());
  for (int suffix = 2; fs::exists(run_dir); ++suffix)
    run_dir = fs::path(cfg.out_dir) / (cfg.mode + "_s" + std::to_string(cfg.seed) + "_" +
                                       timestamp_utc() + "-" + std::to_string(suffix));
  fs::create_directories(run_dir);
  write_file(run_dir / "config.json", experiment_config_to_json(cfg, true) + "\n");

  TwinModel model(model_config_of(cfg), cfg.seed);
  std::vector<SampleView> train_views =
      ds.has_split() ? ds.views(SplitTag::Train) : ds.views(SplitTag::None);
  RunResult result;
  result.run_dir = run_dir;
  result.trace = train(model, train_views, cfg.train);

  std::ostringstream trace_text;
  for (const EpochRecord& r : result.trace) {
    json line{{"epoch", r.epoch},   {"l_c", r.loss.l_c},         {"l_r", r.loss.l_r},
              {"l_ps", r.loss.l_ps}, {"overall", r.loss.overall}, {"lr", r.lr}};
    trace_text << line.dump() << "\n";
  }
  write_file(run_dir / "trace.jsonl", trace_text.str());
  save_checkpoint(model, (run_dir / "checkpoint.bin").string());

  if (ds.has_split()) {
    MetricsReport train_rep = evaluate_model(model, ds, SplitTag::Train, cfg.mccr_constant);
    write_file(run_dir / "report_train.json", train_rep.to_json() + "\n");
    append_results_log(cfg.out_dir, train_rep.to_json());
    result.test_report = evaluate_model(model, ds, SplitTag::Test, cfg.mccr_constant);
  } else {
    result.test_report = evaluate_model(model, ds, SplitTag::None, cfg.mccr_constant);
  }
  write_file(run_dir / "report_test.json", result.test_report.to_json() + "\n");
  append_results_log(cfg.out_dir, result.test_report.to_json());
  return result;
}

MetricsReport cmd_eval(const std::string& checkpoint_path, const std::string& dataset_dir,
                       const std::string& split, const std::string& out_dir,
                       double mccr_constant) {
  TwinModel model = load_checkpoint(checkpoint_path);
  Dataset ds = load_dataset(dataset_dir);
  if (ds.items.empty()) throw DataError("eval: dataset is empty");

  const ArchSpec& arch = model.config().arch;
  if (arch.image_size != ds.items[0].image.height || arch.n_classes != ds.n_classes ||
      arch.in_channels != ds.items[0].image.channels) {
    std::ostringstream os;
    os << "eval: checkpoint arch (image_size " << arch.image_size << ", channels "
       << arch.in_channels << ", n_classes " << arch.n_classes << ") does not match dataset ("
       << "image_size " << ds.items[0].image.height << ", channels "
       << ds.items[0].image.channels << ", n_classes " << ds.n_classes << ")";
    throw ConfigError(os.str());
  }

  SplitTag tag;
  if (split == "train") tag = SplitTag::Train;
  else if (split == "test") tag = SplitTag::Test;
  else if (split == "all") tag = SplitTag::None;
  else throw ConfigError("eval: split must be train, test or all, got '" + split + "'");

  MetricsReport rep = evaluate_model(model, ds, tag, mccr_constant);
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_file(fs::path(out_dir) / ("eval_" + rep.mode + "_" + rep.split + ".json"),
               rep.to_json() + "\n");
    append_results_log(out_dir, rep.to_json());
  }
  return rep;
}

bool AblationResult::any_failed() const {
  for (const AblationRow& r : rows)
    if (r.failed) return true;
  return false;
}

namespace {

std::string cell(const std::optional<double>& v, int precision = 2) {
  if (!v) return "-";
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << *v;
  return os.str();
}

}  // namespace

std::string AblationResult::to_text() const {
  std::ostringstream os;
  os << std::left << std::setw(22) << "Method" << std::right << std::setw(14) << "Accuracy (%)"
     << std::setw(12) << "MAE" << std::setw(14) << "MAE-Correct" << std::setw(10) << "MCCR"
     << "\n";
  for (const AblationRow& r : rows) {
    os << std::left << std::setw(22) << r.mode << std::right;
    if (r.failed) {
      os << std::setw(14) << "FAILED" << "  " << r.error << "\n";
      continue;
    }
    std::optional<double> acc_pct;
    if (r.accuracy) acc_pct = 100.0 * *r.accuracy;
    os << std::setw(14) << cell(acc_pct) << std::setw(12) << cell(r.mae) << std::setw(14)
       << cell(r.mae_correct) << std::setw(10) << cell(r.mccr, 4) << "\n";
  }
  return os.str();
}

std::string AblationResult::to_csv() const {
  std::ostringstream os;
  os << "mode,accuracy,mae,mae_correct,mccr,failed\n";
  auto raw = [](const std::optional<double>& v) {
    if (!v) return std::string();
    std::ostringstream o;
    o << std::setprecision(17) << *v;
    return o.str();
  };
  for (const AblationRow& r : rows)
    os << r.mode << "," << raw(r.accuracy) << "," << raw(r.mae) << "," << raw(r.mae_correct)
       << "," << raw(r.mccr) << "," << (r.failed ? "1" : "0") << "\n";
  return os.str();
}

std::string AblationResult::to_json() const {
  json rows_json = json::array();
  for (const AblationRow& r : rows) {
    json row{{"mode", r.mode}, {"failed", r.failed}};
    if (!r.error.empty()) row["error"] = r.error;
    if (r.accuracy) row["accuracy"] = *r.accuracy;
    if (r.mae) row["mae"] = *r.mae;
    if (r.mae_correct) row["mae_correct"] = *r.mae_correct;
    if (r.mccr) row["mccr"] = *r.mccr;
    rows_json.push_back(row);
  }
  return json{{"seeds", seeds}, {"rows", rows_json}}.dump(2);
}

AblationResult cmd_ablation(const ExperimentConfig& base, const std::vector<uint64_t>& seeds,
                            int jobs) {
  if (seeds.empty()) throw ConfigError("ablation: need at least one seed");
  if (jobs < 1) jobs = 1;

  ExperimentConfig shared = base;
  Dataset ds = obtain_dataset(shared);

  struct Task {
    std::string mode;
    uint64_t seed;
  };
  std::vector<Task> tasks;
  for (const auto& [name, mode] : mode_names())
    for (uint64_t seed : seeds) tasks.push_back({name, seed});

  std::counting_semaphore<256> gate(jobs);
  auto run_one = [&](const Task& t) -> MetricsReport {
    gate.acquire();
    struct Release {
      std::counting_semaphore<256>* g;
      ~Release() { g->release(); }
    } release{&gate};

    ExperimentConfig cfg = shared;
    cfg.mode = t.mode;
    cfg.seed = t.seed;
    cfg.train.seed = t.seed;
    TwinModel model(model_config_of(cfg), cfg.seed);
    train(model, ds.views(SplitTag::Train), cfg.train);
    return evaluate_model(model, ds, SplitTag::Test, cfg.mccr_constant);
  };

  std::vector<std::future<MetricsReport>> futures;
  futures.reserve(tasks.size());
  for (const Task& t : tasks)
    futures.push_back(std::async(std::launch::async, run_one, std::cref(t)));

  AblationResult result;
  result.seeds = seeds;
  size_t fi = 0;
  for (const auto& [name, mode] : mode_names()) {
    AblationRow row;
    row.mode = name;
    double acc = 0, mae_v = 0, maec = 0, mccr_v = 0;
    int n_acc = 0, n_mae = 0, n_maec = 0, n_mccr = 0;
    for (size_t s = 0; s < seeds.size(); ++s, ++fi) {
      try {
        MetricsReport rep = futures[fi].get();
        if (rep.accuracy) { acc += *rep.accuracy; ++n_acc; }
        if (rep.mae) { mae_v += *rep.mae; ++n_mae; }
        if (rep.mae_correct) { maec += *rep.mae_correct; ++n_maec; }
        if (rep.mccr) { mccr_v += *rep.mccr; ++n_mccr; }
      } catch (const std::exception& e) {
        row.failed = true;
        row.error = e.what();
      }
    }
    if (!row.failed) {
      if (n_acc == static_cast<int>(seeds.size())) row.accuracy = acc / n_acc;
      if (n_mae == static_cast<int>(seeds.size())) row.mae = mae_v / n_mae;
      // Table 1 shows MAE-Correct/MCCR for the CDFA rows only
      if (mode_has_cdfa(mode)) {
        if (n_maec == static_cast<int>(seeds.size())) row.mae_correct = maec / n_maec;
        if (n_mccr == static_cast<int>(seeds.size())) row.mccr = mccr_v / n_mccr;
      }
    }
    result.rows.push_back(std::move(row));
  }
  return result;
}

namespace {

struct CheckAccum {
  double max_rel_err = 0.0;
  int flagged = 0;

  void take(const GradCheckResult& r) {
    max_rel_err = std::max(max_rel_err, r.max_rel_err);
    flagged += static_cast<int>(r.flagged.size());
  }
};

Tensor rand_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(s));
  for (double& v : t.values) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace

std::vector<GradcheckLine> gradcheck_all(double tolerance) {
  std::vector<GradcheckLine> lines;
  const double probe = 1e-4;

  auto component = [&](const std::string& name, auto&& build) {
    CheckAccum acc;
    build(acc);
    GradcheckLine line;
    line.component = name;
    line.max_rel_err = acc.max_rel_err;
    line.flagged = acc.flagged;
    line.pass = acc.max_rel_err <= tolerance;
    lines.push_back(line);
  };

  auto check_leaves = [&](Graph& g, NodeId loss, const std::vector<NodeId>& leaves,
                          CheckAccum& acc) {
    for (NodeId leaf : leaves) acc.take(g.grad_check(loss, leaf, probe));
  };

  component("add", [&](CheckAccum& acc) {
    Rng rng(101);
    Graph g;
    NodeId a = g.leaf(rand_tensor({4, 6}, rng).with_grad());
    NodeId b = g.leaf(rand_tensor({4, 6}, rng).with_grad());
    NodeId f = g.leaf(rand_tensor({6}, rng).with_grad());
    NodeId s = g.leaf(rand_tensor({1}, rng).with_grad());
    NodeId loss = g.sum(g.square(g.add(g.add(g.add(a, b), f), s)));
    check_leaves(g, loss, {a, b, f, s}, acc);
  });
  component("subtract", [&](CheckAccum& acc) {
    Rng rng(102);
    Graph g;
    NodeId a = g.leaf(rand_tensor({4, 6}, rng).with_grad());
    NodeId f = g.leaf(rand_tensor({6}, rng).with_grad());
    NodeId loss = g.sum(g.square(g.sub(a, f)));
    check_leaves(g, loss, {a, f}, acc);
  });
  component("multiply", [&](CheckAccum& acc) {
    Rng rng(103);
    Graph g;
    NodeId a = g.leaf(rand_tensor({4, 6}, rng).with_grad());
    NodeId b = g.leaf(rand_tensor({4, 6}, rng).with_grad());
    NodeId f = g.leaf(rand_tensor({6}, rng).with_grad());
    NodeId loss = g.sum(g.square(g.mul(g.mul(a, b), f)));
    check_leaves(g, loss, {a, b, f}, acc);
  });
  component("matmul", [&](CheckAccum& acc) {
    Rng rng(104);
    Graph g;
    NodeId a = g.leaf(rand_tensor({3, 5}, rng).with_grad());
    NodeId b = g.leaf(rand_tensor({5, 4}, rng).with_grad());
    NodeId loss = g.mean(g.square(g.matmul(a, b)));
    check_leaves(g, loss, {a, b}, acc);
  });
  component("conv2d", [&](CheckAccum& acc) {
    Rng rng(105);
    Graph g;
    NodeId x = g.leaf(rand_tensor({2, 2, 6, 6}, rng).with_grad());
    NodeId w = g.leaf(rand_tensor({3, 2, 3, 3}, rng, -0.4, 0.4).with_grad());
    NodeId b = g.leaf(rand_tensor({3}, rng).with_grad());
    NodeId loss = g.mean(g.square(g.conv2d(x, w, b, 1, 1)));
    check_leaves(g, loss, {x, w, b}, acc);
  });
  component("maxpool2d", [&](CheckAccum& acc) {
    Rng rng(106);
    Graph g;
    NodeId x = g.leaf(rand_tensor({2, 3, 4, 4}, rng).with_grad());
    NodeId loss = g.mean(g.square(g.maxpool2d(x, 2)));
    check_leaves(g, loss, {x}, acc);
  });
  component("relu", [&](CheckAccum& acc) {
    Rng rng(107);
    Graph g;
    NodeId x = g.leaf(rand_tensor({30}, rng).with_grad());
    NodeId loss = g.sum(g.square(g.relu(x)));
    check_leaves(g, loss, {x}, acc);
  });
  component("exp", [&](CheckAccum& acc) {
    Rng rng(108);
    Graph g;
    NodeId x = g.leaf(rand_tensor({30}, rng).with_grad());
    NodeId loss = g.sum(g.square(g.exp(x)));
    check_leaves(g, loss, {x}, acc);
  });
  component("log", [&](CheckAccum& acc) {
    Rng rng(109);
    Graph g;
    NodeId x = g.leaf(rand_tensor({30}, rng, 0.2, 2.0).with_grad());
    NodeId loss = g.sum(g.square(g.log(x)));
    check_leaves(g, loss, {x}, acc);
  });
  component("abs", [&](CheckAccum& acc) {
    Rng rng(110);
    Graph g;
    NodeId x = g.leaf(rand_tensor({30}, rng).with_grad());
    NodeId loss = g.sum(g.square(g.abs(x)));
    check_leaves(g, loss, {x}, acc);
  });
  component("square", [&](CheckAccum& acc) {
    Rng rng(111);
    Graph g;
    NodeId x = g.leaf(rand_tensor({30}, rng).with_grad());
    NodeId loss = g.sum(g.square(x));
    check_leaves(g, loss, {x}, acc);
  });
  component("sqrt", [&](CheckAccum& acc) {
    Rng rng(112);
    Graph g;
    NodeId x = g.leaf(rand_tensor({30}, rng, 0.2, 2.0).with_grad());
    NodeId loss = g.sum(g.square(g.sqrt(x)));
    check_leaves(g, loss, {x}, acc);
  });
  component("mean-reduce", [&](CheckAccum& acc) {
    Rng rng(113);
    Graph g;
    NodeId x = g.leaf(rand_tensor({5, 7}, rng).with_grad());
    NodeId loss = g.add(g.sum(g.square(g.mean(x, 0))),
                        g.add(g.sum(g.square(g.mean(x, 1))), g.square(g.mean(x, -1))));
    check_leaves(g, loss, {x}, acc);
  });
  component("variance-reduce", [&](CheckAccum& acc) {
    Rng rng(114);
    Graph g;
    NodeId x = g.leaf(rand_tensor({5, 7}, rng).with_grad());
    NodeId loss = g.add(g.sum(g.square(g.variance(x, 0))),
                        g.add(g.sum(g.square(g.variance(x, 1))), g.square(g.variance(x, -1))));
    check_leaves(g, loss, {x}, acc);
  });
  component("sum-reduce", [&](CheckAccum& acc) {
    Rng rng(115);
    Graph g;
    NodeId x = g.leaf(rand_tensor({5, 7}, rng).with_grad());
    NodeId loss = g.add(g.sum(g.square(g.sum(x, 0))),
                        g.add(g.sum(g.square(g.sum(x, 1))), g.square(g.sum(x, -1))));
    check_leaves(g, loss, {x}, acc);
  });
  component("concatenate", [&](CheckAccum& acc) {
    Rng rng(116);
    Graph g;
    NodeId a = g.leaf(rand_tensor({3, 4}, rng).with_grad());
    NodeId b = g.leaf(rand_tensor({3, 2}, rng).with_grad());
    NodeId loss = g.sum(g.square(g.concat(a, b)));
    check_leaves(g, loss, {a, b}, acc);
  });
  component("broadcast", [&](CheckAccum& acc) {
    Rng rng(117);
    Graph g;
    NodeId s = g.leaf(rand_tensor({1}, rng).with_grad());
    NodeId r = g.leaf(rand_tensor({5}, rng).with_grad());
    NodeId c = g.leaf(rand_tensor({7}, rng).with_grad());
    NodeId loss = g.sum(g.square(g.add(
        g.broadcast_to(s, {5, 7}),
        g.mul(g.broadcast_to(r, {5, 7}, 0), g.broadcast_to(c, {5, 7}, 1)))));
    check_leaves(g, loss, {s, r, c}, acc);
  });
  component("reshape", [&](CheckAccum& acc) {
    Rng rng(118);
    Graph g;
    NodeId x = g.leaf(rand_tensor({4, 6}, rng).with_grad());
    NodeId loss = g.sum(g.square(g.reshape(x, {3, 8})));
    check_leaves(g, loss, {x}, acc);
  });
  component("layer-norm", [&](CheckAccum& acc) {
    Rng rng(119);
    NormLayer ln = NormLayer::layer_norm(16);
    Graph g;
    ParamBinder pb(g, true);
    NodeId x = g.leaf(rand_tensor({2, 16}, rng, -2.0, 2.0).with_grad());
    NodeId loss = g.sum(g.square(ln.forward(g, pb, x, true)));
    std::vector<NodeId> leaves = {x};
    for (const auto& [ref, id] : pb.bound()) leaves.push_back(id);
    check_leaves(g, loss, leaves, acc);
  });
  component("batch-norm", [&](CheckAccum& acc) {
    Rng rng(120);
    NormLayer bn = NormLayer::batch_norm(16);
    Graph g;
    ParamBinder pb(g, true);
    NodeId x = g.leaf(rand_tensor({8, 16}, rng, -2.0, 2.0).with_grad());
    NodeId loss = g.sum(g.square(bn.forward(g, pb, x, true)));
    std::vector<NodeId> leaves = {x};
    for (const auto& [ref, id] : pb.bound()) leaves.push_back(id);
    check_leaves(g, loss, leaves, acc);
  });
  component("cross-entropy", [&](CheckAccum& acc) {
    Rng rng(121);
    Graph g;
    NodeId logits = g.leaf(rand_tensor({6, 8}, rng, -2.0, 2.0).with_grad());
    NodeId loss = classification_loss(g, logits, {0, 3, 7, 2, 5, 1});
    check_leaves(g, loss, {logits}, acc);
  });
  component("l1-loss", [&](CheckAccum& acc) {
    Rng rng(122);
    Graph g;
    NodeId pred = g.leaf(rand_tensor({5, 1}, rng, 0.0, 300.0).with_grad());
    NodeId loss = regression_loss(g, pred, {10.0, 150.0, 80.0, 200.0, 40.0});
    check_leaves(g, loss, {pred}, acc);
  });
  component("sharing-penalty", [&](CheckAccum& acc) {
    ArchSpec arch;
    arch.image_size = 2;
    arch.conv_channels = {};
    arch.feature_dim = 4;
    arch.n_classes = 2;
    TwinModel model({arch, TaskMode::SoftSharing, {}, 1.0}, 123);
    Graph g;
    ParamBinder pb(g, true);
    NodeId loss = model.sharing_penalty(g, pb);
    std::vector<NodeId> leaves;
    for (const auto& [ref, id] : pb.bound()) leaves.push_back(id);
    check_leaves(g, loss, leaves, acc);
  });
  component("cdfa-head", [&](CheckAccum& acc) {
    Rng rng(124);
    FusionConfig fc;
    fc.detach_xc = false;  // exercise the fully joint gradient path
    FusionHead head = FusionHead::init(6, true, true, fc, 1.0, rng);
    Graph g;
    ParamBinder pb(g, true);
    NodeId x_p = g.leaf(rand_tensor({4, 6}, rng, -2.0, 2.0).with_grad());
    NodeId x_c = g.leaf(rand_tensor({4, 6}, rng, -2.0, 2.0).with_grad());
    NodeId out = head.forward(g, pb, x_p, x_c, true);
    NodeId loss = g.sum(g.square(out));
    std::vector<NodeId> leaves = {x_p, x_c};
    for (const auto& [ref, id] : pb.bound()) leaves.push_back(id);
    check_leaves(g, loss, leaves, acc);
  });

  return lines;
}

}  // namespace mtask
