// Acceptance suite: verifiable properties plus directional ablation checks on
// the synthetic dataset. Prints one PASS/FAIL line per criterion and exits
// non-zero if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <semaphore>
#include <sstream>

#include "mtask/experiment.hpp"

using namespace mtask;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double now_seconds() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

Tensor rand_tensor(Shape s, Rng& rng, double lo, double hi) {
  Tensor t = Tensor::zeros(std::move(s));
  for (double& v : t.values) v = rng.uniform(lo, hi);
  return t;
}

// ---- criterion 1: gradient suite ------------------------------------------

Outcome criterion_gradients() {
  double started = now_seconds();
  std::vector<GradcheckLine> lines = gradcheck_all(1e-4);
  double worst = 0.0;
  std::string failing;
  for (const GradcheckLine& l : lines) {
    worst = std::max(worst, l.max_rel_err);
    if (!l.pass) failing += " " + l.component;
  }
  double elapsed = now_seconds() - started;
  std::ostringstream os;
  os << lines.size() << " components, max rel err " << std::scientific << worst
     << std::defaultfloat << ", " << std::fixed << elapsed << "s";
  if (!failing.empty()) os << ", failing:" << failing;
  return {failing.empty() && elapsed < 60.0, os.str()};
}

// ---- criterion 2: normalization invariants ---------------------------------

Outcome criterion_norm_invariants() {
  const int batches = 25, m = 8, H = 16;  // 200 random sample vectors
  Rng rng(4242);
  double worst_mean = 0.0, worst_var = 0.0;

  for (int trial = 0; trial < batches; ++trial) {
    Tensor x = rand_tensor({m, H}, rng, -3.0, 3.0);

    NormLayer ln = NormLayer::layer_norm(H, 1e-12);
    Graph g;
    ParamBinder pb(g, false);
    NodeId y = ln.forward(g, pb, g.leaf(x), true);
    for (int i = 0; i < m; ++i) {
      double mu = 0.0, var = 0.0;
      for (int j = 0; j < H; ++j) mu += g.value(y).values[i * H + j];
      mu /= H;
      for (int j = 0; j < H; ++j) {
        double d = g.value(y).values[i * H + j] - mu;
        var += d * d;
      }
      var /= H;
      worst_mean = std::max(worst_mean, std::fabs(mu));
      worst_var = std::max(worst_var, std::fabs(var - 1.0));
    }

    NormLayer bn = NormLayer::batch_norm(H, 1e-12);
    Graph g2;
    ParamBinder pb2(g2, false);
    NodeId y2 = bn.forward(g2, pb2, g2.leaf(x), true);
    for (int j = 0; j < H; ++j) {
      double mu = 0.0, var = 0.0;
      for (int i = 0; i < m; ++i) mu += g2.value(y2).values[i * H + j];
      mu /= m;
      for (int i = 0; i < m; ++i) {
        double d = g2.value(y2).values[i * H + j] - mu;
        var += d * d;
      }
      var /= m;
      worst_mean = std::max(worst_mean, std::fabs(mu));
      worst_var = std::max(worst_var, std::fabs(var - 1.0));
    }
  }

  // BN inference must be batch-size invariant to bitwise equality
  NormLayer bn = NormLayer::batch_norm(H);
  Rng stats_rng(77);
  bn.running_mean = rand_tensor({H}, stats_rng, -1.0, 1.0);
  bn.running_var = rand_tensor({H}, stats_rng, 0.5, 2.0);
  bn.gamma = rand_tensor({H}, stats_rng, 0.5, 1.5);
  bn.beta = rand_tensor({H}, stats_rng, -0.5, 0.5);
  Tensor batch = rand_tensor({m, H}, stats_rng, -2.0, 2.0);
  Graph gb;
  ParamBinder pbb(gb, false);
  NodeId yb = bn.forward(gb, pbb, gb.leaf(batch), false);
  bool bitwise = true;
  for (int i = 0; i < m; ++i) {
    Tensor single = Tensor::zeros({1, H});
    for (int j = 0; j < H; ++j) single.values[j] = batch.values[i * H + j];
    Graph gs;
    ParamBinder pbs(gs, false);
    NodeId ys = bn.forward(gs, pbs, gs.leaf(single), false);
    for (int j = 0; j < H; ++j)
      if (gs.value(ys).values[j] != gb.value(yb).values[i * H + j]) bitwise = false;
  }

  std::ostringstream os;
  os << "max |mean| " << std::scientific << worst_mean << ", max |var-1| " << worst_var
     << ", BN inference bitwise batch-invariant: " << (bitwise ? "yes" : "NO");
  return {worst_mean <= 1e-9 && worst_var <= 1e-6 && bitwise, os.str()};
}

// ---- criterion 3: sharing-penalty convergence ------------------------------

Outcome criterion_penalty_convergence() {
  ArchSpec arch;  // default desk-scale backbone
  GenParams gp;
  gp.n_classes = arch.n_classes;
  gp.per_class = 2;
  gp.image_size = arch.image_size;
  gp.imbalance = 0.0;
  gp.seed = 5;
  Dataset ds = generate_synthetic_dataset(gp);

  TwinModel model({arch, TaskMode::SoftSharing, {}, 1.0}, 17);
  double init_penalty;
  {
    Graph g;
    ParamBinder pb(g, false);
    init_penalty = g.value(model.sharing_penalty(g, pb)).values[0];
  }

  TrainConfig tc;
  tc.epochs = 50;
  tc.batch_size = 6;
  tc.base_lr = 0.01;
  tc.lr_drop_epochs = {25, 40};
  tc.weight_decay = 0.0;
  tc.weights = {0.0, 0.0, 1.0};
  tc.seed = 17;
  std::vector<EpochRecord> trace = train(model, ds.views(), tc);
  double final_penalty = trace.back().loss.l_ps;

  std::ostringstream os;
  os << "L_ps " << std::scientific << init_penalty << " -> " << final_penalty << " ("
     << std::fixed << init_penalty / std::max(final_penalty, 1e-300) << "x) in 50 epochs";
  return {final_penalty < 1e-3 * init_penalty, os.str()};
}

// ---- criterion 4: metric oracles -------------------------------------------

Outcome criterion_metric_oracles() {
  auto rec = [](int pc, int tc, double pp, double tp) {
    EvalRecord r;
    r.predicted_class = pc;
    r.true_class = tc;
    r.predicted_portion = pp;
    r.true_portion = tp;
    return r;
  };
  bool ok = true;
  std::ostringstream os;

  std::vector<EvalRecord> four = {rec(0, 0, 0, 0), rec(1, 1, 0, 0), rec(2, 2, 0, 0),
                                  rec(0, 1, 0, 0)};
  ok = ok && accuracy(four) == 0.75;

  std::vector<EvalRecord> pair = {rec(0, 0, 100, 90), rec(0, 0, 200, 230)};
  ok = ok && mae(pair, MaeSubset::All) == 20.0;

  std::vector<EvalRecord> mixed = {rec(0, 0, 110, 100), rec(1, 1, 170, 200)};
  ok = ok && mccr(mixed, 1.0) == 10.0;

  std::vector<EvalRecord> half = {rec(0, 0, 50, 100)};
  ok = ok && error_percentage(half) == 50.0;
  if (!ok) os << "fixture oracle mismatch; ";

  // MCCR(C=1) == MAE-Correct / n_correct, 64-bit equality on 100 random sets
  Rng rng(99);
  int verified = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<EvalRecord> rs;
    int n = 10 + static_cast<int>(rng.below(40));
    for (int i = 0; i < n; ++i)
      rs.push_back(rec(static_cast<int>(rng.below(4)), static_cast<int>(rng.below(4)),
                       rng.uniform(0.0, 984.0), rng.uniform(0.0, 984.0)));
    int n_correct = 0;
    for (const EvalRecord& r : rs)
      if (*r.predicted_class == *r.true_class) ++n_correct;
    if (n_correct == 0) continue;
    if (mccr(rs, 1.0) != mae(rs, MaeSubset::CorrectOnly) / n_correct) {
      ok = false;
      os << "identity failed at trial " << trial << "; ";
    }
    ++verified;
  }
  os << "fixtures exact, MCCR identity exact on " << verified << " random sets";
  return {ok, os.str()};
}

// ---- criterion 5: directional ablation --------------------------------------

struct AblationOutcome {
  double acc_cls = 0, acc_hps = 0, acc_sps = 0, acc_lnbn = 0;
  double mae_cdfa = 0, mae_lnbn = 0;
};

Outcome criterion_directional_ablation() {
  double started = now_seconds();

  ExperimentConfig cfg;  // pinned scale: 21 classes x 100, 32x32
  cfg.data.gen.n_classes = 21;
  cfg.data.gen.per_class = 100;
  cfg.data.gen.image_size = 32;
  cfg.data.gen.seed = 7;
  cfg.train.epochs = 12;
  cfg.train.lr_drop_epochs = {8};
  cfg.arch.image_size = 32;
  cfg.arch.n_classes = 21;
  Dataset ds = build_dataset(cfg.data);

  const std::vector<uint64_t> seeds = {1, 2, 3};
  const std::vector<std::string> modes = {"classification_only", "hps", "sps", "sps_cdfa",
                                          "sps_cdfa_ln_bn"};

  std::counting_semaphore<16> gate(2);
  auto run_one = [&](std::string mode, uint64_t seed) -> MetricsReport {
    gate.acquire();
    struct Release {
      std::counting_semaphore<16>* g;
      ~Release() { g->release(); }
    } release{&gate};
    ExperimentConfig c = cfg;
    c.mode = mode;
    c.seed = seed;
    c.train.seed = seed;
    TwinModel model(model_config_of(c), seed);
    train(model, ds.views(SplitTag::Train), c.train);
    return evaluate_model(model, ds, SplitTag::Test, 1.0);
  };

  std::vector<std::future<MetricsReport>> futures;
  for (const std::string& mode : modes)
    for (uint64_t seed : seeds)
      futures.push_back(std::async(std::launch::async, run_one, mode, seed));

  AblationOutcome out;
  size_t fi = 0;
  for (const std::string& mode : modes) {
    double acc = 0, mae_v = 0;
    for (size_t s = 0; s < seeds.size(); ++s, ++fi) {
      MetricsReport rep = futures[fi].get();
      if (rep.accuracy) acc += *rep.accuracy;
      if (rep.mae) mae_v += *rep.mae;
    }
    acc = 100.0 * acc / seeds.size();
    mae_v /= seeds.size();
    if (mode == "classification_only") out.acc_cls = acc;
    if (mode == "hps") out.acc_hps = acc;
    if (mode == "sps") out.acc_sps = acc;
    if (mode == "sps_cdfa") out.mae_cdfa = mae_v;
    if (mode == "sps_cdfa_ln_bn") {
      out.acc_lnbn = acc;
      out.mae_lnbn = mae_v;
    }
  }
  double elapsed = now_seconds() - started;

  bool a = out.acc_hps <= out.acc_sps - 5.0;
  bool b = out.mae_lnbn <= out.mae_cdfa;
  bool c = out.acc_lnbn >= out.acc_cls - 2.0;
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << "(a) hps " << out.acc_hps << "% vs sps "
     << out.acc_sps << "%" << (a ? "" : " VIOLATED") << "; (b) ln+bn mae " << out.mae_lnbn
     << " vs cdfa " << out.mae_cdfa << (b ? "" : " VIOLATED") << "; (c) ln+bn acc " << out.acc_lnbn
     << "% vs cls-only " << out.acc_cls << "%" << (c ? "" : " VIOLATED") << "; "
     << std::setprecision(0) << elapsed << "s (3 seeds)";
  return {a && b && c && elapsed < 900.0, os.str()};
}

// ---- criterion 6: augmentation contract -------------------------------------

Outcome criterion_augmentation() {
  GenParams gp;
  gp.n_classes = 4;
  gp.per_class = 12;
  gp.image_size = 16;
  gp.imbalance = 0.5;
  gp.seed = 21;
  Dataset ds = generate_synthetic_dataset(gp);

  bool ok = true;
  std::ostringstream os;

  Dataset balanced = balanced_augment(ds, 12, 3);
  for (int c : balanced.class_counts())
    if (std::abs(c - 12) > 1) ok = false;
  for (const DatasetItem& it : balanced.items) {
    if (it.provenance != Provenance::Augmented) continue;
    const DatasetItem& src = balanced.items[static_cast<size_t>(it.source_index)];
    if (it.image.label != src.image.label || it.image.portion != src.image.portion) ok = false;
  }
  if (!ok) os << "count/groundtruth violation; ";

  bool threw = false;
  try {
    balanced_augment(ds, 1000, 3);
  } catch (const DataError&) {
    threw = true;
  }
  if (!threw) {
    ok = false;
    os << "unreachable target not rejected; ";
  }

  LabeledImage img = generate_item(gp, 2, 0);
  bool identity = apply_aug(apply_aug(img, "rot90"), "rot270").pixels == img.pixels &&
                  apply_aug(apply_aug(img, "flip_x"), "flip_x").pixels == img.pixels;
  if (!identity) {
    ok = false;
    os << "op identities broken; ";
  }
  os << "counts within 1 of target, groundtruth preserved, op identities pixel-exact, "
     << "unreachable target rejected";
  return {ok, os.str()};
}

// ---- criterion 7: determinism and persistence -------------------------------

Outcome criterion_determinism() {
  fs::path dir = fs::temp_directory_path() / "mtask_acceptance_determinism";
  fs::remove_all(dir);

  ExperimentConfig cfg;
  cfg.mode = "sps_cdfa_ln_bn";
  cfg.seed = 9;
  cfg.train.seed = 9;
  cfg.train.epochs = 2;
  cfg.train.batch_size = 8;
  cfg.arch.conv_channels = {4};
  cfg.arch.feature_dim = 8;
  cfg.data.gen.n_classes = 4;
  cfg.data.gen.per_class = 12;
  cfg.data.gen.image_size = 16;
  cfg.data.gen.seed = 13;
  cfg.data.train_target = 10;
  cfg.arch.image_size = 16;
  cfg.arch.n_classes = 4;

  bool ok = true;
  std::ostringstream os;

  ExperimentConfig gen_cfg = cfg;
  gen_cfg.dataset_dir = (dir / "d1").string();
  cmd_gen_data(gen_cfg, false);
  gen_cfg.dataset_dir = (dir / "d2").string();
  cmd_gen_data(gen_cfg, false);
  if (slurp(dir / "d1" / "images.bin") != slurp(dir / "d2" / "images.bin") ||
      slurp(dir / "d1" / "manifest.json") != slurp(dir / "d2" / "manifest.json")) {
    ok = false;
    os << "dataset files differ; ";
  }

  ExperimentConfig run_cfg = cfg;
  run_cfg.out_dir = (dir / "runs").string();
  run_cfg.dataset_dir = (dir / "d1").string();
  RunResult r1 = cmd_train(run_cfg);
  RunResult r2 = cmd_train(run_cfg);
  if (slurp(r1.run_dir / "trace.jsonl") != slurp(r2.run_dir / "trace.jsonl")) {
    ok = false;
    os << "loss traces differ; ";
  }
  if (slurp(r1.run_dir / "checkpoint.bin") != slurp(r2.run_dir / "checkpoint.bin")) {
    ok = false;
    os << "checkpoints differ; ";
  }

  TwinModel loaded = load_checkpoint((r1.run_dir / "checkpoint.bin").string());
  save_checkpoint(loaded, (dir / "resaved.bin").string());
  if (slurp(dir / "resaved.bin") != slurp(r1.run_dir / "checkpoint.bin")) {
    ok = false;
    os << "checkpoint round-trip not bitwise; ";
  }

  Dataset ds = load_dataset((dir / "d1").string());
  save_dataset(ds, (dir / "d3").string());
  if (slurp(dir / "d3" / "images.bin") != slurp(dir / "d1" / "images.bin") ||
      slurp(dir / "d3" / "manifest.json") != slurp(dir / "d1" / "manifest.json")) {
    ok = false;
    os << "dataset round-trip not bitwise; ";
  }

  os << "dataset bytes, loss traces, checkpoints and round-trips bitwise identical";
  fs::remove_all(dir);
  return {ok, os.str()};
}

// ---- criterion 8: lambda_ps = 0 decoupling ----------------------------------

Outcome criterion_decoupling() {
  ArchSpec arch;  // default backbone
  GenParams gp;
  gp.n_classes = arch.n_classes;
  gp.per_class = 1;
  gp.image_size = arch.image_size;
  gp.imbalance = 0.0;
  gp.seed = 3;
  Dataset ds = generate_synthetic_dataset(gp);
  std::vector<SampleView> samples = ds.views();

  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = static_cast<int>(samples.size());  // one step per epoch: 3 steps
  tc.weights = {1.0, 1.0, 0.0};
  tc.seed = 55;

  TwinModel joint({arch, TaskMode::SoftSharing, {}, 1.0}, 55);
  TwinModel cls({arch, TaskMode::ClassificationOnly, {}, 1.0}, 55);
  TwinModel reg({arch, TaskMode::PortionOnly, {}, 1.0}, 55);
  train(joint, samples, tc);
  train(cls, samples, tc);
  train(reg, samples, tc);

  double worst = 0.0;
  auto compare = [&](const TwinModel& a, const TwinModel& b, const std::string& prefix) {
    for (const ParamRef& p : a.parameters()) {
      if (p.name.rfind(prefix, 0) != 0) continue;
      for (const ParamRef& q : b.parameters()) {
        if (q.name != p.name) continue;
        for (size_t i = 0; i < p.tensor->values.size(); ++i)
          worst = std::max(worst, std::fabs(p.tensor->values[i] - q.tensor->values[i]));
      }
    }
  };
  compare(joint, cls, "f_c");
  compare(joint, cls, "head_c");
  compare(joint, reg, "f_r");
  compare(joint, reg, "head_r");

  std::ostringstream os;
  os << "max trajectory divergence after 3 steps: " << std::scientific << worst;
  return {worst <= 1e-12, os.str()};
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    Outcome (*run)();
  };
  const Criterion criteria[] = {
      {"gradient suite (all primitives, LN, BN, CE, L1, L_ps, CDFA head; <=1e-4)",
       criterion_gradients},
      {"normalization invariants (200 inputs; BN inference bitwise)", criterion_norm_invariants},
      {"sharing-penalty convergence (>=1000x within 50 epochs)", criterion_penalty_convergence},
      {"metric oracles (exact fixtures + MCCR identity on 100 sets)", criterion_metric_oracles},
      {"directional ablation (hps<sps, ln+bn mae<=cdfa mae, ln+bn acc)",
       criterion_directional_ablation},
      {"augmentation contract (balance, groundtruth, op identities)", criterion_augmentation},
      {"determinism and persistence (bitwise)", criterion_determinism},
      {"lambda_ps=0 decoupling (3 steps, <=1e-12)", criterion_decoupling},
  };

  int failures = 0;
  int index = 1;
  for (const Criterion& c : criteria) {
    Outcome result;
    try {
      result = c.run();
    } catch (const std::exception& e) {
      result = {false, std::string("exception: ") + e.what()};
    }
    std::cout << (result.pass ? "PASS" : "FAIL") << " " << index << ". " << c.name << " — "
              << result.detail << "\n"
              << std::flush;
    if (!result.pass) ++failures;
    ++index;
  }
  if (failures > 0) {
    std::cout << failures << " criterion(s) failed\n";
    return 1;
  }
  std::cout << "all 8 acceptance criteria passed\n";
  return 0;
}
