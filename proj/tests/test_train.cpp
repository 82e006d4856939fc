#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "ssd/config.hpp"
#include "ssd/data.hpp"
#include "ssd/train.hpp"

using namespace ssd;
namespace fs = std::filesystem;

namespace {

TimeSeriesDataset small_synth(std::uint64_t seed = 7, std::int64_t m = 240) {
  SynthSpec spec;
  spec.classes = 4;
  spec.channels = 1;
  spec.length = 32;
  spec.samples = m;
  spec.sigma = 0.3;
  auto ds = synth_generate(spec, seed);
  return standardize(ds, compute_stats(ds));
}

Model small_mlp(std::uint64_t seed, double dropout = 0.1) {
  MlpSpec spec;
  spec.channels = 1;
  spec.length = 32;
  spec.hidden = 32;
  spec.feature_dim = 16;
  spec.classes = 4;
  spec.dropout_p = dropout;
  return build_mlp<float>(spec, RngStream(seed));
}

fs::path tmp_file(const std::string& name) {
  return fs::temp_directory_path() / ("ssd_train_test_" + name);
}

}  // namespace

TEST_SUITE_BEGIN("train");

TEST_CASE("checkpoint: save/load round-trip is bit-identical") {
  std::map<std::string, Tensor> state;
  RngStream rng(1);
  auto key = rng.key(0);
  state.emplace("w", Tensor::zeros({3, 4}));
  state.emplace("b", Tensor::zeros({4}));
  for (auto& [name, t] : state) {
    auto v = t.data_mut();
    for (std::size_t i = 0; i < v.size(); ++i)
      v[i] = static_cast<float>(2.0 * key.uniform64(i) - 1.0);
  }
  fs::path p = tmp_file("roundtrip.ssdt");
  save_checkpoint(p.string(), state);
  auto loaded = load_checkpoint(p.string());
  REQUIRE(loaded.size() == 2);
  CHECK(loaded.at("w").bits_equal(state.at("w")));
  CHECK(loaded.at("b").bits_equal(state.at("b")));

  // save -> load -> save produces byte-identical archives
  fs::path p2 = tmp_file("roundtrip2.ssdt");
  save_checkpoint(p2.string(), loaded);
  std::ifstream f1(p, std::ios::binary), f2(p2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), {});
  std::string b2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(b1 == b2);
  CHECK(b1.substr(0, 4) == "SSDT");
  fs::remove(p);
  fs::remove(p2);
}

TEST_CASE("checkpoint: bad magic and bad version raise distinct errors") {
  fs::path p = tmp_file("bad.ssdt");
  {
    std::ofstream f(p, std::ios::binary);
    f << "NOPE1234";
  }
  try {
    load_checkpoint(p.string());
    FAIL("expected CheckpointError");
  } catch (const CheckpointError& e) {
    CHECK(std::string(e.what()).find("magic") != std::string::npos);
  }
  {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    f << "SSDT";
    std::uint32_t bad_version = 9, zero = 0;
    f.write(reinterpret_cast<const char*>(&bad_version), 4);
    f.write(reinterpret_cast<const char*>(&zero), 4);
  }
  try {
    load_checkpoint(p.string());
    FAIL("expected CheckpointError");
  } catch (const CheckpointError& e) {
    CHECK(std::string(e.what()).find("version") != std::string::npos);
  }
  fs::remove(p);
}

TEST_CASE("scheduler: plateau shrinks by factor after patience bad epochs") {
  SchedulerConfig cfg;
  cfg.kind = SchedKind::ReduceOnPlateau;
  cfg.patience = 3;
  cfg.factor = 0.1;
  Scheduler sched(cfg, 1.0);

  // improving stretch holds the rate
  CHECK(sched.observe(0, 1.0) == doctest::Approx(1.0));
  CHECK(sched.observe(1, 0.9) == doctest::Approx(1.0));
  // three non-improving epochs trigger exactly one reduction
  CHECK(sched.observe(2, 0.95) == doctest::Approx(1.0));
  CHECK(sched.observe(3, 0.95) == doctest::Approx(1.0));
  CHECK(sched.observe(4, 0.95) == doctest::Approx(0.1));
  // counter resets; rate never increases
  CHECK(sched.observe(5, 0.95) == doctest::Approx(0.1));
  CHECK(sched.observe(6, 0.95) == doctest::Approx(0.1));
  CHECK(sched.observe(7, 0.99) == doctest::Approx(0.01));
  CHECK(sched.observe(8, 0.5) == doctest::Approx(0.01));
}

TEST_CASE("scheduler: config validation") {
  SchedulerConfig cfg;
  cfg.kind = SchedKind::ReduceOnPlateau;
  cfg.factor = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.factor = 0.1;
  cfg.patience = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("optimizer: single adam and sgd steps match hand-computed values") {
  OptimizerConfig sgd_cfg;
  sgd_cfg.kind = OptKind::Sgd;
  sgd_cfg.lr = 0.5;
  Optimizer sgd(sgd_cfg);
  Tensor w = Tensor::from_data({2}, {1.f, -2.f});
  w.grad_acc()[0] = 0.2f;
  w.grad_acc()[1] = -0.4f;
  std::vector<std::pair<std::string, Tensor*>> params{{"w", &w}};
  sgd.apply(params);
  CHECK(w.data()[0] == doctest::Approx(1.0 - 0.5 * 0.2));
  CHECK(w.data()[1] == doctest::Approx(-2.0 + 0.5 * 0.4));

  OptimizerConfig adam_cfg;
  adam_cfg.kind = OptKind::Adam;
  adam_cfg.lr = 0.1;
  Optimizer adam(adam_cfg);
  Tensor v = Tensor::from_data({1}, {1.f});
  v.grad_acc()[0] = 0.3f;
  std::vector<std::pair<std::string, Tensor*>> params2{{"v", &v}};
  adam.apply(params2);
  // first step: m_hat = g, v_hat = g^2 -> update ~ lr * g(|g| + eps)^-1
  double expect = 1.0 - 0.1 * 0.3 / (0.3 + 1e-8);
  CHECK(v.data()[0] == doctest::Approx(expect).epsilon(1e-5));
}

TEST_CASE("train_teacher: zero epochs returns the initialization") {
  auto ds = small_synth();
  auto model = small_mlp(3);
  auto before = model.state_dict();
  TrainOptions opts;
  opts.epochs = 0;
  opts.seed = 1;
  auto res = train_teacher(model, ds, OptimizerConfig{.lr = 0.01},
                           SchedulerConfig{}, opts);
  for (auto& [name, t] : before) CHECK(t.bits_equal(res.best_state.at(name)));
  CHECK(res.best_epoch == -1);
}

TEST_CASE("train_teacher: synthetic loss strictly decreases over 5 epochs") {
  auto ds = small_synth();
  auto model = small_mlp(4);
  TrainOptions opts;
  opts.epochs = 5;
  opts.seed = 2;
  opts.batch_size = 32;
  OptimizerConfig opt;
  opt.kind = OptKind::Adam;
  opt.lr = 0.003;
  auto res = train_teacher(model, ds, opt, SchedulerConfig{}, opts);
  REQUIRE(res.history.size() == 5);
  for (std::size_t e = 1; e < res.history.size(); ++e)
    CHECK(res.history[e].train_loss < res.history[e - 1].train_loss);
}

TEST_CASE("train_teacher: bit-reproducible across runs with the same seed") {
  auto run = [] {
    auto ds = small_synth();
    auto model = small_mlp(5);
    TrainOptions opts;
    opts.epochs = 3;
    opts.seed = 11;
    opts.batch_size = 32;
    return train_teacher(model, ds, OptimizerConfig{.lr = 0.001},
                         SchedulerConfig{}, opts);
  };
  auto a = run();
  auto b = run();
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    CHECK(a.history[i].train_loss == b.history[i].train_loss);
    CHECK(a.history[i].val_accuracy == b.history[i].val_accuracy);
  }
  for (auto& [name, t] : a.best_state) CHECK(t.bits_equal(b.best_state.at(name)));
}

TEST_CASE("train_teacher: non-finite loss aborts with a diagnostic") {
  auto ds = small_synth();
  auto model = small_mlp(6);
  TrainOptions opts;
  opts.epochs = 30;
  opts.seed = 3;
  OptimizerConfig opt;
  opt.kind = OptKind::Sgd;
  opt.lr = 1e12;  // guaranteed overflow within a couple of steps
  CHECK_THROWS_AS(train_teacher(model, ds, opt, SchedulerConfig{}, opts),
                  DataError);
}

TEST_CASE("init_student_from_teacher: outputs start bit-identical") {
  auto teacher = small_mlp(7);
  teacher.freeze();
  auto student = init_student_from_teacher(teacher);
  CHECK(student.any_trainable());
  CHECK_FALSE(teacher.any_trainable());

  auto ds = small_synth();
  std::vector<std::int64_t> idx{0, 1, 2};
  ForwardCtx ctx{DropoutMode::Eval, RngStream(0), {}, 0};
  auto a = teacher.forward(ds.batch(idx), ctx);
  auto b = student.forward(ds.batch(idx), ctx);
  CHECK(a.logits.bits_equal(b.logits));

  // random init differs
  auto rnd = small_mlp(8);
  auto c = rnd.forward(ds.batch(idx), ctx);
  CHECK_FALSE(a.logits.bits_equal(c.logits));
}

TEST_CASE("init_student_from_checkpoint: architecture mismatch is a checkpoint error") {
  auto teacher = small_mlp(9);
  auto other = build_mlp<float>(MlpSpec{.channels = 1,
                                        .length = 32,
                                        .hidden = 16,  // different hidden size
                                        .feature_dim = 16,
                                        .classes = 4,
                                        .dropout_p = 0.1},
                                RngStream(10));
  CHECK_THROWS_AS(init_student_from_checkpoint(other, teacher.state_dict()),
                  CheckpointError);
}

TEST_CASE("train_student: lambda 0 matches plain fine-tuning bit-exactly") {
  auto ds = small_synth();
  auto teacher = small_mlp(12);
  {
    TrainOptions t0;
    t0.epochs = 2;
    t0.seed = 20;
    t0.batch_size = 32;
    train_teacher(teacher, ds, OptimizerConfig{.lr = 0.003}, SchedulerConfig{}, t0);
  }
  teacher.freeze();

  SSDConfig cfg;
  cfg.lambda = 0.0;
  cfg.n = 4;
  cfg.p_student = 0.1;

  TrainOptions opts;
  opts.epochs = 3;
  opts.seed = 21;
  opts.batch_size = 32;
  OptimizerConfig opt;
  opt.lr = 0.002;

  auto student_a = init_student_from_teacher(teacher);
  auto res_a = train_student(student_a, teacher, ds, cfg, opt, SchedulerConfig{}, opts);

  auto student_b = init_student_from_teacher(teacher);
  auto res_b = train_plain(student_b, ds, opt, SchedulerConfig{}, opts,
                           cfg.p_student);

  REQUIRE(res_a.history.size() == res_b.history.size());
  for (std::size_t i = 0; i < res_a.history.size(); ++i) {
    CHECK(res_a.history[i].train_loss == res_b.history[i].train_loss);
    CHECK(res_a.history[i].val_accuracy == res_b.history[i].val_accuracy);
  }
  for (auto& [name, t] : res_a.best_state) {
    auto& u = res_b.best_state.at(name);
    for (std::size_t i = 0; i < t.data().size(); ++i)
      CHECK(t.data()[i] == u.data()[i]);
  }
}

TEST_CASE("noiseless synthetic classes are memorized to 100% train accuracy") {
  SynthSpec spec;
  spec.classes = 4;
  spec.channels = 1;
  spec.length = 32;
  spec.samples = 120;
  spec.sigma = 0.0;
  auto raw = synth_generate(spec, 17);
  auto ds = standardize(raw, compute_stats(raw));

  auto model = small_mlp(18, 0.0);
  TrainOptions opts;
  opts.epochs = 40;
  opts.seed = 4;
  opts.batch_size = 32;
  opts.val_fraction = 0.0;  // memorize everything
  OptimizerConfig opt;
  opt.lr = 0.003;
  train_teacher(model, ds, opt, SchedulerConfig{}, opts);
  CHECK(evaluate(model, ds).accuracy == 1.0);
}

TEST_CASE("evaluate: metrics match a brute-force oracle on a toy split") {
  std::vector<int> preds = {0, 1, 1, 2, 2, 2, 0, 1, 0, 2,
                            1, 1, 0, 0, 2, 1, 2, 0, 1, 2};
  std::vector<int> labels = {0, 1, 2, 2, 2, 1, 0, 1, 1, 2,
                             1, 0, 0, 0, 2, 1, 1, 0, 1, 2};
  auto m = metrics_from_predictions(preds, labels, 3);

  // oracle: direct counting
  int correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i)
    if (preds[i] == labels[i]) ++correct;
  CHECK(m.accuracy == doctest::Approx(static_cast<double>(correct) / 20.0));

  double macro = 0.0, weighted = 0.0;
  for (int c = 0; c < 3; ++c) {
    int tp = 0, fp = 0, fn = 0, support = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      if (labels[i] == c) ++support;
      if (preds[i] == c && labels[i] == c) ++tp;
      if (preds[i] == c && labels[i] != c) ++fp;
      if (preds[i] != c && labels[i] == c) ++fn;
    }
    double p = tp + fp ? double(tp) / (tp + fp) : 0.0;
    double r = tp + fn ? double(tp) / (tp + fn) : 0.0;
    double f1 = p + r > 0 ? 2 * p * r / (p + r) : 0.0;
    macro += f1 / 3.0;
    weighted += f1 * support / 20.0;
  }
  CHECK(m.macro_f1 == doctest::Approx(macro));
  CHECK(m.weighted_f1 == doctest::Approx(weighted));

  // perfect and constant predictors
  auto perfect = metrics_from_predictions(labels, labels, 3);
  CHECK(perfect.accuracy == 1.0);
  for (int t = 0; t < 3; ++t)
    for (int p = 0; p < 3; ++p)
      if (t != p) CHECK(perfect.confusion_at(t, p) == 0);

  std::vector<int> constant(labels.size(), 1);
  auto cm = metrics_from_predictions(constant, labels, 3);
  CHECK(cm.accuracy == doctest::Approx(8.0 / 20.0));
}

TEST_CASE("early stopping restores the best checkpoint, never a later one") {
  auto ds = small_synth(13, 160);
  auto model = small_mlp(14);
  TrainOptions opts;
  opts.epochs = 12;
  opts.seed = 5;
  opts.batch_size = 32;
  opts.early_stop.enabled = true;
  opts.early_stop.patience = 3;
  OptimizerConfig opt;
  opt.lr = 0.01;
  auto res = train_teacher(model, ds, opt, SchedulerConfig{}, opts);
  // training halted after patience exhausted
  CHECK(res.history.size() <= 12);
  CHECK(res.best_epoch >= 0);
  // model holds the checkpoint from best_epoch
  double best = -1.0;
  int best_epoch = -1;
  for (auto& e : res.history)
    if (e.val_accuracy > best) {
      best = e.val_accuracy;
      best_epoch = e.epoch;
    }
  CHECK(res.best_epoch == best_epoch);
  CHECK(res.best_val_accuracy == doctest::Approx(best));
}

TEST_CASE("flops: dense layer and plan ratios") {
  // single dense 1664 -> 1000, one forward, batch 1
  CHECK(forward_flops(1664 * 1000, 1) == doctest::Approx(3328000.0));

  ComparePlanShape plan;
  plan.macs_per_sample = 1000;
  plan.train_samples = 100;
  plan.teacher_epochs = 10;
  plan.student_epochs = 10;
  plan.ssd_passes = 30;
  plan.ensemble_members = 25;
  plan.soup_members = 25;
  plan.finetune_epochs = 10;
  auto ledger = count_flops(plan);
  auto get = [&](const std::string& name) {
    for (auto& p : ledger.phases)
      if (p.name == name) return p.flops;
    return -1.0;
  };
  const double base = get("baseline_training");
  CHECK(get("ensemble_training") == doctest::Approx(25.0 * base));
  // SSD total = teacher + student(3 + n)/3 units = (2 + n/3) teacher units
  CHECK(get("ssd_training") ==
        doctest::Approx(base * (2.0 + 30.0 / 3.0)));
  // soup: pretrain + 25 fine-tunes at equal epochs here -> 26x
  CHECK(get("soup_training") == doctest::Approx(26.0 * base));
}

TEST_CASE("history csv round-trips through the writer") {
  std::vector<EpochStats> h = {{0, 1.5, 0.25, 0.05}, {1, 1.25, 0.5, 0.05}};
  fs::path p = tmp_file("history.csv");
  write_history_csv(p.string(), h);
  std::ifstream f(p);
  std::string line;
  std::getline(f, line);
  CHECK(line == "epoch,train_loss,val_accuracy,lr");
  std::getline(f, line);
  CHECK(line == "0,1.5,0.25,0.05");
  fs::remove(p);
}

TEST_SUITE_END();
