// ssd: train and evaluate stochastic self-distillation experiments.
//
// Subcommands: train-teacher, train-student, eval, ablate, compare,
// export-embeddings. Every run writes a resolved config copy and a JSON
// manifest into its output directory; reruns into a used directory are
// refused without --force. Exit codes: 0 success, 1 runtime failure,
// 2 configuration error.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>

#include "ssd/baselines.hpp"
#include "ssd/config.hpp"
#include "ssd/data.hpp"
#include "ssd/nn.hpp"
#include "ssd/parallel.hpp"
#include "ssd/ssd.hpp"
#include "ssd/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr int kManifestVersion = 1;

struct CommonArgs {
  std::string config_path;
  std::string out_dir;  // overrides [output].dir when set
  bool force = false;
  int threads = 0;

  // config overrides
  std::optional<double> epsilon, lambda, h, p_teacher, p_student, lr, logit_kl;
  std::optional<int> n, top_k, epochs, batch_size;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> selection;
  bool random_init = false;
  std::optional<bool> detach;
};

void add_common(CLI::App* cmd, CommonArgs& a, bool needs_config = true) {
  auto* opt = cmd->add_option("--config", a.config_path,
                              "experiment config (TOML)");
  if (needs_config) opt->required();
  cmd->add_option("--out", a.out_dir, "output directory (overrides [output])");
  cmd->add_flag("--force", a.force, "allow writing into a used run directory");
  cmd->add_option("--threads", a.threads, "worker threads (default: all cores)");
  cmd->add_option("--epsilon", a.epsilon, "percentile threshold in [0,100]");
  cmd->add_option("--lambda", a.lambda, "distillation loss weight");
  cmd->add_option("--temperature", a.h, "attention temperature h");
  cmd->add_option("--logit-kl", a.logit_kl, "optional logit-level KL weight");
  cmd->add_option("--p-teacher", a.p_teacher, "distillation-time dropout rate");
  cmd->add_option("--p-student", a.p_student, "student dropout rate");
  cmd->add_option("--lr", a.lr, "learning rate override");
  cmd->add_option("--n", a.n, "stochastic teacher passes");
  cmd->add_option("--k", a.top_k, "k for top-k selection");
  cmd->add_option("--epochs", a.epochs, "epoch count override");
  cmd->add_option("--batch-size", a.batch_size, "batch size override");
  cmd->add_option("--seed", a.seed, "seed override");
  cmd->add_option("--selection", a.selection,
                  "selection scheme: dynamic | top-k | distill-all");
  cmd->add_flag("--random-init", a.random_init,
                "initialize the student randomly instead of from the teacher");
  cmd->add_flag("--detach,!--no-detach", a.detach,
                "detach attention weights from the student gradient");
}

ssd::ExperimentConfig resolve_config(const CommonArgs& a) {
  ssd::ExperimentConfig cfg = ssd::ExperimentConfig::from_file(a.config_path);
  if (!a.out_dir.empty()) cfg.output.dir = a.out_dir;
  if (a.epsilon) cfg.student.ssd.epsilon = *a.epsilon;
  if (a.lambda) cfg.student.ssd.lambda = *a.lambda;
  if (a.h) cfg.student.ssd.h = *a.h;
  if (a.logit_kl) cfg.student.ssd.logit_kl = *a.logit_kl;
  if (a.p_teacher) cfg.student.ssd.p_teacher = *a.p_teacher;
  if (a.p_student) cfg.student.ssd.p_student = *a.p_student;
  if (a.lr) cfg.teacher.opt.lr = *a.lr;
  if (a.n) cfg.student.ssd.n = *a.n;
  if (a.top_k) cfg.student.ssd.top_k = *a.top_k;
  if (a.epochs) {
    cfg.teacher.epochs = *a.epochs;
    cfg.student.epochs = *a.epochs;
  }
  if (a.batch_size) cfg.teacher.batch_size = *a.batch_size;
  if (a.seed) {
    cfg.teacher.seed = *a.seed;
    cfg.student.seed = *a.seed;
  }
  if (a.selection)
    cfg.student.ssd.selection = [&] {
      if (*a.selection == "dynamic") return ssd::SelectionScheme::Dynamic;
      if (*a.selection == "top-k") return ssd::SelectionScheme::TopK;
      if (*a.selection == "distill-all") return ssd::SelectionScheme::DistillAll;
      throw ssd::ConfigError("--selection must be dynamic, top-k, or "
                             "distill-all, got '" + *a.selection + "'");
    }();
  if (a.detach) cfg.student.ssd.detach_attention = *a.detach;
  if (a.random_init) cfg.student.init_from_teacher = false;
  cfg.validate();
  if (a.threads > 0) ssd::set_num_threads(a.threads);
  return cfg;
}

// Claims the run directory: refuses a previously used one without --force,
// then drops the resolved config and manifest next to the future outputs.
fs::path open_run_dir(const ssd::ExperimentConfig& cfg, const CommonArgs& args,
                      const std::string& command) {
  fs::path dir(cfg.output.dir);
  if (fs::exists(dir / "manifest.json") && !args.force)
    throw ssd::Error("output directory " + dir.string() +
                     " already holds a run; pass --force to overwrite");
  fs::create_directories(dir);
  {
    std::ofstream f(dir / "resolved.toml", std::ios::trunc);
    f << cfg.to_toml_string();
  }
  json manifest;
  manifest["format_version"] = kManifestVersion;
  manifest["command"] = command;
  manifest["config_file"] = args.config_path;
  manifest["resolved_config"] = cfg.to_toml_string();
  manifest["seeds"] = {{"teacher", cfg.teacher.seed},
                       {"student", cfg.student.seed},
                       {"data_split", cfg.data.split_seed},
                       {"synthetic", cfg.data.synth_seed}};
  std::ofstream mf(dir / "manifest.json", std::ios::trunc);
  mf << manifest.dump(2) << "\n";
  return dir;
}

json metrics_json(const ssd::Metrics& m) {
  json j;
  j["accuracy"] = m.accuracy;
  j["macro_f1"] = m.macro_f1;
  j["weighted_f1"] = m.weighted_f1;
  j["confusion"] = m.confusion;
  return j;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream f(path, std::ios::trunc);
  f << j.dump(2) << "\n";
}

ssd::TrainOptions teacher_train_options(const ssd::ExperimentConfig& cfg) {
  ssd::TrainOptions o;
  o.epochs = cfg.teacher.epochs;
  o.batch_size = cfg.teacher.batch_size;
  o.seed = cfg.teacher.seed;
  o.val_fraction = cfg.data.val_fraction;
  o.early_stop = cfg.teacher.early_stop;
  return o;
}

ssd::TrainOptions student_train_options(const ssd::ExperimentConfig& cfg) {
  ssd::TrainOptions o = teacher_train_options(cfg);
  o.seed = cfg.student.seed;
  if (cfg.student.epochs >= 0) o.epochs = cfg.student.epochs;
  return o;
}

// ---------------------------------------------------------------------------
// train-teacher
// ---------------------------------------------------------------------------

int cmd_train_teacher(const CommonArgs& args) {
  auto cfg = resolve_config(args);
  fs::path dir = open_run_dir(cfg, args, "train-teacher");

  ssd::LoadedData data = ssd::load_experiment_data(cfg.data);
  ssd::Model model =
      ssd::build_experiment_model(cfg.model, cfg.data, cfg.teacher.seed);
  auto result = ssd::train_teacher(model, data.train, cfg.teacher.opt,
                                   cfg.teacher.sched, teacher_train_options(cfg));

  ssd::save_checkpoint((dir / "teacher.ssdt").string(), result.best_state);
  ssd::write_history_csv((dir / "history.csv").string(), result.history);

  ssd::Metrics test = ssd::evaluate(model, data.test);
  json report;
  report["test"] = metrics_json(test);
  report["best_epoch"] = result.best_epoch;
  report["best_val_accuracy"] = result.best_val_accuracy;
  write_json(dir / "report.json", report);
  std::printf("teacher: test accuracy %.4f (checkpoint %s)\n", test.accuracy,
              (dir / "teacher.ssdt").string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// train-student
// ---------------------------------------------------------------------------

int cmd_train_student(const CommonArgs& args, const std::string& teacher_path) {
  auto cfg = resolve_config(args);
  fs::path dir = open_run_dir(cfg, args, "train-student");

  ssd::LoadedData data = ssd::load_experiment_data(cfg.data);
  ssd::Model teacher =
      ssd::build_experiment_model(cfg.model, cfg.data, cfg.teacher.seed);
  teacher.load_state_dict(ssd::load_checkpoint(teacher_path));
  teacher.freeze();

  ssd::Model student =
      cfg.student.init_from_teacher
          ? ssd::init_student_from_teacher(teacher)
          : ssd::build_experiment_model(cfg.model, cfg.data,
                                        cfg.student.seed + 0x5EED);

  auto result = ssd::train_student(student, teacher, data.train,
                                   cfg.student.ssd, cfg.teacher.opt,
                                   cfg.teacher.sched, student_train_options(cfg));

  ssd::save_checkpoint((dir / "student.ssdt").string(), result.best_state);
  ssd::write_history_csv((dir / "history.csv").string(), result.history);
  ssd::write_diagnostics_csv((dir / "diagnostics.csv").string(),
                             result.step_diags);

  ssd::Metrics teacher_test = ssd::evaluate(teacher, data.test);
  ssd::Metrics student_test = ssd::evaluate(student, data.test);
  json report;
  report["teacher_test"] = metrics_json(teacher_test);
  report["student_test"] = metrics_json(student_test);
  report["accuracy_delta"] = student_test.accuracy - teacher_test.accuracy;
  report["best_epoch"] = result.best_epoch;
  write_json(dir / "report.json", report);
  std::printf("student: test accuracy %.4f (teacher %.4f, delta %+.4f)\n",
              student_test.accuracy, teacher_test.accuracy,
              student_test.accuracy - teacher_test.accuracy);
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

int cmd_eval(const CommonArgs& args, const std::string& checkpoint,
             const std::string& split) {
  auto cfg = resolve_config(args);
  ssd::LoadedData data = ssd::load_experiment_data(cfg.data);
  ssd::Model model =
      ssd::build_experiment_model(cfg.model, cfg.data, cfg.teacher.seed);
  model.load_state_dict(ssd::load_checkpoint(checkpoint));
  const ssd::TimeSeriesDataset& ds = split == "train" ? data.train : data.test;
  ssd::Metrics m = ssd::evaluate(model, ds);
  std::printf("%s: accuracy %.4f  macro_f1 %.4f  weighted_f1 %.4f\n",
              split.c_str(), m.accuracy, m.macro_f1, m.weighted_f1);
  return 0;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

struct SweepPoint {
  double p_teacher;
  int n;
  double epsilon;
  bool attention_reg;
  bool teacher_init;
};

struct SweepRow {
  SweepPoint point;
  double accuracy = 0.0;
  double rep_variance = 0.0;
  double mean_kept = 0.0;
};

int cmd_ablate(const CommonArgs& args, const std::string& teacher_path) {
  auto cfg = resolve_config(args);
  fs::path dir = open_run_dir(cfg, args, "ablate");

  ssd::LoadedData data = ssd::load_experiment_data(cfg.data);
  ssd::Model teacher =
      ssd::build_experiment_model(cfg.model, cfg.data, cfg.teacher.seed);
  teacher.load_state_dict(ssd::load_checkpoint(teacher_path));
  teacher.freeze();

  auto axis_or = [](std::vector<double> axis, double fallback) {
    return axis.empty() ? std::vector<double>{fallback} : axis;
  };
  std::vector<double> ax_p =
      axis_or(cfg.ablation.p_teacher, cfg.student.ssd.p_teacher);
  std::vector<int> ax_n = cfg.ablation.n.empty()
                              ? std::vector<int>{cfg.student.ssd.n}
                              : cfg.ablation.n;
  std::vector<double> ax_eps =
      axis_or(cfg.ablation.epsilon, cfg.student.ssd.epsilon);
  std::vector<bool> ax_reg = cfg.ablation.attention_reg
                                 ? std::vector<bool>{true, false}
                                 : std::vector<bool>{true};
  std::vector<bool> ax_init = cfg.ablation.teacher_init
                                  ? std::vector<bool>{true, false}
                                  : std::vector<bool>{true};

  if (ax_p.empty() || ax_n.empty() || ax_eps.empty())
    throw ssd::ConfigError("ablation grid is empty");

  std::vector<SweepRow> rows;
  for (double p : ax_p)
    for (int n : ax_n)
      for (double eps : ax_eps)
        for (bool reg : ax_reg)
          for (bool tinit : ax_init) {
            ssd::SSDConfig scfg = cfg.student.ssd;
            scfg.p_teacher = p;
            scfg.n = n;
            scfg.epsilon = eps;
            if (!reg) scfg.h = 1.0;  // sharp attention: no temperature spread
            ssd::Model student =
                tinit ? ssd::init_student_from_teacher(teacher)
                      : ssd::build_experiment_model(cfg.model, cfg.data,
                                                    cfg.student.seed + 0x5EED);
            ssd::TrainOptions opts = student_train_options(cfg);
            if (cfg.ablation.epochs >= 0) opts.epochs = cfg.ablation.epochs;
            auto result =
                ssd::train_student(student, teacher, data.train, scfg,
                                   cfg.teacher.opt, cfg.teacher.sched, opts);
            SweepRow row;
            row.point = {p, n, eps, reg, tinit};
            row.accuracy = ssd::evaluate(student, data.test).accuracy;
            double var = 0.0, kept = 0.0;
            for (auto& d : result.step_diags) {
              var += d.rep_variance;
              kept += d.mean_kept;
            }
            if (!result.step_diags.empty()) {
              var /= static_cast<double>(result.step_diags.size());
              kept /= static_cast<double>(result.step_diags.size());
            }
            row.rep_variance = var;
            row.mean_kept = kept;
            rows.push_back(row);
            std::printf(
                "ablate p=%.2f n=%d eps=%.0f reg=%d init=%d -> acc %.4f "
                "var %.5g kept %.2f\n",
                p, n, eps, reg ? 1 : 0, tinit ? 1 : 0, row.accuracy, var, kept);
          }

  std::ofstream csv(dir / "sweep.csv", std::ios::trunc);
  csv << "p_teacher,n,epsilon,attention_reg,teacher_init,accuracy,"
         "rep_variance,mean_kept\n";
  json jrows = json::array();
  for (auto& r : rows) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%.9g,%d,%.9g,%d,%d,%.9g,%.9g,%.9g\n",
                  r.point.p_teacher, r.point.n, r.point.epsilon,
                  r.point.attention_reg ? 1 : 0, r.point.teacher_init ? 1 : 0,
                  r.accuracy, r.rep_variance, r.mean_kept);
    csv << buf;
    jrows.push_back({{"p_teacher", r.point.p_teacher},
                     {"n", r.point.n},
                     {"epsilon", r.point.epsilon},
                     {"attention_reg", r.point.attention_reg},
                     {"teacher_init", r.point.teacher_init},
                     {"accuracy", r.accuracy},
                     {"rep_variance", r.rep_variance},
                     {"mean_kept", r.mean_kept}});
  }
  write_json(dir / "sweep.json", json{{"rows", jrows}});
  return 0;
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

int cmd_compare(const CommonArgs& args, const std::string& members_dir,
                bool train_members) {
  auto cfg = resolve_config(args);
  fs::path dir = open_run_dir(cfg, args, "compare");

  ssd::LoadedData data = ssd::load_experiment_data(cfg.data);
  auto topts = teacher_train_options(cfg);

  auto train_one = [&](std::uint64_t seed) {
    ssd::Model m = ssd::build_experiment_model(cfg.model, cfg.data, seed);
    ssd::TrainOptions o = topts;
    o.seed = seed;
    ssd::train_teacher(m, data.train, cfg.teacher.opt, cfg.teacher.sched, o);
    return m;
  };

  // Baseline = member seed 0's model.
  std::vector<ssd::Model> members;
  fs::path member_store = members_dir.empty() ? dir / "members" : fs::path(members_dir);
  if (!train_members && !members_dir.empty()) {
    std::vector<std::string> paths;
    fs::path manifest_path = member_store / "ensemble.json";
    if (fs::exists(manifest_path)) {
      std::ifstream mf(manifest_path);
      json manifest = json::parse(mf);
      for (auto& p : manifest.at("members"))
        paths.push_back(p.get<std::string>());
    } else {
      for (int i = 0;; ++i) {
        fs::path p = member_store / ("member_" + std::to_string(i) + ".ssdt");
        if (!fs::exists(p)) break;
        paths.push_back(p.string());
      }
    }
    for (auto& p : paths) {
      ssd::Model m = ssd::build_experiment_model(cfg.model, cfg.data, 0);
      m.load_state_dict(ssd::load_checkpoint(p));
      members.push_back(std::move(m));
    }
    if (members.empty())
      throw ssd::Error("no member checkpoints under " + member_store.string() +
                       "; run with --train-members");
  } else {
    fs::create_directories(member_store);
    for (int i = 0; i < cfg.compare.ensemble_members; ++i) {
      members.push_back(train_one(static_cast<std::uint64_t>(i)));
      ssd::save_checkpoint(
          (member_store / ("member_" + std::to_string(i) + ".ssdt")).string(),
          members.back().state_dict());
      std::printf("trained ensemble member %d/%d\n", i + 1,
                  cfg.compare.ensemble_members);
    }
    json manifest;
    manifest["rule"] = "majority_vote";  // compare reports both rules
    json paths = json::array();
    for (int i = 0; i < static_cast<int>(members.size()); ++i)
      paths.push_back((member_store / ("member_" + std::to_string(i) + ".ssdt"))
                          .string());
    manifest["members"] = paths;
    write_json(member_store / "ensemble.json", manifest);
  }

  const ssd::Model& baseline = members.front();

  // Soup members: short fine-tunes of the baseline with distinct seeds.
  std::vector<std::map<std::string, ssd::Tensor>> soup_states;
  ssd::OptimizerConfig ft_opt = cfg.teacher.opt;
  ft_opt.lr *= cfg.compare.finetune_lr_scale;
  for (int i = 0; i < cfg.compare.soup_members; ++i) {
    ssd::Model m = baseline.clone();
    m.set_trainable(true);
    ssd::TrainOptions o = topts;
    o.epochs = cfg.compare.finetune_epochs;
    o.seed = 1000 + static_cast<std::uint64_t>(i);
    ssd::train_plain(m, data.train, ft_opt, ssd::SchedulerConfig{}, o,
                     cfg.model.dropout);
    soup_states.push_back(m.state_dict());
    std::printf("fine-tuned soup member %d/%d\n", i + 1, cfg.compare.soup_members);
  }

  // Validation evaluator for the greedy soup.
  auto [tr_idx, val_idx] = ssd::split_indices(
      data.train, ssd::SplitSpec{cfg.data.val_fraction, cfg.teacher.seed, true});
  ssd::Model probe = baseline.clone();
  auto val_acc = [&](const std::map<std::string, ssd::Tensor>& state) {
    probe.load_state_dict(state);
    return ssd::evaluate(probe, data.train, val_idx).accuracy;
  };

  std::vector<const std::map<std::string, ssd::Tensor>*> soup_ptrs;
  for (auto& s : soup_states) soup_ptrs.push_back(&s);
  auto uniform = ssd::uniform_soup(soup_ptrs);
  auto greedy = ssd::greedy_soup(soup_ptrs, val_acc);

  // SSD student from the baseline teacher.
  ssd::Model teacher = baseline.clone();
  teacher.freeze();
  ssd::Model student = ssd::init_student_from_teacher(teacher);
  auto sres = ssd::train_student(student, teacher, data.train, cfg.student.ssd,
                                 cfg.teacher.opt, cfg.teacher.sched,
                                 student_train_options(cfg));
  ssd::save_checkpoint((dir / "student.ssdt").string(), sres.best_state);

  // Evaluations.
  std::vector<const ssd::Model*> member_ptrs;
  for (auto& m : members) member_ptrs.push_back(&m);
  auto labels_test = data.test.labels;
  auto vote = ssd::ensemble_predict(member_ptrs,
                                    ssd::CombinationRule::MajorityVote, data.test);
  auto avg = ssd::ensemble_predict(
      member_ptrs, ssd::CombinationRule::ProbabilityAverage, data.test);
  ssd::Model soup_model = baseline.clone();
  soup_model.load_state_dict(uniform);
  ssd::Metrics m_uniform = ssd::evaluate(soup_model, data.test);
  soup_model.load_state_dict(greedy.state);
  ssd::Metrics m_greedy = ssd::evaluate(soup_model, data.test);

  ssd::Metrics m_base = ssd::evaluate(baseline, data.test);
  ssd::Metrics m_vote = ssd::metrics_from_predictions(vote, labels_test,
                                                      data.test.class_count);
  ssd::Metrics m_avg =
      ssd::metrics_from_predictions(avg, labels_test, data.test.class_count);
  ssd::Metrics m_student = ssd::evaluate(student, data.test);

  ssd::ComparePlanShape plan;
  plan.macs_per_sample = baseline.forward_macs_per_sample();
  plan.train_samples = data.train.count;
  plan.teacher_epochs = cfg.teacher.epochs;
  plan.student_epochs = student_train_options(cfg).epochs;
  plan.ssd_passes = cfg.student.ssd.n;
  plan.ensemble_members = static_cast<int>(members.size());
  plan.soup_members = cfg.compare.soup_members;
  plan.finetune_epochs = cfg.compare.finetune_epochs;
  ssd::FlopLedger ledger = ssd::count_flops(plan);
  auto phase = [&](const std::string& name) {
    for (auto& p : ledger.phases)
      if (p.name == name) return p.flops;
    return 0.0;
  };

  const std::int64_t base_params = baseline.parameter_count();
  struct Row {
    std::string method;
    double accuracy;
    std::int64_t inference_params;
    double train_flops;
  };
  std::vector<Row> rows = {
      {"baseline", m_base.accuracy, base_params, phase("baseline_training")},
      {"ensemble_vote", m_vote.accuracy,
       base_params * static_cast<std::int64_t>(members.size()),
       phase("ensemble_training")},
      {"ensemble_average", m_avg.accuracy,
       base_params * static_cast<std::int64_t>(members.size()),
       phase("ensemble_training")},
      {"uniform_soup", m_uniform.accuracy, base_params, phase("soup_training")},
      {"greedy_soup", m_greedy.accuracy, base_params, phase("soup_training")},
      {"ssd_student", m_student.accuracy, base_params, phase("ssd_training")},
  };

  std::ofstream csv(dir / "report.csv", std::ios::trunc);
  csv << "method,accuracy,inference_params,train_flops\n";
  json jrows = json::array();
  for (auto& r : rows) {
    char buf[200];
    std::snprintf(buf, sizeof(buf), "%s,%.9g,%lld,%.9g\n", r.method.c_str(),
                  r.accuracy, static_cast<long long>(r.inference_params),
                  r.train_flops);
    csv << buf;
    jrows.push_back({{"method", r.method},
                     {"accuracy", r.accuracy},
                     {"inference_params", r.inference_params},
                     {"train_flops", r.train_flops}});
    std::printf("%-18s acc %.4f  params %10lld  train_flops %.4g\n",
                r.method.c_str(), r.accuracy,
                static_cast<long long>(r.inference_params), r.train_flops);
  }
  write_json(dir / "report.json", json{{"rows", jrows}});
  return 0;
}

// ---------------------------------------------------------------------------
// export-embeddings
// ---------------------------------------------------------------------------

int cmd_export_embeddings(const CommonArgs& args, const std::string& checkpoint,
                          const std::string& split, const std::string& out_file) {
  auto cfg = resolve_config(args);
  ssd::LoadedData data = ssd::load_experiment_data(cfg.data);
  ssd::Model teacher =
      ssd::build_experiment_model(cfg.model, cfg.data, cfg.teacher.seed);
  teacher.load_state_dict(ssd::load_checkpoint(checkpoint));
  teacher.freeze();

  const ssd::TimeSeriesDataset& ds = split == "train" ? data.train : data.test;
  ssd::SSDConfig scfg = cfg.student.ssd;
  ssd::RngStream rng =
      ssd::RngStream(cfg.student.seed).fork(ssd::kTeacherStreamTag);

  std::ofstream f(out_file, std::ios::trunc);
  if (!f) throw ssd::Error("cannot write " + out_file);
  f << "sample_id,pass_index,label";
  bool header_done = false;

  constexpr std::int64_t kChunk = 256;
  for (std::int64_t at = 0; at < ds.count; at += kChunk) {
    std::vector<std::int64_t> ids;
    for (std::int64_t i = at; i < std::min(at + kChunk, ds.count); ++i)
      ids.push_back(i);
    auto set = ssd::generate_stochastic_representations<float>(
        teacher, ds.batch(ids), scfg, rng, ids);
    if (!header_done) {
      for (std::int64_t j = 0; j < set.d; ++j) f << ",f" << j;
      f << "\n";
      header_done = true;
    }
    for (std::int64_t b = 0; b < set.batch; ++b)
      for (std::int64_t i = 0; i < set.n; ++i) {
        f << ids[static_cast<std::size_t>(b)] << ',' << i << ','
          << ds.labels[static_cast<std::size_t>(ids[static_cast<std::size_t>(b)])];
        char buf[32];
        for (float v : set.row(b, i)) {
          std::snprintf(buf, sizeof(buf), ",%.7g", static_cast<double>(v));
          f << buf;
        }
        f << "\n";
      }
  }
  std::printf("wrote %s (%lld samples x %d passes)\n", out_file.c_str(),
              static_cast<long long>(ds.count), scfg.n);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stochastic self-distillation experiments"};
  app.require_subcommand(1);

  CommonArgs a_teacher, a_student, a_eval, a_ablate, a_compare, a_export;
  std::string teacher_ckpt, eval_ckpt, export_ckpt;
  std::string eval_split = "test", export_split = "test", export_out;
  std::string members_dir;
  bool train_members = false;

  auto* c_teacher = app.add_subcommand("train-teacher", "train the teacher model");
  add_common(c_teacher, a_teacher);

  auto* c_student =
      app.add_subcommand("train-student", "distill a student from a teacher");
  add_common(c_student, a_student);
  c_student->add_option("--teacher", teacher_ckpt, "teacher checkpoint (.ssdt)")
      ->required();

  auto* c_eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(c_eval, a_eval);
  c_eval->add_option("--checkpoint", eval_ckpt, "model checkpoint")->required();
  c_eval->add_option("--split", eval_split, "train | test");

  auto* c_ablate = app.add_subcommand("ablate", "run the ablation grid");
  add_common(c_ablate, a_ablate);
  std::string ablate_teacher;
  c_ablate->add_option("--teacher", ablate_teacher, "teacher checkpoint (.ssdt)")
      ->required();

  auto* c_compare =
      app.add_subcommand("compare", "baseline vs ensembles, soups, and SSD");
  add_common(c_compare, a_compare);
  c_compare->add_option("--members-dir", members_dir,
                        "directory of pre-trained member checkpoints");
  c_compare->add_flag("--train-members", train_members,
                      "train ensemble members now");

  auto* c_export = app.add_subcommand("export-embeddings",
                                      "dump stochastic teacher features to CSV");
  add_common(c_export, a_export);
  c_export->add_option("--checkpoint", export_ckpt, "teacher checkpoint")
      ->required();
  c_export->add_option("--split", export_split, "train | test");
  c_export->add_option("--csv", export_out, "output CSV path")->required();

  try {
    app.parse(argc, argv);
    if (c_teacher->parsed()) return cmd_train_teacher(a_teacher);
    if (c_student->parsed()) return cmd_train_student(a_student, teacher_ckpt);
    if (c_eval->parsed()) return cmd_eval(a_eval, eval_ckpt, eval_split);
    if (c_ablate->parsed()) return cmd_ablate(a_ablate, ablate_teacher);
    if (c_compare->parsed())
      return cmd_compare(a_compare, members_dir, train_members);
    if (c_export->parsed())
      return cmd_export_embeddings(a_export, export_ckpt, export_split,
                                   export_out);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;  // usage problems are configuration errors
  } catch (const ssd::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
