#include "ssd/train.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>

namespace ssd {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

void Optimizer::apply(const std::vector<std::pair<std::string, Tensor*>>& params) {
  ++steps_;
  const double lr = this->lr();
  for (auto& [name, p] : params) {
    auto g = p->grad_span();
    if (g.empty()) continue;  // parameter untouched by backward
    auto v = p->data_mut();
    auto& st = state_[name];
    if (cfg_.kind == OptKind::Sgd) {
      if (cfg_.momentum != 0.0 && st.m.empty()) st.m.assign(v.size(), 0.f);
      for (std::size_t i = 0; i < v.size(); ++i) {
        float grad = g[i] + static_cast<float>(cfg_.weight_decay) * v[i];
        if (cfg_.momentum != 0.0) {
          st.m[i] = static_cast<float>(cfg_.momentum) * st.m[i] + grad;
          grad = st.m[i];
        }
        v[i] -= static_cast<float>(lr) * grad;
      }
    } else {
      if (st.m.empty()) {
        st.m.assign(v.size(), 0.f);
        st.v.assign(v.size(), 0.f);
      }
      const float b1 = static_cast<float>(cfg_.beta1);
      const float b2 = static_cast<float>(cfg_.beta2);
      const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
      const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
      const float step_size = static_cast<float>(lr / bc1);
      const float denom_corr = static_cast<float>(std::sqrt(bc2));
      for (std::size_t i = 0; i < v.size(); ++i) {
        float grad = g[i] + static_cast<float>(cfg_.weight_decay) * v[i];
        st.m[i] = b1 * st.m[i] + (1.f - b1) * grad;
        st.v[i] = b2 * st.v[i] + (1.f - b2) * grad * grad;
        v[i] -= step_size * st.m[i] /
                (std::sqrt(st.v[i]) / denom_corr + static_cast<float>(cfg_.eps));
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Scheduler
// ---------------------------------------------------------------------------

double Scheduler::observe(int epoch, double monitored) {
  if (lr_ < 0.0) lr_ = base_lr_;
  switch (cfg_.kind) {
    case SchedKind::None:
      break;
    case SchedKind::Cosine: {
      double t = std::min(epoch + 1, cfg_.t_max);
      lr_ = 0.5 * base_lr_ *
            (1.0 + std::cos(std::numbers::pi * t / static_cast<double>(cfg_.t_max)));
      break;
    }
    case SchedKind::ReduceOnPlateau: {
      const bool higher_better = cfg_.monitor == MonitorMetric::ValAccuracy;
      bool improved = !has_best_ ||
                      (higher_better ? monitored > best_ : monitored < best_);
      if (improved) {
        best_ = monitored;
        has_best_ = true;
        bad_epochs_ = 0;
      } else if (++bad_epochs_ >= cfg_.patience) {
        lr_ *= cfg_.factor;
        bad_epochs_ = 0;
      }
      break;
    }
  }
  return lr_;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'S', 'S', 'D', 'T'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kDtypeF32 = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

struct Reader {
  const unsigned char* p;
  std::size_t left;
  std::string path;

  void need(std::size_t n) {
    if (left < n)
      throw CheckpointError(path + ": truncated checkpoint archive");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    p += 4;
    left -= 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    p += 8;
    left -= 8;
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(p), n);
    p += n;
    left -= n;
    return s;
  }
};

}  // namespace

void save_checkpoint(const std::string& path,
                     const std::map<std::string, Tensor>& tensors) {
  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (auto& [name, t] : tensors) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.append(name);
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put_u64(out, static_cast<std::uint64_t>(d));
    put_u32(out, kDtypeF32);
    static_assert(std::endian::native == std::endian::little,
                  "float payload is written natively and assumed little-endian");
    out.append(reinterpret_cast<const char*>(t.data().data()),
               t.data().size() * sizeof(float));
  }
  fs::path tmp = fs::path(path).concat(".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot write " + tmp.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw CheckpointError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::map<std::string, Tensor> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path);
  std::string blob((std::istreambuf_iterator<char>(f)),
                   std::istreambuf_iterator<char>());
  Reader r{reinterpret_cast<const unsigned char*>(blob.data()), blob.size(),
           path};
  if (r.bytes(4) != std::string(kMagic, 4))
    throw CheckpointError(path + ": not a checkpoint archive (bad magic)");
  std::uint32_t version = r.u32();
  if (version != kVersion)
    throw CheckpointError(path + ": unsupported archive version " +
                          std::to_string(version));
  std::uint32_t count = r.u32();
  std::map<std::string, Tensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t name_len = r.u32();
    std::string name = r.bytes(name_len);
    std::uint32_t rank = r.u32();
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k)
      shape.push_back(static_cast<std::int64_t>(r.u64()));
    std::uint32_t dtype = r.u32();
    if (dtype != kDtypeF32)
      throw CheckpointError(path + ": unsupported dtype code " +
                            std::to_string(dtype));
    auto n = static_cast<std::size_t>(shape_numel(shape));
    std::string raw = r.bytes(n * sizeof(float));
    std::vector<float> data(n);
    std::memcpy(data.data(), raw.data(), raw.size());
    out.emplace(std::move(name), Tensor::from_data(std::move(shape), std::move(data)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

Metrics metrics_from_predictions(std::span<const int> predictions,
                                 std::span<const int> labels, int classes) {
  if (predictions.size() != labels.size())
    throw DimensionError("metrics: prediction/label count mismatch");
  Metrics m;
  m.classes = classes;
  m.confusion.assign(static_cast<std::size_t>(classes) * classes, 0);
  std::int64_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    ++m.confusion[static_cast<std::size_t>(labels[i] * classes + predictions[i])];
    if (labels[i] == predictions[i]) ++correct;
  }
  const double total = static_cast<double>(labels.size());
  m.accuracy = total > 0 ? static_cast<double>(correct) / total : 0.0;
  double macro = 0.0, weighted = 0.0;
  for (int c = 0; c < classes; ++c) {
    std::int64_t tp = m.confusion_at(c, c), fp = 0, fn = 0, support = 0;
    for (int o = 0; o < classes; ++o) {
      if (o != c) {
        fp += m.confusion_at(o, c);
        fn += m.confusion_at(c, o);
      }
      support += m.confusion_at(c, o);
    }
    double prec = tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
    double rec = tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
    double f1 = prec + rec > 0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
    macro += f1;
    weighted += f1 * static_cast<double>(support);
  }
  m.macro_f1 = classes > 0 ? macro / classes : 0.0;
  m.weighted_f1 = total > 0 ? weighted / total : 0.0;
  return m;
}

namespace {

std::vector<std::int64_t> all_indices(const TimeSeriesDataset& ds) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(ds.count));
  for (std::int64_t i = 0; i < ds.count; ++i)
    idx[static_cast<std::size_t>(i)] = i;
  return idx;
}

constexpr std::int64_t kEvalBatch = 256;

}  // namespace

std::vector<double> predict_probs(const Model& model,
                                  const TimeSeriesDataset& ds,
                                  std::span<const std::int64_t> indices) {
  std::vector<std::int64_t> all;
  if (indices.empty()) {
    all = all_indices(ds);
    indices = all;
  }
  const auto m = static_cast<std::int64_t>(indices.size());
  std::vector<double> probs;
  ForwardCtx ctx{DropoutMode::Eval, RngStream(0), {}, 0};
  for (std::int64_t at = 0; at < m; at += kEvalBatch) {
    auto chunk = indices.subspan(static_cast<std::size_t>(at),
                                 static_cast<std::size_t>(
                                     std::min(kEvalBatch, m - at)));
    auto fwd = model.forward(ds.batch(chunk), ctx);
    auto p = softmax_rows(fwd.logits);
    probs.insert(probs.end(), p.begin(), p.end());
  }
  return probs;
}

std::vector<int> predict(const Model& model, const TimeSeriesDataset& ds,
                         std::span<const std::int64_t> indices) {
  std::vector<std::int64_t> all;
  if (indices.empty()) {
    all = all_indices(ds);
    indices = all;
  }
  const auto m = static_cast<std::int64_t>(indices.size());
  const int k = ds.class_count;
  std::vector<int> preds;
  preds.reserve(static_cast<std::size_t>(m));
  ForwardCtx ctx{DropoutMode::Eval, RngStream(0), {}, 0};
  for (std::int64_t at = 0; at < m; at += kEvalBatch) {
    auto chunk = indices.subspan(static_cast<std::size_t>(at),
                                 static_cast<std::size_t>(
                                     std::min(kEvalBatch, m - at)));
    auto fwd = model.forward(ds.batch(chunk), ctx);
    auto lv = fwd.logits.data();
    for (std::size_t r = 0; r < chunk.size(); ++r) {
      const float* logit = lv.data() + r * static_cast<std::size_t>(k);
      int best = 0;
      for (int c = 1; c < k; ++c)
        if (logit[c] > logit[best]) best = c;
      preds.push_back(best);
    }
  }
  return preds;
}

Metrics evaluate(const Model& model, const TimeSeriesDataset& ds,
                 std::span<const std::int64_t> indices) {
  std::vector<std::int64_t> all;
  if (indices.empty()) {
    all = all_indices(ds);
    indices = all;
  }
  auto preds = predict(model, ds, indices);
  auto labels = ds.batch_labels(indices);
  return metrics_from_predictions(preds, labels, ds.class_count);
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

namespace {

// One shared loop drives teacher training, plain fine-tuning, and SGKD
// student training so that shuffling, dropout streams, and bookkeeping are
// identical across the three paths.
TrainResult run_loop(const Model& model, const TimeSeriesDataset& train,
                     const OptimizerConfig& ocfg, const SchedulerConfig& scfg,
                     const TrainOptions& opts, const SSDConfig* ssd_cfg,
                     const Model* teacher, double plain_dropout_rate) {
  ocfg.validate();
  scfg.validate();
  if (ssd_cfg) ssd_cfg->validate();

  auto [train_idx, val_idx] =
      split_indices(train, SplitSpec{opts.val_fraction, opts.seed, true});

  TrainResult res;
  res.best_state = model.state_dict();

  RngStream run_rng(opts.seed);
  RngStream shuffle_rng = run_rng.fork(kShuffleStreamTag);
  RngStream student_rng = run_rng.fork(kStudentStreamTag);

  Optimizer optimizer(ocfg);
  Scheduler scheduler(scfg, ocfg.lr);
  auto params = model.named_params();

  const bool track_by_val = !val_idx.empty();
  double best_metric = track_by_val ? -1.0 : std::numeric_limits<double>::max();
  int stale_epochs = 0;
  std::int64_t step = 0;

  if (!ssd_cfg) model.set_dropout_rate(plain_dropout_rate);

  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    std::vector<std::int64_t> order = train_idx;
    seeded_shuffle(order, shuffle_rng.key(static_cast<std::uint64_t>(epoch)));

    double loss_sum = 0.0;
    std::int64_t seen = 0;
    for (std::size_t at = 0; at < order.size();
         at += static_cast<std::size_t>(opts.batch_size)) {
      auto n = std::min(static_cast<std::size_t>(opts.batch_size),
                        order.size() - at);
      std::span<const std::int64_t> ids{order.data() + at, n};
      Tensor batch = train.batch(ids);
      auto labels = train.batch_labels(ids);

      double loss;
      if (ssd_cfg) {
        auto r = sgkd_step<float>(model, *teacher, batch, labels, ids, *ssd_cfg,
                                  run_rng, static_cast<std::uint64_t>(step));
        loss = r.l_total;
        res.step_diags.push_back({step, r.l_task, r.l_dist, r.l_total,
                                  r.diag.mean_kept, r.diag.mean_alpha_max,
                                  r.diag.rep_variance});
      } else {
        Tape tape;
        typename Tape::Scope scope(tape);
        ForwardCtx ctx{DropoutMode::Train, student_rng, ids,
                       static_cast<std::uint64_t>(step)};
        auto fwd = model.forward(batch, ctx);
        auto l = softmax_cross_entropy(fwd.logits, labels);
        loss = static_cast<double>(l.item());
        tape.backward(l);
      }
      if (!std::isfinite(loss))
        throw DataError("training diverged: non-finite loss " +
                        std::to_string(loss) + " at step " +
                        std::to_string(step));
      optimizer.apply(params);
      model.zero_grads();
      loss_sum += loss * static_cast<double>(n);
      seen += static_cast<std::int64_t>(n);
      ++step;
    }

    EpochStats es;
    es.epoch = epoch;
    es.train_loss = seen > 0 ? loss_sum / static_cast<double>(seen) : 0.0;
    es.val_accuracy =
        track_by_val ? evaluate(model, train, val_idx).accuracy : 0.0;
    es.lr = optimizer.lr();
    res.history.push_back(es);

    if (opts.verbose)
      std::fprintf(stderr, "epoch %3d  loss %.5f  val_acc %.4f  lr %.5g\n",
                   epoch, es.train_loss, es.val_accuracy, es.lr);

    bool improved = track_by_val ? es.val_accuracy > best_metric
                                 : es.train_loss < best_metric;
    if (improved) {
      best_metric = track_by_val ? es.val_accuracy : es.train_loss;
      res.best_state = model.state_dict();
      res.best_epoch = epoch;
      res.best_val_accuracy = es.val_accuracy;
      stale_epochs = 0;
    } else {
      ++stale_epochs;
    }

    double monitored = es.train_loss;
    if (scfg.monitor == MonitorMetric::ValAccuracy) monitored = es.val_accuracy;
    optimizer.set_lr(scheduler.observe(epoch, monitored));

    if (opts.early_stop.enabled && stale_epochs >= opts.early_stop.patience)
      break;
  }

  model.load_state_dict(res.best_state);
  return res;
}

}  // namespace

TrainResult train_teacher(const Model& model, const TimeSeriesDataset& train,
                          const OptimizerConfig& opt, const SchedulerConfig& sched,
                          const TrainOptions& opts) {
  model.set_trainable(true);
  // Teacher trains with the dropout rate baked into its architecture; the
  // loop only needs to know it is the plain supervised path.
  double rate = 0.0;
  for (std::size_t i = 0; i < model.layer_count(); ++i)
    if (auto* d = dynamic_cast<const DropoutLayer<float>*>(&model.layer(i)))
      rate = d->rate();
  return run_loop(model, train, opt, sched, opts, nullptr, nullptr, rate);
}

TrainResult train_plain(const Model& model, const TimeSeriesDataset& train,
                        const OptimizerConfig& opt, const SchedulerConfig& sched,
                        const TrainOptions& opts, double dropout_rate) {
  model.set_trainable(true);
  return run_loop(model, train, opt, sched, opts, nullptr, nullptr,
                  dropout_rate);
}

Model init_student_from_teacher(const Model& teacher) {
  Model student = teacher.clone();
  student.set_trainable(true);
  return student;
}

Model init_student_from_checkpoint(const Model& architecture,
                                   const std::map<std::string, Tensor>& state) {
  Model student = architecture.clone();
  student.load_state_dict(state);  // throws CheckpointError on mismatch
  student.set_trainable(true);
  return student;
}

TrainResult train_student(const Model& student, const Model& teacher,
                          const TimeSeriesDataset& train, const SSDConfig& cfg,
                          const OptimizerConfig& opt, const SchedulerConfig& sched,
                          const TrainOptions& opts) {
  student.set_trainable(true);
  teacher.freeze();
  return run_loop(student, train, opt, sched, opts, &cfg, &teacher, 0.0);
}

void write_history_csv(const std::string& path,
                       std::span<const EpochStats> history) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("cannot write " + path);
  f << "epoch,train_loss,val_accuracy,lr\n";
  char buf[160];
  for (auto& e : history) {
    std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g\n", e.epoch,
                  e.train_loss, e.val_accuracy, e.lr);
    f << buf;
  }
}

void write_diagnostics_csv(const std::string& path,
                           std::span<const StepDiag> diags) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("cannot write " + path);
  f << "step,l_task,l_dist,l_total,mean_kept,mean_alpha_max,rep_variance\n";
  char buf[240];
  for (auto& d : diags) {
    std::snprintf(buf, sizeof(buf), "%lld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n",
                  static_cast<long long>(d.step), d.l_task, d.l_dist, d.l_total,
                  d.mean_kept, d.mean_alpha_max, d.rep_variance);
    f << buf;
  }
}

// ---------------------------------------------------------------------------
// FLOPs
// ---------------------------------------------------------------------------

double forward_flops(std::int64_t macs_per_sample, std::int64_t samples) {
  return 2.0 * static_cast<double>(macs_per_sample) *
         static_cast<double>(samples);
}

double training_flops(std::int64_t macs_per_sample, std::int64_t samples,
                      int epochs) {
  // forward + 2x forward for backward
  return 3.0 * forward_flops(macs_per_sample, samples) *
         static_cast<double>(epochs);
}

double ssd_training_flops(std::int64_t macs_per_sample, std::int64_t samples,
                          int epochs, int n_passes) {
  return (3.0 + static_cast<double>(n_passes)) *
         forward_flops(macs_per_sample, samples) * static_cast<double>(epochs);
}

FlopLedger count_flops(const ComparePlanShape& plan) {
  FlopLedger ledger;
  const double teacher =
      training_flops(plan.macs_per_sample, plan.train_samples, plan.teacher_epochs);
  ledger.phases.push_back({"baseline_training", teacher});
  ledger.phases.push_back(
      {"ensemble_training",
       teacher * static_cast<double>(plan.ensemble_members)});
  ledger.phases.push_back(
      {"soup_training",
       teacher + static_cast<double>(plan.soup_members) *
                     training_flops(plan.macs_per_sample, plan.train_samples,
                                    plan.finetune_epochs)});
  ledger.phases.push_back(
      {"ssd_training",
       teacher + ssd_training_flops(plan.macs_per_sample, plan.train_samples,
                                    plan.student_epochs, plan.ssd_passes)});
  return ledger;
}

}  // namespace ssd
