#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ssd/data.hpp"
#include "ssd/nn.hpp"
#include "ssd/ssd.hpp"
#include "ssd/tensor.hpp"

namespace ssd {

inline constexpr std::uint64_t kShuffleStreamTag = 0x5F1E;
inline constexpr std::uint64_t kInitStreamTag = 0x111A;

// ---------------------------------------------------------------------------
// Optimizers and schedulers
// ---------------------------------------------------------------------------

enum class OptKind { Sgd, Adam };

struct OptimizerConfig {
  OptKind kind = OptKind::Adam;
  double lr = 0.05;
  double momentum = 0.0;   // SGD
  double beta1 = 0.9;      // Adam
  double beta2 = 0.999;    // Adam
  double eps = 1e-8;       // Adam
  double weight_decay = 0.0;

  void validate() const {
    if (lr <= 0.0)
      throw ConfigError("optimizer.lr must be > 0, got " + std::to_string(lr));
    if (weight_decay < 0.0)
      throw ConfigError("optimizer.weight_decay must be >= 0");
  }
};

// Updates parameters in place from their accumulated gradients.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) { cfg.validate(); }

  double lr() const { return lr_override_.value_or(cfg_.lr); }
  void set_lr(double lr) { lr_override_ = lr; }

  void apply(const std::vector<std::pair<std::string, Tensor*>>& params);

 private:
  struct State {
    std::vector<float> m;  // momentum / first moment
    std::vector<float> v;  // second moment (Adam)
  };
  OptimizerConfig cfg_;
  std::optional<double> lr_override_;
  std::map<std::string, State> state_;
  std::int64_t steps_ = 0;
};

enum class SchedKind { None, ReduceOnPlateau, Cosine };
enum class MonitorMetric { TrainLoss, ValLoss, ValAccuracy };

struct SchedulerConfig {
  SchedKind kind = SchedKind::None;
  MonitorMetric monitor = MonitorMetric::TrainLoss;
  int patience = 10;     // plateau
  double factor = 0.1;   // plateau
  int t_max = 100;       // cosine

  void validate() const {
    if (kind == SchedKind::ReduceOnPlateau) {
      if (patience < 1) throw ConfigError("scheduler.patience must be >= 1");
      if (factor <= 0.0 || factor >= 1.0)
        throw ConfigError("scheduler.factor must lie in (0, 1)");
    }
    if (kind == SchedKind::Cosine && t_max < 1)
      throw ConfigError("scheduler.t_max must be >= 1");
  }
};

// Learning-rate schedule. The rate never increases under either policy.
class Scheduler {
 public:
  Scheduler(SchedulerConfig cfg, double base_lr)
      : cfg_(cfg), base_lr_(base_lr) {
    cfg.validate();
  }

  // Called once per epoch with the monitored metric; returns the lr to use
  // for the next epoch.
  double observe(int epoch, double monitored);
  double current_lr() const { return lr_; }

 private:
  SchedulerConfig cfg_;
  double base_lr_;
  double lr_ = -1.0;  // set on first observe
  double best_ = 0.0;
  bool has_best_ = false;
  int bad_epochs_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

// Binary archive: magic "SSDT", u32 LE version (1), u32 LE tensor count,
// then per tensor: u32 LE name length, UTF-8 name, u32 LE rank, u64 LE dims,
// u32 LE dtype code (1 = float32 LE), raw data. Writes are atomic
// (temp file + rename) and round-trips are bit-identical.
void save_checkpoint(const std::string& path,
                     const std::map<std::string, Tensor>& tensors);
std::map<std::string, Tensor> load_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct Metrics {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  double weighted_f1 = 0.0;
  int classes = 0;
  std::vector<std::int64_t> confusion;  // [true][pred], classes x classes

  std::int64_t confusion_at(int t, int p) const {
    return confusion[static_cast<std::size_t>(t * classes + p)];
  }
};

Metrics metrics_from_predictions(std::span<const int> predictions,
                                 std::span<const int> labels, int classes);

// Deterministic Eval-mode predictions (argmax of the logits; ties resolve
// to the lowest class index).
std::vector<int> predict(const Model& model, const TimeSeriesDataset& ds,
                         std::span<const std::int64_t> indices = {});

// Row-major [m x K] softmax probabilities in Eval mode.
std::vector<double> predict_probs(const Model& model,
                                  const TimeSeriesDataset& ds,
                                  std::span<const std::int64_t> indices = {});

Metrics evaluate(const Model& model, const TimeSeriesDataset& ds,
                 std::span<const std::int64_t> indices = {});

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

struct EarlyStopConfig {
  bool enabled = false;
  int patience = 10;  // epochs without val-accuracy improvement
};

struct TrainOptions {
  int epochs = 100;
  int batch_size = 128;
  std::uint64_t seed = 0;
  double val_fraction = 0.1;  // stratified, carved from the training split
  EarlyStopConfig early_stop;
  bool verbose = false;
};

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double val_accuracy = 0.0;
  double lr = 0.0;
};

struct StepDiag {
  std::int64_t step = 0;
  double l_task = 0.0;
  double l_dist = 0.0;
  double l_total = 0.0;
  double mean_kept = 0.0;
  double mean_alpha_max = 0.0;
  double rep_variance = 0.0;
};

struct TrainResult {
  std::map<std::string, Tensor> best_state;  // best-by-validation weights
  int best_epoch = -1;
  double best_val_accuracy = 0.0;
  std::vector<EpochStats> history;
  std::vector<StepDiag> step_diags;  // SGKD runs only
};

// Supervised training of a fresh model (the teacher recipe). The model is
// left holding the best-by-validation weights, which are also returned in
// the result. NaN loss aborts with DataError.
TrainResult train_teacher(const Model& model, const TimeSeriesDataset& train,
                          const OptimizerConfig& opt, const SchedulerConfig& sched,
                          const TrainOptions& opts);

// Plain fine-tuning with the same loop, shuffling, and dropout streams as
// SGKD training minus the distillation term (soup members, ablations).
TrainResult train_plain(const Model& model, const TimeSeriesDataset& train,
                        const OptimizerConfig& opt, const SchedulerConfig& sched,
                        const TrainOptions& opts, double dropout_rate);

// Parameter-wise copy of the teacher weights into a trainable clone.
Model init_student_from_teacher(const Model& teacher);
Model init_student_from_checkpoint(const Model& architecture,
                                   const std::map<std::string, Tensor>& state);

// SGKD training per the distillation procedure: the teacher stays frozen,
// the student starts from teacher weights (callers may override for the
// random-init ablation), and every optimizer step goes through sgkd_step.
TrainResult train_student(const Model& student, const Model& teacher,
                          const TimeSeriesDataset& train, const SSDConfig& cfg,
                          const OptimizerConfig& opt, const SchedulerConfig& sched,
                          const TrainOptions& opts);

void write_history_csv(const std::string& path,
                       std::span<const EpochStats> history);
void write_diagnostics_csv(const std::string& path,
                           std::span<const StepDiag> diags);

// ---------------------------------------------------------------------------
// FLOP accounting (analytic; 1 MAC = 2 FLOPs, backward = 2x forward)
// ---------------------------------------------------------------------------

struct FlopPhase {
  std::string name;
  double flops = 0.0;
};

struct FlopLedger {
  std::vector<FlopPhase> phases;
  double total() const {
    double t = 0.0;
    for (auto& p : phases) t += p.flops;
    return t;
  }
};

double forward_flops(std::int64_t macs_per_sample, std::int64_t samples);
double training_flops(std::int64_t macs_per_sample, std::int64_t samples,
                      int epochs);
// SGKD student training: (3 + n) forward-equivalents per sample per epoch,
// the n covering the stochastic teacher passes at nominal full cost.
double ssd_training_flops(std::int64_t macs_per_sample, std::int64_t samples,
                          int epochs, int n_passes);

struct ComparePlanShape {
  std::int64_t macs_per_sample = 0;
  std::int64_t train_samples = 0;
  int teacher_epochs = 100;
  int student_epochs = 100;
  int ssd_passes = 30;
  int ensemble_members = 25;
  int soup_members = 25;
  int finetune_epochs = 10;
};

// Ledger for the comparison table: baseline, ensembles, soups, SSD.
FlopLedger count_flops(const ComparePlanShape& plan);

}  // namespace ssd
