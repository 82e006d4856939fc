#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "ssd/nn.hpp"
#include "ssd/rng.hpp"
#include "ssd/tensor.hpp"

namespace ssd {

// Stream tags so teacher passes, student dropout, and data-order draws never
// collide even when derived from one experiment seed.
inline constexpr std::uint64_t kTeacherStreamTag = 0x7EAC;
inline constexpr std::uint64_t kStudentStreamTag = 0x57D0;

enum class SelectionScheme { Dynamic, TopK, DistillAll };

inline std::string to_string(SelectionScheme s) {
  switch (s) {
    case SelectionScheme::Dynamic: return "dynamic";
    case SelectionScheme::TopK: return "top-k";
    case SelectionScheme::DistillAll: return "distill-all";
  }
  return "?";
}

// All SGKD hyperparameters. Defaults follow the HAR recipe: n=30 passes,
// teacher dropout 0.2, student dropout 0.1, temperature h=5, percentile 90,
// distillation weight 0.2.
struct SSDConfig {
  int n = 30;                   // stochastic teacher passes per sample
  double p_teacher = 0.2;       // distillation-time teacher dropout rate
  double p_student = 0.1;       // student training-time dropout rate
  double h = 5.0;               // attention temperature
  double epsilon = 90.0;        // percentile threshold in [0, 100]
  double lambda = 0.2;          // distillation loss weight
  bool renormalize_after_mask = false;  // rescale kept weights to sum 1
  bool detach_attention = true;         // attention weights act as constants
  SelectionScheme selection = SelectionScheme::Dynamic;
  int top_k = 15;               // used when selection == TopK
  double logit_kl = 0.0;        // optional logit-level KL weight, temperature 1

  void validate() const {
    if (n < 1) throw ConfigError("ssd.n must be >= 1, got " + std::to_string(n));
    if (h <= 0.0)
      throw ConfigError("ssd.h must be > 0, got " + std::to_string(h));
    if (epsilon < 0.0 || epsilon > 100.0)
      throw ConfigError("ssd.epsilon must lie in [0, 100], got " +
                        std::to_string(epsilon));
    if (lambda < 0.0)
      throw ConfigError("ssd.lambda must be >= 0, got " +
                        std::to_string(lambda));
    if (p_teacher < 0.0 || p_teacher >= 1.0)
      throw ConfigError("ssd.p_teacher must lie in [0, 1), got " +
                        std::to_string(p_teacher));
    if (p_student < 0.0 || p_student >= 1.0)
      throw ConfigError("ssd.p_student must lie in [0, 1), got " +
                        std::to_string(p_student));
    if (selection == SelectionScheme::TopK && (top_k < 1 || top_k > n))
      throw ConfigError("ssd.top_k must lie in [1, n], got " +
                        std::to_string(top_k));
    if (logit_kl < 0.0)
      throw ConfigError("ssd.logit_kl must be >= 0, got " +
                        std::to_string(logit_kl));
  }
};

// The n stochastic teacher feature rows per sample, [batch][n][d].
// Row i of sample b is reproducible from (base_seed, sample_ids[b], i).
template <typename S>
struct StochasticTeacherSetT {
  std::int64_t batch = 0;
  std::int64_t n = 0;
  std::int64_t d = 0;
  std::vector<S> values;
  std::vector<std::int64_t> sample_ids;
  std::uint64_t base_seed = 0;

  std::span<const S> sample_rows(std::int64_t b) const {
    return {values.data() + b * n * d, static_cast<std::size_t>(n * d)};
  }
  std::span<const S> row(std::int64_t b, std::int64_t i) const {
    return {values.data() + (b * n + i) * d, static_cast<std::size_t>(d)};
  }
};

using StochasticTeacherSet = StochasticTeacherSetT<float>;

// Runs the frozen teacher in Distill mode n times and collects the feature
// rows. Layers upstream of the first dropout site are deterministic and are
// evaluated once; only the stochastic suffix is repeated per pass.
template <typename S>
StochasticTeacherSetT<S> generate_stochastic_representations(
    const ModelT<S>& teacher, const TensorT<S>& batch, const SSDConfig& cfg,
    const RngStream& teacher_rng, std::span<const std::int64_t> sample_ids) {
  cfg.validate();
  if (teacher.any_trainable())
    throw ContractError(
        "generate_stochastic_representations: teacher has trainable "
        "parameters (frozen-teacher violation)");
  if (static_cast<std::int64_t>(sample_ids.size()) != batch.dim(0))
    throw ContractError("need one sample id per batch row");
  teacher.set_dropout_rate(cfg.p_teacher);

  StochasticTeacherSetT<S> set;
  set.batch = batch.dim(0);
  set.n = cfg.n;
  set.base_seed = teacher_rng.base_seed();
  set.sample_ids.assign(sample_ids.begin(), sample_ids.end());

  const std::size_t split = teacher.first_stochastic_layer();
  ForwardCtx base{DropoutMode::Distill, teacher_rng, sample_ids, 0};

  auto copy_pass = [&](const TensorT<S>& features, std::int64_t pass) {
    auto fv = features.data();
    for (std::int64_t b = 0; b < set.batch; ++b)
      std::copy_n(fv.data() + b * set.d, set.d,
                  set.values.data() + (b * set.n + pass) * set.d);
  };

  if (teacher.feature_tap() < split) {
    // The tap sits before any stochastic layer: every pass yields the same
    // feature vector.
    TensorT<S> feat;
    teacher.forward_range(batch, base, 0, teacher.feature_tap() + 1, &feat);
    set.d = feat.dim(1);
    set.values.assign(static_cast<std::size_t>(set.batch * set.n * set.d), S(0));
    for (std::int64_t i = 0; i < set.n; ++i) copy_pass(feat, i);
    return set;
  }

  TensorT<S> prefix = teacher.forward_range(batch, base, 0, split);
  for (std::int64_t i = 0; i < set.n; ++i) {
    ForwardCtx ctx{DropoutMode::Distill, teacher_rng, sample_ids,
                   static_cast<std::uint64_t>(i)};
    TensorT<S> feat;
    teacher.forward_range(prefix, ctx, split, teacher.layer_count(), &feat);
    if (set.d == 0) {
      set.d = feat.dim(1);
      set.values.assign(static_cast<std::size_t>(set.batch * set.n * set.d),
                        S(0));
    }
    copy_pass(feat, i);
  }
  return set;
}

// phi_i = <f_S, f^T_i> for each teacher row.
template <typename S>
std::vector<S> similarity_scores(std::span<const S> f_student,
                                 std::span<const S> teacher_rows,
                                 std::int64_t n, std::int64_t d) {
  if (static_cast<std::int64_t>(f_student.size()) != d ||
      static_cast<std::int64_t>(teacher_rows.size()) != n * d)
    throw DimensionError("similarity_scores: dimension mismatch");
  std::vector<S> phi(static_cast<std::size_t>(n), S(0));
  for (std::int64_t i = 0; i < n; ++i) {
    const S* r = teacher_rows.data() + i * d;
    S acc = S(0);
    for (std::int64_t j = 0; j < d; ++j) acc += f_student[j] * r[j];
    phi[static_cast<std::size_t>(i)] = acc;
  }
  return phi;
}

// alpha_i = exp(phi_i / h) / sum_j exp(phi_j / h), max-subtraction stabilized.
template <typename S>
std::vector<S> attention_weights(std::span<const S> phi, double h) {
  if (h <= 0.0)
    throw ConfigError("attention temperature h must be > 0, got " +
                      std::to_string(h));
  std::vector<S> alpha(phi.begin(), phi.end());
  S mx = alpha[0];
  for (S v : alpha) mx = std::max(mx, v);
  double z = 0.0;
  for (auto& v : alpha) {
    v = static_cast<S>(std::exp((static_cast<double>(v) - mx) / h));
    z += v;
  }
  for (auto& v : alpha) v = static_cast<S>(v / z);
  return alpha;
}

template <typename S>
struct AttentionWeightsT {
  std::vector<S> alpha_hat;
  std::vector<std::uint8_t> kept;
  int kept_count = 0;
};

// Nearest-rank percentile rank: smallest r with r >= eps*n/100, exact in
// integer arithmetic (eps taken at milli-percent resolution).
inline int percentile_rank(double eps, std::int64_t n) {
  auto em = static_cast<std::int64_t>(std::llround(eps * 1000.0));
  return static_cast<int>((em * n + 99999) / 100000);
}

// Zeroes weights below the eps-th percentile of the per-sample weight set.
// The threshold is the value at rank ceil(eps/100 * n) of the ascending
// sort; ties at the threshold survive, so the maximum weight is never
// masked. eps = 0 keeps everything.
template <typename S>
AttentionWeightsT<S> percentile_mask(std::span<const S> alpha, double eps,
                                     bool renormalize = false) {
  if (eps < 0.0 || eps > 100.0)
    throw ConfigError("epsilon must lie in [0, 100], got " +
                      std::to_string(eps));
  const auto n = static_cast<std::int64_t>(alpha.size());
  AttentionWeightsT<S> out;
  out.alpha_hat.assign(alpha.begin(), alpha.end());
  out.kept.assign(alpha.size(), 1);
  const int rank = percentile_rank(eps, n);
  if (rank >= 1) {
    std::vector<S> sorted(alpha.begin(), alpha.end());
    std::sort(sorted.begin(), sorted.end());
    const S threshold = sorted[static_cast<std::size_t>(rank - 1)];
    for (std::size_t i = 0; i < alpha.size(); ++i)
      if (alpha[i] < threshold) {
        out.alpha_hat[i] = S(0);
        out.kept[i] = 0;
      }
  }
  for (auto k : out.kept) out.kept_count += k;
  if (renormalize) {
    double s = 0.0;
    for (auto v : out.alpha_hat) s += v;
    if (s > 0.0)
      for (auto& v : out.alpha_hat) v = static_cast<S>(v / s);
  }
  return out;
}

// Keeps the k largest weights (ties broken toward the lower index), zeroes
// the rest. No renormalization, parallel to the literal attended sum.
template <typename S>
AttentionWeightsT<S> top_k_select(std::span<const S> alpha, int k) {
  const auto n = static_cast<std::int64_t>(alpha.size());
  if (k < 1 || k > n)
    throw ConfigError("top_k: k must lie in [1, " + std::to_string(n) +
                      "], got " + std::to_string(k));
  std::vector<std::int64_t> order(alpha.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::int64_t a, std::int64_t b) {
                     return alpha[static_cast<std::size_t>(a)] >
                            alpha[static_cast<std::size_t>(b)];
                   });
  AttentionWeightsT<S> out;
  out.alpha_hat.assign(alpha.size(), S(0));
  out.kept.assign(alpha.size(), 0);
  for (int i = 0; i < k; ++i) {
    auto idx = static_cast<std::size_t>(order[static_cast<std::size_t>(i)]);
    out.alpha_hat[idx] = alpha[idx];
    out.kept[idx] = 1;
  }
  out.kept_count = k;
  return out;
}

// f_hat = sum_i alpha_hat_i * f^T_i. No renormalization here; masked weights
// enter exactly as given.
template <typename S>
std::vector<S> attend(std::span<const S> alpha_hat,
                      std::span<const S> teacher_rows, std::int64_t n,
                      std::int64_t d) {
  if (static_cast<std::int64_t>(alpha_hat.size()) != n ||
      static_cast<std::int64_t>(teacher_rows.size()) != n * d)
    throw DimensionError("attend: dimension mismatch");
  std::vector<S> out(static_cast<std::size_t>(d), S(0));
  for (std::int64_t i = 0; i < n; ++i) {
    S w = alpha_hat[static_cast<std::size_t>(i)];
    if (w == S(0)) continue;
    const S* r = teacher_rows.data() + i * d;
    for (std::int64_t j = 0; j < d; ++j) out[static_cast<std::size_t>(j)] += w * r[j];
  }
  return out;
}

// L_total = L_task + lambda * L_dist (recorded when inputs are).
template <typename S>
TensorT<S> total_loss(const TensorT<S>& task, const TensorT<S>& dist, S lambda) {
  if (task.numel() != 1 || dist.numel() != 1)
    throw ContractError("total_loss expects scalar losses");
  return add_scaled(task, dist, lambda);
}

// Mean over samples and feature dimensions of the population variance
// across the n rows.
template <typename S>
double representation_variance(const StochasticTeacherSetT<S>& set) {
  if (set.n < 2)
    throw ContractError("representation_variance requires n >= 2 rows");
  double total = 0.0;
  for (std::int64_t b = 0; b < set.batch; ++b) {
    for (std::int64_t j = 0; j < set.d; ++j) {
      double mean = 0.0;
      for (std::int64_t i = 0; i < set.n; ++i)
        mean += static_cast<double>(set.row(b, i)[static_cast<std::size_t>(j)]);
      mean /= static_cast<double>(set.n);
      double var = 0.0;
      for (std::int64_t i = 0; i < set.n; ++i) {
        double dlt =
            static_cast<double>(set.row(b, i)[static_cast<std::size_t>(j)]) -
            mean;
        var += dlt * dlt;
      }
      total += var / static_cast<double>(set.n);
    }
  }
  return total / static_cast<double>(set.batch * set.d);
}

// Per-step SGKD summary for the diagnostics CSV.
struct SgkdDiagnostics {
  double mean_kept = 0.0;       // kept rows per sample, batch mean
  double mean_alpha_max = 0.0;  // max attention weight per sample, batch mean
  double rep_variance = 0.0;    // representation variance of this batch
  std::vector<std::int64_t> alpha_histogram =
      std::vector<std::int64_t>(10, 0);  // pre-mask weights binned over [0,1]
};

template <typename S>
struct SgkdStepResultT {
  double l_task = 0.0;
  double l_dist = 0.0;
  double l_total = 0.0;
  std::map<std::string, TensorT<S>> grads;
  SgkdDiagnostics diag;
};

using SgkdStepResult = SgkdStepResultT<float>;

namespace detail {

template <typename S>
void accumulate_alpha_stats(std::span<const S> alpha, SgkdDiagnostics& diag,
                            double& amax_acc) {
  S mx = alpha.empty() ? S(0) : alpha[0];
  for (S v : alpha) {
    mx = std::max(mx, v);
    auto bin = static_cast<std::size_t>(
        std::min(9.0, std::max(0.0, static_cast<double>(v) * 10.0)));
    ++diag.alpha_histogram[bin];
  }
  amax_acc += static_cast<double>(mx);
}

template <typename S>
AttentionWeightsT<S> select_weights(const SSDConfig& cfg,
                                    std::span<const S> alpha) {
  switch (cfg.selection) {
    case SelectionScheme::Dynamic:
      return percentile_mask(alpha, cfg.epsilon, cfg.renormalize_after_mask);
    case SelectionScheme::TopK:
      return top_k_select(alpha, cfg.top_k);
    case SelectionScheme::DistillAll: {
      AttentionWeightsT<S> out;
      out.alpha_hat.assign(alpha.size(),
                           static_cast<S>(1.0 / static_cast<double>(alpha.size())));
      out.kept.assign(alpha.size(), 1);
      out.kept_count = static_cast<int>(alpha.size());
      return out;
    }
  }
  throw ContractError("unknown selection scheme");
}

}  // namespace detail

// One SGKD training step: generate the stochastic teacher set, run the
// student in Train mode, score and mask the teacher rows per sample, build
// the attended target, assemble L_task + lambda * L_dist, and backpropagate
// through the student only.
template <typename S>
SgkdStepResultT<S> sgkd_step(const ModelT<S>& student, const ModelT<S>& teacher,
                             const TensorT<S>& batch,
                             std::span<const int> labels,
                             std::span<const std::int64_t> sample_ids,
                             const SSDConfig& cfg, const RngStream& run_rng,
                             std::uint64_t step) {
  cfg.validate();
  if (!student.any_trainable())
    throw ContractError("sgkd_step: student has no trainable parameters");

  student.set_dropout_rate(cfg.p_student);
  RngStream student_rng = run_rng.fork(kStudentStreamTag);

  const bool distill_on = cfg.lambda > 0.0;
  StochasticTeacherSetT<S> fset;
  if (distill_on) {
    RngStream teacher_rng = run_rng.fork(kTeacherStreamTag);
    fset = generate_stochastic_representations(teacher, batch, cfg,
                                               teacher_rng, sample_ids);
  }

  SgkdStepResultT<S> res;
  TapeT<S> tape;
  {
    typename TapeT<S>::Scope scope(tape);
    ForwardCtx ctx{DropoutMode::Train, student_rng, sample_ids, step};
    ForwardResultT<S> fwd = student.forward(batch, ctx);
    TensorT<S> l_task = softmax_cross_entropy(fwd.logits, labels);
    res.l_task = static_cast<double>(l_task.item());

    TensorT<S> l_final = l_task;
    if (distill_on) {
      const std::int64_t bs = fset.batch, n = fset.n, d = fset.d;
      auto fs = fwd.features.data();
      double kept_acc = 0.0, amax_acc = 0.0;
      TensorT<S> l_dist;

      if (cfg.detach_attention) {
        TensorT<S> target = TensorT<S>::zeros({bs, d});
        auto tv = target.data_mut();
        for (std::int64_t b = 0; b < bs; ++b) {
          std::span<const S> fsb{fs.data() + b * d, static_cast<std::size_t>(d)};
          auto phi = similarity_scores<S>(fsb, fset.sample_rows(b), n, d);
          auto alpha = attention_weights<S>(phi, cfg.h);
          detail::accumulate_alpha_stats<S>(alpha, res.diag, amax_acc);
          auto sel = detail::select_weights<S>(cfg, alpha);
          kept_acc += sel.kept_count;
          auto fhat = attend<S>(sel.alpha_hat, fset.sample_rows(b), n, d);
          std::copy(fhat.begin(), fhat.end(), tv.data() + b * d);
        }
        l_dist = mse(fwd.features, target);
      } else {
        // Gradients flow through phi -> alpha -> f_hat; the selection mask
        // (and the optional renormalization factor) stay constants.
        std::vector<TensorT<S>> targets;
        targets.reserve(static_cast<std::size_t>(bs));
        for (std::int64_t b = 0; b < bs; ++b) {
          TensorT<S> rows_b = TensorT<S>::from_data(
              {n, d}, std::vector<S>(fset.sample_rows(b).begin(),
                                     fset.sample_rows(b).end()));
          TensorT<S> fsb = row(fwd.features, b);
          TensorT<S> phi_t = matvec(rows_b, fsb);
          TensorT<S> alpha_t = softmax_temp(phi_t, static_cast<S>(cfg.h));
          std::span<const S> av = alpha_t.data();
          detail::accumulate_alpha_stats<S>(av, res.diag, amax_acc);
          auto sel = detail::select_weights<S>(cfg, av);
          kept_acc += sel.kept_count;

          TensorT<S> weights;
          if (cfg.selection == SelectionScheme::DistillAll) {
            weights = TensorT<S>::from_data({n}, std::vector<S>(sel.alpha_hat));
          } else {
            std::vector<S> mask(sel.kept.size(), S(0));
            double ksum = 0.0;
            for (std::size_t i = 0; i < mask.size(); ++i)
              if (sel.kept[i]) ksum += static_cast<double>(av[i]);
            for (std::size_t i = 0; i < mask.size(); ++i)
              if (sel.kept[i])
                mask[i] = cfg.renormalize_after_mask && ksum > 0.0
                              ? static_cast<S>(1.0 / ksum)
                              : S(1);
            weights = mul_mask(alpha_t, std::span<const S>(mask));
          }
          targets.push_back(vecmat(weights, rows_b));
        }
        TensorT<S> target = stack_rows(targets);
        l_dist = mse(fwd.features, target);
      }

      res.l_dist = static_cast<double>(l_dist.item());
      res.diag.mean_kept = kept_acc / static_cast<double>(bs);
      res.diag.mean_alpha_max = amax_acc / static_cast<double>(bs);
      res.diag.rep_variance = n >= 2 ? representation_variance(fset) : 0.0;
      l_final = total_loss(l_task, l_dist, static_cast<S>(cfg.lambda));
    }

    if (cfg.logit_kl > 0.0) {
      // optional logit-level constraint: KL against the deterministic
      // (Eval-mode) teacher distribution at temperature 1
      ForwardCtx ev{DropoutMode::Eval, run_rng, {}, 0};
      ForwardResultT<S> tfwd = teacher.forward(batch, ev);
      auto tprobs64 = softmax_rows(tfwd.logits);
      std::vector<S> tprobs(tprobs64.begin(), tprobs64.end());
      TensorT<S> l_kl =
          kl_from_soft_targets(fwd.logits, std::span<const S>(tprobs));
      l_final = add_scaled(l_final, l_kl, static_cast<S>(cfg.logit_kl));
    }

    res.l_total = static_cast<double>(l_final.item());
    res.grads = tape.backward(l_final);
  }
  return res;
}

}  // namespace ssd
