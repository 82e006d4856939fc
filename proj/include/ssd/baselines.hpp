#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ssd/data.hpp"
#include "ssd/nn.hpp"
#include "ssd/ssd.hpp"

namespace ssd {

enum class CombinationRule { MajorityVote, ProbabilityAverage };

inline std::string to_string(CombinationRule r) {
  return r == CombinationRule::MajorityVote ? "majority_vote"
                                            : "probability_average";
}

// On-disk ensemble description (member checkpoints + combination rule),
// serialized as a JSON manifest by the CLI.
struct EnsembleSpec {
  std::vector<std::string> member_paths;
  CombinationRule rule = CombinationRule::MajorityVote;
};

// Per-sample combined predictions of the loaded members. MajorityVote takes
// the mode of the member argmaxes, ProbabilityAverage the argmax of the mean
// softmax; ties break toward the lowest class index in both rules.
std::vector<int> ensemble_predict(std::span<const Model* const> members,
                                  CombinationRule rule,
                                  const TimeSeriesDataset& ds,
                                  std::span<const std::int64_t> indices = {});

// Parameter-wise arithmetic mean of the member state dicts.
std::map<std::string, Tensor> uniform_soup(
    std::span<const std::map<std::string, Tensor>* const> members);

struct GreedySoupResult {
  std::map<std::string, Tensor> state;
  std::vector<std::size_t> chosen;       // member indices in acceptance order
  double validation_accuracy = 0.0;
};

// Orders members by validation accuracy (descending, ties toward the lower
// index), seeds the soup with the best one, then adds each member iff the
// averaged soup's validation accuracy does not decrease.
GreedySoupResult greedy_soup(
    std::span<const std::map<std::string, Tensor>* const> members,
    const std::function<double(const std::map<std::string, Tensor>&)>& val_accuracy);

// Unweighted row mean of the stochastic teacher set per sample, [B x d].
// The distill-all target that SGKD's masking deliberately departs from.
Tensor distill_all_target(const StochasticTeacherSet& set);

// top_k_select lives with the other weight-selection schemes in ssd.hpp.

// Tail-epoch weight averaging of a single run (stochastic weight averaging).
inline std::map<std::string, Tensor> swa_average(
    std::span<const std::map<std::string, Tensor>* const> tail_states) {
  return uniform_soup(tail_states);
}

}  // namespace ssd
