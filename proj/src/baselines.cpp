#include "ssd/baselines.hpp"

#include <algorithm>
#include <numeric>

#include "ssd/train.hpp"

namespace ssd {

std::vector<int> ensemble_predict(std::span<const Model* const> members,
                                  CombinationRule rule,
                                  const TimeSeriesDataset& ds,
                                  std::span<const std::int64_t> indices) {
  if (members.empty())
    throw ConfigError("ensemble_predict: empty ensemble");
  std::vector<std::int64_t> all;
  if (indices.empty()) {
    all.resize(static_cast<std::size_t>(ds.count));
    std::iota(all.begin(), all.end(), 0);
    indices = all;
  }
  const auto m = indices.size();
  const int k = ds.class_count;

  if (rule == CombinationRule::MajorityVote) {
    std::vector<int> votes(m * static_cast<std::size_t>(k), 0);
    for (const Model* member : members) {
      auto preds = predict(*member, ds, indices);
      for (std::size_t i = 0; i < m; ++i)
        ++votes[i * static_cast<std::size_t>(k) +
                static_cast<std::size_t>(preds[i])];
    }
    std::vector<int> out(m);
    for (std::size_t i = 0; i < m; ++i) {
      const int* v = votes.data() + i * static_cast<std::size_t>(k);
      int best = 0;
      for (int c = 1; c < k; ++c)
        if (v[c] > v[best]) best = c;  // ties keep the lowest class index
      out[i] = best;
    }
    return out;
  }

  std::vector<double> mean_probs(m * static_cast<std::size_t>(k), 0.0);
  for (const Model* member : members) {
    auto probs = predict_probs(*member, ds, indices);
    for (std::size_t i = 0; i < mean_probs.size(); ++i)
      mean_probs[i] += probs[i];
  }
  std::vector<int> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* p = mean_probs.data() + i * static_cast<std::size_t>(k);
    int best = 0;
    for (int c = 1; c < k; ++c)
      if (p[c] > p[best]) best = c;
    out[i] = best;
  }
  return out;
}

std::map<std::string, Tensor> uniform_soup(
    std::span<const std::map<std::string, Tensor>* const> members) {
  if (members.empty()) throw ConfigError("uniform_soup: no members");
  const auto& first = *members[0];
  std::map<std::string, Tensor> out;
  for (auto& [name, t] : first) out.emplace(name, Tensor::zeros(t.shape()));
  const float inv = 1.f / static_cast<float>(members.size());
  for (const auto* member : members) {
    if (member->size() != first.size())
      throw CheckpointError("uniform_soup: member parameter sets differ in size");
    for (auto& [name, t] : *member) {
      auto it = out.find(name);
      if (it == out.end())
        throw CheckpointError("uniform_soup: member has unknown parameter '" +
                              name + "'");
      if (it->second.shape() != t.shape())
        throw CheckpointError("uniform_soup: parameter '" + name +
                              "' shape mismatch");
      auto acc = it->second.data_mut();
      auto src = t.data();
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += inv * src[i];
    }
  }
  return out;
}

GreedySoupResult greedy_soup(
    std::span<const std::map<std::string, Tensor>* const> members,
    const std::function<double(const std::map<std::string, Tensor>&)>& val_accuracy) {
  if (members.empty()) throw ConfigError("greedy_soup: no members");

  std::vector<std::size_t> order(members.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> solo(members.size());
  for (std::size_t i = 0; i < members.size(); ++i)
    solo[i] = val_accuracy(*members[i]);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return solo[a] > solo[b]; });

  GreedySoupResult res;
  res.chosen.push_back(order[0]);
  std::vector<const std::map<std::string, Tensor>*> pot{members[order[0]]};
  res.state = uniform_soup(pot);
  res.validation_accuracy = solo[order[0]];

  for (std::size_t i = 1; i < order.size(); ++i) {
    pot.push_back(members[order[i]]);
    auto candidate = uniform_soup(pot);
    double acc = val_accuracy(candidate);
    if (acc >= res.validation_accuracy) {  // accept when not worse
      res.state = std::move(candidate);
      res.validation_accuracy = acc;
      res.chosen.push_back(order[i]);
    } else {
      pot.pop_back();
    }
  }
  return res;
}

Tensor distill_all_target(const StochasticTeacherSet& set) {
  if (set.n < 1) throw ContractError("distill_all_target: empty set");
  Tensor out = Tensor::zeros({set.batch, set.d});
  auto ov = out.data_mut();
  const float inv = 1.f / static_cast<float>(set.n);
  for (std::int64_t b = 0; b < set.batch; ++b) {
    float* dst = ov.data() + b * set.d;
    for (std::int64_t i = 0; i < set.n; ++i) {
      auto r = set.row(b, i);
      for (std::int64_t j = 0; j < set.d; ++j) dst[j] += inv * r[j];
    }
  }
  return out;
}

}  // namespace ssd
