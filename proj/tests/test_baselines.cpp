#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "ssd/baselines.hpp"
#include "ssd/data.hpp"
#include "ssd/train.hpp"

using namespace ssd;

namespace {

TimeSeriesDataset toy_data(std::uint64_t seed = 3) {
  SynthSpec spec;
  spec.classes = 3;
  spec.channels = 1;
  spec.length = 24;
  spec.samples = 120;
  spec.sigma = 0.4;
  auto ds = synth_generate(spec, seed);
  return standardize(ds, compute_stats(ds));
}

Model toy_model(std::uint64_t seed) {
  MlpSpec spec;
  spec.channels = 1;
  spec.length = 24;
  spec.hidden = 16;
  spec.feature_dim = 8;
  spec.classes = 3;
  spec.dropout_p = 0.1;
  return build_mlp<float>(spec, RngStream(seed));
}

}  // namespace

TEST_SUITE_BEGIN("baselines");

TEST_CASE("ensemble_predict: single member equals the model's own predictions") {
  auto ds = toy_data();
  auto m = toy_model(1);
  std::vector<const Model*> members{&m};
  auto solo = predict(m, ds);
  for (auto rule :
       {CombinationRule::MajorityVote, CombinationRule::ProbabilityAverage}) {
    auto combined = ensemble_predict(members, rule, ds);
    CHECK(combined == solo);
  }
}

TEST_CASE("ensemble_predict: [A, A, B] majority votes A; ties break low") {
  auto ds = toy_data();
  auto a = toy_model(2);
  auto b = toy_model(3);
  std::vector<const Model*> members{&a, &a, &b};
  auto vote = ensemble_predict(members, CombinationRule::MajorityVote, ds);
  CHECK(vote == predict(a, ds));

  // two-member tie: the lower class index must win
  std::vector<const Model*> tie{&a, &b};
  auto pa = predict(a, ds);
  auto pb = predict(b, ds);
  auto tied = ensemble_predict(tie, CombinationRule::MajorityVote, ds);
  for (std::size_t i = 0; i < tied.size(); ++i)
    CHECK(tied[i] == std::min(pa[i], pb[i]));
}

TEST_CASE("ensemble_predict: probability average of identical members is exact") {
  auto ds = toy_data();
  auto m = toy_model(4);
  std::vector<const Model*> members{&m, &m, &m};
  CHECK(ensemble_predict(members, CombinationRule::ProbabilityAverage, ds) ==
        predict(m, ds));
}

TEST_CASE("ensemble_predict: empty ensemble is a config error") {
  auto ds = toy_data();
  std::vector<const Model*> none;
  CHECK_THROWS_AS(
      ensemble_predict(none, CombinationRule::MajorityVote, ds), ConfigError);
}

TEST_CASE("uniform_soup: identical members reproduce the model") {
  auto m = toy_model(5);
  auto sd = m.state_dict();
  std::vector<const std::map<std::string, Tensor>*> members{&sd, &sd, &sd};
  auto soup = uniform_soup(members);
  for (auto& [name, t] : sd)
    for (std::size_t i = 0; i < t.data().size(); ++i)
      CHECK(soup.at(name).data()[i] == doctest::Approx(t.data()[i]).epsilon(1e-6));
}

TEST_CASE("uniform_soup: two scalar members average to the midpoint") {
  std::map<std::string, Tensor> a, b;
  a.emplace("p", Tensor::scalar(3.f));
  b.emplace("p", Tensor::scalar(5.f));
  std::vector<const std::map<std::string, Tensor>*> members{&a, &b};
  CHECK(uniform_soup(members).at("p").item() == doctest::Approx(4.0));
}

TEST_CASE("uniform_soup: permutation invariant in member order") {
  auto a = toy_model(6).state_dict();
  auto b = toy_model(7).state_dict();
  auto c = toy_model(8).state_dict();
  std::vector<const std::map<std::string, Tensor>*> abc{&a, &b, &c};
  std::vector<const std::map<std::string, Tensor>*> cba{&c, &b, &a};
  auto s1 = uniform_soup(abc);
  auto s2 = uniform_soup(cba);
  for (auto& [name, t] : s1)
    for (std::size_t i = 0; i < t.data().size(); ++i)
      CHECK(t.data()[i] == doctest::Approx(s2.at(name).data()[i]).epsilon(1e-6));
}

TEST_CASE("uniform_soup: parameter name mismatch is a checkpoint error") {
  std::map<std::string, Tensor> a, b;
  a.emplace("p", Tensor::scalar(1.f));
  b.emplace("q", Tensor::scalar(2.f));
  std::vector<const std::map<std::string, Tensor>*> members{&a, &b};
  CHECK_THROWS_AS(uniform_soup(members), CheckpointError);
}

TEST_CASE("greedy_soup: single member returns that member") {
  auto sd = toy_model(9).state_dict();
  std::vector<const std::map<std::string, Tensor>*> members{&sd};
  auto res = greedy_soup(members, [](const auto&) { return 0.5; });
  CHECK(res.chosen == std::vector<std::size_t>{0});
  for (auto& [name, t] : sd) CHECK(res.state.at(name).bits_equal(t));
}

TEST_CASE("greedy_soup: keeps only the best when averaging hurts") {
  std::map<std::string, Tensor> a, b, c;
  a.emplace("p", Tensor::scalar(10.f));
  b.emplace("p", Tensor::scalar(0.f));
  c.emplace("p", Tensor::scalar(-10.f));
  std::vector<const std::map<std::string, Tensor>*> members{&a, &b, &c};
  // score: prefer p close to 10 -> only the first member helps
  auto score = [](const std::map<std::string, Tensor>& sd) {
    return 1.0 / (1.0 + std::abs(10.0 - sd.at("p").item()));
  };
  auto res = greedy_soup(members, score);
  CHECK(res.chosen == std::vector<std::size_t>{0});
  CHECK(res.state.at("p").item() == doctest::Approx(10.0));
}

TEST_CASE("greedy_soup: seeded 5-member run matches a brute-force replay") {
  RngStream rng(10);
  std::vector<std::map<std::string, Tensor>> member_states;
  for (int i = 0; i < 5; ++i) {
    std::map<std::string, Tensor> sd;
    sd.emplace("p", Tensor::scalar(static_cast<float>(rng.key(0).uniform64(
                        static_cast<std::uint64_t>(i)) * 8.0)));
    member_states.push_back(std::move(sd));
  }
  std::vector<const std::map<std::string, Tensor>*> members;
  for (auto& s : member_states) members.push_back(&s);
  auto score = [](const std::map<std::string, Tensor>& sd) {
    double p = sd.at("p").item();
    return -std::abs(p - 5.0);  // best at p = 5
  };
  auto res = greedy_soup(members, score);

  // independent replay of the published rule
  std::vector<std::size_t> order(5);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    return score(member_states[x]) > score(member_states[y]);
  });
  std::vector<std::size_t> chosen{order[0]};
  double mean = member_states[order[0]].at("p").item();
  double best_score = score(member_states[order[0]]);
  for (std::size_t i = 1; i < 5; ++i) {
    double cand_sum = mean * static_cast<double>(chosen.size()) +
                      member_states[order[i]].at("p").item();
    double cand_mean = cand_sum / static_cast<double>(chosen.size() + 1);
    std::map<std::string, Tensor> cand;
    cand.emplace("p", Tensor::scalar(static_cast<float>(cand_mean)));
    if (score(cand) >= best_score) {
      best_score = score(cand);
      mean = cand_mean;
      chosen.push_back(order[i]);
    }
  }
  CHECK(res.chosen == chosen);
  CHECK(res.state.at("p").item() == doctest::Approx(mean).epsilon(1e-5));
  CHECK(res.validation_accuracy == doctest::Approx(best_score));
}

TEST_CASE("greedy_soup: validation accuracy never drops below the best member") {
  auto ds = toy_data();
  std::vector<std::map<std::string, Tensor>> states;
  for (int i = 0; i < 4; ++i) states.push_back(toy_model(20 + i).state_dict());
  std::vector<const std::map<std::string, Tensor>*> members;
  for (auto& s : states) members.push_back(&s);

  Model probe = toy_model(20);
  auto val = [&](const std::map<std::string, Tensor>& sd) {
    probe.load_state_dict(sd);
    return evaluate(probe, ds).accuracy;
  };
  double best_single = 0.0;
  for (auto* m : members) best_single = std::max(best_single, val(*m));
  auto res = greedy_soup(members, val);
  CHECK(res.validation_accuracy >= best_single);
}

TEST_CASE("distill_all_target: single row, opposite rows, random mean oracle") {
  StochasticTeacherSet set;
  set.batch = 1;
  set.n = 1;
  set.d = 3;
  set.values = {1, 2, 3};
  auto t = distill_all_target(set);
  CHECK(t.at({0, 0}) == 1.f);
  CHECK(t.at({0, 2}) == 3.f);

  set.n = 2;
  set.values = {1, 2, 3, -1, -2, -3};
  auto z = distill_all_target(set);
  for (float v : z.data()) CHECK(v == 0.f);

  set.batch = 2;
  set.n = 3;
  set.d = 2;
  set.values.resize(12);
  RngStream rng(11);
  auto key = rng.key(0);
  for (std::size_t i = 0; i < 12; ++i)
    set.values[i] = static_cast<float>(key.uniform64(i));
  auto got = distill_all_target(set);
  for (std::int64_t b = 0; b < 2; ++b)
    for (std::int64_t j = 0; j < 2; ++j) {
      double mean = 0.0;
      for (std::int64_t i = 0; i < 3; ++i)
        mean += set.row(b, i)[static_cast<std::size_t>(j)] / 3.0;
      CHECK(got.at({b, j}) == doctest::Approx(mean).epsilon(1e-6));
    }
}

TEST_CASE("top_k_select: k = n keeps everything, k = 1 keeps the argmax") {
  std::vector<float> alpha = {0.1f, 0.5f, 0.2f, 0.2f};
  auto all = top_k_select<float>(alpha, 4);
  CHECK(all.alpha_hat == alpha);
  CHECK(all.kept_count == 4);

  auto one = top_k_select<float>(alpha, 1);
  CHECK(one.alpha_hat == std::vector<float>{0.f, 0.5f, 0.f, 0.f});

  // ties broken toward the lower index
  auto two = top_k_select<float>(alpha, 2);
  CHECK(two.alpha_hat == std::vector<float>{0.f, 0.5f, 0.2f, 0.f});

  CHECK_THROWS_AS(top_k_select<float>(alpha, 0), ConfigError);
  CHECK_THROWS_AS(top_k_select<float>(alpha, 5), ConfigError);
}

TEST_CASE("top_k_select: random case matches a sort-based oracle") {
  RngStream rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    auto key = rng.key(static_cast<std::uint64_t>(trial));
    std::vector<float> alpha(10);
    for (int i = 0; i < 10; ++i)
      alpha[static_cast<std::size_t>(i)] =
          static_cast<float>(key.uniform64(static_cast<std::uint64_t>(i)));
    auto got = top_k_select<float>(alpha, 3);

    std::vector<float> sorted(alpha);
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    float cut = sorted[2];
    int kept = 0;
    for (std::size_t i = 0; i < 10; ++i) {
      if (got.alpha_hat[i] != 0.f) {
        ++kept;
        CHECK(alpha[i] >= cut);
        CHECK(got.alpha_hat[i] == alpha[i]);
      }
    }
    CHECK(kept == 3);
  }
}

TEST_SUITE_END();
