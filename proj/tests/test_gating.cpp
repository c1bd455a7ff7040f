#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "mole/errors.hpp"
#include "mole/gating.hpp"
#include "support/fd_suite.hpp"
#include "support/stats.hpp"

using namespace mole;
using namespace mole::testing;

namespace {

double entropy(const std::vector<double>& p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

}  // namespace

TEST_CASE("deterministic mode with equal logits is uniform") {
  GateState state = GateState::create(4, 0, GateMode::kDeterministic);
  RngStream rng(1, RngPurpose::kGumbelNoise);
  for (double tau : {5.0, 1.0, 0.07}) {
    Tape tape;
    Tensor g = gumbel_sample(tape, state, tau, rng);
    for (double v : g.values()) CHECK(v == doctest::Approx(0.25).epsilon(1e-14));
  }
}

TEST_CASE("temperature must be positive") {
  GateState state = GateState::create(3, 0);
  RngStream rng(1, RngPurpose::kGumbelNoise);
  Tape tape;
  CHECK_THROWS_AS(gumbel_sample(tape, state, 0.0, rng), ScheduleError);
  CHECK_THROWS_AS(gumbel_sample(tape, state, -1.0, rng), ScheduleError);
}

TEST_CASE("near-zero temperature yields a one-hot gate at argmax(z + noise)") {
  RngStream rng(7, RngPurpose::kGumbelNoise);
  Tensor logits = Tensor::from_data({4}, {0.3, -0.2, 0.9, 0.1});
  for (int trial = 0; trial < 20; ++trial) {
    const std::vector<double> noise = draw_gumbel_noise(4, rng);
    std::size_t best = 0;
    for (std::size_t i = 1; i < 4; ++i) {
      if (logits.values()[i] + noise[i] > logits.values()[best] + noise[best]) best = i;
    }
    Tape tape;
    Tensor g = gumbel_apply(tape, logits, noise, 1e-4);
    CHECK(g.values()[best] > 1.0 - 1e-6);
  }
}

TEST_CASE("gates are strictly positive and sum to one") {
  RngStream noise_rng(11, RngPurpose::kGumbelNoise);
  RngStream value_rng(11, RngPurpose::kWeightInit);
  for (int trial = 0; trial < 300; ++trial) {
    GateState state = GateState::create(5, 0);
    for (double& z : state.logits.values()) z = value_rng.next_uniform_range(-4.0, 4.0);
    Tape tape;
    const double tau = 0.05 + value_rng.next_uniform() * 5.0;
    Tensor g = gumbel_sample(tape, state, tau, noise_rng);
    double sum = 0.0;
    for (double v : g.values()) {
      CHECK(v > 0.0);
      sum += v;
    }
    CHECK(std::abs(sum - 1.0) <= 1e-12);
  }
}

TEST_CASE("argmax frequencies over 100000 draws follow softmax(z)") {
  // z = [ln 2, 0] puts 2/3 of the argmax mass on expert 0 (Gumbel-max).
  RngStream rng(23, RngPurpose::kGumbelNoise);
  Tensor logits = Tensor::from_data({2}, {std::log(2.0), 0.0});
  const std::size_t draws = 100000;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < draws; ++i) {
    const std::vector<double> noise = draw_gumbel_noise(2, rng);
    if (logits.values()[0] + noise[0] > logits.values()[1] + noise[1]) ++hits;
  }
  const double freq = static_cast<double>(hits) / static_cast<double>(draws);
  CHECK(std::abs(freq - 2.0 / 3.0) < 0.01);
}

TEST_CASE("empirical selection frequencies pass a chi-square test at n=100000") {
  RngStream noise_rng(31, RngPurpose::kGumbelNoise);
  RngStream value_rng(31, RngPurpose::kWeightInit);
  const std::size_t draws = 100000;
  for (int vec = 0; vec < 10; ++vec) {
    std::vector<double> z(4);
    for (double& v : z) v = value_rng.next_uniform_range(-1.5, 1.5);
    const std::vector<double> expected = softmax_values(z);
    std::vector<std::size_t> observed(4, 0);
    for (std::size_t i = 0; i < draws; ++i) {
      const std::vector<double> noise = draw_gumbel_noise(4, noise_rng);
      std::size_t best = 0;
      for (std::size_t k = 1; k < 4; ++k) {
        if (z[k] + noise[k] > z[best] + noise[best]) best = k;
      }
      ++observed[best];
    }
    const double stat = chi_square_statistic(observed, expected, draws);
    const double p = chi_square_p_value(stat, 3);
    INFO("vector ", vec, " stat ", stat, " p ", p);
    CHECK(p > 0.01);
  }
}

TEST_CASE("tau_at endpoints and midpoint of the exponential schedule") {
  TemperatureSchedule schedule;
  CHECK(tau_at(schedule, 0) == 5.0);
  CHECK(tau_at(schedule, 1000) == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(tau_at(schedule, 5000) == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(tau_at(schedule, 500) == doctest::Approx(5.0 * std::sqrt(0.02)).epsilon(1e-12));
  CHECK(tau_at(schedule, 500) == doctest::Approx(0.7071).epsilon(1e-4));

  double previous = 1e300;
  for (std::size_t step = 0; step <= 1200; step += 10) {
    const double tau = tau_at(schedule, step);
    CHECK(tau > 0.0);
    CHECK(tau <= previous);
    previous = tau;
  }

  TemperatureSchedule linear{5.0, 0.1, 1000, TemperatureSchedule::Decay::kLinear};
  CHECK(tau_at(linear, 0) == 5.0);
  CHECK(tau_at(linear, 500) == doctest::Approx(2.55).epsilon(1e-12));
  CHECK(tau_at(linear, 1000) == doctest::Approx(0.1).epsilon(1e-15));
}

TEST_CASE("aggregate selects with one-hot gates and passes uniform mixtures through") {
  Tape tape;
  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from_data({2, 2}, {5, 6, 7, 8});
  Tensor one_hot = Tensor::from_data({2}, {0.0, 1.0});
  CHECK(aggregate(tape, one_hot, {a, b}).values() == b.values());

  Tensor uniform = Tensor::from_data({2}, {0.5, 0.5});
  Tensor mixed = aggregate(tape, uniform, {a, a});
  CHECK(mixed.values() == a.values());

  Tensor three = Tensor::from_data({3}, {0.2, 0.3, 0.5});
  CHECK_THROWS_AS(aggregate(tape, three, {a, b}), StructuralError);
}

TEST_CASE("gradient through gumbel_apply and aggregate matches finite differences") {
  RngStream noise_rng(43, RngPurpose::kGumbelNoise);
  RngStream value_rng(43, RngPurpose::kWeightInit);
  const std::vector<double> noise = draw_gumbel_noise(3, noise_rng);

  Tensor z = random_tensor({3}, value_rng, 1.5);
  Tensor e0 = random_tensor({4, 2}, value_rng);
  Tensor e1 = random_tensor({4, 2}, value_rng);
  Tensor e2 = random_tensor({4, 2}, value_rng);
  Tensor proj = random_tensor({4, 2}, value_rng, 1.0, false);

  auto builder = [&](Tape& t) {
    Tensor g = gumbel_apply(t, z, noise, 0.7);
    return to_scalar(t, aggregate(t, g, {e0, e1, e2}), proj);
  };
  CHECK(check_gradients({z, e0, e1, e2}, builder, 1e-4).ok);
}

TEST_CASE("js_divergence identities, bounds, and the direct-KL cross-check") {
  const std::vector<double> p{0.2, 0.5, 0.3};
  CHECK(js_divergence(p, p) == 0.0);

  const std::vector<double> disjoint_p{1.0, 0.0};
  const std::vector<double> disjoint_q{0.0, 1.0};
  CHECK(js_divergence(disjoint_p, disjoint_q) == doctest::Approx(std::log(2.0)).epsilon(1e-15));

  // Independent KL summation for [0.5, 0.5] vs [0.9, 0.1].
  const std::vector<double> a{0.5, 0.5};
  const std::vector<double> b{0.9, 0.1};
  const std::vector<double> m{0.7, 0.3};
  double expected = 0.0;
  expected += 0.5 * (0.5 * std::log(0.5 / 0.7) + 0.5 * std::log(0.5 / 0.3));
  expected += 0.5 * (0.9 * std::log(0.9 / 0.7) + 0.1 * std::log(0.1 / 0.3));
  CHECK(std::abs(js_divergence(a, b) - expected) <= 1e-12);
  (void)m;

  const std::vector<double> half{0.5, 0.5};
  const std::vector<double> off{0.5, 0.6};
  const std::vector<double> negative{1.5, -0.5};
  const std::vector<double> shorter{1.0};
  CHECK_THROWS_AS(js_divergence(off, half), ValidationError);
  CHECK_THROWS_AS(js_divergence(negative, half), ValidationError);
  CHECK_THROWS_AS(js_divergence(shorter, half), ValidationError);

  RngStream rng(3, RngPurpose::kWeightInit);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> x(4), y(4);
    for (double& v : x) v = rng.next_uniform_range(-3, 3);
    for (double& v : y) v = rng.next_uniform_range(-3, 3);
    const double jsd = js_divergence(softmax_values(x), softmax_values(y));
    CHECK(jsd >= 0.0);
    CHECK(jsd <= std::log(2.0) + 1e-15);
    CHECK(std::abs(jsd - js_divergence(softmax_values(y), softmax_values(x))) <= 1e-15);
  }
}

TEST_CASE("adding a constant to all logits leaves softmax and decisions unchanged") {
  RngStream rng(5, RngPurpose::kWeightInit);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> z(4);
    for (double& v : z) v = rng.next_uniform_range(-2, 2);
    std::vector<double> shifted = z;
    const double c = rng.next_uniform_range(-5, 5);
    for (double& v : shifted) v += c;
    const auto p = softmax_values(z);
    const auto q = softmax_values(shifted);
    for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(p[i] - q[i]) <= 1e-12);
  }
}

TEST_CASE("entropy of the gate distribution is non-increasing as tau decreases") {
  RngStream noise_rng(61, RngPurpose::kGumbelNoise);
  RngStream value_rng(61, RngPurpose::kWeightInit);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor z = random_tensor({4}, value_rng, 2.0);
    const std::vector<double> noise = draw_gumbel_noise(4, noise_rng);
    double previous = 1e300;
    for (double tau : {5.0, 2.0, 1.0, 0.5, 0.2, 0.1}) {
      Tape tape;
      Tensor g = gumbel_apply(tape, z, noise, tau);
      const double h = entropy(g.values());
      CHECK(h <= previous + 1e-12);
      previous = h;
    }
  }
}

TEST_CASE("gate trace csv round trip and stride") {
  GateTrace trace;
  for (std::size_t step = 0; step < 6; ++step) {
    for (std::size_t e = 0; e < 2; ++e) {
      trace.append({step, 0, e, 0.1 * static_cast<double>(step), 0.5, 1.0});
    }
  }
  std::ostringstream out;
  trace.write_csv(out);
  std::istringstream in(out.str());
  GateTrace back = GateTrace::read_csv(in);
  REQUIRE(back.records().size() == trace.records().size());
  CHECK(back.records()[7].logit == trace.records()[7].logit);

  std::ostringstream strided;
  trace.write_csv(strided, 2);
  std::istringstream in2(strided.str());
  CHECK(GateTrace::read_csv(in2).records().size() == 6);

  GateTrace bad;
  bad.append({5, 0, 0, 0, 0, 1});
  CHECK_THROWS_AS(bad.append({4, 0, 0, 0, 0, 1}), AnalysisError);
}

TEST_CASE("convergence_series on constant, growing, and frozen traces") {
  // Constant logits: all-zero series.
  GateTrace constant;
  for (std::size_t step = 0; step < 40; ++step) {
    constant.append({step, 0, 0, 1.0, 0.5, 1.0});
    constant.append({step, 0, 1, -1.0, 0.5, 1.0});
  }
  for (const auto& [step, jsd] : convergence_series(constant, 0)) CHECK(jsd == 0.0);

  // One logit grows linearly: positive series that decays as softmax saturates.
  GateTrace growing;
  for (std::size_t step = 0; step < 200; ++step) {
    growing.append({step, 0, 0, 0.05 * static_cast<double>(step), 0.0, 1.0});
    growing.append({step, 0, 1, 0.0, 0.0, 1.0});
  }
  const auto series = convergence_series(growing, 0);
  REQUIRE(series.size() == 19);
  CHECK(series.front().first == 10);
  for (std::size_t i = 0; i < series.size(); ++i) CHECK(series[i].second > 0.0);
  CHECK(series.back().second < series.front().second);

  // Frozen after step k: zero beyond k + interval.
  const std::size_t k = 60;
  GateTrace frozen;
  for (std::size_t step = 0; step < 200; ++step) {
    const double z = step < k ? 0.02 * static_cast<double>(step) : 0.02 * static_cast<double>(k);
    frozen.append({step, 2, 0, z, 0.0, 1.0});
    frozen.append({step, 2, 1, 0.5, 0.0, 1.0});
  }
  for (const auto& [step, jsd] : convergence_series(frozen, 2)) {
    if (step >= k + 10) CHECK(jsd == 0.0);
  }

  CHECK_THROWS_AS(convergence_series(constant, 7), AnalysisError);
  GateTrace tiny;
  tiny.append({0, 0, 0, 0.0, 0.0, 1.0});
  CHECK_THROWS_AS(convergence_series(tiny, 0), AnalysisError);
}
