#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "mole/analysis.hpp"
#include "mole/errors.hpp"

using namespace mole;

namespace {

PruneDecision decision_with(const std::vector<ExpertKind>& kinds) {
  PruneDecision decision;
  for (std::size_t l = 0; l < kinds.size(); ++l) {
    decision.layers.push_back({l, 0, kinds[l], {0.0, 0.0, 0.0, 0.0}});
  }
  return decision;
}

GateTrace trace_with_logit(const std::vector<double>& z0_per_step) {
  GateTrace trace;
  for (std::size_t step = 0; step < z0_per_step.size(); ++step) {
    trace.append({step, 0, 0, z0_per_step[step], 0.0, 1.0});
    trace.append({step, 0, 1, 0.0, 0.0, 1.0});
  }
  return trace;
}

}  // namespace

TEST_CASE("single all-mlp decision tabulates to a single column of mlp cells") {
  const HeatmapTable table = build_heatmap({decision_with(std::vector<ExpertKind>(4, ExpertKind::kMlp))},
                                           {"run0"});
  CHECK(table.num_layers == 4);
  REQUIRE(table.run_labels == std::vector<std::string>{"run0"});
  for (std::size_t l = 0; l < 4; ++l) CHECK(table.cells[l][0] == ExpertKind::kMlp);
}

TEST_CASE("two decisions differing at one layer differ in exactly one cell") {
  std::vector<ExpertKind> a(4, ExpertKind::kSyntactic);
  std::vector<ExpertKind> b = a;
  b[2] = ExpertKind::kSemantic;
  const HeatmapTable table = build_heatmap({decision_with(a), decision_with(b)}, {"a", "b"});
  std::size_t differing = 0;
  for (std::size_t l = 0; l < 4; ++l) {
    if (table.cells[l][0] != table.cells[l][1]) ++differing;
  }
  CHECK(differing == 1);
}

TEST_CASE("heatmap csv round trip is lossless") {
  std::vector<ExpertKind> a{ExpertKind::kMlp, ExpertKind::kSyntactic, ExpertKind::kSequential};
  std::vector<ExpertKind> b{ExpertKind::kSemantic, ExpertKind::kMlp, ExpertKind::kSyntactic};
  const HeatmapTable table = build_heatmap({decision_with(a), decision_with(b)}, {"seed1", "seed2"});
  std::istringstream in(table.to_csv());
  CHECK(HeatmapTable::from_csv(in) == table);
}

TEST_CASE("heatmap rejects inconsistent layer counts") {
  CHECK_THROWS_AS(build_heatmap({decision_with(std::vector<ExpertKind>(4, ExpertKind::kMlp)),
                                 decision_with(std::vector<ExpertKind>(3, ExpertKind::kMlp))},
                                {"a", "b"}),
                  AnalysisError);
  CHECK_THROWS_AS(build_heatmap({}, {}), AnalysisError);
}

TEST_CASE("frozen-gate trace converges at the first measurable step") {
  const GateTrace trace = trace_with_logit(std::vector<double>(200, 0.7));
  const ConvergenceReport report = convergence_report(trace);
  REQUIRE(report.layers.size() == 1);
  REQUIRE(report.layers[0].convergence_step.has_value());
  CHECK(*report.layers[0].convergence_step == 10);
  CHECK(report.layers[0].series.front().first == 10);

  // Steps advance by exactly the interval.
  for (std::size_t i = 1; i < report.layers[0].series.size(); ++i) {
    CHECK(report.layers[0].series[i].first - report.layers[0].series[i - 1].first == 10);
  }
}

TEST_CASE("a trajectory settling at step k is reported within one interval of k") {
  // Logit swings hard until step 140, then freezes.
  std::vector<double> z;
  for (std::size_t step = 0; step < 400; ++step) {
    z.push_back(step < 140 ? (step % 2 == 0 ? 0.0 : 1.5) : 0.75);
  }
  const ConvergenceReport report = convergence_report(trace_with_logit(z), 1e-3, 5, 10);
  REQUIRE(report.layers[0].convergence_step.has_value());
  CHECK(*report.layers[0].convergence_step >= 140);
  CHECK(*report.layers[0].convergence_step <= 150);
}

TEST_CASE("convergence step is monotone in the threshold") {
  std::vector<double> z;
  for (std::size_t step = 0; step < 300; ++step) {
    z.push_back(2.0 * (1.0 - std::exp(-static_cast<double>(step) / 60.0)));
  }
  const GateTrace trace = trace_with_logit(z);
  std::size_t previous = SIZE_MAX;
  for (double threshold : {1e-4, 1e-3, 1e-2, 0.1}) {
    const ConvergenceReport report = convergence_report(trace, threshold);
    REQUIRE(report.layers[0].convergence_step.has_value());
    CHECK(*report.layers[0].convergence_step <= previous);
    previous = *report.layers[0].convergence_step;
  }
}

TEST_CASE("empty trace is an analysis error") {
  CHECK_THROWS_AS(convergence_report(GateTrace{}), AnalysisError);
}

TEST_CASE("convergence csv and summary json are well formed") {
  const ConvergenceReport report = convergence_report(trace_with_logit(std::vector<double>(60, 1.0)));
  const std::string csv = report.to_csv();
  CHECK(csv.rfind("layer,step,jsd\n", 0) == 0);
  const std::string summary = report.summary_json();
  CHECK(summary.find("\"threshold\"") != std::string::npos);
  CHECK(summary.find("\"convergence_step\": 10") != std::string::npos);
}
