#include "mole/analysis.hpp"

#include <algorithm>
#include <cstdio>
#include <istream>
#include <sstream>
#include <tuple>

#include <nlohmann/json.hpp>

#include "mole/errors.hpp"

namespace mole {

using nlohmann::json;

HeatmapTable build_heatmap(const std::vector<PruneDecision>& decisions,
                           const std::vector<std::string>& labels) {
  if (decisions.empty()) throw AnalysisError("build_heatmap: no decisions");
  if (labels.size() != decisions.size()) {
    throw AnalysisError("build_heatmap: " + std::to_string(labels.size()) + " labels for " +
                        std::to_string(decisions.size()) + " decisions");
  }
  HeatmapTable table;
  table.run_labels = labels;
  table.num_layers = decisions.front().layers.size();
  for (const PruneDecision& decision : decisions) {
    if (decision.layers.size() != table.num_layers) {
      throw AnalysisError("build_heatmap: decisions disagree on layer count (" +
                          std::to_string(decision.layers.size()) + " vs " +
                          std::to_string(table.num_layers) + ")");
    }
  }
  table.cells.assign(table.num_layers, std::vector<ExpertKind>(decisions.size(), ExpertKind::kMlp));
  for (std::size_t run = 0; run < decisions.size(); ++run) {
    for (std::size_t layer = 0; layer < table.num_layers; ++layer) {
      table.cells[layer][run] = decisions[run].layers[layer].kept_kind;
    }
  }
  return table;
}

std::string HeatmapTable::to_csv() const {
  std::ostringstream out;
  out << "layer,run,expert\n";
  for (std::size_t layer = 0; layer < num_layers; ++layer) {
    for (std::size_t run = 0; run < run_labels.size(); ++run) {
      out << layer << ',' << run_labels[run] << ',' << to_string(cells[layer][run]) << '\n';
    }
  }
  return out.str();
}

HeatmapTable HeatmapTable::from_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "layer,run,expert") {
    throw AnalysisError("heatmap csv: bad header");
  }
  HeatmapTable table;
  std::vector<std::tuple<std::size_t, std::string, ExpertKind>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::size_t c1 = line.find(',');
    const std::size_t c2 = line.rfind(',');
    if (c1 == std::string::npos || c2 == c1) throw AnalysisError("heatmap csv: malformed row '" + line + "'");
    const std::size_t layer = std::stoull(line.substr(0, c1));
    const std::string run = line.substr(c1 + 1, c2 - c1 - 1);
    const ExpertKind kind = expert_kind_from_string(line.substr(c2 + 1));
    rows.emplace_back(layer, run, kind);
    table.num_layers = std::max(table.num_layers, layer + 1);
    if (std::find(table.run_labels.begin(), table.run_labels.end(), run) == table.run_labels.end()) {
      table.run_labels.push_back(run);
    }
  }
  table.cells.assign(table.num_layers, std::vector<ExpertKind>(table.run_labels.size(), ExpertKind::kMlp));
  for (const auto& [layer, run, kind] : rows) {
    const std::size_t col = static_cast<std::size_t>(
        std::find(table.run_labels.begin(), table.run_labels.end(), run) - table.run_labels.begin());
    table.cells[layer][col] = kind;
  }
  return table;
}

std::string HeatmapTable::to_json() const {
  json runs = json::array();
  for (std::size_t run = 0; run < run_labels.size(); ++run) {
    json kept = json::array();
    for (std::size_t layer = 0; layer < num_layers; ++layer) {
      kept.push_back(to_string(cells[layer][run]));
    }
    runs.push_back({{"run", run_labels[run]}, {"kept_per_layer", kept}});
  }
  return json{{"num_layers", num_layers}, {"runs", runs}}.dump(2);
}

ConvergenceReport convergence_report(const GateTrace& trace, double threshold, std::size_t window,
                                     std::size_t interval) {
  if (trace.empty()) throw AnalysisError("convergence_report: empty trace");
  if (window == 0) throw AnalysisError("convergence_report: window must be >= 1");
  ConvergenceReport report;
  report.threshold = threshold;
  report.window = window;
  report.interval = interval;

  for (std::size_t layer : trace.layers()) {
    ConvergenceReport::LayerSeries series;
    series.layer = layer;
    series.series = convergence_series(trace, layer, interval);

    // Earliest point after which the series never reaches the threshold
    // again, provided at least `window` quiet points confirm it.
    const auto& points = series.series;
    std::size_t start = 0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      if (points[i].second >= threshold) start = i + 1;
    }
    if (start < points.size() && points.size() - start >= window) {
      series.convergence_step = points[start].first;
    }
    report.layers.push_back(std::move(series));
  }
  return report;
}

std::string ConvergenceReport::to_csv() const {
  std::ostringstream out;
  out << "layer,step,jsd\n";
  char buffer[96];
  for (const LayerSeries& layer : layers) {
    for (const auto& [step, jsd] : layer.series) {
      std::snprintf(buffer, sizeof(buffer), "%zu,%zu,%.17g\n", layer.layer, step, jsd);
      out << buffer;
    }
  }
  return out.str();
}

std::string ConvergenceReport::summary_json() const {
  json layers_json = json::array();
  for (const LayerSeries& layer : layers) {
    json entry{{"layer", layer.layer}, {"points", layer.series.size()}};
    if (layer.convergence_step.has_value()) {
      entry["convergence_step"] = *layer.convergence_step;
    } else {
      entry["convergence_step"] = nullptr;
    }
    layers_json.push_back(entry);
  }
  return json{{"threshold", threshold},
              {"window", window},
              {"interval", interval},
              {"layers", layers_json}}
      .dump(2);
}

}  // namespace mole
