// Post-hoc analytics over run artifacts: the which-expert-per-layer heatmap
// table and per-layer gate-convergence reports from traced logits.
#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mole/gating.hpp"
#include "mole/training.hpp"

namespace mole {

/// Rows are layers, columns are runs; each cell names the kept expert kind.
struct HeatmapTable {
  std::vector<std::string> run_labels;
  std::size_t num_layers = 0;
  std::vector<std::vector<ExpertKind>> cells;  // [layer][run]

  std::string to_csv() const;
  static HeatmapTable from_csv(std::istream& in);
  std::string to_json() const;

  bool operator==(const HeatmapTable& other) const {
    return run_labels == other.run_labels && num_layers == other.num_layers && cells == other.cells;
  }
};

/// Tabulates kept experts across runs. All decisions must share a layer
/// count; labels has one entry per decision.
HeatmapTable build_heatmap(const std::vector<PruneDecision>& decisions,
                           const std::vector<std::string>& labels);

struct ConvergenceReport {
  struct LayerSeries {
    std::size_t layer;
    std::vector<std::pair<std::size_t, double>> series;  // (step, jsd)
    /// First step from which `window` consecutive series values stay below
    /// the threshold; absent if the layer never settles.
    std::optional<std::size_t> convergence_step;
  };

  std::vector<LayerSeries> layers;
  double threshold = 1e-3;
  std::size_t window = 5;
  std::size_t interval = 10;

  std::string to_csv() const;
  std::string summary_json() const;
};

/// Per-layer JSD series at the given interval plus the windowed convergence
/// step. Throws AnalysisError on an empty trace.
ConvergenceReport convergence_report(const GateTrace& trace, double threshold = 1e-3,
                                     std::size_t window = 5, std::size_t interval = 10);

}  // namespace mole
