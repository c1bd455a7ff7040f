// Two-phase training pipeline: mixture fine-tuning with annealed stochastic
// gates, importance-based pruning down to one expert per layer, and a
// restarted supervised fine-tune of the pruned model. Also the
// fixed-assignment ablation mode and the synthetic structure-sensitive task.
#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mole/encoder.hpp"
#include "mole/gating.hpp"
#include "mole/graph.hpp"

namespace mole {

enum class PrunePolicy { kPerLayerTop1, kBudgetedTop1 };

const char* to_string(PrunePolicy policy);
PrunePolicy prune_policy_from_string(const std::string& name);

struct TrainConfig {
  double lr = 5e-4;
  std::size_t batch_size = 16;
  std::size_t phase1_steps = 1000;
  std::size_t phase2_epochs = 5;
  std::size_t rgcn_budget = 2;
  PrunePolicy prune_policy = PrunePolicy::kBudgetedTop1;
  std::uint64_t seed = 1;
  double momentum = 0.0;
  /// Gate logits are a handful of scalars whose gradients are much smaller
  /// than the adapters'; plain SGD needs a larger step on them to reach the
  /// fast gate convergence adaptive optimizers show.
  double gate_lr_multiplier = 10.0;
  /// Restart semantics: phase 2 starts from freshly initialized adapters and
  /// classifier. Set false to carry phase-1 weights over for comparison.
  bool reinit_phase2 = true;
  double eval_fraction = 0.1;
  std::size_t trace_stride = 1;
  TemperatureSchedule schedule;

  void validate(std::size_t num_layers) const;
};

/// Sentence records plus the deterministic train/eval split (the trailing
/// eval_fraction of the file order is held out).
struct Dataset {
  std::vector<SentenceRecord> records;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> eval_indices;
  std::size_t min_vocab_size = 0;  // max subword id + 1
  std::size_t num_classes = 0;     // max label + 1

  static Dataset from_records(std::vector<SentenceRecord> records, double eval_fraction);
};

/// Throws DataError when a bank expert needs a graph kind some record lacks.
void check_graph_requirements(const std::vector<ExpertKind>& expert_kinds, const Dataset& data);

struct Phase1Result {
  GateTrace trace;
  std::vector<std::vector<double>> final_logits;  // [layer][expert]
  std::vector<double> loss_per_step;
};

/// Runs exactly config.phase1_steps optimizer steps on the full-mixture
/// model with stochastic gates and annealed temperature; gate noise is drawn
/// once per (step, layer) and shared across the batch. The trace records
/// every step. Throws TrainingFailure (with the step index) on divergence.
Phase1Result phase1_train(MoleModel& model, const Dataset& data, const TrainConfig& config);

struct PruneDecision {
  struct LayerChoice {
    std::size_t layer;
    std::size_t kept_index;
    ExpertKind kept_kind;
    std::vector<double> logits;
  };

  std::vector<LayerChoice> layers;
  PrunePolicy policy = PrunePolicy::kPerLayerTop1;
  std::size_t rgcn_budget = 0;
  std::vector<std::size_t> rgcn_survivor_layers;

  std::vector<ExpertKind> kinds() const;
  std::string to_json() const;
  static PruneDecision from_json(const std::string& text);
};

/// per_layer_top1 keeps the argmax-logit expert of each layer. budgeted_top1
/// ranks every (layer, RGCN expert) pair by logit, keeps the top
/// rgcn_budget layer-wise RGCN winners (at most one per layer), and assigns
/// MLP everywhere else. Ties break toward the lowest expert index, then the
/// lowest layer index.
PruneDecision prune(const std::vector<std::vector<double>>& final_logits,
                    const std::vector<ExpertKind>& bank_kinds, PrunePolicy policy,
                    std::size_t rgcn_budget);

struct MetricRow {
  std::size_t epoch;
  std::string split;
  double accuracy;
  double loss;
};

struct TrainMetrics {
  std::vector<MetricRow> rows;

  double final_eval_accuracy() const;
  std::string to_csv() const;
};

/// Accuracy and mean loss over the given record indices (no gradients).
std::pair<double, double> evaluate(const MoleModel& model, const Dataset& data,
                                   const std::vector<std::size_t>& indices);

/// One-expert-per-layer model for phase 2. With config.reinit_phase2 the
/// adapters and classifier come from a fresh weight-init stream; otherwise
/// the surviving experts and classifier keep the phase-1 values.
MoleModel build_pruned_model(const ModelConfig& config, std::shared_ptr<const HostEncoder> host,
                             const std::vector<ExpertKind>& kind_per_layer, const TrainConfig& train,
                             const MoleModel* phase1_model);

/// Supervised training of a pruned/assigned model. Emits an epoch-0 eval row
/// for the untrained model, then one train and one eval row per epoch.
TrainMetrics phase2_train(MoleModel& model, const Dataset& data, const TrainConfig& config);

/// Explicit layer -> expert-kind map for the ablation mode.
struct ExpertAssignment {
  std::vector<ExpertKind> kind_per_layer;

  void validate(std::size_t num_layers) const;
  std::string to_json() const;
  /// {"layers": [[layer, kind], ...]}; every layer exactly once.
  static ExpertAssignment from_json(const std::string& text, std::size_t num_layers);
  /// Presets: all-mlp, all-syntactic, all-semantic, all-sequential, and
  /// staged (sequential lower third, syntactic middle, semantic upper).
  static ExpertAssignment preset(const std::string& name, std::size_t num_layers);
};

/// Skips phase 1 and pruning; trains the fixed assignment exactly as phase 2.
TrainMetrics ablation_train(MoleModel& model, const Dataset& data, const TrainConfig& config);

// ---- synthetic structure-sensitive task -------------------------------------

struct SyntheticTaskConfig {
  std::size_t num_sentences = 0;
  std::size_t vocab = 32;  // word types; surface forms w0..w{vocab-1}
  std::size_t num_classes = 4;
  std::size_t min_words = 6;
  std::size_t max_words = 12;
  double root_attach_prob = 0.4;
  /// Depth cap of the random trees. Each relational sublayer propagates one
  /// hop, so deeper trees need more stacked graph layers to cover every
  /// word with the root's identity.
  std::size_t max_depth = 3;
};

/// Sentences over random trees where the label is the class of the tree's
/// root word (word class = type index mod num_classes). Every word of every
/// class appears with label-independent statistics, so the label is a
/// function of the tree alone; word order is shuffled independently of the
/// tree. Labels are assigned round-robin, hence exactly balanced.
std::vector<SentenceRecord> make_synthetic_task(const SyntheticTaskConfig& config, RngStream& rng);

/// Class encoded in a synthetic surface form ("w17" -> 17 mod num_classes).
int synthetic_word_class(const std::string& surface, std::size_t num_classes);

/// Total subword-id space the synthetic task uses (specials + words + pieces).
std::size_t synthetic_vocab_size(std::size_t vocab);

/// The syntactic trees of `records` in CoNLL-U form.
std::string synthetic_conllu(const std::vector<SentenceRecord>& records);

// ---- full pipeline ------------------------------------------------------------

struct PipelineResult {
  Phase1Result phase1;
  PruneDecision decision;
  TrainMetrics metrics;
  std::unique_ptr<MoleModel> phase1_model;
  std::unique_ptr<MoleModel> final_model;
  std::uint64_t host_hash_before = 0;
  std::uint64_t host_hash_after = 0;
};

/// phase1 -> prune -> phase2 end to end, deterministic in (config, data).
PipelineResult run_pipeline(const ModelConfig& model_config, const TrainConfig& train_config,
                            const Dataset& data);

}  // namespace mole
