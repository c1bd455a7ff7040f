#include "mole/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mole/errors.hpp"

namespace mole {

using nlohmann::json;

// Stream salts, all derived from the run seed. Phase 2 draws init and data
// order from salts of its own so its weights are independent of phase 1
// under the same seed.
namespace salts {
constexpr std::uint64_t kHostInit = 0;
constexpr std::uint64_t kPhase1Init = 1;
constexpr std::uint64_t kPhase2Init = 2;
constexpr std::uint64_t kPhase1Batches = 1;
constexpr std::uint64_t kPhase2Batches = 2;
constexpr std::uint64_t kGateNoise = 0;
}  // namespace salts

const char* to_string(PrunePolicy policy) {
  switch (policy) {
    case PrunePolicy::kPerLayerTop1: return "per_layer_top1";
    case PrunePolicy::kBudgetedTop1: return "budgeted_top1";
  }
  return "unknown";
}

PrunePolicy prune_policy_from_string(const std::string& name) {
  if (name == "per_layer_top1") return PrunePolicy::kPerLayerTop1;
  if (name == "budgeted_top1") return PrunePolicy::kBudgetedTop1;
  throw ConfigError("unknown prune policy: '" + name + "'");
}

void TrainConfig::validate(std::size_t num_layers) const {
  if (lr <= 0.0) throw ConfigError("train: lr must be positive");
  if (gate_lr_multiplier <= 0.0) throw ConfigError("train: gate_lr_multiplier must be positive");
  if (batch_size == 0) throw ConfigError("train: batch_size must be >= 1");
  if (trace_stride == 0) throw ConfigError("train: trace_stride must be >= 1");
  if (eval_fraction < 0.0 || eval_fraction >= 1.0) {
    throw ConfigError("train: eval_fraction must lie in [0, 1)");
  }
  if (schedule.tau_start <= 0.0 || schedule.tau_end <= 0.0) {
    throw ConfigError("train: temperature endpoints must be positive");
  }
  if (schedule.tau_end > schedule.tau_start) {
    throw ConfigError("train: temperature must not increase over the schedule");
  }
  if (prune_policy == PrunePolicy::kBudgetedTop1 && rgcn_budget > num_layers) {
    throw ConfigError("train: rgcn_budget " + std::to_string(rgcn_budget) + " exceeds " +
                      std::to_string(num_layers) + " layers");
  }
  const bool annealing = schedule.tau_start != schedule.tau_end;
  if (annealing && phase1_steps > 0 && phase1_steps < schedule.anneal_steps) {
    throw ConfigError("train: phase1_steps " + std::to_string(phase1_steps) +
                      " does not cover the " + std::to_string(schedule.anneal_steps) +
                      "-step annealing schedule");
  }
}

// ---- dataset -----------------------------------------------------------------

Dataset Dataset::from_records(std::vector<SentenceRecord> records, double eval_fraction) {
  if (records.empty()) throw DataError("dataset: no records");
  if (eval_fraction < 0.0 || eval_fraction >= 1.0) {
    throw ConfigError("dataset: eval_fraction must lie in [0, 1)");
  }
  Dataset data;
  data.records = std::move(records);
  for (const SentenceRecord& record : data.records) {
    validate_record(record);
    for (int id : record.subword_ids) {
      data.min_vocab_size = std::max(data.min_vocab_size, static_cast<std::size_t>(id) + 1);
    }
    data.num_classes = std::max(data.num_classes, static_cast<std::size_t>(record.label) + 1);
  }
  std::size_t num_eval = static_cast<std::size_t>(static_cast<double>(data.records.size()) * eval_fraction);
  if (eval_fraction > 0.0 && num_eval == 0 && data.records.size() >= 2) num_eval = 1;
  const std::size_t num_train = data.records.size() - num_eval;
  for (std::size_t i = 0; i < num_train; ++i) data.train_indices.push_back(i);
  for (std::size_t i = num_train; i < data.records.size(); ++i) data.eval_indices.push_back(i);
  if (data.train_indices.empty()) throw DataError("dataset: empty training split");
  return data;
}

void check_graph_requirements(const std::vector<ExpertKind>& expert_kinds, const Dataset& data) {
  for (ExpertKind kind : expert_kinds) {
    if (!is_rgcn(kind)) continue;
    const GraphKind needed = graph_kind_for(kind);
    for (std::size_t i = 0; i < data.records.size(); ++i) {
      if (!data.records[i].has_graph(needed)) {
        throw DataError(std::string("dataset record ") + std::to_string(i) + " lacks the " +
                        to_string(needed) + " graph required by the " + to_string(kind) + " expert");
      }
    }
  }
}

namespace {

/// Deterministic epoch-shuffled batch cycling; refills with a fresh shuffle
/// whenever fewer than a full batch remains.
class BatchSampler {
 public:
  BatchSampler(std::vector<std::size_t> indices, std::size_t batch_size, RngStream& rng)
      : indices_(std::move(indices)), batch_size_(batch_size), rng_(rng) {
    if (indices_.empty()) throw DataError("batch sampler: empty index set");
  }

  std::vector<std::size_t> next() {
    std::vector<std::size_t> batch;
    batch.reserve(batch_size_);
    while (batch.size() < batch_size_) {
      if (queue_.empty()) {
        queue_ = indices_;
        rng_.shuffle(queue_);
        cursor_ = 0;
      }
      batch.push_back(queue_[cursor_++]);
      if (cursor_ == queue_.size()) queue_.clear();
    }
    return batch;
  }

 private:
  std::vector<std::size_t> indices_;
  std::size_t batch_size_;
  RngStream& rng_;
  std::vector<std::size_t> queue_;
  std::size_t cursor_ = 0;
};

std::vector<ExpertKind> model_bank_kinds(const MoleModel& model) {
  std::vector<ExpertKind> kinds;
  for (const Expert& expert : model.layers().front().bank()) kinds.push_back(expert.kind());
  return kinds;
}

double finite_or_throw(const Tensor& loss, const std::string& where) {
  const double v = loss.scalar_value();
  if (!std::isfinite(v)) throw TrainingFailure(where + ": loss diverged (non-finite)");
  return v;
}

std::size_t argmax_index(const std::vector<double>& values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

}  // namespace

// ---- phase 1 -----------------------------------------------------------------

Phase1Result phase1_train(MoleModel& model, const Dataset& data, const TrainConfig& config) {
  if (model.pruned()) throw StructuralError("phase1_train: model must be in full-mixture mode");
  config.validate(model.layers().size());
  check_graph_requirements(model_bank_kinds(model), data);

  RngStream gate_rng(config.seed, RngPurpose::kGumbelNoise, salts::kGateNoise);
  RngStream shuffle_rng(config.seed, RngPurpose::kDataShuffle, salts::kPhase1Batches);
  BatchSampler sampler(data.train_indices, config.batch_size, shuffle_rng);

  // Gate logits take a larger step than the dense adapter weights.
  std::vector<Tensor> gate_params;
  std::vector<Tensor> dense_params;
  for (const Tensor& p : model.trainable_parameters()) {
    bool is_gate = false;
    for (const MoleLayer& layer : model.layers()) {
      if (p.same_storage(layer.gate().logits)) is_gate = true;
    }
    (is_gate ? gate_params : dense_params).push_back(p);
  }
  SgdOptimizer optimizer(dense_params, config.lr, config.momentum);
  SgdOptimizer gate_optimizer(gate_params, config.lr * config.gate_lr_multiplier, config.momentum);

  Phase1Result result;
  const std::size_t num_layers = model.layers().size();
  for (std::size_t step = 0; step < config.phase1_steps; ++step) {
    const double tau = tau_at(config.schedule, step);
    Tape tape;

    // One stochastic gate draw per layer per step, shared across the batch.
    std::vector<Tensor> gates;
    gates.reserve(num_layers);
    for (std::size_t l = 0; l < num_layers; ++l) {
      GateState& state = model.layers()[l].gate();
      Tensor g = gumbel_sample(tape, state, tau, gate_rng);
      for (std::size_t e = 0; e < g.size(); ++e) {
        result.trace.append({step, l, e, state.logits.values()[e], g.values()[e], tau});
      }
      gates.push_back(std::move(g));
    }

    const std::vector<std::size_t> batch = sampler.next();
    Tensor total;
    for (std::size_t idx : batch) {
      const SentenceRecord& record = data.records[idx];
      Tensor logits = model.forward_mixture(tape, record, gates);
      Tensor ce = cross_entropy(tape, logits, static_cast<std::size_t>(record.label));
      total = total.defined() ? add(tape, total, ce) : ce;
    }
    Tensor loss = scale(tape, total, 1.0 / static_cast<double>(batch.size()));
    result.loss_per_step.push_back(
        finite_or_throw(loss, "phase1 step " + std::to_string(step)));

    tape.backward(loss);
    optimizer.step();
    gate_optimizer.step();
    optimizer.zero_grad();
    gate_optimizer.zero_grad();
  }

  for (std::size_t l = 0; l < num_layers; ++l) {
    result.final_logits.push_back(model.layers()[l].gate().logits.values());
  }
  return result;
}

// ---- pruning -----------------------------------------------------------------

std::vector<ExpertKind> PruneDecision::kinds() const {
  std::vector<ExpertKind> out;
  out.reserve(layers.size());
  for (const LayerChoice& choice : layers) out.push_back(choice.kept_kind);
  return out;
}

std::string PruneDecision::to_json() const {
  json layer_array = json::array();
  for (const LayerChoice& choice : layers) {
    layer_array.push_back({{"layer", choice.layer},
                           {"kept_index", choice.kept_index},
                           {"kept_kind", to_string(choice.kept_kind)},
                           {"logits", choice.logits}});
  }
  const json j{{"policy", to_string(policy)},
               {"rgcn_budget", rgcn_budget},
               {"rgcn_survivor_layers", rgcn_survivor_layers},
               {"layers", layer_array}};
  return j.dump(2);
}

PruneDecision PruneDecision::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("prune decision json: ") + e.what());
  }
  PruneDecision decision;
  try {
    decision.policy = prune_policy_from_string(j.at("policy").get<std::string>());
    decision.rgcn_budget = j.at("rgcn_budget").get<std::size_t>();
    decision.rgcn_survivor_layers = j.at("rgcn_survivor_layers").get<std::vector<std::size_t>>();
    for (const auto& item : j.at("layers")) {
      PruneDecision::LayerChoice choice;
      choice.layer = item.at("layer").get<std::size_t>();
      choice.kept_index = item.at("kept_index").get<std::size_t>();
      choice.kept_kind = expert_kind_from_string(item.at("kept_kind").get<std::string>());
      choice.logits = item.at("logits").get<std::vector<double>>();
      decision.layers.push_back(std::move(choice));
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("prune decision json: ") + e.what());
  }
  return decision;
}

PruneDecision prune(const std::vector<std::vector<double>>& final_logits,
                    const std::vector<ExpertKind>& bank_kinds, PrunePolicy policy,
                    std::size_t rgcn_budget) {
  if (final_logits.empty()) throw PruningError("prune: no logit snapshots");
  for (const std::vector<double>& logits : final_logits) {
    if (logits.size() != bank_kinds.size()) {
      throw PruningError("prune: snapshot has " + std::to_string(logits.size()) + " logits for " +
                         std::to_string(bank_kinds.size()) + " experts");
    }
  }

  PruneDecision decision;
  decision.policy = policy;
  const std::size_t num_layers = final_logits.size();

  if (policy == PrunePolicy::kPerLayerTop1) {
    for (std::size_t l = 0; l < num_layers; ++l) {
      const std::size_t best = argmax_index(final_logits[l]);  // ties: lowest index
      decision.layers.push_back({l, best, bank_kinds[best], final_logits[l]});
      if (is_rgcn(bank_kinds[best])) decision.rgcn_survivor_layers.push_back(l);
    }
    return decision;
  }

  decision.rgcn_budget = rgcn_budget;
  const auto mlp_it = std::find(bank_kinds.begin(), bank_kinds.end(), ExpertKind::kMlp);
  if (mlp_it == bank_kinds.end()) {
    throw PruningError("prune: budgeted policy needs an MLP expert in the bank");
  }
  const std::size_t mlp_index = static_cast<std::size_t>(mlp_it - bank_kinds.begin());

  struct Candidate {
    std::size_t layer;
    std::size_t expert;
    double logit;
  };
  std::vector<Candidate> candidates;
  for (std::size_t l = 0; l < num_layers; ++l) {
    for (std::size_t e = 0; e < bank_kinds.size(); ++e) {
      if (is_rgcn(bank_kinds[e])) candidates.push_back({l, e, final_logits[l][e]});
    }
  }
  std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
    if (a.logit != b.logit) return a.logit > b.logit;
    if (a.expert != b.expert) return a.expert < b.expert;
    return a.layer < b.layer;
  });

  std::vector<std::optional<std::size_t>> winner(num_layers);
  std::size_t taken = 0;
  for (const Candidate& c : candidates) {
    if (taken == rgcn_budget) break;
    if (winner[c.layer].has_value()) continue;
    winner[c.layer] = c.expert;
    ++taken;
  }
  for (std::size_t l = 0; l < num_layers; ++l) {
    const std::size_t kept = winner[l].value_or(mlp_index);
    decision.layers.push_back({l, kept, bank_kinds[kept], final_logits[l]});
    if (winner[l].has_value()) decision.rgcn_survivor_layers.push_back(l);
  }
  return decision;
}

// ---- evaluation ----------------------------------------------------------------

std::pair<double, double> evaluate(const MoleModel& model, const Dataset& data,
                                   const std::vector<std::size_t>& indices) {
  if (indices.empty()) return {0.0, 0.0};
  std::size_t correct = 0;
  double loss_sum = 0.0;
  Tape tape;
  NoGradGuard guard(tape);
  for (std::size_t idx : indices) {
    const SentenceRecord& record = data.records[idx];
    Tensor logits = model.forward_pruned(tape, record);
    loss_sum += cross_entropy(tape, logits, static_cast<std::size_t>(record.label)).scalar_value();
    if (argmax_index(logits.values()) == static_cast<std::size_t>(record.label)) ++correct;
  }
  const double n = static_cast<double>(indices.size());
  return {static_cast<double>(correct) / n, loss_sum / n};
}

// ---- phase 2 -------------------------------------------------------------------

MoleModel build_pruned_model(const ModelConfig& config, std::shared_ptr<const HostEncoder> host,
                             const std::vector<ExpertKind>& kind_per_layer, const TrainConfig& train,
                             const MoleModel* phase1_model) {
  RngStream init_rng(train.seed, RngPurpose::kWeightInit, salts::kPhase2Init);
  MoleModel model(config, std::move(host), kind_per_layer, init_rng);
  if (!train.reinit_phase2) {
    if (phase1_model == nullptr) {
      throw TrainingStateError("build_pruned_model: carrying weights over requires the phase-1 model");
    }
    std::map<std::string, Tensor> source;
    for (const auto& [name, tensor] : phase1_model->named_parameters(/*include_host=*/false)) {
      source.emplace(name, tensor);
    }
    for (auto& [name, tensor] : model.named_parameters(/*include_host=*/false)) {
      auto it = source.find(name);
      if (it == source.end()) {
        throw TrainingStateError("build_pruned_model: phase-1 model lacks tensor '" + name + "'");
      }
      Tensor dst = tensor;
      dst.values() = it->second.values();
    }
  }
  return model;
}

double TrainMetrics::final_eval_accuracy() const {
  for (auto it = rows.rbegin(); it != rows.rend(); ++it) {
    if (it->split == "dev") return it->accuracy;
  }
  throw AnalysisError("metrics: no dev rows");
}

std::string TrainMetrics::to_csv() const {
  std::ostringstream out;
  out << "epoch,split,accuracy,loss\n";
  char buffer[128];
  for (const MetricRow& row : rows) {
    std::snprintf(buffer, sizeof(buffer), "%zu,%s,%.17g,%.17g\n", row.epoch, row.split.c_str(),
                  row.accuracy, row.loss);
    out << buffer;
  }
  return out.str();
}

TrainMetrics phase2_train(MoleModel& model, const Dataset& data, const TrainConfig& config) {
  for (const MoleLayer& layer : model.layers()) {
    if (!layer.pruned()) throw StructuralError("phase2_train: model still carries gates");
  }
  config.validate(model.layers().size());
  std::vector<ExpertKind> kinds;
  for (const MoleLayer& layer : model.layers()) kinds.push_back(layer.bank().front().kind());
  check_graph_requirements(kinds, data);

  RngStream shuffle_rng(config.seed, RngPurpose::kDataShuffle, salts::kPhase2Batches);
  SgdOptimizer optimizer(model.trainable_parameters(), config.lr, config.momentum);

  TrainMetrics metrics;
  const auto [acc0, loss0] = evaluate(model, data, data.eval_indices);
  metrics.rows.push_back({0, "dev", acc0, loss0});

  for (std::size_t epoch = 1; epoch <= config.phase2_epochs; ++epoch) {
    std::vector<std::size_t> order = data.train_indices;
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      Tape tape;
      Tensor total;
      for (std::size_t i = start; i < end; ++i) {
        const SentenceRecord& record = data.records[order[i]];
        Tensor logits = model.forward_pruned(tape, record);
        if (argmax_index(logits.values()) == static_cast<std::size_t>(record.label)) ++correct;
        Tensor ce = cross_entropy(tape, logits, static_cast<std::size_t>(record.label));
        total = total.defined() ? add(tape, total, ce) : ce;
      }
      Tensor loss = scale(tape, total, 1.0 / static_cast<double>(end - start));
      loss_sum += finite_or_throw(loss, "phase2 epoch " + std::to_string(epoch) + " batch at " +
                                            std::to_string(start)) *
                  static_cast<double>(end - start);
      tape.backward(loss);
      optimizer.step();
      optimizer.zero_grad();
    }
    metrics.rows.push_back({epoch, "train", static_cast<double>(correct) / static_cast<double>(order.size()),
                            loss_sum / static_cast<double>(order.size())});
    const auto [acc, loss] = evaluate(model, data, data.eval_indices);
    metrics.rows.push_back({epoch, "dev", acc, loss});
  }
  return metrics;
}

// ---- ablation ------------------------------------------------------------------

void ExpertAssignment::validate(std::size_t num_layers) const {
  if (kind_per_layer.size() != num_layers) {
    throw ConfigError("assignment: covers " + std::to_string(kind_per_layer.size()) + " layers, model has " +
                      std::to_string(num_layers));
  }
}

std::string ExpertAssignment::to_json() const {
  json layers = json::array();
  for (std::size_t l = 0; l < kind_per_layer.size(); ++l) {
    layers.push_back({l, to_string(kind_per_layer[l])});
  }
  return json{{"layers", layers}}.dump(2);
}

ExpertAssignment ExpertAssignment::from_json(const std::string& text, std::size_t num_layers) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("assignment json: ") + e.what());
  }
  if (!j.is_object() || !j.contains("layers") || !j["layers"].is_array()) {
    throw ConfigError("assignment json: expected {\"layers\": [[layer, kind], ...]}");
  }
  ExpertAssignment assignment;
  assignment.kind_per_layer.assign(num_layers, ExpertKind::kMlp);
  std::vector<bool> seen(num_layers, false);
  for (const auto& entry : j["layers"]) {
    if (!entry.is_array() || entry.size() != 2 || !entry[0].is_number_unsigned() ||
        !entry[1].is_string()) {
      throw ConfigError("assignment json: each entry must be [layer, \"kind\"]");
    }
    const std::size_t layer = entry[0].get<std::size_t>();
    if (layer >= num_layers) {
      throw ConfigError("assignment json: layer " + std::to_string(layer) + " out of range for " +
                        std::to_string(num_layers) + " layers");
    }
    if (seen[layer]) {
      throw ConfigError("assignment json: layer " + std::to_string(layer) + " assigned twice");
    }
    seen[layer] = true;
    assignment.kind_per_layer[layer] = expert_kind_from_string(entry[1].get<std::string>());
  }
  for (std::size_t l = 0; l < num_layers; ++l) {
    if (!seen[l]) throw ConfigError("assignment json: layer " + std::to_string(l) + " not assigned");
  }
  return assignment;
}

ExpertAssignment ExpertAssignment::preset(const std::string& name, std::size_t num_layers) {
  ExpertAssignment assignment;
  auto fill = [&](ExpertKind kind) { assignment.kind_per_layer.assign(num_layers, kind); };
  if (name == "all-mlp") {
    fill(ExpertKind::kMlp);
  } else if (name == "all-syntactic") {
    fill(ExpertKind::kSyntactic);
  } else if (name == "all-semantic") {
    fill(ExpertKind::kSemantic);
  } else if (name == "all-sequential") {
    fill(ExpertKind::kSequential);
  } else if (name == "staged") {
    // Position information at the bottom, syntax in the middle, semantics on
    // top, split as evenly as thirds allow.
    const auto third = [&](double f) {
      return static_cast<std::size_t>(std::llround(f * static_cast<double>(num_layers)));
    };
    const std::size_t b1 = third(1.0 / 3.0), b2 = third(2.0 / 3.0);
    for (std::size_t l = 0; l < num_layers; ++l) {
      if (l < b1) {
        assignment.kind_per_layer.push_back(ExpertKind::kSequential);
      } else if (l < b2) {
        assignment.kind_per_layer.push_back(ExpertKind::kSyntactic);
      } else {
        assignment.kind_per_layer.push_back(ExpertKind::kSemantic);
      }
    }
  } else {
    throw ConfigError("unknown assignment preset: '" + name + "'");
  }
  return assignment;
}

TrainMetrics ablation_train(MoleModel& model, const Dataset& data, const TrainConfig& config) {
  return phase2_train(model, data, config);
}

// ---- synthetic task -------------------------------------------------------------

namespace {

constexpr int kClsId = 0;
constexpr int kSepId = 1;
constexpr std::size_t kPieceSlots = 8;

bool word_has_two_pieces(std::size_t word_type) { return word_type % 5 == 3; }

}  // namespace

std::size_t synthetic_vocab_size(std::size_t vocab) { return 2 + vocab + kPieceSlots; }

int synthetic_word_class(const std::string& surface, std::size_t num_classes) {
  if (surface.size() < 2 || surface[0] != 'w') {
    throw ValidationError("synthetic surface form '" + surface + "' does not encode a word type");
  }
  const std::size_t type = std::stoull(surface.substr(1));
  return static_cast<int>(type % num_classes);
}

std::vector<SentenceRecord> make_synthetic_task(const SyntheticTaskConfig& config, RngStream& rng) {
  if (config.num_sentences == 0) throw ConfigError("synthetic task: num_sentences must be positive");
  if (config.num_classes < 2) throw ConfigError("synthetic task: need at least 2 classes");
  if (config.vocab < config.num_classes) {
    throw ConfigError("synthetic task: vocab must cover every class");
  }
  if (config.min_words < config.num_classes || config.max_words < config.min_words) {
    throw ConfigError("synthetic task: word-count range must fit one word per class");
  }

  std::vector<SentenceRecord> records;
  records.reserve(config.num_sentences);
  const std::size_t C = config.num_classes;

  for (std::size_t s = 0; s < config.num_sentences; ++s) {
    const int label = static_cast<int>(s % C);  // round-robin: exactly balanced
    const std::size_t n =
        config.min_words + rng.next_below(config.max_words - config.min_words + 1);

    // One word of every class, plus uniform extras; the multiset of classes
    // is then distributed identically for every label, so surface statistics
    // carry no label information.
    std::vector<std::size_t> word_types;
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t pool = config.vocab / C + (c < config.vocab % C ? 1 : 0);
      word_types.push_back(c + C * rng.next_below(pool));
    }
    for (std::size_t e = C; e < n; ++e) {
      word_types.push_back(rng.next_below(config.vocab));
    }

    // Shuffle surface order independently of the tree.
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);
    std::vector<std::size_t> types_in_order(n);
    std::size_t root_pos = 0;
    for (std::size_t pos = 0; pos < n; ++pos) {
      types_in_order[pos] = word_types[order[pos]];
      // The core word of the label's class becomes the root.
      if (order[pos] == static_cast<std::size_t>(label)) root_pos = pos;
    }

    SentenceRecord record;
    record.label = label;
    for (std::size_t pos = 0; pos < n; ++pos) {
      record.words.push_back("w" + std::to_string(types_in_order[pos]));
    }

    // Random tree rooted at the class-labeled core word. Attachment is
    // biased toward the root but otherwise uniform over nodes above the
    // depth cap, so word distance from the root varies across sentences.
    DependencyGraph syntactic;
    syntactic.kind = GraphKind::kSyntactic;
    syntactic.num_words = n;
    std::vector<std::size_t> depth_of(n, 0);
    std::vector<std::size_t> attachable{root_pos};
    for (std::size_t pos = 0; pos < n; ++pos) {
      if (pos == root_pos) continue;
      std::size_t parent;
      if (rng.next_uniform() < config.root_attach_prob) {
        parent = root_pos;
      } else {
        parent = attachable[rng.next_below(attachable.size())];
      }
      depth_of[pos] = depth_of[parent] + 1;
      if (depth_of[pos] < config.max_depth) attachable.push_back(pos);
      syntactic.edges.push_back({parent, pos});
    }

    // Semantic graph: a random predicate with 1-3 arguments, independent of
    // the label; words outside the star stay isolated.
    DependencyGraph semantic;
    semantic.kind = GraphKind::kSemantic;
    semantic.num_words = n;
    if (n >= 2) {
      const std::size_t pred = rng.next_below(n);
      std::vector<std::size_t> candidates;
      for (std::size_t pos = 0; pos < n; ++pos) {
        if (pos != pred) candidates.push_back(pos);
      }
      rng.shuffle(candidates);
      const std::size_t num_args = 1 + rng.next_below(std::min<std::size_t>(3, candidates.size()));
      for (std::size_t a = 0; a < num_args; ++a) semantic.edges.push_back({pred, candidates[a]});
    }

    record.graphs[GraphKind::kSyntactic] = std::move(syntactic);
    record.graphs[GraphKind::kSemantic] = std::move(semantic);
    record.graphs[GraphKind::kSequential] = build_sequential(n);
    record.graphs[GraphKind::kEdgeless] = build_edgeless(n);

    record.subword_ids.push_back(kClsId);
    record.alignment.word_of_subword.push_back(TokenAlignment::kNoWord);
    for (std::size_t pos = 0; pos < n; ++pos) {
      const std::size_t type = types_in_order[pos];
      record.subword_ids.push_back(static_cast<int>(2 + type));
      record.alignment.word_of_subword.push_back(static_cast<int>(pos));
      if (word_has_two_pieces(type)) {
        record.subword_ids.push_back(static_cast<int>(2 + config.vocab + type % kPieceSlots));
        record.alignment.word_of_subword.push_back(static_cast<int>(pos));
      }
    }
    record.subword_ids.push_back(kSepId);
    record.alignment.word_of_subword.push_back(TokenAlignment::kNoWord);
    record.alignment.num_subwords = record.subword_ids.size();

    validate_record(record);
    records.push_back(std::move(record));
  }
  return records;
}

std::string synthetic_conllu(const std::vector<SentenceRecord>& records) {
  std::vector<ConlluSentence> sentences;
  sentences.reserve(records.size());
  for (const SentenceRecord& record : records) {
    sentences.push_back({record.words, record.graph(GraphKind::kSyntactic)});
  }
  return to_conllu(sentences);
}

// ---- pipeline -------------------------------------------------------------------

PipelineResult run_pipeline(const ModelConfig& model_config, const TrainConfig& train_config,
                            const Dataset& data) {
  train_config.validate(model_config.host.num_layers);
  if (model_config.host.vocab_size < data.min_vocab_size) {
    throw DataError("pipeline: dataset uses subword ids up to " +
                    std::to_string(data.min_vocab_size - 1) + ", host vocab is " +
                    std::to_string(model_config.host.vocab_size));
  }
  if (model_config.num_classes < data.num_classes) {
    throw DataError("pipeline: dataset has " + std::to_string(data.num_classes) +
                    " classes, classifier has " + std::to_string(model_config.num_classes));
  }
  check_graph_requirements(model_config.expert_kinds, data);

  PipelineResult result;
  RngStream host_rng(train_config.seed, RngPurpose::kWeightInit, salts::kHostInit);
  auto host = std::make_shared<const HostEncoder>(model_config.host, host_rng);
  result.host_hash_before = host->weight_hash();

  RngStream adapter_rng(train_config.seed, RngPurpose::kWeightInit, salts::kPhase1Init);
  result.phase1_model = std::make_unique<MoleModel>(model_config, host, adapter_rng);

  result.phase1 = phase1_train(*result.phase1_model, data, train_config);
  result.decision = prune(result.phase1.final_logits, model_config.expert_kinds,
                          train_config.prune_policy, train_config.rgcn_budget);

  result.final_model = std::make_unique<MoleModel>(build_pruned_model(
      model_config, host, result.decision.kinds(), train_config, result.phase1_model.get()));
  result.metrics = phase2_train(*result.final_model, data, train_config);
  result.host_hash_after = host->weight_hash();
  return result;
}

}  // namespace mole
