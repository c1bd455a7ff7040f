// Gumbel-Softmax gates, temperature annealing, gate tracing, and the
// JS-divergence analytics over gate trajectories.
#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mole/rng.hpp"
#include "mole/tensor.hpp"

namespace mole {

enum class GateMode { kStochastic, kDeterministic };

/// Trainable gate for one layer's expert bank.
struct GateState {
  Tensor logits;  // rank-1, one logit per expert
  std::size_t layer_index = 0;
  GateMode mode = GateMode::kStochastic;

  static GateState create(std::size_t num_experts, std::size_t layer_index,
                          GateMode mode = GateMode::kStochastic);
};

/// tau(0) = tau_start, tau(t >= anneal_steps) = tau_end, strictly positive
/// and non-increasing in between.
struct TemperatureSchedule {
  enum class Decay { kExponential, kLinear };

  double tau_start = 5.0;
  double tau_end = 0.1;
  std::size_t anneal_steps = 1000;
  Decay decay = Decay::kExponential;
};

double tau_at(const TemperatureSchedule& schedule, std::size_t step);

/// Gumbel noise vector eps_i = -log(-log(u_i)), u ~ Uniform(0,1), drawn from
/// a gumbel-noise stream.
std::vector<double> draw_gumbel_noise(std::size_t n, RngStream& rng);

/// softmax((z + noise) / tau). Differentiable in z; noise enters as a
/// constant. Used directly when the caller fixes the noise (evaluation,
/// finite-difference checks).
Tensor gumbel_apply(Tape& tape, const Tensor& logits, const std::vector<double>& noise, double tau);

/// Samples gate values: stochastic mode draws fresh Gumbel noise, the
/// deterministic mode uses zero noise and reports softmax(z / tau).
/// Throws ScheduleError when tau <= 0.
Tensor gumbel_sample(Tape& tape, const GateState& state, double tau, RngStream& rng);

/// sum_i gates[i] * expert_outputs[i].
Tensor aggregate(Tape& tape, const Tensor& gates, const std::vector<Tensor>& expert_outputs);

/// Jensen-Shannon divergence with natural log; symmetric, in [0, ln 2].
/// Throws ValidationError if an input is not a probability vector (sum off
/// by more than 1e-9 or a negative entry).
double js_divergence(std::span<const double> p, std::span<const double> q);

/// softmax of a plain vector (no tape); shared by trace analytics.
std::vector<double> softmax_values(std::span<const double> logits);

struct GateTraceRecord {
  std::size_t step;
  std::size_t layer;
  std::size_t expert;
  double logit;
  double gate;
  double tau;
};

/// Append-only record of gate dynamics, ordered by step.
class GateTrace {
 public:
  void append(const GateTraceRecord& record);

  const std::vector<GateTraceRecord>& records() const { return records_; }
  bool empty() const { return records_.empty(); }

  std::vector<std::size_t> layers() const;
  /// Sorted distinct steps recorded for `layer`.
  std::vector<std::size_t> steps_for_layer(std::size_t layer) const;
  /// Logit vector (indexed by expert) captured at (step, layer).
  std::vector<double> logits_at(std::size_t step, std::size_t layer) const;

  /// CSV with header step,layer,expert,logit,gate,tau; rows whose step index
  /// is a multiple of `stride` are emitted.
  void write_csv(std::ostream& out, std::size_t stride = 1) const;
  static GateTrace read_csv(std::istream& in);

 private:
  std::vector<GateTraceRecord> records_;
};

/// JSD between the noise-free softmax(z) snapshots at steps t and
/// t - interval, for every recorded step t that is a whole number of
/// intervals after the layer's first record.
std::vector<std::pair<std::size_t, double>> convergence_series(const GateTrace& trace,
                                                               std::size_t layer,
                                                               std::size_t interval = 10);

}  // namespace mole
