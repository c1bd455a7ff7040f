#include "mole/gating.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

#include "mole/errors.hpp"

namespace mole {

GateState GateState::create(std::size_t num_experts, std::size_t layer_index, GateMode mode) {
  GateState state;
  state.logits = Tensor::zeros({num_experts}, /*requires_grad=*/true);
  state.layer_index = layer_index;
  state.mode = mode;
  return state;
}

double tau_at(const TemperatureSchedule& schedule, std::size_t step) {
  if (schedule.tau_start <= 0.0 || schedule.tau_end <= 0.0) {
    throw ScheduleError("temperature schedule endpoints must be positive");
  }
  if (step >= schedule.anneal_steps || schedule.anneal_steps == 0) return schedule.tau_end;
  const double t = static_cast<double>(step) / static_cast<double>(schedule.anneal_steps);
  if (schedule.decay == TemperatureSchedule::Decay::kLinear) {
    return schedule.tau_start + (schedule.tau_end - schedule.tau_start) * t;
  }
  return schedule.tau_start * std::pow(schedule.tau_end / schedule.tau_start, t);
}

std::vector<double> draw_gumbel_noise(std::size_t n, RngStream& rng) {
  if (rng.purpose() != RngPurpose::kGumbelNoise) {
    throw Error("draw_gumbel_noise: stream purpose must be gumbel-noise, got " +
                std::string(to_string(rng.purpose())));
  }
  std::vector<double> noise(n);
  for (double& e : noise) e = -std::log(-std::log(rng.next_open_uniform()));
  return noise;
}

Tensor gumbel_apply(Tape& tape, const Tensor& logits, const std::vector<double>& noise, double tau) {
  if (tau <= 0.0) throw ScheduleError("gumbel_apply: tau must be positive, got " + std::to_string(tau));
  if (logits.rank() != 1 || noise.size() != logits.size()) {
    throw DimensionError("gumbel_apply: " + std::to_string(noise.size()) + " noise values for logits " +
                         shape_to_string(logits.shape()));
  }
  Tensor noise_t = Tensor::from_data({noise.size()}, noise);
  Tensor shifted = add(tape, logits, noise_t);
  return softmax(tape, scale(tape, shifted, 1.0 / tau), /*axis=*/0);
}

Tensor gumbel_sample(Tape& tape, const GateState& state, double tau, RngStream& rng) {
  if (tau <= 0.0) throw ScheduleError("gumbel_sample: tau must be positive, got " + std::to_string(tau));
  if (state.mode == GateMode::kDeterministic) {
    return softmax(tape, scale(tape, state.logits, 1.0 / tau), /*axis=*/0);
  }
  return gumbel_apply(tape, state.logits, draw_gumbel_noise(state.logits.size(), rng), tau);
}

Tensor aggregate(Tape& tape, const Tensor& gates, const std::vector<Tensor>& expert_outputs) {
  if (gates.rank() != 1 || gates.size() != expert_outputs.size()) {
    throw StructuralError("aggregate: " + std::to_string(gates.size()) + " gates for " +
                          std::to_string(expert_outputs.size()) + " expert outputs");
  }
  return weighted_sum(tape, gates, expert_outputs);
}

namespace {

void check_distribution(std::span<const double> p, const char* name) {
  double sum = 0.0;
  for (double v : p) {
    if (v < 0.0) throw ValidationError(std::string("js_divergence: ") + name + " has a negative entry");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw ValidationError(std::string("js_divergence: ") + name + " sums to " + std::to_string(sum));
  }
}

// KL(p || m) with the 0 log 0 = 0 convention; m > 0 wherever p > 0.
double kl(std::span<const double> p, std::span<const double> m) {
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) acc += p[i] * std::log(p[i] / m[i]);
  }
  return acc;
}

}  // namespace

double js_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) {
    throw ValidationError("js_divergence: length mismatch " + std::to_string(p.size()) + " vs " +
                          std::to_string(q.size()));
  }
  check_distribution(p, "p");
  check_distribution(q, "q");
  std::vector<double> m(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) m[i] = 0.5 * (p[i] + q[i]);
  // Rounding can leave a tiny negative residue for near-identical inputs.
  return std::max(0.0, 0.5 * kl(p, m) + 0.5 * kl(q, m));
}

std::vector<double> softmax_values(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  double max_v = logits[0];
  for (double v : logits) max_v = std::max(max_v, v);
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - max_v);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

// ---- GateTrace ---------------------------------------------------------------

void GateTrace::append(const GateTraceRecord& record) {
  if (!records_.empty() && record.step < records_.back().step) {
    throw AnalysisError("GateTrace: steps must be appended monotonically (" +
                        std::to_string(record.step) + " after " + std::to_string(records_.back().step) +
                        ")");
  }
  records_.push_back(record);
}

std::vector<std::size_t> GateTrace::layers() const {
  std::vector<std::size_t> out;
  for (const GateTraceRecord& r : records_) {
    if (std::find(out.begin(), out.end(), r.layer) == out.end()) out.push_back(r.layer);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::size_t> GateTrace::steps_for_layer(std::size_t layer) const {
  std::vector<std::size_t> steps;
  for (const GateTraceRecord& r : records_) {
    if (r.layer == layer && (steps.empty() || steps.back() != r.step)) steps.push_back(r.step);
  }
  return steps;
}

std::vector<double> GateTrace::logits_at(std::size_t step, std::size_t layer) const {
  std::map<std::size_t, double> by_expert;
  for (const GateTraceRecord& r : records_) {
    if (r.step == step && r.layer == layer) by_expert[r.expert] = r.logit;
  }
  if (by_expert.empty()) {
    throw AnalysisError("GateTrace: no records for step " + std::to_string(step) + " layer " +
                        std::to_string(layer));
  }
  std::vector<double> logits;
  logits.reserve(by_expert.size());
  for (const auto& [expert, logit] : by_expert) {
    if (expert != logits.size()) {
      throw AnalysisError("GateTrace: expert indices at step " + std::to_string(step) +
                          " layer " + std::to_string(layer) + " are not contiguous");
    }
    logits.push_back(logit);
  }
  return logits;
}

void GateTrace::write_csv(std::ostream& out, std::size_t stride) const {
  if (stride == 0) throw AnalysisError("GateTrace::write_csv: stride must be >= 1");
  out << "step,layer,expert,logit,gate,tau\n";
  char buffer[160];
  for (const GateTraceRecord& r : records_) {
    if (r.step % stride != 0) continue;
    std::snprintf(buffer, sizeof(buffer), "%zu,%zu,%zu,%.17g,%.17g,%.17g\n", r.step, r.layer, r.expert,
                  r.logit, r.gate, r.tau);
    out << buffer;
  }
}

GateTrace GateTrace::read_csv(std::istream& in) {
  GateTrace trace;
  std::string line;
  if (!std::getline(in, line)) throw AnalysisError("GateTrace::read_csv: empty input");
  if (line != "step,layer,expert,logit,gate,tau") {
    throw AnalysisError("GateTrace::read_csv: unexpected header '" + line + "'");
  }
  std::size_t line_number = 1;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.empty()) continue;
    GateTraceRecord r{};
    std::istringstream row(line);
    char c1, c2, c3, c4, c5;
    if (!(row >> r.step >> c1 >> r.layer >> c2 >> r.expert >> c3 >> r.logit >> c4 >> r.gate >> c5 >>
          r.tau) ||
        c1 != ',' || c2 != ',' || c3 != ',' || c4 != ',' || c5 != ',') {
      throw AnalysisError("GateTrace::read_csv: malformed row at line " + std::to_string(line_number));
    }
    trace.append(r);
  }
  return trace;
}

std::vector<std::pair<std::size_t, double>> convergence_series(const GateTrace& trace,
                                                               std::size_t layer,
                                                               std::size_t interval) {
  if (interval == 0) throw AnalysisError("convergence_series: interval must be >= 1");
  const std::vector<std::size_t> steps = trace.steps_for_layer(layer);
  if (steps.empty()) {
    throw AnalysisError("convergence_series: trace has no records for layer " + std::to_string(layer));
  }
  std::vector<std::pair<std::size_t, double>> series;
  for (std::size_t step : steps) {
    const std::size_t first = steps.front();
    if (step == first || (step - first) % interval != 0) continue;
    const std::size_t prev = step - interval;
    if (!std::binary_search(steps.begin(), steps.end(), prev)) {
      throw AnalysisError("convergence_series: step " + std::to_string(step) + " lacks a snapshot at " +
                          std::to_string(prev));
    }
    const std::vector<double> now = softmax_values(trace.logits_at(step, layer));
    const std::vector<double> before = softmax_values(trace.logits_at(prev, layer));
    series.emplace_back(step, js_divergence(now, before));
  }
  if (series.empty()) {
    throw AnalysisError("convergence_series: trace for layer " + std::to_string(layer) +
                        " is too short for interval " + std::to_string(interval));
  }
  return series;
}

}  // namespace mole
