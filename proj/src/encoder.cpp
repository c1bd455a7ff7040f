#include "mole/encoder.hpp"

#include <cmath>

#include "mole/checkpoint.hpp"
#include "mole/errors.hpp"

namespace mole {
namespace {

Tensor frozen_uniform(Shape shape, double bound, RngStream& rng) {
  Tensor t = Tensor::uniform(std::move(shape), bound, rng);
  t.freeze();
  return t;
}

// Xavier-uniform bound for the host's square-ish maps.
double xavier_bound(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

}  // namespace

// ---- HostEncoder -------------------------------------------------------------

HostEncoder::HostEncoder(const HostConfig& config, RngStream& rng) : config_(config) {
  if (config_.d_model % config_.num_heads != 0) {
    throw ConfigError("host: d_model " + std::to_string(config_.d_model) + " not divisible by " +
                      std::to_string(config_.num_heads) + " heads");
  }
  if (config_.vocab_size == 0 || config_.max_len == 0 || config_.num_layers == 0) {
    throw ConfigError("host: vocab_size, max_len, and num_layers must be positive");
  }
  const std::size_t d = config_.d_model;
  const std::size_t f = config_.ffn_dim();

  tok_embed_ = frozen_uniform({config_.vocab_size, d}, 0.05, rng);
  pos_embed_ = frozen_uniform({config_.max_len, d}, 0.05, rng);

  layers_.reserve(config_.num_layers);
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    HostLayerWeights w;
    const double ab = xavier_bound(d, d);
    auto frozen_zeros = [](std::size_t n) {
      Tensor t = Tensor::zeros({n});
      t.freeze();
      return t;
    };
    w.wq = frozen_uniform({d, d}, ab, rng);
    w.bq = frozen_zeros(d);
    w.wk = frozen_uniform({d, d}, ab, rng);
    w.bk = frozen_zeros(d);
    w.wv = frozen_uniform({d, d}, ab, rng);
    w.bv = frozen_zeros(d);
    w.wo = frozen_uniform({d, d}, ab, rng);
    w.bo = frozen_zeros(d);
    w.ln1_gamma = Tensor::full({d}, 1.0);
    w.ln1_gamma.freeze();
    w.ln1_beta = Tensor::zeros({d});
    w.ln1_beta.freeze();
    w.ffn_w1 = frozen_uniform({d, f}, xavier_bound(d, f), rng);
    w.ffn_b1 = Tensor::zeros({f});
    w.ffn_b1.freeze();
    w.ffn_w2 = frozen_uniform({f, d}, xavier_bound(f, d), rng);
    w.ffn_b2 = Tensor::zeros({d});
    w.ffn_b2.freeze();
    w.ln2_gamma = Tensor::full({d}, 1.0);
    w.ln2_gamma.freeze();
    w.ln2_beta = Tensor::zeros({d});
    w.ln2_beta.freeze();
    layers_.push_back(std::move(w));
  }
}

Tensor HostEncoder::embed(Tape& tape, const std::vector<int>& subword_ids) const {
  if (subword_ids.empty()) throw InputError("embed: empty input");
  if (subword_ids.size() > config_.max_len) {
    throw InputError("embed: input of " + std::to_string(subword_ids.size()) +
                     " subwords exceeds max length " + std::to_string(config_.max_len));
  }
  RowMixPlan plan;
  plan.num_out_rows = subword_ids.size();
  for (std::size_t i = 0; i < subword_ids.size(); ++i) {
    const int id = subword_ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) {
      throw InputError("embed: unknown vocabulary id " + std::to_string(id) + " at position " +
                       std::to_string(i));
    }
    plan.entries.push_back({i, static_cast<std::size_t>(id), 1.0});
  }
  Tensor tok = row_mix(tape, tok_embed_, plan);
  Tensor pos = slice_rows(tape, pos_embed_, 0, subword_ids.size());
  return add(tape, tok, pos);
}

Tensor HostEncoder::attention(Tape& tape, std::size_t layer, const Tensor& h) const {
  const HostLayerWeights& w = layers_.at(layer);
  const std::size_t heads = config_.num_heads;
  const std::size_t head_dim = config_.d_model / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));

  Tensor q = add_rowvec(tape, matmul(tape, h, w.wq), w.bq);
  Tensor k = add_rowvec(tape, matmul(tape, h, w.wk), w.bk);
  Tensor v = add_rowvec(tape, matmul(tape, h, w.wv), w.bv);

  std::vector<Tensor> contexts;
  contexts.reserve(heads);
  for (std::size_t head = 0; head < heads; ++head) {
    const std::size_t offset = head * head_dim;
    Tensor qh = slice_cols(tape, q, offset, head_dim);
    Tensor kh = slice_cols(tape, k, offset, head_dim);
    Tensor vh = slice_cols(tape, v, offset, head_dim);
    Tensor scores = scale(tape, matmul(tape, qh, transpose(tape, kh)), inv_sqrt);
    Tensor attn = softmax(tape, scores, /*axis=*/1);
    contexts.push_back(matmul(tape, attn, vh));
  }
  Tensor mixed = concat_cols(tape, contexts);
  Tensor projected = add_rowvec(tape, matmul(tape, mixed, w.wo), w.bo);
  return layer_norm(tape, add(tape, h, projected), w.ln1_gamma, w.ln1_beta);
}

Tensor HostEncoder::ffn(Tape& tape, std::size_t layer, const Tensor& h_attn) const {
  const HostLayerWeights& w = layers_.at(layer);
  Tensor hidden = relu(tape, add_rowvec(tape, matmul(tape, h_attn, w.ffn_w1), w.ffn_b1));
  return add_rowvec(tape, matmul(tape, hidden, w.ffn_w2), w.ffn_b2);
}

Tensor HostEncoder::finish_layer(Tape& tape, std::size_t layer, const Tensor& h_attn,
                                 const Tensor& ffn_and_adapter) const {
  const HostLayerWeights& w = layers_.at(layer);
  return layer_norm(tape, add(tape, h_attn, ffn_and_adapter), w.ln2_gamma, w.ln2_beta);
}

std::size_t HostEncoder::parameter_count() const {
  std::size_t total = 0;
  for (const auto& [name, tensor] : named_parameters()) total += tensor.size();
  return total;
}

std::vector<std::pair<std::string, Tensor>> HostEncoder::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> named;
  named.emplace_back("host.tok_embed", tok_embed_);
  named.emplace_back("host.pos_embed", pos_embed_);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const std::string base = "host.layer" + std::to_string(l);
    const HostLayerWeights& w = layers_[l];
    named.emplace_back(base + ".wq", w.wq);
    named.emplace_back(base + ".bq", w.bq);
    named.emplace_back(base + ".wk", w.wk);
    named.emplace_back(base + ".bk", w.bk);
    named.emplace_back(base + ".wv", w.wv);
    named.emplace_back(base + ".bv", w.bv);
    named.emplace_back(base + ".wo", w.wo);
    named.emplace_back(base + ".bo", w.bo);
    named.emplace_back(base + ".ln1_gamma", w.ln1_gamma);
    named.emplace_back(base + ".ln1_beta", w.ln1_beta);
    named.emplace_back(base + ".ffn_w1", w.ffn_w1);
    named.emplace_back(base + ".ffn_b1", w.ffn_b1);
    named.emplace_back(base + ".ffn_w2", w.ffn_w2);
    named.emplace_back(base + ".ffn_b2", w.ffn_b2);
    named.emplace_back(base + ".ln2_gamma", w.ln2_gamma);
    named.emplace_back(base + ".ln2_beta", w.ln2_beta);
  }
  return named;
}

std::uint64_t HostEncoder::weight_hash() const { return hash_named_tensors(named_parameters()); }

// ---- MoleLayer -----------------------------------------------------------------

MoleLayer::MoleLayer(std::vector<Expert> bank, GateState gate, double scale)
    : bank_(std::move(bank)), gate_(std::move(gate)), scale_(scale) {
  if (bank_.empty()) throw StructuralError("MoleLayer: empty expert bank");
  if (gate_->logits.size() != bank_.size()) {
    throw StructuralError("MoleLayer: " + std::to_string(gate_->logits.size()) + " gate logits for " +
                          std::to_string(bank_.size()) + " experts");
  }
}

MoleLayer::MoleLayer(Expert survivor, double scale) : scale_(scale) {
  bank_.push_back(std::move(survivor));
}

const GateState& MoleLayer::gate() const {
  if (!gate_) throw StructuralError("MoleLayer: pruned layer has no gate");
  return *gate_;
}

GateState& MoleLayer::gate() {
  if (!gate_) throw StructuralError("MoleLayer: pruned layer has no gate");
  return *gate_;
}

Tensor MoleLayer::adapter_output(Tape& tape, const Tensor& h_attn, const SentenceRecord& record,
                                 const std::optional<Tensor>& gates) const {
  Tensor pooled = mean_pool_words(tape, h_attn, record.alignment);
  Tensor mixed;
  if (pruned()) {
    if (gates.has_value()) throw StructuralError("MoleLayer: gates passed to a pruned layer");
    mixed = bank_.front().forward(tape, pooled, record);
  } else {
    if (!gates.has_value()) throw StructuralError("MoleLayer: mixture layer needs gate values");
    std::vector<Tensor> outputs;
    outputs.reserve(bank_.size());
    for (const Expert& expert : bank_) outputs.push_back(expert.forward(tape, pooled, record));
    mixed = aggregate(tape, *gates, outputs);
  }
  return mole::scale(tape, scatter_words(tape, mixed, record.alignment), scale_);
}

// ---- MoleModel -----------------------------------------------------------------

namespace {

// Zero head: with zero-initialized adapter up-projections the step-0 logits
// are exactly zero, so an untrained model scores ln(num_classes) loss and
// the head picks up gradient from the first step.
AffineWeights make_classifier(std::size_t d_model, std::size_t num_classes, RngStream&) {
  return AffineWeights::create_zero(d_model, num_classes);
}

void check_model_config(const ModelConfig& config) {
  if (config.num_classes < 2) throw ConfigError("model: num_classes must be >= 2");
  if (config.bottleneck == 0) throw ConfigError("model: bottleneck must be positive");
  if (config.expert_kinds.empty()) throw ConfigError("model: expert bank is empty");
  for (std::size_t i = 0; i < config.expert_kinds.size(); ++i) {
    for (std::size_t j = i + 1; j < config.expert_kinds.size(); ++j) {
      if (config.expert_kinds[i] == config.expert_kinds[j]) {
        throw ConfigError(std::string("model: duplicate expert kind '") +
                          to_string(config.expert_kinds[i]) + "' in bank");
      }
    }
  }
}

}  // namespace

MoleModel::MoleModel(const ModelConfig& config, std::shared_ptr<const HostEncoder> host,
                     RngStream& rng)
    : config_(config), host_(std::move(host)) {
  check_model_config(config_);
  const std::size_t d = config_.host.d_model;
  for (std::size_t l = 0; l < config_.host.num_layers; ++l) {
    std::vector<Expert> bank;
    bank.reserve(config_.expert_kinds.size());
    for (ExpertKind kind : config_.expert_kinds) {
      bank.push_back(Expert::make(kind, d, config_.bottleneck, rng));
    }
    layers_.emplace_back(std::move(bank), GateState::create(config_.expert_kinds.size(), l),
                         config_.adapter_scale);
  }
  classifier_ = make_classifier(d, config_.num_classes, rng);
}

MoleModel::MoleModel(const ModelConfig& config, std::shared_ptr<const HostEncoder> host,
                     const std::vector<ExpertKind>& kind_per_layer, RngStream& rng)
    : config_(config), host_(std::move(host)) {
  check_model_config(config_);
  if (kind_per_layer.size() != config_.host.num_layers) {
    throw ConfigError("model: " + std::to_string(kind_per_layer.size()) + " expert assignments for " +
                      std::to_string(config_.host.num_layers) + " layers");
  }
  const std::size_t d = config_.host.d_model;
  for (ExpertKind kind : kind_per_layer) {
    layers_.emplace_back(Expert::make(kind, d, config_.bottleneck, rng), config_.adapter_scale);
  }
  classifier_ = make_classifier(d, config_.num_classes, rng);
}

Tensor MoleModel::forward_impl(Tape& tape, const SentenceRecord& record,
                               const std::vector<Tensor>* layer_gates, bool use_adapters) const {
  Tensor h = host_->embed(tape, record.subword_ids);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    Tensor h_attn = host_->attention(tape, l, h);
    Tensor combined = host_->ffn(tape, l, h_attn);
    if (use_adapters) {
      std::optional<Tensor> gates;
      if (layer_gates != nullptr) gates = (*layer_gates)[l];
      Tensor adapter = layers_[l].adapter_output(tape, h_attn, record, gates);
      combined = add(tape, combined, adapter);
    }
    h = host_->finish_layer(tape, l, h_attn, combined);
  }
  Tensor first_token = slice_rows(tape, h, 0, 1);
  return add_rowvec(tape, matmul(tape, first_token, classifier_.w), classifier_.b);
}

Tensor MoleModel::forward_mixture(Tape& tape, const SentenceRecord& record,
                                  const std::vector<Tensor>& layer_gates) const {
  if (pruned()) throw StructuralError("forward_mixture: model is pruned");
  if (layer_gates.size() != layers_.size()) {
    throw StructuralError("forward_mixture: " + std::to_string(layer_gates.size()) +
                          " gate vectors for " + std::to_string(layers_.size()) + " layers");
  }
  return forward_impl(tape, record, &layer_gates, /*use_adapters=*/true);
}

Tensor MoleModel::forward_deterministic(Tape& tape, const SentenceRecord& record, double tau) const {
  std::vector<Tensor> gates;
  gates.reserve(layers_.size());
  for (const MoleLayer& layer : layers_) {
    gates.push_back(softmax(tape, scale(tape, layer.gate().logits, 1.0 / tau), /*axis=*/0));
  }
  return forward_impl(tape, record, &gates, /*use_adapters=*/true);
}

Tensor MoleModel::forward_pruned(Tape& tape, const SentenceRecord& record) const {
  for (const MoleLayer& layer : layers_) {
    if (!layer.pruned()) throw StructuralError("forward_pruned: model still carries gates");
  }
  return forward_impl(tape, record, nullptr, /*use_adapters=*/true);
}

Tensor MoleModel::forward_host_only(Tape& tape, const SentenceRecord& record) const {
  return forward_impl(tape, record, nullptr, /*use_adapters=*/false);
}

std::vector<Tensor> MoleModel::trainable_parameters() const {
  std::vector<Tensor> params;
  for (const auto& [name, tensor] : named_parameters(/*include_host=*/false)) {
    params.push_back(tensor);
  }
  return params;
}

std::vector<std::pair<std::string, Tensor>> MoleModel::named_parameters(bool include_host) const {
  std::vector<std::pair<std::string, Tensor>> named;
  if (include_host) named = host_->named_parameters();
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const std::string base = "adapter.layer" + std::to_string(l);
    for (const Expert& expert : layers_[l].bank()) {
      const auto expert_params = expert.named_parameters(base + "." + to_string(expert.kind()));
      named.insert(named.end(), expert_params.begin(), expert_params.end());
    }
    if (!layers_[l].pruned()) {
      named.emplace_back("gate.layer" + std::to_string(l) + ".logits", layers_[l].gate().logits);
    }
  }
  named.emplace_back("classifier.w", classifier_.w);
  named.emplace_back("classifier.b", classifier_.b);
  return named;
}

// ---- parameter accounting ------------------------------------------------------

ParameterReport trainable_parameter_report(const MoleModel& model) {
  ParameterReport report;
  report.host = model.host().parameter_count();
  for (const MoleLayer& layer : model.layers()) {
    for (const Expert& expert : layer.bank()) report.adapters += expert.parameter_count();
    if (!layer.pruned()) report.gates += layer.gate().logits.size();
  }
  report.classifier = model.classifier().w.size() + model.classifier().b.size();
  return report;
}

ParameterReport parameter_report_for_config(const ModelConfig& config,
                                            std::optional<std::size_t> rgcn_survivors) {
  const std::size_t d = config.host.d_model;
  const std::size_t f = config.host.ffn_dim();
  const std::size_t L = config.host.num_layers;

  ParameterReport report;
  report.host = config.host.vocab_size * d + config.host.max_len * d;
  // Per layer: q/k/v/o projections, two layer norms, and the FFN pair.
  report.host += L * (4 * (d * d + d) + 2 * 2 * d + (d * f + f) + (f * d + d));

  const std::size_t rgcn = rgcn_expert_parameter_count(d, config.bottleneck);
  const std::size_t mlp = mlp_expert_parameter_count(d, config.bottleneck);
  if (rgcn_survivors.has_value()) {
    if (*rgcn_survivors > L) throw ConfigError("parameter report: more RGCN survivors than layers");
    report.adapters = *rgcn_survivors * rgcn + (L - *rgcn_survivors) * mlp;
    report.gates = 0;
  } else {
    std::size_t per_layer = 0;
    for (ExpertKind kind : config.expert_kinds) per_layer += is_rgcn(kind) ? rgcn : mlp;
    report.adapters = L * per_layer;
    report.gates = L * config.expert_kinds.size();
  }
  report.classifier = d * config.num_classes + config.num_classes;
  return report;
}

}  // namespace mole
