// Frozen transformer encoder host with mixture-of-experts adapters inserted
// in parallel to each FFN sublayer, plus the classification head.
//
// Layer wiring (post-norm residuals):
//   h_attn = LN1(h + MultiHeadAttn(h))
//   out    = LN2(h_attn + FFN(h_attn) + scale * Adapter(h_attn))
// The adapter path pools subword rows to word level, runs the gated expert
// bank over the sentence graphs, and scatters the mix back to subword rows
// (special tokens receive zeros). Host weights are frozen at construction
// and never accumulate gradient.
#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mole/expert.hpp"
#include "mole/gating.hpp"
#include "mole/graph.hpp"
#include "mole/tensor.hpp"

namespace mole {

struct HostConfig {
  std::size_t num_layers = 4;
  std::size_t d_model = 32;
  std::size_t num_heads = 2;
  std::size_t ffn_hidden = 0;  // 0 means 4 * d_model
  std::size_t vocab_size = 64;
  std::size_t max_len = 64;

  std::size_t ffn_dim() const { return ffn_hidden == 0 ? 4 * d_model : ffn_hidden; }
};

struct HostLayerWeights {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln1_gamma, ln1_beta;
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  Tensor ln2_gamma, ln2_beta;
};

/// Randomly initialized frozen encoder. Deterministic given (config, rng).
class HostEncoder {
 public:
  HostEncoder(const HostConfig& config, RngStream& rng);

  const HostConfig& config() const { return config_; }

  /// Token + learned position embeddings. Throws InputError on unknown ids
  /// or inputs longer than max_len.
  Tensor embed(Tape& tape, const std::vector<int>& subword_ids) const;

  /// Attention sublayer with its residual and norm: LN1(h + MHA(h)).
  Tensor attention(Tape& tape, std::size_t layer, const Tensor& h) const;

  /// Feed-forward transform of h_attn (no residual; the caller composes).
  Tensor ffn(Tape& tape, std::size_t layer, const Tensor& h_attn) const;

  /// Post-FFN residual and norm: LN2(h_attn + ffn_and_adapter).
  Tensor finish_layer(Tape& tape, std::size_t layer, const Tensor& h_attn,
                      const Tensor& ffn_and_adapter) const;

  std::size_t parameter_count() const;
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  /// FNV-1a over all weight bytes in named order; the freeze sentinel.
  std::uint64_t weight_hash() const;

 private:
  HostConfig config_;
  Tensor tok_embed_;
  Tensor pos_embed_;
  std::vector<HostLayerWeights> layers_;
};

/// Expert bank + gate for one layer, or a single surviving expert after
/// pruning (gate bypassed).
class MoleLayer {
 public:
  MoleLayer(std::vector<Expert> bank, GateState gate, double scale);
  MoleLayer(Expert survivor, double scale);

  bool pruned() const { return !gate_.has_value(); }
  const std::vector<Expert>& bank() const { return bank_; }
  std::vector<Expert>& bank() { return bank_; }
  const GateState& gate() const;
  GateState& gate();
  double scale() const { return scale_; }

  /// Word-pooled expert mix scattered back to subword rows and scaled.
  /// `gates` must be present iff the layer is not pruned.
  Tensor adapter_output(Tape& tape, const Tensor& h_attn, const SentenceRecord& record,
                        const std::optional<Tensor>& gates) const;

 private:
  std::vector<Expert> bank_;
  std::optional<GateState> gate_;
  double scale_;
};

struct ModelConfig {
  HostConfig host;
  std::size_t bottleneck = 8;
  std::size_t num_classes = 4;
  double adapter_scale = 4.0;
  std::vector<ExpertKind> expert_kinds = {ExpertKind::kSyntactic, ExpertKind::kSemantic,
                                          ExpertKind::kSequential, ExpertKind::kMlp};
};

/// Host + per-layer adapter banks + classifier on the first-token
/// representation of the last layer. Trainable set: adapters, gates,
/// classifier; nothing else.
class MoleModel {
 public:
  /// Full-mixture model: every layer carries the configured expert bank and
  /// a gate.
  MoleModel(const ModelConfig& config, std::shared_ptr<const HostEncoder> host, RngStream& rng);

  /// Pruned (or manually assigned) model: one expert per layer, no gates.
  MoleModel(const ModelConfig& config, std::shared_ptr<const HostEncoder> host,
            const std::vector<ExpertKind>& kind_per_layer, RngStream& rng);

  const ModelConfig& config() const { return config_; }
  const HostEncoder& host() const { return *host_; }
  std::shared_ptr<const HostEncoder> host_ptr() const { return host_; }
  std::vector<MoleLayer>& layers() { return layers_; }
  const std::vector<MoleLayer>& layers() const { return layers_; }
  bool pruned() const { return layers_.empty() ? false : layers_.front().pruned(); }

  /// Mixture forward with caller-sampled gate tensors, one per layer (the
  /// training loop draws one gate vector per layer per step).
  Tensor forward_mixture(Tape& tape, const SentenceRecord& record,
                         const std::vector<Tensor>& layer_gates) const;

  /// Mixture forward with deterministic gates softmax(z / tau).
  Tensor forward_deterministic(Tape& tape, const SentenceRecord& record, double tau) const;

  /// Forward for a pruned/assigned model (exactly one expert per layer).
  Tensor forward_pruned(Tape& tape, const SentenceRecord& record) const;

  /// The bare frozen host + classifier, adapters skipped entirely.
  Tensor forward_host_only(Tape& tape, const SentenceRecord& record) const;

  const AffineWeights& classifier() const { return classifier_; }
  AffineWeights& classifier() { return classifier_; }

  /// Adapters + gates + classifier, in stable order.
  std::vector<Tensor> trainable_parameters() const;
  std::vector<std::pair<std::string, Tensor>> named_parameters(bool include_host = true) const;

 private:
  Tensor forward_impl(Tape& tape, const SentenceRecord& record,
                      const std::vector<Tensor>* layer_gates, bool use_adapters) const;

  ModelConfig config_;
  std::shared_ptr<const HostEncoder> host_;
  std::vector<MoleLayer> layers_;
  AffineWeights classifier_;
};

/// Exact trainable-scalar accounting per group, with the trainable-to-total
/// ratio trainable / (host + trainable).
struct ParameterReport {
  std::size_t adapters = 0;
  std::size_t gates = 0;
  std::size_t classifier = 0;
  std::size_t host = 0;

  std::size_t trainable() const { return adapters + gates + classifier; }
  double ratio() const {
    return static_cast<double>(trainable()) / static_cast<double>(host + trainable());
  }
};

ParameterReport trainable_parameter_report(const MoleModel& model);

/// Closed-form report for configurations too large to instantiate: a full
/// mixture bank when `rgcn_survivors` is empty, otherwise a pruned model
/// with that many RGCN survivors and MLP experts elsewhere.
ParameterReport parameter_report_for_config(const ModelConfig& config,
                                            std::optional<std::size_t> rgcn_survivors = std::nullopt);

}  // namespace mole
