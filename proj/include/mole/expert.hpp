// Per-layer expert bank: relational graph-convolution experts over a chosen
// graph kind, and the MLP expert for the edgeless case.
//
// An RGCN sublayer updates node i as
//   ReLU( sum_r sum_{j in N_i^r} W_r h_j / |N_i|  +  W_0 h_i  +  bias )
// with relations r in {child, parent} and |N_i| the node's total neighbor
// count across both relations. Nodes without neighbors receive only the
// self path. Every linear map carries its own bias parameter; the biases
// enter once, added after the relational sum.
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "mole/graph.hpp"
#include "mole/tensor.hpp"

namespace mole {

enum class ExpertKind { kSyntactic, kSemantic, kSequential, kMlp };

const char* to_string(ExpertKind kind);
ExpertKind expert_kind_from_string(const std::string& name);
/// Graph consumed by an expert kind; throws for kMlp (which needs none).
GraphKind graph_kind_for(ExpertKind kind);
bool is_rgcn(ExpertKind kind);

/// Forward-pass work tallies for the complexity accounting: edge_visits
/// grows as 2 * |E| per sublayer (each stored edge serves both relations),
/// node_visits as num_words per sublayer.
struct OpCounter {
  std::uint64_t edge_visits = 0;
  std::uint64_t node_visits = 0;

  void reset() { *this = OpCounter{}; }
};

/// One relational sublayer: child/parent relation maps plus the self-loop
/// map, each an affine transform in -> out.
struct RgcnSublayerWeights {
  Tensor w_child, b_child;
  Tensor w_parent, b_parent;
  Tensor w_self, b_self;

  static RgcnSublayerWeights create(std::size_t in_dim, std::size_t out_dim, RngStream& rng);
  std::size_t parameter_count() const;
};

struct AffineWeights {
  Tensor w, b;

  static AffineWeights create(std::size_t in_dim, std::size_t out_dim, RngStream& rng);
  static AffineWeights create_zero(std::size_t in_dim, std::size_t out_dim);
  std::size_t parameter_count() const;
};

/// Single relational update over `graph`; the workhorse of the RGCN expert,
/// exposed for direct testing against the per-node reference evaluation.
Tensor rgcn_sublayer_forward(Tape& tape, const Tensor& h, const DependencyGraph& graph,
                             const RgcnSublayerWeights& weights, OpCounter* counter = nullptr);

/// Graph expert: two relational sublayers d_model -> bottleneck -> bottleneck
/// followed by a shared linear up-projection back to d_model. The
/// up-projection starts at zero so a fresh adapter is the identity
/// contribution.
class RgcnExpert {
 public:
  RgcnExpert(GraphKind graph_kind, std::size_t d_model, std::size_t bottleneck, RngStream& rng);

  GraphKind graph_kind() const { return graph_kind_; }
  Tensor forward(Tape& tape, const Tensor& h_words, const DependencyGraph& graph) const;
  std::size_t parameter_count() const;
  std::vector<std::pair<std::string, Tensor>> named_parameters(const std::string& prefix) const;

  const OpCounter& op_counter() const { return counter_; }
  void reset_op_counter() const { counter_.reset(); }

  const std::array<RgcnSublayerWeights, 2>& sublayers() const { return sublayers_; }
  std::array<RgcnSublayerWeights, 2>& sublayers() { return sublayers_; }
  const AffineWeights& up() const { return up_; }
  AffineWeights& up() { return up_; }

 private:
  GraphKind graph_kind_;
  std::array<RgcnSublayerWeights, 2> sublayers_;
  AffineWeights up_;
  mutable OpCounter counter_;
};

/// Edgeless expert: two ReLU affine layers d_model -> bottleneck ->
/// bottleneck plus the zero-initialized up-projection.
class MlpExpert {
 public:
  MlpExpert(std::size_t d_model, std::size_t bottleneck, RngStream& rng);

  Tensor forward(Tape& tape, const Tensor& h_words) const;
  std::size_t parameter_count() const;
  std::vector<std::pair<std::string, Tensor>> named_parameters(const std::string& prefix) const;

  const AffineWeights& layer1() const { return layer1_; }
  AffineWeights& layer1() { return layer1_; }
  const AffineWeights& layer2() const { return layer2_; }
  AffineWeights& layer2() { return layer2_; }
  const AffineWeights& up() const { return up_; }
  AffineWeights& up() { return up_; }

 private:
  AffineWeights layer1_, layer2_, up_;
};

/// Tagged expert: one of the three graph experts or the MLP expert, with a
/// uniform forward that pulls the right graph out of the sentence record.
class Expert {
 public:
  static Expert make(ExpertKind kind, std::size_t d_model, std::size_t bottleneck, RngStream& rng);

  ExpertKind kind() const { return kind_; }
  bool is_rgcn() const { return mole::is_rgcn(kind_); }

  Tensor forward(Tape& tape, const Tensor& h_words, const SentenceRecord& record) const;
  std::size_t parameter_count() const;
  std::vector<std::pair<std::string, Tensor>> named_parameters(const std::string& prefix) const;

  const RgcnExpert& rgcn() const;
  RgcnExpert& rgcn();
  const MlpExpert& mlp() const;
  MlpExpert& mlp();

 private:
  Expert(ExpertKind kind, std::variant<RgcnExpert, MlpExpert> body)
      : kind_(kind), body_(std::move(body)) {}

  ExpertKind kind_;
  std::variant<RgcnExpert, MlpExpert> body_;
};

/// Exact trainable scalar count for either expert flavor.
std::size_t count_parameters(const Expert& expert);

/// Closed-form counts used for configurations too large to instantiate.
std::size_t rgcn_expert_parameter_count(std::size_t d_model, std::size_t bottleneck);
std::size_t mlp_expert_parameter_count(std::size_t d_model, std::size_t bottleneck);

}  // namespace mole
