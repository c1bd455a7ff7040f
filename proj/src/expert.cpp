#include "mole/expert.hpp"

#include <cmath>

#include "mole/errors.hpp"

namespace mole {
namespace {

// He-style uniform init: bound sqrt(6 / fan_in), drawn from the weight-init
// stream in declaration order so runs are reproducible.
Tensor init_weight(std::size_t in_dim, std::size_t out_dim, RngStream& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in_dim));
  return Tensor::uniform({in_dim, out_dim}, bound, rng, /*requires_grad=*/true);
}

}  // namespace

const char* to_string(ExpertKind kind) {
  switch (kind) {
    case ExpertKind::kSyntactic: return "syntactic";
    case ExpertKind::kSemantic: return "semantic";
    case ExpertKind::kSequential: return "sequential";
    case ExpertKind::kMlp: return "mlp";
  }
  return "unknown";
}

ExpertKind expert_kind_from_string(const std::string& name) {
  if (name == "syntactic") return ExpertKind::kSyntactic;
  if (name == "semantic") return ExpertKind::kSemantic;
  if (name == "sequential") return ExpertKind::kSequential;
  if (name == "mlp") return ExpertKind::kMlp;
  throw ConfigError("unknown expert kind: '" + name + "'");
}

GraphKind graph_kind_for(ExpertKind kind) {
  switch (kind) {
    case ExpertKind::kSyntactic: return GraphKind::kSyntactic;
    case ExpertKind::kSemantic: return GraphKind::kSemantic;
    case ExpertKind::kSequential: return GraphKind::kSequential;
    case ExpertKind::kMlp: break;
  }
  throw StructuralError("mlp expert consumes no graph");
}

bool is_rgcn(ExpertKind kind) { return kind != ExpertKind::kMlp; }

// ---- weights ----------------------------------------------------------------

RgcnSublayerWeights RgcnSublayerWeights::create(std::size_t in_dim, std::size_t out_dim, RngStream& rng) {
  RgcnSublayerWeights w;
  w.w_child = init_weight(in_dim, out_dim, rng);
  w.b_child = Tensor::zeros({out_dim}, /*requires_grad=*/true);
  w.w_parent = init_weight(in_dim, out_dim, rng);
  w.b_parent = Tensor::zeros({out_dim}, /*requires_grad=*/true);
  w.w_self = init_weight(in_dim, out_dim, rng);
  w.b_self = Tensor::zeros({out_dim}, /*requires_grad=*/true);
  return w;
}

std::size_t RgcnSublayerWeights::parameter_count() const {
  return w_child.size() + b_child.size() + w_parent.size() + b_parent.size() + w_self.size() +
         b_self.size();
}

AffineWeights AffineWeights::create(std::size_t in_dim, std::size_t out_dim, RngStream& rng) {
  return AffineWeights{init_weight(in_dim, out_dim, rng), Tensor::zeros({out_dim}, true)};
}

AffineWeights AffineWeights::create_zero(std::size_t in_dim, std::size_t out_dim) {
  return AffineWeights{Tensor::zeros({in_dim, out_dim}, true), Tensor::zeros({out_dim}, true)};
}

std::size_t AffineWeights::parameter_count() const { return w.size() + b.size(); }

// ---- RGCN sublayer ----------------------------------------------------------

Tensor rgcn_sublayer_forward(Tape& tape, const Tensor& h, const DependencyGraph& graph,
                             const RgcnSublayerWeights& weights, OpCounter* counter) {
  if (h.rows() != graph.num_words) {
    throw StructuralError("rgcn_sublayer_forward: " + std::to_string(h.rows()) + " rows for a graph of " +
                          std::to_string(graph.num_words) + " words");
  }
  const std::size_t n = graph.num_words;

  // |N_i|: total degree over both relations.
  std::vector<double> degree(n, 0.0);
  for (const GraphEdge& e : graph.edges) {
    degree[e.head] += 1.0;
    degree[e.dep] += 1.0;
  }

  // Transform all nodes once per relation, then gather along edges.
  Tensor by_child = matmul(tape, h, weights.w_child);
  Tensor by_parent = matmul(tape, h, weights.w_parent);
  Tensor by_self = matmul(tape, h, weights.w_self);

  RowMixPlan child_plan, parent_plan;
  child_plan.num_out_rows = n;
  parent_plan.num_out_rows = n;
  for (const GraphEdge& e : graph.edges) {
    // At the head, the dependent is a child neighbor; at the dependent, the
    // head is a parent neighbor. One stored edge, two logical relations.
    child_plan.entries.push_back({e.head, e.dep, 1.0 / degree[e.head]});
    parent_plan.entries.push_back({e.dep, e.head, 1.0 / degree[e.dep]});
  }

  Tensor acc = by_self;
  if (!graph.edges.empty()) {
    Tensor from_children = row_mix(tape, by_child, child_plan);
    Tensor from_parents = row_mix(tape, by_parent, parent_plan);
    acc = add(tape, acc, add(tape, from_children, from_parents));
  }
  Tensor bias = add(tape, add(tape, weights.b_child, weights.b_parent), weights.b_self);
  Tensor out = relu(tape, add_rowvec(tape, acc, bias));

  if (counter != nullptr) {
    counter->edge_visits += 2 * graph.edges.size();
    counter->node_visits += n;
  }
  return out;
}

// ---- RgcnExpert ---------------------------------------------------------------

RgcnExpert::RgcnExpert(GraphKind graph_kind, std::size_t d_model, std::size_t bottleneck,
                       RngStream& rng)
    : graph_kind_(graph_kind),
      sublayers_{RgcnSublayerWeights::create(d_model, bottleneck, rng),
                 RgcnSublayerWeights::create(bottleneck, bottleneck, rng)},
      up_(AffineWeights::create_zero(bottleneck, d_model)) {
  if (graph_kind == GraphKind::kEdgeless) {
    throw StructuralError("RgcnExpert: the edgeless case is the MLP expert");
  }
}

Tensor RgcnExpert::forward(Tape& tape, const Tensor& h_words, const DependencyGraph& graph) const {
  if (graph.kind != graph_kind_) {
    throw StructuralError(std::string("RgcnExpert(") + to_string(graph_kind_) + "): got a " +
                          to_string(graph.kind) + " graph");
  }
  Tensor x = rgcn_sublayer_forward(tape, h_words, graph, sublayers_[0], &counter_);
  x = rgcn_sublayer_forward(tape, x, graph, sublayers_[1], &counter_);
  return add_rowvec(tape, matmul(tape, x, up_.w), up_.b);
}

std::size_t RgcnExpert::parameter_count() const {
  return sublayers_[0].parameter_count() + sublayers_[1].parameter_count() + up_.parameter_count();
}

std::vector<std::pair<std::string, Tensor>> RgcnExpert::named_parameters(
    const std::string& prefix) const {
  std::vector<std::pair<std::string, Tensor>> named;
  for (std::size_t s = 0; s < sublayers_.size(); ++s) {
    const std::string base = prefix + ".sub" + std::to_string(s);
    const RgcnSublayerWeights& w = sublayers_[s];
    named.emplace_back(base + ".w_child", w.w_child);
    named.emplace_back(base + ".b_child", w.b_child);
    named.emplace_back(base + ".w_parent", w.w_parent);
    named.emplace_back(base + ".b_parent", w.b_parent);
    named.emplace_back(base + ".w_self", w.w_self);
    named.emplace_back(base + ".b_self", w.b_self);
  }
  named.emplace_back(prefix + ".up.w", up_.w);
  named.emplace_back(prefix + ".up.b", up_.b);
  return named;
}

// ---- MlpExpert ----------------------------------------------------------------

MlpExpert::MlpExpert(std::size_t d_model, std::size_t bottleneck, RngStream& rng)
    : layer1_(AffineWeights::create(d_model, bottleneck, rng)),
      layer2_(AffineWeights::create(bottleneck, bottleneck, rng)),
      up_(AffineWeights::create_zero(bottleneck, d_model)) {}

Tensor MlpExpert::forward(Tape& tape, const Tensor& h_words) const {
  Tensor x = relu(tape, add_rowvec(tape, matmul(tape, h_words, layer1_.w), layer1_.b));
  x = relu(tape, add_rowvec(tape, matmul(tape, x, layer2_.w), layer2_.b));
  return add_rowvec(tape, matmul(tape, x, up_.w), up_.b);
}

std::size_t MlpExpert::parameter_count() const {
  return layer1_.parameter_count() + layer2_.parameter_count() + up_.parameter_count();
}

std::vector<std::pair<std::string, Tensor>> MlpExpert::named_parameters(
    const std::string& prefix) const {
  return {{prefix + ".l1.w", layer1_.w}, {prefix + ".l1.b", layer1_.b},
          {prefix + ".l2.w", layer2_.w}, {prefix + ".l2.b", layer2_.b},
          {prefix + ".up.w", up_.w},     {prefix + ".up.b", up_.b}};
}

// ---- Expert --------------------------------------------------------------------

Expert Expert::make(ExpertKind kind, std::size_t d_model, std::size_t bottleneck, RngStream& rng) {
  if (kind == ExpertKind::kMlp) {
    return Expert(kind, MlpExpert(d_model, bottleneck, rng));
  }
  return Expert(kind, RgcnExpert(graph_kind_for(kind), d_model, bottleneck, rng));
}

Tensor Expert::forward(Tape& tape, const Tensor& h_words, const SentenceRecord& record) const {
  if (kind_ == ExpertKind::kMlp) return mlp().forward(tape, h_words);
  return rgcn().forward(tape, h_words, record.graph(graph_kind_for(kind_)));
}

std::size_t Expert::parameter_count() const {
  return kind_ == ExpertKind::kMlp ? mlp().parameter_count() : rgcn().parameter_count();
}

std::vector<std::pair<std::string, Tensor>> Expert::named_parameters(const std::string& prefix) const {
  return kind_ == ExpertKind::kMlp ? mlp().named_parameters(prefix) : rgcn().named_parameters(prefix);
}

const RgcnExpert& Expert::rgcn() const {
  if (kind_ == ExpertKind::kMlp) throw StructuralError("Expert: not an RGCN expert");
  return std::get<RgcnExpert>(body_);
}

RgcnExpert& Expert::rgcn() {
  if (kind_ == ExpertKind::kMlp) throw StructuralError("Expert: not an RGCN expert");
  return std::get<RgcnExpert>(body_);
}

const MlpExpert& Expert::mlp() const {
  if (kind_ != ExpertKind::kMlp) throw StructuralError("Expert: not an MLP expert");
  return std::get<MlpExpert>(body_);
}

MlpExpert& Expert::mlp() {
  if (kind_ != ExpertKind::kMlp) throw StructuralError("Expert: not an MLP expert");
  return std::get<MlpExpert>(body_);
}

std::size_t count_parameters(const Expert& expert) { return expert.parameter_count(); }

std::size_t rgcn_expert_parameter_count(std::size_t d_model, std::size_t bottleneck) {
  const std::size_t sub1 = 3 * (d_model * bottleneck + bottleneck);
  const std::size_t sub2 = 3 * (bottleneck * bottleneck + bottleneck);
  const std::size_t up = bottleneck * d_model + d_model;
  return sub1 + sub2 + up;
}

std::size_t mlp_expert_parameter_count(std::size_t d_model, std::size_t bottleneck) {
  return (d_model * bottleneck + bottleneck) + (bottleneck * bottleneck + bottleneck) +
         (bottleneck * d_model + d_model);
}

}  // namespace mole
