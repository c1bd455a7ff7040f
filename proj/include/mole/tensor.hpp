// Dense 64-bit tensors with a per-pass reverse-mode tape.
//
// The op set is exactly what the model needs: dense linear algebra on
// rank-1/rank-2 tensors, a few structured linear maps (row_mix for
// graph/alignment gathers), and the classification loss. The tape is
// rebuilt on every forward pass; backward replays recorded closures in
// reverse order, which also fixes the floating-point reduction order and
// keeps reruns bit-identical.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mole/rng.hpp"

namespace mole {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);

/// Shared-handle dense tensor. Copies alias the same storage; training code
/// relies on that to hold one parameter in several views (optimizer list,
/// named checkpoint list, module weights).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  /// Uniform in [-bound, bound] drawn from `rng`.
  static Tensor uniform(Shape shape, double bound, RngStream& rng, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t size() const;
  std::size_t rank() const;
  /// rank-2 accessors; throw DimensionError on other ranks.
  std::size_t rows() const;
  std::size_t cols() const;

  std::vector<double>& values();
  const std::vector<double>& values() const;
  double scalar_value() const;
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const;
  /// True if this tensor accumulates gradient (requires_grad and not frozen).
  bool grad_enabled() const { return requires_grad() && !frozen(); }

  bool frozen() const;
  /// Permanently stop gradient accumulation; storage bytes are never touched
  /// by the optimizer afterwards.
  void freeze();

  bool has_grad() const;
  /// Gradient buffer, allocated to zeros on first use. Same shape as data.
  std::vector<double>& grad();
  const std::vector<double>& grad() const;
  void zero_grad();

  /// Identity comparison (same storage), not value comparison.
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;
    bool requires_grad = false;
    bool frozen = false;
    bool grad_allocated = false;
  };

  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
  Impl& impl();
  const Impl& impl() const;

  std::shared_ptr<Impl> impl_;
};

/// Reverse-mode tape. Ops append a backward closure per recorded node;
/// backward() seeds d(loss)/d(loss)=1 and replays the closures last to
/// first. Recording can be switched off for pure evaluation passes.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(BackwardFn fn) { nodes_.push_back(std::move(fn)); }
  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }

  /// Seed `loss` (must be a scalar that requires grad) and propagate.
  void backward(Tensor& loss);

  std::size_t num_nodes() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  std::vector<BackwardFn> nodes_;
  bool recording_ = true;
};

/// RAII recording switch for evaluation-only forwards.
class NoGradGuard {
 public:
  explicit NoGradGuard(Tape& tape) : tape_(tape), prev_(tape.recording()) {
    tape_.set_recording(false);
  }
  ~NoGradGuard() { tape_.set_recording(prev_); }

 private:
  Tape& tape_;
  bool prev_;
};

// ---- structured linear maps ------------------------------------------------

/// One term of a sparse row-to-row linear map: out[out_row] += coeff * x[src_row].
struct RowMixEntry {
  std::size_t out_row;
  std::size_t src_row;
  double coeff;
};

/// Sparse linear recombination of rows. Serves embedding lookup, subword
/// mean-pooling, word-to-subword scatter, and RGCN neighbor aggregation.
struct RowMixPlan {
  std::size_t num_out_rows = 0;
  std::vector<RowMixEntry> entries;
};

// ---- differentiable ops ----------------------------------------------------

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor transpose(Tape& tape, const Tensor& x);
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& x, double factor);
/// Broadcast-add a length-cols vector to every row of a rank-2 tensor.
Tensor add_rowvec(Tape& tape, const Tensor& x, const Tensor& v);
Tensor relu(Tape& tape, const Tensor& x);
/// axis 0 normalizes columns (or the whole vector for rank-1), axis 1 rows.
Tensor softmax(Tape& tape, const Tensor& x, std::size_t axis);
/// Mean over `axis` of a rank-2 tensor, or the scalar mean of a rank-1.
Tensor mean(Tape& tape, const Tensor& x, std::size_t axis);
/// Negative log-likelihood of `label` under softmax(logits). Accepts a
/// rank-1 vector or a single-row matrix of logits.
Tensor cross_entropy(Tape& tape, const Tensor& logits, std::size_t label);
/// Row-wise normalization over the last dimension with affine gain/shift.
Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-12);
Tensor slice_rows(Tape& tape, const Tensor& x, std::size_t start, std::size_t count);
Tensor slice_cols(Tape& tape, const Tensor& x, std::size_t start, std::size_t count);
Tensor concat_cols(Tape& tape, const std::vector<Tensor>& parts);
Tensor row_mix(Tape& tape, const Tensor& x, const RowMixPlan& plan);
/// sum_i weights[i] * xs[i]; weights is rank-1 with one entry per tensor.
Tensor weighted_sum(Tape& tape, const Tensor& weights, const std::vector<Tensor>& xs);

// ---- optimizer -------------------------------------------------------------

/// p <- p - lr * grad(p) for every non-frozen parameter; frozen tensors are
/// untouched bit-exactly. Throws TrainingStateError if a trainable parameter
/// has no gradient.
void sgd_step(const std::vector<Tensor>& params, double lr);

/// SGD with optional momentum; momentum 0 reduces exactly to sgd_step.
class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<Tensor> params, double lr, double momentum = 0.0);

  void step();
  void zero_grad();
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  double lr_;
  double momentum_;
  std::vector<std::vector<double>> velocity_;
};

}  // namespace mole
