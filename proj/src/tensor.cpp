#include "mole/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "mole/errors.hpp"

namespace mole {
namespace {

std::size_t shape_product(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

void check_finite(const Tensor& x, const char* op) {
  for (double v : x.values()) {
    if (!std::isfinite(v)) {
      throw NumericDomainError(std::string(op) + ": non-finite input value");
    }
  }
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
  }
}

bool any_grad(const Tensor& a) { return a.requires_grad(); }
bool any_grad(const Tensor& a, const Tensor& b) { return a.requires_grad() || b.requires_grad(); }

}  // namespace

std::string shape_to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto impl = std::make_shared<Impl>();
  impl->values.assign(shape_product(shape), 0.0);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.values().begin(), t.values().end(), value);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_product(shape) != values.size()) {
    throw DimensionError("Tensor::from_data: shape " + shape_to_string(shape) + " needs " +
                         std::to_string(shape_product(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->values = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

Tensor Tensor::uniform(Shape shape, double bound, RngStream& rng, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (double& v : t.values()) v = rng.next_uniform_range(-bound, bound);
  return t;
}

Tensor::Impl& Tensor::impl() {
  if (!impl_) throw Error("Tensor: use of undefined tensor");
  return *impl_;
}

const Tensor::Impl& Tensor::impl() const {
  if (!impl_) throw Error("Tensor: use of undefined tensor");
  return *impl_;
}

const Shape& Tensor::shape() const { return impl().shape; }
std::size_t Tensor::size() const { return impl().values.size(); }
std::size_t Tensor::rank() const { return impl().shape.size(); }

std::size_t Tensor::rows() const {
  if (rank() != 2) throw DimensionError("Tensor::rows: expected rank-2, got " + shape_to_string(shape()));
  return shape()[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw DimensionError("Tensor::cols: expected rank-2, got " + shape_to_string(shape()));
  return shape()[1];
}

std::vector<double>& Tensor::values() { return impl().values; }
const std::vector<double>& Tensor::values() const { return impl().values; }

double Tensor::scalar_value() const {
  if (size() != 1) throw DimensionError("Tensor::scalar_value: tensor has " + std::to_string(size()) + " elements");
  return values()[0];
}

double Tensor::at(std::size_t r, std::size_t c) const { return values()[r * cols() + c]; }

bool Tensor::requires_grad() const { return impl().requires_grad; }
bool Tensor::frozen() const { return impl().frozen; }

void Tensor::freeze() {
  Impl& im = impl();
  im.frozen = true;
  im.requires_grad = false;
  im.grad.clear();
  im.grad_allocated = false;
}

bool Tensor::has_grad() const { return impl().grad_allocated; }

std::vector<double>& Tensor::grad() {
  Impl& im = impl();
  if (!im.grad_allocated) {
    im.grad.assign(im.values.size(), 0.0);
    im.grad_allocated = true;
  }
  return im.grad;
}

const std::vector<double>& Tensor::grad() const {
  if (!impl().grad_allocated) throw TrainingStateError("Tensor::grad: gradient not populated");
  return impl().grad;
}

void Tensor::zero_grad() {
  Impl& im = impl();
  if (im.grad_allocated) std::fill(im.grad.begin(), im.grad.end(), 0.0);
}

// ---- Tape ------------------------------------------------------------------

void Tape::backward(Tensor& loss) {
  if (loss.size() != 1) {
    throw DimensionError("Tape::backward: loss must be scalar, got " + shape_to_string(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw TrainingStateError("Tape::backward: loss does not require grad");
  }
  loss.grad()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

// ---- ops -------------------------------------------------------------------

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw DimensionError("matmul: incompatible shapes " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  const bool needs_grad = tape.recording() && any_grad(a, b);
  Tensor out = Tensor::zeros({m, n}, needs_grad);
  {
    const double* av = a.values().data();
    const double* bv = b.values().data();
    double* ov = out.values().data();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = av[i * k + p];
        if (aip == 0.0) continue;
        const double* brow = bv + p * n;
        double* orow = ov + i * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
      }
    }
  }
  if (needs_grad) {
    tape.record([a = a, b = b, out = out, m, k, n]() mutable {
      const double* go = out.grad().data();
      if (a.grad_enabled()) {
        double* ga = a.grad().data();
        const double* bv = b.values().data();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            const double* brow = bv + p * n;
            const double* grow = go + i * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            ga[i * k + p] += acc;
          }
        }
      }
      if (b.grad_enabled()) {
        double* gb = b.grad().data();
        const double* av = a.values().data();
        for (std::size_t i = 0; i < m; ++i) {
          const double* grow = go + i * n;
          for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            if (aip == 0.0) continue;
            double* gbrow = gb + p * n;
            for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
          }
        }
      }
    });
  }
  return out;
}

Tensor transpose(Tape& tape, const Tensor& x) {
  const std::size_t m = x.rows(), n = x.cols();
  const bool needs_grad = tape.recording() && any_grad(x);
  Tensor out = Tensor::zeros({n, m}, needs_grad);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.values()[j * m + i] = x.values()[i * n + j];
  if (needs_grad) {
    tape.record([x = x, out = out, m, n]() mutable {
      if (!x.grad_enabled()) return;
      double* gx = x.grad().data();
      const double* go = out.grad().data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += go[j * m + i];
    });
  }
  return out;
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  const bool needs_grad = tape.recording() && any_grad(a, b);
  Tensor out = Tensor::zeros(a.shape(), needs_grad);
  for (std::size_t i = 0; i < a.size(); ++i) out.values()[i] = a.values()[i] + b.values()[i];
  if (needs_grad) {
    tape.record([a = a, b = b, out = out]() mutable {
      const auto& go = out.grad();
      if (a.grad_enabled()) {
        auto& ga = a.grad();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (b.grad_enabled()) {
        auto& gb = b.grad();
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
      }
    });
  }
  return out;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  const bool needs_grad = tape.recording() && any_grad(a, b);
  Tensor out = Tensor::zeros(a.shape(), needs_grad);
  for (std::size_t i = 0; i < a.size(); ++i) out.values()[i] = a.values()[i] * b.values()[i];
  if (needs_grad) {
    tape.record([a = a, b = b, out = out]() mutable {
      const auto& go = out.grad();
      if (a.grad_enabled()) {
        auto& ga = a.grad();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * b.values()[i];
      }
      if (b.grad_enabled()) {
        auto& gb = b.grad();
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * a.values()[i];
      }
    });
  }
  return out;
}

Tensor scale(Tape& tape, const Tensor& x, double factor) {
  const bool needs_grad = tape.recording() && any_grad(x);
  Tensor out = Tensor::zeros(x.shape(), needs_grad);
  for (std::size_t i = 0; i < x.size(); ++i) out.values()[i] = x.values()[i] * factor;
  if (needs_grad) {
    tape.record([x = x, out = out, factor]() mutable {
      if (!x.grad_enabled()) return;
      auto& gx = x.grad();
      const auto& go = out.grad();
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * factor;
    });
  }
  return out;
}

Tensor add_rowvec(Tape& tape, const Tensor& x, const Tensor& v) {
  if (x.rank() != 2 || v.rank() != 1 || v.shape()[0] != x.cols()) {
    throw DimensionError("add_rowvec: shape mismatch " + shape_to_string(x.shape()) + " + " +
                         shape_to_string(v.shape()));
  }
  const std::size_t m = x.rows(), n = x.cols();
  const bool needs_grad = tape.recording() && any_grad(x, v);
  Tensor out = Tensor::zeros({m, n}, needs_grad);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.values()[i * n + j] = x.values()[i * n + j] + v.values()[j];
  if (needs_grad) {
    tape.record([x = x, v = v, out = out, m, n]() mutable {
      const auto& go = out.grad();
      if (x.grad_enabled()) {
        auto& gx = x.grad();
        for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
      }
      if (v.grad_enabled()) {
        auto& gv = v.grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gv[j] += go[i * n + j];
      }
    });
  }
  return out;
}

Tensor relu(Tape& tape, const Tensor& x) {
  check_finite(x, "relu");
  const bool needs_grad = tape.recording() && any_grad(x);
  Tensor out = Tensor::zeros(x.shape(), needs_grad);
  for (std::size_t i = 0; i < x.size(); ++i) out.values()[i] = x.values()[i] > 0.0 ? x.values()[i] : 0.0;
  if (needs_grad) {
    tape.record([x = x, out = out]() mutable {
      if (!x.grad_enabled()) return;
      auto& gx = x.grad();
      const auto& go = out.grad();
      for (std::size_t i = 0; i < go.size(); ++i)
        if (x.values()[i] > 0.0) gx[i] += go[i];
    });
  }
  return out;
}

namespace {

// Shared softmax core over strided lanes. Stable via max-shift; the final
// divide keeps each lane summing to 1 up to rounding.
void softmax_lanes(const std::vector<double>& in, std::vector<double>& out, std::size_t lanes,
                   std::size_t lane_len, std::size_t outer_stride, std::size_t inner_stride) {
  for (std::size_t l = 0; l < lanes; ++l) {
    const std::size_t base = l * outer_stride;
    double max_v = in[base];
    for (std::size_t i = 1; i < lane_len; ++i) max_v = std::max(max_v, in[base + i * inner_stride]);
    double sum = 0.0;
    for (std::size_t i = 0; i < lane_len; ++i) {
      const double e = std::exp(in[base + i * inner_stride] - max_v);
      out[base + i * inner_stride] = e;
      sum += e;
    }
    for (std::size_t i = 0; i < lane_len; ++i) out[base + i * inner_stride] /= sum;
  }
}

void softmax_backward_lanes(const std::vector<double>& y, const std::vector<double>& gy,
                            std::vector<double>& gx, std::size_t lanes, std::size_t lane_len,
                            std::size_t outer_stride, std::size_t inner_stride) {
  // dx_i = y_i * (gy_i - sum_j gy_j y_j)
  for (std::size_t l = 0; l < lanes; ++l) {
    const std::size_t base = l * outer_stride;
    double dot = 0.0;
    for (std::size_t i = 0; i < lane_len; ++i) dot += gy[base + i * inner_stride] * y[base + i * inner_stride];
    for (std::size_t i = 0; i < lane_len; ++i) {
      const std::size_t k = base + i * inner_stride;
      gx[k] += y[k] * (gy[k] - dot);
    }
  }
}

}  // namespace

Tensor softmax(Tape& tape, const Tensor& x, std::size_t axis) {
  check_finite(x, "softmax");
  if (x.rank() == 1) {
    if (axis != 0) throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for rank-1");
  } else if (x.rank() == 2) {
    if (axis > 1) throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for rank-2");
  } else {
    throw DimensionError("softmax: expected rank-1 or rank-2, got " + shape_to_string(x.shape()));
  }
  const bool needs_grad = tape.recording() && any_grad(x);
  Tensor out = Tensor::zeros(x.shape(), needs_grad);

  std::size_t lanes, lane_len, outer_stride, inner_stride;
  if (x.rank() == 1 || (x.rank() == 2 && axis == 1)) {
    lanes = x.rank() == 1 ? 1 : x.rows();
    lane_len = x.rank() == 1 ? x.size() : x.cols();
    outer_stride = lane_len;
    inner_stride = 1;
  } else {  // rank-2, axis 0: normalize down columns
    lanes = x.cols();
    lane_len = x.rows();
    outer_stride = 1;
    inner_stride = x.cols();
  }
  softmax_lanes(x.values(), out.values(), lanes, lane_len, outer_stride, inner_stride);
  if (needs_grad) {
    tape.record([x = x, out = out, lanes, lane_len, outer_stride, inner_stride]() mutable {
      if (!x.grad_enabled()) return;
      softmax_backward_lanes(out.values(), out.grad(), x.grad(), lanes, lane_len, outer_stride,
                             inner_stride);
    });
  }
  return out;
}

Tensor mean(Tape& tape, const Tensor& x, std::size_t axis) {
  check_finite(x, "mean");
  const bool needs_grad = tape.recording() && any_grad(x);
  if (x.rank() == 1) {
    if (axis != 0) throw DimensionError("mean: axis " + std::to_string(axis) + " invalid for rank-1");
    Tensor out = Tensor::zeros({1}, needs_grad);
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    const double inv = 1.0 / static_cast<double>(x.size());
    out.values()[0] = acc * inv;
    if (needs_grad) {
      tape.record([x = x, out = out, inv]() mutable {
        if (!x.grad_enabled()) return;
        const double g = out.grad()[0] * inv;
        for (auto& gv : x.grad()) gv += g;
      });
    }
    return out;
  }
  if (x.rank() != 2 || axis > 1) {
    throw DimensionError("mean: invalid axis " + std::to_string(axis) + " for shape " +
                         shape_to_string(x.shape()));
  }
  const std::size_t m = x.rows(), n = x.cols();
  if (axis == 0) {
    Tensor out = Tensor::zeros({n}, needs_grad);
    const double inv = 1.0 / static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out.values()[j] += x.values()[i * n + j];
    for (std::size_t j = 0; j < n; ++j) out.values()[j] *= inv;
    if (needs_grad) {
      tape.record([x = x, out = out, m, n, inv]() mutable {
        if (!x.grad_enabled()) return;
        auto& gx = x.grad();
        const auto& go = out.grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += go[j] * inv;
      });
    }
    return out;
  }
  Tensor out = Tensor::zeros({m}, needs_grad);
  const double inv = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < m; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) acc += x.values()[i * n + j];
    out.values()[i] = acc * inv;
  }
  if (needs_grad) {
    tape.record([x = x, out = out, m, n, inv]() mutable {
      if (!x.grad_enabled()) return;
      auto& gx = x.grad();
      const auto& go = out.grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += go[i] * inv;
    });
  }
  return out;
}

Tensor cross_entropy(Tape& tape, const Tensor& logits, std::size_t label) {
  check_finite(logits, "cross_entropy");
  if (logits.rank() > 2 || (logits.rank() == 2 && logits.rows() != 1)) {
    throw DimensionError("cross_entropy: expected a logit vector, got " + shape_to_string(logits.shape()));
  }
  const std::size_t n = logits.size();
  if (label >= n) {
    throw DimensionError("cross_entropy: label " + std::to_string(label) + " out of range for " +
                         std::to_string(n) + " classes");
  }
  const bool needs_grad = tape.recording() && any_grad(logits);
  Tensor out = Tensor::zeros({1}, needs_grad);

  const auto& z = logits.values();
  double max_v = z[0];
  for (double v : z) max_v = std::max(max_v, v);
  double sum = 0.0;
  for (double v : z) sum += std::exp(v - max_v);
  const double log_sum = std::log(sum) + max_v;
  out.values()[0] = log_sum - z[label];

  if (needs_grad) {
    tape.record([logits = logits, out = out, label, max_v, sum]() mutable {
      if (!logits.grad_enabled()) return;
      const double g = out.grad()[0];
      auto& gx = logits.grad();
      const auto& z = logits.values();
      for (std::size_t i = 0; i < z.size(); ++i) {
        const double p = std::exp(z[i] - max_v) / sum;
        gx[i] += g * (p - (i == label ? 1.0 : 0.0));
      }
    });
  }
  return out;
}

Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() != 2 || gamma.rank() != 1 || beta.rank() != 1 || gamma.shape()[0] != x.cols() ||
      beta.shape()[0] != x.cols()) {
    throw DimensionError("layer_norm: shape mismatch " + shape_to_string(x.shape()) + ", gamma " +
                         shape_to_string(gamma.shape()) + ", beta " + shape_to_string(beta.shape()));
  }
  const std::size_t m = x.rows(), n = x.cols();
  const bool needs_grad = tape.recording() && (any_grad(x, gamma) || beta.requires_grad());
  Tensor out = Tensor::zeros({m, n}, needs_grad);

  // Keep per-row inverse std and normalized values for the backward pass.
  auto inv_std = std::make_shared<std::vector<double>>(m);
  auto x_hat = std::make_shared<std::vector<double>>(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x.values().data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = row[j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (row[j] - mu) * is;
      (*x_hat)[i * n + j] = h;
      out.values()[i * n + j] = gamma.values()[j] * h + beta.values()[j];
    }
  }
  if (needs_grad) {
    tape.record([x = x, gamma = gamma, beta = beta, out = out, inv_std, x_hat, m, n]() mutable {
      const auto& go = out.grad();
      if (gamma.grad_enabled()) {
        auto& gg = gamma.grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gg[j] += go[i * n + j] * (*x_hat)[i * n + j];
      }
      if (beta.grad_enabled()) {
        auto& gb = beta.grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gb[j] += go[i * n + j];
      }
      if (x.grad_enabled()) {
        auto& gx = x.grad();
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t i = 0; i < m; ++i) {
          // g = gamma * d(out)/d(x_hat); dx = is * (g - mean(g) - x_hat * mean(g*x_hat))
          double mean_g = 0.0, mean_gh = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double g = go[i * n + j] * gamma.values()[j];
            mean_g += g;
            mean_gh += g * (*x_hat)[i * n + j];
          }
          mean_g *= inv_n;
          mean_gh *= inv_n;
          const double is = (*inv_std)[i];
          for (std::size_t j = 0; j < n; ++j) {
            const double g = go[i * n + j] * gamma.values()[j];
            gx[i * n + j] += is * (g - mean_g - (*x_hat)[i * n + j] * mean_gh);
          }
        }
      }
    });
  }
  return out;
}

Tensor slice_rows(Tape& tape, const Tensor& x, std::size_t start, std::size_t count) {
  if (x.rank() != 2 || start + count > x.rows()) {
    throw DimensionError("slice_rows: range [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") invalid for " + shape_to_string(x.shape()));
  }
  const std::size_t n = x.cols();
  const bool needs_grad = tape.recording() && any_grad(x);
  Tensor out = Tensor::zeros({count, n}, needs_grad);
  std::copy(x.values().begin() + static_cast<std::ptrdiff_t>(start * n),
            x.values().begin() + static_cast<std::ptrdiff_t>((start + count) * n), out.values().begin());
  if (needs_grad) {
    tape.record([x = x, out = out, start, count, n]() mutable {
      if (!x.grad_enabled()) return;
      auto& gx = x.grad();
      const auto& go = out.grad();
      for (std::size_t i = 0; i < count * n; ++i) gx[start * n + i] += go[i];
    });
  }
  return out;
}

Tensor slice_cols(Tape& tape, const Tensor& x, std::size_t start, std::size_t count) {
  if (x.rank() != 2 || start + count > x.cols()) {
    throw DimensionError("slice_cols: range [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") invalid for " + shape_to_string(x.shape()));
  }
  const std::size_t m = x.rows(), n = x.cols();
  const bool needs_grad = tape.recording() && any_grad(x);
  Tensor out = Tensor::zeros({m, count}, needs_grad);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) out.values()[i * count + j] = x.values()[i * n + start + j];
  if (needs_grad) {
    tape.record([x = x, out = out, start, count, m, n]() mutable {
      if (!x.grad_enabled()) return;
      auto& gx = x.grad();
      const auto& go = out.grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < count; ++j) gx[i * n + start + j] += go[i * count + j];
    });
  }
  return out;
}

Tensor concat_cols(Tape& tape, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no tensors given");
  const std::size_t m = parts[0].rows();
  std::size_t total = 0;
  bool needs_grad = false;
  for (const Tensor& p : parts) {
    if (p.rows() != m) {
      throw DimensionError("concat_cols: row mismatch " + shape_to_string(parts[0].shape()) + " vs " +
                           shape_to_string(p.shape()));
    }
    total += p.cols();
    needs_grad = needs_grad || p.requires_grad();
  }
  needs_grad = needs_grad && tape.recording();
  Tensor out = Tensor::zeros({m, total}, needs_grad);
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t n = p.cols();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out.values()[i * total + offset + j] = p.values()[i * n + j];
    offset += n;
  }
  if (needs_grad) {
    tape.record([parts = parts, out = out, m, total]() mutable {
      const auto& go = out.grad();
      std::size_t offset = 0;
      for (Tensor& p : parts) {
        const std::size_t n = p.cols();
        if (p.grad_enabled()) {
          auto& gp = p.grad();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gp[i * n + j] += go[i * total + offset + j];
        }
        offset += n;
      }
    });
  }
  return out;
}

Tensor row_mix(Tape& tape, const Tensor& x, const RowMixPlan& plan) {
  if (x.rank() != 2) throw DimensionError("row_mix: expected rank-2, got " + shape_to_string(x.shape()));
  const std::size_t n = x.cols(), m = x.rows();
  for (const RowMixEntry& e : plan.entries) {
    if (e.src_row >= m || e.out_row >= plan.num_out_rows) {
      throw DimensionError("row_mix: entry (" + std::to_string(e.out_row) + " <- " +
                           std::to_string(e.src_row) + ") out of range for " +
                           shape_to_string(x.shape()) + " -> " + std::to_string(plan.num_out_rows) +
                           " rows");
    }
  }
  const bool needs_grad = tape.recording() && any_grad(x);
  Tensor out = Tensor::zeros({plan.num_out_rows, n}, needs_grad);
  for (const RowMixEntry& e : plan.entries) {
    const double* src = x.values().data() + e.src_row * n;
    double* dst = out.values().data() + e.out_row * n;
    for (std::size_t j = 0; j < n; ++j) dst[j] += e.coeff * src[j];
  }
  if (needs_grad) {
    auto entries = std::make_shared<std::vector<RowMixEntry>>(plan.entries);
    tape.record([x = x, out = out, entries, n]() mutable {
      if (!x.grad_enabled()) return;
      auto& gx = x.grad();
      const auto& go = out.grad();
      for (const RowMixEntry& e : *entries) {
        const double* src = go.data() + e.out_row * n;
        double* dst = gx.data() + e.src_row * n;
        for (std::size_t j = 0; j < n; ++j) dst[j] += e.coeff * src[j];
      }
    });
  }
  return out;
}

Tensor weighted_sum(Tape& tape, const Tensor& weights, const std::vector<Tensor>& xs) {
  if (weights.rank() != 1 || weights.size() != xs.size()) {
    throw StructuralError("weighted_sum: " + std::to_string(weights.size()) + " weights for " +
                          std::to_string(xs.size()) + " tensors");
  }
  if (xs.empty()) throw StructuralError("weighted_sum: no tensors given");
  bool needs_grad = weights.requires_grad();
  for (const Tensor& x : xs) {
    check_same_shape(xs[0], x, "weighted_sum");
    needs_grad = needs_grad || x.requires_grad();
  }
  needs_grad = needs_grad && tape.recording();
  Tensor out = Tensor::zeros(xs[0].shape(), needs_grad);
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const double w = weights.values()[k];
    const auto& xv = xs[k].values();
    for (std::size_t i = 0; i < xv.size(); ++i) out.values()[i] += w * xv[i];
  }
  if (needs_grad) {
    tape.record([weights = weights, xs = xs, out = out]() mutable {
      const auto& go = out.grad();
      for (std::size_t k = 0; k < xs.size(); ++k) {
        Tensor x = xs[k];
        if (x.grad_enabled()) {
          const double w = weights.values()[k];
          auto& gx = x.grad();
          for (std::size_t i = 0; i < go.size(); ++i) gx[i] += w * go[i];
        }
        if (weights.grad_enabled()) {
          double acc = 0.0;
          const auto& xv = x.values();
          for (std::size_t i = 0; i < go.size(); ++i) acc += go[i] * xv[i];
          weights.grad()[k] += acc;
        }
      }
    });
  }
  return out;
}

// ---- optimizer -------------------------------------------------------------

void sgd_step(const std::vector<Tensor>& params, double lr) {
  for (const Tensor& p : params) {
    if (p.frozen()) continue;
    if (!p.requires_grad()) continue;
    if (!p.has_grad()) {
      throw TrainingStateError("sgd_step: trainable tensor of shape " + shape_to_string(p.shape()) +
                               " has no gradient");
    }
    Tensor t = p;
    auto& v = t.values();
    const auto& g = t.grad();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
  }
}

SgdOptimizer::SgdOptimizer(std::vector<Tensor> params, double lr, double momentum)
    : params_(std::move(params)), lr_(lr), momentum_(momentum) {
  if (momentum_ != 0.0) {
    velocity_.reserve(params_.size());
    for (const Tensor& p : params_) velocity_.emplace_back(p.size(), 0.0);
  }
}

void SgdOptimizer::step() {
  if (momentum_ == 0.0) {
    sgd_step(params_, lr_);
    return;
  }
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor p = params_[k];
    if (p.frozen() || !p.requires_grad()) continue;
    if (!p.has_grad()) {
      throw TrainingStateError("SgdOptimizer::step: trainable tensor of shape " +
                               shape_to_string(p.shape()) + " has no gradient");
    }
    auto& vel = velocity_[k];
    auto& v = p.values();
    const auto& g = p.grad();
    for (std::size_t i = 0; i < v.size(); ++i) {
      vel[i] = momentum_ * vel[i] + g[i];
      v[i] -= lr_ * vel[i];
    }
  }
}

void SgdOptimizer::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

}  // namespace mole
