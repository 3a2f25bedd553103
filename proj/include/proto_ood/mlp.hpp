#pragma once

#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "proto_ood/errors.hpp"
#include "proto_ood/matrix.hpp"
#include "proto_ood/rng.hpp"

namespace proto_ood {

/// A trainable weight or bias. Gradients accumulate across calls until
/// zero_grad(); shape of grad always mirrors value.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  Parameter(std::string n, Matrix v)
      : name(std::move(n)), value(std::move(v)), grad(value.rows(), value.cols()) {}

  void zero_grad() { grad.fill(0.0); }
};

inline void zero_gradients(std::span<Parameter* const> params) {
  for (Parameter* p : params) p->zero_grad();
}

enum class FinalActivation { kNone, kSigmoid };

struct Mlp2Cache {
  Matrix input;
  Matrix pre_hidden;   // before ReLU
  Matrix hidden;       // after ReLU
  Matrix pre_output;   // before output ReLU (if any) / final activation
  Matrix output;
  bool valid = false;
};

inline double sigmoid(double x) {
  // Split on sign so exp never overflows; clamped strictly inside (0, 1) so
  // a saturated score still has a finite log.
  if (x >= 0.0) return clamp_open_unit(1.0 / (1.0 + std::exp(-x)));
  const double e = std::exp(x);
  return clamp_open_unit(e / (1.0 + e));
}

/// Two-layer perceptron: Linear -> ReLU -> Linear -> final activation.
/// `output_relu` keeps an extra ReLU in front of a sigmoid output, which
/// restricts scores to [0.5, 1); off by default (see ModelState).
class Mlp2 {
 public:
  Mlp2(const std::string& name, std::size_t in, std::size_t hidden, std::size_t out,
       FinalActivation activation, bool output_relu = false)
      : w1(name + "_w1", Matrix(in, hidden)),
        b1(name + "_b1", Matrix(1, hidden)),
        w2(name + "_w2", Matrix(hidden, out)),
        b2(name + "_b2", Matrix(1, out)),
        activation_(activation),
        output_relu_(output_relu) {}

  std::size_t input_width() const { return w1.value.rows(); }
  std::size_t hidden_width() const { return w1.value.cols(); }
  std::size_t output_width() const { return w2.value.cols(); }
  FinalActivation activation() const { return activation_; }
  bool output_relu() const { return output_relu_; }

  std::vector<Parameter*> parameters() { return {&w1, &b1, &w2, &b2}; }
  std::vector<const Parameter*> parameters() const { return {&w1, &b1, &w2, &b2}; }

  /// Scaled-by-fan-in normal weights. Biases get a small jitter; an exactly
  /// zero bias can park a ReLU-dead row's output right on the embedding
  /// normalization singularity.
  void init_random(Rng& rng) {
    init_matrix(w1.value, rng);
    init_matrix(w2.value, rng);
    for (std::size_t j = 0; j < b1.value.cols(); ++j) b1.value(0, j) = 0.01 * rng.normal();
    for (std::size_t j = 0; j < b2.value.cols(); ++j) b2.value(0, j) = 0.01 * rng.normal();
  }

  Matrix forward(const Matrix& x) const {
    Mlp2Cache scratch;
    return forward(x, scratch);
  }

  Matrix forward(const Matrix& x, Mlp2Cache& cache) const {
    if (x.cols() != input_width()) {
      throw DimensionError("mlp forward: input " + shape_str(x) + ", expected cols " +
                           std::to_string(input_width()));
    }
    cache.input = x;
    cache.pre_hidden = affine(x, w1.value, b1.value);
    cache.hidden = cache.pre_hidden;
    relu_inplace(cache.hidden);
    cache.pre_output = affine(cache.hidden, w2.value, b2.value);
    cache.output = cache.pre_output;
    if (output_relu_) relu_inplace(cache.output);
    if (activation_ == FinalActivation::kSigmoid) {
      for (std::size_t i = 0; i < cache.output.rows(); ++i)
        for (std::size_t j = 0; j < cache.output.cols(); ++j)
          cache.output(i, j) = sigmoid(cache.output(i, j));
    }
    cache.valid = true;
    return cache.output;
  }

  /// Accumulates parameter gradients and returns the gradient w.r.t. the
  /// cached input. ReLU subgradient at exactly 0 is 0.
  Matrix backward(const Matrix& upstream, const Mlp2Cache& cache) {
    if (!cache.valid) throw UsageError("mlp backward: no cached forward pass");
    if (upstream.rows() != cache.output.rows() || upstream.cols() != cache.output.cols()) {
      throw DimensionError("mlp backward: upstream " + shape_str(upstream) +
                           " vs output " + shape_str(cache.output));
    }
    Matrix d_pre_out = upstream;
    if (activation_ == FinalActivation::kSigmoid) {
      // d sigmoid = s(1-s); cache.output already holds s.
      for (std::size_t i = 0; i < d_pre_out.rows(); ++i)
        for (std::size_t j = 0; j < d_pre_out.cols(); ++j) {
          const double s = cache.output(i, j);
          d_pre_out(i, j) *= s * (1.0 - s);
        }
    }
    if (output_relu_) {
      for (std::size_t i = 0; i < d_pre_out.rows(); ++i)
        for (std::size_t j = 0; j < d_pre_out.cols(); ++j)
          if (cache.pre_output(i, j) <= 0.0) d_pre_out(i, j) = 0.0;
    }
    accumulate(w2.grad, matmul_tn(cache.hidden, d_pre_out));
    accumulate_colsum(b2.grad, d_pre_out);
    Matrix d_hidden = matmul_nt(d_pre_out, w2.value);
    for (std::size_t i = 0; i < d_hidden.rows(); ++i)
      for (std::size_t j = 0; j < d_hidden.cols(); ++j)
        if (cache.pre_hidden(i, j) <= 0.0) d_hidden(i, j) = 0.0;
    accumulate(w1.grad, matmul_tn(cache.input, d_hidden));
    accumulate_colsum(b1.grad, d_hidden);
    return matmul_nt(d_hidden, w1.value);
  }

  Parameter w1, b1, w2, b2;

 private:
  static Matrix affine(const Matrix& x, const Matrix& w, const Matrix& b) {
    Matrix out = matmul(x, w);
    for (std::size_t i = 0; i < out.rows(); ++i)
      for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += b(0, j);
    return out;
  }

  static void relu_inplace(Matrix& m) {
    for (std::size_t i = 0; i < m.rows(); ++i)
      for (std::size_t j = 0; j < m.cols(); ++j)
        if (m(i, j) < 0.0) m(i, j) = 0.0;
  }

  static void accumulate(Matrix& into, const Matrix& delta) {
    for (std::size_t i = 0; i < into.rows(); ++i)
      for (std::size_t j = 0; j < into.cols(); ++j) into(i, j) += delta(i, j);
  }

  static void accumulate_colsum(Matrix& into, const Matrix& delta) {
    for (std::size_t i = 0; i < delta.rows(); ++i)
      for (std::size_t j = 0; j < delta.cols(); ++j) into(0, j) += delta(i, j);
  }

  static void init_matrix(Matrix& m, Rng& rng) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(m.rows()));
    for (std::size_t i = 0; i < m.rows(); ++i)
      for (std::size_t j = 0; j < m.cols(); ++j) m(i, j) = scale * rng.normal();
  }

  FinalActivation activation_;
  bool output_relu_;
};

/// Plain affine map; the classification readout that stands in for a
/// detector's class head.
struct LinearCache {
  Matrix input;
  bool valid = false;
};

class Linear {
 public:
  Linear(const std::string& name, std::size_t in, std::size_t out)
      : w(name + "_w", Matrix(in, out)), b(name + "_b", Matrix(1, out)) {}

  std::size_t input_width() const { return w.value.rows(); }
  std::size_t output_width() const { return w.value.cols(); }

  std::vector<Parameter*> parameters() { return {&w, &b}; }

  void init_random(Rng& rng) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(w.value.rows()));
    for (std::size_t i = 0; i < w.value.rows(); ++i)
      for (std::size_t j = 0; j < w.value.cols(); ++j)
        w.value(i, j) = scale * rng.normal();
    for (std::size_t j = 0; j < b.value.cols(); ++j) b.value(0, j) = 0.01 * rng.normal();
  }

  Matrix forward(const Matrix& x, LinearCache& cache) const {
    if (x.cols() != input_width()) {
      throw DimensionError("linear forward: input " + shape_str(x));
    }
    cache.input = x;
    cache.valid = true;
    Matrix out = matmul(x, w.value);
    for (std::size_t i = 0; i < out.rows(); ++i)
      for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += b.value(0, j);
    return out;
  }

  Matrix forward(const Matrix& x) const {
    LinearCache scratch;
    return forward(x, scratch);
  }

  Matrix backward(const Matrix& upstream, const LinearCache& cache) {
    if (!cache.valid) throw UsageError("linear backward: no cached forward pass");
    Matrix dw = matmul_tn(cache.input, upstream);
    for (std::size_t i = 0; i < dw.rows(); ++i)
      for (std::size_t j = 0; j < dw.cols(); ++j) w.grad(i, j) += dw(i, j);
    for (std::size_t i = 0; i < upstream.rows(); ++i)
      for (std::size_t j = 0; j < upstream.cols(); ++j)
        b.grad(0, j) += upstream(i, j);
    return matmul_nt(upstream, w.value);
  }

  Parameter w, b;
};

// ---------------------------------------------------------------------------
// Finite-difference gradient verification.
// ---------------------------------------------------------------------------

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
};

/// `loss_fn` must zero the given parameters' gradients, evaluate the loss at
/// the current values, and accumulate analytic gradients. Central differences
/// with the given step are compared coordinate by coordinate; the relative
/// error is |analytic - numeric| / max(1, |analytic|, |numeric|).
inline GradCheckResult grad_check(const std::function<double()>& loss_fn,
                                  std::span<Parameter* const> params,
                                  double step) {
  GradCheckResult result;
  loss_fn();
  std::vector<Matrix> analytic;
  analytic.reserve(params.size());
  for (const Parameter* p : params) analytic.push_back(p->grad);

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter& p = *params[pi];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double saved = p.value.data()[i];
      p.value.data()[i] = saved + step;
      const double up = loss_fn();
      p.value.data()[i] = saved - step;
      const double down = loss_fn();
      p.value.data()[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[pi].data()[i];
      const double rel =
          std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst_param = p.name;
        result.worst_index = i;
      }
    }
  }
  loss_fn();  // leave gradients at the unperturbed point
  return result;
}

}  // namespace proto_ood
