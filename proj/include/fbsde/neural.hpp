#pragma once

#include "fbsde/rng.hpp"
#include "fbsde/tape.hpp"
#include "fbsde/tensor.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace fbsde {

/// Two tanh hidden layers of equal width and a linear output layer.
struct MlpSpec {
  Index input = 0;
  Index hidden = 0;
  Index output = 0;
};

/// Hidden width is 30 + d for state dimension d.
inline MlpSpec mlp_spec(Index d, Index output) { return MlpSpec{d, 30 + d, output}; }

template <typename Scalar>
struct ParameterSet {
  Matrix<Scalar> w1, b1, w2, b2, w3, b3;  // biases stored as 1 x width rows

  std::array<Matrix<Scalar>*, 6> items() { return {&w1, &b1, &w2, &b2, &w3, &b3}; }
  std::array<const Matrix<Scalar>*, 6> items() const { return {&w1, &b1, &w2, &b2, &w3, &b3}; }

  MlpSpec spec() const { return MlpSpec{w1.rows(), w1.cols(), w3.cols()}; }
};

/// Glorot-uniform weights, zero biases; deterministic per seed.
template <typename Scalar>
ParameterSet<Scalar> mlp_init(const MlpSpec& spec, std::uint64_t seed) {
  if (spec.input < 1 || spec.hidden < 1 || spec.output < 1)
    throw std::invalid_argument("mlp_init: widths must be >= 1");
  ParameterSet<Scalar> p;
  auto init_weight = [&](Matrix<Scalar>& w, Index in, Index out, std::uint64_t layer) {
    SplitMix64 rng{combine_keys(seed, 0x6C61796572ull, layer)};
    const double a = std::sqrt(6.0 / static_cast<double>(in + out));
    w.resize(in, out);
    for (Index r = 0; r < in; ++r)
      for (Index c = 0; c < out; ++c) w(r, c) = static_cast<Scalar>(rng.uniform(-a, a));
  };
  init_weight(p.w1, spec.input, spec.hidden, 1);
  init_weight(p.w2, spec.hidden, spec.hidden, 2);
  init_weight(p.w3, spec.hidden, spec.output, 3);
  p.b1 = Matrix<Scalar>::Zero(1, spec.hidden);
  p.b2 = Matrix<Scalar>::Zero(1, spec.hidden);
  p.b3 = Matrix<Scalar>::Zero(1, spec.output);
  return p;
}

/// Batched forward pass: out = W3 tanh(W2 tanh(W1 x + b1) + b2) + b3.
template <typename Scalar>
Matrix<Scalar> mlp_apply(const ParameterSet<Scalar>& p, const Matrix<Scalar>& x) {
  if (x.cols() != p.w1.rows()) throw std::invalid_argument("mlp_apply: input width mismatch");
  Matrix<Scalar> h = ((x * p.w1).rowwise() + p.b1.row(0)).array().tanh();
  h = ((h * p.w2).rowwise() + p.b2.row(0)).array().tanh();
  return (h * p.w3).rowwise() + p.b3.row(0);
}

/// Tape handles for one network's parameters.
struct MlpVars {
  Var w1, b1, w2, b2, w3, b3;
  std::array<Var, 6> items() const { return {w1, b1, w2, b2, w3, b3}; }
};

template <typename Scalar>
MlpVars register_mlp(Tape<Scalar>& tape, const ParameterSet<Scalar>& p,
                     const std::string& prefix) {
  MlpVars v;
  v.w1 = tape.leaf(p.w1, true, prefix + ".w1");
  v.b1 = tape.leaf(p.b1, true, prefix + ".b1");
  v.w2 = tape.leaf(p.w2, true, prefix + ".w2");
  v.b2 = tape.leaf(p.b2, true, prefix + ".b2");
  v.w3 = tape.leaf(p.w3, true, prefix + ".w3");
  v.b3 = tape.leaf(p.b3, true, prefix + ".b3");
  return v;
}

template <typename Scalar>
Var mlp_apply(Tape<Scalar>& tape, const MlpVars& p, Var x) {
  Var h = tanh(tape, add_rowvec(tape, matmul(tape, x, p.w1), p.b1));
  h = tanh(tape, add_rowvec(tape, matmul(tape, h, p.w2), p.b2));
  return add_rowvec(tape, matmul(tape, h, p.w3), p.b3);
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double lr_init = 1e-2;
  double lr_decay = 1e-2;          // factor reached at the final iteration
  std::int64_t total_iters = 1;    // decay horizon
};

/// eta_k = lr_init * lr_decay^(k / total_iters)
inline double adam_learning_rate(const AdamConfig& c, std::int64_t k) {
  return c.lr_init * std::pow(c.lr_decay, static_cast<double>(k) / static_cast<double>(c.total_iters));
}

template <typename Scalar>
struct AdamState {
  std::vector<Matrix<Scalar>> m, v;
  std::int64_t step = 0;
  std::int64_t skipped = 0;  // non-finite gradient events
  bool diverged_last = false;

  template <typename Range>
  void init_like(const Range& params) {
    m.clear();
    v.clear();
    for (const Matrix<Scalar>* p : params) {
      m.push_back(Matrix<Scalar>::Zero(p->rows(), p->cols()));
      v.push_back(Matrix<Scalar>::Zero(p->rows(), p->cols()));
    }
  }
};

/// One Adam update with bias correction. When any gradient entry is
/// non-finite the update is skipped, parameters stay unchanged and the
/// diverged flag is raised. Returns whether the update was applied.
template <typename Scalar>
bool adam_step(AdamState<Scalar>& state, const AdamConfig& cfg,
               const std::vector<Matrix<Scalar>*>& params,
               const std::vector<const Matrix<Scalar>*>& grads) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw std::invalid_argument("adam_step: parameter/gradient arity mismatch");
  for (const Matrix<Scalar>* g : grads)
    if (!g->allFinite()) {
      state.diverged_last = true;
      ++state.skipped;
      return false;
    }
  state.diverged_last = false;
  const Scalar lr = static_cast<Scalar>(adam_learning_rate(cfg, state.step));
  const Scalar b1 = static_cast<Scalar>(cfg.beta1);
  const Scalar b2 = static_cast<Scalar>(cfg.beta2);
  const Scalar eps = static_cast<Scalar>(cfg.eps);
  const std::int64_t t = state.step + 1;
  const Scalar c1 = Scalar(1) - static_cast<Scalar>(std::pow(cfg.beta1, static_cast<double>(t)));
  const Scalar c2 = Scalar(1) - static_cast<Scalar>(std::pow(cfg.beta2, static_cast<double>(t)));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix<Scalar>& g = *grads[i];
    state.m[i] = b1 * state.m[i] + (Scalar(1) - b1) * g;
    state.v[i] = b2 * state.v[i] + (Scalar(1) - b2) * g.cwiseProduct(g);
    params[i]->array() -=
        lr * (state.m[i].array() / c1) / ((state.v[i].array() / c2).sqrt() + eps);
  }
  ++state.step;
  return true;
}

}  // namespace fbsde
