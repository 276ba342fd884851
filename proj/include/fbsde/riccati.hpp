#pragma once

#include "fbsde/problems.hpp"
#include "fbsde/tensor.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace fbsde {

/// Mesh solution of the backward matrix Riccati system
///   -dP/dt = M_x^T P + P M_x - P M_u R_u^{-1} M_u^T P + R_x,  P(T) = G
///   -dc/dt = 1/2 tr(Sigma Sigma^T P),                         c(T) = 0
/// with linear interpolation in t between nodes.
struct RiccatiSolution {
  double T = 0;
  int steps = 0;
  std::vector<Matrix<double>> P;  // steps+1 nodes, ascending in t
  std::vector<double> c;

  double node(int i) const { return T * static_cast<double>(i) / steps; }

  Matrix<double> P_at(double t) const { return interp(t, P); }

  double c_at(double t) const {
    const auto [i, w] = locate(t);
    return (1.0 - w) * c[static_cast<std::size_t>(i)] + w * c[static_cast<std::size_t>(i) + 1];
  }

  double max_asymmetry() const {
    double worst = 0;
    for (const auto& Pk : P) worst = std::max(worst, (Pk - Pk.transpose()).cwiseAbs().maxCoeff());
    return worst;
  }

 private:
  std::pair<int, double> locate(double t) const {
    if (t <= 0) return {0, 0.0};
    if (t >= T) return {steps - 1, 1.0};
    const double s = t / T * steps;
    int i = static_cast<int>(s);
    if (i >= steps) i = steps - 1;
    return {i, s - i};
  }
  Matrix<double> interp(double t, const std::vector<Matrix<double>>& v) const {
    const auto [i, w] = locate(t);
    return (1.0 - w) * v[static_cast<std::size_t>(i)] + w * v[static_cast<std::size_t>(i) + 1];
  }
};

/// Classical RK4 backward from P(T) = G, symmetrizing after every step.
/// Throws on blow-up (||P|| beyond the divergence bound), reporting the time.
inline RiccatiSolution solve_riccati(const LqParams& lq, double T, int steps) {
  lq.validate();
  if (steps < 1) throw std::invalid_argument("solve_riccati: steps must be >= 1");
  if (T <= 0) throw std::invalid_argument("solve_riccati: T must be positive");
  const Matrix<double> A = lq.M_u * (1.0 / lq.R_u) * lq.M_u.transpose();
  const Matrix<double> SS =
      Matrix<double>(Vector<double>(lq.Sigma_diag.array().square()).asDiagonal());
  const Matrix<double> MxT = lq.M_x.transpose();

  // In tau = T - t the pair (Q, c) flows forward from (G, 0):
  //   dQ/dtau = M_x^T Q + Q M_x - Q A Q + R_x,  dc/dtau = 1/2 tr(Sigma Sigma^T Q)
  auto fQ = [&](const Matrix<double>& Q) -> Matrix<double> {
    return MxT * Q + Q * lq.M_x - Q * A * Q + lq.R_x;
  };
  auto fc = [&](const Matrix<double>& Q) { return 0.5 * (SS * Q).trace(); };

  RiccatiSolution sol;
  sol.T = T;
  sol.steps = steps;
  sol.P.resize(static_cast<std::size_t>(steps) + 1);
  sol.c.resize(static_cast<std::size_t>(steps) + 1);
  const double ht = T / steps;
  Matrix<double> Q = lq.G;
  double c = 0.0;
  sol.P[static_cast<std::size_t>(steps)] = Q;
  sol.c[static_cast<std::size_t>(steps)] = c;
  for (int k = 0; k < steps; ++k) {
    const Matrix<double> k1 = fQ(Q);
    const double l1 = fc(Q);
    const Matrix<double> k2 = fQ(Q + 0.5 * ht * k1);
    const double l2 = fc(Q + 0.5 * ht * k1);
    const Matrix<double> k3 = fQ(Q + 0.5 * ht * k2);
    const double l3 = fc(Q + 0.5 * ht * k2);
    const Matrix<double> k4 = fQ(Q + ht * k3);
    const double l4 = fc(Q + ht * k3);
    Q += ht / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    Q = 0.5 * (Q + Q.transpose()).eval();
    c += ht / 6.0 * (l1 + 2.0 * l2 + 2.0 * l3 + l4);
    if (!Q.allFinite() || Q.cwiseAbs().maxCoeff() > kDivergenceBound)
      throw std::runtime_error("solve_riccati: blow-up at t = " +
                               std::to_string(T - ht * (k + 1)));
    sol.P[static_cast<std::size_t>(steps - 1 - k)] = Q;
    sol.c[static_cast<std::size_t>(steps - 1 - k)] = c;
  }
  return sol;
}

/// Value-function decoupling: y = 1/2 x^T P(t) x + c(t), z = x^T P(t) Sigma.
template <typename Scalar>
void attach_dp_fields(FbsdeProblem<Scalar>& prob, const RiccatiSolution& sol, const LqParams& lq) {
  const Matrix<double> Sigma = Matrix<double>(Vector<double>(lq.Sigma_diag).asDiagonal());
  prob.y_field = [sol](double t, const Matrix<Scalar>& x) -> Matrix<Scalar> {
    const Matrix<double> xd = x.template cast<double>();
    const Matrix<double> P = sol.P_at(t);
    Matrix<double> y = 0.5 * (xd * P).cwiseProduct(xd).rowwise().sum();
    y.array() += sol.c_at(t);
    return y.cast<Scalar>();
  };
  prob.z_field = [sol, Sigma](double t, const Matrix<Scalar>& x) -> Matrix<Scalar> {
    const Matrix<double> xd = x.template cast<double>();
    return (xd * (sol.P_at(t) * Sigma)).cast<Scalar>();
  };
}

/// Adjoint decoupling: y = -P(t) x, z = -P(t) Sigma (constant in x).
template <typename Scalar>
void attach_smp_fields(FbsdeProblem<Scalar>& prob, const RiccatiSolution& sol,
                       const LqParams& lq) {
  const Matrix<double> Sigma = Matrix<double>(Vector<double>(lq.Sigma_diag).asDiagonal());
  prob.y_field = [sol](double t, const Matrix<Scalar>& x) -> Matrix<Scalar> {
    const Matrix<double> xd = x.template cast<double>();
    return (-(xd * sol.P_at(t).transpose())).cast<Scalar>();
  };
  prob.z_field = [sol, Sigma](double t, const Matrix<Scalar>& x) -> Matrix<Scalar> {
    const Matrix<double> PS = -(sol.P_at(t) * Sigma);
    const Index d = PS.rows(), m = PS.cols();
    Matrix<double> row(1, d * m);
    for (Index i = 0; i < d; ++i)
      for (Index j = 0; j < m; ++j) row(0, i * m + j) = PS(i, j);
    return Matrix<double>(row.replicate(x.rows(), 1)).cast<Scalar>();
  };
}

template <typename Scalar>
void attach_riccati_fields(FbsdeProblem<Scalar>& prob, const RiccatiSolution& sol,
                           const LqParams& lq) {
  if (prob.kind == ProblemKind::lq_dp)
    attach_dp_fields(prob, sol, lq);
  else if (prob.kind == ProblemKind::lq_smp)
    attach_smp_fields(prob, sol, lq);
  else
    throw std::invalid_argument("attach_riccati_fields: not an LQ problem");
}

}  // namespace fbsde
