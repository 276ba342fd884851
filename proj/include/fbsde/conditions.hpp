#pragma once

#include "fbsde/lipschitz.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <vector>

namespace fbsde {

struct LambdaQuad {
  double l1 = 1, l2 = 1, l3 = 1, l4 = 1;
};

inline bool lambda_in_domain(const LipschitzBundle& L, double m, const LambdaQuad& q) {
  return q.l1 > 0 && q.l2 > L.Lf_z && q.l3 > 2.0 * m * L.Lf_z && q.l4 > 0;
}

/// Limits of the per-step contraction constants as the step size vanishes.
struct LimitConstants {
  double K1 = 0, K2 = 0, K3 = 0, K4 = 0;
  double C1 = 0, C2 = 0, C3 = 0, C4 = 0;
};

inline LimitConstants limit_constants(const LipschitzBundle& L, const LambdaQuad& q, double m) {
  if (!lambda_in_domain(L, m, q))
    throw std::invalid_argument("limit_constants: lambda outside admissible domain");
  LimitConstants c;
  c.K1 = 2.0 * L.kb + q.l1 + L.Lsig_x;
  c.K2 = L.Lb_y / q.l1 + L.Lsig_y;
  c.K3 = 2.0 * L.kf + q.l2;
  c.K4 = L.Lf_x / q.l2;
  c.C1 = L.Lb_z / q.l1;
  c.C2 = 2.0 * (L.Lf_y / q.l3 + q.l3);
  c.C3 = 2.0 / q.l3;
  c.C4 = m / (1.0 - 2.0 * m * L.Lf_z / q.l3);
  return c;
}

namespace detail {
inline constexpr double kSeriesCutoff = 1e-6;

inline double phi_series(double aT, double T) {
  // T * (1 + u/2 + u^2/6 + u^3/24), u = aT
  return T * (1.0 + aT * (0.5 + aT * (1.0 / 6.0 + aT / 24.0)));
}
inline double psi_series(double aT, double T) { return phi_series(-aT, T); }
}  // namespace detail

/// phi(a, T) = (e^{aT} - 1) / a with phi(0, T) = T.
inline double phi(double a, double T) {
  const double aT = a * T;
  if (std::abs(aT) < detail::kSeriesCutoff) return detail::phi_series(aT, T);
  return std::expm1(aT) / a;
}

/// psi(a, T) = (1 - e^{-aT}) / a with psi(0, T) = T.
inline double psi(double a, double T) {
  const double aT = a * T;
  if (std::abs(aT) < detail::kSeriesCutoff) return detail::psi_series(aT, T);
  return -std::expm1(-aT) / a;
}

struct AbPair {
  double B = 0;
  double A = 0;
  double max() const { return std::max(B, A); }
};

/// Contraction constants of the a-posteriori bound at one lambda quadruple.
/// When B >= 1 the A factor (1 - B)^{-1} is undefined and A is reported as
/// +infinity.
inline AbPair ab_bar(const LipschitzBundle& L, const LambdaQuad& q, double m, double T) {
  const LimitConstants c = limit_constants(L, q, m);
  const double damp = std::exp(std::max(-c.K1 * T, 0.0));
  const double B =
      damp * c.C1 * c.C4 * (L.Lf_x * c.C3 * phi(c.K1, T) + L.Lg_x * (1.0 + q.l4) * std::exp(c.K1 * T));
  AbPair out;
  out.B = B;
  if (B >= 1.0) {
    out.A = std::numeric_limits<double>::infinity();
    return out;
  }
  const double k13 = c.K1 + c.K3;
  const double first = L.Lg_x * (1.0 + q.l4) * std::exp(k13 * T) + c.K4 * phi(k13, T);
  const double second = c.K2 * psi(k13, T) + damp * c.C1 * c.C4 * c.C2 * psi(c.K3, T);
  out.A = first / (1.0 - B) * second;
  return out;
}

struct BLowerBound {
  double value = 0;
  double arg_l1 = 0;  // infimum attained with l3 -> inf, l4 -> 0
  int branch = 1;     // 1: stationary point l1 = 1/T, 2: boundary l1 = -2kb - Lsig_x
};

/// Closed-form infimum of B over the admissible lambdas.
inline BLowerBound b_lower_bound(const LipschitzBundle& L, double m, double T) {
  if (L.Lb_z < 0) throw std::invalid_argument("b_lower_bound: Lb_z must be non-negative");
  const double l1_edge = std::max(-2.0 * L.kb - L.Lsig_x, 0.0);
  BLowerBound out;
  if (1.0 / T >= l1_edge) {
    out.branch = 1;
    out.arg_l1 = 1.0 / T;
    out.value = m * L.Lb_z * L.Lg_x * std::exp((2.0 * L.kb + 1.0 / T + L.Lsig_x) * T) * T;
  } else {
    out.branch = 2;
    out.arg_l1 = l1_edge;
    out.value = m * L.Lb_z * L.Lg_x / (-2.0 * L.kb - L.Lsig_x);
  }
  return out;
}

struct SearchConfig {
  double exp_lo = -6.0;
  double exp_hi = 6.0;
  int points_per_axis = 13;
  int refine_evals = 500;
};

struct ConditionReport {
  BLowerBound b_lower;
  LambdaQuad best_lambda;
  double best_B = std::numeric_limits<double>::infinity();
  double best_A = std::numeric_limits<double>::infinity();
  double best_max = std::numeric_limits<double>::infinity();
  bool feasible = false;
  bool short_circuited = false;  // b_lower >= 1, search skipped
  long evaluations = 0;
};

namespace detail {

/// Nelder-Mead on R^n with a fixed evaluation budget.
inline std::vector<double> nelder_mead(const std::function<double(const std::vector<double>&)>& f,
                                       std::vector<double> x0, double step, int max_evals,
                                       long* evals_out) {
  const std::size_t n = x0.size();
  struct Pt {
    std::vector<double> x;
    double v;
  };
  long evals = 0;
  auto eval = [&](const std::vector<double>& x) {
    ++evals;
    return f(x);
  };
  std::vector<Pt> simplex;
  simplex.push_back({x0, eval(x0)});
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> x = x0;
    x[i] += step;
    simplex.push_back({x, eval(x)});
  }
  auto order = [&] {
    std::sort(simplex.begin(), simplex.end(), [](const Pt& a, const Pt& b) { return a.v < b.v; });
  };
  order();
  while (evals < max_evals) {
    std::vector<double> centroid(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) centroid[j] += simplex[i].x[j];
    }
    for (double& c : centroid) c /= static_cast<double>(n);
    auto affine = [&](double t) {
      std::vector<double> x(n);
      for (std::size_t j = 0; j < n; ++j) x[j] = centroid[j] + t * (simplex[n].x[j] - centroid[j]);
      return x;
    };
    const std::vector<double> xr = affine(-1.0);
    const double vr = eval(xr);
    if (vr < simplex[0].v) {
      const std::vector<double> xe = affine(-2.0);
      const double ve = eval(xe);
      simplex[n] = ve < vr ? Pt{xe, ve} : Pt{xr, vr};
    } else if (vr < simplex[n - 1].v) {
      simplex[n] = {xr, vr};
    } else {
      const std::vector<double> xc = affine(0.5);
      const double vc = eval(xc);
      if (vc < simplex[n].v) {
        simplex[n] = {xc, vc};
      } else {
        for (std::size_t i = 1; i <= n; ++i) {
          for (std::size_t j = 0; j < n; ++j)
            simplex[i].x[j] = 0.5 * (simplex[i].x[j] + simplex[0].x[j]);
          simplex[i].v = eval(simplex[i].x);
        }
      }
    }
    order();
  }
  if (evals_out) *evals_out += evals;
  return simplex[0].x;
}

}  // namespace detail

/// Minimizes max(B, A) over the lambda domain: coarse log-space grid followed
/// by Nelder-Mead refinement from the best grid point. Short-circuits to
/// infeasible when the closed-form lower bound already certifies B >= 1.
/// Infeasibility means the sufficient conditions are violated, not that the
/// method diverges.
inline ConditionReport feasibility_search(const LipschitzBundle& L, double m, double T,
                                          const SearchConfig& cfg = {}) {
  ConditionReport rep;
  rep.b_lower = b_lower_bound(L, m, T);
  if (rep.b_lower.value >= 1.0) {
    rep.short_circuited = true;
    rep.feasible = false;
    return rep;
  }

  // Offsets from the open-domain edges, exponents in [exp_lo, exp_hi].
  auto lambda_of = [&](const std::array<double, 4>& u) {
    LambdaQuad q;
    q.l1 = std::pow(10.0, u[0]);
    q.l2 = L.Lf_z + std::pow(10.0, u[1]);
    q.l3 = 2.0 * m * L.Lf_z + std::pow(10.0, u[2]);
    q.l4 = std::pow(10.0, u[3]);
    return q;
  };
  auto objective = [&](const std::array<double, 4>& u) {
    const AbPair ab = ab_bar(L, lambda_of(u), m, T);
    return ab.max();
  };

  std::array<double, 4> best_u{};
  double best_val = std::numeric_limits<double>::infinity();
  const int P = cfg.points_per_axis;
  const double span = cfg.exp_hi - cfg.exp_lo;
  for (int i1 = 0; i1 < P; ++i1)
    for (int i2 = 0; i2 < P; ++i2)
      for (int i3 = 0; i3 < P; ++i3)
        for (int i4 = 0; i4 < P; ++i4) {
          const std::array<double, 4> u = {
              cfg.exp_lo + span * i1 / (P - 1), cfg.exp_lo + span * i2 / (P - 1),
              cfg.exp_lo + span * i3 / (P - 1), cfg.exp_lo + span * i4 / (P - 1)};
          const double v = objective(u);
          ++rep.evaluations;
          if (v < best_val) {
            best_val = v;
            best_u = u;
          }
        }

  auto obj_vec = [&](const std::vector<double>& x) {
    return objective({x[0], x[1], x[2], x[3]});
  };
  const std::vector<double> refined = detail::nelder_mead(
      obj_vec, {best_u[0], best_u[1], best_u[2], best_u[3]}, 0.25, cfg.refine_evals,
      &rep.evaluations);
  const std::array<double, 4> ru = {refined[0], refined[1], refined[2], refined[3]};
  if (objective(ru) < best_val) best_u = ru;

  rep.best_lambda = lambda_of(best_u);
  const AbPair ab = ab_bar(L, rep.best_lambda, m, T);
  rep.best_B = ab.B;
  rep.best_A = ab.A;
  rep.best_max = ab.max();
  rep.feasible = rep.best_max < 1.0;
  return rep;
}

}  // namespace fbsde
