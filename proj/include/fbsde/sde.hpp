#pragma once

#include "fbsde/problems.hpp"
#include "fbsde/rng.hpp"
#include "fbsde/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

namespace fbsde {

/// Equidistant partition of [0, T] with t_N = T exactly.
struct TimeGrid {
  int N = 1;
  double T = 1.0;
  double h() const { return T / N; }
  double node(int i) const { return T * static_cast<double>(i) / N; }
};

namespace detail {
inline constexpr std::uint64_t kBrownianTag = 0x62726f776eull;

template <typename Scalar>
void fill_increment(Matrix<Scalar>& out, std::uint64_t seed, Index step, double sd) {
  for (Index r = 0; r < out.rows(); ++r) {
    GaussianStream g(combine_keys(seed, kBrownianTag, static_cast<std::uint64_t>(r),
                                  static_cast<std::uint64_t>(step)));
    for (Index c = 0; c < out.cols(); ++c)
      out(r, c) = static_cast<Scalar>(sd * g.next());
  }
}
}  // namespace detail

/// Seeded Brownian increments on a coarse grid, optionally refined. Coarse
/// increment i is the ordered sum of its `refinement` fine children, which
/// can be regenerated on demand (they are keyed, not stored).
template <typename Scalar>
struct BrownianBatch {
  int N = 0, m = 0, batch = 0, refinement = 1;
  double T = 0;
  std::uint64_t seed = 0;
  std::vector<Matrix<Scalar>> coarse;  // N matrices, batch x m

  double fine_h() const { return T / (static_cast<double>(N) * refinement); }

  Matrix<Scalar> fine_increment(Index j) const {
    Matrix<Scalar> out(batch, m);
    detail::fill_increment(out, seed, j, std::sqrt(fine_h()));
    return out;
  }
};

template <typename Scalar>
BrownianBatch<Scalar> sample_brownian(const TimeGrid& grid, int m, int batch, std::uint64_t seed,
                                      int refinement = 1) {
  if (grid.N < 1 || m < 1 || batch < 1 || refinement < 1)
    throw std::invalid_argument("sample_brownian: all sizes must be >= 1");
  BrownianBatch<Scalar> b;
  b.N = grid.N;
  b.m = m;
  b.batch = batch;
  b.refinement = refinement;
  b.T = grid.T;
  b.seed = seed;
  b.coarse.reserve(grid.N);
  Matrix<Scalar> child(batch, m);
  const double sd = std::sqrt(b.fine_h());
  for (int i = 0; i < grid.N; ++i) {
    Matrix<Scalar> acc = Matrix<Scalar>::Zero(batch, m);
    for (int k = 0; k < refinement; ++k) {
      detail::fill_increment(child, seed, static_cast<Index>(i) * refinement + k, sd);
      acc += child;
    }
    b.coarse.push_back(std::move(acc));
  }
  return b;
}

/// Supplies Y0 and the per-step Z along a rollout. When `y_field` is set the
/// backward recursion is replaced by direct evaluation of the decoupling
/// field (the reference mode).
template <typename Scalar>
struct RolloutPolicy {
  std::function<Matrix<Scalar>(const Matrix<Scalar>&)> y0;
  std::function<Matrix<Scalar>(int, double, const Matrix<Scalar>&)> z;
  std::function<Matrix<Scalar>(double, const Matrix<Scalar>&)> y_field;
};

template <typename Scalar>
RolloutPolicy<Scalar> field_policy(const FbsdeProblem<Scalar>& prob) {
  if (!prob.has_fields()) throw std::invalid_argument("field_policy: problem has no fields");
  RolloutPolicy<Scalar> pol;
  pol.y0 = [&prob](const Matrix<Scalar>& x) { return prob.y_field(0.0, x); };
  pol.z = [&prob](int, double t, const Matrix<Scalar>& x) { return prob.z_field(t, x); };
  pol.y_field = prob.y_field;
  return pol;
}

template <typename Scalar>
struct TrajectoryBatch {
  std::vector<Matrix<Scalar>> X;  // N+1 of batch x d
  std::vector<Matrix<Scalar>> Y;  // N+1 of batch x q
  std::vector<Matrix<Scalar>> Z;  // N   of batch x (q*m)
  std::vector<std::uint8_t> diverged;

  Index n_diverged() const {
    Index n = 0;
    for (auto f : diverged) n += f;
    return n;
  }
};

/// Row-major (q x m) blocks times per-row m-vectors.
template <typename Scalar>
Matrix<Scalar> rowwise_matvec_plain(const Matrix<Scalar>& z, const Matrix<Scalar>& dw, Index q,
                                    Index m) {
  Matrix<Scalar> out(z.rows(), q);
  for (Index j = 0; j < q; ++j)
    out.col(j) = (z.middleCols(j * m, m).array() * dw.array()).rowwise().sum();
  return out;
}

/// Forward Euler-Maruyama pass of the coupled scheme:
///   X_{i+1} = X_i + b(t_i, X_i, Y_i, Z_i) h + sigma(t_i, X_i, Y_i) dW_i
///   Y_{i+1} = Y_i - f(t_i, X_i, Y_i, Z_i) h + Z_i dW_i
/// with Y_0 and Z_i supplied by the policy.
template <typename Scalar>
TrajectoryBatch<Scalar> euler_rollout(const FbsdeProblem<Scalar>& prob,
                                      const RolloutPolicy<Scalar>& policy, const TimeGrid& grid,
                                      const BrownianBatch<Scalar>& noise) {
  if (noise.N != grid.N || noise.m != prob.m)
    throw std::invalid_argument("euler_rollout: noise does not match grid/problem");
  const Index batch = noise.batch;
  const Scalar h = static_cast<Scalar>(grid.h());
  TrajectoryBatch<Scalar> traj;
  traj.diverged.assign(static_cast<std::size_t>(batch), 0);
  traj.X.reserve(grid.N + 1);
  traj.Y.reserve(grid.N + 1);
  traj.Z.reserve(grid.N);

  traj.X.push_back(prob.x0.transpose().replicate(batch, 1));
  traj.Y.push_back(policy.y_field ? policy.y_field(0.0, traj.X[0]) : policy.y0(traj.X[0]));
  for (int i = 0; i < grid.N; ++i) {
    const double t = grid.node(i);
    const Matrix<Scalar>& X = traj.X.back();
    const Matrix<Scalar>& Y = traj.Y.back();
    traj.Z.push_back(policy.z(i, t, X));
    const Matrix<Scalar>& Z = traj.Z.back();
    Matrix<Scalar> Xn =
        X + h * prob.drift(t, X, Y, Z) + prob.diffusion_dw(t, X, Y, noise.coarse[i]);
    Matrix<Scalar> Yn;
    if (policy.y_field) {
      Yn = policy.y_field(grid.node(i + 1), Xn);
    } else {
      Yn = Y - h * prob.driver(t, X, Y, Z) +
           rowwise_matvec_plain(Z, noise.coarse[i], prob.q, prob.m);
    }
    update_diverged_rows(Xn, traj.diverged);
    update_diverged_rows(Yn, traj.diverged);
    traj.X.push_back(std::move(Xn));
    traj.Y.push_back(std::move(Yn));
  }
  return traj;
}

/// Simulates X on the refined grid with the decoupling fields substituted for
/// (Y, Z) and samples (X, y(t,X), z(t,X)) at the coarse nodes. Consumes the
/// fine children of `noise`, so the result is coupled to the coarse
/// increments exactly.
template <typename Scalar>
TrajectoryBatch<Scalar> reference_rollout(const FbsdeProblem<Scalar>& prob, const TimeGrid& grid,
                                          const BrownianBatch<Scalar>& noise) {
  if (!prob.has_fields())
    throw std::invalid_argument("reference_rollout: problem has no decoupling fields");
  if (noise.N != grid.N) throw std::invalid_argument("reference_rollout: grid mismatch");
  if (noise.refinement == 1) return euler_rollout(prob, field_policy(prob), grid, noise);

  const Index batch = noise.batch;
  const int R = noise.refinement;
  const double hf = noise.fine_h();
  TrajectoryBatch<Scalar> traj;
  traj.diverged.assign(static_cast<std::size_t>(batch), 0);
  Matrix<Scalar> X = prob.x0.transpose().replicate(batch, 1);
  traj.X.push_back(X);
  traj.Y.push_back(prob.y_field(0.0, X));
  for (int i = 0; i < grid.N; ++i) {
    traj.Z.push_back(prob.z_field(grid.node(i), X));
    for (int k = 0; k < R; ++k) {
      const double t = grid.T * (static_cast<double>(i) * R + k) / (static_cast<double>(grid.N) * R);
      const Matrix<Scalar> y = prob.y_field(t, X);
      const Matrix<Scalar> z = prob.z_field(t, X);
      X += static_cast<Scalar>(hf) * prob.drift(t, X, y, z) +
           prob.diffusion_dw(t, X, y, noise.fine_increment(static_cast<Index>(i) * R + k));
    }
    update_diverged_rows(X, traj.diverged);
    traj.X.push_back(X);
    traj.Y.push_back(prob.y_field(grid.node(i + 1), X));
  }
  return traj;
}

}  // namespace fbsde
