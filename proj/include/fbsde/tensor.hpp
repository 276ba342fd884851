#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <vector>

namespace fbsde {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Index = Eigen::Index;

/// Any state component beyond this magnitude marks a path as diverged.
inline constexpr double kDivergenceBound = 1e12;

template <typename Scalar>
bool is_divergent_value(Scalar v) {
  return !std::isfinite(static_cast<double>(v)) ||
         std::abs(static_cast<double>(v)) > kDivergenceBound;
}

/// Flags rows of `state` whose entries are non-finite or beyond the
/// divergence bound. Already-flagged rows stay flagged.
template <typename Scalar>
void update_diverged_rows(const Matrix<Scalar>& state, std::vector<std::uint8_t>& flags) {
  for (Index r = 0; r < state.rows(); ++r) {
    if (flags[static_cast<std::size_t>(r)]) continue;
    for (Index c = 0; c < state.cols(); ++c) {
      if (is_divergent_value(state(r, c))) {
        flags[static_cast<std::size_t>(r)] = 1;
        break;
      }
    }
  }
}

}  // namespace fbsde
