#pragma once

#include <cmath>
#include <stdexcept>

namespace fbsde {

/// Squared Lipschitz constants of the coefficient functions plus the
/// one-sided monotonicity constants kb, kf (possibly negative).
struct LipschitzBundle {
  double Lb_x = 0, Lb_y = 0, Lb_z = 0;
  double Lsig_x = 0, Lsig_y = 0;
  double Lf_x = 0, Lf_y = 0, Lf_z = 0;
  double Lg_x = 0;
  double kb = 0, kf = 0;

  void validate() const {
    const double L[] = {Lb_x, Lb_y, Lb_z, Lsig_x, Lsig_y, Lf_x, Lf_y, Lf_z, Lg_x};
    for (double v : L)
      if (!(v >= 0)) throw std::invalid_argument("LipschitzBundle: negative constant");
    if (kb > std::sqrt(Lb_x) + 1e-12)
      throw std::invalid_argument("LipschitzBundle: kb exceeds sqrt(Lb_x)");
    if (kf > std::sqrt(Lf_y) + 1e-12)
      throw std::invalid_argument("LipschitzBundle: kf exceeds sqrt(Lf_y)");
  }
};

}  // namespace fbsde
