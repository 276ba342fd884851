#pragma once

#include "fbsde/lipschitz.hpp"
#include "fbsde/tape.hpp"
#include "fbsde/tensor.hpp"

#include <cmath>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>

namespace fbsde {

enum class ProblemKind { example1, example1_reformulated, lq_dp, lq_smp };

inline const char* kind_name(ProblemKind k) {
  switch (k) {
    case ProblemKind::example1: return "example1";
    case ProblemKind::example1_reformulated: return "example1_reformulated";
    case ProblemKind::lq_dp: return "lq_dp";
    case ProblemKind::lq_smp: return "lq_smp";
  }
  return "?";
}

/// Largest singular value by power iteration on A^T A.
inline double spectral_norm(const Matrix<double>& A, double tol = 1e-10, int max_iter = 100000) {
  if (A.size() == 0) return 0.0;
  const Matrix<double> G = A.transpose() * A;
  Vector<double> v(G.rows());
  for (Index i = 0; i < v.size(); ++i) v(i) = 1.0 + static_cast<double>(i) / (v.size() + 1.0);
  v.normalize();
  double s = 0.0;
  for (int it = 0; it < max_iter; ++it) {
    Vector<double> w = G * v;
    const double s_new = w.norm();
    if (s_new == 0.0) return 0.0;
    v = w / s_new;
    if (it > 0 && std::abs(s_new - s) <= tol * std::abs(s_new)) {
      s = s_new;
      break;
    }
    s = s_new;
  }
  return std::sqrt(s);
}

/// Largest (signed) eigenvalue of the symmetric part of M.
inline double sym_max_eigenvalue(const Matrix<double>& M, double tol = 1e-10) {
  const Matrix<double> S = 0.5 * (M + M.transpose());
  const double c = spectral_norm(S, tol) + 1.0;
  const Matrix<double> B = S + c * Matrix<double>::Identity(S.rows(), S.cols());
  Vector<double> v(B.rows());
  for (Index i = 0; i < v.size(); ++i) v(i) = 1.0 + static_cast<double>(i) / (v.size() + 1.0);
  v.normalize();
  double mu = 0.0;
  for (int it = 0; it < 100000; ++it) {
    Vector<double> w = B * v;
    const double mu_new = w.norm();
    v = w / mu_new;
    if (it > 0 && std::abs(mu_new - mu) <= tol * std::abs(mu_new)) {
      mu = mu_new;
      break;
    }
    mu = mu_new;
  }
  return mu - c;
}

struct Example1Params {
  int d = 10;
  double r = 1.0;
  double sigma_bar = 0.1;
  double kappa_y = 0.1;
  double kappa_z = 0.01;
};

struct LqParams {
  Matrix<double> M_x;
  Vector<double> M_u;
  Vector<double> M_c;
  Vector<double> Sigma_diag;
  Matrix<double> R_x;
  double R_u = 2.0;
  Matrix<double> G;
  double r_x = 1.0;   // localization radius for ||x||
  double r_z = 10.0;  // localization radius for ||z||

  Index dim() const { return M_x.rows(); }

  void validate() const {
    const Index d = dim();
    if (M_x.cols() != d || M_u.size() != d || M_c.size() != d || Sigma_diag.size() != d ||
        R_x.rows() != d || R_x.cols() != d || G.rows() != d || G.cols() != d)
      throw std::invalid_argument("LqParams: dimension mismatch");
    if (R_u <= 0) throw std::invalid_argument("LqParams: R_u must be positive");
    for (Index i = 0; i < d; ++i)
      if (Sigma_diag(i) == 0.0) throw std::invalid_argument("LqParams: Sigma must be invertible");
  }
};

/// The 25-dimensional linear-quadratic benchmark coefficients. `mu_scale`
/// divides M_u (the "rescaled" variant uses 150).
inline LqParams lq_benchmark_params(double mu_scale = 1.0) {
  constexpr int d = 25;
  LqParams p;
  p.M_x = Matrix<double>::Zero(d, d);
  const double mx_pattern[3] = {1, 2, 3};
  for (int i = 0; i < d; ++i) p.M_x(i, i) = -mx_pattern[i % 3];
  const double mu_pattern[6] = {1, 1, 0.5, 1, 0, 0};
  p.M_u.resize(d);
  for (int i = 0; i < d; ++i) p.M_u(i) = mu_pattern[i % 6] / mu_scale;
  const double mc_pattern[6] = {-0.2, -0.1, 0, 0, 0.1, 0.2};
  Vector<double> base(d);
  for (int i = 0; i < d; ++i) base(i) = mc_pattern[i % 6];
  p.M_c = -p.M_x * base;
  p.Sigma_diag.resize(d);
  for (int i = 0; i < d; ++i) p.Sigma_diag(i) = 0.25;
  p.Sigma_diag(0) = p.Sigma_diag(1) = p.Sigma_diag(12) = p.Sigma_diag(13) = 0.15;
  p.R_x = Matrix<double>::Zero(d, d);
  for (int i = 0; i < d; ++i) p.R_x(i, i) = 2.0 * (i % 2 == 0 ? 25.0 : 1.0);
  p.R_u = 2.0;
  const double g_pattern[25] = {25, 25, 25, 25, 25, 25, 1, 25, 1, 25, 1, 25, 25,
                                25, 25, 25, 25, 25, 1,  25, 1, 25, 1, 25, 1};
  p.G = Matrix<double>::Zero(d, d);
  for (int i = 0; i < d; ++i) p.G(i, i) = 2.0 * g_pattern[i];
  return p;
}

/// A fully coupled FBSDE with batched coefficient evaluation. Rows of x, y
/// are samples; z rows hold row-major (q x m) blocks. The *_t builders emit
/// the same arithmetic onto an autodiff tape. Optional decoupling fields give
/// the semi-analytic reference solution.
template <typename Scalar>
struct FbsdeProblem {
  using Mat = Matrix<Scalar>;

  ProblemKind kind = ProblemKind::example1;
  Index d = 0, m = 0, q = 0;
  double T = 0;
  Vector<Scalar> x0;

  std::function<Mat(double, const Mat&, const Mat&, const Mat&)> drift;         // (t,x,y,z)
  std::function<Mat(double, const Mat&, const Mat&, const Mat&)> diffusion_dw;  // (t,x,y,dw)
  std::function<Mat(double, const Mat&, const Mat&)> diffusion;  // flattened d x m blocks
  std::function<Mat(double, const Mat&, const Mat&, const Mat&)> driver;        // (t,x,y,z)
  std::function<Mat(const Mat&)> terminal;

  std::function<Var(Tape<Scalar>&, double, Var, Var, Var)> drift_t;
  std::function<Var(Tape<Scalar>&, double, Var, Var, Var)> diffusion_dw_t;
  std::function<Var(Tape<Scalar>&, double, Var, Var, Var)> driver_t;
  std::function<Var(Tape<Scalar>&, Var)> terminal_t;

  std::function<Mat(double, const Mat&)> y_field, z_field;
  bool has_fields() const { return static_cast<bool>(y_field) && static_cast<bool>(z_field); }
};

namespace detail {

/// Plain batched evaluation context.
template <typename Scalar>
struct PlainCtx {
  using Value = Matrix<Scalar>;
  Value constant(Matrix<Scalar> m) const { return m; }
  Value add(const Value& a, const Value& b) const { return a + b; }
  Value sub(const Value& a, const Value& b) const { return a - b; }
  Value cmul(const Value& a, const Value& b) const { return a.cwiseProduct(b); }
  Value cdiv(const Value& a, const Value& b) const { return a.cwiseQuotient(b); }
  Value matmul_c(const Value& a, const Matrix<Scalar>& w) const { return a * w; }
  Value scale(const Value& a, double c) const { return static_cast<Scalar>(c) * a; }
  Value broadcast_cols(const Value& a, Index k) const { return a.replicate(1, k); }
  Value rowsum(const Value& a) const { return a.rowwise().sum(); }
  Value sin(const Value& a) const { return a.array().sin(); }
  Value cos(const Value& a) const { return a.array().cos(); }
};

/// Tape-building context emitting the same arithmetic as autodiff nodes.
template <typename Scalar>
struct TapeCtx {
  Tape<Scalar>* tape;
  using Value = Var;
  Value constant(Matrix<Scalar> m) const { return tape->constant(std::move(m)); }
  Value add(Value a, Value b) const { return fbsde::add(*tape, a, b); }
  Value sub(Value a, Value b) const { return fbsde::sub(*tape, a, b); }
  Value cmul(Value a, Value b) const { return fbsde::cmul(*tape, a, b); }
  Value cdiv(Value a, Value b) const { return fbsde::cdiv(*tape, a, b); }
  Value matmul_c(Value a, const Matrix<Scalar>& w) const {
    return fbsde::matmul(*tape, a, tape->constant(w));
  }
  Value scale(Value a, double c) const { return fbsde::scale(*tape, a, static_cast<Scalar>(c)); }
  Value broadcast_cols(Value a, Index k) const { return fbsde::broadcast_cols(*tape, a, k); }
  Value rowsum(Value a) const { return fbsde::rowsum(*tape, a); }
  Value sin(Value a) const { return fbsde::sin(*tape, a); }
  Value cos(Value a) const { return fbsde::cos(*tape, a); }
};

template <typename Ctx, typename V = typename Ctx::Value>
V ex1_drift(const Ctx& cx, const Example1Params& p, const V& y, const V& z, bool reformulated) {
  V term = cx.scale(cx.broadcast_cols(y, p.d), p.kappa_y * p.sigma_bar);
  if (reformulated) return term;
  return cx.add(term, cx.scale(z, p.kappa_z));
}

template <typename Ctx, typename V = typename Ctx::Value>
V ex1_diffusion_dw(const Ctx& cx, const Example1Params& p, const V& y, const V& dw) {
  return cx.scale(cx.cmul(cx.broadcast_cols(y, p.d), dw), p.sigma_bar);
}

template <typename Ctx, typename V = typename Ctx::Value>
V ex1_driver(const Ctx& cx, const Example1Params& p, double T, double t, const V& x, const V& y,
             const V& z, bool reformulated) {
  const double damp = std::exp(-3.0 * p.r * (T - t));
  V S = cx.rowsum(cx.sin(x));
  V cosx = cx.cos(x);
  V C = cx.rowsum(cx.cmul(cosx, cosx));
  V f = cx.scale(y, -p.r);
  f = cx.add(f, cx.scale(cx.cmul(S, cx.cmul(S, S)), 0.5 * damp * p.sigma_bar * p.sigma_bar));
  f = cx.add(f, cx.scale(cx.rowsum(z), -p.kappa_y));
  f = cx.add(f, cx.scale(cx.cmul(S, C), -p.kappa_z * p.sigma_bar * damp));
  if (reformulated) {
    // quadratic-over-y term; singular as y -> 0
    V zn = cx.rowsum(cx.cmul(z, z));
    f = cx.add(f, cx.scale(cx.cdiv(zn, cx.scale(y, p.sigma_bar)), p.kappa_z));
  }
  return f;
}

template <typename Ctx, typename V = typename Ctx::Value>
V ex1_terminal(const Ctx& cx, const V& x) {
  return cx.rowsum(cx.sin(x));
}

/// Constant matrices shared by the LQ coefficient functions.
template <typename Scalar>
struct LqPrecomp {
  Matrix<Scalar> Mx_T, A, Sinv, Rx, G, Sigma;
  Index d = 0;
};

template <typename Scalar>
LqPrecomp<Scalar> lq_precompute(const LqParams& p) {
  LqPrecomp<Scalar> pre;
  pre.d = p.dim();
  const Matrix<double> A = p.M_u * (1.0 / p.R_u) * p.M_u.transpose();
  pre.Mx_T = p.M_x.transpose().cast<Scalar>();
  pre.A = A.cast<Scalar>();
  pre.Sinv = Vector<double>(p.Sigma_diag.cwiseInverse()).asDiagonal().toDenseMatrix().cast<Scalar>();
  pre.Rx = p.R_x.cast<Scalar>();
  pre.G = p.G.cast<Scalar>();
  pre.Sigma = Vector<double>(p.Sigma_diag).asDiagonal().toDenseMatrix().cast<Scalar>();
  return pre;
}

template <typename Ctx, typename S, typename V = typename Ctx::Value>
V lq_dp_drift(const Ctx& cx, const LqPrecomp<S>& pre, const V& x, const V& z) {
  return cx.sub(cx.matmul_c(x, pre.Mx_T), cx.matmul_c(cx.matmul_c(z, pre.Sinv), pre.A));
}

template <typename Ctx, typename S, typename V = typename Ctx::Value>
V lq_dp_driver(const Ctx& cx, const LqPrecomp<S>& pre, const V& x, const V& z) {
  V v = cx.matmul_c(z, pre.Sinv);
  V quad_z = cx.rowsum(cx.cmul(cx.matmul_c(v, pre.A), v));
  V quad_x = cx.rowsum(cx.cmul(cx.matmul_c(x, pre.Rx), x));
  return cx.scale(cx.add(quad_x, quad_z), 0.5);
}

template <typename Ctx, typename S, typename V = typename Ctx::Value>
V lq_smp_drift(const Ctx& cx, const LqPrecomp<S>& pre, const V& x, const V& y) {
  return cx.add(cx.matmul_c(x, pre.Mx_T), cx.matmul_c(y, pre.A));
}

template <typename Ctx, typename S, typename V = typename Ctx::Value>
V lq_smp_driver(const Ctx& cx, const LqPrecomp<S>& pre, const V& x, const V& y) {
  return cx.sub(cx.matmul_c(y, pre.Mx_T), cx.matmul_c(x, pre.Rx));
}

}  // namespace detail

template <typename Scalar>
FbsdeProblem<Scalar> make_example1(const Example1Params& p, double T, bool reformulated = false,
                                   std::optional<Vector<Scalar>> x0 = std::nullopt) {
  if (p.sigma_bar <= 0) throw std::invalid_argument("example1: sigma_bar must be positive");
  if (T <= 0) throw std::invalid_argument("example1: T must be positive");
  FbsdeProblem<Scalar> prob;
  prob.kind = reformulated ? ProblemKind::example1_reformulated : ProblemKind::example1;
  prob.d = p.d;
  prob.m = p.d;
  prob.q = 1;
  prob.T = T;
  prob.x0 = x0 ? *x0
               : Vector<Scalar>::Constant(p.d, static_cast<Scalar>(0.78539816339744830961));
  using Mat = Matrix<Scalar>;
  detail::PlainCtx<Scalar> pc;

  prob.drift = [p, reformulated, pc](double, const Mat&, const Mat& y, const Mat& z) {
    return detail::ex1_drift(pc, p, y, z, reformulated);
  };
  prob.diffusion_dw = [p, pc](double, const Mat&, const Mat& y, const Mat& dw) {
    return detail::ex1_diffusion_dw(pc, p, y, dw);
  };
  prob.diffusion = [p](double, const Mat& x, const Mat& y) {
    Mat out = Mat::Zero(x.rows(), static_cast<Index>(p.d) * p.d);
    for (Index i = 0; i < p.d; ++i)
      out.col(i * p.d + i) = static_cast<Scalar>(p.sigma_bar) * y.col(0);
    return out;
  };
  prob.driver = [p, T, reformulated, pc](double t, const Mat& x, const Mat& y, const Mat& z) {
    return detail::ex1_driver(pc, p, T, t, x, y, z, reformulated);
  };
  prob.terminal = [pc](const Mat& x) { return detail::ex1_terminal(pc, x); };

  prob.drift_t = [p, reformulated](Tape<Scalar>& t, double, Var, Var y, Var z) {
    detail::TapeCtx<Scalar> cx{&t};
    return detail::ex1_drift(cx, p, y, z, reformulated);
  };
  prob.diffusion_dw_t = [p](Tape<Scalar>& t, double, Var, Var y, Var dw) {
    detail::TapeCtx<Scalar> cx{&t};
    return detail::ex1_diffusion_dw(cx, p, y, dw);
  };
  prob.driver_t = [p, T, reformulated](Tape<Scalar>& tp, double t, Var x, Var y, Var z) {
    detail::TapeCtx<Scalar> cx{&tp};
    return detail::ex1_driver(cx, p, T, t, x, y, z, reformulated);
  };
  prob.terminal_t = [](Tape<Scalar>& t, Var x) {
    detail::TapeCtx<Scalar> cx{&t};
    return detail::ex1_terminal(cx, x);
  };

  // y(t,x) = e^{-r(T-t)} sum_i sin(x_i),
  // z_i(t,x) = e^{-2r(T-t)} sigma_bar (sum_j sin(x_j)) cos(x_i)
  prob.y_field = [p, T](double t, const Mat& x) -> Mat {
    return static_cast<Scalar>(std::exp(-p.r * (T - t))) * x.array().sin().rowwise().sum();
  };
  prob.z_field = [p, T](double t, const Mat& x) -> Mat {
    const Scalar c = static_cast<Scalar>(std::exp(-2.0 * p.r * (T - t)) * p.sigma_bar);
    Vector<Scalar> S = x.array().sin().rowwise().sum();
    return c * (x.array().cos().colwise() * S.array()).matrix();
  };
  return prob;
}

template <typename Scalar>
FbsdeProblem<Scalar> make_lq(const LqParams& p, double T, bool smp,
                             std::optional<Vector<Scalar>> x0 = std::nullopt) {
  p.validate();
  if (T <= 0) throw std::invalid_argument("lq: T must be positive");
  const Index d = p.dim();
  FbsdeProblem<Scalar> prob;
  prob.kind = smp ? ProblemKind::lq_smp : ProblemKind::lq_dp;
  prob.d = d;
  prob.m = d;
  prob.q = smp ? d : 1;
  prob.T = T;
  prob.x0 = x0 ? *x0 : Vector<Scalar>::Constant(d, static_cast<Scalar>(0.1));
  using Mat = Matrix<Scalar>;
  const auto pre = detail::lq_precompute<Scalar>(p);
  detail::PlainCtx<Scalar> pc;

  prob.diffusion_dw = [pre, pc](double, const Mat&, const Mat&, const Mat& dw) {
    return pc.matmul_c(dw, pre.Sigma);
  };
  prob.diffusion = [pre](double, const Mat& x, const Mat&) {
    Matrix<Scalar> flat(1, pre.d * pre.d);
    for (Index i = 0; i < pre.d; ++i)
      for (Index j = 0; j < pre.d; ++j) flat(0, i * pre.d + j) = pre.Sigma(i, j);
    return Mat(flat.replicate(x.rows(), 1));
  };
  prob.diffusion_dw_t = [pre](Tape<Scalar>& t, double, Var, Var, Var dw) {
    detail::TapeCtx<Scalar> cx{&t};
    return cx.matmul_c(dw, pre.Sigma);
  };

  if (smp) {
    prob.drift = [pre, pc](double, const Mat& x, const Mat& y, const Mat&) {
      return detail::lq_smp_drift(pc, pre, x, y);
    };
    prob.driver = [pre, pc](double, const Mat& x, const Mat& y, const Mat&) {
      return detail::lq_smp_driver(pc, pre, x, y);
    };
    prob.terminal = [pre, pc](const Mat& x) { return pc.scale(pc.matmul_c(x, pre.G), -1.0); };
    prob.drift_t = [pre](Tape<Scalar>& t, double, Var x, Var y, Var) {
      detail::TapeCtx<Scalar> cx{&t};
      return detail::lq_smp_drift(cx, pre, x, y);
    };
    prob.driver_t = [pre](Tape<Scalar>& t, double, Var x, Var y, Var) {
      detail::TapeCtx<Scalar> cx{&t};
      return detail::lq_smp_driver(cx, pre, x, y);
    };
    prob.terminal_t = [pre](Tape<Scalar>& t, Var x) {
      detail::TapeCtx<Scalar> cx{&t};
      return cx.scale(cx.matmul_c(x, pre.G), -1.0);
    };
  } else {
    prob.drift = [pre, pc](double, const Mat& x, const Mat&, const Mat& z) {
      return detail::lq_dp_drift(pc, pre, x, z);
    };
    prob.driver = [pre, pc](double, const Mat& x, const Mat&, const Mat& z) {
      return detail::lq_dp_driver(pc, pre, x, z);
    };
    prob.terminal = [pre, pc](const Mat& x) {
      return pc.scale(pc.rowsum(pc.cmul(pc.matmul_c(x, pre.G), x)), 0.5);
    };
    prob.drift_t = [pre](Tape<Scalar>& t, double, Var x, Var, Var z) {
      detail::TapeCtx<Scalar> cx{&t};
      return detail::lq_dp_drift(cx, pre, x, z);
    };
    prob.driver_t = [pre](Tape<Scalar>& t, double, Var x, Var, Var z) {
      detail::TapeCtx<Scalar> cx{&t};
      return detail::lq_dp_driver(cx, pre, x, z);
    };
    prob.terminal_t = [pre](Tape<Scalar>& t, Var x) {
      detail::TapeCtx<Scalar> cx{&t};
      return cx.scale(cx.rowsum(cx.cmul(cx.matmul_c(x, pre.G), x)), 0.5);
    };
  }
  return prob;
}

/// Constants for the sine benchmark. The y coupling enters the drift through
/// y * 1_d, whose squared Frobenius sensitivity carries a factor d.
inline LipschitzBundle lipschitz_constants(const Example1Params& p) {
  LipschitzBundle L;
  const double d = p.d;
  L.Lg_x = d;
  L.Lb_y = 2.0 * d * (p.kappa_y * p.sigma_bar) * (p.kappa_y * p.sigma_bar);
  L.Lb_z = 2.0 * p.kappa_z * p.kappa_z;
  L.Lsig_y = d * p.sigma_bar * p.sigma_bar;
  const double inner = 1.5 * p.sigma_bar * p.sigma_bar * d * d + 2.0 * p.kappa_z * p.sigma_bar * d;
  L.Lf_x = 1.5 * d * inner * inner;
  L.Lf_y = 18.0 * p.r * p.r;
  L.Lf_z = 3.6 * d * p.kappa_y * p.kappa_y;
  L.kf = -p.r;
  L.kb = L.Lsig_x = L.Lb_x = 0.0;
  return L;
}

/// Constants for the LQ problems; the DP coefficients are quadratic, so its
/// bundle is valid on the localization region ||x|| <= r_x, ||z|| <= r_z.
inline LipschitzBundle lipschitz_constants(ProblemKind kind, const LqParams& p) {
  p.validate();
  LipschitzBundle L;
  const Matrix<double> A = p.M_u * (1.0 / p.R_u) * p.M_u.transpose();
  const Matrix<double> Sinv = Vector<double>(p.Sigma_diag.cwiseInverse()).asDiagonal();
  const double nMx = spectral_norm(p.M_x);
  if (kind == ProblemKind::lq_dp) {
    // sup of ||grad g|| over the r_x ball is r_x ||G||_2
    L.Lg_x = p.r_x * p.r_x * spectral_norm(p.G) * spectral_norm(p.G);
    L.Lb_x = 2.0 * nMx * nMx;
    const double nASinv = spectral_norm(A * Sinv);
    L.Lb_z = 2.0 * nASinv * nASinv;
    L.Lf_x = p.r_x * p.r_x * spectral_norm(p.R_x) * spectral_norm(p.R_x);
    const double nQz = spectral_norm(Sinv * A * Sinv);
    L.Lf_z = p.r_z * p.r_z * nQz * nQz;
    L.kb = sym_max_eigenvalue(p.M_x);
  } else if (kind == ProblemKind::lq_smp) {
    L.Lg_x = spectral_norm(p.G) * spectral_norm(p.G);
    L.Lb_x = 2.0 * nMx * nMx;
    L.Lb_y = 2.0 * spectral_norm(A) * spectral_norm(A);
    L.Lf_x = 2.0 * spectral_norm(p.R_x) * spectral_norm(p.R_x);
    L.Lf_y = 2.0 * nMx * nMx;
    L.kb = sym_max_eigenvalue(p.M_x);
    L.kf = L.kb;
  } else {
    throw std::invalid_argument("lipschitz_constants: not an LQ problem");
  }
  return L;
}

}  // namespace fbsde
