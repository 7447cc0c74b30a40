#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "core.hpp"
#include "quadrature.hpp"
#include "rng.hpp"

namespace ssb {

enum class DensityKind {
  gaussian,
  gaussian_mixture,
  cauchy,
  student_t,
  grid,
  geometric_mixture,
  smoothed,
  product_transition
};

inline const char* kind_name(DensityKind k) {
  switch (k) {
    case DensityKind::gaussian: return "gaussian";
    case DensityKind::gaussian_mixture: return "gaussian_mixture";
    case DensityKind::cauchy: return "cauchy";
    case DensityKind::student_t: return "student_t";
    case DensityKind::grid: return "grid";
    case DensityKind::geometric_mixture: return "geometric_mixture";
    case DensityKind::smoothed: return "smoothed";
    case DensityKind::product_transition: return "product_transition";
  }
  return "?";
}

namespace kinds {

// Diagonal Gaussian.
struct Gaussian {
  Vec mean;
  Vec var;
};

struct GaussianMixture {
  Vec weights;
  std::vector<Gaussian> components;
};

// Product of independent Cauchy / Student-t axes.
struct Cauchy {
  Vec loc;
  Vec scale;
};

struct StudentT {
  Vec loc;
  Vec scale;
  double dof = 1.0;
};

// Axis-aligned lattice (d = 1 or 2). values are density values at nodes,
// axis 0 major: index = i0 * n1 + i1.
struct Grid {
  Vec lo;
  Vec hi;
  std::vector<std::size_t> n;
  Vec values;
  Vec log_values;
};

// Gaussian Markov chain on R^{d*steps}: x_k = x_{k-1} + shift_k + sqrt(var_k) * xi,
// x_0 = origin. Brownian p_N(.|y) is the zero-shift case.
struct ProductTransition {
  std::size_t d = 1;
  std::size_t steps = 1;
  Vec origin;
  Vec shifts;     // steps x d
  Vec variances;  // steps
};

}  // namespace kinds

class DensityModel;
struct GeometricMixture;

namespace detail {
struct DensityImpl;
}

class DensityModel {
 public:
  DensityModel() = default;

  // Factories. Variances are per axis; a single entry broadcasts.
  static DensityModel gaussian(Vec mean, Vec var);
  static DensityModel standard_normal(std::size_t d = 1, double sd = 1.0);
  static DensityModel gaussian_mixture(Vec weights, std::vector<kinds::Gaussian> components);
  static DensityModel cauchy(Vec loc, Vec scale);
  static DensityModel student_t(Vec loc, Vec scale, double dof);
  static DensityModel grid_1d(double lo, double hi, Vec values, bool normalized);
  static DensityModel grid_2d(Vec lo, Vec hi, std::vector<std::size_t> n, Vec values, bool normalized);
  static DensityModel product_transition(std::size_t d, Vec origin, Vec shifts, Vec variances);
  // Brownian chain density p_N(.|y) for checkpoint times ts (increasing, > t0).
  static DensityModel brownian_chain(Vec y, double sigma, const Vec& ts, double t0 = 0.0);
  static DensityModel from_geometric_mixture(GeometricMixture gm);
  static DensityModel smoothed(const DensityModel& base, double sigma, const QuadratureSpec& spec);

  bool valid() const { return static_cast<bool>(impl_); }
  DensityKind kind() const;
  std::size_t dimension() const;
  bool normalized() const;

  double log_density(std::span<const double> x) const;
  double log_density(const Vec& x) const { return log_density(std::span<const double>(x)); }
  Vec score(std::span<const double> x) const;
  void score_into(std::span<const double> x, std::span<double> g) const;
  Vec score(const Vec& x) const { return score(std::span<const double>(x)); }
  void sample_into(Rng& rng, std::span<double> out) const;
  Vec sample(Rng& rng) const;
  // One-dimensional models only.
  double cdf(double x) const;
  // Default integration domain: boxes of spec.scale_units scale units, or a
  // mapped line for heavy tails.
  std::vector<AxisDomain> default_domain(const QuadratureSpec& spec) const;

  const detail::DensityImpl& impl() const;
  template <class T>
  const T& as() const;
  static DensityModel from_impl(std::shared_ptr<const detail::DensityImpl> p) {
    DensityModel m;
    m.impl_ = std::move(p);
    return m;
  }

 private:
  std::shared_ptr<const detail::DensityImpl> impl_;
};

// Unnormalized f0^{1/(1+beta)} f1^{beta/(1+beta)}; log_c caches the normalizer when known.
struct GeometricMixture {
  DensityModel base;
  DensityModel target;
  Beta beta = Beta::finite(0.0);
  std::optional<double> log_c;

  double unnormalized_log_density(std::span<const double> x) const {
    double a = beta.base_exponent();
    double b = beta.target_exponent();
    double out = 0.0;
    if (a != 0.0) out += a * base.log_density(x);
    if (b != 0.0) out += b * target.log_density(x);
    return out;
  }
  Vec score(std::span<const double> x) const {
    double a = beta.base_exponent();
    double b = beta.target_exponent();
    Vec out(base.dimension(), 0.0);
    if (a != 0.0) {
      Vec s = base.score(x);
      for (std::size_t i = 0; i < out.size(); ++i) out[i] += a * s[i];
    }
    if (b != 0.0) {
      Vec s = target.score(x);
      for (std::size_t i = 0; i < out.size(); ++i) out[i] += b * s[i];
    }
    return out;
  }
};

namespace kinds {

// Gaussian convolution of `base` by tensor quadrature. log_w holds
// log(quadrature weight * base density) per node, axis 0 major.
struct Smoothed {
  DensityModel base;
  double sigma = 1.0;
  std::size_t d = 1;
  std::vector<Vec> axes;
  std::vector<bool> mapped;  // heavy-tailed axis: nodes cover a finite window only
  Vec trust_lo, trust_hi;    // per axis; outside, the base density stands in
  Vec log_w;

  // log f_sigma(x), and its gradient when grad is given. Nodes farther than
  // 40 sigma are skipped. Outside the trusted window of a mapped axis the base
  // density itself is returned; there the base varies slowly on the scale sigma
  // (relative error of order sigma^2/x^2).
  double eval(std::span<const double> x, Vec* grad) const {
    const double reach = 40.0 * sigma;
    std::size_t lo[2] = {0, 0}, hi[2] = {0, 0};
    for (std::size_t a = 0; a < d; ++a) {
      const Vec& ax = axes[a];
      if (mapped[a] && (x[a] < trust_lo[a] || x[a] > trust_hi[a])) {
        if (grad) *grad = base.score(x);
        return base.log_density(x);
      }
      lo[a] = static_cast<std::size_t>(std::lower_bound(ax.begin(), ax.end(), x[a] - reach) - ax.begin());
      hi[a] = static_cast<std::size_t>(std::upper_bound(ax.begin(), ax.end(), x[a] + reach) - ax.begin());
    }
    const double inv2s2 = 0.5 / (sigma * sigma);
    auto term = [&](std::size_t i, std::size_t j) {
      double z0 = x[0] - axes[0][i];
      if (d == 1) return log_w[i] - z0 * z0 * inv2s2;
      double z1 = x[1] - axes[1][j];
      return log_w[i * axes[1].size() + j] - (z0 * z0 + z1 * z1) * inv2s2;
    };
    double m = kNegInf;
    std::size_t j_lo = d == 1 ? 0 : lo[1], j_hi = d == 1 ? 1 : hi[1];
    for (std::size_t i = lo[0]; i < hi[0]; ++i)
      for (std::size_t j = j_lo; j < j_hi; ++j) m = std::max(m, term(i, j));
    if (grad) std::fill(grad->begin(), grad->end(), 0.0);
    if (m == kNegInf) return kNegInf;
    double s = 0.0, g0 = 0.0, g1 = 0.0;
    for (std::size_t i = lo[0]; i < hi[0]; ++i)
      for (std::size_t j = j_lo; j < j_hi; ++j) {
        double e = std::exp(term(i, j) - m);
        s += e;
        if (grad) {
          g0 += e * (axes[0][i] - x[0]);
          if (d == 2) g1 += e * (axes[1][j] - x[1]);
        }
      }
    if (grad) {
      (*grad)[0] = g0 / (s * sigma * sigma);
      if (d == 2) (*grad)[1] = g1 / (s * sigma * sigma);
    }
    return m + std::log(s) - static_cast<double>(d) * (std::log(sigma) + kLogSqrt2Pi);
  }
};

}  // namespace kinds

namespace detail {

struct DensityImpl {
  DensityKind kind;
  std::size_t dim;
  bool normalized;
  std::variant<kinds::Gaussian, kinds::GaussianMixture, kinds::Cauchy, kinds::StudentT,
               kinds::Grid, GeometricMixture, kinds::Smoothed, kinds::ProductTransition>
      data;
  // Summed per-axis log normalizing constant (gaussian, cauchy, student_t).
  double log_const = 0.0;
};

inline void check_positive(const Vec& v, const char* what) {
  for (double x : v)
    if (!(x > 0.0) || !std::isfinite(x)) throw InputError(std::string(what) + " must be positive and finite");
}

inline void check_finite(const Vec& v, const char* what) {
  for (double x : v)
    if (!std::isfinite(x)) throw InputError(std::string(what) + " must be finite");
}

inline Vec broadcast(Vec v, std::size_t d, const char* what) {
  if (v.size() == 1 && d > 1) v.assign(d, v[0]);
  require_dim(v.size(), d, what);
  return v;
}

inline double gaussian_log(const kinds::Gaussian& g, std::span<const double> x) {
  double out = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double z = x[i] - g.mean[i];
    out += -0.5 * z * z / g.var[i] - 0.5 * std::log(g.var[i]) - kLogSqrt2Pi;
  }
  return out;
}

inline double gaussian_const(const Vec& var) {
  double c = 0.0;
  for (double v : var) c += -0.5 * std::log(v) - kLogSqrt2Pi;
  return c;
}

inline double cauchy_const(const Vec& scale) {
  double c = 0.0;
  for (double s : scale) c -= std::log(std::numbers::pi * s);
  return c;
}

inline double student_const(const Vec& scale, double dof) {
  double c = 0.0;
  for (double s : scale)
    c += std::lgamma(0.5 * (dof + 1.0)) - std::lgamma(0.5 * dof) - 0.5 * std::log(dof * std::numbers::pi) - std::log(s);
  return c;
}

inline double student_log_axis(double x, double loc, double scale, double dof) {
  double z = (x - loc) / scale;
  return std::lgamma(0.5 * (dof + 1.0)) - std::lgamma(0.5 * dof) -
         0.5 * std::log(dof * std::numbers::pi) - std::log(scale) -
         0.5 * (dof + 1.0) * std::log1p(z * z / dof);
}

// Grid helpers: locate cell and fractional position along one axis.
inline bool grid_locate(const kinds::Grid& g, std::size_t axis, double x, std::size_t* cell, double* frac) {
  double lo = g.lo[axis], hi = g.hi[axis];
  if (!(x >= lo && x <= hi)) return false;
  std::size_t n = g.n[axis];
  double h = (hi - lo) / static_cast<double>(n - 1);
  double pos = (x - lo) / h;
  std::size_t c = static_cast<std::size_t>(std::floor(pos));
  if (c >= n - 1) c = n - 2;
  *cell = c;
  *frac = pos - static_cast<double>(c);
  return true;
}

inline double grid_spacing(const kinds::Grid& g, std::size_t axis) {
  return (g.hi[axis] - g.lo[axis]) / static_cast<double>(g.n[axis] - 1);
}

// log-density and gradient of the interpolated log values.
inline double grid_eval(const kinds::Grid& g, std::span<const double> x, Vec* grad) {
  if (g.lo.size() == 1) {
    std::size_t c;
    double f;
    if (!grid_locate(g, 0, x[0], &c, &f)) {
      if (grad) (*grad)[0] = 0.0;
      return kNegInf;
    }
    double a = g.log_values[c], b = g.log_values[c + 1];
    if (a == kNegInf || b == kNegInf) {
      if (grad) (*grad)[0] = 0.0;
      double v = (f == 0.0) ? a : (f == 1.0 ? b : kNegInf);
      return v;
    }
    if (grad) (*grad)[0] = (b - a) / grid_spacing(g, 0);
    return a + f * (b - a);
  }
  std::size_t c0, c1;
  double f0, f1;
  if (!grid_locate(g, 0, x[0], &c0, &f0) || !grid_locate(g, 1, x[1], &c1, &f1)) {
    if (grad) (*grad)[0] = (*grad)[1] = 0.0;
    return kNegInf;
  }
  std::size_t n1 = g.n[1];
  double v00 = g.log_values[c0 * n1 + c1], v01 = g.log_values[c0 * n1 + c1 + 1];
  double v10 = g.log_values[(c0 + 1) * n1 + c1], v11 = g.log_values[(c0 + 1) * n1 + c1 + 1];
  if (v00 == kNegInf || v01 == kNegInf || v10 == kNegInf || v11 == kNegInf) {
    if (grad) (*grad)[0] = (*grad)[1] = 0.0;
    return kNegInf;
  }
  double val = (1 - f0) * (1 - f1) * v00 + (1 - f0) * f1 * v01 + f0 * (1 - f1) * v10 + f0 * f1 * v11;
  if (grad) {
    (*grad)[0] = ((1 - f1) * (v10 - v00) + f1 * (v11 - v01)) / grid_spacing(g, 0);
    (*grad)[1] = ((1 - f0) * (v01 - v00) + f0 * (v11 - v10)) / grid_spacing(g, 1);
  }
  return val;
}

// Exact mass of exp(a + (b-a) t) over a cell of width h.
inline double exp_linear_mass(double a, double b, double h) {
  if (a == kNegInf && b == kNegInf) return 0.0;
  if (a == kNegInf || b == kNegInf) return 0.0;
  double k = b - a;
  if (std::abs(k) < 1e-12) return h * std::exp(0.5 * (a + b));
  return h * std::exp(a) * std::expm1(k) / k;
}


}  // namespace detail

inline const detail::DensityImpl& DensityModel::impl() const {
  if (!impl_) throw InputError("use of an empty DensityModel");
  return *impl_;
}

template <class T>
const T& DensityModel::as() const {
  const T* p = std::get_if<T>(&impl().data);
  if (!p) throw InputError(std::string("density is not of the requested kind (it is ") + kind_name(kind()) + ")");
  return *p;
}

inline DensityKind DensityModel::kind() const { return impl().kind; }
inline std::size_t DensityModel::dimension() const { return impl().dim; }
inline bool DensityModel::normalized() const { return impl().normalized; }

// ---- factories ----

inline DensityModel DensityModel::gaussian(Vec mean, Vec var) {
  if (mean.empty()) throw InputError("gaussian: empty mean");
  std::size_t d = mean.size();
  var = detail::broadcast(std::move(var), d, "gaussian variance");
  detail::check_finite(mean, "gaussian mean");
  detail::check_positive(var, "gaussian variance");
  return from_impl(std::make_shared<detail::DensityImpl>(
      detail::DensityImpl{DensityKind::gaussian, d, true, kinds::Gaussian{std::move(mean), var}, detail::gaussian_const(var)}));
}

inline DensityModel DensityModel::standard_normal(std::size_t d, double sd) {
  return gaussian(Vec(d, 0.0), Vec(d, sd * sd));
}

inline DensityModel DensityModel::gaussian_mixture(Vec weights, std::vector<kinds::Gaussian> comps) {
  if (comps.empty() || weights.size() != comps.size())
    throw InputError("gaussian_mixture: need one weight per component");
  double sum = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw InputError("gaussian_mixture: weights must be nonnegative");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-12) throw InputError("gaussian_mixture: weights must sum to 1 (got " + format_double(sum) + ")");
  std::size_t d = comps[0].mean.size();
  if (d == 0) throw InputError("gaussian_mixture: empty mean");
  for (auto& c : comps) {
    require_dim(c.mean.size(), d, "gaussian_mixture component mean");
    c.var = detail::broadcast(std::move(c.var), d, "gaussian_mixture component variance");
    detail::check_finite(c.mean, "gaussian_mixture mean");
    detail::check_positive(c.var, "gaussian_mixture variance");
  }
  return from_impl(std::make_shared<detail::DensityImpl>(detail::DensityImpl{
      DensityKind::gaussian_mixture, d, true, kinds::GaussianMixture{std::move(weights), std::move(comps)}}));
}

inline DensityModel DensityModel::cauchy(Vec loc, Vec scale) {
  if (loc.empty()) throw InputError("cauchy: empty location");
  std::size_t d = loc.size();
  scale = detail::broadcast(std::move(scale), d, "cauchy scale");
  detail::check_finite(loc, "cauchy location");
  detail::check_positive(scale, "cauchy scale");
  return from_impl(std::make_shared<detail::DensityImpl>(
      detail::DensityImpl{DensityKind::cauchy, d, true, kinds::Cauchy{std::move(loc), scale}, detail::cauchy_const(scale)}));
}

inline DensityModel DensityModel::student_t(Vec loc, Vec scale, double dof) {
  if (loc.empty()) throw InputError("student_t: empty location");
  std::size_t d = loc.size();
  scale = detail::broadcast(std::move(scale), d, "student_t scale");
  detail::check_finite(loc, "student_t location");
  detail::check_positive(scale, "student_t scale");
  if (!(dof > 0.0) || !std::isfinite(dof)) throw InputError("student_t: dof must be positive");
  return from_impl(std::make_shared<detail::DensityImpl>(detail::DensityImpl{
      DensityKind::student_t, d, true, kinds::StudentT{std::move(loc), scale, dof}, detail::student_const(scale, dof)}));
}

inline DensityModel DensityModel::grid_2d(Vec lo, Vec hi, std::vector<std::size_t> n, Vec values, bool normalized) {
  std::size_t d = lo.size();
  if (d != 1 && d != 2) throw InputError("grid: dimension must be 1 or 2");
  require_dim(hi.size(), d, "grid hi");
  require_dim(n.size(), d, "grid n");
  std::size_t total = 1;
  for (std::size_t i = 0; i < d; ++i) {
    if (n[i] < 2) throw InputError("grid: need at least 2 nodes per axis");
    if (!(hi[i] > lo[i]) || !std::isfinite(lo[i]) || !std::isfinite(hi[i]))
      throw InputError("grid: need finite lo < hi");
    total *= n[i];
  }
  require_dim(values.size(), total, "grid values");
  Vec logs(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!(values[i] >= 0.0) || !std::isfinite(values[i])) throw InputError("grid: values must be nonnegative and finite");
    logs[i] = values[i] > 0.0 ? std::log(values[i]) : kNegInf;
  }
  return from_impl(std::make_shared<detail::DensityImpl>(detail::DensityImpl{
      DensityKind::grid, d, normalized,
      kinds::Grid{std::move(lo), std::move(hi), std::move(n), std::move(values), std::move(logs)}}));
}

inline DensityModel DensityModel::grid_1d(double lo, double hi, Vec values, bool normalized) {
  std::size_t n = values.size();
  return grid_2d({lo}, {hi}, {n}, std::move(values), normalized);
}

inline DensityModel DensityModel::product_transition(std::size_t d, Vec origin, Vec shifts, Vec variances) {
  if (d == 0) throw InputError("product_transition: d must be positive");
  require_dim(origin.size(), d, "product_transition origin");
  std::size_t steps = variances.size();
  if (steps == 0) throw InputError("product_transition: need at least one step");
  if (shifts.empty()) shifts.assign(steps * d, 0.0);
  require_dim(shifts.size(), steps * d, "product_transition shifts");
  detail::check_finite(origin, "product_transition origin");
  detail::check_finite(shifts, "product_transition shifts");
  detail::check_positive(variances, "product_transition variances");
  return from_impl(std::make_shared<detail::DensityImpl>(detail::DensityImpl{
      DensityKind::product_transition, d * steps, true,
      kinds::ProductTransition{d, steps, std::move(origin), std::move(shifts), std::move(variances)}}));
}

inline DensityModel DensityModel::brownian_chain(Vec y, double sigma, const Vec& ts, double t0) {
  if (!(sigma > 0.0)) throw InputError("brownian_chain: sigma must be positive");
  Vec var;
  double prev = t0;
  for (double t : ts) {
    if (!(t > prev)) throw InputError("brownian_chain: times must be strictly increasing after t0");
    var.push_back(sigma * sigma * (t - prev));
    prev = t;
  }
  std::size_t d = y.size();
  return product_transition(d, std::move(y), {}, std::move(var));
}

inline DensityModel DensityModel::from_geometric_mixture(GeometricMixture gm) {
  if (!gm.base.valid() || !gm.target.valid()) throw InputError("geometric mixture: empty component");
  require_dim(gm.target.dimension(), gm.base.dimension(), "geometric mixture target");
  std::size_t d = gm.base.dimension();
  bool norm = gm.log_c.has_value();
  if (norm && !std::isfinite(*gm.log_c)) throw InputError("geometric mixture: non-finite log normalizer");
  return from_impl(std::make_shared<detail::DensityImpl>(
      detail::DensityImpl{DensityKind::geometric_mixture, d, norm, std::move(gm)}));
}

// ---- evaluation ----

inline double DensityModel::log_density(std::span<const double> x) const {
  const auto& im = impl();
  require_dim(x.size(), im.dim, "log_density");
  return std::visit(
      [&](const auto& k) -> double {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, kinds::Gaussian>) {
          double out = im.log_const;
          for (std::size_t i = 0; i < x.size(); ++i) {
            double z = x[i] - k.mean[i];
            out -= 0.5 * z * z / k.var[i];
          }
          return out;
        } else if constexpr (std::is_same_v<K, kinds::GaussianMixture>) {
          double out = kNegInf;
          for (std::size_t c = 0; c < k.components.size(); ++c) {
            if (k.weights[c] == 0.0) continue;
            out = log_add_exp(out, std::log(k.weights[c]) + detail::gaussian_log(k.components[c], x));
          }
          return out;
        } else if constexpr (std::is_same_v<K, kinds::Cauchy>) {
          double out = im.log_const;
          for (std::size_t i = 0; i < x.size(); ++i) {
            double z = (x[i] - k.loc[i]) / k.scale[i];
            out -= std::log1p(z * z);
          }
          return out;
        } else if constexpr (std::is_same_v<K, kinds::StudentT>) {
          double out = im.log_const;
          for (std::size_t i = 0; i < x.size(); ++i) {
            double z = (x[i] - k.loc[i]) / k.scale[i];
            out -= 0.5 * (k.dof + 1.0) * std::log1p(z * z / k.dof);
          }
          return out;
        } else if constexpr (std::is_same_v<K, kinds::Grid>) {
          return detail::grid_eval(k, x, nullptr);
        } else if constexpr (std::is_same_v<K, GeometricMixture>) {
          double u = k.unnormalized_log_density(x);
          return k.log_c ? u - *k.log_c : u;
        } else if constexpr (std::is_same_v<K, kinds::Smoothed>) {
          return k.eval(x, nullptr);
        } else {
          static_assert(std::is_same_v<K, kinds::ProductTransition>);
          double out = 0.0;
          for (std::size_t s = 0; s < k.steps; ++s) {
            double v = k.variances[s];
            for (std::size_t a = 0; a < k.d; ++a) {
              double prev = s == 0 ? k.origin[a] : x[(s - 1) * k.d + a];
              double z = x[s * k.d + a] - prev - k.shifts[s * k.d + a];
              out += -0.5 * z * z / v - 0.5 * std::log(v) - kLogSqrt2Pi;
            }
          }
          return out;
        }
      },
      im.data);
}

inline Vec DensityModel::score(std::span<const double> x) const {
  Vec g(impl().dim, 0.0);
  score_into(x, g);
  return g;
}

inline void DensityModel::score_into(std::span<const double> x, std::span<double> g) const {
  const auto& im = impl();
  require_dim(x.size(), im.dim, "score");
  require_dim(g.size(), im.dim, "score output");
  std::fill(g.begin(), g.end(), 0.0);
  std::visit(
      [&](const auto& k) {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, kinds::Gaussian>) {
          for (std::size_t i = 0; i < x.size(); ++i) g[i] = -(x[i] - k.mean[i]) / k.var[i];
        } else if constexpr (std::is_same_v<K, kinds::GaussianMixture>) {
          std::size_t nc = k.components.size();
          Vec lw(nc);
          for (std::size_t c = 0; c < nc; ++c)
            lw[c] = k.weights[c] == 0.0 ? kNegInf : std::log(k.weights[c]) + detail::gaussian_log(k.components[c], x);
          double lse = log_sum_exp(lw);
          if (lse == kNegInf) return;
          for (std::size_t c = 0; c < nc; ++c) {
            if (lw[c] == kNegInf) continue;
            double r = std::exp(lw[c] - lse);
            for (std::size_t i = 0; i < x.size(); ++i)
              g[i] += r * (-(x[i] - k.components[c].mean[i]) / k.components[c].var[i]);
          }
        } else if constexpr (std::is_same_v<K, kinds::Cauchy>) {
          for (std::size_t i = 0; i < x.size(); ++i) {
            double z = x[i] - k.loc[i];
            g[i] = -2.0 * z / (k.scale[i] * k.scale[i] + z * z);
          }
        } else if constexpr (std::is_same_v<K, kinds::StudentT>) {
          for (std::size_t i = 0; i < x.size(); ++i) {
            double z = (x[i] - k.loc[i]) / k.scale[i];
            g[i] = -(k.dof + 1.0) * z / (k.scale[i] * (k.dof + z * z));
          }
        } else if constexpr (std::is_same_v<K, kinds::Grid>) {
          Vec tmp(g.size(), 0.0);
          detail::grid_eval(k, x, &tmp);
          std::copy(tmp.begin(), tmp.end(), g.begin());
        } else if constexpr (std::is_same_v<K, GeometricMixture>) {
          Vec tmp = k.score(x);
          std::copy(tmp.begin(), tmp.end(), g.begin());
        } else if constexpr (std::is_same_v<K, kinds::Smoothed>) {
          Vec tmp(g.size(), 0.0);
          k.eval(x, &tmp);
          std::copy(tmp.begin(), tmp.end(), g.begin());
        } else {
          for (std::size_t s = 0; s < k.steps; ++s) {
            for (std::size_t a = 0; a < k.d; ++a) {
              double prev = s == 0 ? k.origin[a] : x[(s - 1) * k.d + a];
              double z = (x[s * k.d + a] - prev - k.shifts[s * k.d + a]) / k.variances[s];
              g[s * k.d + a] -= z;
              if (s > 0) g[(s - 1) * k.d + a] += z;
            }
          }
        }
      },
      im.data);
}

inline void DensityModel::sample_into(Rng& rng, std::span<double> out) const {
  const auto& im = impl();
  require_dim(out.size(), im.dim, "sample");
  std::visit(
      [&](const auto& k) {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, kinds::Gaussian>) {
          for (std::size_t i = 0; i < out.size(); ++i) out[i] = k.mean[i] + std::sqrt(k.var[i]) * rng.normal();
        } else if constexpr (std::is_same_v<K, kinds::GaussianMixture>) {
          double u = rng.uniform();
          std::size_t c = 0;
          double acc = 0.0;
          for (; c + 1 < k.weights.size(); ++c) {
            acc += k.weights[c];
            if (u < acc) break;
          }
          const auto& comp = k.components[c];
          for (std::size_t i = 0; i < out.size(); ++i) out[i] = comp.mean[i] + std::sqrt(comp.var[i]) * rng.normal();
        } else if constexpr (std::is_same_v<K, kinds::Cauchy>) {
          for (std::size_t i = 0; i < out.size(); ++i)
            out[i] = k.loc[i] + k.scale[i] * std::tan(std::numbers::pi * (rng.uniform() - 0.5));
        } else if constexpr (std::is_same_v<K, kinds::StudentT>) {
          std::gamma_distribution<double> gam(0.5 * k.dof, 2.0);
          for (std::size_t i = 0; i < out.size(); ++i) {
            double z = rng.normal();
            double chi2 = gam(rng.engine());
            out[i] = k.loc[i] + k.scale[i] * z / std::sqrt(chi2 / k.dof);
          }
        } else if constexpr (std::is_same_v<K, kinds::Grid>) {
          if (k.lo.size() != 1) throw Unsupported("grid sampling is implemented for 1D grids only");
          std::size_t cells = k.n[0] - 1;
          double h = detail::grid_spacing(k, 0);
          Vec cum(cells);
          double acc = 0.0;
          for (std::size_t c = 0; c < cells; ++c) {
            acc += detail::exp_linear_mass(k.log_values[c], k.log_values[c + 1], h);
            cum[c] = acc;
          }
          if (!(acc > 0.0)) throw InputError("grid sampling: zero mass");
          double u = rng.uniform() * acc;
          std::size_t c = static_cast<std::size_t>(std::upper_bound(cum.begin(), cum.end(), u) - cum.begin());
          if (c >= cells) c = cells - 1;
          double a = k.log_values[c], b = k.log_values[c + 1];
          double v = rng.uniform();
          double kk = b - a;
          double t = std::abs(kk) < 1e-12 ? v : std::log1p(v * std::expm1(kk)) / kk;
          out[0] = k.lo[0] + h * (static_cast<double>(c) + t);
        } else if constexpr (std::is_same_v<K, GeometricMixture>) {
          throw Unsupported("geometric mixtures are sampled by rejection (see diagnostics)");
        } else if constexpr (std::is_same_v<K, kinds::Smoothed>) {
          k.base.sample_into(rng, out);
          for (std::size_t i = 0; i < out.size(); ++i) out[i] += k.sigma * rng.normal();
        } else {
          for (std::size_t s = 0; s < k.steps; ++s) {
            double sd = std::sqrt(k.variances[s]);
            for (std::size_t a = 0; a < k.d; ++a) {
              double prev = s == 0 ? k.origin[a] : out[(s - 1) * k.d + a];
              out[s * k.d + a] = prev + k.shifts[s * k.d + a] + sd * rng.normal();
            }
          }
        }
      },
      im.data);
}

inline Vec DensityModel::sample(Rng& rng) const {
  Vec out(dimension());
  sample_into(rng, out);
  return out;
}

inline double DensityModel::cdf(double x) const {
  const auto& im = impl();
  if (im.dim != 1) throw Unsupported("cdf is defined for one-dimensional models only");
  return std::visit(
      [&](const auto& k) -> double {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, kinds::Gaussian>) {
          return normal_cdf(x, k.mean[0], std::sqrt(k.var[0]));
        } else if constexpr (std::is_same_v<K, kinds::GaussianMixture>) {
          double out = 0.0;
          for (std::size_t c = 0; c < k.weights.size(); ++c)
            out += k.weights[c] * normal_cdf(x, k.components[c].mean[0], std::sqrt(k.components[c].var[0]));
          return out;
        } else if constexpr (std::is_same_v<K, kinds::Cauchy>) {
          return 0.5 + std::atan((x - k.loc[0]) / k.scale[0]) / std::numbers::pi;
        } else if constexpr (std::is_same_v<K, kinds::StudentT>) {
          double z = (x - k.loc[0]) / k.scale[0];
          if (k.dof == 1.0) return 0.5 + std::atan(z) / std::numbers::pi;
          if (k.dof == 2.0) return 0.5 + z / (2.0 * std::sqrt(2.0 + z * z));
          throw Unsupported("student_t cdf is implemented for dof 1 and 2");
        } else if constexpr (std::is_same_v<K, kinds::Grid>) {
          double h = detail::grid_spacing(k, 0);
          double total = 0.0, below = 0.0;
          for (std::size_t c = 0; c + 1 < k.n[0]; ++c) {
            double a = k.log_values[c], b = k.log_values[c + 1];
            double m = detail::exp_linear_mass(a, b, h);
            total += m;
            double left = k.lo[0] + h * static_cast<double>(c);
            if (x >= left + h) {
              below += m;
            } else if (x > left) {
              double t = (x - left) / h;
              below += detail::exp_linear_mass(a, a + t * (b - a), t * h);
            }
          }
          return total > 0.0 ? below / total : 0.0;
        } else if constexpr (std::is_same_v<K, kinds::Smoothed>) {
          double lse = log_sum_exp(k.log_w);
          double out = 0.0;
          for (std::size_t i = 0; i < k.log_w.size(); ++i)
            out += std::exp(k.log_w[i] - lse) * normal_cdf(x, k.axes[0][i], k.sigma);
          return out;
        } else if constexpr (std::is_same_v<K, kinds::ProductTransition>) {
          double m = k.origin[0], v = 0.0;
          for (std::size_t s = 0; s < k.steps; ++s) {
            m += k.shifts[s];
            v += k.variances[s];
          }
          return normal_cdf(x, m, std::sqrt(v));
        } else {
          throw Unsupported("cdf of a geometric mixture is not available in closed form");
        }
      },
      im.data);
}

namespace detail {

// Center and half-width of a box axis, treating a mapped axis as unbounded.
inline std::vector<AxisDomain> widen(std::vector<AxisDomain> dom, double factor) {
  for (auto& a : dom) {
    if (a.tan_map) continue;
    double c = 0.5 * (a.lo + a.hi), h = 0.5 * (a.hi - a.lo) * factor;
    a.lo = c - h;
    a.hi = c + h;
  }
  return dom;
}

inline std::vector<AxisDomain> merge_domains(const std::vector<AxisDomain>& p, const std::vector<AxisDomain>& q) {
  std::vector<AxisDomain> out(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i].tan_map && q[i].tan_map) {
      out[i] = AxisDomain::line(p[i].center, std::max(p[i].scale, q[i].scale));
    } else if (p[i].tan_map) {
      out[i] = q[i];
    } else if (q[i].tan_map) {
      out[i] = p[i];
    } else {
      out[i] = AxisDomain::box(std::min(p[i].lo, q[i].lo), std::max(p[i].hi, q[i].hi));
    }
  }
  return out;
}

}  // namespace detail

inline std::vector<AxisDomain> DensityModel::default_domain(const QuadratureSpec& spec) const {
  const auto& im = impl();
  const double u = spec.scale_units;
  return std::visit(
      [&](const auto& k) -> std::vector<AxisDomain> {
        using K = std::decay_t<decltype(k)>;
        std::vector<AxisDomain> out;
        if constexpr (std::is_same_v<K, kinds::Gaussian>) {
          for (std::size_t i = 0; i < im.dim; ++i) {
            double s = std::sqrt(k.var[i]);
            out.push_back(AxisDomain::box(k.mean[i] - u * s, k.mean[i] + u * s));
          }
        } else if constexpr (std::is_same_v<K, kinds::GaussianMixture>) {
          for (std::size_t i = 0; i < im.dim; ++i) {
            double lo = kInf, hi = kNegInf;
            for (const auto& c : k.components) {
              double s = std::sqrt(c.var[i]);
              lo = std::min(lo, c.mean[i] - u * s);
              hi = std::max(hi, c.mean[i] + u * s);
            }
            out.push_back(AxisDomain::box(lo, hi));
          }
        } else if constexpr (std::is_same_v<K, kinds::Cauchy>) {
          for (std::size_t i = 0; i < im.dim; ++i) out.push_back(AxisDomain::line(k.loc[i], k.scale[i]));
        } else if constexpr (std::is_same_v<K, kinds::StudentT>) {
          for (std::size_t i = 0; i < im.dim; ++i) out.push_back(AxisDomain::line(k.loc[i], k.scale[i]));
        } else if constexpr (std::is_same_v<K, kinds::Grid>) {
          for (std::size_t i = 0; i < im.dim; ++i) out.push_back(AxisDomain::box(k.lo[i], k.hi[i]));
        } else if constexpr (std::is_same_v<K, GeometricMixture>) {
          double a = k.beta.base_exponent(), b = k.beta.target_exponent();
          if (a == 0.0) return k.target.default_domain(spec);
          if (b == 0.0) return k.base.default_domain(spec);
          // A component raised to power e < 1 decays like the component at scale / sqrt(e).
          auto db = detail::widen(k.base.default_domain(spec), 1.0 / std::sqrt(a));
          auto dt = detail::widen(k.target.default_domain(spec), 1.0 / std::sqrt(b));
          return detail::merge_domains(db, dt);
        } else if constexpr (std::is_same_v<K, kinds::Smoothed>) {
          out = k.base.default_domain(spec);
          for (auto& a : out) {
            if (a.tan_map) {
              a.scale = std::max(a.scale, k.sigma);
            } else {
              a.lo -= u * k.sigma;
              a.hi += u * k.sigma;
            }
          }
        } else {
          for (std::size_t s = 0; s < k.steps; ++s) {
            double v = 0.0;
            for (std::size_t r = 0; r <= s; ++r) v += k.variances[r];
            for (std::size_t a = 0; a < k.d; ++a) {
              double m = k.origin[a];
              for (std::size_t r = 0; r <= s; ++r) m += k.shifts[r * k.d + a];
              out.push_back(AxisDomain::box(m - u * std::sqrt(v), m + u * std::sqrt(v)));
            }
          }
        }
        return out;
      },
      im.data);
}

// Integral of exp(log_density) over the model's default domain (or spec.domain).
inline QuadratureResult integrate_density(const DensityModel& m, const QuadratureSpec& spec = {}) {
  auto dom = spec.domain.empty() ? m.default_domain(spec) : spec.domain;
  if (m.kind() == DensityKind::grid && m.dimension() == 1 && spec.domain.empty()) {
    // Exact for the piecewise exp-linear interpolant.
    const auto& g = m.as<kinds::Grid>();
    double h = detail::grid_spacing(g, 0), total = 0.0;
    for (std::size_t c = 0; c + 1 < g.n[0]; ++c) total += detail::exp_linear_mass(g.log_values[c], g.log_values[c + 1], h);
    QuadratureResult r;
    r.value = r.previous = total;
    r.log_value = total > 0 ? std::log(total) : kNegInf;
    r.intervals = static_cast<int>(g.n[0] - 1);
    return r;
  }
  return integrate_log([&](std::span<const double> x) { return m.log_density(x); }, dom, spec);
}

// ---- geometric mixtures ----

struct GaussianProduct {
  kinds::Gaussian normalized;  // the normalized geometric mixture
  double log_c = 0.0;          // log of its normalizer
};

// Closed form for diagonal Gaussians with exponents (a, b), a + b = 1.
inline GaussianProduct gaussian_geometric_closed_form(const kinds::Gaussian& g0, const kinds::Gaussian& g1, double a, double b) {
  GaussianProduct out;
  std::size_t d = g0.mean.size();
  out.normalized.mean.resize(d);
  out.normalized.var.resize(d);
  const double log2pi = 2.0 * kLogSqrt2Pi;
  for (std::size_t i = 0; i < d; ++i) {
    double lam = a / g0.var[i] + b / g1.var[i];
    double mu = (a * g0.mean[i] / g0.var[i] + b * g1.mean[i] / g1.var[i]) / lam;
    out.normalized.mean[i] = mu;
    out.normalized.var[i] = 1.0 / lam;
    out.log_c += -a * g0.mean[i] * g0.mean[i] / (2.0 * g0.var[i]) - b * g1.mean[i] * g1.mean[i] / (2.0 * g1.var[i]) +
                 0.5 * lam * mu * mu - 0.5 * a * (log2pi + std::log(g0.var[i])) -
                 0.5 * b * (log2pi + std::log(g1.var[i])) + 0.5 * (log2pi - std::log(lam));
  }
  return out;
}

// Log of C_beta = integral of base^{1/(1+beta)} target^{beta/(1+beta)}.
inline double geometric_mixture_log_normalizer(const GeometricMixture& gm, const QuadratureSpec& spec = {}) {
  double a = gm.beta.base_exponent(), b = gm.beta.target_exponent();
  if (b == 0.0 && gm.base.normalized()) return 0.0;
  if (a == 0.0 && gm.target.normalized()) return 0.0;
  if (gm.base.kind() == DensityKind::gaussian && gm.target.kind() == DensityKind::gaussian)
    return gaussian_geometric_closed_form(gm.base.as<kinds::Gaussian>(), gm.target.as<kinds::Gaussian>(), a, b).log_c;
  auto dom = spec.domain.empty() ? DensityModel::from_geometric_mixture(gm).default_domain(spec) : spec.domain;
  return integrate_log([&](std::span<const double> x) { return gm.unnormalized_log_density(x); }, dom, spec).log_value;
}

inline double geometric_mixture_normalizer(const GeometricMixture& gm, const QuadratureSpec& spec = {}) {
  return std::exp(geometric_mixture_log_normalizer(gm, spec));
}

// Builds the geometric mixture; with normalize the constant is computed once here.
inline DensityModel geometric_mixture(const DensityModel& base, const DensityModel& target, Beta beta,
                                      bool normalize = true, const QuadratureSpec& spec = {}) {
  GeometricMixture gm{base, target, beta, std::nullopt};
  if (normalize) gm.log_c = geometric_mixture_log_normalizer(gm, spec);
  return DensityModel::from_geometric_mixture(std::move(gm));
}

// ---- smoothing ----

inline DensityModel DensityModel::smoothed(const DensityModel& base, double sigma, const QuadratureSpec& spec) {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw InputError("smooth: sigma must be positive");
  std::size_t d = base.dimension();
  if (d > 2) throw Unsupported("quadrature smoothing supports d <= 2");
  auto dom = base.default_domain(spec);
  std::vector<detail::AxisNodes> axes;
  for (std::size_t i = 0; i < d; ++i) {
    const auto& a = dom[i];
    double target_h = sigma / 4.0;
    if (base.kind() == DensityKind::grid) target_h = std::min(target_h, detail::grid_spacing(base.as<kinds::Grid>(), i) / 8.0);
    std::size_t cap = d == 1 ? (1u << 20) : 1024u;
    // Heavy tails: uniform nodes on a window of 200 scales around the center.
    // Tan-map nodes would be sparser than sigma far out and make f_sigma jagged.
    AxisDomain box = a;
    if (a.tan_map) {
      double r = std::max(200.0 * a.scale, 80.0 * sigma);
      r = std::min(r, 0.5 * target_h * static_cast<double>(cap));
      r = std::max(r, 20.0 * sigma);
      box = AxisDomain::box(a.center - r, a.center + r);
    }
    std::size_t n = static_cast<std::size_t>(std::ceil((box.hi - box.lo) / target_h));
    n = std::min(std::max<std::size_t>(n, 256), cap);
    axes.push_back(detail::axis_nodes(box, static_cast<int>(n)));
  }
  kinds::Smoothed sm{base, sigma, d, {}, {}, {}, {}, {}};
  for (std::size_t i = 0; i < d; ++i) {
    sm.axes.push_back(axes[i].x);
    sm.mapped.push_back(dom[i].tan_map);
    sm.trust_lo.push_back(axes[i].x.front() + 8.0 * sigma);
    sm.trust_hi.push_back(axes[i].x.back() - 8.0 * sigma);
  }
  bool any = false;
  if (d == 1) {
    for (std::size_t i = 0; i < axes[0].x.size(); ++i) {
      double y[1] = {axes[0].x[i]};
      sm.log_w.push_back(axes[0].log_w[i] + base.log_density(y));
      any = any || sm.log_w.back() != kNegInf;
    }
  } else {
    for (std::size_t i = 0; i < axes[0].x.size(); ++i)
      for (std::size_t j = 0; j < axes[1].x.size(); ++j) {
        double y[2] = {axes[0].x[i], axes[1].x[j]};
        sm.log_w.push_back(axes[0].log_w[i] + axes[1].log_w[j] + base.log_density(y));
        any = any || sm.log_w.back() != kNegInf;
      }
  }
  if (!any) throw NumericError("smooth: base density vanishes on the quadrature nodes", 0.0, 0.0);
  return from_impl(std::make_shared<detail::DensityImpl>(
      detail::DensityImpl{DensityKind::smoothed, d, base.normalized(), std::move(sm)}));
}

// Gaussian convolution f_sigma = f * phi_sigma. Exact for Gaussians and Gaussian
// mixtures (variances add); quadrature otherwise.
inline DensityModel smooth(const DensityModel& model, double sigma, const QuadratureSpec& spec = {}) {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw InputError("smooth: sigma must be positive");
  if (model.kind() == DensityKind::gaussian) {
    auto g = model.as<kinds::Gaussian>();
    for (double& v : g.var) v += sigma * sigma;
    return DensityModel::gaussian(g.mean, g.var);
  }
  if (model.kind() == DensityKind::gaussian_mixture) {
    auto m = model.as<kinds::GaussianMixture>();
    for (auto& c : m.components)
      for (double& v : c.var) v += sigma * sigma;
    return DensityModel::gaussian_mixture(m.weights, m.components);
  }
  return DensityModel::smoothed(model, sigma, spec);
}

}  // namespace ssb
