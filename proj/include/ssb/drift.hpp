#pragma once

#include <functional>
#include <optional>
#include <string>

#include "density.hpp"
#include "rng.hpp"

namespace ssb {

using BaseDrift = std::function<Vec(std::span<const double>, double)>;

// Dirac-initialized bridge problem. An empty base_drift means b = 0.
struct BridgeSpec {
  double sigma = 1.0;
  double T = 1.0;
  Vec x0{0.0};
  BaseDrift base_drift;
  DensityModel target;
  Beta beta = Beta::infinite();

  std::size_t dimension() const { return x0.size(); }

  void validate() const {
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw InputError("bridge: sigma must be positive");
    if (!(T > 0.0) || !std::isfinite(T)) throw InputError("bridge: T must be positive");
    if (!target.valid()) throw InputError("bridge: target density missing");
    require_dim(target.dimension(), x0.size(), "bridge target");
  }

  // Uncontrolled terminal law k_T = N(x0, sigma^2 T) (b = 0 only).
  DensityModel terminal_kernel() const {
    require_brownian("terminal kernel");
    return DensityModel::gaussian(x0, Vec(x0.size(), sigma * sigma * T));
  }

  void require_brownian(const char* what) const {
    if (base_drift) throw Unsupported(std::string(what) + " needs a zero base drift");
  }
};

namespace detail {

// log r and grad log r with the constants of k_T hoisted out of the sample loop.
struct RatioEval {
  const BridgeSpec& s;
  double b;
  double v;       // sigma^2 T
  double lk0;     // log normalizer of k_T

  explicit RatioEval(const BridgeSpec& spec)
      : s(spec),
        b(spec.beta.target_exponent()),
        v(spec.sigma * spec.sigma * spec.T),
        lk0(-static_cast<double>(spec.x0.size()) * (0.5 * std::log(v) + kLogSqrt2Pi)) {}

  double log_r(std::span<const double> y) const {
    if (b == 0.0) return 0.0;
    double lf = s.target.log_density(y);
    if (lf == kNegInf) return kNegInf;
    double lk = lk0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      double z = y[i] - s.x0[i];
      lk -= 0.5 * z * z / v;
    }
    return b * (lf - lk);
  }

  void grad(std::span<const double> y, std::span<double> g) const {
    s.target.score_into(y, g);
    for (std::size_t i = 0; i < y.size(); ++i) g[i] = b * (g[i] + (y[i] - s.x0[i]) / v);
  }
};

}  // namespace detail

// log r(y) = b (log f_T(y) - log k_T(y)), b = beta/(1+beta).
inline double ratio_r(const BridgeSpec& s, std::span<const double> y) {
  s.require_brownian("ratio_r");
  return detail::RatioEval(s).log_r(y);
}

inline double ratio_r(const BridgeSpec& s, const Vec& y) { return ratio_r(s, std::span<const double>(y)); }

enum class DriftMethod { closed_form, mc_plain, mc_importance };

inline const char* method_name(DriftMethod m) {
  switch (m) {
    case DriftMethod::closed_form: return "closed_form";
    case DriftMethod::mc_plain: return "mc_plain";
    case DriftMethod::mc_importance: return "mc_importance";
  }
  return "?";
}

// One drift evaluation. overflow marks the failure event; value is then unset.
struct DriftEstimate {
  Vec value;
  Vec se;             // delta-method standard error per axis (0 for closed form)
  double ess = 0.0;   // effective sample size of the self-normalized weights
  bool overflow = false;
  bool degenerate = false;  // ess < 2
  bool ok() const { return !overflow; }
};

namespace detail {

// Self-normalized ratio estimate from log-weights lw[i] and gradients g[i*d..].
inline DriftEstimate aggregate(const Vec& lw, const Vec& g, std::size_t d, double sigma2) {
  DriftEstimate out;
  const std::size_t n = lw.size();
  double lse = log_sum_exp(lw);
  if (!std::isfinite(lse)) {
    out.overflow = true;
    return out;
  }
  Vec w(n);
  double s2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = std::exp(lw[i] - lse);
    s2 += w[i] * w[i];
  }
  out.value.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (w[i] == 0.0) continue;
    for (std::size_t a = 0; a < d; ++a) out.value[a] += w[i] * g[i * d + a];
  }
  for (double v : out.value)
    if (!std::isfinite(v)) {
      out.overflow = true;
      out.value.clear();
      return out;
    }
  out.se.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (w[i] == 0.0) continue;
    for (std::size_t a = 0; a < d; ++a) {
      double dev = g[i * d + a] - out.value[a];
      out.se[a] += w[i] * w[i] * dev * dev;
    }
  }
  for (std::size_t a = 0; a < d; ++a) {
    out.value[a] *= sigma2;
    out.se[a] = sigma2 * std::sqrt(out.se[a]);
  }
  out.ess = 1.0 / s2;
  out.degenerate = out.ess < 2.0;
  return out;
}

inline void check_time(const BridgeSpec& s, double t) {
  if (!(t >= 0.0 && t < s.T)) throw InputError("drift: t must lie in [0, T)");
}

}  // namespace detail

// Plain ratio-of-means estimator with z ~ N(0, sigma^2 (T - t)), y = x + z.
// Numerator and denominator share the draws.
inline DriftEstimate drift_mc(const BridgeSpec& s, std::span<const double> x, double t, std::size_t n_mc, Rng& rng) {
  s.require_brownian("drift_mc");
  detail::check_time(s, t);
  if (n_mc < 1) throw InputError("drift_mc: n_mc must be >= 1");
  const std::size_t d = s.dimension();
  require_dim(x.size(), d, "drift_mc");
  double b = s.beta.target_exponent();
  if (b == 0.0) return {Vec(d, 0.0), Vec(d, 0.0), static_cast<double>(n_mc), false, false};
  const double sd = s.sigma * std::sqrt(s.T - t);
  const detail::RatioEval re(s);
  Vec lw(n_mc), g(n_mc * d), y(d);
  for (std::size_t i = 0; i < n_mc; ++i) {
    for (std::size_t a = 0; a < d; ++a) y[a] = x[a] + sd * rng.normal();
    lw[i] = re.log_r(y);
    if (lw[i] == kNegInf) {
      std::fill_n(g.begin() + i * d, d, 0.0);
      continue;
    }
    re.grad(y, std::span<double>(g.data() + i * d, d));
  }
  return detail::aggregate(lw, g, d, s.sigma * s.sigma);
}

// Importance-sampled form: z ~ w in unit-time units, y = x + sqrt(T - t) z,
// log-weight log phi_sigma(z) + log r(y) - log w(z).
inline DriftEstimate drift_mc_importance(const BridgeSpec& s, std::span<const double> x, double t, std::size_t n_mc,
                                         const DensityModel& proposal, Rng& rng) {
  s.require_brownian("drift_mc_importance");
  detail::check_time(s, t);
  if (n_mc < 1) throw InputError("drift_mc_importance: n_mc must be >= 1");
  const std::size_t d = s.dimension();
  require_dim(x.size(), d, "drift_mc_importance");
  require_dim(proposal.dimension(), d, "proposal");
  double b = s.beta.target_exponent();
  if (b == 0.0) return {Vec(d, 0.0), Vec(d, 0.0), static_cast<double>(n_mc), false, false};
  const double rt = std::sqrt(s.T - t);
  const detail::RatioEval re(s);
  const double s2 = s.sigma * s.sigma;
  const double lphi0 = -static_cast<double>(d) * (std::log(s.sigma) + kLogSqrt2Pi);
  Vec lw(n_mc), g(n_mc * d), y(d), z(d);
  for (std::size_t i = 0; i < n_mc; ++i) {
    proposal.sample_into(rng, z);
    double lphi = lphi0;
    for (std::size_t a = 0; a < d; ++a) {
      y[a] = x[a] + rt * z[a];
      lphi -= 0.5 * z[a] * z[a] / s2;
    }
    double lr = re.log_r(y);
    lw[i] = lphi + lr - proposal.log_density(z);
    if (lr == kNegInf) {
      std::fill_n(g.begin() + i * d, d, 0.0);
      continue;
    }
    re.grad(y, std::span<double>(g.data() + i * d, d));
  }
  return detail::aggregate(lw, g, d, s.sigma * s.sigma);
}

// Exact drift for a diagonal Gaussian target and b = 0. Per axis, log r is
// quadratic, so h is a Gaussian integral.
inline Vec drift_closed_form_gaussian(const BridgeSpec& s, std::span<const double> x, double t) {
  s.require_brownian("closed-form drift");
  detail::check_time(s, t);
  if (s.target.kind() != DensityKind::gaussian) throw Unsupported("closed-form drift needs a Gaussian target");
  const auto& g = s.target.as<kinds::Gaussian>();
  const std::size_t d = s.dimension();
  require_dim(x.size(), d, "closed-form drift");
  double b = s.beta.target_exponent();
  Vec u(d, 0.0);
  if (b == 0.0) return u;
  const double s2 = s.sigma * s.sigma;
  const double vT = s2 * s.T;
  const double v = s2 * (s.T - t);
  for (std::size_t i = 0; i < d; ++i) {
    double lam = b * (1.0 / g.var[i] - 1.0 / vT);
    double eta = b * (g.mean[i] / g.var[i] - s.x0[i] / vT);
    double p = 1.0 / v + lam;
    u[i] = s2 * (-x[i] / v + (x[i] / v + eta) / (p * v));
  }
  return u;
}

inline Vec drift_closed_form_gaussian(const BridgeSpec& s, const Vec& x, double t) {
  return drift_closed_form_gaussian(s, std::span<const double>(x), t);
}

// KL(p || q) = integral of p (log p - log q), split into positive and negative parts.
inline double kl_quadrature(const DensityModel& p, const DensityModel& q, const QuadratureSpec& spec = {}) {
  require_dim(q.dimension(), p.dimension(), "kl_quadrature");
  auto dom = spec.domain.empty() ? p.default_domain(spec) : spec.domain;
  auto part = [&](double sign) {
    return integrate_log(
               [&](std::span<const double> x) {
                 double lp = p.log_density(x);
                 if (lp == kNegInf) return kNegInf;
                 double diff = sign * (lp - q.log_density(x));
                 return diff > 0.0 ? lp + std::log(diff) : kNegInf;
               },
               dom, spec)
        .value;
  };
  return part(1.0) - part(-1.0);
}

// Optimal cost -(1+beta) log C with C = integral f_T^{b} k_T^{a}; KL(f_T || k_T) at beta = inf.
inline double cost_estimate(const BridgeSpec& s, const QuadratureSpec& spec = {}) {
  s.validate();
  if (!s.target.normalized()) throw InputError("cost_estimate needs a normalized target");
  DensityModel k = s.terminal_kernel();
  if (s.beta.is_zero()) return 0.0;
  if (s.beta.is_infinite()) {
    if (s.target.kind() == DensityKind::gaussian) {
      const auto& g = s.target.as<kinds::Gaussian>();
      const auto& kg = k.as<kinds::Gaussian>();
      double out = 0.0;
      for (std::size_t i = 0; i < g.mean.size(); ++i) {
        double r = g.var[i] / kg.var[i], dm = g.mean[i] - kg.mean[i];
        out += 0.5 * (r - 1.0 - std::log(r) + dm * dm / kg.var[i]);
      }
      return out;
    }
    return kl_quadrature(s.target, k, spec);
  }
  GeometricMixture gm{k, s.target, s.beta, std::nullopt};
  return -(1.0 + s.beta.value()) * geometric_mixture_log_normalizer(gm, spec);
}

// u(x, t) with its metadata. eval needs an Rng for the Monte Carlo methods;
// the closed form ignores it.
struct DriftField {
  DriftMethod method = DriftMethod::mc_plain;
  std::size_t n_mc = 200;
  std::optional<DensityModel> proposal;
  std::function<DriftEstimate(std::span<const double>, double, Rng&)> eval;

  DriftEstimate operator()(std::span<const double> x, double t, Rng& rng) const { return eval(x, t, rng); }
};

inline DriftField make_drift(const BridgeSpec& s, DriftMethod method, std::size_t n_mc = 200,
                             std::optional<DensityModel> proposal = std::nullopt) {
  s.validate();
  DriftField f;
  f.method = method;
  f.n_mc = n_mc;
  f.proposal = proposal;
  switch (method) {
    case DriftMethod::closed_form:
      if (s.target.kind() != DensityKind::gaussian) throw Unsupported("closed-form drift needs a Gaussian target");
      f.n_mc = 0;
      f.eval = [s](std::span<const double> x, double t, Rng&) {
        Vec u = drift_closed_form_gaussian(s, x, t);
        return DriftEstimate{u, Vec(u.size(), 0.0), kInf, false, false};
      };
      break;
    case DriftMethod::mc_plain:
      f.eval = [s, n_mc](std::span<const double> x, double t, Rng& rng) { return drift_mc(s, x, t, n_mc, rng); };
      break;
    case DriftMethod::mc_importance:
      if (!proposal) throw InputError("importance drift needs a proposal density");
      f.eval = [s, n_mc, w = *proposal](std::span<const double> x, double t, Rng& rng) {
        return drift_mc_importance(s, x, t, n_mc, w, rng);
      };
      break;
  }
  return f;
}

// Evaluates the field at many points; call i draws from substream (seed, i).
inline std::vector<DriftEstimate> drift_batch(const DriftField& f, const std::vector<Vec>& xs, const Vec& ts,
                                              std::uint64_t seed, unsigned threads = 1) {
  if (ts.size() != xs.size()) throw InputError("drift_batch: need one time per point");
  std::vector<DriftEstimate> out(xs.size());
  parallel_for(xs.size(), threads, [&](std::size_t i) {
    Rng rng = make_rng(seed, i, drift_stream(0));
    out[i] = f(xs[i], ts[i], rng);
  });
  return out;
}

}  // namespace ssb
