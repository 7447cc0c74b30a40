#pragma once

#include <algorithm>
#include <numeric>
#include <ostream>

#include <json.hpp>

#include "density.hpp"
#include "rng.hpp"

namespace ssb {

namespace detail {

inline void check_simplex(const Vec& p, const char* what, double tol = 1e-9) {
  double s = 0.0;
  for (double v : p) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw InputError(std::string(what) + ": entries must be nonnegative");
    s += v;
  }
  if (std::abs(s - 1.0) > tol) throw InputError(std::string(what) + ": entries must sum to 1");
}

}  // namespace detail

// Sum p log(p/q); +inf when p is not absolutely continuous w.r.t. q.
inline double kl_discrete(const Vec& p, const Vec& q) {
  require_dim(q.size(), p.size(), "kl_discrete");
  detail::check_simplex(p, "kl_discrete p");
  detail::check_simplex(q, "kl_discrete q");
  double out = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    if (q[i] == 0.0) return kInf;
    out += p[i] * std::log(p[i] / q[i]);
  }
  return std::max(out, 0.0);
}

struct KlPairResult {
  double c_beta = 1.0;
  Vec minimizer;
  double objective = 0.0;  // KL(mu*, f0) + beta KL(mu*, f1); unset (0) at beta = inf
};

// KL(mu, f0) + beta KL(mu, f1) for finite beta.
inline double kl_pair_objective(const Vec& mu, const Vec& f0, const Vec& f1, double beta) {
  double out = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    if (mu[i] == 0.0) continue;
    if (f0[i] == 0.0 || (beta > 0.0 && f1[i] == 0.0)) return kInf;
    double l = std::log(mu[i]);
    out += mu[i] * (l - std::log(f0[i]));
    if (beta > 0.0) out += beta * mu[i] * (l - std::log(f1[i]));
  }
  return out;
}

// Closed form: C = sum f0^{a} f1^{b}, mu* = f0^{a} f1^{b} / C.
inline KlPairResult kl_pair_oracle(const Vec& f0, const Vec& f1, Beta beta) {
  require_dim(f1.size(), f0.size(), "kl_pair_oracle");
  detail::check_simplex(f0, "kl_pair_oracle f0");
  detail::check_simplex(f1, "kl_pair_oracle f1");
  for (std::size_t i = 0; i < f0.size(); ++i)
    if (f1[i] > 0.0 && f0[i] == 0.0) throw InputError("kl_pair_oracle: f1 must be absolutely continuous w.r.t. f0");
  const double a = beta.base_exponent(), b = beta.target_exponent();
  KlPairResult r;
  Vec lw(f0.size());
  for (std::size_t i = 0; i < f0.size(); ++i) {
    if (f0[i] == 0.0 || (b > 0.0 && f1[i] == 0.0)) {
      lw[i] = kNegInf;
      continue;
    }
    lw[i] = weighted_log(a, std::log(f0[i])) + weighted_log(b, std::log(f1[i]));
  }
  double lc = log_sum_exp(lw);
  r.c_beta = std::exp(lc);
  r.minimizer.resize(f0.size());
  for (std::size_t i = 0; i < f0.size(); ++i) r.minimizer[i] = std::exp(lw[i] - lc);
  if (!beta.is_infinite()) r.objective = kl_pair_objective(r.minimizer, f0, f1, beta.value());
  return r;
}

struct MinimizeResult {
  Vec x;
  double objective = 0.0;
  std::size_t iterations = 0;
};

// Projected gradient on KL(mu, f0) + beta KL(mu, f1) in the entropic geometry
// (the Bregman projection onto the simplex is a renormalization), step
// 1/(2(1+beta)). Needs f0, f1 > 0.
inline MinimizeResult minimize_kl_pair(const Vec& f0, const Vec& f1, double beta, std::size_t max_iter = 200000,
                                        double tol = 1e-15) {
  const std::size_t n = f0.size();
  MinimizeResult r;
  r.x.assign(n, 1.0 / static_cast<double>(n));
  const double eta = 0.5 / (1.0 + beta);
  double f = kl_pair_objective(r.x, f0, f1, beta);
  Vec lx(n);
  for (std::size_t i = 0; i < n; ++i) lx[i] = std::log(r.x[i]);
  for (r.iterations = 0; r.iterations < max_iter; ++r.iterations) {
    for (std::size_t i = 0; i < n; ++i) {
      double g = (1.0 + beta) * (lx[i] + 1.0) - std::log(f0[i]) - beta * std::log(f1[i]);
      lx[i] -= eta * g;
    }
    double lz = log_sum_exp(lx);
    for (std::size_t i = 0; i < n; ++i) {
      lx[i] -= lz;
      r.x[i] = std::exp(lx[i]);
    }
    double fc = kl_pair_objective(r.x, f0, f1, beta);
    double change = std::abs(f - fc);
    f = fc;
    if (!(change > tol)) break;
  }
  r.objective = f;
  return r;
}

// One-sample Kolmogorov-Smirnov statistic against a CDF.
template <class Cdf>
double ks_statistic(Vec samples, Cdf&& cdf) {
  if (samples.size() < 20) throw InputError("ks_statistic: need at least 20 samples");
  std::sort(samples.begin(), samples.end());
  const double n = static_cast<double>(samples.size());
  double d = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    double f = cdf(samples[i]);
    d = std::max({d, (i + 1) / n - f, f - i / n});
  }
  return d;
}

// Two-sample statistic sup |F_a - F_b|.
inline double ks_two_sample(Vec a, Vec b) {
  if (a.size() < 20 || b.size() < 20) throw InputError("ks_two_sample: need at least 20 samples per side");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < a.size() && j < b.size()) {
    double x = std::min(a[i], b[j]);
    while (i < a.size() && a[i] == x) ++i;
    while (j < b.size() && b[j] == x) ++j;
    d = std::max(d, std::abs(i / na - j / nb));
  }
  return d;
}

// Axis a of a sample set.
inline Vec axis_values(const std::vector<Vec>& xs, std::size_t a) {
  Vec out;
  out.reserve(xs.size());
  for (const auto& x : xs) out.push_back(x.at(a));
  return out;
}

inline double quantile_sorted(const Vec& sorted, double p) {
  if (sorted.empty()) throw InputError("quantile of an empty sample");
  double pos = p * static_cast<double>(sorted.size() - 1);
  std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

struct EmpiricalSummary {
  std::size_t n = 0;
  Vec mean;
  std::vector<Vec> cov;
  Vec quantile_levels{0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99};
  std::vector<Vec> quantiles;  // [axis][level]
  Vec ks;                      // per axis, when a reference was given

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["n"] = n;
    j["mean"] = mean;
    j["covariance"] = cov;
    j["quantile_levels"] = quantile_levels;
    j["quantiles"] = quantiles;
    if (!ks.empty()) j["ks"] = ks;
    return j;
  }
};

inline EmpiricalSummary summarize(const std::vector<Vec>& xs) {
  if (xs.empty()) throw InputError("summarize: empty sample");
  EmpiricalSummary s;
  s.n = xs.size();
  const std::size_t d = xs[0].size();
  s.mean.assign(d, 0.0);
  for (const auto& x : xs)
    for (std::size_t a = 0; a < d; ++a) s.mean[a] += x[a];
  for (double& m : s.mean) m /= static_cast<double>(s.n);
  s.cov.assign(d, Vec(d, 0.0));
  for (const auto& x : xs)
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) s.cov[a][b] += (x[a] - s.mean[a]) * (x[b] - s.mean[b]);
  double denom = s.n > 1 ? static_cast<double>(s.n - 1) : 1.0;
  for (auto& row : s.cov)
    for (double& v : row) v /= denom;
  for (std::size_t a = 0; a < d; ++a) {
    Vec v = axis_values(xs, a);
    std::sort(v.begin(), v.end());
    Vec q;
    for (double p : s.quantile_levels) q.push_back(quantile_sorted(v, p));
    s.quantiles.push_back(q);
  }
  return s;
}

// Q-Q pairs at levels (i + 0.5)/n_points of two samples.
inline void write_qq_csv(Vec a, Vec b, std::size_t n_points, std::ostream& os) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  os << "level,sample,reference\n";
  for (std::size_t i = 0; i < n_points; ++i) {
    double p = (static_cast<double>(i) + 0.5) / static_cast<double>(n_points);
    os << format_double(p) << ',' << format_double(quantile_sorted(a, p)) << ','
       << format_double(quantile_sorted(b, p)) << '\n';
  }
}

struct RejectionResult {
  std::vector<Vec> samples;
  double log_m = 0.0;  // envelope constant on the log scale
  std::size_t attempts = 0;
  double acceptance_rate() const { return attempts ? static_cast<double>(samples.size()) / attempts : 0.0; }
};

// Exact sampler for the normalized geometric mixture. M is the largest ratio
// gm / envelope on a scan grid, padded by `margin`; a draw that exceeds M is
// an error.
inline RejectionResult rejection_sample_geometric_mixture(const GeometricMixture& gm, const DensityModel& envelope,
                                                          std::size_t n, Rng& rng, double margin = 1.05,
                                                          const QuadratureSpec& spec = {}) {
  const std::size_t d = envelope.dimension();
  require_dim(gm.base.dimension(), d, "rejection sampler");
  if (d > 2) throw Unsupported("rejection sampler scans at most 2 dimensions");
  auto log_ratio = [&](std::span<const double> x) {
    double le = envelope.log_density(x);
    double lg = gm.unnormalized_log_density(x);
    if (lg == kNegInf) return kNegInf;
    if (le == kNegInf) return kInf;
    return lg - le;
  };
  auto dom = envelope.default_domain(spec);
  int per_axis = d == 1 ? 20000 : 400;
  std::vector<detail::AxisNodes> ax;
  for (const auto& a : dom) ax.push_back(detail::axis_nodes(a, per_axis));
  RejectionResult r;
  r.log_m = kNegInf;
  if (d == 1) {
    for (double x : ax[0].x) r.log_m = std::max(r.log_m, log_ratio(std::span<const double>(&x, 1)));
  } else {
    double p[2];
    for (double x : ax[0].x)
      for (double y : ax[1].x) {
        p[0] = x;
        p[1] = y;
        r.log_m = std::max(r.log_m, log_ratio(p));
      }
  }
  if (!std::isfinite(r.log_m)) throw InputError("rejection sampler: no finite envelope constant on the scan grid");
  r.log_m += std::log(margin);
  Vec x(d);
  while (r.samples.size() < n) {
    envelope.sample_into(rng, x);
    ++r.attempts;
    double lr = log_ratio(x) - r.log_m;
    if (lr > 0.0) {
      std::string where;
      for (double v : x) where += (where.empty() ? "" : ", ") + format_double(v);
      throw InputError("rejection sampler: envelope violated at (" + where + ")");
    }
    if (std::log(rng.uniform()) < lr) r.samples.push_back(x);
  }
  return r;
}

struct CouplingOracleResult {
  std::vector<Vec> coupling;  // [source j][target i]
  double objective = 0.0;
  std::size_t iterations = 0;
};

// min over couplings pi with row sums m of beta KL(pi_T || n) + KL(pi || R),
// where R has row sums m and pi_T is the column marginal. Entropic mirror
// descent with row normalization; independent of any Schrodinger solver.
inline CouplingOracleResult coupling_oracle(const std::vector<Vec>& R, const Vec& n, double beta,
                                            std::size_t max_iter = 200000, double tol = 1e-14) {
  const std::size_t J = R.size(), I = n.size();
  CouplingOracleResult out;
  out.coupling = R;
  auto objective = [&](const std::vector<Vec>& pi) {
    Vec col(I, 0.0);
    double kl = 0.0;
    for (std::size_t j = 0; j < J; ++j)
      for (std::size_t i = 0; i < I; ++i) {
        col[i] += pi[j][i];
        if (pi[j][i] > 0.0) kl += pi[j][i] * std::log(pi[j][i] / R[j][i]);
      }
    double klT = 0.0;
    for (std::size_t i = 0; i < I; ++i)
      if (col[i] > 0.0) klT += col[i] * std::log(col[i] / n[i]);
    return beta * klT + kl;
  };
  double f = objective(out.coupling);
  const double eta = 1.0 / (1.0 + beta);
  for (out.iterations = 0; out.iterations < max_iter; ++out.iterations) {
    Vec col(I, 0.0);
    for (std::size_t j = 0; j < J; ++j)
      for (std::size_t i = 0; i < I; ++i) col[i] += out.coupling[j][i];
    for (std::size_t j = 0; j < J; ++j) {
      double m = std::accumulate(R[j].begin(), R[j].end(), 0.0);
      Vec lw(I);
      for (std::size_t i = 0; i < I; ++i) {
        double lp = std::log(out.coupling[j][i]);
        lw[i] = lp - eta * (lp - std::log(R[j][i]) + beta * std::log(col[i] / n[i]));
      }
      double lse = log_sum_exp(lw);
      for (std::size_t i = 0; i < I; ++i) out.coupling[j][i] = m * std::exp(lw[i] - lse);
    }
    double fn = objective(out.coupling);
    bool done = std::abs(f - fn) < tol;
    f = fn;
    if (done) break;
  }
  out.objective = f;
  return out;
}

}  // namespace ssb
