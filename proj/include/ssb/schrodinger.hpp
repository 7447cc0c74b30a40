#pragma once

#include <json.hpp>

#include "density.hpp"
#include "rng.hpp"

namespace ssb {

// Tensor lattice (d <= 2) with trapezoid weights. Points are axis 0 major.
struct Lattice {
  std::size_t d = 1;
  Vec points;   // n * d
  Vec weights;  // n

  std::size_t size() const { return weights.size(); }
  std::span<const double> point(std::size_t i) const { return {points.data() + i * d, d}; }

  static Lattice tensor(const Vec& lo, const Vec& hi, const std::vector<std::size_t>& n) {
    if (lo.empty() || lo.size() > 2 || hi.size() != lo.size() || n.size() != lo.size())
      throw InputError("lattice: need matching lo/hi/n of dimension 1 or 2");
    std::vector<detail::AxisNodes> ax;
    for (std::size_t a = 0; a < lo.size(); ++a) {
      if (n[a] < 2) throw InputError("lattice: need at least 2 points per axis");
      ax.push_back(detail::axis_nodes(AxisDomain::box(lo[a], hi[a]), static_cast<int>(n[a] - 1)));
    }
    Lattice L;
    L.d = lo.size();
    if (L.d == 1) {
      L.points = ax[0].x;
      for (double lw : ax[0].log_w) L.weights.push_back(std::exp(lw));
    } else {
      for (std::size_t i = 0; i < ax[0].x.size(); ++i)
        for (std::size_t j = 0; j < ax[1].x.size(); ++j) {
          L.points.push_back(ax[0].x[i]);
          L.points.push_back(ax[1].x[j]);
          L.weights.push_back(std::exp(ax[0].log_w[i] + ax[1].log_w[j]));
        }
    }
    return L;
  }

  static Lattice line(double lo, double hi, std::size_t n) { return tensor({lo}, {hi}, {n}); }

  // A single atom of unit weight (Dirac initial law).
  static Lattice atom(const Vec& x) {
    Lattice L;
    L.d = x.size();
    L.points = x;
    L.weights = {1.0};
    return L;
  }
};

// Discretized system: f0 on grid0, fT on gridT, kernel P[i][j] = p(x_i, T | y_j, 0)
// stored as logs, row-major over (gridT index i, grid0 index j).
struct DiscreteProblem {
  Lattice grid0, gridT;
  Vec f0, fT;
  Vec log_kernel;
  Beta beta = Beta::infinite();

  double log_p(std::size_t i, std::size_t j) const { return log_kernel[i * grid0.size() + j]; }

  void validate() const {
    const std::size_t n0 = grid0.size(), nT = gridT.size();
    require_dim(f0.size(), n0, "problem f0");
    require_dim(fT.size(), nT, "problem fT");
    require_dim(log_kernel.size(), n0 * nT, "problem kernel");
    auto mass = [](const Vec& f, const Vec& w, const char* what) {
      double s = 0.0;
      for (std::size_t i = 0; i < f.size(); ++i) {
        if (!(f[i] >= 0.0) || !std::isfinite(f[i])) throw InputError(std::string(what) + " must be nonnegative and finite");
        s += w[i] * f[i];
      }
      if (std::abs(s - 1.0) > 1e-8) throw InputError(std::string(what) + " must integrate to 1 (got " + format_double(s) + ")");
    };
    mass(f0, grid0.weights, "f0");
    mass(fT, gridT.weights, "fT");
    for (double lp : log_kernel)
      if (!std::isfinite(lp)) throw InputError("kernel must be strictly positive and finite");
    for (std::size_t j = 0; j < n0; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < nT; ++i) s += gridT.weights[i] * std::exp(log_p(i, j));
      if (std::abs(s - 1.0) > 1e-6) throw InputError("kernel column " + std::to_string(j) + " does not integrate to 1");
    }
  }
};

namespace detail {

inline Vec eval_on(const DensityModel& m, const Lattice& L) {
  require_dim(m.dimension(), L.d, "density on lattice");
  Vec v(L.size());
  for (std::size_t i = 0; i < L.size(); ++i) v[i] = std::exp(m.log_density(L.point(i)));
  return v;
}

inline void normalize_on(Vec& f, const Lattice& L, const char* what) {
  double s = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) s += L.weights[i] * f[i];
  if (!(s > 0.0) || !std::isfinite(s)) throw InputError(std::string(what) + " has no mass on the grid");
  for (double& v : f) v /= s;
}

}  // namespace detail

// Brownian kernel phi_{sigma sqrt T}(x - y) with each column renormalized to
// quadrature mass 1 on gridT. Densities are tabulated and renormalized.
inline DiscreteProblem brownian_problem(const Lattice& grid0, const Lattice& gridT, const Vec& f0, const Vec& fT,
                                        double sigma, double T, Beta beta) {
  if (!(sigma > 0.0) || !(T > 0.0)) throw InputError("brownian_problem: sigma and T must be positive");
  require_dim(gridT.d, grid0.d, "brownian_problem grids");
  DiscreteProblem p;
  p.grid0 = grid0;
  p.gridT = gridT;
  p.f0 = f0;
  p.fT = fT;
  p.beta = beta;
  detail::normalize_on(p.f0, grid0, "f0");
  detail::normalize_on(p.fT, gridT, "fT");
  const std::size_t n0 = grid0.size(), nT = gridT.size(), d = grid0.d;
  const double sd = sigma * std::sqrt(T);
  p.log_kernel.resize(n0 * nT);
  for (std::size_t j = 0; j < n0; ++j) {
    auto y = grid0.point(j);
    Vec col(nT);
    for (std::size_t i = 0; i < nT; ++i) {
      auto x = gridT.point(i);
      double l = 0.0;
      for (std::size_t a = 0; a < d; ++a) l += log_normal_pdf(x[a], y[a], sd);
      col[i] = l;
    }
    Vec t(nT);
    for (std::size_t i = 0; i < nT; ++i) t[i] = col[i] + std::log(gridT.weights[i]);
    double lse = log_sum_exp(t);
    for (std::size_t i = 0; i < nT; ++i) p.log_kernel[i * n0 + j] = col[i] - lse;
  }
  return p;
}

inline DiscreteProblem brownian_problem(const Lattice& grid0, const Lattice& gridT, const DensityModel& mu0,
                                        const DensityModel& muT, double sigma, double T, Beta beta) {
  return brownian_problem(grid0, gridT, detail::eval_on(mu0, grid0), detail::eval_on(muT, gridT), sigma, T, beta);
}

// Uncontrolled terminal law on gridT: sum_j a_j P_ij f0_j.
inline Vec pushforward(const DiscreteProblem& p) {
  const std::size_t n0 = p.grid0.size(), nT = p.gridT.size();
  Vec out(nT, 0.0);
  for (std::size_t i = 0; i < nT; ++i)
    for (std::size_t j = 0; j < n0; ++j) out[i] += p.grid0.weights[j] * std::exp(p.log_p(i, j)) * p.f0[j];
  return out;
}

// d_H(u, v) = log max(u/v) - log min(u/v).
inline double hilbert_distance(const Vec& u, const Vec& v) {
  require_dim(v.size(), u.size(), "hilbert_distance");
  if (u.empty()) throw InputError("hilbert_distance: empty functions");
  double hi = kNegInf, lo = kInf;
  for (std::size_t i = 0; i < u.size(); ++i) {
    if (!(u[i] > 0.0) || !(v[i] > 0.0) || !std::isfinite(u[i]) || !std::isfinite(v[i]))
      throw InputError("hilbert_distance: functions must be strictly positive");
    double r = std::log(u[i]) - std::log(v[i]);
    hi = std::max(hi, r);
    lo = std::min(lo, r);
  }
  return hi - lo;
}

// Same on log values.
inline double hilbert_distance_log(const Vec& lu, const Vec& lv) {
  double hi = kNegInf, lo = kInf;
  for (std::size_t i = 0; i < lu.size(); ++i) {
    double r = lu[i] - lv[i];
    hi = std::max(hi, r);
    lo = std::min(lo, r);
  }
  return hi - lo;
}

// The power step phi -> phi^{beta/(1+beta)}.
inline Vec power_step(const Vec& phi, Beta beta) {
  Vec out(phi.size());
  double b = beta.target_exponent();
  for (std::size_t i = 0; i < phi.size(); ++i) out[i] = std::exp(weighted_log(b, std::log(phi[i])));
  return out;
}

namespace detail {

struct HalfSteps {
  Vec log_rho0_hat;  // f0 / psi
  Vec log_k;         // log sum_j a_j P_ij rho0_j
  Vec log_rhoT_hat;  // fT^b / k^b
  Vec log_psi_new;   // log sum_i c_i P_ij rhoT_i
};

inline HalfSteps apply_operator(const DiscreteProblem& p, const Vec& log_psi) {
  const std::size_t n0 = p.grid0.size(), nT = p.gridT.size();
  const double b = p.beta.target_exponent();
  HalfSteps h;
  h.log_rho0_hat.resize(n0);
  for (std::size_t j = 0; j < n0; ++j) h.log_rho0_hat[j] = std::log(p.f0[j]) - log_psi[j];
  h.log_k.resize(nT);
  Vec t(n0);
  for (std::size_t i = 0; i < nT; ++i) {
    for (std::size_t j = 0; j < n0; ++j) t[j] = std::log(p.grid0.weights[j]) + p.log_p(i, j) + h.log_rho0_hat[j];
    h.log_k[i] = log_sum_exp(t);
  }
  h.log_rhoT_hat.resize(nT);
  for (std::size_t i = 0; i < nT; ++i) {
    double lf = std::log(p.fT[i]);
    h.log_rhoT_hat[i] = weighted_log(b, lf) - weighted_log(b, h.log_k[i]);
    if (b > 0.0 && lf == kNegInf) h.log_rhoT_hat[i] = kNegInf;
  }
  h.log_psi_new.resize(n0);
  Vec s(nT);
  for (std::size_t j = 0; j < n0; ++j) {
    for (std::size_t i = 0; i < nT; ++i) s[i] = std::log(p.gridT.weights[i]) + p.log_p(i, j) + h.log_rhoT_hat[i];
    h.log_psi_new[j] = log_sum_exp(s);
  }
  return h;
}

inline double log_l2_norm(const Vec& log_g, const Vec& w) {
  Vec t(log_g.size());
  for (std::size_t j = 0; j < t.size(); ++j) t[j] = std::log(w[j]) + 2.0 * log_g[j];
  return 0.5 * log_sum_exp(t);
}

}  // namespace detail

// One application of the update map psi0 -> psi0_new.
inline Vec iterate_once(const DiscreteProblem& p, const Vec& psi0) {
  require_dim(psi0.size(), p.grid0.size(), "iterate_once");
  Vec lp(psi0.size());
  for (std::size_t j = 0; j < psi0.size(); ++j) {
    if (!(psi0[j] > 0.0) || !std::isfinite(psi0[j])) throw InputError("iterate_once: psi must be strictly positive");
    lp[j] = std::log(psi0[j]);
  }
  Vec out = detail::apply_operator(p, lp).log_psi_new;
  for (double& v : out) v = std::exp(v);
  return out;
}

struct SchrodingerSolution {
  Vec rho0, rhoT;
  double residual0 = 0.0, residualT = 0.0;
  Vec trace;  // d_H between successive normalized iterates
  Vec q;      // optimal terminal density on gridT
  double cost = 0.0;
  std::size_t iterations = 0;
};

struct TerminalLaw {
  Vec q;
  double cost = 0.0;
};

// q* = rhoT * sum_j a_j P_ij rho0_j (the geometric mixture f_T^b k^a at the
// fixed point) and the cost -KL(mu0, nu0); at beta = inf the gauge-free form
// -sum f0 log psi0 + sum fT log rhoT.
inline TerminalLaw terminal_law_and_cost(const SchrodingerSolution& sol, const DiscreteProblem& p) {
  const std::size_t n0 = p.grid0.size(), nT = p.gridT.size();
  TerminalLaw out;
  out.q.assign(nT, 0.0);
  Vec psi0(n0, 0.0);
  for (std::size_t i = 0; i < nT; ++i) {
    double k = 0.0;
    for (std::size_t j = 0; j < n0; ++j) k += p.grid0.weights[j] * std::exp(p.log_p(i, j)) * sol.rho0[j];
    out.q[i] = sol.rhoT[i] * k;
  }
  for (std::size_t j = 0; j < n0; ++j)
    for (std::size_t i = 0; i < nT; ++i) psi0[j] += p.gridT.weights[i] * std::exp(p.log_p(i, j)) * sol.rhoT[i];
  double c = 0.0;
  for (std::size_t j = 0; j < n0; ++j)
    if (p.f0[j] > 0.0) c -= p.grid0.weights[j] * p.f0[j] * std::log(psi0[j]);
  if (p.beta.is_infinite())
    for (std::size_t i = 0; i < nT; ++i)
      if (p.fT[i] > 0.0) c += p.gridT.weights[i] * p.fT[i] * std::log(sol.rhoT[i]);
  out.cost = c;
  return out;
}

// Iterates the normalized map until d_H of successive iterates is below tol,
// rescales to the fixed point of the unnormalized map and fills the solution.
inline SchrodingerSolution solve(const DiscreteProblem& p, double tol = 1e-12, std::size_t max_iter = 10000,
                                 const Vec& psi_init = {}) {
  p.validate();
  const std::size_t n0 = p.grid0.size(), nT = p.gridT.size();
  for (double f : p.f0)
    if (!(f > 0.0)) throw InputError("solve: f0 must be strictly positive on grid0");
  Vec lg(n0, 0.0);
  if (!psi_init.empty()) {
    require_dim(psi_init.size(), n0, "solve initial psi");
    for (std::size_t j = 0; j < n0; ++j) {
      if (!(psi_init[j] > 0.0)) throw InputError("solve: initial psi must be strictly positive");
      lg[j] = std::log(psi_init[j]);
    }
  }
  double ln = detail::log_l2_norm(lg, p.grid0.weights);
  for (double& v : lg) v -= ln;
  SchrodingerSolution sol;
  double log_norm_O = 0.0;
  bool done = false;
  for (sol.iterations = 1; sol.iterations <= max_iter; ++sol.iterations) {
    Vec next = detail::apply_operator(p, lg).log_psi_new;
    log_norm_O = detail::log_l2_norm(next, p.grid0.weights);
    for (double& v : next) v -= log_norm_O;
    double dh = hilbert_distance_log(next, lg);
    sol.trace.push_back(dh);
    lg = std::move(next);
    if (dh < tol) {
      done = true;
      break;
    }
  }
  if (!done) throw NonConvergence("Schrodinger iteration did not converge in " + std::to_string(max_iter) + " iterations", sol.trace);
  // Fixed point of the unnormalized map: ||O(g)||^{1+beta} g. Any scaling works at beta = inf.
  Vec lpsi = lg;
  if (!p.beta.is_infinite()) {
    Vec check = detail::apply_operator(p, lg).log_psi_new;
    double l = detail::log_l2_norm(check, p.grid0.weights);
    for (double& v : lpsi) v += (1.0 + p.beta.value()) * l;
  }
  auto h = detail::apply_operator(p, lpsi);
  sol.rho0.resize(n0);
  sol.rhoT.resize(nT);
  for (std::size_t j = 0; j < n0; ++j) sol.rho0[j] = std::exp(h.log_rho0_hat[j]);
  for (std::size_t i = 0; i < nT; ++i) sol.rhoT[i] = std::exp(h.log_rhoT_hat[i]);
  // Residuals of both equations, sup norm.
  for (std::size_t j = 0; j < n0; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < nT; ++i) s += p.gridT.weights[i] * std::exp(p.log_p(i, j)) * sol.rhoT[i];
    sol.residual0 = std::max(sol.residual0, std::abs(p.f0[j] - sol.rho0[j] * s));
  }
  if (!p.beta.is_zero()) {
    double e = p.beta.is_infinite() ? 1.0 : (1.0 + p.beta.value()) / p.beta.value();
    for (std::size_t i = 0; i < nT; ++i) {
      double k = 0.0;
      for (std::size_t j = 0; j < n0; ++j) k += p.grid0.weights[j] * std::exp(p.log_p(i, j)) * sol.rho0[j];
      double lhs = sol.rhoT[i] > 0.0 ? std::exp(e * std::log(sol.rhoT[i])) * k : 0.0;
      sol.residualT = std::max(sol.residualT, std::abs(p.fT[i] - lhs));
    }
  }
  auto tl = terminal_law_and_cost(sol, p);
  sol.q = std::move(tl.q);
  sol.cost = tl.cost;
  return sol;
}

// JSON forms.
inline nlohmann::json lattice_to_json(const Lattice& L) {
  return {{"d", L.d}, {"points", L.points}, {"weights", L.weights}};
}

inline nlohmann::json problem_to_json(const DiscreteProblem& p) {
  nlohmann::json j;
  j["grid0"] = lattice_to_json(p.grid0);
  j["gridT"] = lattice_to_json(p.gridT);
  j["f0"] = p.f0;
  j["fT"] = p.fT;
  j["log_kernel"] = p.log_kernel;
  j["beta"] = p.beta.is_infinite() ? nlohmann::json("inf") : nlohmann::json(p.beta.value());
  return j;
}

inline nlohmann::json solution_to_json(const SchrodingerSolution& s) {
  return {{"rho0", s.rho0},           {"rhoT", s.rhoT}, {"residual0", s.residual0},
          {"residualT", s.residualT}, {"trace", s.trace}, {"terminal_density", s.q},
          {"cost", s.cost},           {"iterations", s.iterations}};
}

}  // namespace ssb
