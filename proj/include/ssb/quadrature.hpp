#pragma once

#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "core.hpp"

namespace ssb {

// One integration axis. Either a finite box [lo, hi] integrated by trapezoid,
// or the whole line mapped through x = center + scale*tan(theta).
struct AxisDomain {
  double lo = 0.0;
  double hi = 0.0;
  bool tan_map = false;
  double center = 0.0;
  double scale = 1.0;

  static AxisDomain box(double lo, double hi) { return {lo, hi, false, 0.0, 1.0}; }
  static AxisDomain line(double center, double scale) {
    return {kNegInf, kInf, true, center, scale};
  }
};

struct QuadratureSpec {
  double rel_tol = 1e-10;
  double scale_units = 12.0;  // half-width of default boxes, in scale units
  int initial_intervals = 256;
  int initial_intervals_2d = 64;
  int max_refinements_1d = 14;
  int max_refinements_2d = 6;
  int min_refinements = 2;
  // Overrides the model-derived domain when nonempty.
  std::vector<AxisDomain> domain;
};

struct QuadratureResult {
  double log_value = kNegInf;  // log of the integral
  double value = 0.0;
  double previous = 0.0;       // estimate before the last halving
  int intervals = 0;           // per axis, at the final level
  // Integrand mass fraction sitting at the box edges (width times edge value over the
  // integral). Zero for mapped axes. A crude tail indicator.
  double edge_fraction = 0.0;
};

namespace detail {

struct AxisNodes {
  std::vector<double> x;      // physical abscissae
  std::vector<double> log_w;  // log quadrature weight incl. Jacobian
};

// Trapezoid nodes at n intervals on a box; n midpoints on a mapped axis.
inline AxisNodes axis_nodes(const AxisDomain& d, int n) {
  AxisNodes out;
  out.x.resize(n + 1);
  out.log_w.resize(n + 1);
  if (!d.tan_map) {
    double h = (d.hi - d.lo) / n;
    for (int i = 0; i <= n; ++i) {
      out.x[i] = (i == n) ? d.hi : d.lo + h * i;
      double w = (i == 0 || i == n) ? 0.5 * h : h;
      out.log_w[i] = std::log(w);
    }
  } else {
    // Open midpoint rule in theta: the endpoint limits are never evaluated.
    const double pi = std::numbers::pi;
    double h = pi / n;
    out.x.resize(n);
    out.log_w.resize(n);
    for (int i = 0; i < n; ++i) {
      double th = -0.5 * pi + h * (i + 0.5);
      double c = std::cos(th);
      out.x[i] = d.center + d.scale * std::tan(th);
      out.log_w[i] = std::log(h * d.scale) - 2.0 * std::log(c);
    }
  }
  return out;
}

}  // namespace detail

// Integrates exp(logf) over a 1D or 2D domain by repeated halving until two
// successive estimates agree to spec.rel_tol. Throws NumericError otherwise.
inline QuadratureResult integrate_log(const std::function<double(std::span<const double>)>& logf,
                                      const std::vector<AxisDomain>& domain,
                                      const QuadratureSpec& spec) {
  const std::size_t dim = domain.size();
  if (dim != 1 && dim != 2) throw Unsupported("quadrature supports 1 or 2 dimensions");
  for (const auto& a : domain)
    if (!a.tan_map && !(a.hi > a.lo)) throw InputError("quadrature: empty integration box");
  const int max_ref = dim == 1 ? spec.max_refinements_1d : spec.max_refinements_2d;

  auto estimate = [&](int n, double* edge) -> double {
    std::vector<detail::AxisNodes> ax;
    for (const auto& a : domain) ax.push_back(detail::axis_nodes(a, n));
    std::vector<double> terms;
    double edge_lse = kNegInf;
    double pt[2];
    if (dim == 1) {
      const int n0 = static_cast<int>(ax[0].x.size()) - 1;
      terms.reserve(n0 + 1);
      for (int i = 0; i <= n0; ++i) {
        pt[0] = ax[0].x[i];
        double lf = logf(std::span<const double>(pt, 1));
        if (std::isnan(lf)) throw NumericError("quadrature: integrand is NaN", kNaN, kNaN);
        terms.push_back(lf + ax[0].log_w[i]);
        if (!domain[0].tan_map && (i == 0 || i == n0))
          edge_lse = log_add_exp(edge_lse, lf + std::log(domain[0].hi - domain[0].lo));
      }
    } else {
      const int n0 = static_cast<int>(ax[0].x.size()) - 1;
      const int n1 = static_cast<int>(ax[1].x.size()) - 1;
      terms.reserve(static_cast<std::size_t>(n0 + 1) * (n1 + 1));
      for (int i = 0; i <= n0; ++i) {
        for (int j = 0; j <= n1; ++j) {
          pt[0] = ax[0].x[i];
          pt[1] = ax[1].x[j];
          double lf = logf(std::span<const double>(pt, 2));
          if (std::isnan(lf)) throw NumericError("quadrature: integrand is NaN", kNaN, kNaN);
          terms.push_back(lf + ax[0].log_w[i] + ax[1].log_w[j]);
          bool e0 = !domain[0].tan_map && (i == 0 || i == n0);
          bool e1 = !domain[1].tan_map && (j == 0 || j == n1);
          if (e0) edge_lse = log_add_exp(edge_lse, lf + ax[1].log_w[j] + std::log(domain[0].hi - domain[0].lo));
          if (e1) edge_lse = log_add_exp(edge_lse, lf + ax[0].log_w[i] + std::log(domain[1].hi - domain[1].lo));
        }
      }
    }
    *edge = edge_lse;
    return log_sum_exp(terms);
  };

  int n = dim == 1 ? spec.initial_intervals : spec.initial_intervals_2d;
  double edge = kNegInf;
  double prev = estimate(n, &edge);
  double older = prev;
  for (int r = 1; r <= max_ref; ++r) {
    n *= 2;
    double cur = estimate(n, &edge);
    if (!std::isfinite(cur) && cur != kNegInf)
      throw NumericError("quadrature: non-finite estimate", std::exp(prev), std::exp(cur));
    bool settled = (cur == kNegInf && prev == kNegInf) ||
                   std::abs(std::expm1(cur - prev)) < spec.rel_tol;
    if (settled && r >= spec.min_refinements) {
      QuadratureResult res;
      res.log_value = cur;
      res.value = std::exp(cur);
      res.previous = std::exp(prev);
      res.intervals = n;
      res.edge_fraction = (cur == kNegInf) ? 0.0 : std::exp(edge - cur);
      return res;
    }
    older = prev;
    prev = cur;
  }
  throw NumericError("quadrature did not converge after " + std::to_string(max_ref) +
                         " halvings (last estimates " + format_double(std::exp(older)) + ", " +
                         format_double(std::exp(prev)) + ")",
                     std::exp(older), std::exp(prev));
}

}  // namespace ssb
