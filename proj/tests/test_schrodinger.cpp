#include <gtest/gtest.h>

#include "ssb/diagnostics.hpp"
#include "ssb/schrodinger.hpp"

using namespace ssb;

namespace {

Vec tabulate(const Lattice& L, const std::function<double(double)>& f) {
  Vec v(L.size());
  for (std::size_t i = 0; i < L.size(); ++i) v[i] = f(L.point(i)[0]);
  return v;
}

double npdf(double x, double m, double s) { return std::exp(log_normal_pdf(x, m, s)); }

double integral(const Vec& f, const Lattice& L) {
  double s = 0;
  for (std::size_t i = 0; i < f.size(); ++i) s += L.weights[i] * f[i];
  return s;
}

DiscreteProblem gaussian_problem(Beta beta, std::size_t n = 81) {
  auto g0 = Lattice::line(-5, 5, n), gT = Lattice::line(-6, 6, n);
  return brownian_problem(g0, gT, tabulate(g0, [](double x) { return npdf(x, -0.5, 0.8); }),
                          tabulate(gT, [](double x) { return 0.6 * npdf(x, 1.5, 0.5) + 0.4 * npdf(x, -1, 0.7); }), 1.0,
                          1.0, beta);
}

// Coupling on (grid0 j, gridT i) in mass units.
std::vector<Vec> coupling_of(const SchrodingerSolution& s, const DiscreteProblem& p) {
  std::vector<Vec> pi(p.grid0.size(), Vec(p.gridT.size()));
  for (std::size_t j = 0; j < p.grid0.size(); ++j)
    for (std::size_t i = 0; i < p.gridT.size(); ++i)
      pi[j][i] = p.grid0.weights[j] * s.rho0[j] * std::exp(p.log_p(i, j)) * p.gridT.weights[i] * s.rhoT[i];
  return pi;
}

}  // namespace

TEST(Lattice, TrapezoidWeights) {
  auto L = Lattice::tensor({-1, 0}, {1, 2}, {5, 9});
  EXPECT_EQ(L.size(), 45u);
  double s = 0;
  for (double w : L.weights) s += w;
  EXPECT_NEAR(s, 4.0, 1e-14);
  EXPECT_THROW(Lattice::tensor({0, 0, 0}, {1, 1, 1}, {3, 3, 3}), InputError);
  EXPECT_THROW(Lattice::line(0, 1, 1), InputError);
}

TEST(Problem, ValidationRejectsBadInput) {
  auto p = gaussian_problem(Beta::finite(1), 21);
  EXPECT_NO_THROW(p.validate());
  auto q = p;
  q.f0[3] = -1;
  EXPECT_THROW(q.validate(), InputError);
  q = p;
  q.fT[10] *= 3;
  EXPECT_THROW(q.validate(), InputError);
  q = p;
  q.log_kernel.pop_back();
  EXPECT_THROW(q.validate(), InputError);
  q = p;
  q.log_kernel[5] = kNegInf;
  EXPECT_THROW(q.validate(), InputError);
}

TEST(Hilbert, PowerStepContractsByExactlyB) {
  Rng rng(5);
  for (Beta beta : {Beta::finite(0.5), Beta::finite(3), Beta::finite(40)}) {
    double b = beta.target_exponent();
    for (int rep = 0; rep < 100; ++rep) {
      Vec u(30), v(30);
      for (std::size_t i = 0; i < 30; ++i) {
        u[i] = std::exp(2 * rng.normal());
        v[i] = std::exp(2 * rng.normal());
      }
      double d = hilbert_distance(u, v);
      EXPECT_NEAR(hilbert_distance(power_step(u, beta), power_step(v, beta)), b * d, 1e-12 * std::max(1.0, d));
    }
  }
  EXPECT_NEAR(hilbert_distance({1, 2, 3}, {2, 4, 6}), 0.0, 1e-15);
  EXPECT_THROW(hilbert_distance({1, 0}, {1, 1}), InputError);
}

TEST(Operator, ScalesWithExponentB) {
  for (Beta beta : {Beta::finite(0.5), Beta::finite(4), Beta::infinite()}) {
    auto p = gaussian_problem(beta, 41);
    Vec psi(41);
    for (std::size_t j = 0; j < 41; ++j) psi[j] = 1.0 + 0.3 * std::sin(double(j));
    Vec a = iterate_once(p, psi);
    Vec scaled = psi;
    for (double& v : scaled) v *= 7.5;
    Vec b = iterate_once(p, scaled);
    double f = std::pow(7.5, beta.target_exponent());
    for (std::size_t j = 0; j < 41; ++j) EXPECT_NEAR(b[j] / a[j], f, 1e-12 * f);
  }
}

TEST(Solve, DiracInitialLaw) {
  auto g0 = Lattice::atom({0.3});
  auto gT = Lattice::line(-7, 7, 281);
  Vec fT = tabulate(gT, [](double x) { return npdf(x, 1.0, 0.7); });
  Beta beta = Beta::finite(2);
  double b = beta.target_exponent(), a = beta.base_exponent();
  auto p = brownian_problem(g0, gT, Vec{1.0}, fT, 1.0, 1.0, beta);
  auto s = solve(p);
  Vec want(gT.size()), qwant(gT.size());
  for (std::size_t i = 0; i < gT.size(); ++i) {
    double P = std::exp(p.log_p(i, 0));
    want[i] = std::pow(p.fT[i] / P, b);
    qwant[i] = std::pow(p.fT[i], b) * std::pow(P, a);
  }
  EXPECT_LT(hilbert_distance(s.rhoT, want), 1e-9);
  EXPECT_LT(hilbert_distance(s.q, qwant), 1e-9);
  EXPECT_NEAR(integral(s.q, gT), 1.0, 1e-9);
  EXPECT_LT(s.residual0, 1e-9);
  EXPECT_LT(s.residualT, 1e-9);
}

TEST(Solve, SelfConsistentInstanceWithDoublyStochasticKernel) {
  auto L = Lattice::line(-5, 5, 81);
  const std::size_t n = L.size();
  // Symmetric kernel balanced so that rows and columns both integrate to 1.
  Vec K(n * n), s(n, 1.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) K[i * n + j] = npdf(L.point(i)[0], L.point(j)[0], 0.8);
  for (int it = 0; it < 5000; ++it)
    for (std::size_t i = 0; i < n; ++i) {
      double r = 0;
      for (std::size_t j = 0; j < n; ++j) r += K[i * n + j] * L.weights[j] * s[j];
      s[i] = std::sqrt(s[i] / r);
    }
  DiscreteProblem p;
  p.grid0 = L;
  p.gridT = L;
  p.beta = Beta::finite(1.5);
  double b = p.beta.target_exponent(), beta = 1.5;
  p.log_kernel.resize(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) p.log_kernel[i * n + j] = std::log(s[i] * K[i * n + j] * s[j]);
  p.fT = tabulate(L, [](double x) { return 0.5 * npdf(x, 1.2, 0.6) + 0.5 * npdf(x, -1.4, 0.9); });
  double zf = integral(p.fT, L);
  for (double& v : p.fT) v /= zf;
  double c = 0;
  for (std::size_t i = 0; i < n; ++i) c += L.weights[i] * std::pow(p.fT[i], b);
  p.f0.assign(n, 0.0);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t i = 0; i < n; ++i) p.f0[j] += L.weights[i] * std::exp(p.log_p(i, j)) * std::pow(p.fT[i], b) / c;
  ASSERT_NO_THROW(p.validate());

  // f0 spans the fixed ray of the update map.
  EXPECT_LT(hilbert_distance(iterate_once(p, p.f0), p.f0), 1e-10);

  auto sol = solve(p);
  for (std::size_t j = 0; j < n; ++j) EXPECT_NEAR(sol.rho0[j], std::pow(c, -(1 + beta)), 1e-8 * std::pow(c, -(1 + beta)));
  for (std::size_t i = 0; i < n; ++i) {
    double want = std::pow(c, beta) * std::pow(p.fT[i], b);
    EXPECT_NEAR(sol.rhoT[i], want, 1e-8 * want);
  }
}

TEST(Solve, ResidualsNormalizationAndContraction) {
  for (Beta beta : {Beta::finite(0.5), Beta::finite(1), Beta::finite(5), Beta::infinite()}) {
    auto p = gaussian_problem(beta);
    auto s = solve(p);
    EXPECT_LT(s.residual0, 1e-9) << beta.to_string();
    EXPECT_LT(s.residualT, 1e-9) << beta.to_string();
    EXPECT_NEAR(integral(s.q, p.gridT), 1.0, 1e-6);
    EXPECT_LT(s.trace.back(), 1e-12);
    if (!beta.is_infinite()) {
      for (std::size_t k = 1; k < s.trace.size(); ++k)
        if (s.trace[k - 1] > 1e-10) {
          EXPECT_LE(s.trace[k] / s.trace[k - 1], beta.target_exponent() + 0.05);
        }
    }
    EXPECT_GE(s.cost, -1e-10);
  }
}

TEST(Solve, GaugeIsUniqueForFiniteBeta) {
  auto p = gaussian_problem(Beta::finite(2), 61);
  auto a = solve(p);
  Vec init(61);
  for (std::size_t j = 0; j < 61; ++j) init[j] = std::exp(0.1 * double(j) - 2);
  auto b = solve(p, 1e-12, 10000, init);
  for (std::size_t j = 0; j < 61; ++j) EXPECT_NEAR(a.rho0[j], b.rho0[j], 1e-9 * a.rho0[j]);
  for (std::size_t i = 0; i < 61; ++i) EXPECT_NEAR(a.rhoT[i], b.rhoT[i], 1e-9 * a.rhoT[i] + 1e-300);
}

TEST(Solve, MatchesIndependentSinkhornAtInfiniteBeta) {
  auto p = gaussian_problem(Beta::infinite(), 61);
  auto s = solve(p);
  auto pi = coupling_of(s, p);
  const std::size_t J = p.grid0.size(), I = p.gridT.size();
  std::vector<Vec> K(J, Vec(I));
  Vec m(J), nT(I), u(J, 1.0), v(I, 1.0);
  for (std::size_t j = 0; j < J; ++j) m[j] = p.grid0.weights[j] * p.f0[j];
  for (std::size_t i = 0; i < I; ++i) nT[i] = p.gridT.weights[i] * p.fT[i];
  for (std::size_t j = 0; j < J; ++j)
    for (std::size_t i = 0; i < I; ++i) K[j][i] = p.grid0.weights[j] * std::exp(p.log_p(i, j)) * p.gridT.weights[i];
  for (int it = 0; it < 20000; ++it) {
    for (std::size_t j = 0; j < J; ++j) {
      double r = 0;
      for (std::size_t i = 0; i < I; ++i) r += K[j][i] * v[i];
      u[j] = m[j] / r;
    }
    for (std::size_t i = 0; i < I; ++i) {
      double r = 0;
      for (std::size_t j = 0; j < J; ++j) r += u[j] * K[j][i];
      v[i] = nT[i] / r;
    }
  }
  double worst = 0;
  for (std::size_t j = 0; j < J; ++j)
    for (std::size_t i = 0; i < I; ++i) {
      double q = u[j] * K[j][i] * v[i];
      worst = std::max(worst, std::abs(q - pi[j][i]));
    }
  EXPECT_LT(worst, 1e-6);
  // KL(pi || R) with R_ji = m_j P_ij c_i.
  double kl = 0;
  for (std::size_t j = 0; j < J; ++j)
    for (std::size_t i = 0; i < I; ++i) {
      double R = m[j] * std::exp(p.log_p(i, j)) * p.gridT.weights[i];
      double q = u[j] * K[j][i] * v[i];
      if (q > 0) kl += q * std::log(q / R);
    }
  EXPECT_NEAR(s.cost, kl, 1e-6);
}

TEST(Solve, CostMatchesCouplingOracleOnSmallProblems) {
  auto g0 = Lattice::line(-2, 2, 8), gT = Lattice::line(-3, 3, 12);
  Vec f0 = tabulate(g0, [](double x) { return npdf(x, 0.3, 0.9); });
  Vec fT = tabulate(gT, [](double x) { return npdf(x, -0.8, 0.6) + 0.5 * npdf(x, 1.5, 0.4); });
  for (double bv : {0.5, 1.0, 5.0}) {
    auto p = brownian_problem(g0, gT, f0, fT, 1.0, 1.0, Beta::finite(bv));
    auto s = solve(p);
    std::vector<Vec> R(g0.size(), Vec(gT.size()));
    Vec n(gT.size());
    for (std::size_t j = 0; j < g0.size(); ++j)
      for (std::size_t i = 0; i < gT.size(); ++i)
        R[j][i] = g0.weights[j] * p.f0[j] * std::exp(p.log_p(i, j)) * gT.weights[i];
    for (std::size_t i = 0; i < gT.size(); ++i) n[i] = gT.weights[i] * p.fT[i];
    auto o = coupling_oracle(R, n, bv);
    EXPECT_NEAR(s.cost, o.objective, 1e-6) << bv;
    auto pi = coupling_of(s, p);
    for (std::size_t j = 0; j < g0.size(); ++j)
      for (std::size_t i = 0; i < gT.size(); ++i) EXPECT_NEAR(pi[j][i], o.coupling[j][i], 1e-6);
  }
}

TEST(Solve, BetaLimits) {
  auto p0 = gaussian_problem(Beta::finite(0));
  auto s0 = solve(p0);
  Vec push = pushforward(p0);
  for (std::size_t i = 0; i < push.size(); ++i) EXPECT_NEAR(s0.q[i], push[i], 1e-10);
  EXPECT_NEAR(s0.cost, 0.0, 1e-12);
  EXPECT_EQ(s0.residualT, 0.0);

  auto pb = gaussian_problem(Beta::finite(1e4));
  auto sb = solve(pb, 1e-12, 200000);
  double tv = 0;
  for (std::size_t i = 0; i < sb.q.size(); ++i) tv += 0.5 * pb.gridT.weights[i] * std::abs(sb.q[i] - pb.fT[i]);
  EXPECT_LT(tv, 1e-3);
}

TEST(Solve, UncontrolledTargetCostsNothing) {
  auto p = gaussian_problem(Beta::finite(1));
  p.fT = pushforward(p);
  double z = integral(p.fT, p.gridT);
  for (double& v : p.fT) v /= z;
  auto s = solve(p);
  EXPECT_NEAR(s.cost, 0.0, 1e-9);
  for (std::size_t i = 0; i < s.q.size(); ++i) EXPECT_NEAR(s.q[i], p.fT[i], 1e-9);
}

TEST(Solve, NonConvergenceCarriesTrace) {
  auto p = gaussian_problem(Beta::finite(20));
  try {
    solve(p, 1e-12, 2);
    FAIL() << "expected NonConvergence";
  } catch (const NonConvergence& e) {
    EXPECT_EQ(e.trace().size(), 2u);
  }
}

TEST(Solve, TwoDimensionalGaussians) {
  auto g = Lattice::tensor({-4, -4}, {4, 4}, {24, 24});
  auto p = brownian_problem(g, g, DensityModel::gaussian({0.5, 0}, {0.5, 0.5}),
                            DensityModel::gaussian({-0.5, 0.5}, {0.6, 0.4}), 1.0, 1.0, Beta::finite(3));
  auto s = solve(p);
  EXPECT_LT(s.residual0, 1e-9);
  EXPECT_LT(s.residualT, 1e-9);
  EXPECT_NEAR(integral(s.q, g), 1.0, 1e-6);
  auto j = solution_to_json(s);
  EXPECT_EQ(j["rho0"].size(), g.size());
  EXPECT_EQ(problem_to_json(p)["beta"], 3.0);
}
