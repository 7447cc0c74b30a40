#include <gtest/gtest.h>

#include <sstream>

#include "ssb/diagnostics.hpp"

using namespace ssb;

namespace {

Vec random_simplex(Rng& rng, std::size_t n) {
  Vec p(n);
  double s = 0;
  for (double& v : p) s += (v = -std::log(rng.uniform()));
  for (double& v : p) v /= s;
  return p;
}

double tv(const Vec& p, const Vec& q) {
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return 0.5 * s;
}

}  // namespace

TEST(KlDiscrete, Examples) {
  Vec p{0.5, 0.5}, q{0.25, 0.75};
  EXPECT_EQ(kl_discrete(p, p), 0.0);
  EXPECT_NEAR(kl_discrete(p, q), 0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0), 1e-15);
  EXPECT_NEAR(kl_discrete(p, q), 0.1438, 1e-4);
  EXPECT_EQ(kl_discrete(Vec{0.5, 0.5}, Vec{1.0, 0.0}), kInf);
  EXPECT_THROW(kl_discrete(Vec{0.5, 0.6}, Vec{0.5, 0.5}), InputError);
}

TEST(KlDiscrete, JointConvexity) {
  Rng rng(4);
  for (int rep = 0; rep < 200; ++rep) {
    Vec p1 = random_simplex(rng, 6), p2 = random_simplex(rng, 6), q1 = random_simplex(rng, 6),
        q2 = random_simplex(rng, 6);
    double l = rng.uniform();
    Vec pm(6), qm(6);
    for (int i = 0; i < 6; ++i) {
      pm[i] = l * p1[i] + (1 - l) * p2[i];
      qm[i] = l * q1[i] + (1 - l) * q2[i];
    }
    EXPECT_LE(kl_discrete(pm, qm), l * kl_discrete(p1, q1) + (1 - l) * kl_discrete(p2, q2) + 1e-14);
  }
}

TEST(KlPair, TrivialCases) {
  Rng rng(1);
  Vec f = random_simplex(rng, 10);
  auto r = kl_pair_oracle(f, f, Beta::finite(3));
  EXPECT_NEAR(r.c_beta, 1.0, 1e-14);
  for (int i = 0; i < 10; ++i) EXPECT_NEAR(r.minimizer[i], f[i], 1e-14);
  Vec g = random_simplex(rng, 10);
  auto z = kl_pair_oracle(f, g, Beta::finite(0));
  for (int i = 0; i < 10; ++i) EXPECT_NEAR(z.minimizer[i], f[i], 1e-14);
  Vec f0{0.5, 0.5, 0.0}, f1{0.2, 0.3, 0.5};
  EXPECT_THROW(kl_pair_oracle(f0, f1, Beta::finite(1)), InputError);
}

TEST(KlPair, ClosedFormMatchesProjectedGradient) {
  Rng rng(2026);
  for (int rep = 0; rep < 100; ++rep) {
    Vec f0 = random_simplex(rng, 10), f1 = random_simplex(rng, 10);
    double beta = std::exp(4 * rng.uniform() - 2);
    auto r = kl_pair_oracle(f0, f1, Beta::finite(beta));
    auto m = minimize_kl_pair(f0, f1, beta);
    EXPECT_LT(std::abs(m.objective - r.objective), 1e-6) << rep;
    // The minimum value is -(1+beta) log C.
    EXPECT_NEAR(r.objective, -(1 + beta) * std::log(r.c_beta), 1e-12);
  }
}

TEST(KlPair, LargeBetaLimitIsMonotone) {
  Rng rng(7);
  Vec f0 = random_simplex(rng, 10), f1 = random_simplex(rng, 10);
  double prev_c = 0, prev_tv = kInf;
  for (double beta : {1e2, 1e4, 1e6}) {
    auto r = kl_pair_oracle(f0, f1, Beta::finite(beta));
    double gap = std::abs(1 - r.c_beta), d = tv(r.minimizer, f1);
    EXPECT_LT(gap, std::abs(1 - prev_c));
    EXPECT_LT(d, prev_tv);
    prev_c = r.c_beta;
    prev_tv = d;
  }
  EXPECT_LT(std::abs(1 - prev_c), 1e-4);
  EXPECT_LT(prev_tv, 1e-4);
}

TEST(Ks, Examples) {
  Rng rng(3);
  Vec x(10000);
  for (double& v : x) v = rng.normal();
  EXPECT_LT(ks_statistic(x, [](double z) { return normal_cdf(z); }), 0.02);
  EXPECT_EQ(ks_two_sample(x, x), 0.0);
  Vec y(1000);
  for (double& v : y) v = rng.normal();
  EXPECT_GT(ks_statistic(y, [](double z) { return normal_cdf(z, 3.0, 1.0); }), 0.8);
  EXPECT_THROW(ks_statistic(Vec(5, 0.0), [](double z) { return normal_cdf(z); }), InputError);
  EXPECT_THROW(ks_two_sample(Vec{}, x), InputError);
}

TEST(Summary, MomentsQuantilesAndExports) {
  Rng rng(5);
  std::vector<Vec> xs(20000);
  for (auto& v : xs) v = {1 + 2 * rng.normal(), -1 + 0.5 * rng.normal()};
  auto s = summarize(xs);
  EXPECT_EQ(s.n, 20000u);
  EXPECT_NEAR(s.mean[0], 1.0, 0.05);
  EXPECT_NEAR(s.cov[1][1], 0.25, 0.01);
  EXPECT_NEAR(s.cov[0][1], 0.0, 0.03);
  EXPECT_NEAR(s.quantiles[0][3], 1.0, 0.05);
  auto j = s.to_json();
  EXPECT_EQ(j["n"], 20000);
  std::ostringstream os;
  write_qq_csv(axis_values(xs, 0), axis_values(xs, 0), 9, os);
  std::string text = os.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 10);
}

TEST(Rejection, EnvelopeEqualToTarget) {
  auto g = DensityModel::gaussian({0.5}, {2.0});
  GeometricMixture gm{g, g, Beta::finite(1), std::nullopt};
  Rng rng(9);
  auto r = rejection_sample_geometric_mixture(gm, g, 20000, rng);
  EXPECT_GT(r.acceptance_rate(), 0.9);
  Vec v = axis_values(r.samples, 0);
  EXPECT_LT(ks_statistic(v, [](double z) { return normal_cdf(z, 0.5, std::sqrt(2.0)); }), 0.02);
  Rng r2(10);
  EXPECT_THROW(rejection_sample_geometric_mixture(gm, g, 100, r2, 0.5), InputError);
}

TEST(Rejection, CauchyGaussianMixture) {
  GeometricMixture gm{DensityModel::gaussian({0.0}, {1.0}), DensityModel::cauchy({0.0}, {1.0}), Beta::finite(100),
                      std::nullopt};
  Rng rng(11);
  auto r = rejection_sample_geometric_mixture(gm, DensityModel::student_t({0.0}, {1.0}, 2.0), 5000, rng);
  EXPECT_EQ(r.samples.size(), 5000u);
  EXPECT_GT(r.acceptance_rate(), 0.2);
}

TEST(Rejection, NormalMixtureProportions) {
  std::vector<kinds::Gaussian> comps{{{1, 1}, {0.0025, 0.0025}},
                                     {{-1, 1}, {0.0025, 0.0025}},
                                     {{1, -1}, {0.0025, 0.0025}},
                                     {{-1, -1}, {0.0025, 0.0025}}};
  auto ref = DensityModel::gaussian_mixture({0.1, 0.2, 0.3, 0.4}, comps);
  GeometricMixture gm{ref, ref, Beta::finite(0), std::nullopt};
  auto env = DensityModel::gaussian_mixture({0.25, 0.25, 0.25, 0.25},
                                            {{{1, 1}, {0.01, 0.01}},
                                             {{-1, 1}, {0.01, 0.01}},
                                             {{1, -1}, {0.01, 0.01}},
                                             {{-1, -1}, {0.01, 0.01}}});
  Rng rng(12);
  auto r = rejection_sample_geometric_mixture(gm, env, 4000, rng);
  Vec counts(4, 0.0);
  for (const auto& x : r.samples) counts[(x[0] > 0 ? 0 : 1) + (x[1] > 0 ? 0 : 2)] += 1;
  Vec want{0.1, 0.2, 0.3, 0.4};
  for (int k = 0; k < 4; ++k) {
    double p = counts[k] / 4000;
    EXPECT_LT(std::abs(p - want[k]), 3 * std::sqrt(want[k] * (1 - want[k]) / 4000));
  }
}

TEST(CouplingOracle, ZeroBetaKeepsReference) {
  Rng rng(13);
  std::vector<Vec> R(4, Vec(5));
  Vec rows = random_simplex(rng, 4);
  for (int j = 0; j < 4; ++j) {
    Vec r = random_simplex(rng, 5);
    for (int i = 0; i < 5; ++i) R[j][i] = rows[j] * r[i];
  }
  auto o = coupling_oracle(R, random_simplex(rng, 5), 0.0);
  EXPECT_NEAR(o.objective, 0.0, 1e-12);
  for (int j = 0; j < 4; ++j)
    for (int i = 0; i < 5; ++i) EXPECT_NEAR(o.coupling[j][i], R[j][i], 1e-12);
}
