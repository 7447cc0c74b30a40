// Acceptance checks. One PASS/FAIL line per criterion; exit status 1 on FAIL.
#include <unistd.h>

#include <filesystem>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "ssb/ssb.hpp"

using namespace ssb;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void check(bool ok, const std::string& what) {
    pass = pass && ok;
    if (!ok) detail << "[miss: " << what << "] ";
  }
};

unsigned g_threads = 1;

fs::path scratch(const std::string& name) {
  return fs::temp_directory_path() / ("ssb_acceptance_" + std::to_string(::getpid())) / name;
}

nlohmann::json run_doc(const nlohmann::json& doc, const std::string& name) {
  RunOptions o;
  o.threads = g_threads;
  o.out = scratch(name).string();
  return run_experiment(parse_config(doc), o).report;
}

// Failure counts at n_mc = 200, averaged over seeds 0..4.
void criterion_1(Outcome& r) {
  const DensityModel target = DensityModel::cauchy({0.0}, {1.0});
  for (Beta beta : {Beta::infinite(), Beta::finite(20), Beta::finite(50), Beta::finite(100)}) {
    BridgeSpec spec{1.0, 1.0, {0.0}, {}, target, beta};
    auto drift = detail::drift_for(spec, 200, detail::resolve_proposal("auto", beta, 1, 1.0));
    double total = 0;
    for (std::uint64_t seed = 0; seed < 5; ++seed)
      total += static_cast<double>(
          endpoint_distribution(simulate(spec, drift, TimeGrid(1.0, 200), 1000, seed, g_threads)).n_failed);
    double mean = total / 5;
    r.detail << "beta=" << beta.to_string() << " mean_failures=" << mean << " ";
    if (beta.is_infinite())
      r.check(mean >= 20, "beta=inf needs >= 20");
    else
      r.check(mean <= 3, "beta=" + beta.to_string() + " needs <= 3");
  }
}

// beta = 100 endpoints against the rejection oracle of f*_beta.
void criterion_2(Outcome& r) {
  const DensityModel target = DensityModel::cauchy({0.0}, {1.0});
  const Beta beta = Beta::finite(100);
  BridgeSpec spec{1.0, 1.0, {0.0}, {}, target, beta};
  auto drift = detail::drift_for(spec, 1000, detail::resolve_proposal("auto", beta, 1, 1.0));
  Vec xs;
  std::size_t failed = 0;
  for (std::uint64_t seed = 0; xs.size() < 5000; ++seed) {
    auto er = endpoint_distribution(simulate(spec, drift, TimeGrid(1.0, 200), 5000 - xs.size(), seed, g_threads));
    failed += er.n_failed;
    for (const auto& x : er.samples) xs.push_back(x[0]);
  }
  Rng orng = make_rng(0, detail::kOracleStream, 0);
  GeometricMixture gm{spec.terminal_kernel(), target, beta, std::nullopt};
  auto oracle = rejection_sample_geometric_mixture(gm, DensityModel::student_t({0.0}, {1.0}, 2.0), 20000, orng);
  double ks = ks_two_sample(xs, axis_values(oracle.samples, 0));
  r.detail << "ok_paths=" << xs.size() << " failed=" << failed << " oracle_acceptance=" << oracle.acceptance_rate()
           << " ks=" << ks;
  r.check(ks < 0.05, "ks < 0.05");
}

Vec random_simplex(Rng& rng, std::size_t n) {
  Vec p(n);
  double s = 0;
  for (double& v : p) s += (v = -std::log(rng.uniform()));
  for (double& v : p) v /= s;
  return p;
}

void criterion_3(Outcome& r) {
  Rng rng(2024);
  double worst = 0;
  for (int rep = 0; rep < 100; ++rep) {
    Vec f0 = random_simplex(rng, 10), f1 = random_simplex(rng, 10);
    double beta = std::exp(4 * rng.uniform() - 2);
    auto o = kl_pair_oracle(f0, f1, Beta::finite(beta));
    auto m = minimize_kl_pair(f0, f1, beta);
    worst = std::max(worst, std::abs(m.objective - o.objective));
    worst = std::max(worst, std::abs(o.objective + (1 + beta) * std::log(o.c_beta)));
  }
  r.detail << "worst_gap=" << worst << " ";
  r.check(worst < 1e-6, "objective gap < 1e-6");

  Vec f0 = random_simplex(rng, 10), f1 = random_simplex(rng, 10);
  double prev_gap = kInf, prev_tv = kInf;
  for (double beta : {1e2, 1e4, 1e6}) {
    auto o = kl_pair_oracle(f0, f1, Beta::finite(beta));
    double gap = std::abs(1 - o.c_beta), tv = 0;
    for (std::size_t i = 0; i < f1.size(); ++i) tv += 0.5 * std::abs(o.minimizer[i] - f1[i]);
    r.detail << "beta=" << beta << " |1-C|=" << gap << " tv=" << tv << " ";
    r.check(gap < prev_gap && tv < prev_tv, "monotone at beta=" + format_double(beta));
    prev_gap = gap;
    prev_tv = tv;
  }
}

void criterion_4(Outcome& r) {
  BridgeSpec s{0.8, 2.0, {0.2, -0.1}, {}, DensityModel::gaussian({1.5, -0.5}, {0.6, 2.0}), Beta::finite(3)};
  Rng rng(4);
  int within = 0;
  for (int k = 0; k < 50; ++k) {
    Vec x{rng.normal(), rng.normal()};
    double t = 1.95 * rng.uniform();
    auto e = drift_mc(s, x, t, 10000, rng);
    Vec u = drift_closed_form_gaussian(s, x, t);
    bool ok = e.ok();
    for (int a = 0; a < 2 && ok; ++a) ok = std::abs(e.value[a] - u[a]) < 4 * e.se[a];
    within += ok;
  }
  r.detail << "within_4se=" << within << "/50 ";
  r.check(within >= 47, ">= 47 of 50");

  BridgeSpec h{1.0, 1.0, {0.0}, {}, DensityModel::gaussian({1.5}, {0.3}), Beta::infinite()};
  Vec x{0.2};
  double hard = drift_closed_form_gaussian(h, x, 0.4)[0], prev = kInf;
  for (double beta : {10.0, 1e2, 1e3, 1e4}) {
    h.beta = Beta::finite(beta);
    double gap = std::abs(drift_closed_form_gaussian(h, x, 0.4)[0] - hard);
    r.detail << "gap(" << beta << ")=" << gap << " ";
    r.check(gap < prev, "hard-bridge gap shrinks at beta=" + format_double(beta));
    prev = gap;
  }
}

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

DiscreteProblem gaussian_problem(Beta beta) {
  auto g0 = Lattice::line(-5, 5, 64), gT = Lattice::line(-6, 6, 64);
  return brownian_problem(g0, gT, tabulate(g0, [](double x) { return npdf(x, -0.5, 0.8); }),
                          tabulate(gT, [](double x) { return npdf(x, 1.0, 0.6); }), 1.0, 1.0, beta);
}

double sinkhorn_gap(const DiscreteProblem& p, const SchrodingerSolution& s) {
  const std::size_t J = p.grid0.size(), I = p.gridT.size();
  std::vector<Vec> K(J, Vec(I));
  Vec m(J), n(I), u(J, 1.0), v(I, 1.0);
  for (std::size_t j = 0; j < J; ++j) m[j] = p.grid0.weights[j] * p.f0[j];
  for (std::size_t i = 0; i < I; ++i) n[i] = p.gridT.weights[i] * p.fT[i];
  for (std::size_t j = 0; j < J; ++j)
    for (std::size_t i = 0; i < I; ++i) K[j][i] = p.grid0.weights[j] * std::exp(p.log_p(i, j)) * p.gridT.weights[i];
  for (int it = 0; it < 20000; ++it) {
    for (std::size_t j = 0; j < J; ++j) {
      double q = 0;
      for (std::size_t i = 0; i < I; ++i) q += K[j][i] * v[i];
      u[j] = m[j] / q;
    }
    for (std::size_t i = 0; i < I; ++i) {
      double q = 0;
      for (std::size_t j = 0; j < J; ++j) q += u[j] * K[j][i];
      v[i] = n[i] / q;
    }
  }
  // Couplings are products of the potentials, so the gauge cancels.
  double worst = 0;
  for (std::size_t j = 0; j < J; ++j)
    for (std::size_t i = 0; i < I; ++i) {
      double pi = p.grid0.weights[j] * s.rho0[j] * std::exp(p.log_p(i, j)) * p.gridT.weights[i] * s.rhoT[i];
      worst = std::max(worst, std::abs(u[j] * K[j][i] * v[i] - pi));
    }
  return worst;
}

void criterion_5(Outcome& r) {
  for (Beta beta : {Beta::finite(0.5), Beta::finite(1), Beta::finite(5), Beta::infinite()}) {
    auto p = gaussian_problem(beta);
    auto s = solve(p);
    double mass = integral(s.q, p.gridT);
    r.detail << "beta=" << beta.to_string() << " res=" << std::max(s.residual0, s.residualT)
             << " mass-1=" << mass - 1 << " cost=" << s.cost << " ";
    r.check(s.residual0 < 1e-8 && s.residualT < 1e-8, "residuals at beta=" + beta.to_string());
    r.check(std::abs(mass - 1) < 1e-6, "normalization at beta=" + beta.to_string());
    r.check(s.cost >= -1e-12, "cost >= 0 at beta=" + beta.to_string());
    if (beta.is_infinite()) {
      double gap = sinkhorn_gap(p, s);
      r.detail << "sinkhorn_gap=" << gap << " ";
      r.check(gap < 1e-6, "Sinkhorn agreement");
    }
  }

  Rng rng(5);
  double worst = 0;
  for (Beta beta : {Beta::finite(0.5), Beta::finite(1), Beta::finite(5)}) {
    for (int rep = 0; rep < 100; ++rep) {
      Vec u(64), v(64);
      for (std::size_t i = 0; i < 64; ++i) {
        u[i] = std::exp(2 * rng.normal());
        v[i] = std::exp(2 * rng.normal());
      }
      double d = hilbert_distance(u, v);
      double e = hilbert_distance(power_step(u, beta), power_step(v, beta)) - beta.target_exponent() * d;
      worst = std::max(worst, std::abs(e) / std::max(1.0, d));
    }
  }
  r.detail << "contraction_err=" << worst << " ";
  r.check(worst < 1e-12, "contraction identity");

  auto p = gaussian_problem(Beta::finite(1));
  p.fT = pushforward(p);
  double z = integral(p.fT, p.gridT);
  for (double& v : p.fT) v /= z;
  double c0 = solve(p).cost;
  r.detail << "self_consistent_cost=" << c0;
  r.check(std::abs(c0) < 1e-9, "self-consistent cost 0");
}

// Exact within-cluster std of f*_beta near a reference atom: the product of
// N(., 0.0025) and N(., 0.25) at exponents a and b.
double exact_cluster_sd(double beta) {
  double a = 1 / (1 + beta), b = beta / (1 + beta);
  return std::sqrt(1 / (a / 0.0025 + b / 0.25));
}

void criterion_6(Outcome& r) {
  nlohmann::json doc{{"schema_version", 1},      {"experiment", "normal_mixture"}, {"seed", 0},
                     {"betas", {10, 0}},         {"n_mc", {200}},                  {"n_paths", 1000},
                     {"grid", {{"T", 1}, {"n_steps", 200}}}};
  auto rep = run_doc(doc, "normal_mixture");
  const auto& runs = rep.at("runs");

  const auto& hi = runs.at(0);
  double n = hi.at("n_paths").get<double>() - hi.at("n_failed").get<double>();
  double in = 0;
  for (std::size_t k : {0u, 3u}) {
    const auto& c = hi.at("clusters").at(k);
    in += c.at("count").get<double>();
    for (std::size_t a = 0; a < 2; ++a) {
      double sd = c.at("sd").at(a).is_number() ? c.at("sd").at(a).get<double>() : kNaN;
      r.detail << "sd[" << k << "," << a << "]=" << sd << " ";
      r.check(sd < 0.15, "within-cluster sd < 0.15");
    }
  }
  r.detail << "exact_sd=" << exact_cluster_sd(10) << " share=" << in / n << " ";
  r.check(in / n >= 0.8, ">= 80% in (1,1) and (-1,-1)");

  const auto& lo = runs.at(1);
  n = lo.at("n_paths").get<double>() - lo.at("n_failed").get<double>();
  const double want[4] = {0.1, 0.2, 0.3, 0.4};
  r.detail << "proportions=";
  for (std::size_t k = 0; k < 4; ++k) {
    double p = lo.at("clusters").at(k).at("count").get<double>() / n;
    double se = std::sqrt(want[k] * (1 - want[k]) / n);
    r.detail << p << (k < 3 ? "/" : "");
    r.check(std::abs(p - want[k]) < 3 * se, "beta=0 proportion " + std::to_string(k) + " within 3 SE");
  }
}

void criterion_7(Outcome& r) {
  Rng rng(11);
  double worst = 0;
  for (int cfg = 0; cfg < 50; ++cfg) {
    std::size_t d = 1 + cfg % 2;
    Vec centers;
    for (int c = 0; c < 4; ++c)
      for (std::size_t a = 0; a < d; ++a) centers.push_back(2 * rng.normal());
    auto m = ScoreModel::make(d, {0.2, 0.6}, centers, 0.5 + rng.uniform());
    std::size_t level = cfg % 2;
    for (double& v : m.weights[level]) v = rng.normal();
    std::vector<Vec> xs(30, Vec(d));
    Vec lw(30);
    for (std::size_t i = 0; i < 30; ++i) {
      for (double& v : xs[i]) v = rng.normal();
      lw[i] = 3 * rng.normal();
    }
    Rng draw(cfg);
    auto batch = make_batch(m, level, xs, lw, 2, draw);
    auto lg = weighted_loss(m, batch);
    double num = 0, den = 0;
    for (std::size_t k = 0; k < lg.grad.size(); ++k) {
      const double h = 1e-3 * std::max(1.0, std::abs(m.weights[level][k]));
      auto p = m, q = m;
      p.weights[level][k] += h;
      q.weights[level][k] -= h;
      double fd = (weighted_loss(p, batch).loss - weighted_loss(q, batch).loss) / (2 * h);
      num += (lg.grad[k] - fd) * (lg.grad[k] - fd);
      den += lg.grad[k] * lg.grad[k];
    }
    worst = std::max(worst, std::sqrt(num / den));
  }
  r.detail << "fd_rel_err=" << worst << " ";
  r.check(worst < 1e-5, "gradient vs finite differences");

  nlohmann::json doc{{"schema_version", 1},
                     {"experiment", "score_desk"},
                     {"seed", 0},
                     {"betas", {1}},
                     {"n_paths", 5000},
                     {"grid", {{"T", 1}, {"n_steps", 200}}},
                     {"reference", {{"kind", "gaussian"}, {"mean", {0}}, {"variance", {1}}}},
                     {"objective", {{"kind", "gaussian"}, {"mean", {2}}, {"variance", {1}}}}};
  auto rep = run_doc(doc, "score_desk");
  const auto& sum = rep.at("summary");
  double n = sum.at("n").get<double>(), mean = sum.at("mean").at(0).get<double>();
  double se = std::sqrt(sum.at("covariance").at(0).at(0).get<double>() / n);
  double ks = sum.at("ks").at(0).get<double>();
  r.detail << "trained mean=" << mean << " se=" << se << " ks=" << ks << " ";
  r.check(std::abs(mean - 1) < 3 * se, "trained mean within 3 SE of 1");
  r.check(ks < 0.08, "trained ks < 0.08");

  // Smoothed score of N(1, 1): -(x - 1) / (1 + s^2).
  ScoreFn exact = [](std::span<const double> x, double s) { return Vec{-(x[0] - 1.0) / (1.0 + s * s)}; };
  auto starts = gaussian_starts({1.0}, {2.0}, 10000, 5);
  auto b = reverse_bridge_sample(exact, 1.0, TimeGrid(1.0, 200), starts, 6, g_threads);
  auto e = endpoint_distribution(b);
  double kx = ks_statistic(axis_values(e.samples, 0), [](double x) { return normal_cdf(x, 1.0, 1.0); });
  r.detail << "exact_score ks=" << kx;
  r.check(e.n_failed == 0 && kx < 0.02, "exact-score ks < 0.02");
}

// Checkpoint law f^b p^a for a Gaussian f and the Brownian joint from 0.
struct Gauss2 {
  double m[2];
  double c[2][2];
};

Gauss2 series_oracle(const TimeSeriesSpec& s, const double mf[2], const double cf[2][2]) {
  double b = s.beta.target_exponent(), a = s.beta.base_exponent();
  double t1 = s.checkpoints[0], t2 = s.checkpoints[1];
  double det = t1 * t2 - t1 * t1;
  double P[2][2] = {{t2 / det, -t1 / det}, {-t1 / det, t1 / det}};
  double df = cf[0][0] * cf[1][1] - cf[0][1] * cf[1][0];
  double F[2][2] = {{cf[1][1] / df, -cf[0][1] / df}, {-cf[1][0] / df, cf[0][0] / df}};
  double L[2][2], h[2];
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) L[i][j] = a * P[i][j] + b * F[i][j];
    h[i] = b * (F[i][0] * mf[0] + F[i][1] * mf[1]);
  }
  double dl = L[0][0] * L[1][1] - L[0][1] * L[1][0];
  Gauss2 g;
  g.c[0][0] = L[1][1] / dl;
  g.c[1][1] = L[0][0] / dl;
  g.c[0][1] = g.c[1][0] = -L[0][1] / dl;
  g.m[0] = g.c[0][0] * h[0] + g.c[0][1] * h[1];
  g.m[1] = g.c[1][0] * h[0] + g.c[1][1] * h[1];
  return g;
}

void criterion_8(Outcome& r) {
  TimeSeriesSpec one;
  one.checkpoints = {1.0};
  one.joint = DensityModel::cauchy({0.0}, {1.0});
  one.beta = Beta::finite(20);
  TimeGrid g(1.0, 100);
  auto csv = [](const TrajectoryBatch& b) {
    std::ostringstream os;
    write_endpoints_csv(endpoint_distribution(b), 1, os);
    return os.str();
  };
  bool same_plain = csv(simulate_time_series(one, 100, g, 200, 3, g_threads).batch) ==
                    csv(simulate(one.single(), make_drift(one.single(), DriftMethod::mc_plain, 100), g, 200, 3, 1));
  auto w = DensityModel::gaussian({0.0}, {21.0});
  bool same_imp =
      csv(simulate_time_series(one, 100, g, 200, 4, g_threads, w).batch) ==
      csv(simulate(one.single(), make_drift(one.single(), DriftMethod::mc_importance, 100, w), g, 200, 4, 1));
  r.detail << "n1_plain=" << (same_plain ? "identical" : "differs")
           << " n1_importance=" << (same_imp ? "identical" : "differs") << " ";
  r.check(same_plain && same_imp, "N=1 byte-identical");

  TimeSeriesSpec two;
  two.checkpoints = {0.5, 1.0};
  two.joint = DensityModel::product_transition(1, {0.0}, {0.8, -1.0}, {0.2, 0.3});
  two.beta = Beta::finite(4);
  // X1 ~ N(0.8, 0.2), X2 | X1 ~ N(X1 - 1, 0.3).
  const double mf[2] = {0.8, -0.2};
  const double cf[2][2] = {{0.2, 0.2}, {0.2, 0.5}};
  auto o = series_oracle(two, mf, cf);
  auto run = simulate_time_series(two, 100, TimeGrid(1.0, 100), 5000, 8, g_threads);
  auto pts = checkpoint_samples(run);
  r.detail << "ok=" << pts.size() << " ";
  for (int k = 0; k < 2; ++k) {
    double m = o.m[k], sd = std::sqrt(o.c[k][k]);
    double ks = ks_statistic(axis_values(pts, k), [&](double z) { return normal_cdf(z, m, sd); });
    r.detail << "ks[" << k << "]=" << ks << " ";
    r.check(ks < 0.05, "checkpoint " + std::to_string(k) + " ks < 0.05");
  }

  TimeSeriesSpec tw;
  tw.checkpoints = {0.5, 1.0};
  tw.joint = DensityModel::gaussian({1.0, -0.5}, {0.3, 0.5});
  tw.beta = Beta::finite(2);
  Vec x{-0.2};
  double t = 0.1;
  Rng rng(11);
  auto direct = h_j_mc(tw, 0, x, t, {}, 100000, rng);
  const int M = 4000;
  double acc = 0, acc2 = 0;
  for (int i = 0; i < M; ++i) {
    Vec x1{x[0] + std::sqrt(0.5 - t) * rng.normal()};
    double h1 = h_j_mc(tw, 1, x1, 0.5, x1, 50, rng).value;
    acc += h1;
    acc2 += h1 * h1;
  }
  double mean = acc / M;
  double se = std::hypot(std::sqrt((acc2 / M - mean * mean) / (M - 1)), direct.se);
  r.detail << "tower |diff|/se=" << std::abs(mean - direct.value) / se;
  r.check(std::abs(mean - direct.value) < 4 * se, "tower property within 4 SE");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::vector<int> which;
  g_threads = default_threads();
  app.add_option("--criterion", which, "criteria to run (default: all)")->check(CLI::Range(1, 8));
  app.add_option("--threads", g_threads, "worker threads")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);
  if (which.empty()) which = {1, 2, 3, 4, 5, 6, 7, 8};

  using Fn = void (*)(Outcome&);
  const Fn fns[] = {criterion_1, criterion_2, criterion_3, criterion_4,
                    criterion_5, criterion_6, criterion_7, criterion_8};
  bool all = true;
  for (int c : which) {
    Outcome r;
    try {
      fns[c - 1](r);
    } catch (const std::exception& e) {
      r.pass = false;
      r.detail << "error: " << e.what();
    }
    std::cout << "criterion " << c << ": " << (r.pass ? "PASS" : "FAIL") << ' ' << r.detail.str() << std::endl;
    all = all && r.pass;
  }
  std::error_code ec;
  fs::remove_all(scratch(""), ec);
  return all ? 0 : 1;
}
