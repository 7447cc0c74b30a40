#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string_view>

#include "config.hpp"
#include "density_json.hpp"
#include "diagnostics.hpp"
#include "schrodinger.hpp"
#include "score.hpp"
#include "time_series.hpp"

namespace ssb {

inline constexpr const char* kVersion = "0.1.0";

enum class ExperimentKind { cauchy, normal_mixture, system_solve, score_desk, time_series };

inline const char* experiment_name(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::cauchy: return "cauchy";
    case ExperimentKind::normal_mixture: return "normal_mixture";
    case ExperimentKind::system_solve: return "system_solve";
    case ExperimentKind::score_desk: return "score_desk";
    case ExperimentKind::time_series: return "time_series";
  }
  return "?";
}

inline ExperimentKind parse_experiment(const std::string& s) {
  for (auto k : {ExperimentKind::cauchy, ExperimentKind::normal_mixture, ExperimentKind::system_solve,
                 ExperimentKind::score_desk, ExperimentKind::time_series})
    if (s == experiment_name(k)) return k;
  throw ConfigError("unknown experiment '" + s + "'");
}

// 64-bit FNV-1a as 16 hex digits.
inline std::string fnv1a64(std::string_view data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::cauchy;
  std::uint64_t seed = 0;
  std::vector<Beta> betas;
  std::vector<std::size_t> n_mc;
  std::size_t n_paths = 1000;
  double T = 1.0;
  std::size_t n_steps = 200;
  double sigma = 1.0;
  std::string proposal = "auto";
  std::string out;
  std::size_t oracle_samples = 5000;
  Vec snapshot_times;
  DensityModel reference, objective;

  struct System {
    std::optional<DensityModel> initial;
    Vec x0{0.0};
    DensityModel terminal;
    double lo = -6.0, hi = 6.0;
    std::size_t n_grid = 64;
    double tol = 1e-12;
    std::size_t max_iter = 10000;
  } system;

  struct Score {
    AuxChoice aux = AuxChoice::reference;
    std::size_t n_samples = 100000;
    double level_lo = 0.0, level_hi = 0.0;  // 0: derived from sigma sqrt(T)
    std::size_t n_levels = 10;
    std::size_t iterations = 2000;
    std::size_t noise_draws = 1;
    std::size_t langevin_steps = 1000;
    double langevin_step = 0.01;
  } score;

  struct Series {
    Vec checkpoints{0.5, 1.0};
    DensityModel joint;
    Vec x0{0.0};
  } series;

  nlohmann::json source;  // the validated document
};

namespace detail {

inline DensityModel default_reference_mixture() {
  const Vec v{0.0025, 0.0025};
  return DensityModel::gaussian_mixture({0.1, 0.2, 0.3, 0.4},
                                        {{{1, 1}, v}, {{-1, 1}, v}, {{1, -1}, v}, {{-1, -1}, v}});
}

inline DensityModel default_objective_mixture() {
  return DensityModel::gaussian_mixture({0.5, 0.5}, {{{1.2, 0.8}, {0.25, 0.25}}, {{-1.5, -0.5}, {0.25, 0.25}}});
}

template <class T>
T get_or(const nlohmann::json& j, const char* key, T fallback) {
  return j.contains(key) ? j.at(key).get<T>() : fallback;
}

inline DensityModel density_or(const nlohmann::json& j, const char* key, DensityModel fallback) {
  return j.contains(key) ? density_from_json(j.at(key)) : std::move(fallback);
}

}  // namespace detail

// Schema validation, then defaults per experiment kind. Every failure is a ConfigError.
inline ExperimentConfig parse_config(const nlohmann::json& doc) {
  validate_config(doc);
  ExperimentConfig c;
  c.source = doc;
  try {
    c.kind = parse_experiment(doc.at("experiment").get<std::string>());
    c.seed = detail::get_or<std::uint64_t>(doc, "seed", 0);
    c.sigma = detail::get_or(doc, "sigma", 1.0);
    c.proposal = detail::get_or<std::string>(doc, "proposal", "auto");
    c.oracle_samples = detail::get_or<std::size_t>(doc, "oracle_samples", 5000);
    c.out = detail::get_or<std::string>(doc, "out", std::string("results/") + experiment_name(c.kind));
    if (doc.contains("grid")) {
      c.T = detail::get_or(doc["grid"], "T", 1.0);
      c.n_steps = detail::get_or<std::size_t>(doc["grid"], "n_steps", 200);
    }

    std::vector<Beta> betas;
    std::vector<std::size_t> n_mc{200};
    switch (c.kind) {
      case ExperimentKind::cauchy:
        betas = {Beta::infinite(), Beta::finite(20), Beta::finite(50), Beta::finite(100)};
        n_mc = {20, 200, 1000};
        c.objective = detail::density_or(doc, "objective", DensityModel::cauchy({0.0}, {1.0}));
        break;
      case ExperimentKind::normal_mixture:
        betas = {Beta::finite(0), Beta::finite(2), Beta::finite(10), Beta::infinite()};
        c.reference = detail::density_or(doc, "reference", detail::default_reference_mixture());
        c.objective = detail::density_or(doc, "objective", detail::default_objective_mixture());
        c.snapshot_times = detail::get_or(doc, "snapshot_times", Vec{0.25, 0.5, 0.75, 1.0});
        break;
      case ExperimentKind::system_solve: {
        betas = {Beta::finite(0.5), Beta::finite(1), Beta::finite(5), Beta::infinite()};
        const auto sj = doc.value("system", nlohmann::json::object());
        if (sj.contains("initial")) c.system.initial = density_from_json(sj["initial"]);
        c.system.x0 = detail::get_or(sj, "x0", Vec{0.0});
        c.system.terminal = detail::density_or(sj, "terminal", DensityModel::gaussian({1.0}, {0.5}));
        c.system.lo = detail::get_or(sj, "lo", -6.0);
        c.system.hi = detail::get_or(sj, "hi", 6.0);
        c.system.n_grid = detail::get_or<std::size_t>(sj, "n_grid", 64);
        c.system.tol = detail::get_or(sj, "tol", 1e-12);
        c.system.max_iter = detail::get_or<std::size_t>(sj, "max_iter", 10000);
        if (!(c.system.hi > c.system.lo)) throw ConfigError("config: system.hi must exceed system.lo");
        break;
      }
      case ExperimentKind::score_desk: {
        betas = {Beta::finite(1)};
        c.n_paths = 5000;
        c.reference = detail::density_or(doc, "reference", DensityModel::gaussian({0.0}, {1.0}));
        c.objective = detail::density_or(doc, "objective", DensityModel::gaussian({2.0}, {1.0}));
        const auto sj = doc.value("score", nlohmann::json::object());
        c.score.aux = parse_aux_choice(detail::get_or<std::string>(sj, "aux", "reference"));
        c.score.n_samples = detail::get_or<std::size_t>(sj, "n_samples", 100000);
        c.score.iterations = detail::get_or<std::size_t>(sj, "iterations", 2000);
        c.score.noise_draws = detail::get_or<std::size_t>(sj, "noise_draws", 1);
        c.score.langevin_steps = detail::get_or<std::size_t>(sj, "langevin_steps", 1000);
        c.score.langevin_step = detail::get_or(sj, "langevin_step", 0.01);
        if (sj.contains("levels")) {
          c.score.level_lo = detail::get_or(sj["levels"], "lo", 0.0);
          c.score.level_hi = detail::get_or(sj["levels"], "hi", 0.0);
          c.score.n_levels = detail::get_or<std::size_t>(sj["levels"], "n", 10);
        }
        break;
      }
      case ExperimentKind::time_series: {
        betas = {Beta::finite(4)};
        n_mc = {100};
        c.n_steps = 100;
        if (doc.contains("grid")) c.n_steps = detail::get_or<std::size_t>(doc["grid"], "n_steps", 100);
        const auto tj = doc.value("time_series", nlohmann::json::object());
        c.series.checkpoints = detail::get_or(tj, "checkpoints", Vec{0.5, 1.0});
        c.series.x0 = detail::get_or(tj, "x0", Vec{0.0});
        c.series.joint = detail::density_or(tj, "joint",
                                            DensityModel::product_transition(1, {0.0}, {0.8, -1.0}, {0.2, 0.3}));
        c.T = c.series.checkpoints.back();
        if (doc.contains("grid") && doc["grid"].contains("T") && doc["grid"]["T"].get<double>() != c.T)
          throw ConfigError("config: grid.T must equal the last checkpoint");
        break;
      }
    }
    if (doc.contains("betas")) {
      betas.clear();
      for (const auto& b : doc["betas"]) betas.push_back(beta_from_json(b));
    }
    if (doc.contains("n_mc")) n_mc = doc["n_mc"].get<std::vector<std::size_t>>();
    c.betas = std::move(betas);
    c.n_mc = std::move(n_mc);
    c.n_paths = detail::get_or<std::size_t>(doc, "n_paths", c.n_paths);
  } catch (const ConfigError&) {
    throw;
  } catch (const InputError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config: " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(doc);
}

// Output directory that records every file it writes. finish() adds the
// manifest; files listed by a previous manifest are removed up front.
class OutputDir {
 public:
  explicit OutputDir(std::filesystem::path root) : root_(std::move(root)) {
    std::filesystem::create_directories(root_);
    auto old = root_ / "manifest.json";
    if (std::filesystem::exists(old)) {
      std::ifstream is(old);
      auto j = nlohmann::json::parse(is, nullptr, false);
      if (j.is_object() && j.contains("files"))
        for (const auto& f : j["files"]) std::filesystem::remove(root_ / f.value("name", std::string("manifest.json")));
      std::filesystem::remove(old);
    }
  }

  const std::filesystem::path& root() const { return root_; }

  void write(const std::string& name, const std::string& content) {
    std::ofstream os(root_ / name, std::ios::binary);
    os << content;
    if (!os) throw std::runtime_error("cannot write " + (root_ / name).string());
    files_.push_back({{"name", name}, {"bytes", content.size()}, {"fnv1a64", fnv1a64(content)}});
  }

  template <class Fn>
  void write_with(const std::string& name, Fn&& fn) {
    std::ostringstream os;
    fn(os);
    write(name, os.str());
  }

  void write_json(const std::string& name, const nlohmann::json& j) { write(name, j.dump(2) + "\n"); }

  const nlohmann::json& files() const { return files_; }

  void finish(nlohmann::json manifest) {
    manifest["files"] = files_;
    std::ofstream os(root_ / "manifest.json");
    os << manifest.dump(2) << "\n";
  }

 private:
  std::filesystem::path root_;
  nlohmann::json files_ = nlohmann::json::array();
};

struct RunOptions {
  std::optional<std::uint64_t> seed;
  unsigned threads = 1;
  bool paper_scale = false;
  std::optional<std::string> out;
};

namespace detail {

inline constexpr std::uint64_t kOracleStream = 0x6f7261636c65ULL;
inline constexpr std::uint64_t kDataStream = 0x64617461ULL;

inline std::string beta_tag(Beta b) { return "beta" + b.to_string(); }

inline std::optional<DensityModel> resolve_proposal(const std::string& choice, Beta beta, std::size_t d, double sigma) {
  if (choice == "none") return std::nullopt;
  bool t2 = choice == "student_t2" || (choice == "auto" && beta.is_infinite());
  if (t2) return DensityModel::student_t(Vec(d, 0.0), Vec(d, sigma), 2.0);
  if (beta.is_infinite()) throw ConfigError("config: the normal_wide proposal needs a finite beta");
  return DensityModel::gaussian(Vec(d, 0.0), Vec(d, (1.0 + beta.value()) * sigma * sigma));
}

inline DriftField drift_for(const BridgeSpec& s, std::size_t n_mc, const std::optional<DensityModel>& w) {
  return w ? make_drift(s, DriftMethod::mc_importance, n_mc, *w) : make_drift(s, DriftMethod::mc_plain, n_mc);
}

inline nlohmann::json json_number(double v) {
  if (std::isfinite(v)) return v;
  return format_double(v);
}

}  // namespace detail

// Failure-count table over (beta, n_mc), endpoint samples and KS against the
// rejection oracle of f*_beta (finite beta) or the target CDF (beta = inf).
inline nlohmann::json run_cauchy(const ExperimentConfig& c, OutputDir& out, unsigned threads) {
  const DensityModel& target = c.objective;
  if (target.dimension() != 1) throw ConfigError("config: the cauchy experiment is one-dimensional");
  TimeGrid grid(c.T, c.n_steps);
  std::ostringstream table, ks;
  table << "beta";
  for (auto n : c.n_mc) table << ",n_mc_" << n;
  table << '\n';
  ks << "beta,n_mc,n_paths,n_failed,ks,reference\n";
  nlohmann::json cells = nlohmann::json::array();
  for (std::size_t bi = 0; bi < c.betas.size(); ++bi) {
    const Beta beta = c.betas[bi];
    BridgeSpec spec{c.sigma, c.T, {0.0}, {}, target, beta};
    spec.validate();
    Rng orng = make_rng(c.seed, detail::kOracleStream, bi);
    Vec reference;
    if (beta.is_infinite()) {
      for (std::size_t i = 0; i < c.oracle_samples; ++i) reference.push_back(target.sample(orng)[0]);
    } else {
      GeometricMixture gm{spec.terminal_kernel(), target, beta, std::nullopt};
      auto rs = rejection_sample_geometric_mixture(gm, DensityModel::student_t({0.0}, {c.sigma}, 2.0),
                                                   c.oracle_samples, orng);
      reference = axis_values(rs.samples, 0);
    }
    auto w = detail::resolve_proposal(c.proposal, beta, 1, c.sigma);
    table << beta.to_string();
    for (auto n : c.n_mc) {
      auto batch = simulate(spec, detail::drift_for(spec, n, w), grid, c.n_paths, c.seed, threads);
      auto er = endpoint_distribution(batch);
      std::string tag = detail::beta_tag(beta) + "_nmc" + std::to_string(n);
      out.write_with("endpoints_" + tag + ".csv", [&](std::ostream& os) { write_endpoints_csv(er, 1, os); });
      Vec xs = axis_values(er.samples, 0);
      double d = kNaN;
      if (xs.size() >= 20)
        d = beta.is_infinite() ? ks_statistic(xs, [&](double x) { return target.cdf(x); })
                               : ks_two_sample(xs, reference);
      if (!xs.empty())
        out.write_with("qq_" + tag + ".csv", [&](std::ostream& os) { write_qq_csv(xs, reference, 99, os); });
      const char* ref_name = beta.is_infinite() ? "target_cdf" : "rejection_oracle";
      table << ',' << er.n_failed;
      ks << beta.to_string() << ',' << n << ',' << c.n_paths << ',' << er.n_failed << ',' << format_double(d) << ','
         << ref_name << '\n';
      nlohmann::json steps = nlohmann::json::object();
      for (auto [k, v] : er.failure_steps) steps[std::to_string(k)] = v;
      cells.push_back({{"beta", beta_to_json(beta)},
                       {"n_mc", n},
                       {"n_paths", c.n_paths},
                       {"n_failed", er.n_failed},
                       {"failure_steps", steps},
                       {"ks", detail::json_number(d)},
                       {"ks_reference", ref_name},
                       {"proposal", w ? density_to_json(*w) : nlohmann::json(nullptr)}});
    }
    table << '\n';
  }
  out.write("failures.csv", table.str());
  out.write("ks.csv", ks.str());
  return {{"cells", cells}};
}

struct ClusterStats {
  Vec center;
  std::size_t count = 0;
  Vec mean, sd;
};

// Assignment by nearest center; per-axis sample std within each cluster.
inline std::vector<ClusterStats> cluster_report(const std::vector<Vec>& xs, const std::vector<Vec>& centers) {
  std::vector<ClusterStats> out(centers.size());
  std::vector<std::vector<const Vec*>> members(centers.size());
  for (const auto& x : xs) {
    std::size_t best = 0;
    double bd = kInf;
    for (std::size_t k = 0; k < centers.size(); ++k) {
      double d2 = 0;
      for (std::size_t a = 0; a < x.size(); ++a) d2 += (x[a] - centers[k][a]) * (x[a] - centers[k][a]);
      if (d2 < bd) {
        bd = d2;
        best = k;
      }
    }
    members[best].push_back(&x);
  }
  for (std::size_t k = 0; k < centers.size(); ++k) {
    auto& s = out[k];
    const std::size_t d = centers[k].size();
    s.center = centers[k];
    s.count = members[k].size();
    s.mean.assign(d, kNaN);
    s.sd.assign(d, kNaN);
    if (s.count == 0) continue;
    std::fill(s.mean.begin(), s.mean.end(), 0.0);
    for (const Vec* x : members[k])
      for (std::size_t a = 0; a < d; ++a) s.mean[a] += (*x)[a] / static_cast<double>(s.count);
    if (s.count < 2) continue;
    for (std::size_t a = 0; a < d; ++a) {
      double ss = 0;
      for (const Vec* x : members[k]) ss += ((*x)[a] - s.mean[a]) * ((*x)[a] - s.mean[a]);
      s.sd[a] = std::sqrt(ss / static_cast<double>(s.count - 1));
    }
  }
  return out;
}

inline std::vector<Vec> mixture_means(const DensityModel& m) {
  std::vector<Vec> out;
  if (m.kind() == DensityKind::gaussian_mixture)
    for (const auto& g : m.as<kinds::GaussianMixture>().components) out.push_back(g.mean);
  else if (m.kind() == DensityKind::gaussian)
    out.push_back(m.as<kinds::Gaussian>().mean);
  return out;
}

// Hard bridge from the origin to f*_beta for each beta; snapshots and a
// cluster report against the reference component means.
inline nlohmann::json run_normal_mixture(const ExperimentConfig& c, OutputDir& out, unsigned threads) {
  if (c.proposal != "auto" && c.proposal != "none")
    throw ConfigError("config: the normal_mixture experiment uses plain Monte Carlo drift");
  const std::size_t d = c.reference.dimension();
  require_dim(c.objective.dimension(), d, "normal_mixture objective");
  TimeGrid grid(c.T, c.n_steps);
  std::vector<std::size_t> snaps;
  for (double t : c.snapshot_times) snaps.push_back(grid.snap(t));
  const auto centers = mixture_means(c.reference);
  nlohmann::json runs = nlohmann::json::array();
  for (Beta beta : c.betas) {
    DensityModel target = DensityModel::from_geometric_mixture({c.reference, c.objective, beta, std::nullopt});
    BridgeSpec spec{c.sigma, c.T, Vec(d, 0.0), {}, target, Beta::infinite()};
    auto batch = simulate(spec, make_drift(spec, DriftMethod::mc_plain, c.n_mc.front()), grid, c.n_paths, c.seed,
                          threads);
    auto er = endpoint_distribution(batch);
    const std::string tag = detail::beta_tag(beta);
    out.write_with("endpoints_" + tag + ".csv", [&](std::ostream& os) { write_endpoints_csv(er, d, os); });
    out.write_with("snapshots_" + tag + ".csv", [&](std::ostream& os) {
      os << "path_id,step,t";
      for (std::size_t a = 0; a < d; ++a) os << ",x_" << a + 1;
      os << '\n';
      for (std::size_t p = 0; p < batch.n_paths; ++p)
        for (std::size_t k : snaps) {
          if (!batch.status[p].ok() && static_cast<long>(k) > batch.status[p].fail_step) continue;
          os << p << ',' << k << ',' << format_double(grid.t(k));
          for (double v : batch.state(p, k)) os << ',' << format_double(v);
          os << '\n';
        }
    });
    nlohmann::json clusters = nlohmann::json::array();
    if (!centers.empty()) {
      auto cr = cluster_report(er.samples, centers);
      const double n = static_cast<double>(er.samples.size());
      out.write_with("clusters_" + tag + ".csv", [&](std::ostream& os) {
        os << "cluster";
        for (std::size_t a = 0; a < d; ++a) os << ",center_" << a + 1;
        os << ",count,proportion";
        for (std::size_t a = 0; a < d; ++a) os << ",mean_" << a + 1;
        for (std::size_t a = 0; a < d; ++a) os << ",sd_" << a + 1;
        os << '\n';
        for (std::size_t k = 0; k < cr.size(); ++k) {
          os << k;
          for (double v : cr[k].center) os << ',' << format_double(v);
          os << ',' << cr[k].count << ',' << format_double(n > 0 ? cr[k].count / n : kNaN);
          for (double v : cr[k].mean) os << ',' << format_double(v);
          for (double v : cr[k].sd) os << ',' << format_double(v);
          os << '\n';
        }
      });
      for (const auto& s : cr) {
        nlohmann::json mean = nlohmann::json::array(), sd = nlohmann::json::array();
        for (double v : s.mean) mean.push_back(detail::json_number(v));
        for (double v : s.sd) sd.push_back(detail::json_number(v));
        clusters.push_back({{"center", s.center}, {"count", s.count}, {"mean", mean}, {"sd", sd}});
      }
    }
    runs.push_back({{"beta", beta_to_json(beta)},
                    {"n_paths", c.n_paths},
                    {"n_failed", er.n_failed},
                    {"clusters", clusters},
                    {"summary", er.samples.empty() ? nlohmann::json(nullptr) : summarize(er.samples).to_json()}});
  }
  return {{"runs", runs}};
}

// Discretized Schrodinger system for each beta on a tensor grid over [lo, hi]^d.
inline nlohmann::json run_system_solve(const ExperimentConfig& c, OutputDir& out, unsigned) {
  const auto& s = c.system;
  const std::size_t d = s.terminal.dimension();
  Lattice gridT = Lattice::tensor(Vec(d, s.lo), Vec(d, s.hi), std::vector<std::size_t>(d, s.n_grid));
  Lattice grid0 = gridT;
  Vec f0{1.0};
  if (s.initial) {
    require_dim(s.initial->dimension(), d, "system initial law");
    f0 = detail::eval_on(*s.initial, grid0);
  } else {
    require_dim(s.x0.size(), d, "system x0");
    grid0 = Lattice::atom(s.x0);
  }
  Vec fT = detail::eval_on(s.terminal, gridT);
  nlohmann::json runs = nlohmann::json::array();
  for (Beta beta : c.betas) {
    auto p = brownian_problem(grid0, gridT, f0, fT, c.sigma, c.T, beta);
    auto sol = solve(p, s.tol, s.max_iter);
    double mass = 0;
    for (std::size_t i = 0; i < gridT.size(); ++i) mass += gridT.weights[i] * sol.q[i];
    const std::string tag = detail::beta_tag(beta);
    out.write_with("terminal_" + tag + ".csv", [&](std::ostream& os) {
      for (std::size_t a = 0; a < d; ++a) os << "x_" << a + 1 << ',';
      os << "rhoT,terminal_density,target_density\n";
      for (std::size_t i = 0; i < gridT.size(); ++i) {
        for (double v : gridT.point(i)) os << format_double(v) << ',';
        os << format_double(sol.rhoT[i]) << ',' << format_double(sol.q[i]) << ',' << format_double(p.fT[i]) << '\n';
      }
    });
    out.write_with("initial_" + tag + ".csv", [&](std::ostream& os) {
      for (std::size_t a = 0; a < d; ++a) os << "x_" << a + 1 << ',';
      os << "rho0,initial_density\n";
      for (std::size_t j = 0; j < grid0.size(); ++j) {
        for (double v : grid0.point(j)) os << format_double(v) << ',';
        os << format_double(sol.rho0[j]) << ',' << format_double(p.f0[j]) << '\n';
      }
    });
    runs.push_back({{"beta", beta_to_json(beta)},
                    {"iterations", sol.iterations},
                    {"residual0", sol.residual0},
                    {"residualT", sol.residualT},
                    {"cost", sol.cost},
                    {"terminal_mass", mass},
                    {"trace", sol.trace}});
  }
  return {{"runs", runs}};
}

// Train the score model by importance-weighted denoising score matching,
// start chains by Langevin at the top noise level, run the reverse sampler.
inline nlohmann::json run_score_desk(const ExperimentConfig& c, OutputDir& out, unsigned threads) {
  const auto& sc = c.score;
  const std::size_t d = c.reference.dimension();
  require_dim(c.objective.dimension(), d, "score_desk objective");
  const Beta beta = c.betas.front();
  const double top = sc.level_hi > 0 ? sc.level_hi : c.sigma * std::sqrt(c.T);
  const double bottom = sc.level_lo > 0 ? sc.level_lo : 0.05 * top;
  if (!(top >= bottom)) throw ConfigError("config: score.levels.hi must be >= score.levels.lo");

  auto draw = [&](const DensityModel& m, std::uint64_t stream) {
    std::vector<Vec> xs(sc.n_samples);
    Rng rng = make_rng(c.seed, detail::kDataStream, stream);
    for (auto& x : xs) x = m.sample(rng);
    return xs;
  };
  auto data_ref = draw(c.reference, 0), data_obj = draw(c.objective, 1);
  TrainConfig cfg;
  cfg.aux = sc.aux;
  cfg.beta = beta;
  cfg.noise_draws = sc.noise_draws;
  cfg.iterations = sc.iterations;
  cfg.seed = c.seed;
  auto res = train(cfg, ScoreModel::make(d, geometric_ladder(bottom, top, sc.n_levels)), data_ref, data_obj,
                   c.reference, c.objective);
  out.write_json("model.json", score_model_to_json(res.model));
  out.write_with("loss_trace.csv", [&](std::ostream& os) {
    os << "iteration,loss\n";
    for (std::size_t i = 0; i < res.loss_trace.size(); ++i) os << i << ',' << format_double(res.loss_trace[i]) << '\n';
  });

  // Chains start at the importance-weighted moments of the auxiliary data,
  // smoothed to the top level; Langevin then corrects the shape.
  const double lev = res.model.levels.back();
  const auto& aux = sc.aux == AuxChoice::objective ? data_obj : data_ref;
  Vec w = normalize_log_weights(log_importance_weights(aux, c.reference, c.objective,
                                                       sc.aux == AuxChoice::objective ? c.objective : c.reference,
                                                       beta));
  Vec m(d, 0.0), v(d, lev * lev);
  for (std::size_t i = 0; i < aux.size(); ++i)
    for (std::size_t a = 0; a < d; ++a) m[a] += w[i] * aux[i][a];
  for (std::size_t i = 0; i < aux.size(); ++i)
    for (std::size_t a = 0; a < d; ++a) v[a] += w[i] * (aux[i][a] - m[a]) * (aux[i][a] - m[a]);
  auto starts = gaussian_starts(m, v, c.n_paths, substream_seed(c.seed, 1));
  auto chains = langevin_init([&](std::span<const double> x) { return res.model.score(x, lev); }, starts, c.sigma,
                              sc.langevin_steps, sc.langevin_step, substream_seed(c.seed, 2), threads);
  std::vector<Vec> ok;
  for (auto& x : chains.samples)
    if (!x.empty()) ok.push_back(x);
  if (ok.empty()) throw std::runtime_error("every Langevin chain failed");
  auto batch = reverse_bridge_sample(res.model.as_function(), c.sigma, TimeGrid(c.T, c.n_steps), ok,
                                     substream_seed(c.seed, 3), threads);
  auto er = endpoint_distribution(batch);
  out.write_with("endpoints.csv", [&](std::ostream& os) { write_endpoints_csv(er, d, os); });

  nlohmann::json report{{"beta", beta_to_json(beta)},
                        {"levels", res.model.levels},
                        {"final_loss", res.loss_trace.empty() ? 0.0 : res.loss_trace.back()},
                        {"langevin_failed", chains.failed.size()},
                        {"n_failed", er.n_failed}};
  if (!er.samples.empty()) {
    auto sum = summarize(er.samples);
    if (c.reference.kind() == DensityKind::gaussian && c.objective.kind() == DensityKind::gaussian &&
        er.samples.size() >= 20) {
      auto g = gaussian_geometric_closed_form(c.reference.as<kinds::Gaussian>(), c.objective.as<kinds::Gaussian>(),
                                              beta.base_exponent(), beta.target_exponent())
                   .normalized;
      for (std::size_t a = 0; a < d; ++a)
        sum.ks.push_back(ks_statistic(axis_values(er.samples, a),
                                      [&](double x) { return normal_cdf(x, g.mean[a], std::sqrt(g.var[a])); }));
      report["oracle"] = {{"mean", g.mean}, {"var", g.var}};
    }
    report["summary"] = sum.to_json();
  }
  return report;
}

// Piecewise h-transform bridge through the checkpoints; N = 1 is the plain
// single-marginal run.
inline nlohmann::json run_time_series(const ExperimentConfig& c, OutputDir& out, unsigned threads) {
  TimeSeriesSpec s;
  s.checkpoints = c.series.checkpoints;
  s.joint = c.series.joint;
  s.beta = c.betas.front();
  s.sigma = c.sigma;
  s.x0 = c.series.x0;
  try {
    s.validate();
  } catch (const InputError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  std::optional<DensityModel> w;
  if (s.n_checkpoints() == 1)
    w = detail::resolve_proposal(c.proposal, s.beta, s.dimension(), c.sigma);
  else if (c.proposal != "auto" && c.proposal != "none")
    throw ConfigError("config: importance proposals need a single checkpoint");
  TimeGrid grid(s.T(), c.n_steps);
  auto run = simulate_time_series(s, c.n_mc.front(), grid, c.n_paths, c.seed, threads, w);
  auto er = endpoint_distribution(run.batch);
  out.write_with("endpoints.csv", [&](std::ostream& os) { write_endpoints_csv(er, s.dimension(), os); });
  out.write_with("checkpoints.csv", [&](std::ostream& os) { write_checkpoints_csv(run, os); });
  auto pts = checkpoint_samples(run);
  nlohmann::json report{{"beta", beta_to_json(s.beta)},
                        {"checkpoints", s.checkpoints},
                        {"checkpoint_steps", run.checkpoint_steps},
                        {"n_paths", c.n_paths},
                        {"n_failed", er.n_failed}};
  if (!pts.empty()) report["summary"] = summarize(pts).to_json();
  return report;
}

struct RunResult {
  nlohmann::json report;
  std::filesystem::path out;
};

inline RunResult run_experiment(ExperimentConfig c, const RunOptions& o) {
  if (o.seed) c.seed = *o.seed;
  if (o.paper_scale && c.kind == ExperimentKind::cauchy) c.n_paths = 10000;
  if (o.out) c.out = *o.out;
  const unsigned threads = std::max(1u, o.threads);
  auto t0 = std::chrono::steady_clock::now();
  OutputDir out(c.out);
  nlohmann::json report;
  switch (c.kind) {
    case ExperimentKind::cauchy: report = run_cauchy(c, out, threads); break;
    case ExperimentKind::normal_mixture: report = run_normal_mixture(c, out, threads); break;
    case ExperimentKind::system_solve: report = run_system_solve(c, out, threads); break;
    case ExperimentKind::score_desk: report = run_score_desk(c, out, threads); break;
    case ExperimentKind::time_series: report = run_time_series(c, out, threads); break;
  }
  report["experiment"] = experiment_name(c.kind);
  report["seed"] = c.seed;
  out.write_json("report.json", report);
  double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out.finish({{"tool", "ssb"},
              {"version", kVersion},
              {"compiler", __VERSION__},
              {"json_library", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                   std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                   std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
              {"experiment", experiment_name(c.kind)},
              {"config", c.source},
              {"config_fnv1a64", fnv1a64(c.source.dump())},
              {"seed", c.seed},
              {"threads", threads},
              {"paper_scale", o.paper_scale},
              {"n_paths", c.n_paths},
              {"wall_time_s", wall}});
  return {report, out.root()};
}

}  // namespace ssb
