#pragma once

#include <memory>
#include <stdexcept>

#include "sde.hpp"

namespace ssb {

// Dirac-initialized bridge constrained softly at checkpoints t_1 < ... < t_N = T.
// The joint target lives on R^{d N}, checkpoint-major: (x_1, ..., x_N).
struct TimeSeriesSpec {
  Vec checkpoints;
  DensityModel joint;
  Beta beta = Beta::infinite();
  double sigma = 1.0;
  Vec x0{0.0};
  BaseDrift base_drift;

  std::size_t n_checkpoints() const { return checkpoints.size(); }
  std::size_t dimension() const { return x0.size(); }
  double T() const { return checkpoints.back(); }

  void validate() const {
    if (checkpoints.empty()) throw InputError("time series: need at least one checkpoint");
    if (!(checkpoints[0] > 0.0)) throw InputError("time series: first checkpoint must be positive");
    for (std::size_t k = 1; k < checkpoints.size(); ++k)
      if (!(checkpoints[k] > checkpoints[k - 1])) throw InputError("time series: checkpoints must increase strictly");
    if (!std::isfinite(T())) throw InputError("time series: checkpoints must be finite");
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw InputError("time series: sigma must be positive");
    if (!joint.valid()) throw InputError("time series: joint target missing");
    require_dim(joint.dimension(), dimension() * n_checkpoints(), "time series joint target");
  }

  void require_brownian(const char* what) const {
    if (base_drift) throw Unsupported(std::string(what) + " needs a zero base drift");
  }

  // The single-marginal bridge this reduces to when N = 1.
  BridgeSpec single() const {
    if (n_checkpoints() != 1) throw InputError("time series: single() needs exactly one checkpoint");
    BridgeSpec s;
    s.sigma = sigma;
    s.T = T();
    s.x0 = x0;
    s.base_drift = base_drift;
    s.target = joint;
    s.beta = beta;
    return s;
  }
};

// log p_N(xs | y): product of Brownian one-step kernels between checkpoints.
inline double log_p_N(const TimeSeriesSpec& s, std::span<const double> xs, std::span<const double> y) {
  s.require_brownian("log_p_N");
  const std::size_t d = s.dimension(), N = s.n_checkpoints();
  require_dim(xs.size(), d * N, "log_p_N points");
  require_dim(y.size(), d, "log_p_N start");
  double l = 0.0, prev_t = 0.0;
  for (std::size_t k = 0; k < N; ++k) {
    double sd = s.sigma * std::sqrt(s.checkpoints[k] - prev_t);
    for (std::size_t a = 0; a < d; ++a) l += log_normal_pdf(xs[k * d + a], k == 0 ? y[a] : xs[(k - 1) * d + a], sd);
    prev_t = s.checkpoints[k];
  }
  return l;
}

// log rho_N = b (log f_N - log p_N(. | x0)).
inline double log_rho_N_dirac(const TimeSeriesSpec& s, std::span<const double> xs) {
  double b = s.beta.target_exponent();
  if (b == 0.0) return 0.0;
  double lf = s.joint.log_density(xs);
  if (lf == kNegInf) return kNegInf;
  return b * (lf - log_p_N(s, xs, s.x0));
}

namespace detail {

inline std::size_t check_interval(const TimeSeriesSpec& s, std::size_t j, double t, std::span<const double> history) {
  const std::size_t N = s.n_checkpoints(), d = s.dimension();
  if (j >= N) throw InputError("time series: interval index out of range");
  double lo = j == 0 ? 0.0 : s.checkpoints[j - 1];
  if (!(t >= lo && t < s.checkpoints[j])) throw InputError("time series: t outside interval " + std::to_string(j));
  if (history.size() < j * d) throw std::logic_error("time series: history misses a realized checkpoint");
  return d;
}

// Draws the unrealized checkpoints forward from (x, t) into the joint vector
// and returns log rho_N there.
struct FuturePath {
  const TimeSeriesSpec& s;
  std::size_t j;
  double b;
  Vec xs, score;

  FuturePath(const TimeSeriesSpec& spec, std::size_t interval, std::span<const double> history)
      : s(spec), j(interval), b(spec.beta.target_exponent()), xs(spec.dimension() * spec.n_checkpoints()),
        score(xs.size()) {
    std::copy_n(history.begin(), j * s.dimension(), xs.begin());
  }

  double draw(std::span<const double> x, double t, Rng& rng) {
    const std::size_t d = s.dimension();
    double prev_t = t;
    for (std::size_t k = j; k < s.n_checkpoints(); ++k) {
      double sd = s.sigma * std::sqrt(s.checkpoints[k] - prev_t);
      for (std::size_t a = 0; a < d; ++a) xs[k * d + a] = (k == j ? x[a] : xs[(k - 1) * d + a]) + sd * rng.normal();
      prev_t = s.checkpoints[k];
    }
    return log_rho_N_dirac(s, xs);
  }

  // b (sum_{k >= j} d/dx_k log f_N + (x_j - x_{j-1}) / (sigma^2 dt_j)); the
  // kernel terms of later blocks telescope away.
  void grad(std::span<double> g) {
    const std::size_t d = s.dimension();
    s.joint.score_into(xs, score);
    double v = s.sigma * s.sigma * (s.checkpoints[j] - (j == 0 ? 0.0 : s.checkpoints[j - 1]));
    for (std::size_t a = 0; a < d; ++a) {
      double sum = 0.0;
      for (std::size_t k = j; k < s.n_checkpoints(); ++k) sum += score[k * d + a];
      double prev = j == 0 ? s.x0[a] : xs[(j - 1) * d + a];
      g[a] = b * (sum + (xs[j * d + a] - prev) / v);
    }
  }
};

}  // namespace detail

struct HEstimate {
  double log_value = kNegInf;
  double value = 0.0;
  double se = 0.0;  // standard error of value
  bool overflow = false;
};

// h_j(x, t; history) = E[rho_N(history, X_{t_{j+1}}, ..., X_{t_N}) | X_t = x]
// for t in [t_j, t_{j+1}) (intervals are 0-based here: j = number of realized
// checkpoints). history holds at least j checkpoint states; later entries are ignored.
inline HEstimate h_j_mc(const TimeSeriesSpec& s, std::size_t j, std::span<const double> x, double t,
                        std::span<const double> history, std::size_t n_mc, Rng& rng) {
  s.require_brownian("h_j_mc");
  const std::size_t d = detail::check_interval(s, j, t, history);
  require_dim(x.size(), d, "h_j_mc");
  if (n_mc < 1) throw InputError("h_j_mc: n_mc must be >= 1");
  HEstimate out;
  if (s.beta.target_exponent() == 0.0) {
    out.log_value = 0.0;
    out.value = 1.0;
    return out;
  }
  detail::FuturePath fp(s, j, history);
  Vec lw(n_mc);
  for (std::size_t i = 0; i < n_mc; ++i) lw[i] = fp.draw(x, t, rng);
  double lse = log_sum_exp(lw);
  if (!std::isfinite(lse)) {
    out.overflow = true;
    return out;
  }
  out.log_value = lse - std::log(static_cast<double>(n_mc));
  out.value = std::exp(out.log_value);
  double m2 = 0.0;
  for (double l : lw) {
    double r = std::exp(l - out.log_value) - 1.0;
    m2 += r * r;
  }
  out.se = n_mc > 1 ? out.value * std::sqrt(m2 / static_cast<double>(n_mc - 1) / static_cast<double>(n_mc)) : kInf;
  return out;
}

// sigma^2 grad log h_j by the shared-draw ratio estimator.
inline DriftEstimate ts_drift_mc(const TimeSeriesSpec& s, std::size_t j, std::span<const double> x, double t,
                                 std::span<const double> history, std::size_t n_mc, Rng& rng) {
  s.require_brownian("ts_drift_mc");
  const std::size_t d = detail::check_interval(s, j, t, history);
  require_dim(x.size(), d, "ts_drift_mc");
  if (n_mc < 1) throw InputError("ts_drift_mc: n_mc must be >= 1");
  if (s.beta.target_exponent() == 0.0) return {Vec(d, 0.0), Vec(d, 0.0), static_cast<double>(n_mc), false, false};
  detail::FuturePath fp(s, j, history);
  Vec lw(n_mc), g(n_mc * d);
  for (std::size_t i = 0; i < n_mc; ++i) {
    lw[i] = fp.draw(x, t, rng);
    if (lw[i] == kNegInf) {
      std::fill_n(g.begin() + i * d, d, 0.0);
      continue;
    }
    fp.grad(std::span<double>(g.data() + i * d, d));
  }
  return detail::aggregate(lw, g, d, s.sigma * s.sigma);
}

// Per-path drift for simulation: records the state at each checkpoint node and
// switches interval there. Interval j draws from substream (seed, path, 1 + j).
// With one checkpoint it defers to the single-marginal field.
class PiecewiseDrift {
 public:
  PiecewiseDrift(const TimeSeriesSpec& s, std::size_t n_mc, const TimeGrid& grid, std::uint64_t seed, std::size_t path,
                 const std::optional<DensityModel>& proposal = std::nullopt)
      : s_(s), n_mc_(n_mc), seed_(seed), path_(path), history_(s.dimension() * s.n_checkpoints(), kNaN) {
    s.validate();
    s.require_brownian("piecewise drift");
    steps_ = checkpoint_steps(s, grid);
    if (s.n_checkpoints() == 1) {
      single_ = make_drift(s.single(), proposal ? DriftMethod::mc_importance : DriftMethod::mc_plain, n_mc, proposal);
    } else if (proposal) {
      throw Unsupported("importance proposals are only supported with a single checkpoint");
    }
  }

  static std::vector<std::size_t> checkpoint_steps(const TimeSeriesSpec& s, const TimeGrid& grid) {
    if (std::abs(grid.T() - s.T()) > 1e-12 * s.T()) throw InputError("time series: grid horizon must equal t_N");
    std::vector<std::size_t> out;
    for (double c : s.checkpoints) {
      std::size_t k = grid.snap(c);
      if (k == 0 || (!out.empty() && k <= out.back()))
        throw InputError("time series: checkpoints collapse on the time grid; refine it");
      out.push_back(k);
    }
    return out;
  }

  DriftEstimate operator()(const StepContext& c, std::span<const double> x, Rng& mc) {
    const std::size_t d = s_.dimension();
    while (recorded_ + 1 < s_.n_checkpoints() && steps_[recorded_] == c.step) {
      std::copy(x.begin(), x.end(), history_.begin() + recorded_ * d);
      ++recorded_;
    }
    if (recorded_ + 1 < s_.n_checkpoints() && steps_[recorded_] < c.step)
      throw std::logic_error("time series: a checkpoint was skipped");
    if (single_) return (*single_)(x, c.t, mc);
    Rng& rng = recorded_ == 0 ? mc : interval_rng(recorded_);
    // Grid node times may sit an ulp below the checkpoint they snapped to.
    double t = recorded_ == 0 ? c.t : std::max(c.t, s_.checkpoints[recorded_ - 1]);
    return ts_drift_mc(s_, recorded_, x, t, std::span<const double>(history_.data(), recorded_ * d), n_mc_, rng);
  }

  std::size_t interval() const { return recorded_; }
  std::span<const double> history() const { return history_; }
  std::span<double> history() { return history_; }

 private:
  Rng& interval_rng(std::size_t j) {
    if (rngs_.size() <= j) rngs_.resize(j + 1);
    if (!rngs_[j]) rngs_[j] = make_rng(seed_, path_, drift_stream(j));
    return *rngs_[j];
  }

  const TimeSeriesSpec& s_;
  std::size_t n_mc_;
  std::uint64_t seed_;
  std::size_t path_;
  Vec history_;
  std::vector<std::size_t> steps_;
  std::size_t recorded_ = 0;
  std::optional<DriftField> single_;
  std::vector<std::optional<Rng>> rngs_;
};

struct TimeSeriesRun {
  TrajectoryBatch batch;
  std::vector<std::size_t> checkpoint_steps;
};

inline TimeSeriesRun simulate_time_series(const TimeSeriesSpec& s, std::size_t n_mc, const TimeGrid& grid,
                                          std::size_t n_paths, std::uint64_t seed, unsigned threads = 1,
                                          const std::optional<DensityModel>& proposal = std::nullopt) {
  s.validate();
  TimeSeriesRun out;
  out.checkpoint_steps = PiecewiseDrift::checkpoint_steps(s, grid);
  SimSetup su{s.sigma, s.x0, s.base_drift, grid, n_paths, seed, threads, {}};
  out.batch = simulate_paths(su, [&](std::size_t p) {
    return [pd = std::make_shared<PiecewiseDrift>(s, n_mc, grid, seed, p, proposal)](
               const StepContext& c, std::span<const double> x, Rng& mc) { return (*pd)(c, x, mc); };
  });
  return out;
}

// Joint checkpoint states of the ok paths, each of length d N.
inline std::vector<Vec> checkpoint_samples(const TimeSeriesRun& r) {
  std::vector<Vec> out;
  const auto& b = r.batch;
  for (std::size_t p = 0; p < b.n_paths; ++p) {
    if (!b.status[p].ok()) continue;
    Vec v;
    for (std::size_t k : r.checkpoint_steps) {
      auto s = b.state(p, k);
      v.insert(v.end(), s.begin(), s.end());
    }
    out.push_back(std::move(v));
  }
  return out;
}

// Wide format: path_id, x_t1 .. x_tN (x_tK_A when d > 1), status. Checkpoints
// after a failure are left blank.
inline void write_checkpoints_csv(const TimeSeriesRun& r, std::ostream& os) {
  const auto& b = r.batch;
  const std::size_t N = r.checkpoint_steps.size();
  os << "path_id";
  for (std::size_t k = 0; k < N; ++k)
    for (std::size_t a = 0; a < b.d; ++a) {
      os << ",x_t" << k + 1;
      if (b.d > 1) os << '_' << a + 1;
    }
  os << ",status\n";
  for (std::size_t p = 0; p < b.n_paths; ++p) {
    os << p;
    for (std::size_t k : r.checkpoint_steps) {
      bool have = b.status[p].ok() || static_cast<long>(k) <= b.status[p].fail_step;
      for (double v : b.state(p, k)) {
        os << ',';
        if (have) os << format_double(v);
      }
    }
    os << ',' << (b.status[p].ok() ? "ok" : "failed") << '\n';
  }
}

}  // namespace ssb
