#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <ostream>

#include "drift.hpp"

namespace ssb {

// Uniform grid on [0, T].
class TimeGrid {
 public:
  TimeGrid(double T, std::size_t n_steps) : T_(T), n_(n_steps) {
    if (!(T > 0.0) || !std::isfinite(T)) throw InputError("time grid: T must be positive");
    if (n_steps < 1) throw InputError("time grid: need at least one step");
  }
  double T() const { return T_; }
  std::size_t n_steps() const { return n_; }
  double dt() const { return T_ / static_cast<double>(n_); }
  double t(std::size_t k) const { return k == n_ ? T_ : T_ * static_cast<double>(k) / static_cast<double>(n_); }

  // Nearest node index; throws when the time is more than dt/2 from every node.
  std::size_t snap(double time) const {
    double pos = time / dt();
    double k = std::round(pos);
    if (!(k >= 0.0 && k <= static_cast<double>(n_)) || std::abs(time - t(static_cast<std::size_t>(k))) > 0.5 * dt())
      throw InputError("time " + format_double(time) + " cannot be snapped to the grid");
    return static_cast<std::size_t>(k);
  }

 private:
  double T_;
  std::size_t n_;
};

// Per-path outcome: fail_step < 0 means ok; otherwise the first step whose
// transition failed (states 0..fail_step are valid).
struct PathStatus {
  long fail_step = -1;
  bool ok() const { return fail_step < 0; }
};

struct TrajectoryBatch {
  TimeGrid grid{1.0, 1};
  std::size_t d = 1;
  std::size_t n_paths = 0;
  std::uint64_t seed = 0;
  Vec states;  // [path][step][axis]
  std::vector<PathStatus> status;

  std::size_t stride() const { return (grid.n_steps() + 1) * d; }
  std::span<const double> state(std::size_t path, std::size_t step) const {
    return {states.data() + path * stride() + step * d, d};
  }
  std::span<double> state(std::size_t path, std::size_t step) {
    return {states.data() + path * stride() + step * d, d};
  }
  std::size_t n_failed() const {
    std::size_t c = 0;
    for (const auto& s : status) c += !s.ok();
    return c;
  }
};

// What a path-level drift callback receives at step k.
struct StepContext {
  std::size_t path;
  std::size_t step;
  double t;
};

struct SimSetup {
  double sigma = 1.0;
  Vec x0{0.0};
  BaseDrift base_drift;
  TimeGrid grid{1.0, 200};
  std::size_t n_paths = 1;
  std::uint64_t seed = 0;
  unsigned threads = 1;
  std::vector<Vec> starts;  // per-path initial states; overrides x0 when nonempty
};

// Euler-Maruyama core. make_path(i) returns a per-path callable
// (StepContext, state span, Rng& drift_rng) -> DriftEstimate; it may keep
// per-path state. Noise uses substream (seed, path, 0); drift Monte Carlo
// uses (seed, path, 1).
template <class MakePath>
TrajectoryBatch simulate_paths(const SimSetup& su, MakePath&& make_path) {
  if (!(su.sigma > 0.0)) throw InputError("simulate: sigma must be positive");
  if (su.n_paths < 1) throw InputError("simulate: need at least one path");
  if (!su.starts.empty()) {
    require_dim(su.starts.size(), su.n_paths, "simulate starts");
    for (const auto& s : su.starts) require_dim(s.size(), su.x0.size(), "simulate start state");
  }
  TrajectoryBatch out;
  out.grid = su.grid;
  out.d = su.x0.size();
  out.n_paths = su.n_paths;
  out.seed = su.seed;
  out.states.assign(su.n_paths * out.stride(), kNaN);
  out.status.assign(su.n_paths, {});
  const std::size_t d = out.d;
  const double dt = su.grid.dt();
  const double sdt = su.sigma * std::sqrt(dt);
  parallel_for(su.n_paths, su.threads, [&](std::size_t p) {
    auto path_drift = make_path(p);
    Rng noise = make_rng(su.seed, p, kNoiseStream);
    Rng mc = make_rng(su.seed, p, drift_stream(0));
    const Vec& start = su.starts.empty() ? su.x0 : su.starts[p];
    std::copy(start.begin(), start.end(), out.state(p, 0).begin());
    for (std::size_t k = 0; k < su.grid.n_steps(); ++k) {
      double t = su.grid.t(k);
      auto cur = out.state(p, k);
      DriftEstimate u = path_drift(StepContext{p, k, t}, std::span<const double>(cur), mc);
      if (!u.ok()) {
        out.status[p].fail_step = static_cast<long>(k);
        return;
      }
      Vec b = su.base_drift ? su.base_drift(cur, t) : Vec();
      auto nxt = out.state(p, k + 1);
      bool finite = true;
      for (std::size_t a = 0; a < d; ++a) {
        double drift = u.value[a] + (b.empty() ? 0.0 : b[a]);
        nxt[a] = cur[a] + drift * dt + sdt * noise.normal();
        finite = finite && std::isfinite(nxt[a]);
      }
      if (!finite) {
        std::fill(nxt.begin(), nxt.end(), kNaN);
        out.status[p].fail_step = static_cast<long>(k);
        return;
      }
    }
  });
  return out;
}

// Simulates dX = [b + u] dt + sigma dW from the bridge's x0.
inline TrajectoryBatch simulate(const BridgeSpec& spec, const DriftField& drift, const TimeGrid& grid,
                                std::size_t n_paths, std::uint64_t seed, unsigned threads = 1) {
  SimSetup su{spec.sigma, spec.x0, spec.base_drift, grid, n_paths, seed, threads, {}};
  return simulate_paths(su, [&](std::size_t) {
    return [&](const StepContext& c, std::span<const double> x, Rng& rng) { return drift(x, c.t, rng); };
  });
}

struct EndpointReport {
  std::vector<Vec> samples;  // ok paths only, in path order
  std::vector<std::size_t> path_ids;
  std::size_t n_total = 0;
  std::size_t n_failed = 0;
  std::map<long, std::size_t> failure_steps;  // step -> count
  bool empty() const { return samples.empty(); }
};

inline EndpointReport endpoint_distribution(const TrajectoryBatch& b) {
  if (b.n_paths == 0) throw InputError("endpoint_distribution: empty batch");
  EndpointReport r;
  r.n_total = b.n_paths;
  for (std::size_t p = 0; p < b.n_paths; ++p) {
    if (b.status[p].ok()) {
      auto s = b.state(p, b.grid.n_steps());
      r.samples.emplace_back(s.begin(), s.end());
      r.path_ids.push_back(p);
    } else {
      ++r.n_failed;
      ++r.failure_steps[b.status[p].fail_step];
    }
  }
  return r;
}

// Long format: path_id,step,t,x_1..x_d,status. Failed paths stop at their last valid state.
inline void write_trajectories_csv(const TrajectoryBatch& b, std::ostream& os) {
  os << "path_id,step,t";
  for (std::size_t a = 0; a < b.d; ++a) os << ",x_" << a + 1;
  os << ",status\n";
  for (std::size_t p = 0; p < b.n_paths; ++p) {
    std::size_t last = b.status[p].ok() ? b.grid.n_steps() : static_cast<std::size_t>(b.status[p].fail_step);
    const char* st = b.status[p].ok() ? "ok" : "failed";
    for (std::size_t k = 0; k <= last; ++k) {
      os << p << ',' << k << ',' << format_double(b.grid.t(k));
      for (double v : b.state(p, k)) os << ',' << format_double(v);
      os << ',' << st << '\n';
    }
  }
}

// path_id,x_1..x_d for ok paths.
inline void write_endpoints_csv(const EndpointReport& r, std::size_t d, std::ostream& os) {
  os << "path_id";
  for (std::size_t a = 0; a < d; ++a) os << ",x_" << a + 1;
  os << '\n';
  for (std::size_t i = 0; i < r.samples.size(); ++i) {
    os << r.path_ids[i];
    for (double v : r.samples[i]) os << ',' << format_double(v);
    os << '\n';
  }
}

// Binary dump, little-endian:
//   8 bytes  magic "SSBTRJ01"
//   u64      n_paths, n_steps, d, seed
//   f64      T
//   i64      fail_step per path (-1 = ok)
//   f64      states, path-major, then step, then axis (NaN after a failure)
inline void write_trajectories_binary(const TrajectoryBatch& b, std::ostream& os) {
  static_assert(std::endian::native == std::endian::little, "binary dump assumes a little-endian host");
  os.write("SSBTRJ01", 8);
  auto u64 = [&](std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); };
  u64(b.n_paths);
  u64(b.grid.n_steps());
  u64(b.d);
  u64(b.seed);
  double T = b.grid.T();
  os.write(reinterpret_cast<const char*>(&T), 8);
  for (const auto& s : b.status) {
    std::int64_t f = s.fail_step;
    os.write(reinterpret_cast<const char*>(&f), 8);
  }
  os.write(reinterpret_cast<const char*>(b.states.data()), static_cast<std::streamsize>(b.states.size() * 8));
}

inline TrajectoryBatch read_trajectories_binary(std::istream& is) {
  char magic[8];
  is.read(magic, 8);
  if (!is || std::string(magic, 8) != "SSBTRJ01") throw InputError("not a trajectory dump");
  auto u64 = [&] {
    std::uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
  };
  std::uint64_t n = u64(), steps = u64(), d = u64(), seed = u64();
  double T = 0;
  is.read(reinterpret_cast<char*>(&T), 8);
  TrajectoryBatch b;
  b.grid = TimeGrid(T, steps);
  b.d = d;
  b.n_paths = n;
  b.seed = seed;
  b.status.resize(n);
  for (auto& s : b.status) {
    std::int64_t f = 0;
    is.read(reinterpret_cast<char*>(&f), 8);
    s.fail_step = f;
  }
  b.states.resize(n * b.stride());
  is.read(reinterpret_cast<char*>(b.states.data()), static_cast<std::streamsize>(b.states.size() * 8));
  if (!is) throw InputError("truncated trajectory dump");
  return b;
}

}  // namespace ssb
