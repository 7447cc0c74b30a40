#pragma once

#include <json.hpp>

#include "sde.hpp"

namespace ssb {

// Score as a function of (x, noise level).
using ScoreFn = std::function<Vec(std::span<const double>, double)>;

// All importance weights of a batch vanished or overflowed.
class DegenerateBatch : public std::runtime_error {
 public:
  DegenerateBatch(const std::string& what, std::size_t n, std::size_t n_neg_inf)
      : std::runtime_error(what), n_(n), n_neg_inf_(n_neg_inf) {}
  std::size_t batch_size() const { return n_; }
  std::size_t zero_weights() const { return n_neg_inf_; }

 private:
  std::size_t n_, n_neg_inf_;
};

// Loss became non-finite during training.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, Vec trace) : std::runtime_error(what), trace_(std::move(trace)) {}
  const Vec& trace() const { return trace_; }

 private:
  Vec trace_;
};

inline Vec geometric_ladder(double lo, double hi, std::size_t n) {
  if (!(lo > 0.0) || !(hi >= lo) || n < 1) throw InputError("noise ladder: need 0 < lo <= hi and n >= 1");
  Vec out(n);
  for (std::size_t i = 0; i < n; ++i)
    out[i] = n == 1 ? hi : std::exp(std::log(lo) + (std::log(hi) - std::log(lo)) * double(i) / double(n - 1));
  out.back() = hi;
  return out;
}

// s(x, level) = W_level^T phi_level(x) with phi = (1, x, RBF features).
// RBF bandwidth at a level is sqrt(h0^2 + level^2).
struct ScoreModel {
  std::size_t d = 1;
  bool affine = true;
  Vec levels;                // ascending
  Vec centers;               // n_centers * d
  Vec bandwidths;            // per level
  std::vector<Vec> weights;  // per level, n_features x d row-major

  std::size_t n_levels() const { return levels.size(); }
  std::size_t n_centers() const { return centers.size() / d; }
  std::size_t n_features() const { return (affine ? 1 + d : 0) + n_centers(); }

  static ScoreModel make(std::size_t d, Vec levels, Vec centers = {}, double h0 = 1.0, bool affine = true) {
    ScoreModel m;
    m.d = d;
    m.affine = affine;
    m.levels = std::move(levels);
    m.centers = std::move(centers);
    if (d < 1) throw InputError("score model: dimension must be positive");
    if (m.levels.empty()) throw InputError("score model: need at least one noise level");
    for (std::size_t i = 0; i < m.levels.size(); ++i)
      if (!(m.levels[i] > 0.0) || (i > 0 && !(m.levels[i] > m.levels[i - 1])))
        throw InputError("score model: noise levels must be positive and increasing");
    if (m.centers.size() % d != 0) throw InputError("score model: center array is not a multiple of d");
    if (m.n_features() == 0) throw InputError("score model: no features");
    if (!(h0 > 0.0)) throw InputError("score model: bandwidth must be positive");
    for (double s : m.levels) m.bandwidths.push_back(std::sqrt(h0 * h0 + s * s));
    m.weights.assign(m.levels.size(), Vec(m.n_features() * d, 0.0));
    return m;
  }

  void features(std::span<const double> x, std::size_t level, std::span<double> out) const {
    require_dim(x.size(), d, "score features");
    std::size_t k = 0;
    if (affine) {
      out[k++] = 1.0;
      for (double v : x) out[k++] = v;
    }
    const double inv = 1.0 / (2.0 * bandwidths[level] * bandwidths[level]);
    for (std::size_t c = 0; c < n_centers(); ++c) {
      double r2 = 0.0;
      for (std::size_t a = 0; a < d; ++a) {
        double z = x[a] - centers[c * d + a];
        r2 += z * z;
      }
      out[k++] = std::exp(-r2 * inv);
    }
  }

  Vec score_at_level(std::span<const double> x, std::size_t level) const {
    Vec phi(n_features()), s(d, 0.0);
    features(x, level, phi);
    const Vec& W = weights[level];
    for (std::size_t f = 0; f < phi.size(); ++f)
      for (std::size_t a = 0; a < d; ++a) s[a] += phi[f] * W[f * d + a];
    return s;
  }

  // Linear interpolation in log noise level between adjacent ladder rungs;
  // clamped outside the ladder.
  Vec score(std::span<const double> x, double sigma_t) const {
    if (sigma_t <= levels.front()) return score_at_level(x, 0);
    if (sigma_t >= levels.back()) return score_at_level(x, n_levels() - 1);
    std::size_t hi = std::upper_bound(levels.begin(), levels.end(), sigma_t) - levels.begin();
    std::size_t lo = hi - 1;
    double w = (std::log(sigma_t) - std::log(levels[lo])) / (std::log(levels[hi]) - std::log(levels[lo]));
    Vec a = score_at_level(x, lo), b = score_at_level(x, hi);
    for (std::size_t i = 0; i < d; ++i) a[i] = (1.0 - w) * a[i] + w * b[i];
    return a;
  }

  ScoreFn as_function() const {
    return [m = *this](std::span<const double> x, double s) { return m.score(x, s); };
  }
};

inline nlohmann::json score_model_to_json(const ScoreModel& m) {
  return {{"d", m.d},           {"affine", m.affine},         {"levels", m.levels},
          {"centers", m.centers}, {"bandwidths", m.bandwidths}, {"weights", m.weights}};
}

inline ScoreModel score_model_from_json(const nlohmann::json& j) {
  ScoreModel m;
  try {
    m.d = j.at("d").get<std::size_t>();
    m.affine = j.at("affine").get<bool>();
    m.levels = j.at("levels").get<Vec>();
    m.centers = j.at("centers").get<Vec>();
    m.bandwidths = j.at("bandwidths").get<Vec>();
    m.weights = j.at("weights").get<std::vector<Vec>>();
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("score model json: ") + e.what());
  }
  if (m.d < 1 || m.levels.empty() || m.bandwidths.size() != m.levels.size() || m.weights.size() != m.levels.size() ||
      m.centers.size() % m.d != 0)
    throw InputError("score model json: inconsistent sizes");
  for (const auto& w : m.weights)
    if (w.size() != m.n_features() * m.d) throw InputError("score model json: weight block has the wrong size");
  return m;
}

struct LossGrad {
  double loss = 0.0;
  Vec grad;  // n_features x d, for the level evaluated
};

// Single-sample denoising loss ||s(x~) + (x~ - x)/level^2||^2 with x~ = x + level * eps.
inline LossGrad dsm_loss(const ScoreModel& m, std::size_t level, std::span<const double> x, Rng& rng) {
  if (level >= m.n_levels()) throw InputError("dsm_loss: level index out of range");
  const std::size_t d = m.d, nf = m.n_features();
  const double s = m.levels[level];
  Vec xt(d), e(d), phi(nf);
  for (std::size_t a = 0; a < d; ++a) {
    xt[a] = x[a] + s * rng.normal();
    e[a] = (xt[a] - x[a]) / (s * s);
  }
  m.features(xt, level, phi);
  Vec r = m.score_at_level(xt, level);
  LossGrad out;
  out.grad.assign(nf * d, 0.0);
  for (std::size_t a = 0; a < d; ++a) {
    r[a] += e[a];
    out.loss += r[a] * r[a];
  }
  for (std::size_t f = 0; f < nf; ++f)
    for (std::size_t a = 0; a < d; ++a) out.grad[f * d + a] = 2.0 * phi[f] * r[a];
  return out;
}

// log of (f_ref/q)^{1/(1+beta)} (f_obj/q)^{beta/(1+beta)}.
inline double log_importance_weight(double log_ref, double log_obj, double log_q, Beta beta) {
  double a = beta.base_exponent(), b = beta.target_exponent();
  return weighted_log(a, log_ref - log_q) + weighted_log(b, log_obj - log_q);
}

inline Vec log_importance_weights(const std::vector<Vec>& xs, const DensityModel& ref, const DensityModel& obj,
                                  const DensityModel& q, Beta beta) {
  Vec out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    double lq = q.log_density(xs[i]);
    if (!std::isfinite(lq)) throw InputError("importance weights: auxiliary density vanishes at a sample");
    double lr = beta.base_exponent() == 0.0 ? lq : ref.log_density(xs[i]);
    double lo = beta.target_exponent() == 0.0 ? lq : obj.log_density(xs[i]);
    out[i] = log_importance_weight(lr, lo, lq, beta);
  }
  return out;
}

// Self-normalized weights; throws DegenerateBatch when none survive.
inline Vec normalize_log_weights(const Vec& log_w) {
  std::size_t dead = 0;
  for (double l : log_w) dead += (l == kNegInf);
  double lse = log_sum_exp(log_w);
  if (log_w.empty() || !std::isfinite(lse))
    throw DegenerateBatch("importance weights are all zero or overflow (" + std::to_string(dead) + " of " +
                              std::to_string(log_w.size()) + " vanish)",
                          log_w.size(), dead);
  Vec w(log_w.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::exp(log_w[i] - lse);
  return w;
}

// A level's denoising data with the noise drawn once: the training objective
// is then a fixed quadratic in the weights.
struct DsmBatch {
  std::size_t level = 0;
  std::vector<Vec> noisy;  // x~
  std::vector<Vec> target; // (x~ - x) / level^2
  Vec w;                   // normalized weights
};

inline DsmBatch make_batch(const ScoreModel& m, std::size_t level, const std::vector<Vec>& xs, const Vec& log_w,
                           std::size_t draws, Rng& rng) {
  if (level >= m.n_levels()) throw InputError("dsm batch: level index out of range");
  if (xs.empty()) throw InputError("dsm batch: no samples");
  require_dim(log_w.size(), xs.size(), "dsm batch weights");
  if (draws < 1) throw InputError("dsm batch: need at least one noise draw");
  Vec w = normalize_log_weights(log_w);
  const double s = m.levels[level];
  DsmBatch b;
  b.level = level;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    require_dim(xs[i].size(), m.d, "dsm batch sample");
    for (std::size_t k = 0; k < draws; ++k) {
      Vec xt(m.d), e(m.d);
      for (std::size_t a = 0; a < m.d; ++a) {
        double z = rng.normal();
        xt[a] = xs[i][a] + s * z;
        e[a] = z / s;
      }
      b.noisy.push_back(std::move(xt));
      b.target.push_back(std::move(e));
      b.w.push_back(w[i] / static_cast<double>(draws));
    }
  }
  return b;
}

// Weighted loss sum_i w_i ||s(x~_i) + e_i||^2 and its exact weight gradient.
inline LossGrad weighted_loss(const ScoreModel& m, const DsmBatch& b) {
  const std::size_t d = m.d, nf = m.n_features();
  LossGrad out;
  out.grad.assign(nf * d, 0.0);
  Vec phi(nf);
  const Vec& W = m.weights[b.level];
  for (std::size_t i = 0; i < b.noisy.size(); ++i) {
    if (b.w[i] == 0.0) continue;
    m.features(b.noisy[i], b.level, phi);
    for (std::size_t a = 0; a < d; ++a) {
      double r = b.target[i][a];
      for (std::size_t f = 0; f < nf; ++f) r += phi[f] * W[f * d + a];
      out.loss += b.w[i] * r * r;
      for (std::size_t f = 0; f < nf; ++f) out.grad[f * d + a] += 2.0 * b.w[i] * phi[f] * r;
    }
  }
  return out;
}

// Fresh-noise variant: draws x~ for each sample and evaluates the weighted loss.
inline LossGrad weighted_loss(const ScoreModel& m, std::size_t level, const std::vector<Vec>& xs, const Vec& log_w,
                              Rng& rng) {
  return weighted_loss(m, make_batch(m, level, xs, log_w, 1, rng));
}

enum class AuxChoice { reference, objective, custom };

inline AuxChoice parse_aux_choice(const std::string& s) {
  if (s == "reference") return AuxChoice::reference;
  if (s == "objective") return AuxChoice::objective;
  if (s == "custom") return AuxChoice::custom;
  throw InputError("unknown auxiliary distribution '" + s + "' (reference | objective | custom)");
}

struct TrainConfig {
  AuxChoice aux = AuxChoice::reference;
  Beta beta = Beta::finite(1.0);
  std::size_t noise_draws = 1;
  double step = 0.0;           // 0 picks 1/L per level
  std::size_t batch_size = 0;  // 0 or >= sample count means full batch
  std::size_t iterations = 2000;
  std::uint64_t seed = 0;
};

struct TrainResult {
  ScoreModel model;
  Vec loss_trace;  // sum over levels of level^2 * level loss, divided by the level count
};

namespace detail {

// Largest eigenvalue of a symmetric PSD matrix by power iteration.
inline double top_eigenvalue(const Vec& H, std::size_t n) {
  Vec v(n, 1.0 / std::sqrt(double(n))), w(n);
  double lam = 0.0;
  for (int it = 0; it < 500; ++it) {
    double nrm = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      w[i] = 0.0;
      for (std::size_t j = 0; j < n; ++j) w[i] += H[i * n + j] * v[j];
      nrm += w[i] * w[i];
    }
    nrm = std::sqrt(nrm);
    if (nrm == 0.0) return 0.0;
    for (std::size_t i = 0; i < n; ++i) v[i] = w[i] / nrm;
    if (std::abs(nrm - lam) <= 1e-12 * nrm) return nrm;
    lam = nrm;
  }
  return lam;
}

}  // namespace detail

// Full-batch gradient descent on each level's quadratic objective, starting
// from the model's current weights. Samples come from the auxiliary law and
// log_w are their log importance weights.
inline TrainResult train(const TrainConfig& cfg, const ScoreModel& init, const std::vector<Vec>& samples,
                         const Vec& log_w) {
  if (samples.empty()) throw InputError("train: no samples");
  if (cfg.iterations < 1) throw InputError("train: need at least one iteration");
  if (cfg.step < 0.0) throw InputError("train: step must be nonnegative");
  TrainResult out;
  out.model = init;
  ScoreModel& m = out.model;
  const std::size_t L = m.n_levels(), nf = m.n_features(), d = m.d;
  // Per level: H = sum w phi phi^T, B = sum w phi e^T, c = sum w |e|^2.
  std::vector<Vec> H(L, Vec(nf * nf, 0.0)), B(L, Vec(nf * d, 0.0));
  Vec c(L, 0.0), step(L);
  for (std::size_t l = 0; l < L; ++l) {
    Rng rng = make_rng(cfg.seed, l, 0);
    DsmBatch b = make_batch(m, l, samples, log_w, cfg.noise_draws, rng);
    Vec phi(nf);
    for (std::size_t i = 0; i < b.noisy.size(); ++i) {
      if (b.w[i] == 0.0) continue;
      m.features(b.noisy[i], l, phi);
      for (std::size_t f = 0; f < nf; ++f) {
        for (std::size_t g = 0; g < nf; ++g) H[l][f * nf + g] += b.w[i] * phi[f] * phi[g];
        for (std::size_t a = 0; a < d; ++a) B[l][f * d + a] += b.w[i] * phi[f] * b.target[i][a];
      }
      for (double e : b.target[i]) c[l] += b.w[i] * e * e;
    }
    double lmax = 2.0 * detail::top_eigenvalue(H[l], nf);
    step[l] = cfg.step > 0.0 ? cfg.step : (lmax > 0.0 ? 1.0 / lmax : 1.0);
  }
  auto level_loss = [&](std::size_t l, Vec* grad) {
    const Vec& W = m.weights[l];
    double loss = c[l];
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t f = 0; f < nf; ++f) {
        double hw = 0.0;
        for (std::size_t g = 0; g < nf; ++g) hw += H[l][f * nf + g] * W[g * d + a];
        loss += W[f * d + a] * hw + 2.0 * W[f * d + a] * B[l][f * d + a];
        if (grad) (*grad)[f * d + a] = 2.0 * (hw + B[l][f * d + a]);
      }
    return loss;
  };
  // Minibatch gradient: batch_size draws with replacement from the level's
  // noisy pairs, weights renormalized within the draw.
  std::vector<DsmBatch> batches;
  const bool mini = cfg.batch_size > 0 && cfg.batch_size < samples.size() * cfg.noise_draws;
  if (mini)
    for (std::size_t l = 0; l < L; ++l) {
      Rng rng = make_rng(cfg.seed, l, 0);
      batches.push_back(make_batch(m, l, samples, log_w, cfg.noise_draws, rng));
    }
  auto minibatch_grad = [&](std::size_t l, std::size_t it, Vec& grad) {
    const DsmBatch& full = batches[l];
    Rng rng = make_rng(cfg.seed, l, 1 + it);
    DsmBatch b;
    b.level = l;
    double tot = 0.0;
    for (std::size_t k = 0; k < cfg.batch_size; ++k) {
      std::size_t i = std::min(full.noisy.size() - 1, static_cast<std::size_t>(rng.uniform() * full.noisy.size()));
      b.noisy.push_back(full.noisy[i]);
      b.target.push_back(full.target[i]);
      b.w.push_back(full.w[i]);
      tot += full.w[i];
    }
    if (!(tot > 0.0)) {
      std::fill(grad.begin(), grad.end(), 0.0);
      return;
    }
    for (double& w : b.w) w /= tot;
    grad = weighted_loss(m, b).grad;
  };
  Vec grad(nf * d);
  for (std::size_t it = 0; it <= cfg.iterations; ++it) {
    double total = 0.0;
    for (std::size_t l = 0; l < L; ++l) {
      double s2 = m.levels[l] * m.levels[l];
      bool step_now = it < cfg.iterations;
      total += s2 * level_loss(l, step_now && !mini ? &grad : nullptr) / double(L);
      if (!step_now) continue;
      if (mini) minibatch_grad(l, it, grad);
      for (std::size_t k = 0; k < grad.size(); ++k) m.weights[l][k] -= step[l] * grad[k];
    }
    out.loss_trace.push_back(total);
    if (!std::isfinite(total)) throw TrainingError("training loss became non-finite", out.loss_trace);
  }
  return out;
}

// Picks the auxiliary sample set and density per the config and trains.
inline TrainResult train(const TrainConfig& cfg, const ScoreModel& init, const std::vector<Vec>& data_ref,
                         const std::vector<Vec>& data_obj, const DensityModel& ref, const DensityModel& obj,
                         const std::optional<DensityModel>& custom = std::nullopt,
                         const std::vector<Vec>& custom_samples = {}) {
  const std::vector<Vec>* xs = nullptr;
  const DensityModel* q = nullptr;
  switch (cfg.aux) {
    case AuxChoice::reference:
      xs = &data_ref;
      q = &ref;
      break;
    case AuxChoice::objective:
      xs = &data_obj;
      q = &obj;
      break;
    case AuxChoice::custom:
      if (!custom || custom_samples.empty()) throw InputError("train: custom auxiliary needs a density and samples");
      xs = &custom_samples;
      q = &*custom;
      break;
  }
  if (xs->empty()) throw InputError("train: the auxiliary sample set is empty");
  return train(cfg, init, *xs, log_importance_weights(*xs, ref, obj, *q, cfg.beta));
}

struct LangevinResult {
  std::vector<Vec> samples;  // final states; empty for failed chains
  std::vector<std::size_t> failed;
};

// Euler-Maruyama for dX = (sigma^2 / 2) grad log f dt + sigma dW, whose
// stationary law is f. Chain i uses substream (seed, i).
inline LangevinResult langevin_init(const std::function<Vec(std::span<const double>)>& score,
                                    const std::vector<Vec>& starts, double sigma, std::size_t n_steps, double step,
                                    std::uint64_t seed, unsigned threads = 1) {
  if (!(step > 0.0)) throw InputError("langevin: step must be positive");
  if (!(sigma > 0.0)) throw InputError("langevin: sigma must be positive");
  if (starts.empty()) throw InputError("langevin: no chains");
  LangevinResult out;
  out.samples = starts;
  std::vector<char> bad(starts.size(), 0);
  const double sd = sigma * std::sqrt(step), half = 0.5 * sigma * sigma * step;
  parallel_for(starts.size(), threads, [&](std::size_t i) {
    Rng rng = make_rng(seed, i, 0);
    Vec& x = out.samples[i];
    for (std::size_t k = 0; k < n_steps; ++k) {
      Vec g = score(x);
      bool finite = true;
      for (std::size_t a = 0; a < x.size(); ++a) {
        x[a] += half * g[a] + sd * rng.normal();
        finite = finite && std::isfinite(x[a]);
      }
      if (!finite) {
        bad[i] = 1;
        x.clear();
        return;
      }
    }
  });
  for (std::size_t i = 0; i < bad.size(); ++i)
    if (bad[i]) out.failed.push_back(i);
  return out;
}

inline std::vector<Vec> gaussian_starts(const Vec& mean, const Vec& var, std::size_t n, std::uint64_t seed) {
  require_dim(var.size(), mean.size(), "gaussian starts");
  std::vector<Vec> out(n, Vec(mean.size()));
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = make_rng(seed, i, 0);
    for (std::size_t a = 0; a < mean.size(); ++a) out[i][a] = mean[a] + std::sqrt(var[a]) * rng.normal();
  }
  return out;
}

// Simulates dX = sigma^2 s(X, sigma sqrt(T - t)) dt + sigma dW from the given
// start states (one path per start).
inline TrajectoryBatch reverse_bridge_sample(const ScoreFn& score, double sigma, const TimeGrid& grid,
                                             const std::vector<Vec>& starts, std::uint64_t seed,
                                             unsigned threads = 1) {
  if (starts.empty()) throw InputError("reverse sampler: no start states");
  SimSetup su{sigma, starts[0], {}, grid, starts.size(), seed, threads, starts};
  const double s2 = sigma * sigma, T = grid.T();
  return simulate_paths(su, [&](std::size_t) {
    return [&](const StepContext& c, std::span<const double> x, Rng&) {
      Vec u = score(x, sigma * std::sqrt(T - c.t));
      for (double& v : u) v *= s2;
      return DriftEstimate{u, Vec(u.size(), 0.0), kInf, false, false};
    };
  });
}

}  // namespace ssb
