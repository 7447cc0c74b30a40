#pragma once

#include <algorithm>
#include <cstdio>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ssb {

using Vec = std::vector<double>;

inline constexpr double kInf = std::numeric_limits<double>::infinity();
inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();
inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
inline constexpr double kLogSqrt2Pi = 0.91893853320467274178;  // 0.5*log(2*pi)

// Bad arguments, dimension mismatches, violated preconditions.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Quadrature that did not settle. Carries the last two refinements.
class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& what, double previous, double last)
      : std::runtime_error(what), previous_(previous), last_(last) {}
  double previous() const { return previous_; }
  double last() const { return last_; }

 private:
  double previous_;
  double last_;
};

// Iterative solver ran out of iterations.
class NonConvergence : public std::runtime_error {
 public:
  NonConvergence(const std::string& what, std::vector<double> trace)
      : std::runtime_error(what), trace_(std::move(trace)) {}
  const std::vector<double>& trace() const { return trace_; }

 private:
  std::vector<double> trace_;
};

class Unsupported : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Soft-constraint strength. Infinity is its own state, never a float sentinel.
class Beta {
 public:
  static Beta finite(double value) {
    if (!(value >= 0.0) || !std::isfinite(value))
      throw InputError("beta must be a finite nonnegative number (use Beta::infinite())");
    return Beta(value, false);
  }
  static Beta infinite() { return Beta(0.0, true); }

  bool is_infinite() const { return infinite_; }
  bool is_zero() const { return !infinite_ && value_ == 0.0; }
  // Only meaningful for finite beta.
  double value() const {
    if (infinite_) throw InputError("value() called on infinite beta");
    return value_;
  }

  // Exponent on the base / reference density, 1/(1+beta).
  double base_exponent() const { return infinite_ ? 0.0 : 1.0 / (1.0 + value_); }
  // Exponent on the target density, beta/(1+beta).
  double target_exponent() const { return infinite_ ? 1.0 : value_ / (1.0 + value_); }

  std::string to_string() const;

  friend bool operator==(const Beta& a, const Beta& b) {
    return a.infinite_ == b.infinite_ && (a.infinite_ || a.value_ == b.value_);
  }

 private:
  Beta(double v, bool inf) : value_(v), infinite_(inf) {}
  double value_;
  bool infinite_;
};

inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string Beta::to_string() const { return infinite_ ? "inf" : format_double(value_); }

// Parses "inf"/"infinity" or a nonnegative number.
inline Beta parse_beta(const std::string& s) {
  if (s == "inf" || s == "infinity" || s == "Inf") return Beta::infinite();
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw InputError("cannot parse beta '" + s + "'");
  }
  if (used != s.size()) throw InputError("cannot parse beta '" + s + "'");
  return Beta::finite(v);
}

// a*log(x) with the convention 0*log(0) = 0 (a zero exponent drops the term).
inline double weighted_log(double a, double logx) {
  if (a == 0.0) return 0.0;
  return a * logx;
}

inline double log_sum_exp(std::span<const double> v) {
  double m = kNegInf;
  for (double x : v) {
    if (std::isnan(x)) return kNaN;
    m = std::max(m, x);
  }
  if (!std::isfinite(m)) return m;  // all -inf, or a +inf present
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

inline double log_add_exp(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

inline double log_normal_pdf(double x, double mean, double sd) {
  double z = (x - mean) / sd;
  return -0.5 * z * z - std::log(sd) - kLogSqrt2Pi;
}

inline double normal_cdf(double x, double mean = 0.0, double sd = 1.0) {
  return 0.5 * std::erfc(-(x - mean) / (sd * std::numbers::sqrt2));
}

[[noreturn]] __attribute__((noinline, cold)) inline void dimension_error(std::size_t got, std::size_t want,
                                                                        const char* what) {
  throw InputError(std::string(what) + ": dimension mismatch (got " + std::to_string(got) + ", expected " +
                   std::to_string(want) + ")");
}

inline void require_dim(std::size_t got, std::size_t want, const char* what) {
  if (got != want) [[unlikely]] dimension_error(got, want, what);
}

}  // namespace ssb
