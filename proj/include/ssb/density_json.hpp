#pragma once

// JSON form of DensityModel. Every document has "kind" and "dimension";
// the remaining keys depend on the kind:
//
//   gaussian            mean [d], variance [d]
//   gaussian_mixture    weights [k], components [{mean, variance}]
//   cauchy              loc [d], scale [d]
//   student_t           loc [d], scale [d], dof
//   grid                lo [d], hi [d], n [d], values [prod n] (axis 0 major), normalized
//   geometric_mixture   base {...}, target {...}, beta (number or "inf"), log_normalizer (number or null)
//   smoothed            base {...}, sigma
//   product_transition  d, origin [d], shifts [steps*d], variances [steps]
//
// Beta is written as a number, or the string "inf".

#include <json.hpp>

#include "density.hpp"

namespace ssb {

using json = nlohmann::json;

inline json beta_to_json(const Beta& b) {
  if (b.is_infinite()) return "inf";
  return b.value();
}

inline Beta beta_from_json(const json& j) {
  if (j.is_string()) return parse_beta(j.get<std::string>());
  if (!j.is_number()) throw InputError("beta must be a number or \"inf\"");
  return Beta::finite(j.get<double>());
}

inline json density_to_json(const DensityModel& m) {
  json j;
  j["kind"] = kind_name(m.kind());
  j["dimension"] = m.dimension();
  std::visit(
      [&](const auto& k) {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, kinds::Gaussian>) {
          j["mean"] = k.mean;
          j["variance"] = k.var;
        } else if constexpr (std::is_same_v<K, kinds::GaussianMixture>) {
          j["weights"] = k.weights;
          json comps = json::array();
          for (const auto& c : k.components) comps.push_back({{"mean", c.mean}, {"variance", c.var}});
          j["components"] = comps;
        } else if constexpr (std::is_same_v<K, kinds::Cauchy>) {
          j["loc"] = k.loc;
          j["scale"] = k.scale;
        } else if constexpr (std::is_same_v<K, kinds::StudentT>) {
          j["loc"] = k.loc;
          j["scale"] = k.scale;
          j["dof"] = k.dof;
        } else if constexpr (std::is_same_v<K, kinds::Grid>) {
          j["lo"] = k.lo;
          j["hi"] = k.hi;
          j["n"] = k.n;
          j["values"] = k.values;
          j["normalized"] = m.normalized();
        } else if constexpr (std::is_same_v<K, GeometricMixture>) {
          j["base"] = density_to_json(k.base);
          j["target"] = density_to_json(k.target);
          j["beta"] = beta_to_json(k.beta);
          j["log_normalizer"] = k.log_c ? json(*k.log_c) : json(nullptr);
        } else if constexpr (std::is_same_v<K, kinds::Smoothed>) {
          j["base"] = density_to_json(k.base);
          j["sigma"] = k.sigma;
        } else {
          j["d"] = k.d;
          j["origin"] = k.origin;
          j["shifts"] = k.shifts;
          j["variances"] = k.variances;
        }
      },
      m.impl().data);
  return j;
}

namespace detail {

inline void allow_keys(const json& j, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw InputError("density document must be a JSON object");
  for (const auto& [k, _] : j.items()) {
    bool ok = false;
    for (const char* a : keys) ok = ok || k == a;
    if (!ok) throw InputError("unknown key '" + k + "' in density document");
  }
}

template <class T>
T need(const json& j, const char* key) {
  if (!j.contains(key)) throw InputError(std::string("density document is missing '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw InputError(std::string("density document: bad value for '") + key + "': " + e.what());
  }
}

}  // namespace detail

inline DensityModel density_from_json(const json& j, const QuadratureSpec& spec = {}) {
  if (!j.is_object() || !j.contains("kind")) throw InputError("density document needs a 'kind'");
  std::string kind = detail::need<std::string>(j, "kind");
  DensityModel m;
  if (kind == "gaussian") {
    detail::allow_keys(j, {"kind", "dimension", "mean", "variance"});
    m = DensityModel::gaussian(detail::need<Vec>(j, "mean"), detail::need<Vec>(j, "variance"));
  } else if (kind == "gaussian_mixture") {
    detail::allow_keys(j, {"kind", "dimension", "weights", "components"});
    std::vector<kinds::Gaussian> comps;
    for (const auto& c : detail::need<json>(j, "components")) {
      detail::allow_keys(c, {"mean", "variance"});
      comps.push_back({detail::need<Vec>(c, "mean"), detail::need<Vec>(c, "variance")});
    }
    m = DensityModel::gaussian_mixture(detail::need<Vec>(j, "weights"), std::move(comps));
  } else if (kind == "cauchy") {
    detail::allow_keys(j, {"kind", "dimension", "loc", "scale"});
    m = DensityModel::cauchy(detail::need<Vec>(j, "loc"), detail::need<Vec>(j, "scale"));
  } else if (kind == "student_t") {
    detail::allow_keys(j, {"kind", "dimension", "loc", "scale", "dof"});
    m = DensityModel::student_t(detail::need<Vec>(j, "loc"), detail::need<Vec>(j, "scale"), detail::need<double>(j, "dof"));
  } else if (kind == "grid") {
    detail::allow_keys(j, {"kind", "dimension", "lo", "hi", "n", "values", "normalized"});
    m = DensityModel::grid_2d(detail::need<Vec>(j, "lo"), detail::need<Vec>(j, "hi"),
                              detail::need<std::vector<std::size_t>>(j, "n"), detail::need<Vec>(j, "values"),
                              j.value("normalized", false));
  } else if (kind == "geometric_mixture") {
    detail::allow_keys(j, {"kind", "dimension", "base", "target", "beta", "log_normalizer"});
    GeometricMixture gm{density_from_json(detail::need<json>(j, "base"), spec),
                        density_from_json(detail::need<json>(j, "target"), spec),
                        beta_from_json(detail::need<json>(j, "beta")), std::nullopt};
    if (j.contains("log_normalizer") && !j.at("log_normalizer").is_null())
      gm.log_c = detail::need<double>(j, "log_normalizer");
    m = DensityModel::from_geometric_mixture(std::move(gm));
  } else if (kind == "smoothed") {
    detail::allow_keys(j, {"kind", "dimension", "base", "sigma"});
    m = DensityModel::smoothed(density_from_json(detail::need<json>(j, "base"), spec), detail::need<double>(j, "sigma"), spec);
  } else if (kind == "product_transition") {
    detail::allow_keys(j, {"kind", "dimension", "d", "origin", "shifts", "variances"});
    m = DensityModel::product_transition(detail::need<std::size_t>(j, "d"), detail::need<Vec>(j, "origin"),
                                         detail::need<Vec>(j, "shifts"), detail::need<Vec>(j, "variances"));
  } else {
    throw InputError("unknown density kind '" + kind + "'");
  }
  if (j.contains("dimension") && detail::need<std::size_t>(j, "dimension") != m.dimension())
    throw InputError("density document: 'dimension' does not match the parameters");
  return m;
}

}  // namespace ssb
