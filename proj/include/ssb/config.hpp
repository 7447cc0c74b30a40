#pragma once

#include <string>

#include <json.hpp>

#include "core.hpp"

namespace ssb {

class ConfigError : public InputError {
 public:
  using InputError::InputError;
};

// Kept byte-identical to schema/experiment_config.schema.json (checked by a test).
inline constexpr const char* kConfigSchema = R"json({
  "$schema": "https://json-schema.org/draft/2020-12/schema",
  "$id": "ssb/experiment_config/1",
  "title": "ssb experiment configuration, version 1",
  "type": "object",
  "additionalProperties": false,
  "required": ["schema_version", "experiment"],
  "properties": {
    "schema_version": {"const": 1},
    "experiment": {"enum": ["cauchy", "normal_mixture", "system_solve", "score_desk", "time_series"]},
    "seed": {"type": "integer", "minimum": 0},
    "betas": {"type": "array", "minItems": 1, "items": {"$ref": "#/$defs/beta"}},
    "n_mc": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 1}},
    "n_paths": {"type": "integer", "minimum": 1},
    "grid": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "T": {"type": "number", "exclusiveMinimum": 0},
        "n_steps": {"type": "integer", "minimum": 1}
      }
    },
    "sigma": {"type": "number", "exclusiveMinimum": 0},
    "proposal": {
      "description": "Importance proposal for the drift. auto: t(2) at beta=inf, N(0, 1+beta) otherwise.",
      "enum": ["auto", "none", "student_t2", "normal_wide"]
    },
    "out": {"type": "string", "minLength": 1},
    "oracle_samples": {"type": "integer", "minimum": 20},
    "snapshot_times": {"type": "array", "items": {"type": "number", "minimum": 0}},
    "reference": {"$ref": "#/$defs/density"},
    "objective": {"$ref": "#/$defs/density"},
    "system": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "initial": {"$ref": "#/$defs/density"},
        "x0": {"$ref": "#/$defs/point"},
        "terminal": {"$ref": "#/$defs/density"},
        "lo": {"type": "number"},
        "hi": {"type": "number"},
        "n_grid": {"type": "integer", "minimum": 2},
        "tol": {"type": "number", "exclusiveMinimum": 0},
        "max_iter": {"type": "integer", "minimum": 1}
      }
    },
    "score": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "aux": {"enum": ["reference", "objective"]},
        "n_samples": {"type": "integer", "minimum": 2},
        "levels": {
          "type": "object",
          "additionalProperties": false,
          "properties": {
            "lo": {"type": "number", "exclusiveMinimum": 0},
            "hi": {"type": "number", "exclusiveMinimum": 0},
            "n": {"type": "integer", "minimum": 1}
          }
        },
        "iterations": {"type": "integer", "minimum": 1},
        "noise_draws": {"type": "integer", "minimum": 1},
        "langevin_steps": {"type": "integer", "minimum": 0},
        "langevin_step": {"type": "number", "exclusiveMinimum": 0}
      }
    },
    "time_series": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "checkpoints": {"type": "array", "minItems": 1, "items": {"type": "number", "exclusiveMinimum": 0}},
        "joint": {"$ref": "#/$defs/density"},
        "x0": {"$ref": "#/$defs/point"}
      }
    }
  },
  "$defs": {
    "beta": {"anyOf": [{"type": "number", "minimum": 0}, {"const": "inf"}]},
    "point": {"type": "array", "minItems": 1, "maxItems": 2, "items": {"type": "number"}},
    "density": {
      "description": "Density document; kind-specific keys are checked by the density parser.",
      "type": "object",
      "required": ["kind"],
      "properties": {
        "kind": {
          "enum": ["gaussian", "gaussian_mixture", "cauchy", "student_t", "grid", "geometric_mixture", "smoothed",
                   "product_transition"]
        }
      }
    }
  }
}
)json";

inline const nlohmann::json& config_schema() {
  static const nlohmann::json j = nlohmann::json::parse(kConfigSchema);
  return j;
}

namespace detail {

inline std::string json_type_name(const nlohmann::json& v) {
  if (v.is_number_integer()) return "integer";
  if (v.is_number()) return "number";
  return v.type_name();
}

inline bool json_type_matches(const nlohmann::json& v, const std::string& t) {
  if (t == "object") return v.is_object();
  if (t == "array") return v.is_array();
  if (t == "string") return v.is_string();
  if (t == "boolean") return v.is_boolean();
  if (t == "null") return v.is_null();
  if (t == "number") return v.is_number();
  if (t == "integer") return v.is_number_integer() || (v.is_number_float() && std::floor(v.get<double>()) == v.get<double>());
  throw std::logic_error("schema: unknown type '" + t + "'");
}

// The JSON Schema subset the config schema uses. Unknown keywords are a
// programming error, never silently ignored.
class SchemaValidator {
 public:
  explicit SchemaValidator(const nlohmann::json& root) : root_(root) {}

  // Empty string when valid, else the first error.
  std::string check(const nlohmann::json& v, const nlohmann::json& s, const std::string& at) const {
    for (const auto& [k, _] : s.items()) {
      static const char* known[] = {"$schema", "$id", "$defs", "$ref", "title", "description", "default", "type",
                                    "enum", "const", "properties", "required", "additionalProperties", "items",
                                    "minItems", "maxItems", "minimum", "maximum", "exclusiveMinimum", "minLength",
                                    "anyOf"};
      if (std::find(std::begin(known), std::end(known), k) == std::end(known))
        throw std::logic_error("schema: unsupported keyword '" + k + "'");
    }
    if (s.contains("$ref")) return check(v, resolve(s["$ref"].get<std::string>()), at);
    if (s.contains("anyOf")) {
      std::string first;
      for (const auto& alt : s["anyOf"]) {
        std::string e = check(v, alt, at);
        if (e.empty()) return {};
        if (first.empty()) first = e;
      }
      return first;
    }
    if (s.contains("type") && !json_type_matches(v, s["type"].get<std::string>()))
      return at + ": expected " + s["type"].get<std::string>() + ", got " + json_type_name(v);
    if (s.contains("const") && v != s["const"]) return at + ": must equal " + s["const"].dump();
    if (s.contains("enum")) {
      bool hit = false;
      for (const auto& e : s["enum"]) hit = hit || e == v;
      if (!hit) return at + ": " + v.dump() + " is not one of " + s["enum"].dump();
    }
    if (v.is_number()) {
      double x = v.get<double>();
      if (s.contains("minimum") && x < s["minimum"].get<double>())
        return at + ": must be >= " + s["minimum"].dump();
      if (s.contains("maximum") && x > s["maximum"].get<double>())
        return at + ": must be <= " + s["maximum"].dump();
      if (s.contains("exclusiveMinimum") && !(x > s["exclusiveMinimum"].get<double>()))
        return at + ": must be > " + s["exclusiveMinimum"].dump();
    }
    if (v.is_string() && s.contains("minLength") && v.get<std::string>().size() < s["minLength"].get<std::size_t>())
      return at + ": string too short";
    if (v.is_array()) {
      if (s.contains("minItems") && v.size() < s["minItems"].get<std::size_t>())
        return at + ": needs at least " + s["minItems"].dump() + " items";
      if (s.contains("maxItems") && v.size() > s["maxItems"].get<std::size_t>())
        return at + ": allows at most " + s["maxItems"].dump() + " items";
      if (s.contains("items"))
        for (std::size_t i = 0; i < v.size(); ++i) {
          std::string e = check(v[i], s["items"], at + "[" + std::to_string(i) + "]");
          if (!e.empty()) return e;
        }
    }
    if (v.is_object()) {
      if (s.contains("required"))
        for (const auto& r : s["required"])
          if (!v.contains(r.get<std::string>())) return at + ": missing required key '" + r.get<std::string>() + "'";
      const auto props = s.value("properties", nlohmann::json::object());
      for (const auto& [k, val] : v.items()) {
        if (props.contains(k)) {
          std::string e = check(val, props[k], at + "." + k);
          if (!e.empty()) return e;
        } else if (s.contains("additionalProperties") && s["additionalProperties"] == false) {
          return at + ": unknown key '" + k + "'";
        }
      }
    }
    return {};
  }

 private:
  const nlohmann::json& resolve(const std::string& ref) const {
    const std::string prefix = "#/$defs/";
    if (ref.rfind(prefix, 0) != 0) throw std::logic_error("schema: unsupported $ref " + ref);
    return root_.at("$defs").at(ref.substr(prefix.size()));
  }
  const nlohmann::json& root_;
};

}  // namespace detail

// Throws ConfigError naming the offending path ("$.grid.n_steps: ...").
inline void validate_config(const nlohmann::json& doc) {
  detail::SchemaValidator v(config_schema());
  std::string e = v.check(doc, config_schema(), "$");
  if (!e.empty()) throw ConfigError("config: " + e);
}

}  // namespace ssb
