#pragma once

// JSON round-trip for models.
//
//   {"kind":"iid",
//    "nu":{"type":"deterministic","value":2},
//    "x":{"type":"two_point","up":1.0,"p_up":0.05,"down":-1.0}}
//
// nu: {"type":"deterministic","value":k} | {"type":"pmf","probs":[p0,p1,...]}
// x:  {"type":"two_point",...} | {"type":"discrete","values":[...],"probs":[...]}
//     | {"type":"gaussian","mean":m,"sd":s}
// general: {"kind":"general","atoms":[{"p":0.5,"pattern":[1.0,-1.0]},...]}

#include <string>

#include <json.hpp>

#include "kbrw/error.hpp"
#include "kbrw/model.hpp"

namespace kbrw {

using json = nlohmann::json;

/// Raised for malformed model documents; what() starts with the JSON path.
class SchemaError : public ModelError {
 public:
  SchemaError(const std::string& path, const std::string& msg) : ModelError(path + ": " + msg), path_(path) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

namespace detail {

inline const json& field(const json& j, const std::string& key, const std::string& path) {
  if (!j.is_object()) throw SchemaError(path, "expected an object");
  auto it = j.find(key);
  if (it == j.end()) throw SchemaError(path + "." + key, "missing field");
  return *it;
}

inline double number(const json& j, const std::string& key, const std::string& path) {
  const auto& v = field(j, key, path);
  if (!v.is_number()) throw SchemaError(path + "." + key, "expected a number");
  return v.get<double>();
}

inline std::string text(const json& j, const std::string& key, const std::string& path) {
  const auto& v = field(j, key, path);
  if (!v.is_string()) throw SchemaError(path + "." + key, "expected a string");
  return v.get<std::string>();
}

inline std::vector<double> numbers(const json& j, const std::string& key, const std::string& path) {
  const auto& v = field(j, key, path);
  if (!v.is_array()) throw SchemaError(path + "." + key, "expected an array");
  std::vector<double> out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!v[i].is_number()) throw SchemaError(path + "." + key + "[" + std::to_string(i) + "]", "expected a number");
    out.push_back(v[i].get<double>());
  }
  return out;
}

inline OffspringLaw offspring_from_json(const json& j, const std::string& path) {
  const auto type = text(j, "type", path);
  try {
    if (type == "deterministic") {
      const double v = number(j, "value", path);
      if (v < 0 || v != std::floor(v) || v > 1e6) throw SchemaError(path + ".value", "expected a non-negative integer");
      return OffspringLaw::deterministic(static_cast<unsigned>(v));
    }
    if (type == "pmf") return OffspringLaw::from_pmf(numbers(j, "probs", path));
  } catch (const SchemaError&) {
    throw;
  } catch (const ModelError& e) {
    throw SchemaError(path, e.what());
  }
  throw SchemaError(path + ".type", "unknown offspring law '" + type + "'");
}

inline DisplacementLaw displacement_from_json(const json& j, const std::string& path) {
  const auto type = text(j, "type", path);
  if (type == "two_point") return TwoPointLaw{number(j, "up", path), number(j, "p_up", path), number(j, "down", path)};
  if (type == "discrete") return DiscreteLaw{numbers(j, "values", path), numbers(j, "probs", path)};
  if (type == "gaussian") return GaussianLaw{number(j, "mean", path), number(j, "sd", path)};
  throw SchemaError(path + ".type", "unknown displacement law '" + type + "'");
}

}  // namespace detail

inline Model model_from_json(const json& j) {
  const std::string root = "$";
  const auto kind = detail::text(j, "kind", root);
  if (kind == "iid") {
    auto nu = detail::offspring_from_json(detail::field(j, "nu", root), root + ".nu");
    auto x = detail::displacement_from_json(detail::field(j, "x", root), root + ".x");
    try {
      return Model(std::move(nu), std::move(x));
    } catch (const ModelError& e) {
      throw SchemaError(root, e.what());
    }
  }
  if (kind == "general") {
    const auto& atoms = detail::field(j, "atoms", root);
    if (!atoms.is_array()) throw SchemaError(root + ".atoms", "expected an array");
    GeneralFiniteSupport g;
    for (std::size_t i = 0; i < atoms.size(); ++i) {
      const std::string p = root + ".atoms[" + std::to_string(i) + "]";
      g.atoms.push_back({detail::number(atoms[i], "p", p), detail::numbers(atoms[i], "pattern", p)});
    }
    try {
      return Model(std::move(g));
    } catch (const ModelError& e) {
      throw SchemaError(root, e.what());
    }
  }
  throw SchemaError(root + ".kind", "unknown model kind '" + kind + "'");
}

inline Model model_from_json_text(const std::string& s) {
  json j;
  try {
    j = json::parse(s);
  } catch (const json::parse_error& e) {
    throw SchemaError("$", std::string("invalid JSON: ") + e.what());
  }
  return model_from_json(j);
}

inline json to_json(const Model& m) {
  json j;
  if (const auto* g = std::get_if<GeneralFiniteSupport>(&m.kind())) {
    j["kind"] = "general";
    j["atoms"] = json::array();
    for (const auto& a : g->atoms) j["atoms"].push_back({{"p", a.probability}, {"pattern", a.pattern}});
    return j;
  }
  const auto& c = m.iid();
  j["kind"] = "iid";
  if (c.nu.is_deterministic())
    j["nu"] = {{"type", "deterministic"}, {"value", *c.nu.deterministic_value()}};
  else
    j["nu"] = {{"type", "pmf"}, {"probs", c.nu.pmf()}};
  if (const auto* tp = std::get_if<TwoPointLaw>(&c.displacement))
    j["x"] = {{"type", "two_point"}, {"up", tp->up}, {"p_up", tp->p_up}, {"down", tp->down}};
  else if (const auto* d = std::get_if<DiscreteLaw>(&c.displacement))
    j["x"] = {{"type", "discrete"}, {"values", d->values}, {"probs", d->probs}};
  else {
    const auto& g = std::get<GaussianLaw>(c.displacement);
    j["x"] = {{"type", "gaussian"}, {"mean", g.mean}, {"sd", g.sd}};
  }
  return j;
}

inline json to_json(const ModelAnalytics& a) {
  json j;
  j["regime"] = to_string(a.regime);
  j["lattice"] = a.lattice;
  j["mean_offspring"] = a.mean_offspring;
  // Every supported law has bounded nu and light-tailed steps, so E[nu^{1+d}] and
  // the exponential moments are finite for any d.
  j["moment_conditions"] = "hold for every exponent: nu bounded, exponential moments finite";
  if (a.regime == Regime::OutOfScope && std::isnan(a.rho_star)) {
    j["rho_star"] = nullptr;
    return j;
  }
  j["rho_star"] = a.rho_star;
  j["rho_star_golden"] = a.rho_star_golden;
  j["psi_at_rho_star"] = a.psi_at_rho_star;
  j["psi_prime_at_rho_star"] = a.psi_prime_at_rho_star;
  j["rho_minus"] = a.rho_minus ? json(*a.rho_minus) : json(nullptr);
  j["rho_plus"] = a.rho_plus ? json(*a.rho_plus) : json(nullptr);
  if (a.rho_minus && a.rho_plus) j["tail_exponent"] = *a.rho_plus / *a.rho_minus;
  return j;
}

}  // namespace kbrw
