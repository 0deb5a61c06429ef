// JSON (de)serialization for solver and generator configuration. Keys are
// snake_case field names; unknown keys are rejected so typos fail loudly.
#pragma once

#include <string>

#include "json.hpp"
#include "odesr/dopri5.hpp"
#include "odesr/errors.hpp"
#include "odesr/sr_model.hpp"

namespace odesr {

using json = nlohmann::ordered_json;

namespace detail {

inline void check_keys(const json& j, std::initializer_list<const char*> known,
                       const char* where) {
  if (!j.is_object()) {
    throw config_error(std::string(where) + " must be a JSON object");
  }
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || item.key() == k;
    if (!ok) {
      throw config_error(std::string("unknown key '") + item.key() + "' in " +
                         where);
    }
  }
}

template <typename T>
void read_field(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw config_error(std::string("bad value for '") + key + "': " + e.what());
  }
}

}  // namespace detail

inline json solver_to_json(const SolverConfig& s) {
  json j;
  j["rtol"] = s.rtol;
  j["atol"] = s.atol;
  j["t0"] = s.t0;
  j["t_final"] = s.t_final;
  j["initial_step"] = s.initial_step;
  j["safety"] = s.safety;
  j["min_factor"] = s.min_factor;
  j["max_factor"] = s.max_factor;
  j["max_nfe"] = s.max_nfe;
  return j;
}

inline SolverConfig solver_from_json(const json& j) {
  detail::check_keys(j,
                     {"rtol", "atol", "t0", "t_final", "initial_step", "safety",
                      "min_factor", "max_factor", "max_nfe"},
                     "solver config");
  SolverConfig s;
  detail::read_field(j, "rtol", s.rtol);
  detail::read_field(j, "atol", s.atol);
  detail::read_field(j, "t0", s.t0);
  detail::read_field(j, "t_final", s.t_final);
  detail::read_field(j, "initial_step", s.initial_step);
  detail::read_field(j, "safety", s.safety);
  detail::read_field(j, "min_factor", s.min_factor);
  detail::read_field(j, "max_factor", s.max_factor);
  detail::read_field(j, "max_nfe", s.max_nfe);
  return s;
}

inline json generator_to_json(const GeneratorConfig& g) {
  json j;
  j["filters"] = g.filters;
  j["scale"] = g.scale;
  j["core"] = core_name(g.core);
  j["ode_layers"] = g.ode_layers;
  j["time_dependent"] = g.time_dependent;
  j["augment_channels"] = g.augment_channels;
  j["t_final"] = g.t_final;
  j["rrdb_blocks"] = g.rrdb_blocks;
  j["growth"] = g.growth;
  j["solver"] = solver_to_json(g.solver);
  j["backend"] = backend_name(g.backend);
  return j;
}

inline GeneratorConfig generator_from_json(const json& j) {
  detail::check_keys(j,
                     {"filters", "scale", "core", "ode_layers",
                      "time_dependent", "augment_channels", "t_final",
                      "rrdb_blocks", "growth", "solver", "backend"},
                     "generator config");
  GeneratorConfig g;
  detail::read_field(j, "filters", g.filters);
  detail::read_field(j, "scale", g.scale);
  std::string core_s = core_name(g.core);
  detail::read_field(j, "core", core_s);
  g.core = parse_core(core_s);
  detail::read_field(j, "ode_layers", g.ode_layers);
  detail::read_field(j, "time_dependent", g.time_dependent);
  detail::read_field(j, "augment_channels", g.augment_channels);
  detail::read_field(j, "t_final", g.t_final);
  detail::read_field(j, "rrdb_blocks", g.rrdb_blocks);
  detail::read_field(j, "growth", g.growth);
  if (j.contains("solver")) g.solver = solver_from_json(j.at("solver"));
  std::string backend_s = backend_name(g.backend);
  detail::read_field(j, "backend", backend_s);
  g.backend = parse_backend(backend_s);
  return g;
}

}  // namespace odesr
