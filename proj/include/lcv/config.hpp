#pragma once

/**
 * @file
 * @brief JSON configuration document to `ConfigBundle`.
 *
 * One document with blocks `system`, `materials`, `stations`, `camera`,
 * `noise`, `mpc`, `infeed`, `plant`, `sim`. Unknown keys are rejected so a
 * typo never silently falls back to a default. Every error names the key
 * path, e.g. `stations[0].span`.
 */

#include <json.hpp>

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <initializer_list>
#include <set>
#include <sstream>
#include <string>

#include "lcv/error.hpp"
#include "lcv/sim.hpp"

namespace lcv {

using Json = nlohmann::json;

/// FNV-1a 64 over the canonical dump (sorted keys, no whitespace), as 16 hex digits.
inline std::string config_hash(const Json& doc)
{
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : doc.dump()) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace detail {

class Reader
{
 public:
  Reader(const Json& j, std::string path) : j_(j), path_(std::move(path))
  {
    if (!j_.is_object()) { throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object"); }
  }

  std::string key(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }

  bool has(const std::string& k) const { return j_.contains(k); }

  const Json& at(const std::string& k) const
  {
    if (!j_.contains(k)) { throw ConfigError(key(k), "missing required key"); }
    return j_.at(k);
  }

  void allow(std::initializer_list<const char*> keys) const
  {
    std::set<std::string> ok(keys.begin(), keys.end());
    for (const auto& [k, v] : j_.items()) {
      if (!ok.count(k)) { throw ConfigError(key(k), "unknown key"); }
    }
  }

  double number(const std::string& k) const
  {
    const auto& v = at(k);
    if (!v.is_number()) { throw ConfigError(key(k), "expected a number"); }
    return v.get<double>();
  }

  double number(const std::string& k, double fallback) const { return has(k) ? number(k) : fallback; }

  std::size_t count(const std::string& k) const
  {
    const auto& v = at(k);
    if (!v.is_number_integer() || v.get<long long>() < 0) { throw ConfigError(key(k), "expected a non-negative integer"); }
    return v.get<std::size_t>();
  }

  std::size_t count(const std::string& k, std::size_t fallback) const { return has(k) ? count(k) : fallback; }

  std::string text(const std::string& k, const std::string& fallback) const
  {
    if (!has(k)) { return fallback; }
    const auto& v = at(k);
    if (!v.is_string()) { throw ConfigError(key(k), "expected a string"); }
    return v.get<std::string>();
  }

  const Json& array(const std::string& k) const
  {
    const auto& v = at(k);
    if (!v.is_array()) { throw ConfigError(key(k), "expected an array"); }
    return v;
  }

  Reader child(const std::string& k) const { return Reader(at(k), key(k)); }

  Reader element(const std::string& k, std::size_t i) const
  {
    return Reader(array(k)[i], key(k) + "[" + std::to_string(i) + "]");
  }

 private:
  const Json& j_;
  std::string path_;
};

inline void require(bool ok, const std::string& key, const std::string& what)
{
  if (!ok) { throw ConfigError(key, what); }
}

inline void parse_system(const Reader& root, ConfigBundle& b)
{
  const auto s = root.child("system");
  s.allow({"m", "r_min", "r_max", "u_min", "u_max", "dt"});
  auto& c = b.system;
  c.m = s.count("m");
  c.r_min = s.number("r_min");
  c.r_max = s.number("r_max");
  c.u_min = s.number("u_min");
  c.u_max = s.number("u_max");
  c.dt = s.number("dt", 1.0);
  require(c.m >= 1, s.key("m"), "must be >= 1");
  require(c.r_min > 0.0, s.key("r_min"), "must be > 0");
  require(c.r_max >= c.r_min, s.key("r_max"), "must be >= r_min");
  require(c.r_max <= static_cast<double>(c.m), s.key("r_max"), "must not exceed m");
  require(c.u_min <= 0.0, s.key("u_min"), "must be <= 0");
  require(c.u_max >= 0.0, s.key("u_max"), "must be >= 0");
  require(c.dt > 0.0, s.key("dt"), "must be > 0");

  const auto& mats = root.array("materials");
  require(!mats.empty(), "materials", "need at least one material");
  c.n = mats.size();
  for (std::size_t i = 0; i < c.n; ++i) {
    const auto e = root.element("materials", i);
    e.allow({"name", "price"});
    MaterialSpec spec{i, e.text("name", "material_" + std::to_string(i)), e.number("price")};
    require(spec.price >= 0.0, e.key("price"), "must be >= 0");
    c.materials.push_back(std::move(spec));
  }

  const auto& stations = root.array("stations");
  std::vector<bool> seen(c.n, false);
  for (std::size_t k = 0; k < stations.size(); ++k) {
    const auto e = root.element("stations", k);
    e.allow({"material", "span", "pick_cap"});
    SortStation st;
    st.material = e.count("material");
    require(st.material < c.n, e.key("material"), "out of range");
    require(!seen[st.material], e.key("material"), "material already has a station");
    seen[st.material] = true;
    const auto& span = e.array("span");
    require(!span.empty(), e.key("span"), "must be nonempty");
    for (std::size_t q = 0; q < span.size(); ++q) {
      const auto key = e.key("span") + "[" + std::to_string(q) + "]";
      require(span[q].is_number_integer() && span[q].get<long long>() >= 0, key, "expected a volume index");
      const auto j = span[q].get<std::size_t>();
      require(j < c.m, key, "volume index out of range");
      st.span.push_back(j);
    }
    st.pick_cap = e.number("pick_cap");
    require(st.pick_cap >= 0.0, e.key("pick_cap"), "must be >= 0");
    c.stations.push_back(std::move(st));
  }
}

inline void parse_camera(const Reader& root, ConfigBundle& b)
{
  const auto s = root.child("camera");
  s.allow({"first_volume", "lambda", "image_width", "image_height", "mass_per_object"});
  auto& c = b.camera;
  c.first_volume = s.count("first_volume", 0);
  c.lambda = s.count("lambda");
  c.image_width = s.number("image_width", c.image_width);
  c.image_height = s.number("image_height", c.image_height);
  c.mass_per_object = s.number("mass_per_object", c.mass_per_object);
  require(c.lambda >= 1, s.key("lambda"), "must be >= 1");
  require(c.first_volume + c.lambda <= b.system.m, s.key("lambda"), "viewport extends past the last volume");
  require(c.image_width > 0.0, s.key("image_width"), "must be > 0");
  require(c.image_height > 0.0, s.key("image_height"), "must be > 0");
  require(c.mass_per_object > 0.0, s.key("mass_per_object"), "must be > 0");
}

inline void parse_noise(const Reader& root, ConfigBundle& b)
{
  if (!root.has("noise")) { return; }
  const auto s = root.child("noise");
  s.allow({"q_mass", "q_speed", "r_meas"});
  auto& c = b.noise;
  c.q_mass = s.number("q_mass", c.q_mass);
  c.q_speed = s.number("q_speed", c.q_speed);
  c.r_meas = s.number("r_meas", c.r_meas);
  require(c.q_mass >= 0.0, s.key("q_mass"), "must be >= 0");
  require(c.q_speed >= 0.0, s.key("q_speed"), "must be >= 0");
  require(c.r_meas >= 0.0, s.key("r_meas"), "must be >= 0");
}

inline void parse_mpc(const Reader& root, ConfigBundle& b)
{
  if (!root.has("mpc")) { return; }
  const auto s = root.child("mpc");
  s.allow({"horizon", "accounting", "forecast", "mixed_price", "fd_epsilon", "armijo_c1", "backtrack_factor",
           "max_iters", "max_backtracks", "grad_tol"});
  auto& c = b.mpc;
  c.horizon = s.count("horizon", 0);
  require(c.horizon == 0 || c.horizon >= 2, s.key("horizon"), "must be 0 (auto) or >= 2");
  const auto acc = s.text("accounting", "prose");
  require(acc == "prose" || acc == "literal", s.key("accounting"), "expected prose or literal");
  c.accounting = parse_accounting(acc);
  const auto fc = s.text("forecast", "queue");
  if (fc == "queue") {
    c.forecast = ForecastMode::queue;
  } else if (fc == "persistence") {
    c.forecast = ForecastMode::persistence;
  } else if (fc == "none") {
    c.forecast = ForecastMode::none;
  } else {
    throw ConfigError(s.key("forecast"), "expected queue, persistence or none");
  }
  c.mixed_price = s.number("mixed_price", c.mixed_price);
  c.fd_epsilon = s.number("fd_epsilon", c.fd_epsilon);
  c.armijo_c1 = s.number("armijo_c1", c.armijo_c1);
  c.backtrack_factor = s.number("backtrack_factor", c.backtrack_factor);
  c.max_iters = s.count("max_iters", c.max_iters);
  c.max_backtracks = s.count("max_backtracks", c.max_backtracks);
  c.grad_tol = s.number("grad_tol", c.grad_tol);
  require(c.mixed_price >= 0.0, s.key("mixed_price"), "must be >= 0");
  for (const auto& m : b.system.materials) {
    require(c.mixed_price <= m.price, s.key("mixed_price"), "must not exceed any material price");
  }
  require(c.fd_epsilon > 0.0, s.key("fd_epsilon"), "must be > 0");
  require(c.armijo_c1 > 0.0 && c.armijo_c1 < 1.0, s.key("armijo_c1"), "must be in (0,1)");
  require(c.backtrack_factor > 0.0 && c.backtrack_factor < 1.0, s.key("backtrack_factor"), "must be in (0,1)");
  require(c.grad_tol >= 0.0, s.key("grad_tol"), "must be >= 0");
}

inline void parse_infeed(const Reader& root, ConfigBundle& b)
{
  const auto s = root.child("infeed");
  s.allow({"coupling", "materials", "script"});
  auto& c = b.infeed;
  const auto coupling = s.text("coupling", "belt");
  require(coupling == "belt" || coupling == "time", s.key("coupling"), "expected belt or time");
  c.coupling = coupling == "belt" ? InfeedCoupling::belt : InfeedCoupling::time;

  if (s.has("script")) {
    const auto sc = s.child("script");
    sc.allow({"base", "pulses"});
    InfeedScript script;
    const auto& base = sc.array("base");
    require(base.size() == b.system.n, sc.key("base"), "need one rate per material");
    for (std::size_t i = 0; i < base.size(); ++i) {
      const auto key = sc.key("base") + "[" + std::to_string(i) + "]";
      require(base[i].is_number() && base[i].get<double>() >= 0.0, key, "expected a rate >= 0");
      script.base.push_back(base[i].get<double>());
    }
    if (sc.has("pulses")) {
      for (std::size_t k = 0; k < sc.array("pulses").size(); ++k) {
        const auto p = sc.element("pulses", k);
        p.allow({"material", "start", "end", "rate"});
        ScriptedPulse pulse{p.count("material"), p.count("start"), p.count("end"), p.number("rate")};
        require(pulse.material < b.system.n, p.key("material"), "out of range");
        require(pulse.end > pulse.start, p.key("end"), "must be > start");
        require(pulse.rate >= 0.0, p.key("rate"), "must be >= 0");
        script.pulses.push_back(pulse);
      }
    }
    c.script = std::move(script);
  }

  if (s.has("materials")) {
    const auto& mats = s.array("materials");
    require(mats.size() == b.system.n, s.key("materials"), "need one entry per material");
    for (std::size_t i = 0; i < mats.size(); ++i) {
      const auto e = s.element("materials", i);
      e.allow({"mean_rate", "rate_dispersion", "regime_mean_duration"});
      RegimeParams rp;
      rp.mean_rate = e.number("mean_rate");
      rp.rate_dispersion = e.number("rate_dispersion", rp.rate_dispersion);
      rp.regime_mean_duration = e.number("regime_mean_duration", rp.regime_mean_duration);
      require(rp.mean_rate >= 0.0, e.key("mean_rate"), "must be >= 0");
      require(rp.rate_dispersion > 0.0, e.key("rate_dispersion"), "must be > 0");
      require(rp.regime_mean_duration >= 1.0, e.key("regime_mean_duration"), "must be >= 1");
      c.materials.push_back(rp);
    }
  } else if (!c.script) {
    throw ConfigError(s.key("materials"), "missing required key");
  }
}

inline void parse_plant(const Reader& root, ConfigBundle& b)
{
  if (!root.has("plant")) { return; }
  const auto s = root.child("plant");
  s.allow({"slip_prob", "pick_noise", "detector_miss_rate", "bbox_jitter_px"});
  auto& c = b.plant;
  c.slip_prob = s.number("slip_prob", 0.0);
  c.pick_noise = s.number("pick_noise", 0.0);
  c.detector_miss_rate = s.number("detector_miss_rate", 0.0);
  c.bbox_jitter_px = s.number("bbox_jitter_px", 0.0);
  require(c.slip_prob >= 0.0 && c.slip_prob <= 1.0, s.key("slip_prob"), "must be in [0,1]");
  require(c.pick_noise >= 0.0, s.key("pick_noise"), "must be >= 0");
  require(c.detector_miss_rate >= 0.0 && c.detector_miss_rate <= 1.0, s.key("detector_miss_rate"), "must be in [0,1]");
  require(c.bbox_jitter_px >= 0.0, s.key("bbox_jitter_px"), "must be >= 0");
}

inline void parse_sim(const Reader& root, ConfigBundle& b)
{
  if (root.has("sim")) {
    const auto s = root.child("sim");
    s.allow({"steps", "r_init", "p0_mass", "measurement"});
    auto& c = b.sim;
    c.steps = s.count("steps", c.steps);
    c.r_init = s.number("r_init", 0.5 * (b.system.r_min + b.system.r_max));
    c.p0_mass = s.number("p0_mass", c.p0_mass);
    const auto mode = s.text("measurement", "detections");
    require(mode == "detections" || mode == "exact", s.key("measurement"), "expected detections or exact");
    c.measurement = mode == "exact" ? MeasurementMode::exact : MeasurementMode::detections;
    require(c.steps >= 1, s.key("steps"), "must be >= 1");
    require(c.r_init >= b.system.r_min && c.r_init <= b.system.r_max, s.key("r_init"), "must be in [r_min, r_max]");
    require(c.p0_mass >= 0.0, s.key("p0_mass"), "must be >= 0");
  } else {
    b.sim.r_init = 0.5 * (b.system.r_min + b.system.r_max);
  }
}

}  // namespace detail

inline ConfigBundle parse_config(const Json& doc)
{
  const detail::Reader root(doc, "");
  root.allow({"system", "materials", "stations", "camera", "noise", "mpc", "infeed", "plant", "sim"});
  ConfigBundle b;
  detail::parse_system(root, b);
  detail::parse_camera(root, b);
  detail::parse_noise(root, b);
  detail::parse_mpc(root, b);
  detail::parse_infeed(root, b);
  detail::parse_plant(root, b);
  detail::parse_sim(root, b);
  b.hash = config_hash(doc);
  return b;
}

inline ConfigBundle parse_config(const std::string& text)
{
  Json doc;
  try {
    doc = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError("<document>", e.what());
  }
  return parse_config(doc);
}

inline ConfigBundle load_config(const std::string& path)
{
  std::ifstream in(path);
  if (!in) { throw ConfigError("<file>", "cannot open " + path); }
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

}  // namespace lcv
