#pragma once

// Run configuration: one JSON document (comments allowed), units in key
// names. Unknown keys are rejected. The config hash is the SHA-256 of the
// canonical (sorted, comment-free) effective document minus output_dir, so
// it identifies the physics and numerics of a run, not where it was written.

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "qubit/cli/io.hpp"
#include "qubit/diffusion.hpp"
#include "qubit/errors.hpp"
#include "qubit/estimate.hpp"
#include "qubit/physkern.hpp"
#include "qubit/spectra.hpp"
#include "qubit/synth.hpp"
#include "qubit/units.hpp"

namespace qubit::cli {

using json = nlohmann::json;

struct QubitConfig {
  std::string id;
  QubitParams params;
  std::string geometry;
  // Generating values; required for simulate.
  std::optional<QPModelParams> truth_qp;
  std::optional<double> truth_gamma_tls;  // s^-1
};

struct TlsSimConfig {
  TLFEnsembleSpec ensemble;
  double fluctuating_fraction = 1.0;
};

struct AnalysisConfig {
  SpectrumOptions spectrum;
  int bins_per_decade = 8;
  std::optional<std::pair<double, double>> fit_band;       // Hz
  std::optional<std::pair<double, double>> variance_band;  // Hz
  bool bias_correction = true;
};

struct FitConfig {
  bool check_identifiability = true;
  GapUnits gap_units = GapUnits::kGhz;
  int max_iterations = 500;
};

struct DiffusionConfig {
  double d = 0.0;    // um^2/s
  double tau = 0.0;  // s
  double t_max = 0.0;  // s; 0 = per-path default
  int cells = 400;
  std::vector<PadGeometry> geometries;
  std::string ratio_numerator, ratio_denominator;

  const PadGeometry& geometry(const std::string& name) const {
    for (const auto& g : geometries) {
      if (g.name == name) return g;
    }
    throw ValidationError("config: unknown pad geometry '" + name + "'");
  }
};

struct RunConfig {
  uint64_t seed = 0;
  std::vector<double> temperatures_mk;
  std::vector<QubitConfig> qubits;
  std::vector<std::vector<std::string>> share_x0;
  TlsSimConfig tls;
  QPNoiseModel qp_template;  // tau_r and mode; params per qubit
  MeasurementConfig measurement;
  AnalysisConfig analysis;
  FitConfig fit;
  std::optional<DiffusionConfig> diffusion;
  std::string output_dir = "run";

  json effective;  // canonical document the hash is taken over
  std::string hash;

  const QubitConfig& qubit(const std::string& id) const {
    for (const auto& q : qubits) {
      if (q.id == id) return q;
    }
    throw ValidationError("config: unknown qubit '" + id + "'");
  }
};

namespace detail {

class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ValidationError("config: " + path_ + " must be an object");
  }

  bool has(const std::string& k) const { return j_.contains(k) && !j_.at(k).is_null(); }
  void mark(const std::string& k) { seen_.insert(k); }

  const json& at(const std::string& k) {
    seen_.insert(k);
    if (!j_.contains(k)) throw ValidationError("config: missing key " + where(k));
    return j_.at(k);
  }

  double number(const std::string& k) {
    const auto& v = at(k);
    if (!v.is_number()) throw ValidationError("config: " + where(k) + " must be a number");
    return v.get<double>();
  }
  double number(const std::string& k, double def) {
    seen_.insert(k);
    return has(k) ? number(k) : def;
  }
  double positive(const std::string& k) {
    const double v = number(k);
    if (!(v > 0.0)) throw ValidationError("config: " + where(k) + " must be positive");
    return v;
  }
  double positive(const std::string& k, double def) {
    seen_.insert(k);
    return has(k) ? positive(k) : def;
  }
  int integer(const std::string& k, int def) {
    seen_.insert(k);
    if (!has(k)) return def;
    const auto& v = j_.at(k);
    if (!v.is_number_integer()) throw ValidationError("config: " + where(k) + " must be an integer");
    return v.get<int>();
  }
  bool boolean(const std::string& k, bool def) {
    seen_.insert(k);
    if (!has(k)) return def;
    const auto& v = j_.at(k);
    if (!v.is_boolean()) throw ValidationError("config: " + where(k) + " must be true/false");
    return v.get<bool>();
  }
  std::string string(const std::string& k) {
    const auto& v = at(k);
    if (!v.is_string()) throw ValidationError("config: " + where(k) + " must be a string");
    return v.get<std::string>();
  }
  std::string string(const std::string& k, const std::string& def) {
    seen_.insert(k);
    return has(k) ? string(k) : def;
  }
  std::optional<std::pair<double, double>> band(const std::string& k) {
    seen_.insert(k);
    if (!has(k)) return std::nullopt;
    const auto& v = j_.at(k);
    if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number()) {
      throw ValidationError("config: " + where(k) + " must be [f_min, f_max]");
    }
    const double lo = v[0].get<double>(), hi = v[1].get<double>();
    if (!(lo > 0.0) || !(hi > lo)) throw ValidationError("config: " + where(k) + " needs 0 < f_min < f_max");
    return std::pair{lo, hi};
  }
  ObjectReader child(const std::string& k) { return ObjectReader(at(k), where(k)); }

  std::string where(const std::string& k) const { return path_ + "." + k; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ValidationError("config: unknown key " + where(it.key()));
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline QPMode parse_qp_mode(const std::string& s) {
  if (s == "exact") return QPMode::kExactSkeleton;
  if (s == "gillespie") return QPMode::kGillespie;
  if (s == "stationary") return QPMode::kStationary;
  throw ValidationError("config: simulation.qp.mode must be exact|gillespie|stationary, got '" + s + "'");
}

inline Estimator parse_estimator(const std::string& s) {
  if (s == "autocorrelation") return Estimator::kAutocorrelation;
  if (s == "welch") return Estimator::kWelch;
  if (s == "lomb_scargle") return Estimator::kLombScargle;
  throw ValidationError("config: analysis.estimator must be autocorrelation|welch|lomb_scargle");
}

inline PadGeometry parse_geometry(ObjectReader r) {
  PadGeometry g;
  g.name = r.string("name");
  g.width = r.positive("width_um");
  g.height = r.positive("height_um");
  g.gap = r.number("gap_um");
  g.junction_x = r.number("junction_x_um", 0.0);
  g.junction_y = r.number("junction_y_um", 0.0);
  g.points_x = r.integer("points_x", 50);
  g.points_y = r.integer("points_y", 50);
  r.finish();
  validate(g);
  return g;
}

inline QubitConfig parse_qubit(ObjectReader r) {
  QubitConfig q;
  q.id = r.string("id");
  if (q.id.empty() || q.id.find_first_of(",/\\ \t") != std::string::npos) {
    throw ValidationError("config: qubit id '" + q.id + "' must be non-empty without separators");
  }
  const double delta_ghz = r.positive("delta_ghz");
  q.params = QubitParams::from_ghz(r.positive("ej_ghz"), r.positive("ec_ghz"), r.positive("fq_ghz"),
                                   delta_ghz, r.positive("junction_volume_um3"));
  q.geometry = r.string("pad_geometry", "");
  q.params.pad_geometry = q.geometry;
  if (r.has("truth")) {
    auto t = r.child("truth");
    QPModelParams p;
    p.x_qp0 = t.positive("x_qp0");
    p.delta = units::ghz_to_joule(t.positive("delta_ghz", delta_ghz));
    p.v_eff0 = t.positive("v_eff0_um3");
    p.v_eff_th = t.positive("v_eff_th_um3");
    q.truth_qp = p;
    q.truth_gamma_tls = units::per_us_to_per_s(t.positive("gamma_tls_per_us"));
    t.finish();
  } else {
    r.mark("truth");
  }
  r.finish();
  try {
    validate(q.params);
  } catch (const ValidationError& e) {
    throw ValidationError("config: qubit " + q.id + ": " + e.what());
  }
  return q;
}

}  // namespace detail

struct ConfigOverrides {
  std::optional<uint64_t> seed;
  std::optional<std::pair<double, double>> band;  // Hz, fit and variance band
  std::optional<std::string> output_dir;
};

inline RunConfig parse_config(const json& doc_in, const ConfigOverrides& ov = {}) {
  json doc = doc_in;
  if (ov.seed) doc["seed"] = *ov.seed;
  if (ov.band) {
    if (!doc.contains("analysis") || doc["analysis"].is_null()) doc["analysis"] = json::object();
    doc["analysis"]["fit_band_hz"] = {ov.band->first, ov.band->second};
    doc["analysis"]["variance_band_hz"] = {ov.band->first, ov.band->second};
  }
  if (ov.output_dir) doc["output_dir"] = *ov.output_dir;

  RunConfig c;
  detail::ObjectReader r(doc, "$");
  const int schema = r.integer("schema_version", 1);
  if (schema != 1) throw ValidationError("config: unsupported schema_version " + std::to_string(schema));
  {
    const auto& s = r.at("seed");
    if (!s.is_number_unsigned() && !(s.is_number_integer() && s.get<int64_t>() >= 0)) {
      throw ValidationError("config: $.seed must be a non-negative integer");
    }
    c.seed = s.get<uint64_t>();
  }
  {
    const auto& t = r.at("temperatures_mk");
    if (!t.is_array() || t.empty()) throw ValidationError("config: $.temperatures_mk must be a non-empty list");
    std::set<double> seen;
    for (const auto& v : t) {
      if (!v.is_number() || !(v.get<double>() > 0.0)) {
        throw ValidationError("config: temperatures must be positive numbers (mK)");
      }
      if (!seen.insert(v.get<double>()).second) throw ValidationError("config: duplicate temperature");
      c.temperatures_mk.push_back(v.get<double>());
    }
  }
  {
    const auto& qs = r.at("qubits");
    if (!qs.is_array() || qs.empty()) throw ValidationError("config: $.qubits must be a non-empty list");
    std::set<std::string> ids;
    for (size_t i = 0; i < qs.size(); ++i) {
      auto q = detail::parse_qubit(detail::ObjectReader(qs[i], "$.qubits[" + std::to_string(i) + "]"));
      if (!ids.insert(q.id).second) throw ValidationError("config: duplicate qubit id " + q.id);
      c.qubits.push_back(std::move(q));
    }
  }
  if (r.has("share_x0")) {
    const auto& groups = r.at("share_x0");
    if (!groups.is_array()) throw ValidationError("config: $.share_x0 must be a list of lists");
    for (const auto& g : groups) {
      if (!g.is_array() || g.size() < 2) throw ValidationError("config: share groups need >= 2 qubit ids");
      std::vector<std::string> ids;
      for (const auto& id : g) {
        if (!id.is_string()) throw ValidationError("config: share group entries must be qubit ids");
        c.qubit(id.get<std::string>());
        ids.push_back(id.get<std::string>());
      }
      c.share_x0.push_back(ids);
    }
  } else {
    r.mark("share_x0");
  }

  if (r.has("simulation")) {
    auto s = r.child("simulation");
    if (s.has("tls")) {
      auto t = s.child("tls");
      auto& e = c.tls.ensemble;
      e.tls_count = static_cast<size_t>(t.integer("tls_count", 24));
      e.tlfs_per_tls = static_cast<size_t>(t.integer("tlfs_per_tls", 1));
      e.rate_min = t.positive("rate_min_per_s", 3.98e-6);
      e.rate_max = t.positive("rate_max_per_s", 3.98e-2);
      e.gamma2 = units::mhz_to_rad_s(t.positive("gamma2_mhz", 1.0));
      e.g = units::mhz_to_rad_s(t.positive("g_mhz", 10.0));
      e.omega_t = units::mhz_to_rad_s(t.positive("omega_t_mhz", 1.0));
      e.omega_delta = units::mhz_to_rad_s(t.number("omega_delta_mhz", 0.0));
      e.stratified = t.boolean("stratified", true);
      c.tls.fluctuating_fraction = t.number("fluctuating_fraction", 1.0);
      t.finish();
      if (e.tls_count < 1 || e.tlfs_per_tls < 1 || e.tlfs_per_tls > 20) {
        throw ValidationError("config: simulation.tls needs tls_count >= 1 and 1..20 TLFs per TLS");
      }
      if (!(c.tls.fluctuating_fraction >= 0.0 && c.tls.fluctuating_fraction <= 1.0)) {
        throw ValidationError("config: simulation.tls.fluctuating_fraction must lie in [0, 1]");
      }
    }
    if (s.has("qp")) {
      auto q = s.child("qp");
      c.qp_template.tau_r = q.positive("tau_r_s", 1e-3);
      c.qp_template.mode = detail::parse_qp_mode(q.string("mode", "exact"));
      q.finish();
    }
    if (s.has("measurement")) {
      auto m = s.child("measurement");
      auto& mc = c.measurement;
      mc.duration = m.positive("duration_h", 72.0) * 3600.0;
      mc.cadence = m.positive("cadence_s", 480.0);
      mc.cadence_jitter = m.number("cadence_jitter_s", 0.0);
      mc.decay_points = m.integer("decay_points", 50);
      mc.decay_span_t1 = m.positive("decay_span_t1", 3.0);
      mc.readout_noise_std = m.number("readout_noise_std", 0.02);
      mc.shot_count = m.integer("shot_count", 0);
      m.finish();
      validate(mc);
    }
    s.finish();
  } else {
    r.mark("simulation");
  }

  if (r.has("analysis")) {
    auto a = r.child("analysis");
    c.analysis.spectrum.estimator = detail::parse_estimator(a.string("estimator", "autocorrelation"));
    const int lag = a.integer("max_lag", 0);
    const int seg = a.integer("welch_segment", 0);
    if (lag < 0 || seg < 0) throw ValidationError("config: analysis.max_lag/welch_segment must be >= 0");
    c.analysis.spectrum.max_lag = static_cast<size_t>(lag);
    c.analysis.spectrum.welch_segment = static_cast<size_t>(seg);
    c.analysis.bins_per_decade = a.integer("bins_per_decade", 8);
    if (c.analysis.bins_per_decade < 1) throw ValidationError("config: analysis.bins_per_decade must be >= 1");
    c.analysis.fit_band = a.band("fit_band_hz");
    c.analysis.variance_band = a.band("variance_band_hz");
    c.analysis.bias_correction = a.boolean("bias_correction", true);
    a.finish();
  } else {
    r.mark("analysis");
  }

  if (r.has("fit")) {
    auto f = r.child("fit");
    c.fit.check_identifiability = f.boolean("check_identifiability", true);
    const auto units = f.string("gap_units", "ghz");
    if (units == "ghz") {
      c.fit.gap_units = GapUnits::kGhz;
    } else if (units == "joule") {
      c.fit.gap_units = GapUnits::kJoule;
    } else {
      throw ValidationError("config: fit.gap_units must be ghz|joule");
    }
    c.fit.max_iterations = f.integer("max_iterations", 500);
    f.finish();
  } else {
    r.mark("fit");
  }

  if (r.has("diffusion")) {
    auto d = r.child("diffusion");
    DiffusionConfig dc;
    dc.d = d.positive("d_um2_per_s");
    dc.tau = d.positive("tau_s");
    dc.t_max = d.number("t_max_s", 0.0);
    dc.cells = d.integer("cells", 400);
    if (dc.cells < 4) throw ValidationError("config: diffusion.cells must be >= 4");
    const auto& gs = d.at("geometries");
    if (!gs.is_array() || gs.empty()) throw ValidationError("config: diffusion.geometries must be a list");
    std::set<std::string> names;
    for (size_t i = 0; i < gs.size(); ++i) {
      auto g = detail::parse_geometry(
          detail::ObjectReader(gs[i], "$.diffusion.geometries[" + std::to_string(i) + "]"));
      if (!names.insert(g.name).second) throw ValidationError("config: duplicate geometry " + g.name);
      dc.geometries.push_back(g);
    }
    const auto& ratio = d.at("ratio");
    if (!ratio.is_array() || ratio.size() != 2 || !ratio[0].is_string() || !ratio[1].is_string()) {
      throw ValidationError("config: diffusion.ratio must be [numerator, denominator] geometry names");
    }
    dc.ratio_numerator = ratio[0].get<std::string>();
    dc.ratio_denominator = ratio[1].get<std::string>();
    dc.geometry(dc.ratio_numerator);
    dc.geometry(dc.ratio_denominator);
    d.finish();
    c.diffusion = dc;
  } else {
    r.mark("diffusion");
  }
  for (const auto& q : c.qubits) {
    if (!q.geometry.empty() && c.diffusion) c.diffusion->geometry(q.geometry);
  }
  c.output_dir = r.string("output_dir", "run");
  r.finish();

  c.effective = doc;
  json hashed = doc;
  hashed.erase("output_dir");
  c.hash = sha256_hex(hashed.dump());
  return c;
}

inline RunConfig load_config(const fs::path& p, const ConfigOverrides& ov = {}) {
  const auto text = read_text(p);
  json doc;
  try {
    doc = json::parse(text, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ValidationError(p.string() + ": " + e.what());
  }
  try {
    return parse_config(doc, ov);
  } catch (const ValidationError& e) {
    throw ValidationError(p.string() + ": " + e.what());
  }
}

}  // namespace qubit::cli
