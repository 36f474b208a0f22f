#pragma once

// Pipeline verbs: simulate -> analyze -> fit -> diffuse -> report.
//
// Run directory layout (all relative to --out):
//   series/<qubit>_<T>mK.csv      Gamma_1 series
//   spectra/<qubit>_<T>mK.csv     log-binned PSD with the fitted a/f + b
//   fits/<qubit>_<T>mK.json       spectral fit document
//   fits/parameters.json          mean/variance fit diagnostics
//   tables/variances.csv          mean and band variances per series
//   tables/table1.csv             fitted device parameters
//   diffusion/summary.csv         path averages and geometry ratio
//   diffusion/map_<geometry>.csv  per-injection-point fractions
//   report/...                    plot-ready files and manifest.json

#include <algorithm>
#include <atomic>
#include <exception>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "qubit/cli/config.hpp"
#include "qubit/cli/io.hpp"
#include "qubit/diffusion.hpp"
#include "qubit/estimate.hpp"
#include "qubit/spectra.hpp"
#include "qubit/synth.hpp"

namespace qubit::cli {

inline constexpr const char* kSpectrumSchema = "qubitnoise.spectrum";
inline constexpr const char* kVarianceSchema = "qubitnoise.variances";
inline constexpr const char* kTable1Schema = "qubitnoise.table1";
inline constexpr const char* kDiffusionSchema = "qubitnoise.diffusion_summary";
inline constexpr const char* kMapSchema = "qubitnoise.fraction_map";
inline constexpr const char* kFig1Schema = "qubitnoise.fig1b";
inline constexpr const char* kFig2Schema = "qubitnoise.fig2";
inline constexpr const char* kFig3Schema = "qubitnoise.fig3";
inline constexpr const char* kFailureSchema = "qubitnoise.failures";

struct RunContext {
  RunConfig cfg;
  fs::path out;
  int parallel = 1;
  std::ostream* log = &std::cerr;
};

// ---------------------------------------------------------------------------
// Helpers
// ---------------------------------------------------------------------------

inline int exit_code_for(const std::exception_ptr& e) {
  try {
    std::rethrow_exception(e);
  } catch (const ValidationError&) {
    return kExitValidation;
  } catch (const NumericalError&) {
    return kExitNumerical;
  } catch (const IoError&) {
    return kExitIo;
  } catch (const fs::filesystem_error&) {
    return kExitIo;
  } catch (const nlohmann::json::exception&) {
    return kExitValidation;
  } catch (...) {
    return kExitNumerical;
  }
}

inline std::string message_of(const std::exception_ptr& e) {
  try {
    std::rethrow_exception(e);
  } catch (const std::exception& x) {
    return x.what();
  } catch (...) {
    return "unknown error";
  }
}

/// Runs task(i) for i in [0, n) on up to `k` threads; returns one
/// exception_ptr per task (null on success).
inline std::vector<std::exception_ptr> run_tasks(size_t n, int k,
                                                 const std::function<void(size_t)>& task) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<size_t> next{0};
  auto worker = [&] {
    for (size_t i; (i = next++) < n;) {
      try {
        task(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const size_t threads = std::min(static_cast<size_t>(std::max(k, 1)), n);
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  return errors;
}

inline std::string series_stem(const std::string& qubit, double t_mk) {
  return qubit + "_" + mk_label(t_mk) + "mK";
}

inline fs::path series_path(const RunContext& c, const std::string& q, double t_mk) {
  return c.out / "series" / (series_stem(q, t_mk) + ".csv");
}

inline std::vector<fs::path> list_files(const fs::path& dir, const std::string& ext) {
  std::vector<fs::path> out;
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) return out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ext) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline std::string relative_name(const RunContext& c, const fs::path& p) {
  return fs::relative(p, c.out).generic_string();
}

inline void require_hash(const CsvDocument& d, const RunConfig& cfg) {
  const auto h = d.get("config_hash");
  if (h != cfg.hash) {
    throw ValidationError(d.source + ": config_hash " + h.substr(0, 12) +
                          "... does not match the current config " + cfg.hash.substr(0, 12) +
                          "... (mixed runs)");
  }
}

inline json read_json(const fs::path& p) {
  try {
    return json::parse(read_text(p));
  } catch (const json::parse_error& e) {
    throw ValidationError(p.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

struct SimulateResult {
  std::vector<fs::path> files;
};

inline TLSEnsemble qubit_tls_ensemble(const RunConfig& cfg, size_t qubit_index) {
  // Same defects at every temperature: one ensemble per qubit.
  return make_tlf_ensemble(cfg.tls.ensemble, derive_seed(cfg.seed, 1000000 + qubit_index));
}

inline Gamma1Series simulate_one(const RunConfig& cfg, size_t qi, size_t ti) {
  const auto& q = cfg.qubits[qi];
  if (!q.truth_qp || !q.truth_gamma_tls) {
    throw ValidationError("simulate: qubit " + q.id + " has no 'truth' block to generate from");
  }
  const double t = units::mk_to_k(cfg.temperatures_mk[ti]);
  const uint64_t task = qi * cfg.temperatures_mk.size() + ti;
  const uint64_t seed = derive_seed(cfg.seed, task);
  const auto tls = calibrate_tls_model(qubit_tls_ensemble(cfg, qi), t, *q.truth_gamma_tls,
                                       cfg.tls.fluctuating_fraction);
  QPNoiseModel qp = cfg.qp_template;
  qp.params = *q.truth_qp;
  ExperimentOptions opt;
  opt.truth_band = cfg.analysis.fit_band;
  opt.truth_bins_per_decade = cfg.analysis.bins_per_decade;
  auto s = simulate_experiment(q.params, tls, qp, cfg.measurement, t, seed, opt);
  s.qubit_id = q.id;
  s.provenance["seed"] = std::to_string(seed);
  s.provenance["master_seed"] = std::to_string(cfg.seed);
  s.provenance["task_index"] = std::to_string(task);
  s.provenance["provenance"] = "synthetic";
  return s;
}

inline SimulateResult cmd_simulate(const RunContext& c) {
  const auto& cfg = c.cfg;
  const size_t nt = cfg.temperatures_mk.size();
  const size_t n = cfg.qubits.size() * nt;
  SimulateResult res;
  res.files.resize(n);
  auto errors = run_tasks(n, c.parallel, [&](size_t i) {
    const size_t qi = i / nt, ti = i % nt;
    const auto s = simulate_one(cfg, qi, ti);
    const auto p = series_path(c, cfg.qubits[qi].id, cfg.temperatures_mk[ti]);
    write_series(p, s, cfg.hash);
    res.files[i] = p;
  });
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  *c.log << "simulate: wrote " << n << " series to " << (c.out / "series").string() << "\n";
  return res;
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

struct AnalyzeRow {
  std::string qubit;
  double t_mk = 0.0;
  double mean = 0.0;  // s^-1
  AnalysisResult result;
  std::optional<SpectralTruth> truth;
  std::string source;
};

struct AnalyzeFailure {
  std::string file;
  int code = 0;
  std::string message;
};

struct AnalyzeResult {
  std::vector<AnalyzeRow> rows;
  std::vector<AnalyzeFailure> failures;
  int exit_code = kExitOk;
};

inline AnalysisOptions analysis_options(const RunConfig& cfg) {
  AnalysisOptions o;
  o.spectrum = cfg.analysis.spectrum;
  o.bins_per_decade = cfg.analysis.bins_per_decade;
  o.band = cfg.analysis.fit_band;
  o.variance_band = cfg.analysis.variance_band;
  o.fit.periodogram_bias_correction = cfg.analysis.bias_correction;
  return o;
}

inline CsvDocument spectrum_document(const RunConfig& cfg, const AnalyzeRow& r) {
  auto d = new_document(kSpectrumSchema, cfg.hash);
  d.set("qubit", r.qubit);
  d.set("temperature_mk", fmt_short(r.t_mk));
  d.set("source", r.source);
  d.set("fit_band_hz", fmt_short(r.result.band_min) + ";" + fmt_short(r.result.band_max));
  d.set("a_per_s2", fmt(r.result.fit.a));
  d.set("b_per_s2_per_hz", fmt(r.result.fit.b));
  d.columns = {"freq_hz", "psd_per_s2_per_hz", "count", "model_per_s2_per_hz", "in_fit_band"};
  const auto all = log_bin(r.result.raw, cfg.analysis.bins_per_decade);
  for (size_t i = 0; i < all.size(); ++i) {
    const double f = all.freqs[i];
    const bool in = f >= r.result.band_min * (1 - 1e-12) && f <= r.result.band_max * (1 + 1e-12);
    d.rows.push_back({fmt(f), fmt(all.psd[i]), std::to_string(all.counts[i]),
                      fmt(r.result.fit.model(f)), in ? "1" : "0"});
  }
  return d;
}

inline json fit_document(const RunConfig& cfg, const AnalyzeRow& r) {
  const auto& f = r.result.fit;
  json j;
  j["schema"] = "qubitnoise.spectral_fit";
  j["version"] = kFormatVersion;
  j["config_hash"] = cfg.hash;
  j["qubit"] = r.qubit;
  j["temperature_mk"] = r.t_mk;
  j["source"] = r.source;
  j["estimator"] = r.result.raw.estimator;
  j["samples"] = r.result.raw.record_length;
  j["fit"] = {{"a_per_s2", f.a},         {"b_per_s2_per_hz", f.b},   {"a_se", f.a_se},
              {"b_se", f.b_se},          {"f_min_hz", f.f_min},      {"f_max_hz", f.f_max},
              {"points", f.points},      {"scale", f.scale},
              {"residual_norm", f.residual_norm}, {"iterations", f.iterations},
              {"converged", f.converged}};
  j["band_hz"] = {r.result.band_min, r.result.band_max};
  j["variance_band_hz"] = {r.result.variance_min, r.result.variance_max};
  j["sigma2_tls_per_us2"] = units::per_s2_to_per_us2(r.result.variances.sigma2_tls);
  j["sigma2_qp_per_us2"] = units::per_s2_to_per_us2(r.result.variances.sigma2_qp);
  j["mean_per_us"] = units::per_s_to_per_us(r.mean);
  j["bins_per_decade"] = cfg.analysis.bins_per_decade;
  j["clipped_ordinates"] = r.result.raw.clipped;
  if (r.truth) j["truth"] = {{"a_per_s2", r.truth->a}, {"b_per_s2_per_hz", r.truth->b}};
  return j;
}

inline AnalyzeRow analyze_file(const RunConfig& cfg, const fs::path& p, const std::string& rel) {
  const auto s = read_series(p);
  auto h = s.provenance.find("config_hash");
  if (h != s.provenance.end() && h->second != cfg.hash) {
    throw ValidationError(p.string() + ": series was generated under a different config (hash " +
                          h->second.substr(0, 12) + "...)");
  }
  AnalyzeRow r;
  r.qubit = s.qubit_id;
  r.t_mk = units::k_to_mk(s.temperature);
  double sum = 0.0;
  for (double v : s.samples) sum += v;
  r.mean = sum / static_cast<double>(s.samples.size());
  r.source = rel;
  r.truth = s.truth;
  try {
    r.result = analyze_series(s, analysis_options(cfg));
  } catch (const ValidationError& e) {
    throw ValidationError(p.string() + ": " + e.what());
  } catch (const NumericalError& e) {
    throw NumericalError(p.string() + ": " + e.what());
  }
  return r;
}

inline CsvDocument variance_table(const RunConfig& cfg, const std::vector<AnalyzeRow>& rows) {
  auto d = new_document(kVarianceSchema, cfg.hash);
  d.columns = {"qubit", "temperature_mk", "mean_per_us", "sigma2_tls_per_us2", "sigma2_qp_per_us2",
               "a_per_s2", "b_per_s2_per_hz", "a_se", "b_se", "fit_band_min_hz", "fit_band_max_hz",
               "var_band_min_hz", "var_band_max_hz", "truth_a_per_s2", "truth_b_per_s2_per_hz",
               "source"};
  for (const auto& r : rows) {
    const auto& f = r.result.fit;
    d.rows.push_back({r.qubit, fmt_short(r.t_mk), fmt(units::per_s_to_per_us(r.mean)),
                      fmt(units::per_s2_to_per_us2(r.result.variances.sigma2_tls)),
                      fmt(units::per_s2_to_per_us2(r.result.variances.sigma2_qp)), fmt(f.a), fmt(f.b),
                      fmt(f.a_se), fmt(f.b_se), fmt(r.result.band_min), fmt(r.result.band_max),
                      fmt(r.result.variance_min), fmt(r.result.variance_max),
                      r.truth ? fmt(r.truth->a) : "", r.truth ? fmt(r.truth->b) : "", r.source});
  }
  return d;
}

/// Analyzes the given series files (default: every file in series/). A bad
/// file is reported and skipped; the rest still run.
inline AnalyzeResult cmd_analyze(const RunContext& c, std::vector<fs::path> files = {}) {
  const auto& cfg = c.cfg;
  if (files.empty()) files = list_files(c.out / "series", ".csv");
  if (files.empty()) throw IoError("analyze: no series files in " + (c.out / "series").string());
  std::vector<std::optional<AnalyzeRow>> slots(files.size());
  auto errors = run_tasks(files.size(), c.parallel, [&](size_t i) {
    std::error_code ec;
    auto rel = fs::relative(files[i], c.out, ec).generic_string();
    if (ec || rel.empty() || rel.rfind("..", 0) == 0) rel = files[i].generic_string();
    auto r = analyze_file(cfg, files[i], rel);
    const auto stem = series_stem(r.qubit, r.t_mk);
    write_csv(c.out / "spectra" / (stem + ".csv"), spectrum_document(cfg, r));
    write_json(c.out / "fits" / (stem + ".json"), fit_document(cfg, r));
    slots[i] = std::move(r);
  });

  AnalyzeResult res;
  for (size_t i = 0; i < files.size(); ++i) {
    if (errors[i]) {
      const int code = exit_code_for(errors[i]);
      res.failures.push_back({files[i].string(), code, message_of(errors[i])});
      if (res.exit_code == kExitOk) res.exit_code = code;
      *c.log << "analyze: FAILED " << files[i].string() << ": " << message_of(errors[i]) << "\n";
    } else {
      res.rows.push_back(std::move(*slots[i]));
    }
  }
  // Config qubit order, then temperature.
  auto rank = [&](const std::string& id) {
    for (size_t k = 0; k < cfg.qubits.size(); ++k) {
      if (cfg.qubits[k].id == id) return k;
    }
    return cfg.qubits.size();
  };
  std::stable_sort(res.rows.begin(), res.rows.end(), [&](const auto& a, const auto& b) {
    if (rank(a.qubit) != rank(b.qubit)) return rank(a.qubit) < rank(b.qubit);
    if (a.qubit != b.qubit) return a.qubit < b.qubit;
    return a.t_mk < b.t_mk;
  });
  for (size_t i = 1; i < res.rows.size(); ++i) {
    if (res.rows[i].qubit == res.rows[i - 1].qubit && res.rows[i].t_mk == res.rows[i - 1].t_mk) {
      throw ValidationError("analyze: two series for qubit " + res.rows[i].qubit + " at " +
                            fmt_short(res.rows[i].t_mk) + " mK");
    }
  }
  write_csv(c.out / "tables" / "variances.csv", variance_table(cfg, res.rows));
  const auto fail_path = c.out / "tables" / "analyze_failures.csv";
  if (!res.failures.empty()) {
    auto d = new_document(kFailureSchema, cfg.hash);
    d.columns = {"file", "exit_code", "message"};
    for (const auto& f : res.failures) {
      std::string msg = f.message;
      std::replace(msg.begin(), msg.end(), ',', ';');
      std::replace(msg.begin(), msg.end(), '\n', ' ');
      d.rows.push_back({f.file, std::to_string(f.code), msg});
    }
    write_csv(fail_path, d);
  } else {
    std::error_code ec;
    fs::remove(fail_path, ec);
  }
  *c.log << "analyze: " << res.rows.size() << " series analyzed, " << res.failures.size()
         << " failed\n";
  return res;
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

struct VarianceRow {
  std::string qubit;
  double t_mk = 0.0;
  double mean_per_us = 0.0;
  double sigma2_tls = 0.0;  // us^-2
  double sigma2_qp = 0.0;   // us^-2
};

inline std::vector<VarianceRow> read_variance_table(const fs::path& p, const RunConfig& cfg) {
  const auto d = read_csv(p);
  check_schema(d, kVarianceSchema);
  require_hash(d, cfg);
  const size_t cq = d.column("qubit"), ct = d.column("temperature_mk"), cm = d.column("mean_per_us");
  const size_t ctls = d.column("sigma2_tls_per_us2"), cqp = d.column("sigma2_qp_per_us2");
  std::vector<VarianceRow> rows;
  for (size_t i = 0; i < d.rows.size(); ++i) {
    rows.push_back({d.rows[i][cq], cell(d, i, ct), cell(d, i, cm), cell(d, i, ctls), cell(d, i, cqp)});
  }
  return rows;
}

struct FitOutcome {
  MeanFitResult mean;
  std::map<std::string, VarianceFitResult> variance;
  std::map<std::string, std::vector<double>> dropped_variance_t_mk;  // sigma2_qp <= 0
};

inline json fit_result_json(const FitResult& r, const std::vector<std::string>& names, const Vec& lo,
                            const Vec& hi, const Vec& init) {
  json j;
  j["converged"] = r.converged;
  j["stop_reason"] = r.stop_reason;
  j["iterations"] = r.iterations;
  j["evaluations"] = r.evaluations;
  j["residual_norm"] = r.residual_norm;
  j["cost"] = r.cost;
  json ps = json::array();
  for (Eigen::Index i = 0; i < r.params.size(); ++i) {
    ps.push_back({{"name", names[static_cast<size_t>(i)]},
                  {"initial", init[i]},
                  {"value", r.params[i]},
                  {"standard_error", r.standard_errors[i]},
                  {"lower", lo[i]},
                  {"upper", hi[i]},
                  {"at_bound", static_cast<bool>(r.at_bound[static_cast<size_t>(i)])}});
  }
  j["parameters"] = ps;
  return j;
}

inline FitOutcome run_fits(const RunConfig& cfg, const std::vector<VarianceRow>& rows) {
  FitOutcome out;
  std::vector<MeanDataset> data;
  for (const auto& q : cfg.qubits) {
    MeanDataset d;
    d.qubit = q.id;
    d.q = q.params;
    for (const auto& r : rows) {
      if (r.qubit != q.id) continue;
      d.temperatures.push_back(units::mk_to_k(r.t_mk));
      d.means.push_back(units::per_us_to_per_s(r.mean_per_us));
    }
    if (d.means.empty()) throw ValidationError("fit: no analyzed rows for qubit " + q.id);
    data.push_back(std::move(d));
  }
  MeanFitOptions mo;
  mo.share_x0 = cfg.share_x0;
  mo.gap_units = cfg.fit.gap_units;
  mo.check_identifiability = cfg.fit.check_identifiability;
  mo.max_iterations = cfg.fit.max_iterations;
  out.mean = fit_mean_vs_temperature(data, mo);

  VarianceFitOptions vo;
  vo.max_iterations = cfg.fit.max_iterations;
  for (const auto& q : cfg.qubits) {
    const auto& m = out.mean.at(q.id);
    VarianceDataset d;
    d.qubit = q.id;
    d.q = q.params;
    for (const auto& r : rows) {
      if (r.qubit != q.id) continue;
      if (!(r.sigma2_qp > 0.0)) {
        out.dropped_variance_t_mk[q.id].push_back(r.t_mk);
        continue;
      }
      d.temperatures.push_back(units::mk_to_k(r.t_mk));
      d.sigma2_qp.push_back(units::per_us2_to_per_s2(r.sigma2_qp));
    }
    out.variance[q.id] = fit_variance_vs_temperature(d, m.x_qp0, m.delta, vo);
  }
  return out;
}

inline CsvDocument table1_document(const RunConfig& cfg, const FitOutcome& f) {
  auto d = new_document(kTable1Schema, cfg.hash);
  d.columns = {"qubit", "x_qp0", "delta_ghz", "v_eff0_um3", "v_eff_th_um3", "gamma_tls_per_us"};
  for (const auto& q : cfg.qubits) {
    const auto& m = f.mean.at(q.id);
    const auto& v = f.variance.at(q.id);
    d.rows.push_back({q.id, fmt(m.x_qp0), fmt(units::joule_to_ghz(m.delta)), fmt(v.v_eff0),
                      fmt(v.v_eff_th), fmt(units::per_s_to_per_us(m.gamma_tls))});
  }
  return d;
}

inline json parameters_document(const RunConfig& cfg, const FitOutcome& f) {
  json j;
  j["schema"] = "qubitnoise.fit_parameters";
  j["version"] = kFormatVersion;
  j["config_hash"] = cfg.hash;
  j["share_x0"] = cfg.share_x0;
  j["gap_units"] = cfg.fit.gap_units == GapUnits::kGhz ? "ghz" : "joule";
  j["loss"] = "log-residual";
  // Both fits box the log-parameters symmetrically about the start.
  const Vec mean_init = 0.5 * (f.mean.lower + f.mean.upper);
  j["mean_fit"] = fit_result_json(f.mean.raw, f.mean.names, f.mean.lower, f.mean.upper, mean_init);
  json qs = json::object();
  for (const auto& m : f.mean.qubits) {
    const auto& v = f.variance.at(m.qubit);
    json q;
    q["gamma_tls_per_us"] = units::per_s_to_per_us(m.gamma_tls);
    q["gamma_tls_se_per_us"] = units::per_s_to_per_us(m.gamma_tls_se);
    q["x_qp0"] = m.x_qp0;
    q["x_qp0_se"] = m.x_qp0_se;
    q["delta_ghz"] = units::joule_to_ghz(m.delta);
    q["delta_se_ghz"] = units::joule_to_ghz(m.delta_se);
    q["share_group"] = m.share_group;
    q["init"] = {{"gamma_tls_per_us", units::per_s_to_per_us(m.init_gamma_tls)},
                 {"x_qp0", m.init_x_qp0},
                 {"delta_ghz", units::joule_to_ghz(m.init_delta)}};
    q["v_eff0_um3"] = v.v_eff0;
    q["v_eff0_se_um3"] = v.v_eff0_se;
    q["v_eff_th_um3"] = v.v_eff_th;
    q["v_eff_th_se_um3"] = v.v_eff_th_se;
    q["v_eff0_identifiable"] = v.v_eff0_identifiable;
    q["v_eff_th_identifiable"] = v.v_eff_th_identifiable;
    q["init_volume_um3"] = v.init_volume;
    const Vec vinit = 0.5 * (v.lower + v.upper);
    q["variance_fit"] = fit_result_json(v.raw, v.names, v.lower, v.upper, vinit);
    auto dropped = f.dropped_variance_t_mk.find(m.qubit);
    q["variance_points_dropped_mk"] =
        dropped == f.dropped_variance_t_mk.end() ? std::vector<double>{} : dropped->second;
    qs[m.qubit] = q;
  }
  j["qubits"] = qs;
  return j;
}

inline FitOutcome cmd_fit(const RunContext& c) {
  const auto rows = read_variance_table(c.out / "tables" / "variances.csv", c.cfg);
  auto f = run_fits(c.cfg, rows);
  write_csv(c.out / "tables" / "table1.csv", table1_document(c.cfg, f));
  write_json(c.out / "fits" / "parameters.json", parameters_document(c.cfg, f));
  for (const auto& [id, v] : f.variance) {
    if (!v.v_eff0_identifiable) *c.log << "fit: warning: V0 of " << id << " is poorly identified\n";
    if (!v.v_eff_th_identifiable) *c.log << "fit: warning: V_th of " << id << " is poorly identified\n";
  }
  *c.log << "fit: wrote " << (c.out / "tables" / "table1.csv").string() << "\n";
  return f;
}

// ---------------------------------------------------------------------------
// diffuse
// ---------------------------------------------------------------------------

struct DiffuseResult {
  std::map<std::string, double> averages;
  double ratio = 0.0;
};

inline DiffuseResult cmd_diffuse(const RunContext& c) {
  if (!c.cfg.diffusion) throw ValidationError("diffuse: config has no 'diffusion' section");
  const auto& dc = *c.cfg.diffusion;
  DiffusionOptions opt;
  opt.cells = dc.cells;
  opt.threads = c.parallel;
  DiffuseResult res;
  auto summary = new_document(kDiffusionSchema, c.cfg.hash);
  summary.set("d_um2_per_s", fmt(dc.d));
  summary.set("tau_s", fmt(dc.tau));
  summary.set("diffusion_length_um", fmt(std::sqrt(dc.d * dc.tau)));
  summary.set("t_max_s", dc.t_max > 0.0 ? fmt(dc.t_max) : "per-path 20*max(L^2/D;tau)");
  summary.set("cells", std::to_string(dc.cells));
  summary.columns = {"geometry", "width_um", "height_um", "gap_um", "points_x", "points_y",
                     "path_average"};
  for (const auto& g : dc.geometries) {
    const auto m = fraction_map(g, dc.d, dc.tau, dc.t_max, opt);
    res.averages[g.name] = m.mean;
    auto d = new_document(kMapSchema, c.cfg.hash);
    d.set("geometry", g.name);
    d.set("path_average", fmt(m.mean));
    d.columns = {"x_um", "y_um", "distance_um", "fraction"};
    for (size_t iy = 0; iy < m.ys.size(); ++iy) {
      for (size_t ix = 0; ix < m.xs.size(); ++ix) {
        const size_t k = iy * m.xs.size() + ix;
        d.rows.push_back({fmt(m.xs[ix]), fmt(m.ys[iy]), fmt(m.distance[k]), fmt(m.fraction[k])});
      }
    }
    write_csv(c.out / "diffusion" / ("map_" + g.name + ".csv"), d);
    summary.rows.push_back({g.name, fmt_short(g.width), fmt_short(g.height), fmt_short(g.gap),
                            std::to_string(g.points_x), std::to_string(g.points_y), fmt(m.mean)});
  }
  res.ratio = res.averages.at(dc.ratio_numerator) / res.averages.at(dc.ratio_denominator);
  summary.set("ratio_numerator", dc.ratio_numerator);
  summary.set("ratio_denominator", dc.ratio_denominator);
  summary.set("ratio", fmt(res.ratio));
  write_csv(c.out / "diffusion" / "summary.csv", summary);
  *c.log << "diffuse: " << dc.ratio_numerator << "/" << dc.ratio_denominator
         << " path-average ratio = " << fmt_short(res.ratio) << "\n";
  return res;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

inline json manifest_document(const RunContext& c) {
  json j;
  j["schema"] = "qubitnoise.manifest";
  j["version"] = kFormatVersion;
  j["tool"] = kToolVersion;
  j["config_hash"] = c.cfg.hash;
  j["seed"] = c.cfg.seed;
  j["temperatures_mk"] = c.cfg.temperatures_mk;
  json seeds = json::object();
  for (size_t qi = 0; qi < c.cfg.qubits.size(); ++qi) {
    json per = json::array();
    for (size_t ti = 0; ti < c.cfg.temperatures_mk.size(); ++ti) {
      per.push_back(derive_seed(c.cfg.seed, qi * c.cfg.temperatures_mk.size() + ti));
    }
    seeds[c.cfg.qubits[qi].id] = per;
  }
  j["series_seeds"] = seeds;
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(c.out)) {
    if (!e.is_regular_file()) continue;
    if (e.path() == c.out / "report" / "manifest.json") continue;
    files.push_back(e.path());
  }
  std::sort(files.begin(), files.end(), [&](const auto& a, const auto& b) {
    return relative_name(c, a) < relative_name(c, b);
  });
  json arts = json::array();
  for (const auto& p : files) {
    const auto bytes = read_text(p);
    arts.push_back({{"path", relative_name(c, p)}, {"sha256", sha256_hex(bytes)}, {"bytes", bytes.size()}});
  }
  j["artifacts"] = arts;
  return j;
}

struct ReportResult {
  std::vector<fs::path> files;
};

inline ReportResult cmd_report(const RunContext& c) {
  const auto& cfg = c.cfg;
  const fs::path var_p = c.out / "tables" / "variances.csv";
  const fs::path t1_p = c.out / "tables" / "table1.csv";
  const fs::path par_p = c.out / "fits" / "parameters.json";
  const fs::path dif_p = c.out / "diffusion" / "summary.csv";
  std::vector<std::string> missing;
  for (const auto& p : {var_p, t1_p, par_p}) {
    if (!fs::exists(p)) missing.push_back(p.string());
  }
  if (cfg.diffusion && !fs::exists(dif_p)) missing.push_back(dif_p.string());
  const auto spectra = list_files(c.out / "spectra", ".csv");
  if (spectra.empty()) missing.push_back((c.out / "spectra" / "*.csv").string());
  if (!missing.empty()) {
    std::string m = "report: missing inputs:";
    for (const auto& s : missing) m += "\n  " + s;
    throw IoError(m);
  }

  // Every input must come from this config.
  std::vector<std::string> mixed;
  auto check = [&](const CsvDocument& d) {
    if (d.get("config_hash") != cfg.hash) mixed.push_back(d.source);
  };
  const auto var_d = read_csv(var_p);
  check_schema(var_d, kVarianceSchema);
  check(var_d);
  const auto t1_d = read_csv(t1_p);
  check_schema(t1_d, kTable1Schema);
  check(t1_d);
  const auto par = read_json(par_p);
  if (par.value("config_hash", "") != cfg.hash) mixed.push_back(par_p.string());
  std::vector<CsvDocument> spec_docs;
  for (const auto& p : spectra) {
    spec_docs.push_back(read_csv(p));
    check_schema(spec_docs.back(), kSpectrumSchema);
    check(spec_docs.back());
  }
  std::optional<CsvDocument> dif_d;
  if (cfg.diffusion) {
    dif_d = read_csv(dif_p);
    check_schema(*dif_d, kDiffusionSchema);
    check(*dif_d);
    for (const auto& g : cfg.diffusion->geometries) {
      const auto mp = c.out / "diffusion" / ("map_" + g.name + ".csv");
      if (!fs::exists(mp)) throw IoError("report: missing input " + mp.string());
      const auto md = read_csv(mp);
      check_schema(md, kMapSchema);
      check(md);
    }
  }
  if (!mixed.empty()) {
    std::string m = "report: inputs from a different config (mixed run):";
    for (const auto& s : mixed) m += "\n  " + s;
    throw ValidationError(m);
  }

  ReportResult res;
  const fs::path rep = c.out / "report";
  std::error_code ec;
  fs::remove_all(rep, ec);

  // Spectra with their fitted a/f + b.
  for (const auto& d : spec_docs) {
    auto o = new_document(kFig1Schema, cfg.hash);
    o.set("qubit", d.get("qubit"));
    o.set("temperature_mk", d.get("temperature_mk"));
    o.set("a_per_s2", d.get("a_per_s2"));
    o.set("b_per_s2_per_hz", d.get("b_per_s2_per_hz"));
    o.columns = {"freq_hz", "psd_per_s2_per_hz", "fit_per_s2_per_hz"};
    const size_t cf = d.column("freq_hz"), cp = d.column("psd_per_s2_per_hz"),
                 cm = d.column("model_per_s2_per_hz");
    for (const auto& row : d.rows) o.rows.push_back({row[cf], row[cp], row[cm]});
    const auto p = rep / "fig1b" / fs::path(d.source).filename();
    write_csv(p, o);
    res.files.push_back(p);
  }

  // Fitted parameters per qubit.
  std::map<std::string, QPModelParams> qp;
  std::map<std::string, double> gtls;
  {
    const size_t cq = t1_d.column("qubit"), cx = t1_d.column("x_qp0"), cd = t1_d.column("delta_ghz"),
                 c0 = t1_d.column("v_eff0_um3"), cth = t1_d.column("v_eff_th_um3"),
                 cg = t1_d.column("gamma_tls_per_us");
    for (size_t i = 0; i < t1_d.rows.size(); ++i) {
      qp[t1_d.rows[i][cq]] = {cell(t1_d, i, cx), units::ghz_to_joule(cell(t1_d, i, cd)),
                              cell(t1_d, i, c0), cell(t1_d, i, cth)};
      gtls[t1_d.rows[i][cq]] = units::per_us_to_per_s(cell(t1_d, i, cg));
    }
  }
  const size_t vq = var_d.column("qubit"), vt = var_d.column("temperature_mk"),
               vm = var_d.column("mean_per_us"), vtls = var_d.column("sigma2_tls_per_us2"),
               vqp = var_d.column("sigma2_qp_per_us2");
  for (const auto& q : cfg.qubits) {
    if (!qp.count(q.id)) throw ValidationError(t1_p.string() + ": no row for qubit " + q.id);
    const auto& p = qp[q.id];
    auto f2 = new_document(kFig2Schema, cfg.hash);
    f2.set("qubit", q.id);
    f2.columns = {"T_mK", "mean_per_us", "model_tls", "model_qp", "model_total"};
    auto f3 = new_document(kFig3Schema, cfg.hash);
    f3.set("qubit", q.id);
    f3.set("units", "per_us2");
    f3.columns = {"T_mK", "sigma2_qp", "sigma2_tls", "model"};
    for (size_t i = 0; i < var_d.rows.size(); ++i) {
      if (var_d.rows[i][vq] != q.id) continue;
      const double t_mk = cell(var_d, i, vt);
      const double t = units::mk_to_k(t_mk);
      const double m_qp = units::per_s_to_per_us(mean_gamma1_qp(t, q.params, p));
      const double m_tls = units::per_s_to_per_us(gtls[q.id]);
      f2.rows.push_back({fmt_short(t_mk), var_d.rows[i][vm], fmt(m_tls), fmt(m_qp), fmt(m_tls + m_qp)});
      f3.rows.push_back({fmt_short(t_mk), var_d.rows[i][vqp], var_d.rows[i][vtls],
                         fmt(units::per_s2_to_per_us2(sigma2_qp(t, q.params, p)))});
    }
    write_csv(rep / ("fig2_" + q.id + ".csv"), f2);
    write_csv(rep / ("fig3_" + q.id + ".csv"), f3);
    res.files.push_back(rep / ("fig2_" + q.id + ".csv"));
    res.files.push_back(rep / ("fig3_" + q.id + ".csv"));
  }
  write_text(rep / "table1.csv", read_text(t1_p));
  res.files.push_back(rep / "table1.csv");
  if (dif_d) {
    write_text(rep / "diffusion_summary.csv", read_text(dif_p));
    res.files.push_back(rep / "diffusion_summary.csv");
  }
  // Location-independent: the bundle of a rerun elsewhere is byte-identical.
  json eff = cfg.effective;
  eff.erase("output_dir");
  write_json(rep / "config.json", eff);
  res.files.push_back(rep / "config.json");
  write_json(rep / "manifest.json", manifest_document(c));
  res.files.push_back(rep / "manifest.json");
  *c.log << "report: wrote " << res.files.size() << " files to " << rep.string() << "\n";
  return res;
}

/// simulate -> analyze -> fit -> diffuse -> report. Analysis failures stop the
/// chain after the variance table is written.
inline int cmd_all(const RunContext& c) {
  cmd_simulate(c);
  const auto a = cmd_analyze(c);
  if (a.exit_code != kExitOk) return a.exit_code;
  cmd_fit(c);
  if (c.cfg.diffusion) cmd_diffuse(c);
  cmd_report(c);
  return kExitOk;
}

}  // namespace qubit::cli
