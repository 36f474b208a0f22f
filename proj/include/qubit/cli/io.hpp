#pragma once

// File formats for the command-line pipeline. Every CSV starts with
// "# key=value" metadata lines (schema, version, config_hash, ...), then a
// column header and rows. Readers accept any 1.x version of their schema.

#include <openssl/evp.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "qubit/errors.hpp"
#include "qubit/spectra.hpp"
#include "qubit/units.hpp"

namespace qubit::cli {

namespace fs = std::filesystem;

inline constexpr const char* kFormatVersion = "1.0";
inline constexpr int kFormatMajor = 1;
inline constexpr const char* kToolVersion = "qubitcli 1.0.0";

// Full precision for data that is read back; shorter for derived tables.
inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string fmt_short(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

// Temperatures label files; whole millikelvin normally.
inline std::string mk_label(double t_mk) {
  char buf[40];
  if (std::abs(t_mk - std::round(t_mk)) < 1e-9) {
    std::snprintf(buf, sizeof buf, "%03.0f", t_mk);
  } else {
    std::snprintf(buf, sizeof buf, "%07.3f", t_mk);
  }
  return buf;
}

// ---------------------------------------------------------------------------
// Plain files
// ---------------------------------------------------------------------------

inline std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const fs::path& p, const std::string& text) {
  std::error_code ec;
  if (p.has_parent_path()) fs::create_directories(p.parent_path(), ec);
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
  if (!out) throw IoError("write failed: " + p.string());
}

inline std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw IoError("SHA-256 failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

inline std::string sha256_file(const fs::path& p) { return sha256_hex(read_text(p)); }

// ---------------------------------------------------------------------------
// CSV with metadata
// ---------------------------------------------------------------------------

struct CsvDocument {
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;
  std::string source;  // path it was read from

  std::optional<std::string> find(const std::string& key) const {
    for (const auto& [k, v] : meta) {
      if (k == key) return v;
    }
    return std::nullopt;
  }
  std::string get(const std::string& key) const {
    auto v = find(key);
    if (!v) throw ValidationError(source + ": missing header key '" + key + "'");
    return *v;
  }
  void set(const std::string& key, const std::string& value) {
    for (auto& [k, v] : meta) {
      if (k == key) {
        v = value;
        return;
      }
    }
    meta.emplace_back(key, value);
  }
  size_t column(const std::string& name) const {
    for (size_t i = 0; i < columns.size(); ++i) {
      if (columns[i] == name) return i;
    }
    throw ValidationError(source + ": missing column '" + name + "'");
  }
};

inline std::string to_string(const CsvDocument& d) {
  std::string s;
  for (const auto& [k, v] : d.meta) s += "# " + k + "=" + v + "\n";
  for (size_t i = 0; i < d.columns.size(); ++i) s += (i ? "," : "") + d.columns[i];
  s += "\n";
  for (const auto& row : d.rows) {
    for (size_t i = 0; i < row.size(); ++i) s += (i ? "," : "") + row[i];
    s += "\n";
  }
  return s;
}

inline void write_csv(const fs::path& p, const CsvDocument& d) { write_text(p, to_string(d)); }

namespace detail {

inline std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

inline CsvDocument parse_csv(const std::string& text, const std::string& source) {
  CsvDocument d;
  d.source = source;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  bool have_columns = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (detail::trim(line).empty()) continue;
    const auto where = source + ":" + std::to_string(lineno);
    if (line[0] == '#') {
      if (have_columns) throw ValidationError(where + ": metadata after the column header");
      const auto body = detail::trim(line.substr(1));
      const auto eq = body.find('=');
      if (eq == std::string::npos) throw ValidationError(where + ": expected '# key=value'");
      d.meta.emplace_back(detail::trim(body.substr(0, eq)), detail::trim(body.substr(eq + 1)));
      continue;
    }
    auto cells = detail::split(line, ',');
    for (auto& c : cells) c = detail::trim(c);
    if (!have_columns) {
      d.columns = std::move(cells);
      have_columns = true;
      continue;
    }
    if (cells.size() != d.columns.size()) {
      throw ValidationError(where + ": expected " + std::to_string(d.columns.size()) +
                            " fields, got " + std::to_string(cells.size()));
    }
    d.rows.push_back(std::move(cells));
  }
  if (!have_columns) throw ValidationError(source + ": empty file (no column header)");
  return d;
}

inline CsvDocument read_csv(const fs::path& p) { return parse_csv(read_text(p), p.string()); }

/// Rejects other schemas and unknown major versions.
inline void check_schema(const CsvDocument& d, const std::string& schema) {
  const auto s = d.get("schema");
  if (s != schema) {
    throw ValidationError(d.source + ": schema '" + s + "', expected '" + schema + "'");
  }
  const auto v = d.get("version");
  int major = -1;
  try {
    size_t pos = 0;
    major = std::stoi(v, &pos);
    if (pos < v.size() && v[pos] != '.') major = -1;
  } catch (const std::exception&) {
    major = -1;
  }
  if (major != kFormatMajor) {
    throw ValidationError(d.source + ": unsupported " + schema + " version " + v + " (reader is " +
                          std::to_string(kFormatMajor) + ".x)");
  }
}

inline double parse_double(const std::string& s, const std::string& where) {
  try {
    size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ValidationError(where + ": not a number: '" + s + "'");
  }
}

inline double cell(const CsvDocument& d, size_t row, size_t col) {
  return parse_double(d.rows[row][col], d.source + " row " + std::to_string(row + 1));
}

inline CsvDocument new_document(const std::string& schema, const std::string& config_hash) {
  CsvDocument d;
  d.meta = {{"schema", schema}, {"version", kFormatVersion}, {"config_hash", config_hash}};
  return d;
}

// ---------------------------------------------------------------------------
// Gamma_1 series
// ---------------------------------------------------------------------------

inline constexpr const char* kSeriesSchema = "qubitnoise.gamma1_series";

inline CsvDocument series_document(const Gamma1Series& s, const std::string& config_hash) {
  auto d = new_document(kSeriesSchema, config_hash);
  d.set("qubit", s.qubit_id);
  d.set("temperature_mk", fmt(units::k_to_mk(s.temperature)));
  d.set("dt_s", fmt(s.dt));
  for (const auto& [k, v] : s.provenance) {
    if (k != "qubit") d.set(k, v);
  }
  if (s.truth) {
    d.set("truth_a", fmt(s.truth->a));
    d.set("truth_b", fmt(s.truth->b));
  }
  d.columns = {"index", "time_s", "gamma1_per_us"};
  for (size_t i = 0; i < s.samples.size(); ++i) {
    const double t = s.times.empty() ? static_cast<double>(i) * s.dt : s.times[i];
    d.rows.push_back({std::to_string(i), fmt(t), fmt(units::per_s_to_per_us(s.samples[i]))});
  }
  return d;
}

inline void write_series(const fs::path& p, const Gamma1Series& s, const std::string& config_hash) {
  write_csv(p, series_document(s, config_hash));
}

/// Reads a series file; uniform spacing is detected, otherwise the sample
/// times are kept (mean cadence as dt).
inline Gamma1Series read_series(const fs::path& p) {
  const auto d = read_csv(p);
  check_schema(d, kSeriesSchema);
  if (d.rows.empty()) throw ValidationError(d.source + ": no samples");
  Gamma1Series s;
  s.qubit_id = d.get("qubit");
  s.temperature = units::mk_to_k(parse_double(d.get("temperature_mk"), d.source));
  const size_t ct = d.column("time_s"), cg = d.column("gamma1_per_us");
  std::vector<double> times;
  for (size_t i = 0; i < d.rows.size(); ++i) {
    times.push_back(cell(d, i, ct));
    s.samples.push_back(units::per_us_to_per_s(cell(d, i, cg)));
  }
  const auto dt_meta = d.find("dt_s");
  const double span = times.back() - times.front();
  s.dt = dt_meta ? parse_double(*dt_meta, d.source)
                 : (times.size() > 1 ? span / static_cast<double>(times.size() - 1) : 0.0);
  bool uniform = true;
  for (size_t i = 0; i < times.size(); ++i) {
    if (std::abs(times[i] - times.front() - static_cast<double>(i) * s.dt) > 1e-6 * s.dt) {
      uniform = false;
      break;
    }
  }
  if (!uniform) {
    s.times = times;
    if (times.size() > 1) s.dt = span / static_cast<double>(times.size() - 1);
  }
  for (const auto& [k, v] : d.meta) {
    if (k == "truth_a" || k == "truth_b" || k == "schema" || k == "version") continue;
    s.provenance[k] = v;
  }
  if (d.find("truth_a") && d.find("truth_b")) {
    s.truth = SpectralTruth{parse_double(d.get("truth_a"), d.source),
                            parse_double(d.get("truth_b"), d.source)};
  }
  try {
    validate(s);
  } catch (const ValidationError& e) {
    throw ValidationError(d.source + ": " + e.what());
  }
  return s;
}

}  // namespace qubit::cli
