#pragma once

// manifest.json at the root of a run directory: config hash, format
// versions, per-stage wall-clock seconds and a SHA-256 inventory of every
// other file in the run.

#include <algorithm>
#include <chrono>
#include <string>
#include <vector>

#include "json.hpp"

#include "ddmlab/harness/config.hpp"
#include "ddmlab/harness/io.hpp"

namespace ddmlab::harness {

inline constexpr const char* kVersion = "0.1.0";

struct ManifestEntry {
  std::string path;  // relative to the run directory, '/' separated
  std::string sha256;
  std::uintmax_t bytes = 0;
};

struct RunManifest {
  std::string config_hash;
  json versions = {{"ddmlab", kVersion}, {"checkpoint", "DDL1"}, {"manifest", 1}};
  std::vector<ManifestEntry> files;
  json stage_seconds = json::object();

  json to_json() const {
    json f = json::array();
    for (const auto& e : files) f.push_back({{"path", e.path}, {"sha256", e.sha256}, {"bytes", e.bytes}});
    return {{"config_hash", config_hash}, {"versions", versions}, {"files", f}, {"stage_seconds", stage_seconds}};
  }

  static RunManifest from_json(const json& j) {
    RunManifest m;
    m.config_hash = j.at("config_hash").get<std::string>();
    m.versions = j.at("versions");
    m.stage_seconds = j.value("stage_seconds", json::object());
    for (const auto& e : j.at("files")) m.files.push_back({e.at("path"), e.at("sha256"), e.at("bytes")});
    return m;
  }
};

inline fs::path manifest_path(const fs::path& run) { return run / "manifest.json"; }

inline std::vector<ManifestEntry> inventory(const fs::path& run) {
  std::vector<ManifestEntry> out;
  if (!fs::exists(run)) return out;
  for (const auto& de : fs::recursive_directory_iterator(run)) {
    if (!de.is_regular_file()) continue;
    const auto rel = fs::relative(de.path(), run).generic_string();
    if (rel == "manifest.json") continue;
    out.push_back({rel, sha256_file(de.path()), de.file_size()});
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.path < b.path; });
  return out;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Re-inventories the run and records the seconds spent in `stage`.
inline RunManifest update_manifest(const fs::path& run, const LabConfig& cfg, const std::string& stage, double seconds) {
  RunManifest m;
  if (fs::exists(manifest_path(run))) {
    try {
      m = RunManifest::from_json(json::parse(read_file(manifest_path(run))));
    } catch (const std::exception&) {
      m = RunManifest{};
    }
  }
  m.config_hash = hex64(config_hash(cfg));
  m.stage_seconds[stage] = seconds;
  m.files = inventory(run);
  write_file(manifest_path(run), m.to_json().dump(2) + "\n");
  return m;
}

/// Paths whose current checksum differs from the manifest (or that vanished).
inline std::vector<std::string> verify_manifest(const fs::path& run) {
  const auto m = RunManifest::from_json(json::parse(read_file(manifest_path(run))));
  std::vector<std::string> bad;
  for (const auto& e : m.files) {
    const auto p = run / e.path;
    if (!fs::exists(p) || sha256_file(p) != e.sha256) bad.push_back(e.path);
  }
  return bad;
}

class StageTimer {
 public:
  StageTimer() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

 private:
  std::chrono::steady_clock::time_point start_;
};

}  // namespace ddmlab::harness
