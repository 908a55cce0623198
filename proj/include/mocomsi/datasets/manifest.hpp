#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "mocomsi/core/error.hpp"
#include "mocomsi/core/raster.hpp"
#include "mocomsi/datasets/label.hpp"

namespace mocomsi {

namespace fs = std::filesystem;

struct ManifestEntry {
  std::string patient_id;
  std::string patch_path;  // relative to the manifest directory
  Label label = Label::kMss;
  Split split = Split::kTrain;

  // Patch id is the file stem: out_dir/<patient_id>/<patch_id>.png.
  std::string patch_id() const { return fs::path(patch_path).stem().string(); }
};

struct ClassTally {
  std::size_t patches = 0;
  std::size_t patients = 0;
  friend bool operator==(const ClassTally&, const ClassTally&) = default;
};

// class_counts[split][label]
using ClassCounts = std::array<std::array<ClassTally, 2>, 2>;

struct DatasetManifest {
  fs::path root;  // directory the patch paths are relative to
  int patch_size = 0;
  std::vector<ManifestEntry> entries;
  ClassCounts class_counts{};

  const ClassTally& tally(Split s, Label l) const { return class_counts[index_of(s)][index_of(l)]; }
};

// Patient-level view of a manifest split, in order of first appearance.
struct PatientIndex {
  std::string patient_id;
  Label label;
  Split split;
  std::vector<std::size_t> entry_rows;
};

inline std::vector<PatientIndex> patients_of(const DatasetManifest& m) {
  std::vector<PatientIndex> out;
  std::unordered_map<std::string, std::size_t> pos;
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    const auto& e = m.entries[i];
    auto [it, inserted] = pos.try_emplace(e.patient_id, out.size());
    if (inserted) out.push_back({e.patient_id, e.label, e.split, {}});
    out[it->second].entry_rows.push_back(i);
  }
  return out;
}

inline std::vector<PatientIndex> patients_of(const DatasetManifest& m, Split split) {
  auto all = patients_of(m);
  std::vector<PatientIndex> out;
  for (auto& p : all)
    if (p.split == split) out.push_back(std::move(p));
  return out;
}

inline ClassCounts recompute_counts(const std::vector<ManifestEntry>& entries) {
  ClassCounts counts{};
  std::unordered_set<std::string> seen;
  for (const auto& e : entries) {
    auto& t = counts[index_of(e.split)][index_of(e.label)];
    ++t.patches;
    if (seen.insert(e.patient_id).second) ++t.patients;
  }
  return counts;
}

// Checks split partition, label inheritance and patch id uniqueness.
inline void validate_entries(const std::vector<ManifestEntry>& entries) {
  std::unordered_map<std::string, std::pair<Label, Split>> patient;
  std::unordered_set<std::string> patch_ids;
  for (const auto& e : entries) {
    auto [it, inserted] = patient.try_emplace(e.patient_id, e.label, e.split);
    if (!inserted) {
      if (it->second.second != e.split) {
        throw ConsistencyError("patient " + e.patient_id + " listed in both train and validation");
      }
      if (it->second.first != e.label) {
        throw ConsistencyError("patient " + e.patient_id + " carries conflicting labels");
      }
    }
    if (!patch_ids.insert(e.patch_id()).second) {
      throw ConsistencyError("duplicate patch id " + e.patch_id());
    }
  }
}

struct LoadOptions {
  bool verify_files = true;
};

inline constexpr std::string_view kManifestMagic = "# mocomsi-manifest v1";

// Text table, tab separated:
//   # mocomsi-manifest v1
//   # patch_size=<px>
//   patient_id  patch_path  label  split
//   ...
inline DatasetManifest load_manifest(const fs::path& path, LoadOptions opts = {}) {
  std::ifstream in(path);
  if (!in) throw IngestError("manifest not found: " + path.string());
  DatasetManifest m;
  m.root = path.parent_path();
  std::string line;
  bool header_seen = false;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      constexpr std::string_view key = "# patch_size=";
      if (line.rfind(key, 0) == 0) {
        try {
          m.patch_size = std::stoi(line.substr(key.size()));
        } catch (const std::exception&) {
          throw ParseError(path.string() + ":" + std::to_string(lineno) + ": bad patch_size");
        }
      }
      continue;
    }
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, '\t')) cols.push_back(col);
    if (!header_seen) {
      if (cols != std::vector<std::string>{"patient_id", "patch_path", "label", "split"}) {
        throw ParseError(path.string() + ": missing header row");
      }
      header_seen = true;
      continue;
    }
    if (cols.size() != 4) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": expected 4 columns");
    }
    ManifestEntry e{cols[0], cols[1], parse_label(cols[2]), parse_split(cols[3])};
    if (opts.verify_files && !fs::exists(m.root / e.patch_path)) {
      throw IngestError("patch file missing: " + (m.root / e.patch_path).string());
    }
    m.entries.push_back(std::move(e));
  }
  if (!header_seen && !m.entries.empty()) throw ParseError(path.string() + ": missing header row");
  validate_entries(m.entries);
  m.class_counts = recompute_counts(m.entries);
  return m;
}

inline void write_manifest(const DatasetManifest& m, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IngestError("cannot write manifest: " + path.string());
  out << kManifestMagic << "\n# patch_size=" << m.patch_size << "\n";
  out << "patient_id\tpatch_path\tlabel\tsplit\n";
  for (const auto& e : m.entries) {
    out << e.patient_id << '\t' << e.patch_path << '\t' << to_string(e.label) << '\t'
        << to_string(e.split) << '\n';
  }
}

// Returns a manifest restricted to the given patients, keeping entry order.
inline DatasetManifest restrict_to(const DatasetManifest& m,
                                   const std::unordered_set<std::string>& patient_ids) {
  DatasetManifest out;
  out.root = m.root;
  out.patch_size = m.patch_size;
  for (const auto& e : m.entries)
    if (patient_ids.count(e.patient_id)) out.entries.push_back(e);
  out.class_counts = recompute_counts(out.entries);
  return out;
}

struct PatchRecord {
  std::string patch_id;
  std::string patient_id;
  Raster image;
  Label label = Label::kMss;
};

struct PatientRecord {
  std::string patient_id;
  Label label = Label::kMss;
  Split split = Split::kTrain;
  std::vector<PatchRecord> patches;
};

// Loads the rasters of one split. Every patch inherits its patient's label.
inline std::vector<PatientRecord> load_patients(const DatasetManifest& m, Split split) {
  std::vector<PatientRecord> out;
  for (const auto& p : patients_of(m, split)) {
    PatientRecord rec{p.patient_id, p.label, p.split, {}};
    rec.patches.reserve(p.entry_rows.size());
    for (auto row : p.entry_rows) {
      const auto& e = m.entries[row];
      Raster img = read_png((m.root / e.patch_path).string());
      if (m.patch_size > 0 && (img.height != m.patch_size || img.width != m.patch_size)) {
        throw FormatError("patch " + e.patch_path + " is " + std::to_string(img.width) + "x" +
                          std::to_string(img.height) + ", manifest declares " +
                          std::to_string(m.patch_size));
      }
      rec.patches.push_back({e.patch_id(), rec.patient_id, std::move(img), rec.label});
    }
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace mocomsi
