#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "mocomsi/augment/augment.hpp"
#include "mocomsi/core/checkpoint.hpp"
#include "mocomsi/core/error.hpp"
#include "mocomsi/datasets/manifest.hpp"
#include "mocomsi/moco/moco.hpp"

namespace mocomsi {

struct PatientEmbeddings {
  std::string patient_id;
  Label label = Label::kMss;
  std::vector<std::string> patch_ids;
  std::vector<float> matrix;  // patch_ids.size() x dim, row-major

  std::size_t rows() const { return patch_ids.size(); }
};

struct EmbeddingStore {
  int dim = 0;  // n_o
  std::string encoder_fingerprint;
  std::vector<PatientEmbeddings> patients;

  std::span<const float> row(const PatientEmbeddings& p, std::size_t i) const {
    return {p.matrix.data() + i * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim)};
  }
  std::size_t total_rows() const {
    std::size_t n = 0;
    for (const auto& p : patients) n += p.rows();
    return n;
  }
  void validate() const {
    for (const auto& p : patients) {
      if (p.matrix.size() != p.rows() * static_cast<std::size_t>(dim)) {
        throw IntegrityError("embedding store: patient " + p.patient_id + " matrix does not match its patch count");
      }
    }
  }
};

// Runs the frozen backbone over every patch (deterministic eval transform, no
// gradients, no augmentation). The projection head is not used.
inline EmbeddingStore extract_embeddings(Encoder<float>& encoder, const std::string& fingerprint,
                                         const std::vector<PatientRecord>& patients, int input_size,
                                         const AugmentConfig& norm, int batch_size = 64) {
  EmbeddingStore store;
  store.dim = encoder.config().output_dim;
  store.encoder_fingerprint = fingerprint;
  for (const auto& p : patients) {
    PatientEmbeddings pe{p.patient_id, p.label, {}, {}};
    pe.matrix.reserve(p.patches.size() * static_cast<std::size_t>(store.dim));
    for (std::size_t start = 0; start < p.patches.size(); start += static_cast<std::size_t>(batch_size)) {
      const std::size_t end = std::min(p.patches.size(), start + static_cast<std::size_t>(batch_size));
      std::vector<View> views;
      for (std::size_t i = start; i < end; ++i) views.push_back(eval_transform(p.patches[i], input_size, norm));
      const auto feats = encoder.features(nn::stack(views), nn::Pass::eval());
      if (feats.rank() != 2 || feats.dim(1) != store.dim) {
        throw IntegrityError("extract: backbone emits width " + std::to_string(feats.rank() == 2 ? feats.dim(1) : -1) +
                             ", checkpoint declares " + std::to_string(store.dim));
      }
      pe.matrix.insert(pe.matrix.end(), feats.data.begin(), feats.data.end());
    }
    for (const auto& patch : p.patches) pe.patch_ids.push_back(patch.patch_id);
    store.patients.push_back(std::move(pe));
  }
  return store;
}

inline EmbeddingStore extract_embeddings(const Checkpoint& ckpt, const std::vector<PatientRecord>& patients,
                                         int input_size, const AugmentConfig& norm) {
  auto encoder = load_encoder(ckpt);
  return extract_embeddings(encoder, ckpt.fingerprint(), patients, input_size, norm);
}

inline constexpr std::string_view kStoreMagic = "# mocomsi-embeddings v1";

struct StorePaths {
  std::filesystem::path matrix;  // raw little-endian float32, total_rows x dim
  std::filesystem::path index;   // text index

  static StorePaths at(const std::filesystem::path& prefix) {
    return {prefix.string() + ".f32", prefix.string() + ".index.tsv"};
  }
};

// Index layout:
//   # mocomsi-embeddings v1
//   # dim=<n_o>
//   # rows=<total>
//   # fingerprint=<sha256 of the encoder weights>
//   patient_id  label  row_begin  row_count  patch_ids(comma separated)
inline void write_store(const EmbeddingStore& store, const std::filesystem::path& prefix) {
  store.validate();
  const auto paths = StorePaths::at(prefix);
  std::ofstream bin(paths.matrix, std::ios::binary);
  std::ofstream idx(paths.index);
  if (!bin || !idx) throw IngestError("cannot write embedding store at " + prefix.string());
  idx << kStoreMagic << "\n# dim=" << store.dim << "\n# rows=" << store.total_rows()
      << "\n# fingerprint=" << store.encoder_fingerprint << "\npatient_id\tlabel\trow_begin\trow_count\tpatch_ids\n";
  std::size_t row = 0;
  for (const auto& p : store.patients) {
    bin.write(reinterpret_cast<const char*>(p.matrix.data()), static_cast<std::streamsize>(p.matrix.size() * sizeof(float)));
    idx << p.patient_id << '\t' << to_string(p.label) << '\t' << row << '\t' << p.rows() << '\t';
    for (std::size_t i = 0; i < p.patch_ids.size(); ++i) idx << (i ? "," : "") << p.patch_ids[i];
    idx << '\n';
    row += p.rows();
  }
}

inline EmbeddingStore read_store(const std::filesystem::path& prefix) {
  const auto paths = StorePaths::at(prefix);
  std::ifstream idx(paths.index);
  if (!idx) throw DependencyError("embedding index not found: " + paths.index.string());
  std::ifstream bin(paths.matrix, std::ios::binary);
  if (!bin) throw DependencyError("embedding matrix not found: " + paths.matrix.string());
  EmbeddingStore store;
  std::string line;
  std::getline(idx, line);
  if (line != kStoreMagic) throw IntegrityError("unsupported embedding index: " + paths.index.string());
  std::size_t rows = 0;
  bool header = false;
  struct Span {
    std::size_t begin, count;
  };
  std::vector<Span> spans;
  while (std::getline(idx, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      auto eq = line.find('=');
      const auto key = line.substr(2, eq - 2), val = line.substr(eq + 1);
      if (key == "dim") store.dim = std::stoi(val);
      else if (key == "rows") rows = std::stoull(val);
      else if (key == "fingerprint") store.encoder_fingerprint = val;
      continue;
    }
    if (!header) {
      header = true;
      continue;
    }
    std::stringstream ss(line);
    std::string pid, label, begin, count, ids;
    std::getline(ss, pid, '\t');
    std::getline(ss, label, '\t');
    std::getline(ss, begin, '\t');
    std::getline(ss, count, '\t');
    std::getline(ss, ids, '\t');
    PatientEmbeddings p{pid, parse_label(label), {}, {}};
    std::stringstream is(ids);
    for (std::string id; std::getline(is, id, ',');) p.patch_ids.push_back(id);
    spans.push_back({std::stoull(begin), std::stoull(count)});
    if (p.patch_ids.size() != spans.back().count) {
      throw IntegrityError("embedding index: patient " + pid + " lists " + std::to_string(p.patch_ids.size()) +
                           " patch ids for " + count + " rows");
    }
    store.patients.push_back(std::move(p));
  }
  if (store.dim <= 0) throw IntegrityError("embedding index: missing dim");
  const auto expected = rows * static_cast<std::size_t>(store.dim) * sizeof(float);
  if (std::filesystem::file_size(paths.matrix) != expected) {
    throw IntegrityError("embedding matrix size does not match rows x dim: " + paths.matrix.string());
  }
  for (std::size_t i = 0; i < store.patients.size(); ++i) {
    auto& p = store.patients[i];
    p.matrix.resize(spans[i].count * static_cast<std::size_t>(store.dim));
    bin.seekg(static_cast<std::streamoff>(spans[i].begin * static_cast<std::size_t>(store.dim) * sizeof(float)));
    bin.read(reinterpret_cast<char*>(p.matrix.data()), static_cast<std::streamsize>(p.matrix.size() * sizeof(float)));
  }
  return store;
}

}  // namespace mocomsi
