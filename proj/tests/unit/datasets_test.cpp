#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>
#include <set>

#include "mocomsi/datasets/balanced_subset.hpp"
#include "mocomsi/datasets/manifest.hpp"
#include "mocomsi/datasets/synthetic.hpp"
#include "test_support.hpp"

namespace mocomsi {
namespace {

using testing::TempDir;
using testing::write_file;

constexpr const char* kHeader = "# mocomsi-manifest v1\n# patch_size=16\npatient_id\tpatch_path\tlabel\tsplit\n";

std::string row(const std::string& pid, int i, const std::string& label, const std::string& split) {
  return pid + "\t" + pid + "/" + pid + "_p" + std::to_string(i) + ".png\t" + label + "\t" + split + "\n";
}

// In-memory manifest with the given per-patient patch counts.
DatasetManifest counted_manifest(const std::vector<std::size_t>& mss, const std::vector<std::size_t>& msi,
                                 Split split = Split::kValidation) {
  DatasetManifest m;
  auto add = [&](const std::vector<std::size_t>& counts, Label label, const std::string& tag) {
    for (std::size_t p = 0; p < counts.size(); ++p) {
      const std::string pid = tag + std::to_string(p);
      for (std::size_t i = 0; i < counts[p]; ++i)
        m.entries.push_back({pid, pid + "/" + pid + "_" + std::to_string(i) + ".png", label, split});
    }
  };
  add(mss, Label::kMss, "mss");
  add(msi, Label::kMsi, "msi");
  m.class_counts = recompute_counts(m.entries);
  return m;
}

TEST(Manifest, CountsPatchesAndPatientsPerClass) {
  TempDir dir;
  std::string text = kHeader;
  for (int i = 0; i < 3; ++i) text += row("A", i, "MSS", "train");
  for (int i = 0; i < 2; ++i) text += row("B", i, "MSI", "train");
  write_file(dir / "manifest.tsv", text);
  const auto m = load_manifest(dir / "manifest.tsv", {.verify_files = false});
  EXPECT_EQ(m.tally(Split::kTrain, Label::kMss), (ClassTally{3, 1}));
  EXPECT_EQ(m.tally(Split::kTrain, Label::kMsi), (ClassTally{2, 1}));
  EXPECT_EQ(m.tally(Split::kValidation, Label::kMss), (ClassTally{0, 0}));
  EXPECT_EQ(m.patch_size, 16);
}

TEST(Manifest, EmptyManifestHasZeroTallies) {
  TempDir dir;
  write_file(dir / "manifest.tsv", kHeader);
  const auto m = load_manifest(dir / "manifest.tsv");
  EXPECT_TRUE(m.entries.empty());
  for (auto s : {Split::kTrain, Split::kValidation})
    for (auto l : {Label::kMss, Label::kMsi}) EXPECT_EQ(m.tally(s, l), (ClassTally{0, 0}));
}

TEST(Manifest, TcgaShapedTalliesAreReproduced) {
  // 260 train patients with 46,704 patches per class; 100 validation patients
  // with 70,569 MSS and 28,335 MSI patches.
  struct Block {
    Split split;
    Label label;
    int patients;
    int patches;
  };
  const std::vector<Block> blocks = {{Split::kTrain, Label::kMss, 130, 46704},
                                     {Split::kTrain, Label::kMsi, 130, 46704},
                                     {Split::kValidation, Label::kMss, 70, 70569},
                                     {Split::kValidation, Label::kMsi, 30, 28335}};
  TempDir dir;
  std::string text = kHeader;
  int serial = 0;
  for (const auto& b : blocks) {
    for (int p = 0; p < b.patients; ++p) {
      const std::string pid = "TCGA-" + std::to_string(serial++);
      const int n = b.patches / b.patients + (p < b.patches % b.patients ? 1 : 0);
      for (int i = 0; i < n; ++i)
        text += row(pid, i, b.label == Label::kMsi ? "MSIMUT" : "MSS", b.split == Split::kTrain ? "train" : "val");
    }
  }
  write_file(dir / "manifest.tsv", text);
  const auto m = load_manifest(dir / "manifest.tsv", {.verify_files = false});
  EXPECT_EQ(m.tally(Split::kTrain, Label::kMss), (ClassTally{46704, 130}));
  EXPECT_EQ(m.tally(Split::kTrain, Label::kMsi), (ClassTally{46704, 130}));
  EXPECT_EQ(m.tally(Split::kValidation, Label::kMss), (ClassTally{70569, 70}));
  EXPECT_EQ(m.tally(Split::kValidation, Label::kMsi), (ClassTally{28335, 30}));
  EXPECT_EQ(patients_of(m, Split::kTrain).size(), 260u);
  EXPECT_EQ(patients_of(m, Split::kValidation).size(), 100u);
}

TEST(Manifest, MissingManifestIsIngestErrorNamingPath) {
  TempDir dir;
  try {
    load_manifest(dir / "nope.tsv");
    FAIL();
  } catch (const IngestError& e) {
    EXPECT_NE(std::string(e.what()).find("nope.tsv"), std::string::npos);
  }
}

TEST(Manifest, MissingPatchFileIsIngestError) {
  TempDir dir;
  write_file(dir / "manifest.tsv", std::string(kHeader) + row("A", 0, "MSS", "train"));
  EXPECT_THROW(load_manifest(dir / "manifest.tsv"), IngestError);
}

TEST(Manifest, PatientInTwoSplitsIsConsistencyError) {
  TempDir dir;
  write_file(dir / "manifest.tsv", std::string(kHeader) + row("A", 0, "MSS", "train") + row("A", 1, "MSS", "validation"));
  EXPECT_THROW(load_manifest(dir / "manifest.tsv", {.verify_files = false}), ConsistencyError);
}

TEST(Manifest, ConflictingLabelsAreConsistencyError) {
  TempDir dir;
  write_file(dir / "manifest.tsv", std::string(kHeader) + row("A", 0, "MSS", "train") + row("A", 1, "MSI", "train"));
  EXPECT_THROW(load_manifest(dir / "manifest.tsv", {.verify_files = false}), ConsistencyError);
}

TEST(Manifest, UnknownLabelIsParseError) {
  TempDir dir;
  write_file(dir / "manifest.tsv", std::string(kHeader) + row("A", 0, "MSX", "train"));
  EXPECT_THROW(load_manifest(dir / "manifest.tsv", {.verify_files = false}), ParseError);
}

TEST(Manifest, WrongPatchSizeIsFormatError) {
  TempDir dir;
  SyntheticConfig cfg;
  cfg.train_patients_per_class = 1;
  cfg.validation_patients_per_class = 1;
  cfg.min_patches = cfg.max_patches = 1;
  cfg.patch_size = 16;
  const auto ds = generate_synthetic(cfg, dir.path());
  auto m = ds.manifest;
  m.patch_size = 32;
  EXPECT_THROW(load_patients(m, Split::kTrain), FormatError);
}

TEST(Manifest, RoundTripsThroughWriter) {
  TempDir dir;
  const auto m = counted_manifest({3, 1}, {2});
  write_manifest(m, dir / "m.tsv");
  const auto back = load_manifest(dir / "m.tsv", {.verify_files = false});
  ASSERT_EQ(back.entries.size(), m.entries.size());
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    EXPECT_EQ(back.entries[i].patient_id, m.entries[i].patient_id);
    EXPECT_EQ(back.entries[i].patch_path, m.entries[i].patch_path);
    EXPECT_EQ(back.entries[i].label, m.entries[i].label);
    EXPECT_EQ(back.entries[i].split, m.entries[i].split);
  }
  EXPECT_EQ(back.class_counts, m.class_counts);
}

SyntheticConfig tiny_synthetic() {
  SyntheticConfig cfg;
  cfg.train_patients_per_class = 2;
  cfg.validation_patients_per_class = 1;
  cfg.min_patches = cfg.max_patches = 4;
  cfg.patch_size = 16;
  cfg.signal_fraction = 1.0;
  cfg.seed = 7;
  return cfg;
}

TEST(Synthetic, ForcedConfigCountsAndTexture) {
  TempDir dir;
  auto cfg = tiny_synthetic();
  cfg.validation_patients_per_class = 0;
  const auto ds = generate_synthetic(cfg, dir.path());
  EXPECT_EQ(ds.manifest.entries.size(), 16u);
  std::size_t msi = 0;
  for (const auto& e : ds.manifest.entries) {
    if (e.label != Label::kMsi) {
      EXPECT_FALSE(ds.textured_patch_ids.count(e.patch_id()));
      continue;
    }
    ++msi;
    EXPECT_TRUE(ds.textured_patch_ids.count(e.patch_id()));
  }
  EXPECT_EQ(msi, 8u);
  EXPECT_EQ(ds.textured_patch_ids.size(), 8u);
}

TEST(Synthetic, HalfSignalOnSixPatchesGivesThreeTextured) {
  TempDir dir;
  auto cfg = tiny_synthetic();
  cfg.min_patches = cfg.max_patches = 6;
  cfg.signal_fraction = 0.5;
  const auto ds = generate_synthetic(cfg, dir.path());
  std::map<std::string, int> per_patient;
  for (const auto& e : ds.manifest.entries)
    if (ds.textured_patch_ids.count(e.patch_id())) ++per_patient[e.patient_id];
  for (const auto& p : patients_of(ds.manifest)) {
    EXPECT_EQ(per_patient[p.patient_id], p.label == Label::kMsi ? 3 : 0) << p.patient_id;
  }
}

TEST(Synthetic, SameSeedGivesIdenticalFiles) {
  TempDir a, b;
  generate_synthetic(tiny_synthetic(), a.path());
  generate_synthetic(tiny_synthetic(), b.path());
  EXPECT_EQ(testing::tree_hash(a.path()), testing::tree_hash(b.path()));
  auto other = tiny_synthetic();
  other.seed = 8;
  TempDir c;
  generate_synthetic(other, c.path());
  EXPECT_NE(testing::tree_hash(a.path()), testing::tree_hash(c.path()));
}

TEST(Synthetic, SmallPatchSizeIsConfigError) {
  TempDir dir;
  auto cfg = tiny_synthetic();
  cfg.patch_size = 15;
  EXPECT_THROW(generate_synthetic(cfg, dir.path()), ConfigError);
}

TEST(Synthetic, ZeroSignalFractionIsConfigError) {
  TempDir dir;
  auto cfg = tiny_synthetic();
  cfg.signal_fraction = 0.0;
  EXPECT_THROW(generate_synthetic(cfg, dir.path()), ConfigError);
}

TEST(Synthetic, LabelInheritanceAndSplitPartition) {
  TempDir dir;
  auto cfg = tiny_synthetic();
  cfg.min_patches = 3;
  cfg.max_patches = 9;
  const auto ds = generate_synthetic(cfg, dir.path());
  const auto m = load_manifest(ds.manifest_path);
  std::set<std::string> train, val;
  for (const auto& p : patients_of(m)) (p.split == Split::kTrain ? train : val).insert(p.patient_id);
  std::vector<std::string> both;
  std::set_intersection(train.begin(), train.end(), val.begin(), val.end(), std::back_inserter(both));
  EXPECT_TRUE(both.empty());
  for (Split s : {Split::kTrain, Split::kValidation}) {
    for (const auto& patient : load_patients(m, s)) {
      EXPECT_GE(patient.patches.size(), 3u);
      EXPECT_LE(patient.patches.size(), 9u);
      for (const auto& patch : patient.patches) {
        EXPECT_EQ(patch.label, patient.label);
        EXPECT_EQ(patch.patient_id, patient.patient_id);
        EXPECT_EQ(patch.image.height, cfg.patch_size);
        EXPECT_EQ(patch.image.channels, 3);
      }
    }
  }
}

std::size_t class_patches(const DatasetManifest& m, Label l) {
  std::size_t n = 0;
  for (const auto& e : m.entries) n += e.label == l;
  return n;
}

TEST(BalancedSubset, PicksClosestPair) {
  const auto m = counted_manifest({10, 2}, {9, 3});
  const auto sub = build_balanced_subset(m, 1);
  EXPECT_EQ(class_patches(sub, Label::kMss), 10u);
  EXPECT_EQ(class_patches(sub, Label::kMsi), 9u);
  EXPECT_EQ(m.entries.size(), 24u);  // input untouched
}

TEST(BalancedSubset, FullPoolIsIdentity) {
  const auto m = counted_manifest({5, 7, 1}, {2, 9, 4});
  const auto sub = build_balanced_subset(m, 3);
  EXPECT_EQ(sub.entries.size(), m.entries.size());
  EXPECT_EQ(sub.class_counts, m.class_counts);
}

TEST(BalancedSubset, InsufficientPatientsIsCapacityError) {
  const auto m = counted_manifest({5, 7}, {2});
  try {
    build_balanced_subset(m, 2);
    FAIL();
  } catch (const CapacityError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find('1'), std::string::npos) << what;
  }
}

TEST(BalancedSubset, ValidationPoolOfDatasetShape) {
  // 15 moderate MSS and MSI patients plus a few very large ones that can never
  // help balance the classes; the subset must be the moderate 15 + 15.
  std::vector<std::size_t> mss(14, 496), msi(14, 485);
  mss.push_back(502);
  msi.push_back(491);
  for (std::size_t big : {31561, 31562}) mss.push_back(big);
  for (std::size_t big : {5263, 5263, 5264, 5264}) msi.push_back(big);
  const auto m = counted_manifest(mss, msi);
  EXPECT_EQ(class_patches(m, Label::kMss), 70569u);
  EXPECT_EQ(class_patches(m, Label::kMsi), 28335u);
  const auto sub = build_balanced_subset(m, 15);
  EXPECT_EQ(sub.tally(Split::kValidation, Label::kMss), (ClassTally{7446, 15}));
  EXPECT_EQ(sub.tally(Split::kValidation, Label::kMsi), (ClassTally{7281, 15}));
}

// Brute force over every pair of k-subsets.
std::size_t brute_force_gap(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b, std::size_t k) {
  auto sums = [k](const std::vector<std::size_t>& v) {
    std::set<std::size_t> out;
    for (unsigned mask = 0; mask < (1u << v.size()); ++mask) {
      if (static_cast<std::size_t>(__builtin_popcount(mask)) != k) continue;
      std::size_t s = 0;
      for (std::size_t i = 0; i < v.size(); ++i)
        if (mask >> i & 1u) s += v[i];
      out.insert(s);
    }
    return out;
  };
  std::size_t best = SIZE_MAX;
  for (auto x : sums(a))
    for (auto y : sums(b)) best = std::min(best, x > y ? x - y : y - x);
  return best;
}

TEST(BalancedSubset, GapMatchesBruteForceOptimum) {
  std::mt19937_64 gen(2024);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t na = 1 + gen() % 6, nb = 1 + gen() % 6;
    const std::size_t k = 1 + gen() % std::min(na, nb);
    std::vector<std::size_t> a(na), b(nb);
    for (auto& x : a) x = 1 + gen() % 40;
    for (auto& x : b) x = 1 + gen() % 40;
    const auto m = counted_manifest(a, b);
    const auto sub = build_balanced_subset(m, k);
    EXPECT_EQ(sub.tally(Split::kValidation, Label::kMss).patients, k);
    EXPECT_EQ(sub.tally(Split::kValidation, Label::kMsi).patients, k);
    const auto x = class_patches(sub, Label::kMss), y = class_patches(sub, Label::kMsi);
    EXPECT_EQ(x > y ? x - y : y - x, brute_force_gap(a, b, k)) << "trial " << trial;
  }
}

TEST(BalancedSubset, OnlyLooksAtRequestedSplit) {
  auto m = counted_manifest({4, 4}, {4, 4}, Split::kTrain);
  EXPECT_THROW(build_balanced_subset(m, 1), CapacityError);
  EXPECT_NO_THROW(build_balanced_subset(m, 1, Split::kTrain));
}

}  // namespace
}  // namespace mocomsi
