#include <gtest/gtest.h>

#include <map>
#include <random>
#include <set>

#include "mocomsi/datasets/synthetic.hpp"
#include "mocomsi/embeddings/groups.hpp"
#include "mocomsi/embeddings/store.hpp"
#include "test_support.hpp"

namespace mocomsi {
namespace {

PatientRecord random_patient(const std::string& id, Label label, int patches, int size, std::uint64_t seed) {
  PatientRecord p{id, label, Split::kValidation, {}};
  std::mt19937_64 gen(seed);
  for (int i = 0; i < patches; ++i) {
    Raster r(size, size);
    for (auto& v : r.pixels) v = static_cast<std::uint8_t>(gen());
    p.patches.push_back({id + "_p" + std::to_string(i), id, std::move(r), label});
  }
  return p;
}

EncoderConfig small_encoder(int n_o) {
  EncoderConfig e;
  e.tiny_widths = {4, 8};
  e.output_dim = n_o;
  e.projection_dim = 8;
  return e;
}

TEST(Extract, SevenPatchesGiveSevenBy512) {
  Encoder<float> enc(small_encoder(512), 1);
  const auto store = extract_embeddings(enc, "fp", {random_patient("P", Label::kMsi, 7, 16, 1)}, 16, AugmentConfig{});
  ASSERT_EQ(store.patients.size(), 1u);
  EXPECT_EQ(store.dim, 512);
  EXPECT_EQ(store.patients[0].rows(), 7u);
  EXPECT_EQ(store.patients[0].matrix.size(), 7u * 512u);
  EXPECT_EQ(store.encoder_fingerprint, "fp");
  EXPECT_EQ(store.patients[0].label, Label::kMsi);
}

TEST(Extract, RepeatedExtractionIsIdenticalAndLeavesWeightsAlone) {
  Encoder<float> enc(small_encoder(16), 2);
  const std::vector<PatientRecord> patients{random_patient("A", Label::kMss, 5, 16, 2),
                                            random_patient("B", Label::kMsi, 3, 16, 3)};
  const auto before = encoder_state(enc);
  const auto a = extract_embeddings(enc, "fp", patients, 16, AugmentConfig{}, 2);
  const auto again = extract_embeddings(enc, "fp", patients, 16, AugmentConfig{}, 2);
  const auto b = extract_embeddings(enc, "fp", patients, 16, AugmentConfig{}, 64);
  EXPECT_EQ(encoder_state(enc), before);
  ASSERT_EQ(a.patients.size(), b.patients.size());
  for (std::size_t i = 0; i < a.patients.size(); ++i) {
    EXPECT_EQ(a.patients[i].matrix, again.patients[i].matrix);
    // GEMM blocking depends on batch shape, so only the last bits may move.
    for (std::size_t j = 0; j < a.patients[i].matrix.size(); ++j)
      ASSERT_NEAR(a.patients[i].matrix[j], b.patients[i].matrix[j], 1e-5);
  }
}

TEST(Extract, ZeroFinalLayerGivesZeroEmbeddings) {
  Encoder<float> enc(small_encoder(16), 3);
  std::vector<nn::Parameter<float>*> last;
  enc.backbone().at(enc.backbone().size() - 2).parameters(last);  // the Linear before the final ReLU
  ASSERT_FALSE(last.empty());
  for (auto* p : last) std::fill(p->value.begin(), p->value.end(), 0.0f);
  const auto store = extract_embeddings(enc, "fp", {random_patient("P", Label::kMss, 4, 16, 4)}, 16, AugmentConfig{});
  for (float v : store.patients[0].matrix) EXPECT_EQ(v, 0.0f);
}

TEST(Extract, CheckpointWidthMismatchIsIntegrityError) {
  Encoder<float> enc(small_encoder(16), 4);
  auto ckpt = make_encoder_checkpoint(small_encoder(16), encoder_state(enc), {1.0}, 1);
  ckpt.header["encoder"]["output_dim"] = 32;
  EXPECT_THROW(extract_embeddings(ckpt, {random_patient("P", Label::kMss, 2, 16, 5)}, 16, AugmentConfig{}),
               IntegrityError);
}

EmbeddingStore toy_store(const std::vector<int>& counts, int dim, std::uint64_t seed = 0) {
  EmbeddingStore s;
  s.dim = dim;
  s.encoder_fingerprint = "toy";
  std::mt19937_64 gen(seed);
  for (std::size_t p = 0; p < counts.size(); ++p) {
    PatientEmbeddings pe{"P" + std::to_string(p), p % 2 ? Label::kMsi : Label::kMss, {}, {}};
    for (int i = 0; i < counts[p]; ++i) {
      pe.patch_ids.push_back(pe.patient_id + "_" + std::to_string(i));
      for (int j = 0; j < dim; ++j) pe.matrix.push_back(static_cast<float>(gen() % 1000) / 100.0f);
    }
    s.patients.push_back(std::move(pe));
  }
  return s;
}

TEST(StoreFiles, RoundTrip) {
  testing::TempDir dir;
  const auto s = toy_store({3, 1, 5}, 6, 1);
  write_store(s, dir / "val");
  const auto back = read_store(dir / "val");
  EXPECT_EQ(back.dim, 6);
  EXPECT_EQ(back.encoder_fingerprint, "toy");
  ASSERT_EQ(back.patients.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back.patients[i].patient_id, s.patients[i].patient_id);
    EXPECT_EQ(back.patients[i].label, s.patients[i].label);
    EXPECT_EQ(back.patients[i].patch_ids, s.patients[i].patch_ids);
    EXPECT_EQ(back.patients[i].matrix, s.patients[i].matrix);
  }
}

TEST(StoreFiles, TruncatedMatrixIsIntegrityError) {
  testing::TempDir dir;
  write_store(toy_store({3, 2}, 4), dir / "s");
  std::filesystem::resize_file(StorePaths::at(dir / "s").matrix, 8);
  EXPECT_THROW(read_store(dir / "s"), IntegrityError);
}

GroupingPolicy policy(int ng, Remainder r, bool shuffle = false, std::uint64_t seed = 0) {
  GroupingPolicy p;
  p.group_size = ng;
  p.remainder = r;
  p.shuffle_each_epoch = shuffle;
  p.seed = seed;
  return p;
}

TEST(MakeGroups, GroupLengthIsNgTimesNo) {
  const auto s = toy_store({8, 8}, 512);
  const auto groups = make_groups(s, policy(4, Remainder::kDrop), 0);
  ASSERT_EQ(groups.size(), 4u);
  for (const auto& g : groups) EXPECT_EQ(g.vector.size(), 2048u);
  EXPECT_EQ(policy(4, Remainder::kDrop).group_length(512), 2048);
}

TEST(MakeGroups, GroupSizeOneIsIdentity) {
  const auto s = toy_store({3, 5}, 7);
  const auto groups = make_groups(s, policy(1, Remainder::kDrop), 0);
  ASSERT_EQ(groups.size(), 8u);
  std::size_t k = 0;
  for (const auto& p : s.patients)
    for (std::size_t i = 0; i < p.rows(); ++i, ++k) {
      const auto row = s.row(p, i);
      EXPECT_EQ(groups[k].vector, std::vector<float>(row.begin(), row.end()));
      EXPECT_EQ(groups[k].member_patch_ids, std::vector<std::string>{p.patch_ids[i]});
    }
}

TEST(MakeGroups, SixPatchesDropVersusPad) {
  const auto s = toy_store({6}, 3);
  const auto dropped = make_groups(s, policy(4, Remainder::kDrop), 0);
  ASSERT_EQ(dropped.size(), 1u);
  const auto padded = make_groups(s, policy(4, Remainder::kPadResample), 0);
  ASSERT_EQ(padded.size(), 2u);
  const auto& last = padded[1].member_patch_ids;
  EXPECT_EQ(last[0], "P0_4");
  EXPECT_EQ(last[1], "P0_5");
  // The two resampled members come from the same patient.
  for (std::size_t i = 2; i < 4; ++i) EXPECT_EQ(last[i].rfind("P0_", 0), 0u);
}

TEST(MakeGroups, DropSkipsShortPatients) {
  const auto s = toy_store({3, 8}, 2);
  std::vector<std::string> skipped;
  const auto groups = make_groups(s, policy(4, Remainder::kDrop), 0, &skipped);
  EXPECT_EQ(groups.size(), 2u);
  EXPECT_EQ(skipped, std::vector<std::string>{"P0"});
}

TEST(MakeGroups, ShuffleDependsOnSeedAndEpochOnly) {
  const auto s = toy_store({16, 16}, 2);
  const auto p = policy(4, Remainder::kDrop, true, 9);
  const auto a = make_groups(s, p, 3), b = make_groups(s, p, 3), c = make_groups(s, p, 4);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].member_patch_ids, b[i].member_patch_ids);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) differs |= a[i].member_patch_ids != c[i].member_patch_ids;
  EXPECT_TRUE(differs);
}

// Shape law, purity and drop-coverage over random stores.
TEST(MakeGroups, PropertiesOnRandomStores) {
  std::mt19937_64 gen(77);
  for (int trial = 0; trial < 200; ++trial) {
    const int ng = 1 + static_cast<int>(gen() % 6), dim = 1 + static_cast<int>(gen() % 9);
    std::vector<int> counts(1 + gen() % 5);
    for (auto& c : counts) c = 1 + static_cast<int>(gen() % 13);
    const auto s = toy_store(counts, dim, gen());
    for (auto rem : {Remainder::kDrop, Remainder::kPadResample}) {
      const auto groups = make_groups(s, policy(ng, rem, true, gen()), static_cast<int>(gen() % 5));
      std::map<std::string, Label> labels;
      for (const auto& p : s.patients) labels[p.patient_id] = p.label;
      std::set<std::string> seen;
      for (const auto& g : groups) {
        ASSERT_EQ(g.vector.size(), static_cast<std::size_t>(ng * dim));
        ASSERT_EQ(g.member_patch_ids.size(), static_cast<std::size_t>(ng));
        ASSERT_EQ(g.label, labels.at(g.patient_id));
        for (const auto& m : g.member_patch_ids) {
          ASSERT_EQ(m.substr(0, m.find('_')), g.patient_id);
          if (rem == Remainder::kDrop) ASSERT_TRUE(seen.insert(m).second) << "patch used twice under drop";
        }
      }
    }
  }
}

}  // namespace
}  // namespace mocomsi
