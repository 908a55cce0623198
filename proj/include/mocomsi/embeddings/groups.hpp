#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"
#include "mocomsi/core/error.hpp"
#include "mocomsi/core/rng.hpp"
#include "mocomsi/embeddings/store.hpp"

namespace mocomsi {

enum class Remainder { kDrop, kPadResample };

inline std::string to_string(Remainder r) { return r == Remainder::kDrop ? "drop" : "pad_resample"; }
inline Remainder parse_remainder(const std::string& s) {
  if (s == "drop") return Remainder::kDrop;
  if (s == "pad_resample") return Remainder::kPadResample;
  throw ConfigError("unknown remainder policy '" + s + "' (expected drop or pad_resample)");
}

struct GroupingPolicy {
  int group_size = 4;  // n_g
  Remainder remainder = Remainder::kPadResample;
  bool shuffle_each_epoch = true;
  std::uint64_t seed = 0;

  void validate() const {
    if (group_size < 1) throw ConfigError("grouping: group_size must be >= 1");
  }
  int group_length(int dim) const { return group_size * dim; }  // l_g = n_g * n_o
};

inline void to_json(nlohmann::json& j, const GroupingPolicy& p) {
  j = {{"group_size", p.group_size}, {"remainder", to_string(p.remainder)},
       {"shuffle_each_epoch", p.shuffle_each_epoch}, {"seed", p.seed}};
}
inline void from_json(const nlohmann::json& j, GroupingPolicy& p) {
  j.at("group_size").get_to(p.group_size);
  p.remainder = parse_remainder(j.at("remainder").get<std::string>());
  j.at("shuffle_each_epoch").get_to(p.shuffle_each_epoch);
  j.at("seed").get_to(p.seed);
}

struct GroupSample {
  std::vector<float> vector;  // n_g * n_o
  Label label = Label::kMss;
  std::string patient_id;
  std::vector<std::string> member_patch_ids;  // n_g entries, in concatenation order
};

// Per patient: optionally permute the patch order with (seed, epoch), chunk
// into consecutive n_g-tuples and concatenate each tuple's embeddings. A short
// final chunk is dropped or topped up by resampling the patient's own patches.
// Groups never mix patients.
inline std::vector<GroupSample> make_groups(const EmbeddingStore& store, const GroupingPolicy& policy, int epoch,
                                            std::vector<std::string>* skipped = nullptr) {
  policy.validate();
  const auto ng = static_cast<std::size_t>(policy.group_size);
  const auto dim = static_cast<std::size_t>(store.dim);
  const RngStream epoch_stream = RngStream(policy.seed).split(0x67726f7570).split(static_cast<std::uint64_t>(epoch));
  std::vector<GroupSample> out;
  for (std::size_t pi = 0; pi < store.patients.size(); ++pi) {
    const auto& p = store.patients[pi];
    const std::size_t n = p.rows();
    if (n == 0) throw ContractViolation("make_groups: patient " + p.patient_id + " has no patches");
    if (policy.remainder == Remainder::kDrop && n < ng) {
      if (skipped) skipped->push_back(p.patient_id);
      continue;
    }
    auto gen = epoch_stream.split(pi).engine();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (policy.shuffle_each_epoch) shuffle(order.begin(), order.end(), gen);

    const std::size_t full = n / ng;
    const std::size_t rest = n % ng;
    std::vector<std::vector<std::size_t>> members;
    for (std::size_t g = 0; g < full; ++g) members.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(g * ng),
                                                               order.begin() + static_cast<std::ptrdiff_t>((g + 1) * ng));
    if (rest > 0 && policy.remainder == Remainder::kPadResample) {
      std::vector<std::size_t> last(order.begin() + static_cast<std::ptrdiff_t>(full * ng), order.end());
      while (last.size() < ng) last.push_back(static_cast<std::size_t>(uniform_index(gen, n)));
      members.push_back(std::move(last));
    }
    for (const auto& m : members) {
      GroupSample g{{}, p.label, p.patient_id, {}};
      g.vector.reserve(ng * dim);
      for (auto row : m) {
        const auto r = store.row(p, row);
        g.vector.insert(g.vector.end(), r.begin(), r.end());
        g.member_patch_ids.push_back(p.patch_ids[row]);
      }
      out.push_back(std::move(g));
    }
  }
  return out;
}

}  // namespace mocomsi
