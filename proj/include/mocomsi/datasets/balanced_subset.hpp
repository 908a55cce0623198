#pragma once

#include <algorithm>
#include <boost/dynamic_bitset.hpp>
#include <cstdlib>
#include <limits>
#include <string>
#include <unordered_set>
#include <vector>

#include "mocomsi/core/error.hpp"
#include "mocomsi/datasets/manifest.hpp"

namespace mocomsi {

namespace detail {

struct Candidate {
  std::string patient_id;
  std::size_t patches;
};

// reach[i][j] holds every total reachable by picking exactly j patients from
// candidates[i..]. Built back to front so reconstruction can walk forwards.
class ExactCountSums {
 public:
  ExactCountSums(const std::vector<Candidate>& cands, std::size_t pick) : cands_(cands), pick_(pick) {
    std::size_t total = 0;
    for (const auto& c : cands) total += c.patches;
    const std::size_t n = cands.size();
    reach_.assign(n + 1, std::vector<boost::dynamic_bitset<>>(pick + 1, boost::dynamic_bitset<>(total + 1)));
    reach_[n][0].set(0);
    for (std::size_t i = n; i-- > 0;) {
      for (std::size_t j = 0; j <= pick; ++j) {
        reach_[i][j] = reach_[i + 1][j];
        if (j > 0) reach_[i][j] |= reach_[i + 1][j - 1] << cands[i].patches;
      }
    }
  }

  std::vector<std::size_t> totals() const {
    std::vector<std::size_t> out;
    const auto& b = reach_[0][pick_];
    for (auto pos = b.find_first(); pos != boost::dynamic_bitset<>::npos; pos = b.find_next(pos)) {
      out.push_back(pos);
    }
    return out;
  }

  // Walks candidates in their (patch count desc, id asc) order and takes each
  // one whenever the remaining target is still reachable.
  std::vector<std::string> reconstruct(std::size_t target) const {
    std::vector<std::string> chosen;
    std::size_t need = pick_;
    for (std::size_t i = 0; i < cands_.size() && need > 0; ++i) {
      const auto c = cands_[i].patches;
      if (target >= c && reach_[i + 1][need - 1].test(target - c)) {
        chosen.push_back(cands_[i].patient_id);
        target -= c;
        --need;
      }
    }
    return chosen;
  }

 private:
  const std::vector<Candidate>& cands_;
  std::size_t pick_;
  std::vector<std::vector<boost::dynamic_bitset<>>> reach_;
};

}  // namespace detail

// Picks n_per_class patients of each class from one split so the two classes'
// total patch counts are as close as possible. Among equally close selections
// the larger combined patch count wins, then patients are preferred by patch
// count (descending) and patient id. The returned manifest holds only the
// selected patients; the input is left untouched.
inline DatasetManifest build_balanced_subset(const DatasetManifest& manifest, std::size_t n_per_class,
                                             Split split = Split::kValidation) {
  std::array<std::vector<detail::Candidate>, 2> pools;
  for (const auto& p : patients_of(manifest, split)) {
    pools[index_of(p.label)].push_back({p.patient_id, p.entry_rows.size()});
  }
  for (auto& pool : pools) {
    std::sort(pool.begin(), pool.end(), [](const auto& a, const auto& b) {
      return a.patches != b.patches ? a.patches > b.patches : a.patient_id < b.patient_id;
    });
  }
  if (pools[0].size() < n_per_class || pools[1].size() < n_per_class) {
    throw CapacityError("balanced subset needs " + std::to_string(n_per_class) +
                        " patients per class; available MSS=" + std::to_string(pools[0].size()) +
                        " MSI=" + std::to_string(pools[1].size()));
  }
  detail::ExactCountSums mss(pools[0], n_per_class), msi(pools[1], n_per_class);
  const auto a_totals = mss.totals();
  const auto b_totals = msi.totals();

  std::size_t best_a = 0, best_b = 0;
  std::size_t best_gap = std::numeric_limits<std::size_t>::max();
  auto consider = [&](std::size_t a, std::size_t b) {
    const std::size_t gap = a > b ? a - b : b - a;
    const bool better = gap < best_gap || (gap == best_gap && (a + b > best_a + best_b ||
                                                               (a + b == best_a + best_b && a > best_a)));
    if (better) {
      best_gap = gap;
      best_a = a;
      best_b = b;
    }
  };
  for (auto a : a_totals) {
    auto it = std::lower_bound(b_totals.begin(), b_totals.end(), a);
    if (it != b_totals.end()) consider(a, *it);
    if (it != b_totals.begin()) consider(a, *std::prev(it));
  }

  std::unordered_set<std::string> keep;
  for (auto& id : mss.reconstruct(best_a)) keep.insert(std::move(id));
  for (auto& id : msi.reconstruct(best_b)) keep.insert(std::move(id));
  return restrict_to(manifest, keep);
}

}  // namespace mocomsi
