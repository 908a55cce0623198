#pragma once

#include <cmath>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "mocomsi/core/error.hpp"
#include "mocomsi/datasets/label.hpp"
#include "mocomsi/embeddings/groups.hpp"

namespace mocomsi {

enum class Aggregation { kMeanProb, kMajorityVote };

inline std::string to_string(Aggregation a) { return a == Aggregation::kMeanProb ? "mean_prob" : "majority_vote"; }
inline Aggregation parse_aggregation(const std::string& s) {
  if (s == "mean_prob") return Aggregation::kMeanProb;
  if (s == "majority_vote") return Aggregation::kMajorityVote;
  throw ConfigError("unknown aggregation '" + s + "' (expected mean_prob or majority_vote)");
}

// A scored unit: one patch, or one group of patches.
struct UnitProbability {
  std::string unit_id;
  std::string patient_id;
  double p_msi = 0.0;
};

using PatchProbability = UnitProbability;

struct PatientPrediction {
  std::string patient_id;
  double p_w = 0.0;  // mean unit probability
  Label c_w = Label::kMss;
  double threshold = 0.5;
  Aggregation method = Aggregation::kMeanProb;
};

inline void check_probability(double p, const char* what) {
  if (!(p >= 0.0 && p <= 1.0)) throw DomainError(std::string(what) + ": probability outside [0, 1]");
}

// P_W = (1/n) * sum of the unit probabilities.
inline double patient_probability(std::span<const double> probs) {
  if (probs.empty()) throw DomainError("patient_probability: patient has no scored units");
  double s = 0.0;
  for (double p : probs) {
    check_probability(p, "patient_probability");
    s += p;
  }
  return s / static_cast<double>(probs.size());
}

// MSI iff P_W >= t.
inline Label classify_patient(double p_w, double t) { return p_w >= t ? Label::kMsi : Label::kMss; }

// Modal label; a tie goes to MSI.
inline Label majority_vote(std::span<const Label> labels) {
  if (labels.empty()) throw DomainError("majority_vote: no votes");
  std::size_t msi = 0;
  for (Label l : labels) msi += l == Label::kMsi;
  return 2 * msi >= labels.size() ? Label::kMsi : Label::kMss;
}

// Aggregates unit probabilities into one prediction per patient, in order of
// first appearance.
inline std::vector<PatientPrediction> aggregate_patients(const std::vector<UnitProbability>& units, double t,
                                                         Aggregation method) {
  std::vector<std::string> order;
  std::unordered_map<std::string, std::vector<double>> by_patient;
  for (const auto& u : units) {
    auto [it, inserted] = by_patient.try_emplace(u.patient_id);
    if (inserted) order.push_back(u.patient_id);
    it->second.push_back(u.p_msi);
  }
  std::vector<PatientPrediction> out;
  out.reserve(order.size());
  for (const auto& pid : order) {
    const auto& probs = by_patient[pid];
    PatientPrediction pred{pid, patient_probability(probs), Label::kMss, t, method};
    if (method == Aggregation::kMeanProb) {
      pred.c_w = classify_patient(pred.p_w, t);
    } else {
      std::vector<Label> votes;
      votes.reserve(probs.size());
      for (double p : probs) votes.push_back(p >= t ? Label::kMsi : Label::kMss);
      pred.c_w = majority_vote(votes);
    }
    out.push_back(std::move(pred));
  }
  return out;
}

// Each member patch takes its group's probability; a patch appearing in
// several groups gets the mean over them.
inline std::vector<PatchProbability> patch_predictions_from_groups(const std::vector<GroupSample>& groups,
                                                                   std::span<const double> group_probs) {
  require(groups.size() == group_probs.size(), "patch_predictions_from_groups: size mismatch");
  struct Acc {
    std::string patient_id;
    double sum = 0.0;
    int n = 0;
  };
  std::vector<std::string> order;
  std::unordered_map<std::string, Acc> acc;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    for (const auto& pid : groups[g].member_patch_ids) {
      auto [it, inserted] = acc.try_emplace(pid, Acc{groups[g].patient_id});
      if (inserted) order.push_back(pid);
      it->second.sum += group_probs[g];
      ++it->second.n;
    }
  }
  std::vector<PatchProbability> out;
  out.reserve(order.size());
  for (const auto& pid : order) {
    const auto& a = acc[pid];
    out.push_back({pid, a.patient_id, a.sum / a.n});
  }
  return out;
}

}  // namespace mocomsi
