#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "mocomsi/classifier/aggregate.hpp"
#include "mocomsi/classifier/baseline.hpp"
#include "mocomsi/classifier/head.hpp"
#include "mocomsi/embeddings/groups.hpp"
#include "mocomsi/evaluation/metrics.hpp"
#include "mocomsi/evaluation/report.hpp"

namespace mocomsi {

struct Evaluation {
  EvalReport report;
  std::vector<UnitProbability> units;  // what the patient decision was built from
  std::vector<PatchProbability> patches;
  std::vector<PatientPrediction> patients;
};

using LabelMap = std::unordered_map<std::string, Label>;

inline std::vector<ScoredLabel> scored(const std::vector<UnitProbability>& units, const LabelMap& labels) {
  std::vector<ScoredLabel> out;
  out.reserve(units.size());
  for (const auto& u : units) out.push_back({u.p_msi, labels.at(u.patient_id)});
  return out;
}

inline std::vector<ScoredLabel> scored(const std::vector<PatientPrediction>& preds, const LabelMap& labels) {
  std::vector<ScoredLabel> out;
  out.reserve(preds.size());
  for (const auto& p : preds) out.push_back({p.p_w, labels.at(p.patient_id)});
  return out;
}

// Shared tail of both methods: per-patch metrics from `patches`, patient
// decisions from `units` (mean probability vs threshold, or majority vote).
inline Evaluation finish_evaluation(std::string method, std::vector<UnitProbability> units,
                                    std::vector<PatchProbability> patches, const LabelMap& labels, double t,
                                    Aggregation aggregation, std::uint64_t seed) {
  Evaluation ev;
  ev.patients = aggregate_patients(units, t, aggregation);
  auto& r = ev.report;
  r.method = std::move(method);
  r.run_seed = seed;
  r.threshold = t;
  r.aggregation = to_string(aggregation);
  r.a_patch = patch_accuracy(patches, labels, t);
  r.a_patient = patient_accuracy(ev.patients, labels);
  auto patch_roc = roc_auc(scored(patches, labels));
  r.auc_patch = patch_roc.auc;
  r.roc_patch = std::move(patch_roc.points);
  auto patient_roc = roc_auc(scored(ev.patients, labels));
  r.auc_patient = patient_roc.auc;
  r.roc_patient = std::move(patient_roc.points);
  r.n_patients = ev.patients.size();
  r.n_patches = patches.size();
  ev.units = std::move(units);
  ev.patches = std::move(patches);
  return ev;
}

inline LabelMap labels_of(const EmbeddingStore& store) {
  LabelMap m;
  for (const auto& p : store.patients) m[p.patient_id] = p.label;
  return m;
}

inline LabelMap labels_of(const std::vector<PatientRecord>& patients) {
  LabelMap m;
  for (const auto& p : patients) m[p.patient_id] = p.label;
  return m;
}

// Grouped method: head probabilities per validation group, extrapolated to
// patches; patients are decided from group probabilities by default.
inline Evaluation evaluate_grouped(GroupHead& head, const std::vector<GroupSample>& groups, const LabelMap& labels,
                                   double t, Aggregation aggregation, bool patient_from_patches, std::uint64_t seed) {
  if (groups.empty()) throw DomainError("evaluate_grouped: no validation groups");
  const auto probs = predict_groups(head, groups);
  auto patches = patch_predictions_from_groups(groups, probs);
  std::vector<UnitProbability> units;
  if (patient_from_patches) {
    units = patches;
  } else {
    units.reserve(groups.size());
    for (std::size_t i = 0; i < groups.size(); ++i) {
      std::string id;
      for (const auto& m : groups[i].member_patch_ids) id += (id.empty() ? "" : "+") + m;
      units.push_back({id, groups[i].patient_id, probs[i]});
    }
  }
  auto ev = finish_evaluation("grouped", std::move(units), std::move(patches), labels, t, aggregation, seed);
  ev.report.a_group = group_accuracy(probs, groups, t);
  return ev;
}

inline Evaluation evaluate_baseline(PatchClassifier& model, const std::vector<PatientRecord>& patients, int input_size,
                                    const AugmentConfig& norm, double t, Aggregation aggregation, std::uint64_t seed) {
  auto patches = predict_patches(model, patients, input_size, norm);
  auto units = patches;
  return finish_evaluation("baseline", std::move(units), std::move(patches), labels_of(patients), t, aggregation, seed);
}

}  // namespace mocomsi
