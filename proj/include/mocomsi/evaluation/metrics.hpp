#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "mocomsi/classifier/aggregate.hpp"
#include "mocomsi/core/error.hpp"
#include "mocomsi/datasets/label.hpp"

namespace mocomsi {

// Fraction of units whose thresholded probability (MSI iff p >= t) matches the label.
inline double thresholded_accuracy(std::span<const double> probs, std::span<const Label> labels, double t) {
  require(probs.size() == labels.size(), "accuracy: predictions and labels are not aligned");
  if (probs.empty()) throw DomainError("accuracy: no predictions");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) correct += classify_patient(probs[i], t) == labels[i];
  return static_cast<double>(correct) / static_cast<double>(probs.size());
}

// Patch-level accuracy; each patch is scored against its patient's label.
inline double patch_accuracy(const std::vector<PatchProbability>& preds,
                             const std::unordered_map<std::string, Label>& patient_labels, double t) {
  std::vector<double> p;
  std::vector<Label> l;
  for (const auto& u : preds) {
    auto it = patient_labels.find(u.patient_id);
    if (it == patient_labels.end()) throw ContractViolation("patch_accuracy: unknown patient " + u.patient_id);
    p.push_back(u.p_msi);
    l.push_back(it->second);
  }
  return thresholded_accuracy(p, l, t);
}

inline double patient_accuracy(const std::vector<PatientPrediction>& preds,
                               const std::unordered_map<std::string, Label>& patient_labels) {
  if (preds.empty()) throw DomainError("patient_accuracy: no predictions");
  std::size_t correct = 0;
  for (const auto& p : preds) {
    auto it = patient_labels.find(p.patient_id);
    if (it == patient_labels.end()) throw ContractViolation("patient_accuracy: unknown patient " + p.patient_id);
    correct += p.c_w == it->second;
  }
  return static_cast<double>(correct) / static_cast<double>(preds.size());
}

struct ScoredLabel {
  double score;  // MSI probability
  Label label;
};

struct RocPoint {
  double fpr;
  double tpr;
  double threshold;  // predictions with score >= threshold are called MSI
};

struct RocResult {
  std::vector<RocPoint> points;
  double auc = 0.0;
};

// ROC from every distinct score threshold, from (0,0) to (1,1). AUC is the
// trapezoid area, which equals the Mann-Whitney win rate with ties counted 1/2.
inline RocResult roc_auc(std::vector<ScoredLabel> scores) {
  std::size_t pos = 0, neg = 0;
  for (const auto& s : scores) (s.label == Label::kMsi ? pos : neg) += 1;
  if (pos == 0 || neg == 0) throw DomainError("roc_auc: both classes must be present");
  std::sort(scores.begin(), scores.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  RocResult r;
  r.points.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
  std::size_t tp = 0, fp = 0;
  double area2 = 0.0;  // twice the area in units of (1/neg) x (1/pos)
  for (std::size_t i = 0; i < scores.size();) {
    const double s = scores[i].score;
    const std::size_t tp0 = tp, fp0 = fp;
    for (; i < scores.size() && scores[i].score == s; ++i) (scores[i].label == Label::kMsi ? tp : fp) += 1;
    area2 += static_cast<double>(fp - fp0) * static_cast<double>(tp + tp0);
    r.points.push_back({static_cast<double>(fp) / neg, static_cast<double>(tp) / pos, s});
  }
  r.auc = area2 / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
  return r;
}

}  // namespace mocomsi
