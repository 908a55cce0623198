#pragma once

#include <string>
#include <string_view>

#include "mocomsi/core/error.hpp"

namespace mocomsi {

// MSI is the positive class everywhere probabilities or ROC curves appear.
enum class Label { kMss = 0, kMsi = 1 };

enum class Split { kTrain = 0, kValidation = 1 };

inline constexpr int index_of(Label l) noexcept { return static_cast<int>(l); }
inline constexpr int index_of(Split s) noexcept { return static_cast<int>(s); }

inline std::string_view to_string(Label l) { return l == Label::kMsi ? "MSI" : "MSS"; }
inline std::string_view to_string(Split s) { return s == Split::kTrain ? "train" : "validation"; }

inline Label parse_label(std::string_view s) {
  if (s == "MSS") return Label::kMss;
  if (s == "MSI" || s == "MSIMUT") return Label::kMsi;
  throw ParseError("unknown label '" + std::string(s) + "' (expected MSS or MSI)");
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::kTrain;
  if (s == "validation" || s == "val") return Split::kValidation;
  throw ParseError("unknown split '" + std::string(s) + "' (expected train or validation)");
}

}  // namespace mocomsi
