#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "boxseg/volume.hpp"

namespace boxseg {

struct ConfusionCounts {
  uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
  uint64_t total() const { return tp + fp + fn + tn; }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

ConfusionCounts confusion_counts(std::span<const uint8_t> pred, std::span<const uint8_t> gt);
ConfusionCounts confusion_counts(const Volume& pred, const Volume& gt);

// All four on the 0-100 scale.
struct CaseScore {
  std::string case_id;
  double dsc = 0.0;
  double jaccard = 0.0;
  double recall = 0.0;
  double precision = 0.0;
};

/// A ratio with a zero denominator scores 100 (both masks empty gives all
/// 100; an empty prediction against nonempty truth keeps precision 100).
CaseScore score_counts(const ConfusionCounts& c, std::string case_id = {});
CaseScore score_case(const Volume& pred, const Volume& gt, std::string case_id = {});

struct FoldSummary {
  CaseScore mean;
  CaseScore std;  // sample standard deviation, 0 for a single case
};

FoldSummary aggregate_fold(std::span<const CaseScore> scores);

/// `case_id,dsc,jaccard,recall,precision`, one row per case, then `mean` and
/// `std` rows; two decimals.
std::string metrics_csv(std::span<const CaseScore> scores);

}  // namespace boxseg
