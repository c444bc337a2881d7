#include "boxseg/metrics.hpp"

#include <cmath>
#include <cstdio>

namespace boxseg {

ConfusionCounts confusion_counts(std::span<const uint8_t> pred, std::span<const uint8_t> gt) {
  if (pred.size() != gt.size())
    throw VolumeError("metrics: shape mismatch (" + std::to_string(pred.size()) + " vs " + std::to_string(gt.size()) + " voxels)");
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

ConfusionCounts confusion_counts(const Volume& pred, const Volume& gt) {
  if (!(pred.shape() == gt.shape()))
    throw VolumeError("metrics: shape mismatch " + to_string(pred.shape()) + " vs " + to_string(gt.shape()));
  return confusion_counts(pred.label_data(), gt.label_data());
}

namespace {

double ratio(uint64_t num, uint64_t den) {
  return den == 0 ? 100.0 : 100.0 * static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

CaseScore score_counts(const ConfusionCounts& c, std::string case_id) {
  return {std::move(case_id), ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn), ratio(c.tp, c.tp + c.fp + c.fn),
          ratio(c.tp, c.tp + c.fn), ratio(c.tp, c.tp + c.fp)};
}

CaseScore score_case(const Volume& pred, const Volume& gt, std::string case_id) {
  return score_counts(confusion_counts(pred, gt), std::move(case_id));
}

FoldSummary aggregate_fold(std::span<const CaseScore> scores) {
  if (scores.empty()) throw VolumeError("aggregate: empty score list");
  const double n = static_cast<double>(scores.size());
  auto stats = [&](double CaseScore::*field, double& mean, double& sd) {
    double sum = 0.0;
    for (const auto& s : scores) sum += s.*field;
    mean = sum / n;
    double ss = 0.0;
    for (const auto& s : scores) ss += (s.*field - mean) * (s.*field - mean);
    sd = scores.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  };
  FoldSummary f;
  f.mean.case_id = "mean";
  f.std.case_id = "std";
  stats(&CaseScore::dsc, f.mean.dsc, f.std.dsc);
  stats(&CaseScore::jaccard, f.mean.jaccard, f.std.jaccard);
  stats(&CaseScore::recall, f.mean.recall, f.std.recall);
  stats(&CaseScore::precision, f.mean.precision, f.std.precision);
  return f;
}

std::string metrics_csv(std::span<const CaseScore> scores) {
  std::string out = "case_id,dsc,jaccard,recall,precision\n";
  auto row = [&](const CaseScore& s) {
    char buf[160];
    std::snprintf(buf, sizeof buf, ",%.2f,%.2f,%.2f,%.2f\n", s.dsc, s.jaccard, s.recall, s.precision);
    out += s.case_id + buf;
  };
  for (const auto& s : scores) row(s);
  if (!scores.empty()) {
    const auto f = aggregate_fold(scores);
    row(f.mean);
    row(f.std);
  }
  return out;
}

}  // namespace boxseg
