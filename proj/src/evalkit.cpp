#include "ciodetect/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <string>

#include "ciodetect/csv.hpp"
#include "ciodetect/error.hpp"

namespace ciod {

PRCurve pr_curve(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw ConfigError("scores and labels differ in length");
  PRCurve curve;
  curve.total = labels.size();
  for (std::uint8_t y : labels) curve.positives += (y != 0);
  if (curve.positives == 0) throw NoPositivesError("no positive labels");
  for (double s : scores) {
    if (!std::isfinite(s)) throw NonFiniteError("non-finite score");
  }

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  std::size_t tp = 0;
  std::size_t seen = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    const double threshold = scores[order[i]];
    while (i < order.size() && scores[order[i]] == threshold) {
      tp += (labels[order[i]] != 0);
      ++seen;
      ++i;
    }
    curve.points.push_back({threshold, static_cast<double>(tp) / static_cast<double>(seen),
                            static_cast<double>(tp) / static_cast<double>(curve.positives)});
  }
  return curve;
}

double average_precision(const PRCurve& curve) {
  double ap = 0.0;
  double prev_recall = 0.0;
  for (const PRPoint& p : curve.points) {
    ap += (p.recall - prev_recall) * p.precision;
    prev_recall = p.recall;
  }
  return ap;
}

double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  return average_precision(pr_curve(scores, labels));
}

double baseline_share(std::span<const std::uint8_t> labels) {
  if (labels.empty()) throw ConfigError("baseline_share needs at least one label");
  std::size_t pos = 0;
  for (std::uint8_t y : labels) pos += (y != 0);
  return static_cast<double>(pos) / static_cast<double>(labels.size());
}

F1Result max_f1(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  const PRCurve curve = pr_curve(scores, labels);
  F1Result best{curve.points.front().threshold, -1.0};
  for (const PRPoint& p : curve.points) {
    const double denom = p.precision + p.recall;
    const double f1 = denom > 0 ? 2.0 * p.precision * p.recall / denom : 0.0;
    if (f1 >= best.f1) best = {p.threshold, f1};
  }
  return best;
}

void write_pr_csv(const PRCurve& curve, std::ostream& out) {
  std::string text = "threshold,precision,recall\n";
  for (const PRPoint& p : curve.points) {
    csv::append_double(text, p.threshold);
    text += ',';
    csv::append_double(text, p.precision);
    text += ',';
    csv::append_double(text, p.recall);
    text += '\n';
  }
  out << text;
}

}  // namespace ciod
