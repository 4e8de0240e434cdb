#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

namespace ciod {

struct PRPoint {
  double threshold = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};

// Points in order of decreasing threshold; one point per distinct score.
struct PRCurve {
  std::vector<PRPoint> points;
  std::size_t positives = 0;
  std::size_t total = 0;
};

// Labels are 0 or 1. Equal scores enter the sweep together. Throws
// NoPositivesError when no label is 1.
PRCurve pr_curve(std::span<const double> scores, std::span<const std::uint8_t> labels);

// Step-wise sum of (R_k - R_{k-1}) P_k over the grouped sweep.
double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels);
double average_precision(const PRCurve& curve);

double baseline_share(std::span<const std::uint8_t> labels);

struct F1Result {
  double threshold = 0.0;
  double f1 = 0.0;
};
// Best F1 over the sweep; ties go to the lowest threshold.
F1Result max_f1(std::span<const double> scores, std::span<const std::uint8_t> labels);

void write_pr_csv(const PRCurve& curve, std::ostream& out);

}  // namespace ciod
