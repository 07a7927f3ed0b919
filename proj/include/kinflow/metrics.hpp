#pragma once

#include <optional>
#include <string>

#include "kinflow/core.hpp"

namespace kinflow::metrics {

/// Outlier rule thresholds for Fl-all: EPE > 3 px and EPE / |gt| > 5 %.
inline constexpr double kFlAbsThreshold = 3.0;
inline constexpr double kFlRelThreshold = 0.05;

/// Bucket edges on ground-truth magnitude; buckets are half-open [lo, hi).
inline constexpr double kBucketLow = 10.0;
inline constexpr double kBucketHigh = 40.0;

struct MetricReport {
  double epe = 0.0;
  double fl_all = 0.0;  // percent
  std::optional<double> s0_10;
  std::optional<double> s10_40;
  std::optional<double> s40plus;
  double frac_1px = 0.0;
  double frac_3px = 0.0;
  double frac_5px = 0.0;
  int64_t n_valid = 0;
};

struct Buckets {
  std::optional<double> s0_10, s10_40, s40plus;
};

struct PixelFractions {
  double frac_1px = 0.0, frac_3px = 0.0, frac_5px = 0.0;
};

/// Per-pixel end-point error as float64 [H, W]; NaN where gt is invalid.
Tensor epe_map(const FlowField& pred, const FlowField& gt);

double epe(const FlowField& pred, const FlowField& gt);
double fl_all(const FlowField& pred, const FlowField& gt);
Buckets bucketed_epe(const FlowField& pred, const FlowField& gt);
PixelFractions px_fractions(const FlowField& pred, const FlowField& gt);

/// All metrics for one pair.
MetricReport evaluate_pair(const FlowField& pred, const FlowField& gt);

/// Pools valid pixels over many pairs; every aggregate is a per-pixel mean
/// over the union of valid pixels.
class MetricAccumulator {
 public:
  void add(const FlowField& pred, const FlowField& gt);
  MetricReport report() const;  // EmptyValidSet when nothing was added
  int64_t n_valid() const noexcept { return n_; }

 private:
  double epe_sum_ = 0.0;
  int64_t n_ = 0;
  int64_t outliers_ = 0;
  int64_t over1_ = 0, over3_ = 0, over5_ = 0;
  double bucket_sum_[3] = {0, 0, 0};
  int64_t bucket_n_[3] = {0, 0, 0};
};

/// One "key value" line per field; empty buckets are written as "NA".
std::string to_text(const MetricReport& report);
MetricReport report_from_text(const std::string& text);  // throws FormatError

std::string csv_header();
std::string to_csv_row(const MetricReport& report);

}  // namespace kinflow::metrics
