#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "vseg/error.hpp"
#include "vseg/image.hpp"
#include "vseg/postprocess.hpp"

namespace vseg {

enum class EmptyDsc { one, error };

/// 2|A n B| / (|A| + |B|).
inline double dsc(const Mask& pred, const Mask& gt, EmptyDsc both_empty = EmptyDsc::one) {
  require_same_size(pred, gt, "dsc");
  require_binary(pred, "dsc");
  require_binary(gt, "dsc");
  std::size_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    a += pred[i];
    b += gt[i];
    both += pred[i] & gt[i];
  }
  if (a + b == 0) {
    if (both_empty == EmptyDsc::error) throw Error("dsc: both masks are empty");
    return 1.0;
  }
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

inline double centroid_error(Point pred, Point gt) { return std::hypot(pred.x - gt.x, pred.y - gt.y); }

/// Pixel distance between centroids; a failed prediction sits at (0, 0).
inline double centroid_error(const VeinMask& pred, const Mask& gt) {
  if (count_foreground(gt) == 0) throw Error("centroid_error: ground-truth mask is empty");
  const Point g = centroid(gt);
  const Point p = pred.failed ? Point{0, 0} : centroid(pred.mask);
  return centroid_error(p, g);
}

struct ImageResult {
  std::string image_id;
  double dsc = 0;
  double centroid_error = 0;
  bool failed = false;
};

/// Percentage of failed images.
inline double failure_rate(const std::vector<ImageResult>& results) {
  if (results.empty()) throw Error("failure_rate: no results");
  std::size_t f = 0;
  for (const auto& r : results) f += r.failed ? 1 : 0;
  return 100.0 * static_cast<double>(f) / static_cast<double>(results.size());
}

inline double failure_rate(std::size_t failures, std::size_t total) {
  if (total == 0) throw Error("failure_rate: no results");
  if (failures > total) throw Error("failure_rate: more failures than images");
  return 100.0 * static_cast<double>(failures) / static_cast<double>(total);
}

struct MeanStd {
  double mean = 0;
  double std = 0;
};

/// Mean and population standard deviation.
inline MeanStd mean_std(const std::vector<double>& v) {
  if (v.empty()) throw Error("mean_std: empty input");
  double s = 0;
  for (double x : v) s += x;
  const double m = s / static_cast<double>(v.size());
  double q = 0;
  for (double x : v) q += (x - m) * (x - m);
  return {m, std::sqrt(q / static_cast<double>(v.size()))};
}

struct FoldReport {
  std::size_t fold = 0;
  std::vector<ImageResult> images;

  std::vector<double> dscs() const {
    std::vector<double> v;
    for (const auto& r : images) v.push_back(r.dsc);
    return v;
  }
  std::vector<double> centroid_errors() const {
    std::vector<double> v;
    for (const auto& r : images) v.push_back(r.centroid_error);
    return v;
  }
  std::size_t failures() const {
    std::size_t f = 0;
    for (const auto& r : images) f += r.failed ? 1 : 0;
    return f;
  }
  MeanStd dsc_summary() const { return mean_std(dscs()); }
  MeanStd centroid_summary() const { return mean_std(centroid_errors()); }
  double failure_rate() const { return vseg::failure_rate(images); }
};

struct SummaryRow {
  std::string fold;  // fold index or "all"
  MeanStd dsc;
  MeanStd centroid;
  double failure_rate = 0;
};

/// Aggregate over folds: means are the mean of fold means, std is over the pooled
/// per-image values, failure rate is the mean of fold rates.
inline SummaryRow aggregate(const std::vector<FoldReport>& folds) {
  if (folds.empty()) throw Error("aggregate: no folds");
  SummaryRow row{"all", {}, {}, 0};
  std::vector<double> all_d, all_c;
  for (const auto& f : folds) {
    row.dsc.mean += f.dsc_summary().mean;
    row.centroid.mean += f.centroid_summary().mean;
    row.failure_rate += f.failure_rate();
    for (double d : f.dscs()) all_d.push_back(d);
    for (double c : f.centroid_errors()) all_c.push_back(c);
  }
  const double k = static_cast<double>(folds.size());
  row.dsc.mean /= k;
  row.centroid.mean /= k;
  row.failure_rate /= k;
  row.dsc.std = mean_std(all_d).std;
  row.centroid.std = mean_std(all_c).std;
  return row;
}

inline std::vector<SummaryRow> summarize(const std::vector<FoldReport>& folds) {
  std::vector<SummaryRow> rows;
  for (const auto& f : folds)
    rows.push_back({std::to_string(f.fold), f.dsc_summary(), f.centroid_summary(), f.failure_rate()});
  rows.push_back(aggregate(folds));
  return rows;
}

}  // namespace vseg
