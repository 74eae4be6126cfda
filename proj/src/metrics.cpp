#include "fabme/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <string>
#include <unordered_map>

namespace fabme {

bool Box::valid() const {
  return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2) && x1 < x2 && y1 < y2;
}

double iou(const Box& a, const Box& b) {
  if (!a.valid() || !b.valid()) throw Error("iou: degenerate box");
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

double average_precision(std::span<const double> recall, std::span<const double> precision,
                         ApInterpolation interpolation) {
  if (recall.size() != precision.size()) throw Error("average_precision: recall/precision size mismatch");
  const std::size_t n = recall.size();
  if (n == 0) return 0.0;

  if (interpolation == ApInterpolation::AllPoint) {
    // Monotone envelope from the right, then integrate over recall steps.
    std::vector<double> env(precision.begin(), precision.end());
    for (std::size_t i = n - 1; i-- > 0;) env[i] = std::max(env[i], env[i + 1]);
    double ap = 0.0;
    double prev_recall = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      ap += (recall[i] - prev_recall) * env[i];
      prev_recall = recall[i];
    }
    return ap;
  }

  const int points = interpolation == ApInterpolation::ElevenPoint ? 11 : 101;
  double ap = 0.0;
  for (int k = 0; k < points; ++k) {
    const double r = static_cast<double>(k) / (points - 1);
    double best = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      if (recall[i] >= r - 1e-12) best = std::max(best, precision[i]);
    ap += best;
  }
  return ap / points;
}

ClassResult match_and_ap(std::span<const Detection> detections, std::span<const GroundTruth> truths,
                         int class_id, double iou_threshold, ApInterpolation interpolation) {
  ClassResult result;
  result.class_id = class_id;

  std::unordered_map<Index, std::vector<std::size_t>> gts_by_image;
  for (std::size_t i = 0; i < truths.size(); ++i) {
    if (truths[i].class_id != class_id) continue;
    gts_by_image[truths[i].image].push_back(i);
    ++result.n_gt;
  }
  std::vector<bool> used(truths.size(), false);

  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < detections.size(); ++i)
    if (detections[i].class_id == class_id) order.push_back(i);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return detections[a].confidence > detections[b].confidence;
  });

  Index tp = 0;
  Index fp = 0;
  for (std::size_t idx : order) {
    const Detection& det = detections[idx];
    std::size_t best = truths.size();
    double best_iou = iou_threshold;
    if (auto it = gts_by_image.find(det.image); it != gts_by_image.end()) {
      for (std::size_t g : it->second) {
        if (used[g]) continue;
        const double v = iou(det.box, truths[g].box);
        if (v >= best_iou && (best == truths.size() || v > best_iou)) {
          best = g;
          best_iou = v;
        }
      }
    }
    if (best != truths.size()) {
      used[best] = true;
      ++tp;
    } else {
      ++fp;
    }
    result.precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    result.recall.push_back(result.n_gt > 0 ? static_cast<double>(tp) / static_cast<double>(result.n_gt) : 0.0);
  }
  result.n_tp = tp;
  result.n_fp = fp;
  result.ap = result.n_gt > 0 ? average_precision(result.recall, result.precision, interpolation) : 0.0;
  return result;
}

EvalReport map50(std::span<const Detection> detections, std::span<const GroundTruth> truths, int num_classes,
                 double iou_threshold, ApInterpolation interpolation) {
  if (truths.empty()) throw Error("map50: no ground truth boxes");
  auto check_class = [num_classes](int c, const char* what) {
    if (c < 1 || c > num_classes) {
      throw Error(std::string("map50: ") + what + " class id " + std::to_string(c) + " outside 1.." +
                  std::to_string(num_classes));
    }
  };
  std::vector<bool> present(static_cast<std::size_t>(num_classes) + 1, false);
  for (const auto& g : truths) {
    check_class(g.class_id, "ground truth");
    present[static_cast<std::size_t>(g.class_id)] = true;
  }
  for (const auto& d : detections) check_class(d.class_id, "detection");

  EvalReport report;
  for (int c = 1; c <= num_classes; ++c) {
    if (!present[static_cast<std::size_t>(c)]) {
      for (const auto& d : detections) report.fp += d.class_id == c;
      continue;
    }
    ClassResult r = match_and_ap(detections, truths, c, iou_threshold, interpolation);
    report.tp += r.n_tp;
    report.fp += r.n_fp;
    report.fn += r.n_gt - r.n_tp;
    report.classes.push_back(std::move(r));
  }
  double sum = 0.0;
  for (const auto& r : report.classes) sum += r.ap;
  report.map50 = sum / static_cast<double>(report.classes.size());
  return report;
}

void write_report_csv(std::ostream& out, const EvalReport& report) {
  const auto old_precision = out.precision(10);
  out << "class_id,n_gt,n_tp,n_fp,AP\n";
  for (const auto& r : report.classes) {
    out << r.class_id << ',' << r.n_gt << ',' << r.n_tp << ',' << r.n_fp << ',' << r.ap << '\n';
  }
  out << "mAP@0.5," << report.map50 << '\n';
  out.precision(old_precision);
}

}  // namespace fabme
