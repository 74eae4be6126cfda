#pragma once

#include <iosfwd>
#include <span>
#include <vector>

#include "fabme/tensor.hpp"

namespace fabme {

/// Absolute corner coordinates, x1 < x2 and y1 < y2.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  bool valid() const;
};

/// Throws on a degenerate box.
double iou(const Box& a, const Box& b);

struct Detection {
  Index image = 0;
  int class_id = 1;
  Box box;
  double confidence = 0.0;
};

struct GroundTruth {
  Index image = 0;
  int class_id = 1;
  Box box;
};

enum class ApInterpolation { AllPoint, ElevenPoint, HundredOnePoint };

/// Area under a precision-recall curve given in ranked order.
double average_precision(std::span<const double> recall, std::span<const double> precision,
                         ApInterpolation interpolation = ApInterpolation::AllPoint);

struct ClassResult {
  int class_id = 0;
  Index n_gt = 0;
  Index n_tp = 0;
  Index n_fp = 0;
  double ap = 0.0;
  std::vector<double> precision;
  std::vector<double> recall;
};

/// Greedy per-class matching: detections in descending confidence (stable),
/// each taking the highest-IoU unmatched ground truth of its image with IoU >=
/// iou_threshold. Detections and ground truths of other classes are ignored.
ClassResult match_and_ap(std::span<const Detection> detections, std::span<const GroundTruth> truths,
                         int class_id, double iou_threshold = 0.5,
                         ApInterpolation interpolation = ApInterpolation::AllPoint);

struct EvalReport {
  std::vector<ClassResult> classes;  ///< classes with at least one ground truth
  double map50 = 0.0;
  Index tp = 0;
  Index fp = 0;
  Index fn = 0;
};

/// Mean AP over classes present in the ground truth. Class ids must lie in
/// 1..num_classes; an empty ground truth set is an error.
EvalReport map50(std::span<const Detection> detections, std::span<const GroundTruth> truths,
                 int num_classes = 20, double iou_threshold = 0.5,
                 ApInterpolation interpolation = ApInterpolation::AllPoint);

/// class_id,n_gt,n_tp,n_fp,AP rows followed by a "mAP@0.5,<value>" line.
void write_report_csv(std::ostream& out, const EvalReport& report);

}  // namespace fabme
