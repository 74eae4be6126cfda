#pragma once

#include <functional>
#include <span>
#include <string>

#include "fabme/tensor.hpp"

namespace fabme {

struct GradCheckOptions {
  double eps = 1e-5;
  double tol = 1e-5;
  /// Denominator floor of the relative error, so that entries whose true
  /// gradient is ~0 are judged on absolute error instead.
  double floor = 1e-3;
  std::uint64_t seed = 0x5eed;
};

struct GradCheckReport {
  bool passed = false;
  double max_rel_err = 0.0;
  std::string worst;    ///< "<name>[<flat index>]" of the worst entry
  std::string failure;  ///< set when evaluation produced non-finite values
  Index checked = 0;    ///< number of scalar entries compared
};

struct GradTarget {
  std::string name;
  Tensor tensor;
};

/// Compares reverse-mode gradients with central differences.
///
/// `f` is re-evaluated for every perturbation. A non-scalar output is reduced
/// with a fixed random cotangent (drawn from `seed`), so all output entries
/// contribute; a scalar output is used as-is. Every target must be a leaf.
/// Per-entry error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
GradCheckReport grad_check(const std::function<Tensor()>& f, std::span<const GradTarget> targets,
                           const GradCheckOptions& options = {});

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           double eps = 1e-5, double tol = 1e-5);

/// First op (in evaluation order) whose output holds a NaN or infinity; empty if none.
std::string first_non_finite_op(const Tensor& root);

}  // namespace fabme
