#include "fabme/grad_check.hpp"

#include <cmath>

#include "fabme/ops.hpp"

namespace fabme {

std::string first_non_finite_op(const Tensor& root) {
  for (const auto* node : topological_order(root)) {
    if (!node->value.isFinite().all()) return node->op;
  }
  return {};
}

namespace {

struct Objective {
  const std::function<Tensor()>& f;
  Buffer cotangent;

  Tensor evaluate(std::string& failure) const {
    Tensor y = f();
    if (const auto bad = first_non_finite_op(y); !bad.empty()) failure = "non-finite output from op '" + bad + "'";
    if (y.numel() == 1) return y;
    return weighted_sum(y, cotangent);
  }
};

}  // namespace

GradCheckReport grad_check(const std::function<Tensor()>& f, std::span<const GradTarget> targets,
                           const GradCheckOptions& options) {
  GradCheckReport report;
  for (const auto& t : targets) {
    if (t.tensor.op() != "leaf") throw Error("grad_check: target '" + t.name + "' is not a leaf");
    if (!t.tensor.requires_grad()) throw Error("grad_check: target '" + t.name + "' does not require grad");
  }

  Tensor probe = f();
  Rng rng(options.seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  Buffer cotangent(probe.numel());
  for (Index i = 0; i < cotangent.size(); ++i) cotangent[i] = dist(rng);
  const Objective objective{f, std::move(cotangent)};

  for (const auto& t : targets) Tensor(t.tensor).zero_grad();
  Tensor loss = objective.evaluate(report.failure);
  if (!report.failure.empty()) return report;
  loss.backward();

  for (const auto& t : targets) {
    Tensor leaf = t.tensor;
    const Buffer analytic = leaf.has_grad() ? leaf.grad() : Buffer::Zero(leaf.numel());
    if (!analytic.isFinite().all()) {
      report.failure = "non-finite analytic gradient for '" + t.name + "'";
      return report;
    }
    Buffer& values = leaf.mutable_values();
    for (Index i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + options.eps;
      const double up = objective.evaluate(report.failure).item();
      values[i] = saved - options.eps;
      const double down = objective.evaluate(report.failure).item();
      values[i] = saved;
      if (!report.failure.empty()) return report;
      const double numeric = (up - down) / (2.0 * options.eps);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), options.floor});
      const double err = std::abs(analytic[i] - numeric) / denom;
      ++report.checked;
      if (err >= report.max_rel_err) {
        report.max_rel_err = err;
        report.worst = t.name + "[" + std::to_string(i) + "]";
      }
    }
    leaf.zero_grad();
  }
  report.passed = report.max_rel_err <= options.tol;
  return report;
}

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps,
                           double tol) {
  Tensor input = x.op() == "leaf" ? x : x.detach();
  input.set_requires_grad(true);
  const GradTarget target{"x", input};
  GradCheckOptions options;
  options.eps = eps;
  options.tol = tol;
  return grad_check([&] { return f(input); }, std::span<const GradTarget>(&target, 1), options);
}

}  // namespace fabme
