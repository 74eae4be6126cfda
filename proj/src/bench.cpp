#include "fabme/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>

#include "fabme/scan.hpp"
#include "fabme/ss2d.hpp"

namespace fabme {

namespace {

using Clock = std::chrono::steady_clock;

std::pair<Index, Index> grid_for(Index length) {
  Index h = static_cast<Index>(std::sqrt(static_cast<double>(length)));
  while (h > 1 && length % h != 0) --h;
  return {h, length / h};
}

/// Prepared inputs plus a closure running one forward evaluation.
struct Workload {
  BenchRow row;
  std::function<void()> run;
  std::vector<double> samples;
};

Workload make_workload(const std::string& op, Index length, const BenchOptions& options) {
  if (length < 1) throw Error("bench: length must be positive");
  if (options.d_model < 1 || options.d_state < 1) throw Error("bench: d_model and d_state must be positive");
  Rng rng(options.seed);
  Workload w{{op, length, options.d_model, options.d_state, 0, 0, 0, 0}, {}, {}};
  if (op == "ss2d") {
    const auto [h, wd] = grid_for(length);
    auto params = std::make_shared<ScanParams>(ScanParams::init(options.d_model, options.d_state, rng));
    // Inference only: no tape, no saved scan states.
    for (Tensor* t : {&params->delta_weight, &params->delta_bias, &params->b_weight, &params->c_weight,
                      &params->a_log, &params->skip})
      t->set_requires_grad(false);
    const Tensor x = Tensor::uniform({1, options.d_model, h, wd}, -1, 1, rng);
    w.run = [params, x] {
      volatile double sink = ss2d(x, *params).values()[0];
      (void)sink;
    };
  } else if (op == "attention") {
    auto qkv = std::make_shared<std::array<RowMatrixXd, 3>>();
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (auto& m : *qkv) m = RowMatrixXd::NullaryExpr(length, options.d_model, [&] { return u(rng); });
    w.run = [qkv] {
      volatile double sink = scan::naive_attention<double>((*qkv)[0], (*qkv)[1], (*qkv)[2])(0, 0);
      (void)sink;
    };
  } else {
    throw Error("bench: unknown operator '" + op + "' (expected ss2d or attention)");
  }
  return w;
}

void sample(Workload& w, const BenchOptions& options, Index min_reps) {
  const auto start = Clock::now();
  Index taken = 0;
  while (taken < min_reps || std::chrono::duration<double>(Clock::now() - start).count() < options.min_seconds) {
    const auto t0 = Clock::now();
    w.run();
    w.samples.push_back(std::chrono::duration<double, std::nano>(Clock::now() - t0).count());
    ++taken;
  }
}

BenchRow summarize(Workload& w) {
  auto& s = w.samples;
  BenchRow row = w.row;
  row.reps = static_cast<Index>(s.size());
  row.mean_ns = std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
  std::sort(s.begin(), s.end());
  const auto at = [&](double q) {
    const auto idx = static_cast<std::size_t>(std::ceil(q * static_cast<double>(s.size())));
    return s[std::clamp<std::size_t>(idx, 1, s.size()) - 1];
  };
  row.p95_ns = at(0.95);
  row.median_ns = at(0.5);
  return row;
}

}  // namespace

BenchRow bench_operator(const std::string& op, Index length, const BenchOptions& options) {
  return bench_sweep(op, {length}, options).front();
}

std::vector<BenchRow> bench_sweep(const std::string& op, const std::vector<Index>& lengths,
                                  const BenchOptions& options) {
  if (options.rounds < 1 || options.min_reps < 1) throw Error("bench: rounds and min_reps must be positive");
  std::vector<Workload> work;
  for (Index l : lengths) work.push_back(make_workload(op, l, options));
  for (auto& w : work) w.run();  // warm-up
  const Index reps_per_round = (options.min_reps + options.rounds - 1) / options.rounds;
  for (Index r = 0; r < options.rounds; ++r)
    for (auto& w : work) sample(w, options, reps_per_round);
  std::vector<BenchRow> rows;
  for (auto& w : work) rows.push_back(summarize(w));
  return rows;
}

std::vector<double> growth_ratios(const std::vector<BenchRow>& rows) {
  std::vector<double> out;
  for (std::size_t i = 1; i < rows.size(); ++i) out.push_back(rows[i].median_ns / rows[i - 1].median_ns);
  return out;
}

void write_bench_csv(std::ostream& out, const std::vector<BenchRow>& rows, bool header) {
  if (header) out << "operator,L,d_model,d_state,mean_ns,p95_ns\n";
  const auto flags = out.flags();
  const auto precision = out.precision();
  out.setf(std::ios::fixed);
  out.precision(0);
  for (const auto& r : rows)
    out << r.op << ',' << r.length << ',' << r.d_model << ',' << r.d_state << ',' << r.mean_ns << ',' << r.p95_ns
        << '\n';
  out.flags(flags);
  out.precision(precision);
}

}  // namespace fabme
