#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "fabme/tensor.hpp"

namespace fabme {

/// One timed configuration of a sequence operator.
struct BenchRow {
  std::string op;  ///< "ss2d" or "attention"
  Index length = 0;
  Index d_model = 0;
  Index d_state = 0;
  double mean_ns = 0;
  double p95_ns = 0;
  double median_ns = 0;
  Index reps = 0;
};

struct BenchOptions {
  Index d_model = 16;
  Index d_state = 16;
  Index min_reps = 5;
  double min_seconds = 0.15;  ///< per length and round
  Index rounds = 3;          ///< sweeps visit the lengths round-robin this many times
  std::uint64_t seed = 0;
};

/// Times one forward evaluation at `length` tokens. ss2d runs on a near-square
/// h x w grid with h * w == length; attention is the explicit L x L softmax.
BenchRow bench_operator(const std::string& op, Index length, const BenchOptions& options = {});
std::vector<BenchRow> bench_sweep(const std::string& op, const std::vector<Index>& lengths,
                                  const BenchOptions& options = {});

/// median_ns[i + 1] / median_ns[i] for consecutive rows; the median keeps a
/// single preempted repetition from skewing the ratio.
std::vector<double> growth_ratios(const std::vector<BenchRow>& rows);

void write_bench_csv(std::ostream& out, const std::vector<BenchRow>& rows, bool header = true);

}  // namespace fabme
