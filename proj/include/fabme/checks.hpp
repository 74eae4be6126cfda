#pragma once

#include <string>
#include <vector>

#include "fabme/grad_check.hpp"

namespace fabme {

/// Names accepted by gradcheck_block.
const std::vector<std::string>& gradcheck_block_names();

struct BlockCheck {
  std::string block;
  Shape shape;  ///< input extent
  GradCheckReport report;
};

/// Gradient check of one op or block (input and every learnable parameter)
/// on three small random shapes. Unknown names throw.
std::vector<BlockCheck> gradcheck_block(const std::string& block, std::uint64_t seed = 0,
                                        const GradCheckOptions& options = {});

}  // namespace fabme
