#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "fabme/tensor.hpp"

namespace fabme {

/// Tensor snapshot: "FABT", u32 rank, u32 dims[rank], f64 payload; all
/// little-endian. Written with rank 4 (n, c, h, w); ranks 1-3 are accepted
/// on read and left-padded with ones.
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);
void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Checkpoint: "FABK", u32 record count, then per record a u32 name length,
/// the UTF-8 name, and one tensor snapshot.
void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& records);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

}  // namespace fabme
