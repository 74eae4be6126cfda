#include "fabme/snapshot.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>

namespace fabme {

namespace {

constexpr std::array<char, 4> kTensorMagic{'F', 'A', 'B', 'T'};
constexpr std::array<char, 4> kCheckpointMagic{'F', 'A', 'B', 'K'};

template <typename T>
void put_le(std::ostream& out, T value) {
  std::array<unsigned char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.write(reinterpret_cast<const char*>(bytes.data()), sizeof(T));
}

template <typename T>
T get_le(std::istream& in, const char* what) {
  std::array<unsigned char, sizeof(T)> bytes;
  if (!in.read(reinterpret_cast<char*>(bytes.data()), sizeof(T))) {
    throw Error(std::string("snapshot: truncated while reading ") + what);
  }
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

void expect_magic(std::istream& in, const std::array<char, 4>& magic) {
  std::array<char, 4> got{};
  if (!in.read(got.data(), 4) || got != magic) {
    throw Error("snapshot: bad magic, expected '" + std::string(magic.data(), 4) + "'");
  }
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
  const Shape& s = t.shape();
  out.write(kTensorMagic.data(), 4);
  put_le<std::uint32_t>(out, 4);
  for (Index d : {s.n, s.c, s.h, s.w}) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  for (Index i = 0; i < t.numel(); ++i) put_le<double>(out, t.values()[i]);
}

Tensor read_tensor(std::istream& in) {
  expect_magic(in, kTensorMagic);
  const auto rank = get_le<std::uint32_t>(in, "rank");
  if (rank < 1 || rank > 4) throw Error("snapshot: unsupported rank " + std::to_string(rank));
  std::array<Index, 4> dims{1, 1, 1, 1};
  for (std::uint32_t i = 0; i < rank; ++i) dims[4 - rank + i] = get_le<std::uint32_t>(in, "dims");
  const Shape shape{dims[0], dims[1], dims[2], dims[3]};
  if (shape.numel() < 1) throw Error("snapshot: zero extent in " + shape.str());
  Buffer values(shape.numel());
  for (Index i = 0; i < values.size(); ++i) values[i] = get_le<double>(in, "payload");
  return Tensor(shape, std::move(values));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("snapshot: cannot open " + path.string() + " for writing");
  write_tensor(out, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("snapshot: cannot open " + path.string());
  return read_tensor(in);
}

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("checkpoint: cannot open " + path.string() + " for writing");
  out.write(kCheckpointMagic.data(), 4);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.name.size()));
    out.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
    write_tensor(out, r.tensor);
  }
  if (!out) throw Error("checkpoint: write failed for " + path.string());
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("checkpoint: cannot open " + path.string());
  expect_magic(in, kCheckpointMagic);
  const auto count = get_le<std::uint32_t>(in, "record count");
  std::vector<NamedTensor> records;
  records.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get_le<std::uint32_t>(in, "name length");
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw Error("checkpoint: truncated name");
    records.push_back({std::move(name), read_tensor(in)});
  }
  return records;
}

}  // namespace fabme
