#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "cafpn/tensor.hpp"

// TAR0 tensor records and named-record streams.
//
// A record is: the magic bytes "TNSR", u8 version (0), u8 dtype (0 = f32,
// 1 = f64), u8 rank, rank little-endian u32 extents, then the values as
// little-endian IEEE floats. A named stream is a concatenation of
// (u32 little-endian byte length, UTF-8 name, record) triples.
namespace cafpn::archive {

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

void write_tensor(std::ostream& os, const Tensor& t, DType dtype = DType::F64);
Tensor read_tensor(std::istream& is);

void save_tensor(const std::filesystem::path& path, const Tensor& t, DType dtype = DType::F64);
Tensor load_tensor(const std::filesystem::path& path);

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

void write_named(std::ostream& os, const std::vector<NamedTensor>& records,
                 DType dtype = DType::F64);
std::vector<NamedTensor> read_named(std::istream& is);

void save_named(const std::filesystem::path& path, const std::vector<NamedTensor>& records,
                DType dtype = DType::F64);
std::vector<NamedTensor> load_named(const std::filesystem::path& path);

}  // namespace cafpn::archive
