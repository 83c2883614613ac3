#include "cafpn/archive.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "cafpn/error.hpp"

namespace cafpn::archive {

namespace {

constexpr std::array<char, 4> kMagic{'T', 'N', 'S', 'R'};
constexpr std::uint8_t kVersion = 0;

static_assert(std::endian::native == std::endian::little,
              "TAR0 I/O assumes a little-endian host");

void put_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw IoError("TAR0: truncated u32");
  return v;
}

std::uint8_t get_u8(std::istream& is) {
  char c = 0;
  if (!is.get(c)) throw IoError("TAR0: truncated header");
  return static_cast<std::uint8_t>(c);
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t, DType dtype) {
  const Shape& shape = t.shape();
  if (shape.size() > 255) throw IoError("TAR0: rank above 255");
  os.write(kMagic.data(), kMagic.size());
  os.put(static_cast<char>(kVersion));
  os.put(static_cast<char>(dtype));
  os.put(static_cast<char>(shape.size()));
  for (auto extent : shape) put_u32(os, static_cast<std::uint32_t>(extent));
  if (dtype == DType::F64) {
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.data().size() * sizeof(double)));
  } else {
    std::vector<float> buf(t.data().begin(), t.data().end());
    os.write(reinterpret_cast<const char*>(buf.data()),
             static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!os) throw IoError("TAR0: write failed");
}

Tensor read_tensor(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kMagic) {
    throw IoError("TAR0: bad magic");
  }
  if (get_u8(is) != kVersion) throw IoError("TAR0: unsupported version");
  const auto dtype = get_u8(is);
  if (dtype > 1) throw IoError("TAR0: unknown dtype " + std::to_string(dtype));
  const auto rank = get_u8(is);
  Shape shape(rank);
  for (auto& extent : shape) {
    extent = get_u32(is);
    if (extent == 0) throw IoError("TAR0: zero extent");
  }
  std::vector<double> data(static_cast<std::size_t>(numel(shape)));
  if (dtype == static_cast<std::uint8_t>(DType::F64)) {
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(double)));
  } else {
    std::vector<float> buf(data.size());
    is.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    std::copy(buf.begin(), buf.end(), data.begin());
  }
  if (!is) throw IoError("TAR0: truncated payload for shape " + to_string(shape));
  return Tensor::from_data(std::move(shape), std::move(data));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t, DType dtype) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(os, t, dtype);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_tensor(is);
}

void write_named(std::ostream& os, const std::vector<NamedTensor>& records, DType dtype) {
  for (const auto& r : records) {
    put_u32(os, static_cast<std::uint32_t>(r.name.size()));
    os.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
    write_tensor(os, r.tensor, dtype);
  }
}

std::vector<NamedTensor> read_named(std::istream& is) {
  std::vector<NamedTensor> out;
  while (is.peek() != std::char_traits<char>::eof()) {
    const auto len = get_u32(is);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw IoError("named TAR0: truncated name");
    out.push_back({std::move(name), read_tensor(is)});
  }
  return out;
}

void save_named(const std::filesystem::path& path, const std::vector<NamedTensor>& records,
                DType dtype) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_named(os, records, dtype);
}

std::vector<NamedTensor> load_named(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_named(is);
}

}  // namespace cafpn::archive
