#include "casl/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

namespace casl {

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

bool get_u32(std::istream& is, std::uint32_t& v) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
  v = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
      (static_cast<std::uint32_t>(b[2]) << 16) |
      (static_cast<std::uint32_t>(b[3]) << 24);
  return true;
}

void put_f32(std::ostream& os, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(os, bits);
}

bool get_f32(std::istream& is, float& f) {
  std::uint32_t bits;
  if (!get_u32(is, bits)) return false;
  std::memcpy(&f, &bits, 4);
  return true;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path,
                     const std::vector<CheckpointEntry>& entries) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + tmp.string() + " for write");
    for (const CheckpointEntry& e : entries) {
      put_u32(os, static_cast<std::uint32_t>(e.name.size()));
      os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
      put_u32(os, static_cast<std::uint32_t>(e.shape.size()));
      std::size_t n = 1;
      for (std::size_t extent : e.shape) {
        put_u32(os, static_cast<std::uint32_t>(extent));
        n *= extent;
      }
      if (n != e.values.size())
        throw std::invalid_argument("checkpoint entry '" + e.name +
                                    "': value count does not match shape");
      for (float f : e.values) put_f32(os, f);
    }
    if (!os) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::vector<CheckpointEntry> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::vector<CheckpointEntry> entries;
  std::uint32_t name_len;
  while (get_u32(is, name_len)) {
    CheckpointEntry e;
    e.name.resize(name_len);
    if (!is.read(e.name.data(), name_len))
      throw std::runtime_error("truncated checkpoint " + path.string());
    std::uint32_t rank;
    if (!get_u32(is, rank))
      throw std::runtime_error("truncated checkpoint " + path.string());
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      std::uint32_t extent;
      if (!get_u32(is, extent))
        throw std::runtime_error("truncated checkpoint " + path.string());
      e.shape.push_back(extent);
      n *= extent;
    }
    e.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (!get_f32(is, e.values[i]))
        throw std::runtime_error("truncated checkpoint " + path.string());
    }
    entries.push_back(std::move(e));
  }
  return entries;
}

CheckpointEntry entry_from_tensor(std::string name, const Tensor& tensor) {
  CheckpointEntry e;
  e.name = std::move(name);
  e.shape = tensor.shape();
  e.values.reserve(tensor.size());
  for (double v : tensor.data()) e.values.push_back(static_cast<float>(v));
  return e;
}

void load_into_tensor(const CheckpointEntry& entry, Tensor& tensor) {
  if (entry.shape != tensor.shape()) {
    throw std::invalid_argument("checkpoint entry '" + entry.name +
                                "' has shape " + shape_to_string(entry.shape) +
                                ", expected " + shape_to_string(tensor.shape()));
  }
  auto dst = tensor.raw_data();
  for (std::size_t i = 0; i < entry.values.size(); ++i)
    dst[i] = static_cast<double>(entry.values[i]);
}

}  // namespace casl
