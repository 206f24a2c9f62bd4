#include "fundus/weights.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace fundus::model {

namespace {

constexpr char kMagic[4] = {'F', 'W', 'A', '1'};

void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

void put_i32(std::ostream& out, std::int32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(static_cast<std::uint32_t>(v) >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw IoError("weight archive truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

std::int32_t get_i32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw IoError("weight archive truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return static_cast<std::int32_t>(v);
}

void put_f32_block(std::ostream& out, const std::vector<float>& v) {
  for (float f : v) {
    const std::uint32_t u = std::bit_cast<std::uint32_t>(f);
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 4);
  }
}

std::vector<float> get_f32_block(std::istream& in, std::size_t n) {
  std::vector<float> v(n);
  std::vector<unsigned char> raw(n * 4);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!in) throw IoError("weight archive truncated");
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t u = 0;
    for (int k = 0; k < 4; ++k) u |= static_cast<std::uint32_t>(raw[i * 4 + k]) << (8 * k);
    v[i] = std::bit_cast<float>(u);
  }
  return v;
}

}  // namespace

void write_weight_archive(std::ostream& out, const WeightSet<float>& ws,
                          const std::string& meta_json) {
  out.write(kMagic, 4);
  put_u64(out, meta_json.size());
  out.write(meta_json.data(), static_cast<std::streamsize>(meta_json.size()));
  put_u64(out, ws.size());
  for (const auto& e : ws.entries()) {
    put_u64(out, e.name.size());
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put_i32(out, e.shape.n);
    put_i32(out, e.shape.c);
    put_i32(out, e.shape.h);
    put_i32(out, e.shape.w);
    put_f32_block(out, e.v);
  }
  if (!out) throw IoError("failed writing weight archive");
}

WeightArchive read_weight_archive(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw IoError("not a weight archive (bad magic)");
  }
  WeightArchive a;
  const std::uint64_t meta_len = get_u64(in);
  a.meta_json.resize(meta_len);
  in.read(a.meta_json.data(), static_cast<std::streamsize>(meta_len));
  if (!in) throw IoError("weight archive truncated");
  const std::uint64_t count = get_u64(in);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint64_t name_len = get_u64(in);
    std::string name(name_len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(name_len));
    if (!in) throw IoError("weight archive truncated");
    ad::Shape s;
    s.n = get_i32(in);
    s.c = get_i32(in);
    s.h = get_i32(in);
    s.w = get_i32(in);
    if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1) {
      throw IoError("weight archive has invalid shape for " + name);
    }
    a.weights.add(std::move(name), s, get_f32_block(in, s.size()));
  }
  return a;
}

void save_weight_archive(const std::filesystem::path& path, const WeightSet<float>& ws,
                         const std::string& meta_json) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    write_weight_archive(out, ws, meta_json);
  }
  std::filesystem::rename(tmp, path);
}

WeightArchive load_weight_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open weight archive " + path.string());
  return read_weight_archive(in);
}

}  // namespace fundus::model
