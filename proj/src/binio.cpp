#include "fpeft/binio.hpp"

#include <fstream>
#include <iterator>

namespace fpeft::inline FPEFT_PRECISION_NS {

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::vector<std::uint8_t>& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw DataError("write failed for " + path);
}

void write_tensor(ByteWriter& w, const Tensor& t) {
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
  for (std::int64_t i = 0; i < t.size(); ++i) w.f32(static_cast<float>(t[i]));
}

Tensor read_tensor(ByteReader& r) {
  const std::uint32_t rank = r.u32();
  if (rank > 8) throw DataError("tensor rank " + std::to_string(rank) + " too large");
  Shape shape(rank);
  for (auto& d : shape) d = r.u32();
  Tensor t(shape);
  if (static_cast<std::size_t>(t.size()) * 4 > r.remaining()) throw DataError("tensor payload truncated");
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<Real>(r.f32());
  return t;
}

}  // namespace fpeft
