#include "deskpro/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "deskpro/errors.hpp"

namespace deskpro {

namespace {

constexpr char kMagic[8] = {'D', 'P', 'C', 'K', 'P', 'T', '0', '1'};

void put_u32(std::ostream& os, uint32_t v) {
  char b[4] = {static_cast<char>(v), static_cast<char>(v >> 8),
               static_cast<char>(v >> 16), static_cast<char>(v >> 24)};
  os.write(b, 4);
}

uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw IoError("truncated checkpoint");
  return b[0] | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) |
         (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint: " + path.string());
  f.write(kMagic, 8);
  const std::string meta = ck.metadata.dump();
  put_u32(f, static_cast<uint32_t>(meta.size()));
  f.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  put_u32(f, static_cast<uint32_t>(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    put_u32(f, static_cast<uint32_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(f, static_cast<uint32_t>(t.shape().size()));
    for (int d : t.shape()) put_u32(f, static_cast<uint32_t>(d));
    static_assert(sizeof(double) == 8);
    f.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * 8));
  }
  if (!f) throw IoError("checkpoint write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path.string());
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kMagic, 8) != 0)
    throw DataError("not a checkpoint file: " + path.string());
  Checkpoint ck;
  const uint32_t meta_len = get_u32(f);
  std::string meta(meta_len, '\0');
  f.read(meta.data(), meta_len);
  try {
    ck.metadata = nlohmann::ordered_json::parse(meta);
  } catch (const std::exception& e) {
    throw DataError(std::string("checkpoint metadata parse error: ") + e.what());
  }
  const uint32_t n = get_u32(f);
  for (uint32_t i = 0; i < n; ++i) {
    const uint32_t name_len = get_u32(f);
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    const uint32_t ndims = get_u32(f);
    std::vector<int> shape(ndims);
    for (auto& d : shape) d = static_cast<int>(get_u32(f));
    Tensor t(shape);
    f.read(reinterpret_cast<char*>(t.data()),
           static_cast<std::streamsize>(t.numel() * 8));
    if (!f) throw IoError("truncated checkpoint tensor: " + name);
    ck.tensors.emplace(std::move(name), std::move(t));
  }
  return ck;
}

}  // namespace deskpro
