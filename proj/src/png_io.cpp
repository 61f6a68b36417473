#include "deskpro/png_io.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>

#include "deskpro/errors.hpp"

namespace deskpro {

namespace {

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v >> 24));
  out.push_back(static_cast<uint8_t>(v >> 16));
  out.push_back(static_cast<uint8_t>(v >> 8));
  out.push_back(static_cast<uint8_t>(v));
}

uint32_t get_u32(const uint8_t* p) {
  return (static_cast<uint32_t>(p[0]) << 24) |
         (static_cast<uint32_t>(p[1]) << 16) |
         (static_cast<uint32_t>(p[2]) << 8) | p[3];
}

void write_chunk(std::vector<uint8_t>& out, const char type[4],
                 const std::vector<uint8_t>& data) {
  put_u32(out, static_cast<uint32_t>(data.size()));
  size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  uint32_t crc = crc32(0, out.data() + start, static_cast<uInt>(out.size() - start));
  put_u32(out, crc);
}

constexpr uint8_t kSignature[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};

}  // namespace

void write_png(const std::filesystem::path& path, const PngImage& img) {
  if (img.width <= 0 || img.height <= 0 ||
      (img.channels != 1 && img.channels != 3))
    throw ConfigError("write_png: unsupported image geometry");
  const size_t stride = static_cast<size_t>(img.width) * img.channels;
  if (img.pixels.size() != stride * img.height)
    throw ShapeError("write_png: pixel buffer size mismatch");

  std::vector<uint8_t> filtered;
  filtered.reserve((stride + 1) * img.height);
  for (int y = 0; y < img.height; ++y) {
    filtered.push_back(0);  // filter type: none
    const uint8_t* row = img.pixels.data() + y * stride;
    filtered.insert(filtered.end(), row, row + stride);
  }

  uLongf comp_len = compressBound(static_cast<uLong>(filtered.size()));
  std::vector<uint8_t> comp(comp_len);
  if (compress2(comp.data(), &comp_len, filtered.data(),
                static_cast<uLong>(filtered.size()), 6) != Z_OK)
    throw IoError("write_png: deflate failed");
  comp.resize(comp_len);

  std::vector<uint8_t> out(kSignature, kSignature + 8);
  std::vector<uint8_t> ihdr;
  put_u32(ihdr, static_cast<uint32_t>(img.width));
  put_u32(ihdr, static_cast<uint32_t>(img.height));
  ihdr.push_back(8);                                  // bit depth
  ihdr.push_back(img.channels == 3 ? 2 : 0);          // color type
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  write_chunk(out, "IHDR", ihdr);
  write_chunk(out, "IDAT", comp);
  write_chunk(out, "IEND", {});

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f.write(reinterpret_cast<const char*>(out.data()),
          static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

PngImage read_png(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path.string());
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)),
                           std::istreambuf_iterator<char>());
  if (buf.size() < 8 || std::memcmp(buf.data(), kSignature, 8) != 0)
    throw IoError("not a PNG file: " + path.string());

  PngImage img;
  int bit_depth = 0, color_type = 0, interlace = 0;
  std::vector<uint8_t> idat;
  size_t pos = 8;
  while (pos + 8 <= buf.size()) {
    const uint32_t len = get_u32(buf.data() + pos);
    const char* type = reinterpret_cast<const char*>(buf.data() + pos + 4);
    if (pos + 12 + len > buf.size()) throw IoError("truncated PNG");
    const uint8_t* data = buf.data() + pos + 8;
    if (std::memcmp(type, "IHDR", 4) == 0) {
      img.width = static_cast<int>(get_u32(data));
      img.height = static_cast<int>(get_u32(data + 4));
      bit_depth = data[8];
      color_type = data[9];
      interlace = data[12];
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), data, data + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      break;
    }
    pos += 12 + len;
  }
  if (bit_depth != 8 || (color_type != 0 && color_type != 2) || interlace != 0)
    throw IoError("unsupported PNG format: " + path.string());
  img.channels = color_type == 2 ? 3 : 1;

  const size_t stride = static_cast<size_t>(img.width) * img.channels;
  std::vector<uint8_t> raw((stride + 1) * img.height);
  uLongf raw_len = static_cast<uLongf>(raw.size());
  if (uncompress(raw.data(), &raw_len, idat.data(),
                 static_cast<uLong>(idat.size())) != Z_OK ||
      raw_len != raw.size())
    throw IoError("PNG inflate failed: " + path.string());

  img.pixels.resize(stride * img.height);
  const int bpp = img.channels;
  for (int y = 0; y < img.height; ++y) {
    const uint8_t filter = raw[y * (stride + 1)];
    const uint8_t* src = raw.data() + y * (stride + 1) + 1;
    uint8_t* dst = img.pixels.data() + y * stride;
    const uint8_t* up = y > 0 ? dst - stride : nullptr;
    for (size_t x = 0; x < stride; ++x) {
      const int a = x >= static_cast<size_t>(bpp) ? dst[x - bpp] : 0;
      const int b = up ? up[x] : 0;
      const int c = (up && x >= static_cast<size_t>(bpp)) ? up[x - bpp] : 0;
      int v = src[x];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: {
          const int p = a + b - c;
          const int pa = std::abs(p - a), pb = std::abs(p - b),
                    pc = std::abs(p - c);
          v += (pa <= pb && pa <= pc) ? a : (pb <= pc ? b : c);
          break;
        }
        default:
          throw IoError("bad PNG filter byte");
      }
      dst[x] = static_cast<uint8_t>(v & 0xff);
    }
  }
  return img;
}

}  // namespace deskpro
