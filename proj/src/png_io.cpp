#include <zlib.h>

#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sfas/dataset.hpp"

// Minimal 8-bit grayscale PNG writer (signature, IHDR, one IDAT from
// zlib-compressed filter-0 scanlines, IEND). Enough for chip/mask inspection
// without pulling in an image library.

namespace sfas {

namespace {

void put_u32_be(std::string& s, uint32_t v) {
  s.push_back(static_cast<char>(v >> 24));
  s.push_back(static_cast<char>(v >> 16));
  s.push_back(static_cast<char>(v >> 8));
  s.push_back(static_cast<char>(v));
}

void put_chunk(std::string& out, const char type[4], const std::string& payload) {
  put_u32_be(out, static_cast<uint32_t>(payload.size()));
  std::string body(type, 4);
  body += payload;
  out += body;
  const uint32_t crc =
      static_cast<uint32_t>(::crc32(0L, reinterpret_cast<const Bytef*>(body.data()),
                                    static_cast<uInt>(body.size())));
  put_u32_be(out, crc);
}

void write_png_gray8(const std::string& path, const std::vector<uint8_t>& pixels, int h, int w) {
  std::string raw;
  raw.reserve(static_cast<size_t>(h) * (static_cast<size_t>(w) + 1));
  for (int y = 0; y < h; ++y) {
    raw.push_back('\0');  // filter type 0
    raw.append(reinterpret_cast<const char*>(pixels.data()) + static_cast<size_t>(y) * w,
               static_cast<size_t>(w));
  }

  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<Bytef> compressed(bound);
  if (compress2(compressed.data(), &bound, reinterpret_cast<const Bytef*>(raw.data()),
                static_cast<uLong>(raw.size()), Z_DEFAULT_COMPRESSION) != Z_OK)
    throw std::runtime_error("write_png: zlib compression failed");

  std::string out;
  out.append("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  put_u32_be(ihdr, static_cast<uint32_t>(w));
  put_u32_be(ihdr, static_cast<uint32_t>(h));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(0);   // grayscale
  ihdr.push_back(0);   // compression
  ihdr.push_back(0);   // filter
  ihdr.push_back(0);   // no interlace
  put_chunk(out, "IHDR", ihdr);
  put_chunk(out, "IDAT",
            std::string(reinterpret_cast<char*>(compressed.data()), bound));
  put_chunk(out, "IEND", "");

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("write_png: cannot open " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("write_png: write failed for " + path);
}

}  // namespace

void write_png_gray(const std::string& path, const Eigen::ArrayXd& img, int h, int w) {
  if (img.size() != static_cast<Eigen::Index>(h) * w)
    throw std::invalid_argument("write_png_gray: image has " + std::to_string(img.size()) +
                                " values, expected " + std::to_string(h * w));
  std::vector<uint8_t> px(static_cast<size_t>(h) * w);
  for (Eigen::Index i = 0; i < img.size(); ++i) {
    const double v = std::min(1.0, std::max(0.0, img[i]));
    px[static_cast<size_t>(i)] = static_cast<uint8_t>(v * 255.0 + 0.5);
  }
  write_png_gray8(path, px, h, w);
}

void write_png_mask(const std::string& path, const std::vector<uint8_t>& mask, int h, int w) {
  if (mask.size() != static_cast<size_t>(h) * w)
    throw std::invalid_argument("write_png_mask: mask has " + std::to_string(mask.size()) +
                                " values, expected " + std::to_string(h * w));
  std::vector<uint8_t> px(mask.size());
  for (size_t i = 0; i < mask.size(); ++i) px[i] = mask[i] ? 255 : 0;
  write_png_gray8(path, px, h, w);
}

}  // namespace sfas
