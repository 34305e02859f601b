#pragma once

#include "coseg/image.hpp"

#include <zlib.h>

#include <array>
#include <cstring>

namespace coseg {

// Minimal PNG codec on top of zlib. Writes 8-bit truecolor and 8-bit indexed
// images; reads back non-interlaced 8-bit gray / RGB / RGBA / palette files
// (the subset this toolkit emits).

namespace png_detail {

inline void put_u32(std::vector<unsigned char>& v, std::uint32_t x) {
  v.push_back(static_cast<unsigned char>(x >> 24));
  v.push_back(static_cast<unsigned char>(x >> 16));
  v.push_back(static_cast<unsigned char>(x >> 8));
  v.push_back(static_cast<unsigned char>(x));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) |
         std::uint32_t(p[3]);
}

inline void append_chunk(std::vector<unsigned char>& out, const char type[4],
                         const std::vector<unsigned char>& payload) {
  put_u32(out, static_cast<std::uint32_t>(payload.size()));
  const std::size_t crc_start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  const uLong crc = crc32(0L, out.data() + crc_start, static_cast<uInt>(out.size() - crc_start));
  put_u32(out, static_cast<std::uint32_t>(crc));
}

inline std::vector<unsigned char> deflate_bytes(const std::vector<unsigned char>& raw) {
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<unsigned char> out(bound);
  require(compress2(out.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) == Z_OK,
          "png: deflate failed");
  out.resize(bound);
  return out;
}

inline std::vector<unsigned char> inflate_bytes(const unsigned char* data, std::size_t size,
                                                std::size_t expected) {
  std::vector<unsigned char> out(expected);
  uLongf len = static_cast<uLongf>(expected);
  require(uncompress(out.data(), &len, data, static_cast<uLong>(size)) == Z_OK && len == expected,
          "png: inflate failed");
  return out;
}

inline std::vector<unsigned char> encode(int width, int height, int bpp,
                                         const std::vector<unsigned char>& pixels,
                                         const std::vector<std::array<unsigned char, 3>>* palette) {
  // Filter type 0 on every scanline keeps the encoder trivial; zlib still
  // compresses the flat synthetic content well.
  std::vector<unsigned char> raw;
  raw.reserve(static_cast<std::size_t>(height) * (1 + static_cast<std::size_t>(width) * bpp));
  for (int y = 0; y < height; ++y) {
    raw.push_back(0);
    const unsigned char* row = pixels.data() + static_cast<std::size_t>(y) * width * bpp;
    raw.insert(raw.end(), row, row + static_cast<std::size_t>(width) * bpp);
  }

  std::vector<unsigned char> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  std::vector<unsigned char> ihdr;
  put_u32(ihdr, static_cast<std::uint32_t>(width));
  put_u32(ihdr, static_cast<std::uint32_t>(height));
  ihdr.push_back(8);                               // bit depth
  ihdr.push_back(palette ? 3 : (bpp == 1 ? 0 : 2));  // color type
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);  // no interlace
  append_chunk(out, "IHDR", ihdr);
  if (palette) {
    std::vector<unsigned char> plte;
    for (const auto& c : *palette) plte.insert(plte.end(), c.begin(), c.end());
    append_chunk(out, "PLTE", plte);
  }
  append_chunk(out, "IDAT", deflate_bytes(raw));
  append_chunk(out, "IEND", {});
  return out;
}

inline int paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

}  // namespace png_detail

// Decoded PNG: `pixels` has `bpp` interleaved bytes per pixel. For palette
// images bpp == 1 and `palette` holds the color table.
struct PngImage {
  int width = 0, height = 0, bpp = 0;
  std::vector<unsigned char> pixels;
  std::vector<std::array<unsigned char, 3>> palette;
};

inline void write_png_rgb8(const std::string& path, const ImageXd& img) {
  require(img.channels == 3, "write_png_rgb8: expected 3 channels");
  std::vector<unsigned char> bytes(img.pixel_count() * 3);
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const double v = std::clamp(img.data[i], 0.0, 1.0);
    bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0));
  }
  const auto blob = png_detail::encode(img.width, img.height, 3, bytes, nullptr);
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "write_png_rgb8: cannot open " + path);
  out.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
}

// Indexed 8-bit PNG; palette index i colors class i.
inline void write_png_indexed8(const std::string& path, const LabelMap& labels,
                               const std::vector<std::array<unsigned char, 3>>& palette) {
  std::vector<unsigned char> bytes(labels.data.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    require(labels.data[i] >= 0 && labels.data[i] < static_cast<int>(palette.size()),
            "write_png_indexed8: label outside palette");
    bytes[i] = static_cast<unsigned char>(labels.data[i]);
  }
  const auto blob = png_detail::encode(labels.width, labels.height, 1, bytes, &palette);
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "write_png_indexed8: cannot open " + path);
  out.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
}

inline PngImage read_png(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "read_png: cannot open " + path);
  std::vector<unsigned char> blob((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  require(blob.size() > 8 && blob[1] == 'P' && blob[2] == 'N' && blob[3] == 'G',
          "read_png: not a PNG file: " + path);

  PngImage img;
  int color_type = -1;
  std::vector<unsigned char> idat;
  std::size_t pos = 8;
  while (pos + 8 <= blob.size()) {
    const std::uint32_t len = png_detail::get_u32(&blob[pos]);
    const char* type = reinterpret_cast<const char*>(&blob[pos + 4]);
    const unsigned char* payload = &blob[pos + 8];
    require(pos + 12 + len <= blob.size(), "read_png: truncated chunk");
    if (std::memcmp(type, "IHDR", 4) == 0) {
      img.width = static_cast<int>(png_detail::get_u32(payload));
      img.height = static_cast<int>(png_detail::get_u32(payload + 4));
      require(payload[8] == 8, "read_png: only bit depth 8 supported");
      color_type = payload[9];
      require(payload[12] == 0, "read_png: interlaced PNG not supported");
    } else if (std::memcmp(type, "PLTE", 4) == 0) {
      for (std::uint32_t i = 0; i + 2 < len; i += 3)
        img.palette.push_back({payload[i], payload[i + 1], payload[i + 2]});
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), payload, payload + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      break;
    }
    pos += 12 + len;
  }
  switch (color_type) {
    case 0: img.bpp = 1; break;
    case 2: img.bpp = 3; break;
    case 3: img.bpp = 1; break;
    case 6: img.bpp = 4; break;
    default: throw CosegError("read_png: unsupported color type");
  }

  const std::size_t stride = static_cast<std::size_t>(img.width) * img.bpp;
  const auto raw =
      png_detail::inflate_bytes(idat.data(), idat.size(), (stride + 1) * img.height);
  img.pixels.assign(stride * img.height, 0);
  for (int y = 0; y < img.height; ++y) {
    const unsigned char filter = raw[(stride + 1) * y];
    const unsigned char* src = &raw[(stride + 1) * y + 1];
    unsigned char* dst = &img.pixels[stride * y];
    const unsigned char* up = y > 0 ? &img.pixels[stride * (y - 1)] : nullptr;
    for (std::size_t i = 0; i < stride; ++i) {
      const int a = i >= static_cast<std::size_t>(img.bpp) ? dst[i - img.bpp] : 0;
      const int b = up ? up[i] : 0;
      const int c = (up && i >= static_cast<std::size_t>(img.bpp)) ? up[i - img.bpp] : 0;
      int v = src[i];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += png_detail::paeth(a, b, c); break;
        default: throw CosegError("read_png: bad filter byte");
      }
      dst[i] = static_cast<unsigned char>(v & 0xff);
    }
  }
  return img;
}

// Label map from an indexed PNG (palette index == class id).
inline LabelMap read_label_png(const std::string& path) {
  const PngImage img = read_png(path);
  require(img.bpp == 1, "read_label_png: expected an indexed or grayscale PNG: " + path);
  LabelMap labels(img.height, img.width);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) labels.data[i] = img.pixels[i];
  return labels;
}

// RGB image in [0,1] from an 8-bit PNG.
inline ImageXd read_png_rgb(const std::string& path) {
  const PngImage img = read_png(path);
  ImageXd out(img.height, img.width, 3);
  for (std::size_t p = 0; p < out.pixel_count(); ++p) {
    for (int c = 0; c < 3; ++c) {
      unsigned char v;
      if (img.bpp == 1)
        v = img.palette.empty() ? img.pixels[p] : img.palette[img.pixels[p]][c];
      else
        v = img.pixels[p * img.bpp + c];
      out.data[p * 3 + c] = v / 255.0;
    }
  }
  return out;
}

}  // namespace coseg
