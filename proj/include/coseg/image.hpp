#pragma once

#include "coseg/common.hpp"

#include <cstring>
#include <fstream>

namespace coseg {

// Dense H x W x K image, row-major, channel-innermost, 64-bit in memory.
struct ImageXd {
  int height = 0, width = 0, channels = 0;
  std::vector<double> data;

  ImageXd() = default;
  ImageXd(int h, int w, int k, double fill = 0.0)
      : height(h), width(w), channels(k), data(static_cast<std::size_t>(h) * w * k, fill) {}

  double& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  double at(int y, int x, int c) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }

  Eigen::Map<VecXd> pixel(int y, int x) {
    return Eigen::Map<VecXd>(&data[(static_cast<std::size_t>(y) * width + x) * channels], channels);
  }
  Eigen::Map<const VecXd> pixel(int y, int x) const {
    return Eigen::Map<const VecXd>(&data[(static_cast<std::size_t>(y) * width + x) * channels],
                                   channels);
  }

  std::size_t pixel_count() const { return static_cast<std::size_t>(height) * width; }
  bool same_shape(const ImageXd& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }
};

// Integer label map (class indices per pixel).
struct LabelMap {
  int height = 0, width = 0;
  std::vector<int> data;

  LabelMap() = default;
  LabelMap(int h, int w, int fill = 0)
      : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {}

  int& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
  int at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
};

// ---------------------------------------------------------------------------
// FMAP: raw float maps with a 16-byte header {magic "FMAP", u32 H, u32 W, u32 K},
// then H*W*K little-endian float32, row-major, channel-innermost.
// ---------------------------------------------------------------------------

inline void write_fmap(const std::string& path, const ImageXd& img) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "write_fmap: cannot open " + path);
  const char magic[4] = {'F', 'M', 'A', 'P'};
  out.write(magic, 4);
  const std::uint32_t dims[3] = {static_cast<std::uint32_t>(img.height),
                                 static_cast<std::uint32_t>(img.width),
                                 static_cast<std::uint32_t>(img.channels)};
  out.write(reinterpret_cast<const char*>(dims), 12);
  std::vector<float> buf(img.data.size());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(img.data[i]);
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
  require(out.good(), "write_fmap: write failed for " + path);
}

inline ImageXd read_fmap(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "read_fmap: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  require(in.good() && std::memcmp(magic, "FMAP", 4) == 0, "read_fmap: bad magic in " + path);
  std::uint32_t dims[3];
  in.read(reinterpret_cast<char*>(dims), 12);
  require(in.good(), "read_fmap: truncated header in " + path);
  ImageXd img(static_cast<int>(dims[0]), static_cast<int>(dims[1]), static_cast<int>(dims[2]));
  std::vector<float> buf(img.data.size());
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
  require(in.good(), "read_fmap: truncated payload in " + path);
  for (std::size_t i = 0; i < buf.size(); ++i) img.data[i] = buf[i];
  return img;
}

}  // namespace coseg
