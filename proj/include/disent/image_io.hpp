#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace disent {

/// Grayscale image with values nominally in [0, 1], row-major.
struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> pixels;

  GrayImage() = default;
  GrayImage(std::size_t w, std::size_t h, double fill = 0.0) : width(w), height(h), pixels(w * h, fill) {}

  double& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
  double at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }

  /// Copy `tile` (tw x th) with its top-left corner at (x0, y0).
  void blit(std::span<const double> tile, std::size_t tw, std::size_t th, std::size_t x0, std::size_t y0) {
    for (std::size_t y = 0; y < th; ++y)
      for (std::size_t x = 0; x < tw; ++x) at(x0 + x, y0 + y) = tile[y * tw + x];
  }
};

inline std::uint8_t to_byte(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

/// Binary PGM (P5), 8-bit.
inline void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  std::vector<char> bytes(img.pixels.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = static_cast<char>(to_byte(img.pixels[i]));
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P5" || maxval != 255) throw std::runtime_error(path.string() + ": not an 8-bit P5 PGM");
  in.get();
  GrayImage img(w, h);
  std::vector<char> bytes(w * h);
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!in) throw std::runtime_error(path.string() + ": truncated PGM");
  for (std::size_t i = 0; i < bytes.size(); ++i) img.pixels[i] = static_cast<unsigned char>(bytes[i]) / 255.0;
  return img;
}

}  // namespace disent
