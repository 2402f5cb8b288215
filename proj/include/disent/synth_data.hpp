#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "disent/image_io.hpp"
#include "disent/tensor.hpp"

namespace disent {

/// Names and cardinalities of the ground-truth factors of variation.
struct FactorSpace {
  std::vector<std::string> names;
  std::vector<int> sizes;

  std::size_t num_factors() const { return sizes.size(); }
  std::size_t total() const {
    std::size_t n = 1;
    for (int s : sizes) n *= static_cast<std::size_t>(s);
    return n;
  }
  int index_of(const std::string& name) const {
    for (std::size_t k = 0; k < names.size(); ++k)
      if (names[k] == name) return static_cast<int>(k);
    return -1;
  }
};

/// Row-major (n x K) matrix of factor indices plus the rendered images.
struct FactorBatch {
  std::size_t size = 0;
  std::size_t num_factors = 0;
  std::vector<int> factors;
  Tensor images;  // (n, 1, 32, 32)

  int factor(std::size_t i, std::size_t k) const { return factors[i * num_factors + k]; }
};

enum class ShapeKind { square = 0, disc = 1, diamond = 2 };

/// Procedurally rendered 1x32x32 dataset with five discrete factors:
/// shape (square/disc/diamond), half-width (3/5/7 px), x and y position on an
/// 8-point grid, and intensity (0.4/0.6/0.8/1.0). Rasterization uses integer
/// arithmetic only, so images are identical on every platform.
class Shapes5 {
 public:
  static constexpr int kSide = 32;
  static constexpr int kPixels = kSide * kSide;
  static constexpr std::array<int, 3> kHalfWidths{3, 5, 7};
  static constexpr std::array<double, 4> kIntensities{0.4, 0.6, 0.8, 1.0};
  static constexpr int kGrid = 8;
  static constexpr int kMargin = 7;  // max half-width, so no shape touches the border

  Shapes5() { space_ = {{"shape", "scale", "pos_x", "pos_y", "intensity"}, {3, 3, kGrid, kGrid, 4}}; }

  const FactorSpace& space() const { return space_; }
  std::size_t size() const { return space_.total(); }
  static Shape image_shape() { return {1, kSide, kSide}; }

  /// Pixel coordinate of grid position i: evenly spread over [kMargin, kSide-1-kMargin].
  static int grid_coord(int i) { return kMargin + (i * (kSide - 1 - 2 * kMargin)) / (kGrid - 1); }

  void check_tuple(std::span<const int> f) const {
    if (f.size() != space_.num_factors()) throw std::out_of_range("factor tuple has wrong length");
    for (std::size_t k = 0; k < f.size(); ++k) {
      if (f[k] < 0 || f[k] >= space_.sizes[k]) {
        throw std::out_of_range("factor " + space_.names[k] + " index " + std::to_string(f[k]) + " out of range [0," +
                                std::to_string(space_.sizes[k]) + ")");
      }
    }
  }

  /// Renders one tuple into `out` (kPixels values).
  void render_into(std::span<const int> f, double* out) const {
    check_tuple(f);
    const auto shape = static_cast<ShapeKind>(f[0]);
    const int h = kHalfWidths[static_cast<std::size_t>(f[1])];
    const int cx = grid_coord(f[2]);
    const int cy = grid_coord(f[3]);
    const double value = kIntensities[static_cast<std::size_t>(f[4])];
    std::fill_n(out, kPixels, 0.0);
    for (int y = cy - h; y <= cy + h; ++y) {
      for (int x = cx - h; x <= cx + h; ++x) {
        const int dx = x - cx, dy = y - cy;
        bool inside = false;
        switch (shape) {
          case ShapeKind::square: inside = true; break;
          case ShapeKind::disc: inside = dx * dx + dy * dy <= h * h; break;
          case ShapeKind::diamond: inside = std::abs(dx) + std::abs(dy) <= h; break;
        }
        if (inside && x >= 0 && x < kSide && y >= 0 && y < kSide) out[y * kSide + x] = value;
      }
    }
  }

  std::vector<double> render(std::span<const int> f) const {
    std::vector<double> img(kPixels);
    render_into(f, img.data());
    return img;
  }

  /// Mixed-radix index; the last factor varies fastest.
  std::size_t index_of(std::span<const int> f) const {
    check_tuple(f);
    std::size_t idx = 0;
    for (std::size_t k = 0; k < f.size(); ++k) idx = idx * static_cast<std::size_t>(space_.sizes[k]) + static_cast<std::size_t>(f[k]);
    return idx;
  }

  std::vector<int> tuple_of(std::size_t index) const {
    if (index >= size()) throw std::out_of_range("dataset index out of range");
    std::vector<int> f(space_.num_factors());
    for (std::size_t k = f.size(); k-- > 0;) {
      const auto s = static_cast<std::size_t>(space_.sizes[k]);
      f[k] = static_cast<int>(index % s);
      index /= s;
    }
    return f;
  }

  /// Batch for the given factor rows (n x K, row-major).
  FactorBatch make_batch(std::vector<int> factors) const {
    const std::size_t k = space_.num_factors();
    FactorBatch b;
    b.num_factors = k;
    b.size = factors.size() / k;
    b.factors = std::move(factors);
    std::vector<double> pix(b.size * kPixels);
    for (std::size_t i = 0; i < b.size; ++i) {
      render_into(std::span<const int>(b.factors.data() + i * k, k), pix.data() + i * kPixels);
    }
    b.images = Tensor({b.size, 1, kSide, kSide}, std::move(pix));
    return b;
  }

  FactorBatch batch_from_indices(std::span<const std::size_t> indices) const {
    std::vector<int> f;
    f.reserve(indices.size() * space_.num_factors());
    for (auto i : indices) {
      auto t = tuple_of(i);
      f.insert(f.end(), t.begin(), t.end());
    }
    return make_batch(std::move(f));
  }

  /// n i.i.d. uniform factor tuples (n x K row-major).
  std::vector<int> sample_factors(std::size_t n, std::mt19937_64& rng) const {
    const std::size_t k = space_.num_factors();
    std::vector<int> f(n * k);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j) f[i * k + j] = uniform_int(rng, space_.sizes[j]);
    return f;
  }

  /// n uniform tuples with factor k pinned to `value`.
  FactorBatch sample_with_fixed_factor(std::size_t n, std::size_t k, int value, std::mt19937_64& rng) const {
    if (k >= space_.num_factors()) throw std::out_of_range("factor index out of range");
    if (value < 0 || value >= space_.sizes[k]) throw std::out_of_range("fixed factor value out of range");
    auto f = sample_factors(n, rng);
    for (std::size_t i = 0; i < n; ++i) f[i * space_.num_factors() + k] = value;
    return make_batch(std::move(f));
  }

  /// Every factor tuple in index order (N x K row-major).
  std::vector<int> all_factors() const {
    std::vector<int> f;
    f.reserve(size() * space_.num_factors());
    for (std::size_t i = 0; i < size(); ++i) {
      auto t = tuple_of(i);
      f.insert(f.end(), t.begin(), t.end());
    }
    return f;
  }

  /// Unbiased integer in [0, n) from the raw engine output (portable, unlike std distributions).
  static int uniform_int(std::mt19937_64& rng, int n) {
    const auto un = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % un;
    std::uint64_t r;
    do {
      r = rng();
    } while (r >= limit);
    return static_cast<int>(r % un);
  }

  /// Fisher-Yates permutation of [0, n).
  static std::vector<std::size_t> permutation(std::size_t n, std::mt19937_64& rng) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    for (std::size_t i = n; i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_int(rng, static_cast<int>(i)));
      std::swap(p[i - 1], p[j]);
    }
    return p;
  }

  /// Writes one binary PGM per tuple plus factors.csv.
  void dump(const std::filesystem::path& dir) const;

 private:
  FactorSpace space_;
};

/// One shuffled pass over every tuple of the dataset, in batches; the final batch may be short.
class EpochIterator {
 public:
  EpochIterator(const Shapes5& data, std::size_t batch_size, std::mt19937_64& rng)
      : data_(&data), batch_size_(batch_size), order_(Shapes5::permutation(data.size(), rng)) {
    if (batch_size == 0 || batch_size > data.size()) throw std::invalid_argument("batch size must be in [1, N]");
  }

  std::size_t num_batches() const { return (order_.size() + batch_size_ - 1) / batch_size_; }
  bool done() const { return pos_ >= order_.size(); }
  const std::vector<std::size_t>& order() const { return order_; }

  /// Indices of batch `b` (0-based) of this epoch.
  std::span<const std::size_t> batch_indices(std::size_t b) const {
    const std::size_t begin = b * batch_size_;
    const std::size_t end = std::min(order_.size(), begin + batch_size_);
    return std::span<const std::size_t>(order_.data() + begin, end - begin);
  }

  FactorBatch next() {
    if (done()) throw std::out_of_range("epoch exhausted");
    auto idx = batch_indices(pos_ / batch_size_);
    pos_ += idx.size();
    return data_->batch_from_indices(idx);
  }

 private:
  const Shapes5* data_;
  std::size_t batch_size_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

inline EpochIterator iterate_epoch(const Shapes5& data, std::size_t batch_size, std::mt19937_64& rng) {
  return EpochIterator(data, batch_size, rng);
}

inline void Shapes5::dump(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  std::ofstream csv(dir / "factors.csv");
  if (!csv) throw std::runtime_error("cannot write " + (dir / "factors.csv").string());
  csv << "file";
  for (const auto& n : space_.names) csv << ',' << n;
  csv << '\n';
  GrayImage img(kSide, kSide);
  for (std::size_t i = 0; i < size(); ++i) {
    const auto f = tuple_of(i);
    render_into(f, img.pixels.data());
    char name[32];
    std::snprintf(name, sizeof(name), "img_%05zu.pgm", i);
    write_pgm(dir / name, img);
    csv << name;
    for (int v : f) csv << ',' << v;
    csv << '\n';
  }
}

}  // namespace disent
