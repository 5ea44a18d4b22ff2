#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

#include "milengine/errors.hpp"
#include "milengine/preprocess/raster.hpp"

namespace milengine::prep {

using Histogram = std::array<std::uint64_t, 256>;

inline Histogram gray_histogram(const RasterImage& gray) {
  if (gray.channels != 1) throw DimensionError("histogram needs a grayscale image");
  Histogram h{};
  for (auto p : gray.pixels) ++h[p];
  return h;
}

// Otsu threshold: levels <= t are foreground, levels > t background. The
// between-class variance w0 w1 (mu0 - mu1)^2 equals (N s0 - n0 S)^2 / (N^2 n0 n1)
// for class counts n0, n1 and level sums s0, S, so candidates are compared on
// (N s0 - n0 S)^2 / (n0 n1) with exact integer cross-multiplication. Ties keep
// the lowest t.
inline int otsu_threshold(std::span<const std::uint64_t, 256> hist) {
  using boost::multiprecision::int512_t;
  std::uint64_t total = 0;
  int occupied = 0;
  for (auto c : hist) {
    if (c > 0) ++occupied;
    if (c > (std::uint64_t{1} << 48)) throw ConfigError("otsu: histogram bin count exceeds 2^48");
    total += c;
  }
  if (total == 0) throw ConfigError("otsu: empty histogram");
  if (occupied < 2) throw ConfigError("otsu: degenerate histogram (all pixels at one level)");

  int512_t sum_all = 0;
  for (int v = 0; v < 256; ++v) sum_all += int512_t(hist[v]) * v;
  const int512_t n_total = total;

  int best_t = -1;
  int512_t best_num = 0, best_den = 1;
  int512_t n0 = 0, s0 = 0;
  for (int t = 0; t < 256; ++t) {
    n0 += hist[t];
    s0 += int512_t(hist[t]) * t;
    const int512_t n1 = n_total - n0;
    if (n0 == 0 || n1 == 0) continue;
    const int512_t diff = n_total * s0 - n0 * sum_all;
    const int512_t num = diff * diff, den = n0 * n1;
    if (best_t < 0 || num * best_den > best_num * den) {
      best_t = t;
      best_num = num;
      best_den = den;
    }
  }
  return best_t;
}

struct TileParams {
  std::size_t tile_size = 512;
  double overlap = 0.5;
  double max_background = 0.20;  // tiles with a larger background fraction are dropped
};

struct TileGrid {
  std::size_t tile_size = 0;
  std::size_t stride = 0;
  std::vector<std::pair<std::size_t, std::size_t>> anchors;  // (x, y), row-major
  std::vector<std::string> warnings;
};

inline std::size_t tile_stride(std::size_t tile_size, double overlap) {
  if (tile_size < 1) throw ConfigError("tile size must be >= 1");
  if (!(overlap >= 0.0 && overlap < 1.0)) throw ConfigError("overlap must lie in [0, 1)");
  const auto stride = static_cast<std::size_t>(std::lround(static_cast<double>(tile_size) * (1.0 - overlap)));
  if (stride < 1) throw ConfigError("overlap leaves a zero stride");
  return stride;
}

// Anchors at multiples of the stride; tiles that would cross the right or
// bottom edge are dropped.
inline TileGrid tile_grid(std::size_t width, std::size_t height, std::size_t tile_size, double overlap) {
  TileGrid g;
  g.tile_size = tile_size;
  g.stride = tile_stride(tile_size, overlap);
  if (tile_size > width || tile_size > height) {
    g.warnings.push_back("tile size " + std::to_string(tile_size) + " exceeds image " + std::to_string(width) + "x" +
                         std::to_string(height) + "; no tiles");
    return g;
  }
  for (std::size_t y = 0; y + tile_size <= height; y += g.stride)
    for (std::size_t x = 0; x + tile_size <= width; x += g.stride) g.anchors.emplace_back(x, y);
  return g;
}

// Fraction of pixels strictly brighter than the threshold in a w x h window.
inline double background_fraction(const RasterImage& gray, std::size_t x0, std::size_t y0, std::size_t w,
                                  std::size_t h, int threshold) {
  if (gray.channels != 1) throw DimensionError("background_fraction needs a grayscale image");
  if (x0 + w > gray.width || y0 + h > gray.height || w == 0 || h == 0) throw DimensionError("window exceeds the image");
  std::size_t above = 0;
  for (std::size_t y = y0; y < y0 + h; ++y) {
    const std::uint8_t* row = &gray.pixels[y * gray.width + x0];
    for (std::size_t x = 0; x < w; ++x) above += static_cast<int>(row[x]) > threshold;
  }
  return static_cast<double>(above) / static_cast<double>(w * h);
}

// Whole-patch form; RGB patches are converted to luma first.
inline double background_fraction(const RasterImage& patch, int threshold) {
  const RasterImage gray = to_gray(patch);
  return background_fraction(gray, 0, 0, gray.width, gray.height, threshold);
}

inline bool keep_patch(double background, double max_background = 0.20) { return background <= max_background; }

struct PatchRecord {
  std::string slide_id;
  std::size_t x = 0, y = 0;
  double background_fraction = 0.0;
  bool kept = false;
};

struct PatchScan {
  int threshold = 0;
  TileGrid grid;
  std::vector<PatchRecord> records;  // every tile, row-major

  std::size_t kept_count() const {
    std::size_t n = 0;
    for (const auto& r : records) n += r.kept;
    return n;
  }
};

// One Otsu threshold from the whole-slide grayscale histogram, then every tile
// of the grid scored against it.
inline PatchScan build_patch_manifest(const std::string& slide_id, const RasterImage& slide, const TileParams& params = {}) {
  validate(slide);
  if (!(params.max_background >= 0.0 && params.max_background <= 1.0)) throw ConfigError("max_background must lie in [0, 1]");
  const RasterImage gray = to_gray(slide);
  PatchScan scan;
  scan.threshold = otsu_threshold(gray_histogram(gray));
  scan.grid = tile_grid(gray.width, gray.height, params.tile_size, params.overlap);
  for (const auto& [x, y] : scan.grid.anchors) {
    const double bg = background_fraction(gray, x, y, params.tile_size, params.tile_size, scan.threshold);
    scan.records.push_back({slide_id, x, y, bg, keep_patch(bg, params.max_background)});
  }
  return scan;
}

inline void write_patch_csv(const std::vector<PatchRecord>& records, const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create '" + path.parent_path().string() + "': " + ec.message());
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << "slide_id,x,y,background_fraction,kept\n";
  char buf[32];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof buf, "%.9g", r.background_fraction);
    out << r.slide_id << ',' << r.x << ',' << r.y << ',' << buf << ',' << (r.kept ? 1 : 0) << '\n';
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace milengine::prep
