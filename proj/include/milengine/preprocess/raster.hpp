#pragma once

// 8-bit rasters: binary/ASCII PGM and PPM, and PNG through libpng's simplified API.

#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <png.h>

#include "milengine/data/bag.hpp"
#include "milengine/errors.hpp"

namespace milengine::prep {

struct RasterImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;  // 1 (gray) or 3 (RGB)
  std::vector<std::uint8_t> pixels;  // row-major, interleaved channels

  RasterImage() = default;
  RasterImage(std::size_t w, std::size_t h, std::size_t c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c), pixels(w * h * c, fill) {}

  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c = 0) { return pixels[(y * width + x) * channels + c]; }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t c = 0) const {
    return pixels[(y * width + x) * channels + c];
  }
};

inline void validate(const RasterImage& img) {
  if (img.width < 1 || img.height < 1) throw FormatError("raster must be at least 1x1");
  if (img.channels != 1 && img.channels != 3) throw FormatError("raster must have 1 or 3 channels");
  if (img.pixels.size() != img.width * img.height * img.channels) throw FormatError("raster pixel buffer has the wrong size");
}

// Luma 0.299 R + 0.587 G + 0.114 B, rounded to the nearest level.
inline std::uint8_t luma(std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  const double y = 0.299 * r + 0.587 * g + 0.114 * b;
  return static_cast<std::uint8_t>(std::min(255L, std::lround(y)));
}

inline RasterImage to_gray(const RasterImage& img) {
  validate(img);
  if (img.channels == 1) return img;
  RasterImage out(img.width, img.height, 1);
  for (std::size_t i = 0; i < img.width * img.height; ++i)
    out.pixels[i] = luma(img.pixels[3 * i], img.pixels[3 * i + 1], img.pixels[3 * i + 2]);
  return out;
}

inline RasterImage crop(const RasterImage& img, std::size_t x, std::size_t y, std::size_t w, std::size_t h) {
  if (x + w > img.width || y + h > img.height) throw DimensionError("crop window exceeds the image");
  RasterImage out(w, h, img.channels);
  const std::size_t row_bytes = w * img.channels;
  for (std::size_t r = 0; r < h; ++r)
    std::memcpy(&out.pixels[r * row_bytes], &img.pixels[((y + r) * img.width + x) * img.channels], row_bytes);
  return out;
}

// Integer-factor area average; trailing rows/columns that do not fill a whole
// block are dropped.
inline RasterImage downsample(const RasterImage& img, std::size_t factor) {
  validate(img);
  if (factor < 1) throw ConfigError("downsample factor must be >= 1");
  if (factor == 1) return img;
  const std::size_t w = img.width / factor, h = img.height / factor;
  if (w == 0 || h == 0) throw DimensionError("downsample factor exceeds the image size");
  RasterImage out(w, h, img.channels);
  const std::uint64_t area = factor * factor;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) {
        std::uint64_t sum = 0;
        for (std::size_t dy = 0; dy < factor; ++dy)
          for (std::size_t dx = 0; dx < factor; ++dx) sum += img.at(x * factor + dx, y * factor + dy, c);
        out.at(x, y, c) = static_cast<std::uint8_t>((sum + area / 2) / area);
      }
  return out;
}

namespace detail {

class PnmReader {
 public:
  PnmReader(const std::vector<char>& bytes, std::string name) : b_(bytes), name_(std::move(name)) {}

  std::size_t number() {
    skip_space_and_comments();
    if (pos_ >= b_.size() || !std::isdigit(static_cast<unsigned char>(b_[pos_])))
      throw FormatError(name_ + ": malformed PNM header");
    std::size_t v = 0;
    while (pos_ < b_.size() && std::isdigit(static_cast<unsigned char>(b_[pos_]))) {
      v = v * 10 + static_cast<std::size_t>(b_[pos_++] - '0');
      if (v > (1u << 30)) throw FormatError(name_ + ": PNM header value too large");
    }
    return v;
  }

  std::size_t pos() const { return pos_; }
  void advance(std::size_t n) { pos_ += n; }

 private:
  void skip_space_and_comments() {
    while (pos_ < b_.size()) {
      const char c = b_[pos_];
      if (c == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  const std::vector<char>& b_;
  std::string name_;
  std::size_t pos_ = 0;
};

inline RasterImage decode_pnm(const std::vector<char>& bytes, const std::string& name) {
  if (bytes.size() < 2 || bytes[0] != 'P') throw FormatError(name + ": not a PNM file");
  const char kind = bytes[1];
  if (kind != '2' && kind != '3' && kind != '5' && kind != '6') throw FormatError(name + ": unsupported PNM type P" + std::string(1, kind));
  PnmReader in(bytes, name);
  in.advance(2);
  const std::size_t w = in.number(), h = in.number(), maxval = in.number();
  if (w == 0 || h == 0) throw FormatError(name + ": zero image dimension");
  if (maxval != 255) throw FormatError(name + ": only 8-bit PNM (maxval 255) is supported");
  const std::size_t channels = (kind == '3' || kind == '6') ? 3 : 1;
  RasterImage img(w, h, channels);
  if (kind == '5' || kind == '6') {
    const std::size_t start = in.pos() + 1;  // exactly one whitespace byte after maxval
    if (bytes.size() - std::min(bytes.size(), start) < img.pixels.size()) throw FormatError(name + ": truncated pixel data");
    std::memcpy(img.pixels.data(), bytes.data() + start, img.pixels.size());
  } else {
    for (auto& p : img.pixels) {
      const auto v = in.number();
      if (v > 255) throw FormatError(name + ": sample exceeds maxval");
      p = static_cast<std::uint8_t>(v);
    }
  }
  return img;
}

inline RasterImage read_png(const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str()))
    throw FormatError(path.string() + ": " + image.message);
  const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  RasterImage img(image.width, image.height, color ? 3 : 1);
  // transparent pixels are composited onto white, i.e. read as glass
  png_color white{255, 255, 255};
  if (!png_image_finish_read(&image, &white, img.pixels.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw FormatError(path.string() + ": " + msg);
  }
  return img;
}

}  // namespace detail

// Reads PNG, PGM (P2/P5) or PPM (P3/P6), chosen by the file signature.
inline RasterImage read_raster(const std::filesystem::path& path) {
  const auto bytes = data::detail::read_file(path);
  static constexpr unsigned char kPngSig[4] = {0x89, 'P', 'N', 'G'};
  if (bytes.size() >= 4 && std::memcmp(bytes.data(), kPngSig, 4) == 0) return detail::read_png(path);
  if (bytes.size() >= 2 && bytes[0] == 'P') return detail::decode_pnm(bytes, path.string());
  throw FormatError(path.string() + ": unrecognized raster format (expected PNG, PGM or PPM)");
}

// Binary PGM for gray images, binary PPM for RGB.
inline void write_pnm(const RasterImage& img, const std::filesystem::path& path) {
  validate(img);
  const std::string header = std::string(img.channels == 1 ? "P5" : "P6") + "\n" + std::to_string(img.width) + " " +
                             std::to_string(img.height) + "\n255\n";
  std::vector<char> out(header.begin(), header.end());
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  data::detail::write_file(path, out);
}

inline void write_png(const RasterImage& img, const std::filesystem::path& path) {
  validate(img);
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, img.pixels.data(), 0, nullptr))
    throw IoError(path.string() + ": " + image.message);
}

}  // namespace milengine::prep
