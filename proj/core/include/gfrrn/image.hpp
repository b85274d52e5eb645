#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gfrrn/tensor.hpp"

namespace gfrrn {

/// H x W x 3 array of intensities in [0, 1].
class Image {
 public:
  Image() = default;
  Image(std::size_t height, std::size_t width, double fill = 0.0);
  /// Validates shape (H, W, 3) and finiteness. Values are not clipped.
  explicit Image(Tensor pixels);

  std::size_t height() const { return pixels_.empty() ? 0 : pixels_.dim(0); }
  std::size_t width() const { return pixels_.empty() ? 0 : pixels_.dim(1); }
  bool empty() const { return pixels_.empty(); }

  const Tensor& pixels() const { return pixels_; }
  Tensor& pixels() { return pixels_; }

  double& at(std::size_t y, std::size_t x, std::size_t c) { return pixels_[(y * width() + x) * 3 + c]; }
  double at(std::size_t y, std::size_t x, std::size_t c) const { return pixels_[(y * width() + x) * 3 + c]; }

  bool same_size(const Image& other) const {
    return height() == other.height() && width() == other.width();
  }
  /// True when every value lies in [0, 1].
  bool in_unit_range() const;
  Image clipped() const;

 private:
  Tensor pixels_;
};

/// Clamp every value into [0, 1].
Tensor clip01(const Tensor& t);

/// Area-average downsampling by an integer factor (dimensions must divide).
Tensor downsample_area(const Tensor& hwc, std::size_t factor);
/// Reflect-pads an (H, W, C) array on the bottom/right to the given size.
Tensor pad_reflect(const Tensor& hwc, std::size_t height, std::size_t width);
/// Top-left crop of an (H, W, C) array.
Tensor crop(const Tensor& hwc, std::size_t height, std::size_t width);

/// Mirror index without edge repetition (…, 2, 1, 0, 1, 2, …); valid for any
/// integer i and n >= 1.
std::size_t reflect_index(std::ptrdiff_t i, std::size_t n);

// PNG codecs ---------------------------------------------------------------

/// Reads 8- or 16-bit gray/RGB(A) PNGs into an RGB image in [0, 1].
Image read_png(const std::filesystem::path& path);
/// Writes an 8-bit RGB PNG; values are clipped to [0, 1] first.
void write_png(const std::filesystem::path& path, const Image& image);
/// Writes a 16-bit PNG with 1 or 3 channels of raw codes.
void write_png16(const std::filesystem::path& path, const std::vector<std::uint16_t>& codes,
                 std::size_t height, std::size_t width, std::size_t channels);
/// Reads a 16-bit PNG into raw codes; channels reports 1 or 3.
std::vector<std::uint16_t> read_png16(const std::filesystem::path& path, std::size_t& height,
                                      std::size_t& width, std::size_t& channels);

/// Signed values in [-1, 1] stored as round((n + 1) * 32767.5).
std::uint16_t encode_signed16(double n);
double decode_signed16(std::uint16_t code);
void write_signed_png16(const std::filesystem::path& path, const Tensor& hwc);
Tensor read_signed_png16(const std::filesystem::path& path);

/// Renders a single-channel (H, W) or (H, W, 1) array as a colour heat map,
/// linearly mapping [lo, hi] onto the palette.
Image heat_map(const Tensor& values, double lo, double hi);

}  // namespace gfrrn
