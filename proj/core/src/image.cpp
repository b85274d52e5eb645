#include "gfrrn/image.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <memory>

#include "gfrrn/error.hpp"

namespace gfrrn {

Image::Image(std::size_t height, std::size_t width, double fill) : pixels_({height, width, 3}, fill) {}

Image::Image(Tensor pixels) : pixels_(std::move(pixels)) {
  require(pixels_.rank() == 3 && pixels_.dim(2) == 3 && pixels_.dim(0) > 0 && pixels_.dim(1) > 0,
          "image: expected (H, W, 3), got " + shape_string(pixels_.shape()));
  require(pixels_.all_finite(), "image: non-finite pixel values");
}

bool Image::in_unit_range() const {
  return std::all_of(pixels_.data().begin(), pixels_.data().end(),
                     [](double v) { return v >= 0.0 && v <= 1.0; });
}

Image Image::clipped() const { return Image(clip01(pixels_)); }

Tensor clip01(const Tensor& t) {
  Tensor out = t;
  for (auto& v : out.data()) v = std::clamp(v, 0.0, 1.0);
  return out;
}

std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  if (n == 1) return 0;
  const auto period = static_cast<std::ptrdiff_t>(2 * (n - 1));
  std::ptrdiff_t m = i % period;
  if (m < 0) m += period;
  if (m >= static_cast<std::ptrdiff_t>(n)) m = period - m;
  return static_cast<std::size_t>(m);
}

Tensor downsample_area(const Tensor& hwc, std::size_t factor) {
  require(hwc.rank() == 3, "downsample_area: expected (H, W, C)");
  require(factor >= 1 && hwc.dim(0) % factor == 0 && hwc.dim(1) % factor == 0,
          "downsample_area: factor " + std::to_string(factor) + " does not divide " + shape_string(hwc.shape()));
  if (factor == 1) return hwc;
  const std::size_t h = hwc.dim(0) / factor, w = hwc.dim(1) / factor, c = hwc.dim(2);
  Tensor out({h, w, c});
  const double inv = 1.0 / static_cast<double>(factor * factor);
  for (std::size_t y = 0; y < hwc.dim(0); ++y)
    for (std::size_t x = 0; x < hwc.dim(1); ++x)
      for (std::size_t ch = 0; ch < c; ++ch)
        out[((y / factor) * w + x / factor) * c + ch] += hwc[(y * hwc.dim(1) + x) * c + ch] * inv;
  return out;
}

Tensor pad_reflect(const Tensor& hwc, std::size_t height, std::size_t width) {
  require(hwc.rank() == 3 && height >= hwc.dim(0) && width >= hwc.dim(1), "pad_reflect: bad target size");
  const std::size_t c = hwc.dim(2);
  Tensor out({height, width, c});
  for (std::size_t y = 0; y < height; ++y) {
    const std::size_t sy = reflect_index(static_cast<std::ptrdiff_t>(y), hwc.dim(0));
    for (std::size_t x = 0; x < width; ++x) {
      const std::size_t sx = reflect_index(static_cast<std::ptrdiff_t>(x), hwc.dim(1));
      for (std::size_t ch = 0; ch < c; ++ch) out[(y * width + x) * c + ch] = hwc[(sy * hwc.dim(1) + sx) * c + ch];
    }
  }
  return out;
}

Tensor crop(const Tensor& hwc, std::size_t height, std::size_t width) {
  require(hwc.rank() == 3 && height <= hwc.dim(0) && width <= hwc.dim(1), "crop: bad target size");
  const std::size_t c = hwc.dim(2);
  Tensor out({height, width, c});
  for (std::size_t y = 0; y < height; ++y)
    std::copy_n(hwc.ptr() + y * hwc.dim(1) * c, width * c, out.ptr() + y * width * c);
  return out;
}

// ---------------------------------------------------------------- PNG

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  return f;
}

struct DecodedPng {
  std::size_t height = 0, width = 0, channels = 0, depth = 0;
  std::vector<std::uint16_t> samples;  // row-major, `channels` per pixel
};

DecodedPng decode(const std::filesystem::path& path) {
  FilePtr f = open_file(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png: cannot allocate reader");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("png: cannot allocate info");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("png: failed to decode '" + path.string() + "'");
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (depth == 16) png_set_swap(png);  // host little-endian order
  png_read_update_info(png, info);

  DecodedPng out;
  out.height = png_get_image_height(png, info);
  out.width = png_get_image_width(png, info);
  out.channels = png_get_channels(png, info);
  out.depth = png_get_bit_depth(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  std::vector<png_byte> buffer(rowbytes * out.height);
  std::vector<png_bytep> rows(out.height);
  for (std::size_t y = 0; y < out.height; ++y) rows[y] = buffer.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);

  out.samples.resize(out.height * out.width * out.channels);
  if (out.depth == 16) {
    for (std::size_t i = 0; i < out.samples.size(); ++i)
      out.samples[i] = static_cast<std::uint16_t>(buffer[2 * i] | (buffer[2 * i + 1] << 8));
  } else {
    for (std::size_t i = 0; i < out.samples.size(); ++i) out.samples[i] = buffer[i];
  }
  return out;
}

void encode(const std::filesystem::path& path, const std::vector<std::uint16_t>& samples, std::size_t height,
            std::size_t width, std::size_t channels, int depth) {
  require(channels == 1 || channels == 3, "png: only 1 or 3 channels are written");
  require(samples.size() == height * width * channels, "png: sample count mismatch");
  FilePtr f = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png: cannot allocate writer");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("png: cannot allocate info");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("png: failed to encode '" + path.string() + "'");
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), depth,
               channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t bytes = depth == 16 ? 2 : 1;
  std::vector<png_byte> row(width * channels * bytes);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t i = 0; i < width * channels; ++i) {
      const std::uint16_t v = samples[y * width * channels + i];
      if (depth == 16) {
        row[2 * i] = static_cast<png_byte>(v >> 8);  // PNG is big-endian
        row[2 * i + 1] = static_cast<png_byte>(v & 0xff);
      } else {
        row[i] = static_cast<png_byte>(v);
      }
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

Image read_png(const std::filesystem::path& path) {
  const DecodedPng d = decode(path);
  const double scale = d.depth == 16 ? 65535.0 : 255.0;
  Image img(d.height, d.width);
  for (std::size_t p = 0; p < d.height * d.width; ++p) {
    for (std::size_t c = 0; c < 3; ++c) {
      const std::size_t src = d.channels >= 3 ? c : 0;
      img.pixels()[p * 3 + c] = d.samples[p * d.channels + src] / scale;
    }
  }
  return img;
}

void write_png(const std::filesystem::path& path, const Image& image) {
  std::vector<std::uint16_t> samples(image.pixels().size());
  for (std::size_t i = 0; i < samples.size(); ++i)
    samples[i] = static_cast<std::uint16_t>(std::lround(std::clamp(image.pixels()[i], 0.0, 1.0) * 255.0));
  encode(path, samples, image.height(), image.width(), 3, 8);
}

void write_png16(const std::filesystem::path& path, const std::vector<std::uint16_t>& codes, std::size_t height,
                 std::size_t width, std::size_t channels) {
  encode(path, codes, height, width, channels, 16);
}

std::vector<std::uint16_t> read_png16(const std::filesystem::path& path, std::size_t& height, std::size_t& width,
                                      std::size_t& channels) {
  DecodedPng d = decode(path);
  if (d.depth != 16) throw IoError("'" + path.string() + "' is not a 16-bit PNG");
  height = d.height;
  width = d.width;
  channels = d.channels;
  return std::move(d.samples);
}

std::uint16_t encode_signed16(double n) {
  const double code = std::round((std::clamp(n, -1.0, 1.0) + 1.0) * 32767.5);
  return static_cast<std::uint16_t>(std::clamp(code, 0.0, 65535.0));
}

double decode_signed16(std::uint16_t code) { return code / 32767.5 - 1.0; }

void write_signed_png16(const std::filesystem::path& path, const Tensor& hwc) {
  require(hwc.rank() == 3 && (hwc.dim(2) == 1 || hwc.dim(2) == 3), "write_signed_png16: expected (H, W, 1|3)");
  std::vector<std::uint16_t> codes(hwc.size());
  for (std::size_t i = 0; i < codes.size(); ++i) codes[i] = encode_signed16(hwc[i]);
  write_png16(path, codes, hwc.dim(0), hwc.dim(1), hwc.dim(2));
}

Tensor read_signed_png16(const std::filesystem::path& path) {
  std::size_t h = 0, w = 0, c = 0;
  const auto codes = read_png16(path, h, w, c);
  Tensor out({h, w, c});
  for (std::size_t i = 0; i < codes.size(); ++i) out[i] = decode_signed16(codes[i]);
  return out;
}

Image heat_map(const Tensor& values, double lo, double hi) {
  require(values.rank() == 2 || (values.rank() == 3 && values.dim(2) == 1), "heat_map: expected (H, W[, 1])");
  // Piecewise-linear approximation of a perceptual blue-green-yellow map.
  static constexpr std::array<std::array<double, 3>, 5> kStops = {{{0.267, 0.005, 0.329},
                                                                    {0.229, 0.322, 0.546},
                                                                    {0.128, 0.567, 0.551},
                                                                    {0.369, 0.789, 0.383},
                                                                    {0.993, 0.906, 0.144}}};
  const std::size_t h = values.dim(0), w = values.dim(1);
  Image img(h, w);
  const double span = hi > lo ? hi - lo : 1.0;
  for (std::size_t i = 0; i < h * w; ++i) {
    const double t = std::clamp((values[i] - lo) / span, 0.0, 1.0) * (kStops.size() - 1);
    const auto k = std::min<std::size_t>(static_cast<std::size_t>(t), kStops.size() - 2);
    const double f = t - static_cast<double>(k);
    for (std::size_t c = 0; c < 3; ++c) img.pixels()[i * 3 + c] = kStops[k][c] * (1 - f) + kStops[k + 1][c] * f;
  }
  return img;
}

}  // namespace gfrrn
