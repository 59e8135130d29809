#include "featseg/image.hpp"

#include <cmath>
#include <csetjmp>
#include <cstring>
#include <string>

#include <png.h>
#include <json.hpp>

#include "featseg/error.hpp"
#include "featseg/fileutil.hpp"

namespace featseg {

namespace {

// Dimensions above this are rejected before any row buffer is allocated.
constexpr png_uint_32 kMaxSide = 1u << 15;

struct WriteSink {
  std::vector<std::uint8_t>* out;
};

void write_cb(png_structp png, png_bytep data, png_size_t n) {
  auto* sink = static_cast<WriteSink*>(png_get_io_ptr(png));
  sink->out->insert(sink->out->end(), data, data + n);
}

void flush_cb(png_structp) {}

struct ReadSource {
  const std::uint8_t* data;
  std::size_t size;
  std::size_t pos;
};

void read_cb(png_structp png, png_bytep out, png_size_t n) {
  auto* src = static_cast<ReadSource*>(png_get_io_ptr(png));
  if (n > src->size - src->pos) png_error(png, "unexpected end of data");
  std::memcpy(out, src->data + src->pos, n);
  src->pos += n;
}

struct PngError {
  char message[256];
};

void error_cb(png_structp png, png_const_charp msg) {
  auto* err = static_cast<PngError*>(png_get_error_ptr(png));
  std::snprintf(err->message, sizeof(err->message), "%s", msg);
  png_longjmp(png, 1);
}

void warning_cb(png_structp, png_const_charp) {}

// Returns false on failure with err->message set. Only trivially
// destructible locals live in frames that longjmp may unwind.
bool encode_raw(const std::uint8_t* pixels, png_uint_32 w, png_uint_32 h,
                int color_type, int channels, WriteSink* sink, PngError* err) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, err,
                                            error_cb, warning_cb);
  if (png == nullptr) return false;
  png_infop info = png_create_info_struct(png);
  if (info == nullptr || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    return false;
  }
  png_set_write_fn(png, sink, write_cb, flush_cb);
  png_set_compression_level(png, 6);
  png_set_IHDR(png, info, w, h, 8, color_type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t stride = std::size_t{w} * static_cast<std::size_t>(channels);
  for (png_uint_32 y = 0; y < h; ++y) {
    png_write_row(png, const_cast<png_bytep>(pixels + y * stride));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

struct PngHeader {
  png_uint_32 width;
  png_uint_32 height;
  int bit_depth;
  int color_type;
};

bool read_header(png_structp png, png_infop info, PngHeader* hdr) {
  if (setjmp(png_jmpbuf(png))) return false;
  png_read_info(png, info);
  int interlace = 0;
  png_get_IHDR(png, info, &hdr->width, &hdr->height, &hdr->bit_depth,
               &hdr->color_type, &interlace, nullptr, nullptr);
  return true;
}

bool read_rows(png_structp png, png_infop info, std::uint8_t* out,
               std::size_t stride, png_uint_32 height) {
  if (setjmp(png_jmpbuf(png))) return false;
  const int passes = png_set_interlace_handling(png);
  png_read_update_info(png, info);
  for (int p = 0; p < passes; ++p) {
    for (png_uint_32 y = 0; y < height; ++y) {
      png_read_row(png, out + y * stride, nullptr);
    }
  }
  png_read_end(png, nullptr);
  return true;
}

std::vector<std::uint8_t> encode(const std::uint8_t* pixels, std::uint32_t w,
                                 std::uint32_t h, int color_type,
                                 int channels) {
  if (w == 0 || h == 0) throw ValidationError("png: dimensions must be non-zero");
  std::vector<std::uint8_t> out;
  WriteSink sink{&out};
  PngError err{};
  if (!encode_raw(pixels, w, h, color_type, channels, &sink, &err)) {
    throw IoError(std::string("png encode failed: ") + err.message);
  }
  return out;
}

// Decodes an 8-bit PNG with the exact colour type requested.
std::vector<std::uint8_t> decode(std::span<const std::uint8_t> bytes,
                                 int want_color_type, int channels,
                                 const char* what, std::uint32_t* w,
                                 std::uint32_t* h) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) {
    throw FormatError(FormatFault::bad_png, "not a PNG file");
  }
  PngError err{};
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err,
                                           error_cb, warning_cb);
  if (png == nullptr) throw IoError("png: out of memory");
  png_infop info = png_create_info_struct(png);
  if (info == nullptr) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("png: out of memory");
  }
  ReadSource src{bytes.data(), bytes.size(), 0};
  png_set_read_fn(png, &src, read_cb);
  png_set_user_limits(png, kMaxSide, kMaxSide);

  PngHeader hdr{};
  if (!read_header(png, info, &hdr)) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError(FormatFault::bad_png, err.message);
  }
  if (hdr.bit_depth != 8 || hdr.color_type != want_color_type) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError(FormatFault::bad_png,
                      std::string("expected 8-bit ") + what + " PNG, got depth " +
                          std::to_string(hdr.bit_depth) + " color type " +
                          std::to_string(hdr.color_type));
  }
  if (hdr.width == 0 || hdr.height == 0) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError(FormatFault::bad_png, "zero dimensions");
  }
  const std::size_t stride = std::size_t{hdr.width} * channels;
  std::vector<std::uint8_t> pixels(stride * hdr.height);
  const bool ok = read_rows(png, info, pixels.data(), stride, hdr.height);
  png_destroy_read_struct(&png, &info, nullptr);
  if (!ok) throw FormatError(FormatFault::bad_png, err.message);
  *w = hdr.width;
  *h = hdr.height;
  return pixels;
}

}  // namespace

void validate_mask(const MaskImage& m, int n_classes) {
  if (m.width == 0 || m.height == 0) {
    throw ValidationError("mask dimensions must be non-zero");
  }
  if (m.labels.size() != std::size_t{m.width} * m.height) {
    throw ValidationError("mask buffer does not match its dimensions");
  }
  for (std::size_t i = 0; i < m.labels.size(); ++i) {
    const auto v = m.labels[i];
    if (v != MaskImage::kIgnore && v >= n_classes) {
      throw ValidationError("mask label " + std::to_string(v) +
                            " at pixel " + std::to_string(i) +
                            " exceeds class count " +
                            std::to_string(n_classes));
    }
  }
}

std::vector<std::uint8_t> encode_mask_png(const MaskImage& m) {
  if (m.labels.size() != std::size_t{m.width} * m.height) {
    throw ValidationError("mask buffer does not match its dimensions");
  }
  return encode(m.labels.data(), m.width, m.height, PNG_COLOR_TYPE_GRAY, 1);
}

MaskImage decode_mask_png(std::span<const std::uint8_t> bytes) {
  MaskImage m;
  m.labels = decode(bytes, PNG_COLOR_TYPE_GRAY, 1, "single-channel", &m.width,
                    &m.height);
  return m;
}

void write_mask_png(const MaskImage& m, const std::filesystem::path& path) {
  write_file_atomic(path, encode_mask_png(m));
}

MaskImage read_mask_png(const std::filesystem::path& path) {
  return decode_mask_png(read_file_bytes(path));
}

std::vector<std::uint8_t> encode_rgb_png(const RgbImage& img) {
  if (img.pixels.size() != std::size_t{img.width} * img.height * 3) {
    throw ValidationError("image buffer does not match its dimensions");
  }
  return encode(img.pixels.data(), img.width, img.height, PNG_COLOR_TYPE_RGB, 3);
}

RgbImage decode_rgb_png(std::span<const std::uint8_t> bytes) {
  RgbImage img;
  img.pixels = decode(bytes, PNG_COLOR_TYPE_RGB, 3, "RGB", &img.width,
                      &img.height);
  return img;
}

void write_rgb_png(const RgbImage& img, const std::filesystem::path& path) {
  write_file_atomic(path, encode_rgb_png(img));
}

RgbImage read_rgb_png(const std::filesystem::path& path) {
  return decode_rgb_png(read_file_bytes(path));
}

std::vector<std::array<std::uint8_t, 3>> make_palette(int n_classes) {
  std::vector<std::array<std::uint8_t, 3>> palette;
  palette.reserve(static_cast<std::size_t>(std::max(n_classes, 0)));
  for (int c = 0; c < n_classes; ++c) {
    // Golden-angle hue walk; class 0 stays black for background.
    if (c == 0) {
      palette.push_back({0, 0, 0});
      continue;
    }
    const double hue = std::fmod(c * 0.618033988749895, 1.0) * 6.0;
    const double value = (c % 2 == 0) ? 0.75 : 1.0;
    const int sector = static_cast<int>(hue);
    const double f = hue - sector;
    const double p = 0.0, q = value * (1.0 - f), t = value * f;
    double r = 0, g = 0, b = 0;
    switch (sector % 6) {
      case 0: r = value, g = t, b = p; break;
      case 1: r = q, g = value, b = p; break;
      case 2: r = p, g = value, b = t; break;
      case 3: r = p, g = q, b = value; break;
      case 4: r = t, g = p, b = value; break;
      default: r = value, g = p, b = q; break;
    }
    palette.push_back({static_cast<std::uint8_t>(std::lround(r * 255)),
                       static_cast<std::uint8_t>(std::lround(g * 255)),
                       static_cast<std::uint8_t>(std::lround(b * 255))});
  }
  return palette;
}

void write_palette_json(int n_classes, const std::filesystem::path& path) {
  nlohmann::json doc = nlohmann::json::array();
  for (const auto& rgb : make_palette(n_classes)) {
    doc.push_back({rgb[0], rgb[1], rgb[2]});
  }
  write_text_atomic(path, doc.dump() + "\n");
}

}  // namespace featseg
