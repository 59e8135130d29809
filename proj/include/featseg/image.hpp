#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace featseg {

/// Per-pixel class (or cluster) ids, row-major. 255 marks ignored pixels.
struct MaskImage {
  static constexpr std::uint8_t kIgnore = 255;

  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::vector<std::uint8_t> labels;

  MaskImage() = default;
  MaskImage(std::uint32_t w, std::uint32_t h, std::uint8_t fill = 0)
      : width(w), height(h), labels(std::size_t{w} * h, fill) {}

  std::uint8_t at(std::uint32_t x, std::uint32_t y) const {
    return labels[std::size_t{y} * width + x];
  }
  std::uint8_t& at(std::uint32_t x, std::uint32_t y) {
    return labels[std::size_t{y} * width + x];
  }

  friend bool operator==(const MaskImage&, const MaskImage&) = default;
};

/// 8-bit RGB image, row-major, channels interleaved.
struct RgbImage {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::vector<std::uint8_t> pixels;

  RgbImage() = default;
  RgbImage(std::uint32_t w, std::uint32_t h)
      : width(w), height(h), pixels(std::size_t{w} * h * 3, 0) {}

  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

/// Throws ValidationError if any non-ignore label is >= n_classes or the
/// mask is empty.
void validate_mask(const MaskImage& m, int n_classes);

std::vector<std::uint8_t> encode_mask_png(const MaskImage& m);
/// Accepts only 8-bit single-channel grayscale PNGs.
MaskImage decode_mask_png(std::span<const std::uint8_t> bytes);

void write_mask_png(const MaskImage& m, const std::filesystem::path& path);
MaskImage read_mask_png(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_rgb_png(const RgbImage& img);
/// Accepts only 8-bit RGB PNGs.
RgbImage decode_rgb_png(std::span<const std::uint8_t> bytes);

void write_rgb_png(const RgbImage& img, const std::filesystem::path& path);
RgbImage read_rgb_png(const std::filesystem::path& path);

/// Visualization colors for class ids 0..n-1. Never read back.
std::vector<std::array<std::uint8_t, 3>> make_palette(int n_classes);
void write_palette_json(int n_classes, const std::filesystem::path& path);

}  // namespace featseg
