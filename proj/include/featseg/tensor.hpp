#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <variant>
#include <vector>

namespace featseg {

enum class DType : std::uint8_t {
  f32 = 1,  // IEEE-754 binary32, little-endian on disk
  u8 = 2,
};

/// Dense row-major tensor (outermost dimension first). Holds images,
/// feature maps (C x H x W per sample) and latent vectors.
class FeatureTensor {
 public:
  /// Largest element count accepted anywhere: 2^48.
  static constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 48;

  FeatureTensor() = default;

  static FeatureTensor from_f32(std::vector<std::uint64_t> dims,
                                std::vector<float> data);
  static FeatureTensor from_u8(std::vector<std::uint64_t> dims,
                               std::vector<std::uint8_t> data);

  DType dtype() const noexcept {
    return data_.index() == 0 ? DType::f32 : DType::u8;
  }
  const std::vector<std::uint64_t>& dims() const noexcept { return dims_; }
  std::size_t ndim() const noexcept { return dims_.size(); }
  std::size_t size() const noexcept;

  /// Throws ValidationError when the dtype does not match.
  std::span<const float> f32() const;
  std::span<float> f32();
  std::span<const std::uint8_t> u8() const;

  /// Bit-exact comparison (NaN payloads included).
  friend bool operator==(const FeatureTensor& a, const FeatureTensor& b);

 private:
  std::vector<std::uint64_t> dims_;
  std::variant<std::vector<float>, std::vector<std::uint8_t>> data_;
};

/// Product of extents; throws FormatError(dims_overflow) past 2^48.
std::uint64_t checked_element_count(std::span<const std::uint64_t> dims);

/// FT01 encoding: "FT01", u32 ndim, ndim x u64 dims, u8 dtype, payload.
/// Everything little-endian, no padding.
std::vector<std::uint8_t> encode_tensor(const FeatureTensor& t);

/// Parses an in-memory FT01 image. Throws FormatError naming the fault.
FeatureTensor decode_tensor(std::span<const std::uint8_t> bytes);

void write_tensor(const FeatureTensor& t, const std::filesystem::path& path);

/// Streams the header first and checks the declared payload against the
/// file size before allocating anything.
FeatureTensor read_tensor(const std::filesystem::path& path);

}  // namespace featseg
