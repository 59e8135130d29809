#include "featseg/tensor.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <string>

#include "featseg/error.hpp"
#include "featseg/fileutil.hpp"

namespace featseg {

namespace {

constexpr std::array<std::uint8_t, 4> kMagic = {'F', 'T', '0', '1'};
constexpr std::size_t kPrefixBytes = 8;  // magic + u32 ndim

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
  }
}

template <typename T>
T get_le(const std::uint8_t* p) {
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    value |= static_cast<T>(p[i]) << (8 * i);
  }
  return value;
}

std::size_t element_bytes(DType dtype) { return dtype == DType::f32 ? 4 : 1; }

struct Header {
  std::vector<std::uint64_t> dims;
  DType dtype = DType::f32;
  std::uint64_t count = 0;
  std::uint64_t payload_bytes = 0;
  std::size_t header_bytes = 0;
};

// Validates the 8-byte prefix and returns ndim.
std::uint32_t parse_prefix(std::span<const std::uint8_t> prefix,
                           std::uint64_t total_size) {
  const std::size_t have = std::min(prefix.size(), kMagic.size());
  if (!std::equal(kMagic.begin(), kMagic.begin() + have, prefix.begin())) {
    throw FormatError(FormatFault::bad_magic, "magic: expected \"FT01\"");
  }
  if (have < kMagic.size()) {
    throw FormatError(FormatFault::truncated, "file ends inside the magic");
  }
  if (prefix.size() < kPrefixBytes) {
    throw FormatError(FormatFault::truncated, "ndim: header cut short");
  }
  const auto ndim = get_le<std::uint32_t>(prefix.data() + 4);
  if (ndim == 0) throw FormatError(FormatFault::bad_ndim, "ndim: must be >= 1");
  if (kPrefixBytes + std::uint64_t{ndim} * 8 + 1 > total_size) {
    throw FormatError(FormatFault::truncated,
                      "dims: header declares " + std::to_string(ndim) +
                          " dims but the file is too short");
  }
  return ndim;
}

// `rest` starts right after the prefix and holds at least ndim*8+1 bytes.
Header parse_dims_dtype(std::uint32_t ndim, const std::uint8_t* rest) {
  Header h;
  h.dims.resize(ndim);
  for (std::uint32_t i = 0; i < ndim; ++i) {
    h.dims[i] = get_le<std::uint64_t>(rest + 8 * i);
  }
  h.count = checked_element_count(h.dims);
  const std::uint8_t code = rest[8 * ndim];
  if (code != static_cast<std::uint8_t>(DType::f32) &&
      code != static_cast<std::uint8_t>(DType::u8)) {
    throw FormatError(FormatFault::unknown_dtype,
                      "dtype: code " + std::to_string(code));
  }
  h.dtype = static_cast<DType>(code);
  h.payload_bytes = h.count * element_bytes(h.dtype);
  h.header_bytes = kPrefixBytes + 8 * std::size_t{ndim} + 1;
  return h;
}

void check_payload_size(const Header& h, std::uint64_t total_size) {
  const std::uint64_t available = total_size - h.header_bytes;
  if (available < h.payload_bytes) {
    throw FormatError(FormatFault::truncated,
                      "payload: expected " + std::to_string(h.payload_bytes) +
                          " bytes, found " + std::to_string(available));
  }
  if (available > h.payload_bytes) {
    throw FormatError(FormatFault::trailing_bytes,
                      "payload: " + std::to_string(available - h.payload_bytes) +
                          " bytes past the declared payload");
  }
}

FeatureTensor build(Header h, const std::uint8_t* payload) {
  if (h.dtype == DType::u8) {
    return FeatureTensor::from_u8(
        std::move(h.dims),
        std::vector<std::uint8_t>(payload, payload + h.count));
  }
  std::vector<float> data(h.count);
  for (std::uint64_t i = 0; i < h.count; ++i) {
    data[i] = std::bit_cast<float>(get_le<std::uint32_t>(payload + 4 * i));
  }
  return FeatureTensor::from_f32(std::move(h.dims), std::move(data));
}

}  // namespace

std::uint64_t checked_element_count(std::span<const std::uint64_t> dims) {
  std::uint64_t count = 1;
  for (std::size_t i = 0; i < dims.size(); ++i) {
    const std::uint64_t d = dims[i];
    if (d != 0 && count > FeatureTensor::kMaxElements / d) {
      throw FormatError(FormatFault::dims_overflow,
                        "dims[" + std::to_string(i) +
                            "]: element count exceeds 2^48");
    }
    count *= d;
  }
  return count;
}

FeatureTensor FeatureTensor::from_f32(std::vector<std::uint64_t> dims,
                                      std::vector<float> data) {
  if (dims.empty()) throw ValidationError("tensor needs at least one dim");
  if (checked_element_count(dims) != data.size()) {
    throw ValidationError("tensor dims do not match element count");
  }
  FeatureTensor t;
  t.dims_ = std::move(dims);
  t.data_ = std::move(data);
  return t;
}

FeatureTensor FeatureTensor::from_u8(std::vector<std::uint64_t> dims,
                                     std::vector<std::uint8_t> data) {
  if (dims.empty()) throw ValidationError("tensor needs at least one dim");
  if (checked_element_count(dims) != data.size()) {
    throw ValidationError("tensor dims do not match element count");
  }
  FeatureTensor t;
  t.dims_ = std::move(dims);
  t.data_ = std::move(data);
  return t;
}

std::size_t FeatureTensor::size() const noexcept {
  return std::visit([](const auto& v) { return v.size(); }, data_);
}

std::span<const float> FeatureTensor::f32() const {
  if (const auto* v = std::get_if<std::vector<float>>(&data_)) return *v;
  throw ValidationError("tensor dtype is u8, expected f32");
}

std::span<float> FeatureTensor::f32() {
  if (auto* v = std::get_if<std::vector<float>>(&data_)) return *v;
  throw ValidationError("tensor dtype is u8, expected f32");
}

std::span<const std::uint8_t> FeatureTensor::u8() const {
  if (const auto* v = std::get_if<std::vector<std::uint8_t>>(&data_)) return *v;
  throw ValidationError("tensor dtype is f32, expected u8");
}

bool operator==(const FeatureTensor& a, const FeatureTensor& b) {
  if (a.dims_ != b.dims_ || a.data_.index() != b.data_.index()) return false;
  if (a.dtype() == DType::u8) return a.u8().size() == b.u8().size() &&
                                    std::equal(a.u8().begin(), a.u8().end(),
                                               b.u8().begin());
  const auto fa = a.f32();
  const auto fb = b.f32();
  return fa.size() == fb.size() &&
         (fa.empty() ||
          std::memcmp(fa.data(), fb.data(), fa.size() * sizeof(float)) == 0);
}

std::vector<std::uint8_t> encode_tensor(const FeatureTensor& t) {
  std::vector<std::uint8_t> out;
  out.reserve(kPrefixBytes + 8 * t.ndim() + 1 +
              t.size() * element_bytes(t.dtype()));
  out.insert(out.end(), kMagic.begin(), kMagic.end());
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.ndim()));
  for (const auto d : t.dims()) put_le<std::uint64_t>(out, d);
  out.push_back(static_cast<std::uint8_t>(t.dtype()));
  if (t.dtype() == DType::u8) {
    const auto data = t.u8();
    out.insert(out.end(), data.begin(), data.end());
  } else {
    for (const float v : t.f32()) put_le(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

FeatureTensor decode_tensor(std::span<const std::uint8_t> bytes) {
  const std::uint32_t ndim = parse_prefix(bytes, bytes.size());
  Header h = parse_dims_dtype(ndim, bytes.data() + kPrefixBytes);
  check_payload_size(h, bytes.size());
  const std::uint8_t* payload = bytes.data() + h.header_bytes;
  return build(std::move(h), payload);
}

void write_tensor(const FeatureTensor& t, const std::filesystem::path& path) {
  write_file_atomic(path, encode_tensor(t));
}

FeatureTensor read_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto end = in.tellg();
  if (end < 0) throw IoError("cannot size " + path.string());
  const auto total = static_cast<std::uint64_t>(end);
  in.seekg(0, std::ios::beg);

  std::array<std::uint8_t, kPrefixBytes> prefix{};
  const std::size_t prefix_len =
      static_cast<std::size_t>(std::min<std::uint64_t>(total, kPrefixBytes));
  in.read(reinterpret_cast<char*>(prefix.data()),
          static_cast<std::streamsize>(prefix_len));
  const std::uint32_t ndim =
      parse_prefix(std::span(prefix.data(), prefix_len), total);

  std::vector<std::uint8_t> rest(8 * std::size_t{ndim} + 1);
  in.read(reinterpret_cast<char*>(rest.data()),
          static_cast<std::streamsize>(rest.size()));
  if (!in) throw IoError("read failed: " + path.string());
  Header h = parse_dims_dtype(ndim, rest.data());
  check_payload_size(h, total);

  std::vector<std::uint8_t> payload(h.payload_bytes);
  in.read(reinterpret_cast<char*>(payload.data()),
          static_cast<std::streamsize>(payload.size()));
  if (!in) throw IoError("read failed: " + path.string());
  return build(std::move(h), payload.data());
}

}  // namespace featseg
