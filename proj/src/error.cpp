#include "featseg/error.hpp"

namespace featseg {

const char* to_string(FormatFault fault) noexcept {
  switch (fault) {
    case FormatFault::bad_magic: return "bad magic";
    case FormatFault::bad_ndim: return "bad ndim";
    case FormatFault::dims_overflow: return "dims overflow";
    case FormatFault::unknown_dtype: return "unknown dtype";
    case FormatFault::truncated: return "truncated payload";
    case FormatFault::trailing_bytes: return "trailing bytes";
    case FormatFault::bad_json: return "malformed json";
    case FormatFault::bad_field: return "bad field";
    case FormatFault::unsupported_version: return "unsupported version";
    case FormatFault::duplicate_id: return "duplicate id";
    case FormatFault::dangling_path: return "dangling path";
    case FormatFault::bad_png: return "bad png";
  }
  return "unknown fault";
}

}  // namespace featseg
