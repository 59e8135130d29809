#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace featseg {

struct SampleRecord {
  std::string id;
  std::string image_path;
  std::string feature_path;
  std::optional<std::string> latent_path;
  std::optional<std::string> mask_path;
  std::optional<int> attr_label;  // 0 or 1

  friend bool operator==(const SampleRecord&, const SampleRecord&) = default;
};

/// Index of a dataset on disk. Paths are stored as written and resolve
/// relative to the directory holding the manifest file.
struct DatasetManifest {
  static constexpr int kVersion = 1;

  int version = kVersion;
  int feature_layer = 0;  // generator layer the features were taken from
  std::vector<SampleRecord> samples;

  /// Directory the relative paths resolve against. Not serialized.
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const std::string& relative) const {
    return base_dir / relative;
  }

  friend bool operator==(const DatasetManifest& a, const DatasetManifest& b) {
    return a.version == b.version && a.feature_layer == b.feature_layer &&
           a.samples == b.samples;
  }
};

/// Checks unique ids, label range, and (if `check_paths`) that every
/// referenced path exists under `m.base_dir`. Throws FormatError.
void validate_manifest(const DatasetManifest& m, bool check_paths = true);

std::string manifest_to_json(const DatasetManifest& m);

/// Parses manifest JSON; unknown keys are ignored. `base_dir` becomes the
/// manifest's resolution root. Throws FormatError on any malformation.
DatasetManifest parse_manifest(const std::string& text,
                               const std::filesystem::path& base_dir,
                               bool check_paths = true);

/// Validates against the target directory, then writes atomically.
void write_manifest(const DatasetManifest& m,
                    const std::filesystem::path& path);

DatasetManifest read_manifest(const std::filesystem::path& path);

}  // namespace featseg
