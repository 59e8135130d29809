#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "featseg/clustering.hpp"
#include "featseg/image.hpp"
#include "featseg/manifest.hpp"

namespace featseg {

/// Many-to-one relabeling of cluster ids onto semantic class ids.
struct ClassMap {
  std::vector<std::uint32_t> cluster_to_class;  // indexed by cluster id
  std::uint32_t n_classes = 0;

  static ClassMap identity(std::uint32_t k);

  friend bool operator==(const ClassMap&, const ClassMap&) = default;
};

/// Throws ValidationError unless every entry is < n_classes and
/// n_classes fits below the ignore label.
void validate_classmap(const ClassMap& cm);

/// JSON form: {"n_classes": C, "mapping": [class of cluster 0, ...]}.
void write_classmap(const ClassMap& cm, const std::filesystem::path& path);
ClassMap read_classmap(const std::filesystem::path& path);

/// Nearest-neighbour upsampling: output pixel (x, y) copies source cell
/// (floor((x + 0.5) * w / out_w), floor((y + 0.5) * h / out_h)).
MaskImage upsample_labels(const LabelGrid& grid, std::uint32_t out_w,
                          std::uint32_t out_h);

/// Relabels every non-ignore pixel; 255 passes through unchanged.
MaskImage apply_classmap(const MaskImage& mask, const ClassMap& cm);

struct SynthOptions {
  unsigned threads = 0;
};

/// For each sample: assign features, upsample to the image size, apply the
/// optional class map, and write `<id>_mask.png` into `out_dir`. Returns
/// the manifest of the new dataset (also written as out_dir/manifest.json)
/// whose image/feature paths point back at the source files.
DatasetManifest synth_dataset(const DatasetManifest& manifest_in,
                              const ClusterModel& model,
                              const std::optional<ClassMap>& cm,
                              const std::filesystem::path& out_dir,
                              const SynthOptions& options = {});

/// Reads only the PNG header to get an image's width and height.
std::pair<std::uint32_t, std::uint32_t> image_dims(
    const std::filesystem::path& png_path);

}  // namespace featseg
