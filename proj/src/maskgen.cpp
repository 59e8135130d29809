#include "featseg/maskgen.hpp"

#include <array>
#include <fstream>
#include <string>

#include <json.hpp>

#include "featseg/error.hpp"
#include "featseg/fileutil.hpp"
#include "featseg/parallel.hpp"

namespace featseg {

namespace fs = std::filesystem;

ClassMap ClassMap::identity(std::uint32_t k) {
  ClassMap cm;
  cm.n_classes = k;
  cm.cluster_to_class.resize(k);
  for (std::uint32_t i = 0; i < k; ++i) cm.cluster_to_class[i] = i;
  return cm;
}

void validate_classmap(const ClassMap& cm) {
  if (cm.n_classes == 0 || cm.n_classes > MaskImage::kIgnore) {
    throw ValidationError("class map: n_classes must be in 1..255");
  }
  for (std::size_t i = 0; i < cm.cluster_to_class.size(); ++i) {
    if (cm.cluster_to_class[i] >= cm.n_classes) {
      throw ValidationError("class map: cluster " + std::to_string(i) +
                            " maps to class " +
                            std::to_string(cm.cluster_to_class[i]) +
                            " >= n_classes");
    }
  }
}

void write_classmap(const ClassMap& cm, const fs::path& path) {
  validate_classmap(cm);
  const nlohmann::json doc = {{"n_classes", cm.n_classes},
                              {"mapping", cm.cluster_to_class}};
  write_text_atomic(path, doc.dump(2) + "\n");
}

ClassMap read_classmap(const fs::path& path) {
  const auto doc = nlohmann::json::parse(read_file_text(path), nullptr, false);
  if (doc.is_discarded() || !doc.is_object()) {
    throw FormatError(FormatFault::bad_json, path.string());
  }
  ClassMap cm;
  try {
    cm.n_classes = doc.at("n_classes").get<std::uint32_t>();
    cm.cluster_to_class = doc.at("mapping").get<std::vector<std::uint32_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatFault::bad_field, path.string() + ": " + e.what());
  }
  validate_classmap(cm);
  return cm;
}

MaskImage upsample_labels(const LabelGrid& grid, std::uint32_t out_w,
                          std::uint32_t out_h) {
  if (out_w == 0 || out_h == 0) {
    throw ValidationError("upsample: target dimensions must be non-zero");
  }
  if (grid.width == 0 || grid.height == 0) {
    throw ValidationError("upsample: empty label grid");
  }
  if (out_w < grid.width || out_h < grid.height) {
    throw ValidationError("upsample: target smaller than the label grid");
  }
  MaskImage mask(out_w, out_h);
  // floor((x + 0.5) * w / out_w) in exact integer arithmetic.
  std::vector<std::uint32_t> src_x(out_w);
  for (std::uint64_t x = 0; x < out_w; ++x) {
    src_x[x] = static_cast<std::uint32_t>((2 * x + 1) * grid.width / (2 * std::uint64_t{out_w}));
  }
  for (std::uint64_t y = 0; y < out_h; ++y) {
    const auto sy = static_cast<std::uint32_t>(
        (2 * y + 1) * grid.height / (2 * std::uint64_t{out_h}));
    for (std::uint32_t x = 0; x < out_w; ++x) {
      const std::uint32_t label = grid.at(src_x[x], sy);
      if (label >= MaskImage::kIgnore) {
        throw ValidationError("upsample: label " + std::to_string(label) +
                              " does not fit in an 8-bit mask");
      }
      mask.at(x, static_cast<std::uint32_t>(y)) = static_cast<std::uint8_t>(label);
    }
  }
  return mask;
}

MaskImage apply_classmap(const MaskImage& mask, const ClassMap& cm) {
  validate_classmap(cm);
  MaskImage out = mask;
  for (auto& v : out.labels) {
    if (v == MaskImage::kIgnore) continue;
    if (v >= cm.cluster_to_class.size()) {
      throw ValidationError("class map: unmapped cluster id " +
                            std::to_string(v));
    }
    v = static_cast<std::uint8_t>(cm.cluster_to_class[v]);
  }
  return out;
}

std::pair<std::uint32_t, std::uint32_t> image_dims(const fs::path& png_path) {
  std::ifstream in(png_path, std::ios::binary);
  if (!in) throw IoError("cannot open " + png_path.string());
  std::array<unsigned char, 24> head{};
  in.read(reinterpret_cast<char*>(head.data()), head.size());
  static constexpr std::array<unsigned char, 8> kSig = {0x89, 'P', 'N', 'G',
                                                        '\r', '\n', 0x1A, '\n'};
  if (!in || !std::equal(kSig.begin(), kSig.end(), head.begin()) ||
      std::string(head.begin() + 12, head.begin() + 16) != "IHDR") {
    throw FormatError(FormatFault::bad_png, png_path.string());
  }
  auto be32 = [&](std::size_t at) {
    return (std::uint32_t{head[at]} << 24) | (std::uint32_t{head[at + 1]} << 16) |
           (std::uint32_t{head[at + 2]} << 8) | std::uint32_t{head[at + 3]};
  };
  return {be32(16), be32(20)};
}

namespace {

std::string relative_to(const fs::path& target, const fs::path& dir) {
  return fs::absolute(target)
      .lexically_normal()
      .lexically_proximate(fs::absolute(dir).lexically_normal())
      .generic_string();
}

}  // namespace

DatasetManifest synth_dataset(const DatasetManifest& manifest_in,
                              const ClusterModel& model,
                              const std::optional<ClassMap>& cm,
                              const fs::path& out_dir,
                              const SynthOptions& options) {
  if (cm) {
    validate_classmap(*cm);
    if (cm->cluster_to_class.size() != model.k) {
      throw ValidationError("class map covers " +
                            std::to_string(cm->cluster_to_class.size()) +
                            " clusters, model has " + std::to_string(model.k));
    }
  }
  if (model.k > MaskImage::kIgnore) {
    throw ValidationError("synth: at most 255 clusters fit in an 8-bit mask");
  }
  for (const auto& s : manifest_in.samples) {
    if (s.feature_path.empty()) {
      throw ValidationError("sample " + s.id + ": missing feature_path");
    }
  }
  const int n_classes = cm ? static_cast<int>(cm->n_classes)
                           : static_cast<int>(model.k);

  DatasetManifest out;
  out.version = manifest_in.version;
  out.feature_layer = manifest_in.feature_layer;
  out.base_dir = out_dir;
  out.samples.resize(manifest_in.samples.size());

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string());

  parallel_for(manifest_in.samples.size(), options.threads, [&](std::size_t i) {
    const SampleRecord& src = manifest_in.samples[i];
    try {
      const FeatureTensor features =
          read_tensor(manifest_in.resolve(src.feature_path));
      const LabelGrid grid = assign(model, features);
      const auto [w, h] = image_dims(manifest_in.resolve(src.image_path));
      MaskImage mask = upsample_labels(grid, w, h);
      if (cm) mask = apply_classmap(mask, *cm);
      validate_mask(mask, n_classes);
      const std::string mask_name = src.id + "_mask.png";
      write_mask_png(mask, out_dir / mask_name);

      SampleRecord rec = src;
      rec.image_path = relative_to(manifest_in.resolve(src.image_path), out_dir);
      rec.feature_path =
          relative_to(manifest_in.resolve(src.feature_path), out_dir);
      if (src.latent_path) {
        rec.latent_path =
            relative_to(manifest_in.resolve(*src.latent_path), out_dir);
      }
      rec.mask_path = mask_name;
      out.samples[i] = std::move(rec);
    } catch (const Error& e) {
      throw Error(e.kind(), "sample " + src.id + ": " + e.what());
    }
  });

  write_palette_json(n_classes, out_dir / "palette.json");
  write_manifest(out, out_dir / "manifest.json");
  return out;
}

}  // namespace featseg
