#include "featseg/manifest.hpp"

#include <set>

#include <json.hpp>

#include "featseg/error.hpp"
#include "featseg/fileutil.hpp"

namespace featseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string required_string(const json& obj, const char* key,
                            const std::string& where) {
  const auto it = obj.find(key);
  if (it == obj.end() || !it->is_string()) {
    throw FormatError(FormatFault::bad_field,
                      where + "." + key + ": expected string");
  }
  return it->get<std::string>();
}

std::optional<std::string> optional_string(const json& obj, const char* key,
                                           const std::string& where) {
  const auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) {
    throw FormatError(FormatFault::bad_field,
                      where + "." + key + ": expected string");
  }
  return it->get<std::string>();
}

int required_int(const json& obj, const char* key, const std::string& where) {
  const auto it = obj.find(key);
  if (it == obj.end() || !it->is_number_integer()) {
    throw FormatError(FormatFault::bad_field,
                      where + "." + key + ": expected integer");
  }
  const auto v = it->get<std::int64_t>();
  if (v < -(1LL << 31) || v >= (1LL << 31)) {
    throw FormatError(FormatFault::bad_field,
                      where + "." + key + ": out of range");
  }
  return static_cast<int>(v);
}

void check_path(const DatasetManifest& m, const std::string& id,
                const char* field, const std::string& path) {
  std::error_code ec;
  if (path.empty() || !fs::exists(m.resolve(path), ec)) {
    throw FormatError(FormatFault::dangling_path,
                      "sample " + id + " " + field + ": " + path);
  }
}

}  // namespace

void validate_manifest(const DatasetManifest& m, bool check_paths) {
  if (m.version != DatasetManifest::kVersion) {
    throw FormatError(FormatFault::unsupported_version,
                      "version " + std::to_string(m.version));
  }
  std::set<std::string> ids;
  for (const auto& s : m.samples) {
    if (s.id.empty()) {
      throw FormatError(FormatFault::bad_field, "sample id must be non-empty");
    }
    if (!ids.insert(s.id).second) {
      throw FormatError(FormatFault::duplicate_id, "id \"" + s.id + "\"");
    }
    if (s.attr_label && *s.attr_label != 0 && *s.attr_label != 1) {
      throw FormatError(FormatFault::bad_field,
                        "sample " + s.id + " attr_label must be 0 or 1");
    }
    if (!check_paths) continue;
    check_path(m, s.id, "image_path", s.image_path);
    check_path(m, s.id, "feature_path", s.feature_path);
    if (s.latent_path) check_path(m, s.id, "latent_path", *s.latent_path);
    if (s.mask_path) check_path(m, s.id, "mask_path", *s.mask_path);
  }
}

std::string manifest_to_json(const DatasetManifest& m) {
  json samples = json::array();
  for (const auto& s : m.samples) {
    json rec = {{"id", s.id},
                {"image_path", s.image_path},
                {"feature_path", s.feature_path}};
    if (s.latent_path) rec["latent_path"] = *s.latent_path;
    if (s.mask_path) rec["mask_path"] = *s.mask_path;
    if (s.attr_label) rec["attr_label"] = *s.attr_label;
    samples.push_back(std::move(rec));
  }
  json doc = {{"version", m.version},
              {"feature_layer", m.feature_layer},
              {"samples", std::move(samples)}};
  return doc.dump(2) + "\n";
}

DatasetManifest parse_manifest(const std::string& text,
                               const fs::path& base_dir, bool check_paths) {
  const json doc = json::parse(text, nullptr, /*allow_exceptions=*/false);
  if (doc.is_discarded()) {
    throw FormatError(FormatFault::bad_json, "manifest is not valid JSON");
  }
  if (!doc.is_object()) {
    throw FormatError(FormatFault::bad_field, "manifest root must be an object");
  }
  DatasetManifest m;
  m.base_dir = base_dir;
  m.version = required_int(doc, "version", "manifest");
  if (m.version != DatasetManifest::kVersion) {
    throw FormatError(FormatFault::unsupported_version,
                      "version " + std::to_string(m.version));
  }
  m.feature_layer = required_int(doc, "feature_layer", "manifest");
  const auto samples = doc.find("samples");
  if (samples == doc.end() || !samples->is_array()) {
    throw FormatError(FormatFault::bad_field, "manifest.samples: expected array");
  }
  for (std::size_t i = 0; i < samples->size(); ++i) {
    const json& rec = (*samples)[i];
    const std::string where = "samples[" + std::to_string(i) + "]";
    if (!rec.is_object()) {
      throw FormatError(FormatFault::bad_field, where + ": expected object");
    }
    SampleRecord s;
    s.id = required_string(rec, "id", where);
    s.image_path = required_string(rec, "image_path", where);
    s.feature_path = required_string(rec, "feature_path", where);
    s.latent_path = optional_string(rec, "latent_path", where);
    s.mask_path = optional_string(rec, "mask_path", where);
    if (const auto it = rec.find("attr_label");
        it != rec.end() && !it->is_null()) {
      s.attr_label = required_int(rec, "attr_label", where);
    }
    m.samples.push_back(std::move(s));
  }
  validate_manifest(m, check_paths);
  return m;
}

void write_manifest(const DatasetManifest& m, const fs::path& path) {
  DatasetManifest target = m;
  target.base_dir = path.parent_path();
  validate_manifest(target);
  write_text_atomic(path, manifest_to_json(m));
}

DatasetManifest read_manifest(const fs::path& path) {
  return parse_manifest(read_file_text(path), path.parent_path());
}

}  // namespace featseg
