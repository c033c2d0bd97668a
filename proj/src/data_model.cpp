#include "clsa/data_model.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "clsa/errors.hpp"

namespace clsa {

using nlohmann::json;

double iou(const BoundingBox& a, const BoundingBox& b) {
  if (!a.has_positive_area() || !b.has_positive_area()) {
    throw DomainError("iou: degenerate box with zero area");
  }
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return inter / uni;
}

std::string to_string(Split split) {
  switch (split) {
    case Split::kTrain:
      return "train";
    case Split::kGallery:
      return "gallery";
    case Split::kProbe:
      return "probe";
  }
  return "unknown";
}

Split split_from_string(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "gallery") return Split::kGallery;
  if (name == "probe") return Split::kProbe;
  throw IoError("unknown split '" + name + "' (expected train, gallery or probe)");
}

std::int64_t DatasetManifest::original_identity(std::optional<int> dense) const {
  if (!dense || *dense < 0 || static_cast<std::size_t>(*dense) >= original_ids.size()) return -1;
  return original_ids[static_cast<std::size_t>(*dense)];
}

const SceneAnnotation* DatasetManifest::find_scene(const std::string& image_id) const {
  for (const auto& scene : scenes) {
    if (scene.image_id == image_id) return &scene;
  }
  return nullptr;
}

void densify_identities(DatasetManifest& manifest) {
  std::set<std::int64_t> labels;
  for (const auto& scene : manifest.scenes) {
    for (const auto& box : scene.boxes) {
      if (box.identity) labels.insert(*box.identity);
    }
  }
  manifest.original_ids.assign(labels.begin(), labels.end());
  std::map<std::int64_t, int> dense;
  for (std::size_t i = 0; i < manifest.original_ids.size(); ++i) {
    dense[manifest.original_ids[i]] = static_cast<int>(i);
  }
  for (auto& scene : manifest.scenes) {
    for (auto& box : scene.boxes) {
      if (box.identity) box.identity = dense.at(*box.identity);
    }
  }
  manifest.identity_space_size = static_cast<int>(manifest.original_ids.size());
}

std::vector<std::string> validate_manifest(const DatasetManifest& manifest) {
  std::vector<std::string> violations;
  std::set<std::string> seen_ids;
  std::set<int> labeled;
  for (const auto& scene : manifest.scenes) {
    const std::string where = "scene '" + scene.image_id + "'";
    if (!seen_ids.insert(scene.image_id).second) {
      violations.push_back(where + ": duplicate image_id");
    }
    if (scene.width <= 0 || scene.height <= 0) {
      violations.push_back(where + ": width and height must be positive");
    }
    if (manifest.split == Split::kProbe && scene.boxes.size() != 1) {
      violations.push_back(where + ": probe scene must reference exactly one box, has " +
                           std::to_string(scene.boxes.size()));
    }
    for (std::size_t i = 0; i < scene.boxes.size(); ++i) {
      const auto& box = scene.boxes[i];
      const std::string at = where + " box " + std::to_string(i) + ": ";
      if (!(box.x2 > box.x1)) violations.push_back(at + "x2 must exceed x1");
      if (!(box.y2 > box.y1)) violations.push_back(at + "y2 must exceed y1");
      if (box.x1 < 0 || box.y1 < 0 || box.x2 > scene.width || box.y2 > scene.height) {
        violations.push_back(at + "box lies outside [0,width]x[0,height]");
      }
      if (box.score && !(*box.score >= 0.0 && *box.score <= 1.0)) {
        violations.push_back(at + "score outside [0,1]");
      }
      if (box.identity) {
        if (*box.identity < 0 || *box.identity >= manifest.identity_space_size) {
          violations.push_back(at + "identity outside dense range [0,identity_space_size)");
        } else {
          labeled.insert(*box.identity);
        }
      }
    }
  }
  if (manifest.split == Split::kTrain &&
      static_cast<int>(labeled.size()) != manifest.identity_space_size) {
    violations.push_back("manifest: identity_space_size " +
                         std::to_string(manifest.identity_space_size) + " but " +
                         std::to_string(labeled.size()) + " distinct labeled identities");
  }
  if (!manifest.original_ids.empty() &&
      static_cast<int>(manifest.original_ids.size()) != manifest.identity_space_size) {
    violations.push_back("manifest: identity map size differs from identity_space_size");
  }
  return violations;
}

namespace {

[[noreturn]] void fail(const std::string& where, const std::string& what) {
  throw IoError("manifest " + where + ": " + what);
}

const json& require(const json& obj, const char* key, const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end()) fail(where, std::string("missing field '") + key + "'");
  return *it;
}

double number_field(const json& obj, const char* key, const std::string& where) {
  const json& v = require(obj, key, where);
  if (!v.is_number()) fail(where, std::string("field '") + key + "' must be a number");
  return v.get<double>();
}

int int_field(const json& obj, const char* key, const std::string& where) {
  const json& v = require(obj, key, where);
  if (!v.is_number_integer()) fail(where, std::string("field '") + key + "' must be an integer");
  return v.get<int>();
}

std::string string_field(const json& obj, const char* key, const std::string& where) {
  const json& v = require(obj, key, where);
  if (!v.is_string()) fail(where, std::string("field '") + key + "' must be a string");
  return v.get<std::string>();
}

BoundingBox parse_box(const json& jb, const std::string& where) {
  if (!jb.is_object()) fail(where, "box must be an object");
  BoundingBox box;
  box.x1 = number_field(jb, "x1", where);
  box.y1 = number_field(jb, "y1", where);
  box.x2 = number_field(jb, "x2", where);
  box.y2 = number_field(jb, "y2", where);
  if (auto it = jb.find("score"); it != jb.end() && !it->is_null()) {
    if (!it->is_number()) fail(where, "field 'score' must be a number or null");
    box.score = it->get<double>();
  }
  if (auto it = jb.find("identity"); it != jb.end() && !it->is_null()) {
    if (!it->is_number_integer() || it->get<std::int64_t>() < 0) {
      fail(where, "field 'identity' must be a non-negative integer or null");
    }
    box.identity = it->get<int>();
  }
  return box;
}

}  // namespace

DatasetManifest parse_manifest(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw IoError(std::string("manifest: JSON parse failure: ") + e.what());
  }
  if (!doc.is_object()) fail("document", "top level must be an object");
  DatasetManifest manifest;
  manifest.split = split_from_string(string_field(doc, "split", "document"));
  const int declared_size = int_field(doc, "identity_space_size", "document");
  const json& scenes = require(doc, "scenes", "document");
  if (!scenes.is_array()) fail("document", "field 'scenes' must be an array");
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const json& js = scenes[s];
    std::string where = "scene #" + std::to_string(s);
    if (!js.is_object()) fail(where, "scene must be an object");
    SceneAnnotation scene;
    scene.image_id = string_field(js, "image_id", where);
    where = "scene '" + scene.image_id + "'";
    scene.image_path = string_field(js, "image_path", where);
    scene.width = int_field(js, "width", where);
    scene.height = int_field(js, "height", where);
    const json& boxes = require(js, "boxes", where);
    if (!boxes.is_array()) fail(where, "field 'boxes' must be an array");
    for (std::size_t b = 0; b < boxes.size(); ++b) {
      scene.boxes.push_back(parse_box(boxes[b], where + " box " + std::to_string(b)));
    }
    manifest.scenes.push_back(std::move(scene));
  }
  densify_identities(manifest);
  if (manifest.split == Split::kTrain && declared_size != manifest.identity_space_size) {
    fail("document", "identity_space_size " + std::to_string(declared_size) + " but " +
                         std::to_string(manifest.identity_space_size) +
                         " distinct labeled identities");
  }
  if (auto violations = validate_manifest(manifest); !violations.empty()) {
    throw IoError("manifest " + violations.front());
  }
  return manifest;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open manifest " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_manifest(buffer.str());
}

std::string serialize_manifest(const DatasetManifest& manifest) {
  json doc;
  doc["split"] = to_string(manifest.split);
  doc["identity_space_size"] = manifest.identity_space_size;
  json scenes = json::array();
  for (const auto& scene : manifest.scenes) {
    json boxes = json::array();
    for (const auto& box : scene.boxes) {
      json jb;
      jb["x1"] = box.x1;
      jb["y1"] = box.y1;
      jb["x2"] = box.x2;
      jb["y2"] = box.y2;
      jb["score"] = box.score ? json(*box.score) : json(nullptr);
      if (box.identity) {
        const auto original = manifest.original_identity(box.identity);
        jb["identity"] = original >= 0 ? original : static_cast<std::int64_t>(*box.identity);
      } else {
        jb["identity"] = nullptr;
      }
      boxes.push_back(std::move(jb));
    }
    scenes.push_back({{"image_id", scene.image_id},
                      {"image_path", scene.image_path},
                      {"width", scene.width},
                      {"height", scene.height},
                      {"boxes", std::move(boxes)}});
  }
  doc["scenes"] = std::move(scenes);
  return doc.dump(1) + "\n";
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write manifest " + path.string());
  out << serialize_manifest(manifest);
  if (!out) throw IoError("short write on manifest " + path.string());
}

}  // namespace clsa
