#pragma once
// Boxes, scenes and dataset manifests.
//
// Boxes use the corner-pair convention (x1, y1, x2, y2) with half-open pixel
// extent: a box covers pixels x1 <= x < x2, y1 <= y < y2, so its area is
// (x2 - x1) * (y2 - y1). Identities inside a loaded manifest are dense class
// indices 0..identity_space_size-1; the original labels are kept in
// DatasetManifest::original_ids.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace clsa {

struct BoundingBox {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;
  std::optional<double> score;   // detector confidence in [0, 1]
  std::optional<int> identity;   // nullopt means "unlabeled"

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  bool has_positive_area() const { return x2 > x1 && y2 > y1; }
  bool operator==(const BoundingBox&) const = default;
};

// Intersection over union. Throws DomainError on a zero-area box.
double iou(const BoundingBox& a, const BoundingBox& b);

struct SceneAnnotation {
  std::string image_id;
  std::string image_path;
  int width = 0;
  int height = 0;
  std::vector<BoundingBox> boxes;
  bool operator==(const SceneAnnotation&) const = default;
};

enum class Split { kTrain, kGallery, kProbe };

std::string to_string(Split split);
Split split_from_string(const std::string& name);

struct DatasetManifest {
  Split split = Split::kTrain;
  std::vector<SceneAnnotation> scenes;
  int identity_space_size = 0;
  // original_ids[dense] is the label the file used for that identity.
  std::vector<std::int64_t> original_ids;

  // Original label for a dense identity, or -1 for unlabeled / out of range.
  std::int64_t original_identity(std::optional<int> dense) const;
  const SceneAnnotation* find_scene(const std::string& image_id) const;
  bool operator==(const DatasetManifest&) const = default;
};

// Parses the JSON manifest, checks every invariant and densifies identities
// (ascending original label order). Throws IoError naming scene and field.
DatasetManifest load_manifest(const std::filesystem::path& path);
DatasetManifest parse_manifest(const std::string& json_text);

// Writes original labels back out, so load(save(m)) == m.
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
std::string serialize_manifest(const DatasetManifest& manifest);

// Empty iff all invariants hold. Each entry names the scene, box index and rule.
std::vector<std::string> validate_manifest(const DatasetManifest& manifest);

// Re-index the identities of `manifest` in place to a dense range, recording
// the map. Boxes must carry original labels on entry.
void densify_identities(DatasetManifest& manifest);

}  // namespace clsa
