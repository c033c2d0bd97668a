#pragma once
// Person-search evaluation: gallery indexing from scene detections, probe
// ranking, CMC / mAP, and the gallery-size sweep.
//
// A candidate is a true match when its scene holds a ground-truth box of the
// probe's identity with IoU > 0.5 that no higher-ranked candidate has already
// claimed. Probe identities are compared by original label, so probe and
// gallery manifests may densify independently.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "clsa/data_model.hpp"
#include "clsa/detection.hpp"
#include "clsa/image.hpp"
#include "clsa/pyramid_net.hpp"

namespace clsa {

enum class DescriptorMode {
  kConcat,    // x^1 || ... || x^K
  kTopLevel,  // x^K only
};

// Supplies scene pixels; throws IoError naming the scene on failure.
using ImageSource = std::function<Image(const SceneAnnotation&)>;

// Loads <root>/<image_path> as PNG.
ImageSource directory_image_source(std::filesystem::path root);

// Unit-norm matching descriptor for one box of an image.
std::vector<double> compute_descriptor(const PyramidNet& net, const Image& image, const BoundingBox& box,
                                       DescriptorMode mode);

struct GalleryEntry {
  std::string image_id;
  BoundingBox box;
  std::vector<double> descriptor;
};

struct GalleryIndex {
  std::vector<GalleryEntry> entries;
  std::size_t descriptor_dim = 0;
};

// One entry per detection. Scenes without detections contribute nothing.
GalleryIndex build_gallery(const DatasetManifest& gallery, const std::vector<DetectionSet>& detections,
                           const PyramidNet& net, const ImageSource& images, DescriptorMode mode,
                           int jobs = 1);

struct Candidate {
  std::size_t entry = 0;  // index into GalleryIndex::entries
  std::string image_id;
  BoundingBox box;
  double distance = 0.0;
  bool correct = false;
};

// Ascending Euclidean distance; ties break by (image_id, x1, y1).
std::vector<Candidate> rank_gallery(const std::vector<double>& probe, const GalleryIndex& index);

struct RankedResult {
  std::int64_t probe_id = -1;
  std::vector<Candidate> candidates;
  std::optional<int> first_correct_rank;  // 1-based
  int gt_matches = 0;                     // ground-truth boxes of the identity searchable
  bool matchable() const { return gt_matches > 0; }
};

// Flags candidates against the gallery ground truth. `allowed_scenes`, when
// given, restricts both candidates' scenes and the ground-truth count.
RankedResult mark_correct(std::vector<Candidate> ranked, std::int64_t probe_identity,
                          const DatasetManifest& gallery, double iou_min = 0.5,
                          const std::vector<bool>* allowed_scenes = nullptr);

// Fraction of matchable probes whose first true match is at rank <= k.
// DomainError when no matchable probe remains.
double cmc(const std::vector<RankedResult>& results, int k);

// Mean over matchable probes of sum_{hits at rank r} (hits <= r) / r / gt_matches.
// Unmatchable probes are skipped and counted in *excluded.
double mean_ap(const std::vector<RankedResult>& results, int* excluded = nullptr);

// Average precision of one probe (0 when unmatchable).
double average_precision(const RankedResult& result);

struct Probe {
  std::int64_t identity = -1;  // original label
  std::string image_id;
  BoundingBox box;
  std::vector<double> descriptor;
};

std::vector<Probe> build_probes(const DatasetManifest& probes, const PyramidNet& net, const ImageSource& images,
                                DescriptorMode mode, int jobs = 1);

inline constexpr int kCmcRanks[] = {1, 5, 10, 20};

struct ProbeSummary {
  std::int64_t probe_id = -1;
  std::optional<int> first_correct_rank;
  double average_precision = 0.0;
};

struct SearchReport {
  std::map<int, double> cmc;  // rank -> rate for ranks 1, 5, 10, 20
  double mean_ap = 0.0;
  int gallery_size = 0;  // scene images searched per probe
  int excluded_probes = 0;
  std::vector<ProbeSummary> per_probe;
};

// Searches every probe against the index. A candidate is dropped when it is
// the probe's own source box (same image, IoU > 0.5).
SearchReport evaluate_search(const std::vector<Probe>& probes, const GalleryIndex& index,
                             const DatasetManifest& gallery, double iou_min = 0.5);

// {"gallery_size","rank1","rank5","rank10","rank20","mAP","excluded_probes"}
nlohmann::json report_to_json(const SearchReport& report);

struct SweepRow {
  int size = 0;
  double rank1 = 0.0;
  double map = 0.0;
};

// For each size, every probe searches its own sub-gallery: all scenes holding
// its identity plus uniformly sampled other scenes up to `size` in total.
std::vector<SweepRow> gallery_sweep(const std::vector<int>& sizes, const std::vector<Probe>& probes,
                                    const GalleryIndex& index, const DatasetManifest& gallery,
                                    std::uint64_t seed, double iou_min = 0.5);

// "size,rank1,mAP" header then one row per size.
std::string sweep_to_csv(const std::vector<SweepRow>& rows);

}  // namespace clsa
