#pragma once
// Detection post-processing: score filtering, NMS, identity propagation from
// ground truth, detection precision/recall, and a seeded stand-in detector
// that perturbs ground-truth boxes.
//
// Both thresholds are strict: a detection survives filtering when
// score > threshold, and a box matches when IoU > iou threshold.
// Ties in score order by smaller x1, then y1, then smaller area.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "clsa/data_model.hpp"

namespace clsa {

enum class DetectionSource { kFile, kOracleJitter };

struct DetectionSet {
  std::string image_id;
  std::vector<BoundingBox> detections;
  DetectionSource source = DetectionSource::kFile;
};

struct PRCurve {
  std::vector<std::pair<double, double>> points;  // (recall, precision)
  double average_precision = 0.0;
};

// Strict-weak ordering: score descending, then x1, y1, area ascending.
bool detection_order(const BoundingBox& a, const BoundingBox& b);

DetectionSet filter_by_score(const DetectionSet& d, double threshold = 0.5);

DetectionSet nms(const DetectionSet& d, double iou_threshold = 0.5, std::size_t keep_top = 256);

// Annotated boxes first (those with identities), then each detection whose
// best-overlapping ground-truth box has IoU > iou_min and an identity.
std::vector<std::pair<BoundingBox, int>> assign_labels(const DetectionSet& detections,
                                                       const SceneAnnotation& gt,
                                                       double iou_min = 0.5);

// Global score sweep with greedy per-scene matching; AP is the raw step
// integral sum_i (r_i - r_{i-1}) p_i without a precision envelope.
PRCurve detection_pr(const std::vector<DetectionSet>& detections, const DatasetManifest& gt,
                     double iou_min = 0.5);

struct JitterConfig {
  double translation = 0.1;   // max shift as a fraction of box width/height
  double scale = 0.1;         // max log-scale change
  double miss_rate = 0.05;    // probability a ground-truth box is not detected
  double false_positive_rate = 1.0;  // expected spurious boxes per scene
  double duplicate_rate = 0.3;       // probability of an extra lower-scored hit
  double score_noise = 0.4;   // true hits score in [1 - score_noise, 1]

  static JitterConfig none() { return {0.0, 0.0, 0.0, 0.0, 0.0, 0.0}; }
};

DetectionSet oracle_jitter_detector(const SceneAnnotation& gt, const JitterConfig& config,
                                    std::uint64_t seed);

// {"<image_id>": [{"x1":..,"y1":..,"x2":..,"y2":..,"score":..,"identity":null}, ...]}
std::vector<DetectionSet> load_detections(const std::filesystem::path& path);
void save_detections(const std::vector<DetectionSet>& sets, const std::filesystem::path& path);

// "recall,precision" header then one row per point.
void write_pr_csv(const PRCurve& curve, const std::filesystem::path& path);

}  // namespace clsa
