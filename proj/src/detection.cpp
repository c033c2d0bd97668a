#include "clsa/detection.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <tuple>

#include <nlohmann/json.hpp>

#include "clsa/errors.hpp"

namespace clsa {

namespace {

void require_scores(const DetectionSet& d, const char* op) {
  for (const auto& box : d.detections) {
    if (!box.score) throw ContractError(std::string(op) + ": detection without score in " + d.image_id);
  }
}

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

BoundingBox clip(BoundingBox box, int width, int height) {
  box.x1 = std::clamp(box.x1, 0.0, static_cast<double>(width));
  box.x2 = std::clamp(box.x2, 0.0, static_cast<double>(width));
  box.y1 = std::clamp(box.y1, 0.0, static_cast<double>(height));
  box.y2 = std::clamp(box.y2, 0.0, static_cast<double>(height));
  return box;
}

}  // namespace

bool detection_order(const BoundingBox& a, const BoundingBox& b) {
  const double sa = a.score.value_or(0.0);
  const double sb = b.score.value_or(0.0);
  if (sa != sb) return sa > sb;
  return std::tuple(a.x1, a.y1, a.area()) < std::tuple(b.x1, b.y1, b.area());
}

DetectionSet filter_by_score(const DetectionSet& d, double threshold) {
  require_scores(d, "filter_by_score");
  DetectionSet out{d.image_id, {}, d.source};
  for (const auto& box : d.detections) {
    if (*box.score > threshold) out.detections.push_back(box);
  }
  return out;
}

DetectionSet nms(const DetectionSet& d, double iou_threshold, std::size_t keep_top) {
  require_scores(d, "nms");
  std::vector<BoundingBox> order = d.detections;
  std::stable_sort(order.begin(), order.end(), detection_order);
  DetectionSet out{d.image_id, {}, d.source};
  for (const auto& candidate : order) {
    if (out.detections.size() >= keep_top) break;
    const bool suppressed = std::any_of(out.detections.begin(), out.detections.end(),
                                        [&](const BoundingBox& kept) { return iou(kept, candidate) > iou_threshold; });
    if (!suppressed) out.detections.push_back(candidate);
  }
  return out;
}

std::vector<std::pair<BoundingBox, int>> assign_labels(const DetectionSet& detections,
                                                       const SceneAnnotation& gt, double iou_min) {
  std::vector<std::pair<BoundingBox, int>> pairs;
  for (const auto& box : gt.boxes) {
    if (box.identity) pairs.emplace_back(box, *box.identity);
  }
  for (const auto& det : detections.detections) {
    double best = 0.0;
    const BoundingBox* match = nullptr;
    for (const auto& box : gt.boxes) {
      const double overlap = iou(det, box);
      if (overlap > best) {
        best = overlap;
        match = &box;
      }
    }
    if (match && best > iou_min && match->identity) {
      BoundingBox labeled = det;
      labeled.identity = match->identity;
      pairs.emplace_back(labeled, *match->identity);
    }
  }
  return pairs;
}

PRCurve detection_pr(const std::vector<DetectionSet>& detections, const DatasetManifest& gt,
                     double iou_min) {
  std::size_t total_gt = 0;
  for (const auto& scene : gt.scenes) total_gt += scene.boxes.size();
  if (total_gt == 0) throw DomainError("detection_pr: no ground-truth boxes, recall undefined");

  struct Entry {
    const BoundingBox* box;
    std::size_t scene;
    const std::string* image_id;
  };
  std::vector<Entry> entries;
  for (const auto& set : detections) {
    require_scores(set, "detection_pr");
    std::size_t scene_index = gt.scenes.size();
    for (std::size_t s = 0; s < gt.scenes.size(); ++s) {
      if (gt.scenes[s].image_id == set.image_id) scene_index = s;
    }
    if (scene_index == gt.scenes.size()) {
      throw ContractError("detection_pr: detections for unknown scene " + set.image_id);
    }
    for (const auto& box : set.detections) entries.push_back({&box, scene_index, &set.image_id});
  }
  std::stable_sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    if (detection_order(*a.box, *b.box)) return true;
    if (detection_order(*b.box, *a.box)) return false;
    return *a.image_id < *b.image_id;
  });

  std::vector<std::vector<bool>> consumed(gt.scenes.size());
  for (std::size_t s = 0; s < gt.scenes.size(); ++s) consumed[s].assign(gt.scenes[s].boxes.size(), false);
  PRCurve curve;
  std::size_t tp = 0, fp = 0;
  double previous_recall = 0.0;
  for (const auto& entry : entries) {
    const auto& boxes = gt.scenes[entry.scene].boxes;
    double best = iou_min;
    std::size_t match = boxes.size();
    for (std::size_t g = 0; g < boxes.size(); ++g) {
      if (consumed[entry.scene][g]) continue;
      const double overlap = iou(*entry.box, boxes[g]);
      if (overlap > best) {
        best = overlap;
        match = g;
      }
    }
    if (match < boxes.size()) {
      consumed[entry.scene][match] = true;
      ++tp;
    } else {
      ++fp;
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(total_gt);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    curve.average_precision += (recall - previous_recall) * precision;
    previous_recall = recall;
    curve.points.emplace_back(recall, precision);
  }
  return curve;
}

DetectionSet oracle_jitter_detector(const SceneAnnotation& gt, const JitterConfig& config,
                                    std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ fnv1a(gt.image_id));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto symmetric = [&](double r) { return r * (2.0 * unit(rng) - 1.0); };
  DetectionSet out{gt.image_id, {}, DetectionSource::kOracleJitter};

  auto jitter = [&](const BoundingBox& src) {
    if (config.translation == 0.0 && config.scale == 0.0) return BoundingBox{src.x1, src.y1, src.x2, src.y2};
    const double w = src.width();
    const double h = src.height();
    const double cx = src.x1 + 0.5 * w + symmetric(config.translation) * w;
    const double cy = src.y1 + 0.5 * h + symmetric(config.translation) * h;
    const double s = std::exp(symmetric(config.scale));
    BoundingBox box{cx - 0.5 * w * s, cy - 0.5 * h * s, cx + 0.5 * w * s, cy + 0.5 * h * s};
    return clip(box, gt.width, gt.height);
  };

  double mean_height = 0.0;
  for (const auto& truth : gt.boxes) {
    mean_height += truth.height() / static_cast<double>(gt.boxes.size());
    if (unit(rng) < config.miss_rate) continue;
    BoundingBox hit = jitter(truth);
    hit.score = 1.0 - config.score_noise * unit(rng);
    if (hit.has_positive_area()) out.detections.push_back(hit);
    if (unit(rng) < config.duplicate_rate) {
      BoundingBox dup = jitter(truth);
      dup.score = *hit.score * (0.5 + 0.5 * unit(rng));
      if (dup.has_positive_area()) out.detections.push_back(dup);
    }
  }
  // spurious boxes score in [0.2, 0.7), below the [0.6, 1] band of true hits
  const double whole = std::floor(config.false_positive_rate);
  const int spurious = static_cast<int>(whole) + (unit(rng) < config.false_positive_rate - whole ? 1 : 0);
  if (mean_height <= 0.0) mean_height = 0.25 * gt.height;
  for (int i = 0; i < spurious; ++i) {
    const double h = std::min(mean_height * std::exp(symmetric(0.5)), 0.9 * gt.height);
    const double w = std::min(0.5 * h, 0.9 * gt.width);
    const double x = unit(rng) * (gt.width - w);
    const double y = unit(rng) * (gt.height - h);
    BoundingBox box{x, y, x + w, y + h};
    box.score = 0.2 + 0.5 * unit(rng);
    if (box.has_positive_area()) out.detections.push_back(box);
  }
  std::stable_sort(out.detections.begin(), out.detections.end(), detection_order);
  return out;
}

std::vector<DetectionSet> load_detections(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open detections " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("detections " + path.string() + ": " + e.what());
  }
  if (!doc.is_object()) throw IoError("detections " + path.string() + ": top level must be an object");
  std::vector<DetectionSet> sets;
  for (const auto& [image_id, boxes] : doc.items()) {
    DetectionSet set{image_id, {}, DetectionSource::kFile};
    if (!boxes.is_array()) throw IoError("detections for '" + image_id + "' must be an array");
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      const auto& jb = boxes[i];
      const std::string where = "detections '" + image_id + "' box " + std::to_string(i);
      try {
        BoundingBox box{jb.at("x1").get<double>(), jb.at("y1").get<double>(), jb.at("x2").get<double>(),
                        jb.at("y2").get<double>()};
        if (!jb.contains("score") || !jb.at("score").is_number()) {
          throw IoError(where + ": mandatory field 'score' missing");
        }
        box.score = jb.at("score").get<double>();
        if (!box.has_positive_area()) throw IoError(where + ": zero-area box");
        set.detections.push_back(box);
      } catch (const nlohmann::json::exception& e) {
        throw IoError(where + ": " + e.what());
      }
    }
    sets.push_back(std::move(set));
  }
  return sets;
}

void save_detections(const std::vector<DetectionSet>& sets, const std::filesystem::path& path) {
  nlohmann::json doc = nlohmann::json::object();
  for (const auto& set : sets) {
    nlohmann::json boxes = nlohmann::json::array();
    for (const auto& b : set.detections) {
      boxes.push_back({{"x1", b.x1}, {"y1", b.y1}, {"x2", b.x2}, {"y2", b.y2},
                       {"score", b.score.value_or(0.0)}, {"identity", nullptr}});
    }
    doc[set.image_id] = std::move(boxes);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write detections " + path.string());
  out << doc.dump(1) << "\n";
}

void write_pr_csv(const PRCurve& curve, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "recall,precision\n";
  char line[64];
  for (const auto& [r, p] : curve.points) {
    std::snprintf(line, sizeof(line), "%.6f,%.6f\n", r, p);
    out << line;
  }
}

}  // namespace clsa
