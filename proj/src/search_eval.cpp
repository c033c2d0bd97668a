#include "clsa/search_eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <tuple>
#include <unordered_map>

#include "clsa/errors.hpp"
#include "clsa/parallel.hpp"

namespace clsa {

namespace {

std::unordered_map<std::string, std::size_t> scene_lookup(const DatasetManifest& m) {
  std::unordered_map<std::string, std::size_t> lookup;
  for (std::size_t s = 0; s < m.scenes.size(); ++s) lookup.emplace(m.scenes[s].image_id, s);
  return lookup;
}

struct ProbeSource {
  const std::string* image_id = nullptr;
  const BoundingBox* box = nullptr;
};

bool is_source_box(const ProbeSource& source, const std::string& image_id, const BoundingBox& box,
                   double iou_min) {
  return source.image_id && *source.image_id == image_id && iou(*source.box, box) > iou_min;
}

RankedResult mark_impl(std::vector<Candidate> ranked, std::int64_t probe_identity, const DatasetManifest& gallery,
                       double iou_min, const std::vector<bool>* allowed, const ProbeSource& source) {
  const auto lookup = scene_lookup(gallery);
  RankedResult result;
  result.probe_id = probe_identity;
  std::vector<std::vector<bool>> claimed(gallery.scenes.size());
  for (std::size_t s = 0; s < gallery.scenes.size(); ++s) {
    const auto& scene = gallery.scenes[s];
    claimed[s].assign(scene.boxes.size(), false);
    if (allowed && !(*allowed)[s]) continue;
    for (std::size_t g = 0; g < scene.boxes.size(); ++g) {
      const auto& box = scene.boxes[g];
      if (gallery.original_identity(box.identity) != probe_identity) continue;
      if (is_source_box(source, scene.image_id, box, iou_min)) {
        claimed[s][g] = true;  // the probe's own box is not a searchable target
        continue;
      }
      ++result.gt_matches;
    }
  }
  for (std::size_t r = 0; r < ranked.size(); ++r) {
    auto& cand = ranked[r];
    cand.correct = false;
    auto it = lookup.find(cand.image_id);
    if (it == lookup.end()) continue;
    const std::size_t s = it->second;
    if (allowed && !(*allowed)[s]) continue;
    const auto& boxes = gallery.scenes[s].boxes;
    double best = iou_min;
    std::size_t match = boxes.size();
    for (std::size_t g = 0; g < boxes.size(); ++g) {
      if (claimed[s][g] || gallery.original_identity(boxes[g].identity) != probe_identity) continue;
      const double overlap = iou(cand.box, boxes[g]);
      if (overlap > best) {
        best = overlap;
        match = g;
      }
    }
    if (match < boxes.size()) {
      claimed[s][match] = true;
      cand.correct = true;
      if (!result.first_correct_rank) result.first_correct_rank = static_cast<int>(r + 1);
    }
  }
  result.candidates = std::move(ranked);
  return result;
}

RankedResult search_one(const Probe& probe, const GalleryIndex& index, const DatasetManifest& gallery,
                        const std::unordered_map<std::string, std::size_t>& lookup, double iou_min,
                        const std::vector<bool>* allowed) {
  auto ranked = rank_gallery(probe.descriptor, index);
  const ProbeSource source{&probe.image_id, &probe.box};
  std::erase_if(ranked, [&](const Candidate& c) {
    if (allowed) {
      auto it = lookup.find(c.image_id);
      if (it == lookup.end() || !(*allowed)[it->second]) return true;
    }
    return is_source_box(source, c.image_id, c.box, iou_min);
  });
  return mark_impl(std::move(ranked), probe.identity, gallery, iou_min, allowed, source);
}

SearchReport summarise(const std::vector<RankedResult>& results, int gallery_size) {
  SearchReport report;
  report.gallery_size = gallery_size;
  for (const auto& r : results) {
    report.per_probe.push_back({r.probe_id, r.first_correct_rank, average_precision(r)});
  }
  const bool any = std::any_of(results.begin(), results.end(), [](const RankedResult& r) { return r.matchable(); });
  if (!any) {
    report.excluded_probes = static_cast<int>(results.size());
    for (int k : kCmcRanks) report.cmc[k] = 0.0;
    return report;
  }
  for (int k : kCmcRanks) report.cmc[k] = cmc(results, k);
  report.mean_ap = mean_ap(results, &report.excluded_probes);
  return report;
}

}  // namespace

ImageSource directory_image_source(std::filesystem::path root) {
  return [root = std::move(root)](const SceneAnnotation& scene) {
    try {
      return read_png(root / scene.image_path);
    } catch (const IoError& e) {
      throw IoError("scene '" + scene.image_id + "': " + e.what());
    }
  };
}

std::vector<double> compute_descriptor(const PyramidNet& net, const Image& image, const BoundingBox& box,
                                       DescriptorMode mode) {
  const auto& bb = net.config().backbone;
  const auto crop = crop_resize(image, box, bb.input_height, bb.input_width);
  auto [descriptor, prediction] = net.forward_pyramid(crop, 1.0);
  if (mode == DescriptorMode::kTopLevel) return concat_descriptor({descriptor.levels.back()});
  return concat_descriptor(descriptor.levels);
}

GalleryIndex build_gallery(const DatasetManifest& gallery, const std::vector<DetectionSet>& detections,
                           const PyramidNet& net, const ImageSource& images, DescriptorMode mode, int jobs) {
  const auto lookup = scene_lookup(gallery);
  std::vector<const DetectionSet*> per_scene(gallery.scenes.size(), nullptr);
  for (const auto& set : detections) {
    auto it = lookup.find(set.image_id);
    if (it == lookup.end()) throw ContractError("build_gallery: detections for unknown scene " + set.image_id);
    per_scene[it->second] = &set;
  }
  std::vector<std::vector<GalleryEntry>> scene_entries(gallery.scenes.size());
  parallel_for(gallery.scenes.size(), jobs, [&](std::size_t s) {
    if (!per_scene[s] || per_scene[s]->detections.empty()) return;
    const Image image = images(gallery.scenes[s]);
    for (const auto& box : per_scene[s]->detections) {
      scene_entries[s].push_back({gallery.scenes[s].image_id, box, compute_descriptor(net, image, box, mode)});
    }
  });
  GalleryIndex index;
  for (auto& entries : scene_entries) {
    for (auto& e : entries) {
      index.descriptor_dim = e.descriptor.size();
      index.entries.push_back(std::move(e));
    }
  }
  return index;
}

std::vector<Candidate> rank_gallery(const std::vector<double>& probe, const GalleryIndex& index) {
  std::vector<Candidate> ranked;
  ranked.reserve(index.entries.size());
  for (std::size_t i = 0; i < index.entries.size(); ++i) {
    const auto& entry = index.entries[i];
    if (entry.descriptor.size() != probe.size()) {
      throw ContractError("rank_gallery: probe has " + std::to_string(probe.size()) + " dims, gallery " +
                          std::to_string(entry.descriptor.size()));
    }
    double sq = 0.0;
    for (std::size_t j = 0; j < probe.size(); ++j) {
      const double diff = probe[j] - entry.descriptor[j];
      sq += diff * diff;
    }
    ranked.push_back({i, entry.image_id, entry.box, std::sqrt(sq), false});
  }
  std::sort(ranked.begin(), ranked.end(), [](const Candidate& a, const Candidate& b) {
    return std::tie(a.distance, a.image_id, a.box.x1, a.box.y1, a.entry) <
           std::tie(b.distance, b.image_id, b.box.x1, b.box.y1, b.entry);
  });
  return ranked;
}

RankedResult mark_correct(std::vector<Candidate> ranked, std::int64_t probe_identity, const DatasetManifest& gallery,
                          double iou_min, const std::vector<bool>* allowed_scenes) {
  return mark_impl(std::move(ranked), probe_identity, gallery, iou_min, allowed_scenes, ProbeSource{});
}

double cmc(const std::vector<RankedResult>& results, int k) {
  if (k < 1) throw ContractError("cmc: rank must be >= 1");
  int counted = 0, hits = 0;
  for (const auto& r : results) {
    if (!r.matchable()) continue;
    ++counted;
    if (r.first_correct_rank && *r.first_correct_rank <= k) ++hits;
  }
  if (counted == 0) throw DomainError("cmc: no matchable probes");
  return static_cast<double>(hits) / counted;
}

double average_precision(const RankedResult& result) {
  if (!result.matchable()) return 0.0;
  double ap = 0.0;
  int hits = 0;
  for (std::size_t r = 0; r < result.candidates.size(); ++r) {
    if (!result.candidates[r].correct) continue;
    ++hits;
    ap += static_cast<double>(hits) / static_cast<double>(r + 1);
  }
  return ap / result.gt_matches;
}

double mean_ap(const std::vector<RankedResult>& results, int* excluded) {
  int skipped = 0, counted = 0;
  double total = 0.0;
  for (const auto& r : results) {
    if (!r.matchable()) {
      ++skipped;
      continue;
    }
    ++counted;
    total += average_precision(r);
  }
  if (excluded) *excluded = skipped;
  if (counted == 0) throw DomainError("mean_ap: no probe has ground-truth matches in the gallery");
  return total / counted;
}

std::vector<Probe> build_probes(const DatasetManifest& probes, const PyramidNet& net, const ImageSource& images,
                                DescriptorMode mode, int jobs) {
  std::vector<Probe> out(probes.scenes.size());
  parallel_for(probes.scenes.size(), jobs, [&](std::size_t s) {
    const auto& scene = probes.scenes[s];
    if (scene.boxes.size() != 1) throw ContractError("build_probes: probe scene " + scene.image_id + " needs one box");
    const Image image = images(scene);
    const auto& box = scene.boxes.front();
    out[s] = {probes.original_identity(box.identity), scene.image_id, box,
              compute_descriptor(net, image, box, mode)};
  });
  return out;
}

SearchReport evaluate_search(const std::vector<Probe>& probes, const GalleryIndex& index,
                             const DatasetManifest& gallery, double iou_min) {
  const auto lookup = scene_lookup(gallery);
  std::vector<RankedResult> results;
  results.reserve(probes.size());
  for (const auto& probe : probes) results.push_back(search_one(probe, index, gallery, lookup, iou_min, nullptr));
  return summarise(results, static_cast<int>(gallery.scenes.size()));
}

nlohmann::json report_to_json(const SearchReport& report) {
  auto rate = [&](int k) { return report.cmc.count(k) ? report.cmc.at(k) : 0.0; };
  nlohmann::json j;
  j["gallery_size"] = report.gallery_size;
  j["rank1"] = rate(1);
  j["rank5"] = rate(5);
  j["rank10"] = rate(10);
  j["rank20"] = rate(20);
  j["mAP"] = report.mean_ap;
  j["excluded_probes"] = report.excluded_probes;
  return j;
}

std::vector<SweepRow> gallery_sweep(const std::vector<int>& sizes, const std::vector<Probe>& probes,
                                    const GalleryIndex& index, const DatasetManifest& gallery, std::uint64_t seed,
                                    double iou_min) {
  const auto lookup = scene_lookup(gallery);
  const std::size_t total = gallery.scenes.size();
  // scenes holding each probe's identity are always searched
  std::vector<std::vector<bool>> required(probes.size(), std::vector<bool>(total, false));
  std::vector<int> required_count(probes.size(), 0);
  for (std::size_t p = 0; p < probes.size(); ++p) {
    for (std::size_t s = 0; s < total; ++s) {
      for (const auto& box : gallery.scenes[s].boxes) {
        if (gallery.original_identity(box.identity) == probes[p].identity) {
          required[p][s] = true;
          ++required_count[p];
          break;
        }
      }
    }
  }
  std::vector<SweepRow> rows;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    const int size = sizes[i];
    if (size < 1 || static_cast<std::size_t>(size) > total) {
      throw ContractError("gallery_sweep: size " + std::to_string(size) + " outside [1, " + std::to_string(total) +
                          "]");
    }
    std::mt19937_64 rng(seed * 1000003ull + static_cast<std::uint64_t>(size));
    std::vector<RankedResult> results;
    for (std::size_t p = 0; p < probes.size(); ++p) {
      if (required_count[p] > size) {
        throw ContractError("gallery_sweep: size " + std::to_string(size) + " is smaller than the " +
                            std::to_string(required_count[p]) + " scenes holding probe identity " +
                            std::to_string(probes[p].identity));
      }
      std::vector<std::size_t> others;
      for (std::size_t s = 0; s < total; ++s) {
        if (!required[p][s]) others.push_back(s);
      }
      std::shuffle(others.begin(), others.end(), rng);
      std::vector<bool> allowed = required[p];
      for (int n = 0; n < size - required_count[p]; ++n) allowed[others[static_cast<std::size_t>(n)]] = true;
      results.push_back(search_one(probes[p], index, gallery, lookup, iou_min, &allowed));
    }
    const auto report = summarise(results, size);
    rows.push_back({size, report.cmc.at(1), report.mean_ap});
  }
  return rows;
}

std::string sweep_to_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream out;
  out << "size,rank1,mAP\n";
  char line[96];
  for (const auto& row : rows) {
    std::snprintf(line, sizeof(line), "%d,%.6f,%.6f\n", row.size, row.rank1, row.map);
    out << line;
  }
  return out.str();
}

}  // namespace clsa
