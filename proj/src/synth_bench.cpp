#include "clsa/synth_bench.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "clsa/errors.hpp"
#include "clsa/parallel.hpp"

namespace clsa {

namespace {

using Rgb = std::array<double, 3>;

constexpr Rgb kPalette[] = {{200, 40, 40},  {40, 160, 60},   {40, 70, 200},  {220, 200, 50}, {180, 60, 180},
                            {50, 180, 190}, {240, 240, 240}, {30, 30, 30},   {230, 130, 40}, {120, 80, 50}};
constexpr int kPaletteMax = static_cast<int>(std::size(kPalette));
constexpr Rgb kSkins[] = {{230, 190, 160}, {190, 140, 100}, {120, 80, 60}};
constexpr Rgb kShoe = {40, 40, 40};
constexpr double kAspect = 0.42;  // box width / height
constexpr double kMaxOverlap = 0.3;
constexpr int kPlacementRetries = 200;

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::uint64_t derive(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  return splitmix(splitmix(splitmix(seed) ^ a) ^ b);
}

std::optional<Rgb> shade(const IdentitySignature& sig, double u, double v) {
  const double hx = (u - 0.5) / 0.17;
  const double hy = (v - 0.1) / 0.09;
  if (hx * hx + hy * hy <= 1.0) {
    if (sig.hat_color >= 0 && v < 0.08) return kPalette[sig.hat_color];
    return kSkins[sig.skin];
  }
  const double half = 0.4 * sig.build;
  if (v >= 0.19 && v < 0.56 && std::abs(u - 0.5) <= half) {
    const double t = (v - 0.19) / 0.37;
    const double s = (u - 0.5) / (2.0 * half) + 0.5;
    const int row = static_cast<int>(std::floor(t / sig.stripe_period));
    const int col = static_cast<int>(std::floor(s / sig.stripe_period));
    bool alt = false;
    if (sig.pattern == 1) alt = row % 2 == 1;
    if (sig.pattern == 2) alt = col % 2 == 1;
    if (sig.pattern == 3) alt = (row + col) % 2 == 1;
    return kPalette[alt ? sig.pattern_color : sig.top_color];
  }
  const double leg = 0.3 * sig.build;
  const bool in_leg = (u >= 0.5 - leg && u <= 0.47) || (u >= 0.53 && u <= 0.5 + leg);
  if (in_leg && v >= 0.56 && v < 0.96) return kPalette[sig.bottom_color];
  if (in_leg && v >= 0.96 && v <= 1.0) return kShoe;
  return std::nullopt;
}

struct Canvas {
  int width = 0, height = 0;
  std::vector<double> rgb;  // float working buffer
  Canvas(int w, int h) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, 0.0) {}
  double* at(int x, int y) { return &rgb[(static_cast<std::size_t>(y) * width + x) * 3]; }
};

void paint_background(Canvas& canvas, double density, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double gray = 90.0 + 80.0 * unit(rng);
  Rgb base{};
  for (auto& c : base) c = gray + 20.0 * (2.0 * unit(rng) - 1.0);
  const double slope = 40.0 * (2.0 * unit(rng) - 1.0);
  for (int y = 0; y < canvas.height; ++y) {
    const double shift = slope * (static_cast<double>(y) / canvas.height - 0.5);
    for (int x = 0; x < canvas.width; ++x) {
      for (int c = 0; c < 3; ++c) canvas.at(x, y)[c] = base[c] + shift;
    }
  }
  const double area = static_cast<double>(canvas.width) * canvas.height;
  const int rects = static_cast<int>(std::round(density * area / 10000.0));
  for (int r = 0; r < rects; ++r) {
    const int w = 5 + static_cast<int>(unit(rng) * 55.0);
    const int h = 5 + static_cast<int>(unit(rng) * 55.0);
    const int x0 = static_cast<int>(unit(rng) * canvas.width);
    const int y0 = static_cast<int>(unit(rng) * canvas.height);
    Rgb color{};
    for (int c = 0; c < 3; ++c) color[c] = base[c] + 60.0 * (2.0 * unit(rng) - 1.0);
    for (int y = y0; y < std::min(canvas.height, y0 + h); ++y) {
      for (int x = x0; x < std::min(canvas.width, x0 + w); ++x) {
        for (int c = 0; c < 3; ++c) canvas.at(x, y)[c] = color[c];
      }
    }
  }
}

// Draws one person into the box with 3 x 3 supersampled coverage.
void paint_person(Canvas& canvas, const IdentitySignature& sig, const BoundingBox& box, double noise,
                  std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  const double brightness = 1.0 + noise * normal(rng);
  Rgb tint{};
  for (auto& t : tint) t = brightness * (1.0 + 0.5 * noise * normal(rng));
  const double dx = 0.3 * (2.0 * std::uniform_real_distribution<double>(0.0, 1.0)(rng) - 1.0);
  const double w = box.width();
  const double h = box.height();
  const int x_lo = std::max(0, static_cast<int>(std::floor(box.x1)));
  const int x_hi = std::min(canvas.width, static_cast<int>(std::ceil(box.x2)));
  const int y_lo = std::max(0, static_cast<int>(std::floor(box.y1)));
  const int y_hi = std::min(canvas.height, static_cast<int>(std::ceil(box.y2)));
  for (int y = y_lo; y < y_hi; ++y) {
    for (int x = x_lo; x < x_hi; ++x) {
      Rgb sum{};
      int covered = 0;
      for (int sy = 0; sy < 3; ++sy) {
        for (int sx = 0; sx < 3; ++sx) {
          const double u = (x + (sx + 0.5) / 3.0 - box.x1 - dx) / w;
          const double v = (y + (sy + 0.5) / 3.0 - box.y1) / h;
          if (auto color = shade(sig, u, v)) {
            for (int c = 0; c < 3; ++c) sum[c] += (*color)[c] * tint[c];
            ++covered;
          }
        }
      }
      if (covered == 0) continue;
      const double alpha = covered / 9.0;
      double* px = canvas.at(x, y);
      for (int c = 0; c < 3; ++c) px[c] = (1.0 - alpha) * px[c] + sum[c] / 9.0;
    }
  }
}

Image finish(const Canvas& canvas, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> grain(-6, 6);
  Image image(canvas.width, canvas.height);
  for (std::size_t i = 0; i < canvas.rgb.size(); ++i) {
    const double v = std::round(canvas.rgb[i]) + grain(rng);
    image.rgb[i] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
  }
  return image;
}

struct Placement {
  int signature = 0;  // index into the split's signature pool
  std::optional<int> label;
};

struct ScenePlan {
  std::string image_id;
  std::vector<Placement> people;
};

// Samples log-uniform heights and positions with bounded retries.
std::vector<BoundingBox> place(const SynthConfig& config, std::size_t count, std::mt19937_64& rng,
                               const std::string& image_id) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double lo = std::log(config.min_height);
  const double hi = std::log(config.max_height);
  std::vector<BoundingBox> boxes;
  for (std::size_t i = 0; i < count; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < kPlacementRetries && !placed; ++attempt) {
      const int h = static_cast<int>(std::round(std::exp(lo + (hi - lo) * unit(rng))));
      const int w = std::max(3, static_cast<int>(std::round(kAspect * h)));
      const int x = static_cast<int>(unit(rng) * (config.canvas_width - w + 1));
      const int y = static_cast<int>(unit(rng) * (config.canvas_height - h + 1));
      BoundingBox box{static_cast<double>(x), static_cast<double>(y), static_cast<double>(x + w),
                      static_cast<double>(y + h)};
      placed = std::all_of(boxes.begin(), boxes.end(), [&](const BoundingBox& other) {
        return iou(box, other) <= kMaxOverlap;
      });
      if (placed) boxes.push_back(box);
    }
    if (!placed) {
      throw DomainError("synth: cannot place instance " + std::to_string(i) + " of scene " + image_id + " after " +
                        std::to_string(kPlacementRetries) + " attempts; reduce instances_per_scene or heights");
    }
  }
  return boxes;
}

SceneAnnotation render_scene(const SynthConfig& config, const ScenePlan& plan,
                             const std::vector<IdentitySignature>& pool, std::uint64_t seed, Image& image) {
  std::mt19937_64 rng(seed);
  auto boxes = place(config, plan.people.size(), rng, plan.image_id);
  Canvas canvas(config.canvas_width, config.canvas_height);
  paint_background(canvas, config.clutter_density, rng);
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return boxes[a].y2 < boxes[b].y2; });
  for (std::size_t i : order) {
    paint_person(canvas, pool[static_cast<std::size_t>(plan.people[i].signature)], boxes[i], config.appearance_noise,
                 rng);
  }
  image = finish(canvas, rng);
  SceneAnnotation scene{plan.image_id, "images/" + plan.image_id + ".png", config.canvas_width,
                        config.canvas_height, {}};
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    boxes[i].identity = plan.people[i].label;
    scene.boxes.push_back(boxes[i]);
  }
  return scene;
}

std::string scene_id(const std::string& split, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_%04zu", split.c_str(), index);
  return buf;
}

DatasetManifest render_split(const SynthConfig& config, Split split, const std::vector<ScenePlan>& plans,
                             const std::vector<IdentitySignature>& pool, std::uint64_t stream,
                             std::map<std::string, Image>& images, int jobs) {
  DatasetManifest manifest;
  manifest.split = split;
  manifest.scenes.resize(plans.size());
  std::vector<Image> rendered(plans.size());
  parallel_for(plans.size(), jobs, [&](std::size_t s) {
    manifest.scenes[s] = render_scene(config, plans[s], pool, derive(config.seed, stream, s), rendered[s]);
  });
  for (std::size_t s = 0; s < plans.size(); ++s) images.emplace(plans[s].image_id, std::move(rendered[s]));
  densify_identities(manifest);
  return manifest;
}

nlohmann::json jitter_json(const JitterConfig& j) {
  return {{"translation", j.translation}, {"scale", j.scale},
          {"miss_rate", j.miss_rate},     {"false_positive_rate", j.false_positive_rate},
          {"duplicate_rate", j.duplicate_rate}, {"score_noise", j.score_noise}};
}

JitterConfig jitter_from_json(const nlohmann::json& j, JitterConfig c) {
  auto get = [&](const char* key, double& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("translation", c.translation);
  get("scale", c.scale);
  get("miss_rate", c.miss_rate);
  get("false_positive_rate", c.false_positive_rate);
  get("duplicate_rate", c.duplicate_rate);
  get("score_noise", c.score_noise);
  return c;
}

std::string descriptor_name(DescriptorMode mode) { return mode == DescriptorMode::kConcat ? "concat" : "top_level"; }

DescriptorMode descriptor_from_name(const std::string& name) {
  if (name == "concat") return DescriptorMode::kConcat;
  if (name == "top_level") return DescriptorMode::kTopLevel;
  throw ContractError("unknown descriptor '" + name + "' (expected concat or top_level)");
}

}  // namespace

void SynthConfig::validate() const {
  if (identity_count < 2) throw ContractError("SynthConfig: identity_count must be >= 2");
  if (test_identity_count < 1 || distractor_count < 0 || scenes_per_split < 1 || instances_per_scene < 1 ||
      probes_per_identity < 1 || canvas_width < 1 || canvas_height < 1) {
    throw ContractError("SynthConfig: counts must be positive");
  }
  if (gallery_appearances < 2) throw ContractError("SynthConfig: gallery_appearances must be >= 2");
  if (gallery_appearances > scenes_per_split ||
      test_identity_count * gallery_appearances > scenes_per_split * instances_per_scene) {
    throw ContractError("SynthConfig: gallery has too few slots for every test identity's appearances");
  }
  if (!(min_height >= 4.0) || !(max_height / min_height >= 2.0)) {
    throw ContractError("SynthConfig: need min_height >= 4 and max_height / min_height >= 2");
  }
  if (max_height > canvas_height || kAspect * max_height > canvas_width) {
    throw ContractError("SynthConfig: max_height does not fit the canvas");
  }
  if (palette_size < 3 || palette_size > kPaletteMax) {
    throw ContractError("SynthConfig: palette_size must be in [3, " + std::to_string(kPaletteMax) + "]");
  }
  if (!(clutter_density >= 0.0) || !(appearance_noise >= 0.0)) {
    throw ContractError("SynthConfig: densities and noise must be >= 0");
  }
}

void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = nlohmann::json{{"identity_count", c.identity_count},
                     {"test_identity_count", c.test_identity_count},
                     {"distractor_count", c.distractor_count},
                     {"scenes_per_split", c.scenes_per_split},
                     {"instances_per_scene", c.instances_per_scene},
                     {"gallery_appearances", c.gallery_appearances},
                     {"probes_per_identity", c.probes_per_identity},
                     {"scale_range", {c.min_height, c.max_height}},
                     {"canvas_size", {c.canvas_height, c.canvas_width}},
                     {"clutter_density", c.clutter_density},
                     {"palette_size", c.palette_size},
                     {"appearance_noise", c.appearance_noise},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, SynthConfig& c) {
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("identity_count", c.identity_count);
  get("test_identity_count", c.test_identity_count);
  get("distractor_count", c.distractor_count);
  get("scenes_per_split", c.scenes_per_split);
  get("instances_per_scene", c.instances_per_scene);
  get("gallery_appearances", c.gallery_appearances);
  get("probes_per_identity", c.probes_per_identity);
  if (j.contains("scale_range")) {
    c.min_height = j.at("scale_range").at(0).get<double>();
    c.max_height = j.at("scale_range").at(1).get<double>();
  }
  if (j.contains("canvas_size")) {
    c.canvas_height = j.at("canvas_size").at(0).get<int>();
    c.canvas_width = j.at("canvas_size").at(1).get<int>();
  }
  get("clutter_density", c.clutter_density);
  get("palette_size", c.palette_size);
  get("appearance_noise", c.appearance_noise);
  get("seed", c.seed);
}

std::vector<IdentitySignature> make_signatures(const SynthConfig& config, int count, std::uint64_t stream) {
  std::mt19937_64 rng(derive(config.seed, 0x51C7, stream));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto pick = [&](int n) { return static_cast<int>(rng() % static_cast<std::uint64_t>(n)); };
  std::vector<IdentitySignature> out;
  std::vector<std::array<int, 5>> seen;
  for (int i = 0; i < count; ++i) {
    IdentitySignature sig;
    for (int attempt = 0; attempt < 100; ++attempt) {
      sig.top_color = pick(config.palette_size);
      sig.bottom_color = pick(config.palette_size);
      sig.pattern = pick(4);
      sig.pattern_color = (sig.top_color + 1 + pick(config.palette_size - 1)) % config.palette_size;
      sig.stripe_period = 0.15 + 0.2 * unit(rng);
      sig.hat_color = unit(rng) < 0.5 ? -1 : pick(config.palette_size);
      sig.skin = pick(static_cast<int>(std::size(kSkins)));
      sig.build = 0.8 + 0.25 * unit(rng);
      const std::array<int, 5> key{sig.top_color, sig.bottom_color, sig.pattern,
                                   sig.pattern == 0 ? -1 : sig.pattern_color, sig.hat_color};
      if (std::find(seen.begin(), seen.end(), key) == seen.end()) {
        seen.push_back(key);
        break;
      }
    }
    out.push_back(sig);
  }
  return out;
}

ImageSource SynthDataset::source() const {
  return [this](const SceneAnnotation& scene) -> Image {
    auto it = images.find(scene.image_id);
    if (it == images.end()) throw IoError("synthetic scene '" + scene.image_id + "' has no image");
    return it->second;
  };
}

void SynthDataset::write(const std::filesystem::path& root) const {
  const std::pair<const char*, const DatasetManifest*> splits[] = {
      {"train", &train}, {"gallery", &gallery}, {"probe", &probe}};
  for (const auto& [name, manifest] : splits) {
    const auto dir = root / name;
    std::filesystem::create_directories(dir / "images");
    save_manifest(*manifest, dir / "manifest.json");
    for (const auto& scene : manifest->scenes) write_png(images.at(scene.image_id), dir / scene.image_path);
  }
}

SynthDataset generate(const SynthConfig& config, int jobs) {
  config.validate();
  const auto train_pool = make_signatures(config, config.identity_count, 1);
  // test identities and distractors share one pool so their signatures differ
  auto test_pool = make_signatures(config, config.test_identity_count + config.distractor_count, 2);

  std::mt19937_64 planner(derive(config.seed, 0x9A11));
  const auto slots = static_cast<std::size_t>(config.instances_per_scene);
  SynthDataset data;

  std::vector<ScenePlan> train_plans(static_cast<std::size_t>(config.scenes_per_split));
  for (std::size_t s = 0; s < train_plans.size(); ++s) {
    train_plans[s].image_id = scene_id("train", s);
    for (std::size_t p = 0; p < slots; ++p) {
      const int id = static_cast<int>(planner() % static_cast<std::uint64_t>(config.identity_count));
      train_plans[s].people.push_back({id, id});
    }
  }

  const std::size_t gallery_scenes = static_cast<std::size_t>(config.scenes_per_split);
  std::vector<ScenePlan> gallery_plans(gallery_scenes);
  for (std::size_t s = 0; s < gallery_scenes; ++s) gallery_plans[s].image_id = scene_id("gallery", s);
  const int test_label_base = 10000;
  for (int t = 0; t < config.test_identity_count; ++t) {
    std::vector<std::size_t> candidates(gallery_scenes);
    std::iota(candidates.begin(), candidates.end(), std::size_t{0});
    std::shuffle(candidates.begin(), candidates.end(), planner);
    int placed = 0;
    for (std::size_t s : candidates) {
      if (placed == config.gallery_appearances) break;
      if (gallery_plans[s].people.size() >= slots) continue;
      gallery_plans[s].people.push_back({t, test_label_base + t});
      ++placed;
    }
    if (placed < config.gallery_appearances) {
      throw DomainError("synth: not enough free gallery slots for test identity " + std::to_string(t));
    }
  }
  for (auto& plan : gallery_plans) {
    while (plan.people.size() < slots) {
      if (config.distractor_count == 0) break;
      const int d = static_cast<int>(planner() % static_cast<std::uint64_t>(config.distractor_count));
      plan.people.push_back({config.test_identity_count + d, std::nullopt});
    }
    std::shuffle(plan.people.begin(), plan.people.end(), planner);
  }

  std::vector<ScenePlan> probe_plans;
  for (int t = 0; t < config.test_identity_count; ++t) {
    for (int k = 0; k < config.probes_per_identity; ++k) {
      ScenePlan plan{scene_id("probe", probe_plans.size()), {{t, test_label_base + t}}};
      probe_plans.push_back(plan);
    }
  }

  data.train = render_split(config, Split::kTrain, train_plans, train_pool, 11, data.images, jobs);
  data.gallery = render_split(config, Split::kGallery, gallery_plans, test_pool, 12, data.images, jobs);
  data.probe = render_split(config, Split::kProbe, probe_plans, test_pool, 13, data.images, jobs);
  return data;
}

Image render_isolated(const SynthConfig& config, const IdentitySignature& signature, int height,
                      std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int width = std::max(3, static_cast<int>(std::round(kAspect * height)));
  Canvas canvas(width, height);
  paint_background(canvas, 0.0, rng);
  paint_person(canvas, signature, BoundingBox{0, 0, static_cast<double>(width), static_cast<double>(height)},
               config.appearance_noise, rng);
  return finish(canvas, rng);
}

double nearest_centroid_accuracy(const SynthConfig& config, int height, int per_identity, std::uint64_t seed) {
  if (per_identity < 2) throw ContractError("nearest_centroid_accuracy: need at least two renders per identity");
  const auto pool = make_signatures(config, config.identity_count, 1);
  const int fit = per_identity / 2;
  std::vector<std::vector<std::vector<float>>> crops(pool.size());
  for (std::size_t id = 0; id < pool.size(); ++id) {
    for (int r = 0; r < per_identity; ++r) {
      const Image img = render_isolated(config, pool[id], height, derive(seed, id, static_cast<std::uint64_t>(r)));
      crops[id].push_back(crop_resize(img, BoundingBox{0, 0, static_cast<double>(img.width),
                                                       static_cast<double>(img.height)},
                                      32, 16));
    }
  }
  std::vector<std::vector<double>> centroids(pool.size());
  for (std::size_t id = 0; id < pool.size(); ++id) {
    centroids[id].assign(crops[id][0].size(), 0.0);
    for (int r = 0; r < fit; ++r) {
      for (std::size_t i = 0; i < centroids[id].size(); ++i) centroids[id][i] += crops[id][r][i] / fit;
    }
  }
  int correct = 0, total = 0;
  for (std::size_t id = 0; id < pool.size(); ++id) {
    for (int r = fit; r < per_identity; ++r) {
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < centroids.size(); ++c) {
        double d = 0.0;
        for (std::size_t i = 0; i < centroids[c].size(); ++i) {
          const double diff = crops[id][r][i] - centroids[c][i];
          d += diff * diff;
        }
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      correct += best == id;
      ++total;
    }
  }
  return static_cast<double>(correct) / total;
}

std::vector<DetectionSet> ground_truth_detections(const DatasetManifest& manifest) {
  std::vector<DetectionSet> sets;
  for (const auto& scene : manifest.scenes) {
    DetectionSet set{scene.image_id, {}, DetectionSource::kFile};
    for (auto box : scene.boxes) {
      box.identity.reset();
      box.score = 1.0;
      set.detections.push_back(box);
    }
    sets.push_back(std::move(set));
  }
  return sets;
}

std::vector<DetectionSet> jittered_detections(const DatasetManifest& manifest, const JitterConfig& jitter,
                                              std::uint64_t seed) {
  std::vector<DetectionSet> sets;
  for (const auto& scene : manifest.scenes) {
    sets.push_back(nms(filter_by_score(oracle_jitter_detector(scene, jitter, seed))));
  }
  return sets;
}

std::vector<ArmSpec> default_arms() {
  return {{"baseline", false, DescriptorMode::kTopLevel},
          {"naive_pyramid", false, DescriptorMode::kConcat},
          {"clsa", true, DescriptorMode::kConcat}};
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  nlohmann::json arms = nlohmann::json::array();
  for (const auto& arm : c.arms) {
    arms.push_back({{"name", arm.name},
                    {"alignment_enabled", arm.alignment_enabled},
                    {"descriptor", descriptor_name(arm.descriptor)}});
  }
  j = nlohmann::json{{"synth", c.synth},
                     {"train", c.train},
                     {"arms", arms},
                     {"propagate_detections", c.propagate_detections},
                     {"train_jitter", jitter_json(c.train_jitter)}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  if (j.contains("synth")) {
    from_json(j.at("synth"), c.synth);
  }
  if (j.contains("train")) {
    from_json(j.at("train"), c.train);
  }
  if (j.contains("arms")) {
    c.arms.clear();
    for (const auto& a : j.at("arms")) {
      c.arms.push_back({a.at("name").get<std::string>(), a.value("alignment_enabled", true),
                        descriptor_from_name(a.value("descriptor", std::string("concat")))});
    }
  }
  if (j.contains("propagate_detections")) j.at("propagate_detections").get_to(c.propagate_detections);
  if (j.contains("train_jitter")) c.train_jitter = jitter_from_json(j.at("train_jitter"), c.train_jitter);
}

ExperimentConfig default_experiment_config() {
  ExperimentConfig c;
  c.train.net.backbone.input_height = 64;
  c.train.net.backbone.input_width = 32;
  c.train.net.head_dim = 64;
  c.train.batch_size = 32;
  c.train.epochs = 40;
  c.train.lr_decay_every = 25;
  return c;
}

double sample_std(const std::vector<double>& values) {
  if (values.size() < 2) return 0.0;
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / static_cast<double>(values.size() - 1));
}

ExperimentReport run_scale_experiment(const ExperimentConfig& config, const std::vector<std::uint64_t>& seeds,
                                      const ExperimentHooks& hooks) {
  if (seeds.empty()) throw ContractError("run_scale_experiment: at least one seed is required");
  if (config.arms.empty()) throw ContractError("run_scale_experiment: no arms configured");
  auto log = [&](const std::string& line) {
    if (hooks.log) hooks.log(line);
  };
  ExperimentReport report;
  report.seeds = seeds;
  for (const auto& arm : config.arms) report.arms.push_back(ArmResult{arm});

  for (std::uint64_t seed : seeds) {
    SynthConfig synth = config.synth;
    synth.seed = seed;
    const SynthDataset data = generate(synth, config.jobs);
    const auto source = data.source();
    const auto train_dets =
        config.propagate_detections ? jittered_detections(data.train, config.train_jitter, seed)
                                    : std::vector<DetectionSet>{};
    const auto gallery_dets = ground_truth_detections(data.gallery);

    // arms sharing a loss configuration share one trained model
    std::map<bool, std::optional<PyramidNet>> models;
    std::map<bool, std::string> train_errors;
    for (auto& result : report.arms) {
      if (result.failed) continue;
      const bool key = result.arm.alignment_enabled;
      try {
        if (train_errors.count(key)) throw DomainError(train_errors.at(key));
        if (!models.count(key)) {
          TrainConfig tc = config.train;
          tc.seed = seed;
          tc.loss.alignment_enabled = key;
          tc.jobs = config.jobs;
          log("seed " + std::to_string(seed) + ": training " + (key ? "with" : "without") + " alignment");
          try {
            models.emplace(key, train(data.train, train_dets, source, tc).net);
          } catch (const std::exception& e) {
            train_errors[key] = e.what();
            throw;
          }
        }
        const PyramidNet& net = *models.at(key);
        const auto index = build_gallery(data.gallery, gallery_dets, net, source, result.arm.descriptor, config.jobs);
        const auto probes = build_probes(data.probe, net, source, result.arm.descriptor, config.jobs);
        const auto search = evaluate_search(probes, index, data.gallery);
        result.per_seed.push_back(search);
        log("seed " + std::to_string(seed) + " arm " + result.arm.name + ": rank1 " +
            std::to_string(search.cmc.at(1)) + " mAP " + std::to_string(search.mean_ap));
        if (hooks.after_arm) hooks.after_arm(seed, result.arm, net, data);
      } catch (const std::exception& e) {
        result.failed = true;
        result.error = "seed " + std::to_string(seed) + ": " + e.what();
        log("arm " + result.arm.name + " failed: " + result.error);
      }
    }
  }

  for (auto& result : report.arms) {
    if (result.failed) continue;
    std::vector<double> rank1, map;
    for (const auto& r : result.per_seed) {
      rank1.push_back(r.cmc.at(1));
      map.push_back(r.mean_ap);
    }
    result.rank1_mean = std::accumulate(rank1.begin(), rank1.end(), 0.0) / static_cast<double>(rank1.size());
    result.map_mean = std::accumulate(map.begin(), map.end(), 0.0) / static_cast<double>(map.size());
    result.rank1_std = sample_std(rank1);
    result.map_std = sample_std(map);
  }
  return report;
}

nlohmann::json experiment_to_json(const ExperimentReport& report) {
  nlohmann::json arms = nlohmann::json::array();
  for (const auto& result : report.arms) {
    nlohmann::json per_seed = nlohmann::json::array();
    for (std::size_t i = 0; i < result.per_seed.size(); ++i) {
      auto entry = report_to_json(result.per_seed[i]);
      entry["seed"] = report.seeds[i];
      per_seed.push_back(entry);
    }
    nlohmann::json arm{{"name", result.arm.name},
                       {"alignment_enabled", result.arm.alignment_enabled},
                       {"descriptor", descriptor_name(result.arm.descriptor)},
                       {"failed", result.failed},
                       {"per_seed", per_seed}};
    if (result.failed) {
      arm["error"] = result.error;
      arm["rank1_mean"] = nullptr;
      arm["rank1_std"] = nullptr;
      arm["mAP_mean"] = nullptr;
      arm["mAP_std"] = nullptr;
    } else {
      arm["rank1_mean"] = result.rank1_mean;
      arm["rank1_std"] = result.rank1_std;
      arm["mAP_mean"] = result.map_mean;
      arm["mAP_std"] = result.map_std;
    }
    arms.push_back(arm);
  }
  return {{"seeds", report.seeds}, {"arms", arms}};
}

}  // namespace clsa
