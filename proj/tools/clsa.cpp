// clsa: command-line front end.
//
//   clsa synth-gen     render a synthetic train/gallery/probe dataset
//   clsa train         optimise the pyramid on a training manifest
//   clsa search-eval   CMC / mAP of a checkpoint on gallery + probe manifests
//   clsa detect-eval   precision/recall of detections against ground truth
//   clsa sweep         rank-1 / mAP against gallery size
//   clsa gradcheck     finite-difference check of the head and loss stack
//   clsa experiment    three-arm synthetic scale experiment
//
// Exit status: 0 success, 1 contract error (bad arguments, invalid config,
// failed check), 2 I/O error. Every run writes <out>/stamp.json.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "clsa/detection.hpp"
#include "clsa/errors.hpp"
#include "clsa/kernels.hpp"
#include "clsa/pyramid_net.hpp"
#include "clsa/search_eval.hpp"
#include "clsa/synth_bench.hpp"
#include "clsa/trainer.hpp"

#ifndef CLSA_VERSION
#define CLSA_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace clsa;

namespace {

struct Common {
  std::string config;
  std::string out = "out";
  std::uint64_t seed = 0;
  bool seed_given = false;
  int jobs = 1;
};

json read_json(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw IoError("config " + path + ": " + e.what());
  }
}

// Config files use the experiment vocabulary: {"synth":{..},"train":{..},
// "arms":[..],"train_jitter":{..},"jitter":{..},"gradcheck":{..}}.
json load_config(const Common& common) { return common.config.empty() ? json::object() : read_json(common.config); }

ExperimentConfig layered(const ExperimentConfig& defaults, const json& doc) {
  ExperimentConfig cfg = defaults;
  try {
    from_json(doc, cfg);
  } catch (const json::exception& e) {
    throw ContractError(std::string("config: ") + e.what());
  }
  return cfg;
}

JitterConfig jitter_config(const json& doc) {
  JitterConfig j;
  if (!doc.contains("jitter")) return j;
  const auto& d = doc.at("jitter");
  auto get = [&](const char* key, double& field) {
    if (d.contains(key)) field = d.at(key).get<double>();
  };
  get("translation", j.translation);
  get("scale", j.scale);
  get("miss_rate", j.miss_rate);
  get("false_positive_rate", j.false_positive_rate);
  get("duplicate_rate", j.duplicate_rate);
  get("score_noise", j.score_noise);
  return j;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

void write_stamp(const Common& common, const std::string& command, const std::vector<std::string>& args,
                 const json& effective_config) {
  fs::create_directories(common.out);
  json stamp{{"command", command},
             {"arguments", args},
             {"seed", common.seed},
             {"jobs", common.jobs},
             {"config", effective_config},
             {"versions",
              {{"clsa", CLSA_VERSION},
               {"checkpoint_format", kCheckpointVersion},
               {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                     std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                     std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
               {"libpng", png_library_version()},
               {"cli11", CLI11_VERSION},
               {"compiler", __VERSION__},
               {"kernels", simd::isa_name(simd::active_isa())}}}};
  write_text(fs::path(common.out) / "stamp.json", stamp.dump(2) + "\n");
}

std::vector<int> parse_int_list(const std::string& text, const char* what) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ContractError(std::string(what) + ": '" + item + "' is not an integer");
    }
  }
  if (out.empty()) throw ContractError(std::string(what) + ": empty list");
  return out;
}

DescriptorMode descriptor_mode(const std::string& name) {
  if (name == "concat") return DescriptorMode::kConcat;
  if (name == "top_level") return DescriptorMode::kTopLevel;
  throw ContractError("--descriptor must be concat or top_level");
}

struct SearchInputs {
  Checkpoint checkpoint;
  DatasetManifest gallery;
  DatasetManifest probe;
  ImageSource gallery_images;
  ImageSource probe_images;
  std::vector<DetectionSet> gallery_detections;
};

SearchInputs load_search_inputs(const std::string& checkpoint, const std::string& gallery, const std::string& probe,
                                const std::string& detections) {
  SearchInputs in{load_checkpoint(checkpoint), load_manifest(gallery), load_manifest(probe), {}, {}, {}};
  in.gallery_images = directory_image_source(fs::path(gallery).parent_path());
  in.probe_images = directory_image_source(fs::path(probe).parent_path());
  in.gallery_detections = detections.empty() ? ground_truth_detections(in.gallery) : load_detections(detections);
  return in;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-level semantic alignment person search toolkit"};
  app.require_subcommand(1);
  Common common;
  std::vector<std::string> raw_args(argv + 1, argv + argc);

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "JSON config layered over the defaults");
    sub->add_option("--out", common.out, "Output directory")->capture_default_str();
    sub->add_option("--seed", common.seed, "Random seed")->each([&](const std::string&) { common.seed_given = true; });
    sub->add_option("--jobs", common.jobs, "Worker thread cap")->check(CLI::PositiveNumber)->capture_default_str();
  };

  auto* synth_cmd = app.add_subcommand("synth-gen", "Render a synthetic dataset under --out");
  add_common(synth_cmd);

  std::string manifest_path, detections_path;
  auto* train_cmd = app.add_subcommand("train", "Train on a training manifest");
  add_common(train_cmd);
  train_cmd->add_option("--manifest", manifest_path, "Training manifest.json (images relative to it)")->required();
  train_cmd->add_option("--detections", detections_path, "Detections JSON used for label propagation");

  std::string checkpoint_path, gallery_path, probe_path, descriptor = "concat";
  auto* search_cmd = app.add_subcommand("search-eval", "Evaluate a checkpoint on gallery and probe manifests");
  add_common(search_cmd);
  search_cmd->add_option("--checkpoint", checkpoint_path, "Checkpoint file")->required();
  search_cmd->add_option("--gallery", gallery_path, "Gallery manifest.json")->required();
  search_cmd->add_option("--probe", probe_path, "Probe manifest.json")->required();
  search_cmd->add_option("--detections", detections_path, "Gallery detections JSON (default: ground-truth boxes)");
  search_cmd->add_option("--descriptor", descriptor, "concat or top_level")->capture_default_str();

  bool oracle = false;
  double score_threshold = 0.5, nms_threshold = 0.5;
  auto* detect_cmd = app.add_subcommand("detect-eval", "Precision/recall of detections against ground truth");
  add_common(detect_cmd);
  detect_cmd->add_option("--manifest", manifest_path, "Ground-truth manifest.json")->required();
  auto* det_opt = detect_cmd->add_option("--detections", detections_path, "Detections JSON to score");
  detect_cmd->add_flag("--oracle-jitter", oracle, "Score the seeded jitter detector instead")->excludes(det_opt);
  detect_cmd->add_option("--score-threshold", score_threshold, "Keep detections scoring above this")
      ->capture_default_str();
  detect_cmd->add_option("--nms", nms_threshold, "NMS IoU threshold")->capture_default_str();

  std::string sizes_text;
  auto* sweep_cmd = app.add_subcommand("sweep", "Rank-1 / mAP against gallery size");
  add_common(sweep_cmd);
  sweep_cmd->add_option("--checkpoint", checkpoint_path, "Checkpoint file")->required();
  sweep_cmd->add_option("--gallery", gallery_path, "Gallery manifest.json")->required();
  sweep_cmd->add_option("--probe", probe_path, "Probe manifest.json")->required();
  sweep_cmd->add_option("--sizes", sizes_text, "Comma-separated gallery sizes, e.g. 10,50")->required();
  sweep_cmd->add_option("--detections", detections_path, "Gallery detections JSON (default: ground-truth boxes)");
  sweep_cmd->add_option("--descriptor", descriptor, "concat or top_level")->capture_default_str();

  GradcheckConfig grad;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of the head and loss stack");
  add_common(grad_cmd);
  grad_cmd->add_option("--levels", grad.levels, "Pyramid levels K")->capture_default_str();
  grad_cmd->add_option("--classes", grad.classes, "Identity classes")->capture_default_str();
  grad_cmd->add_option("--temperature", grad.temperature, "Softening temperature")->capture_default_str();
  grad_cmd->add_flag("--blocked", grad.teacher_gradient_blocked, "Block the teacher gradient");

  std::string seeds_text;
  auto* exp_cmd = app.add_subcommand("experiment", "Three-arm synthetic scale experiment");
  add_common(exp_cmd);
  exp_cmd->add_option("--seeds", seeds_text, "Comma-separated seeds (default: --seed .. --seed+4)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    const CLI::App* failed = &app;
    for (const auto* sub : app.get_subcommands()) failed = sub;
    std::cerr << failed->help();
    return 1;
  }

  try {
    simd::active_isa();
    if (*synth_cmd) {
      const json doc = load_config(common);
      auto cfg = layered(default_experiment_config(), doc);
      if (common.seed_given) cfg.synth.seed = common.seed;
      common.seed = cfg.synth.seed;
      const auto data = generate(cfg.synth, common.jobs);
      data.write(common.out);
      write_stamp(common, "synth-gen", raw_args, {{"synth", cfg.synth}});
      std::printf("wrote %zu train, %zu gallery, %zu probe scenes to %s\n", data.train.scenes.size(),
                  data.gallery.scenes.size(), data.probe.scenes.size(), common.out.c_str());
    } else if (*train_cmd) {
      const json doc = load_config(common);
      ExperimentConfig defaults;
      auto cfg = layered(defaults, doc);
      auto tc = cfg.train;
      if (common.seed_given) tc.seed = common.seed;
      common.seed = tc.seed;
      tc.jobs = common.jobs;
      const auto manifest = load_manifest(manifest_path);
      const auto detections = detections_path.empty() ? std::vector<DetectionSet>{} : load_detections(detections_path);
      write_stamp(common, "train", raw_args, {{"train", tc}});
      const auto result = train(manifest, detections, directory_image_source(fs::path(manifest_path).parent_path()),
                                tc, fs::path(common.out), [](const EpochRecord& r) {
                                  std::printf("%s\n", epoch_record_json(r).c_str());
                                  std::fflush(stdout);
                                });
      std::printf("checkpoint: %s\n", (fs::path(common.out) / "checkpoint.bin").c_str());
    } else if (*search_cmd) {
      const auto mode = descriptor_mode(descriptor);
      auto in = load_search_inputs(checkpoint_path, gallery_path, probe_path, detections_path);
      const auto index =
          build_gallery(in.gallery, in.gallery_detections, in.checkpoint.net, in.gallery_images, mode, common.jobs);
      const auto probes = build_probes(in.probe, in.checkpoint.net, in.probe_images, mode, common.jobs);
      const auto report = evaluate_search(probes, index, in.gallery);
      const auto j = report_to_json(report);
      write_stamp(common, "search-eval", raw_args, {{"descriptor", descriptor}});
      write_text(fs::path(common.out) / "search_report.json", j.dump(2) + "\n");
      std::printf("%s\n", j.dump().c_str());
    } else if (*detect_cmd) {
      const json doc = load_config(common);
      const auto gt = load_manifest(manifest_path);
      std::vector<DetectionSet> sets;
      const auto jitter = jitter_config(doc);
      if (oracle) {
        for (const auto& scene : gt.scenes) sets.push_back(oracle_jitter_detector(scene, jitter, common.seed));
      } else if (!detections_path.empty()) {
        sets = load_detections(detections_path);
      } else {
        throw ContractError("detect-eval needs --detections or --oracle-jitter");
      }
      for (auto& set : sets) set = nms(filter_by_score(set, score_threshold), nms_threshold);
      const auto curve = detection_pr(sets, gt, 0.5);
      write_stamp(common, "detect-eval", raw_args,
                  {{"score_threshold", score_threshold}, {"nms", nms_threshold}, {"oracle_jitter", oracle}});
      save_detections(sets, fs::path(common.out) / "detections.json");
      write_pr_csv(curve, fs::path(common.out) / "pr.csv");
      std::printf("AP %.6f over %zu detections\n", curve.average_precision, curve.points.size());
    } else if (*sweep_cmd) {
      const auto sizes = parse_int_list(sizes_text, "--sizes");
      const auto mode = descriptor_mode(descriptor);
      auto in = load_search_inputs(checkpoint_path, gallery_path, probe_path, detections_path);
      const auto index =
          build_gallery(in.gallery, in.gallery_detections, in.checkpoint.net, in.gallery_images, mode, common.jobs);
      const auto probes = build_probes(in.probe, in.checkpoint.net, in.probe_images, mode, common.jobs);
      const auto rows = gallery_sweep(sizes, probes, index, in.gallery, common.seed);
      write_stamp(common, "sweep", raw_args, {{"sizes", sizes}, {"descriptor", descriptor}});
      const auto csv = sweep_to_csv(rows);
      write_text(fs::path(common.out) / "sweep.csv", csv);
      std::printf("%s", csv.c_str());
    } else if (*grad_cmd) {
      const json doc = load_config(common);
      if (doc.contains("gradcheck")) {
        const auto& g = doc.at("gradcheck");
        grad.levels = g.value("levels", grad.levels);
        grad.classes = g.value("classes", grad.classes);
        grad.feature_dim = g.value("feature_dim", grad.feature_dim);
        grad.head_dim = g.value("head_dim", grad.head_dim);
        grad.batch = g.value("batch", grad.batch);
        grad.temperature = g.value("temperature", grad.temperature);
        grad.step = g.value("step", grad.step);
        grad.teacher_gradient_blocked = g.value("teacher_gradient_blocked", grad.teacher_gradient_blocked);
      }
      const auto result = gradcheck(grad, common.seed);
      write_stamp(common, "gradcheck", raw_args,
                  {{"levels", grad.levels}, {"classes", grad.classes}, {"temperature", grad.temperature},
                   {"teacher_gradient_blocked", grad.teacher_gradient_blocked}});
      std::printf("max relative error %.3e over %zu derivatives (worst: %s)\n", result.max_relative_error,
                  result.checked, result.worst.c_str());
      if (!(result.max_relative_error < 1e-4)) {
        std::cerr << "error: gradient check exceeded 1e-4\n";
        return 1;
      }
    } else if (*exp_cmd) {
      const json doc = load_config(common);
      auto cfg = layered(default_experiment_config(), doc);
      cfg.jobs = common.jobs;
      std::vector<std::uint64_t> seeds;
      if (!seeds_text.empty()) {
        for (int s : parse_int_list(seeds_text, "--seeds")) {
          if (s < 0) throw ContractError("--seeds must be non-negative");
          seeds.push_back(static_cast<std::uint64_t>(s));
        }
      } else {
        for (std::uint64_t i = 0; i < 5; ++i) seeds.push_back(common.seed + i);
      }
      json effective;
      to_json(effective, cfg);
      effective["seeds"] = seeds;
      write_stamp(common, "experiment", raw_args, effective);
      ExperimentHooks hooks;
      hooks.log = [](const std::string& line) { std::cerr << line << "\n"; };
      const auto report = run_scale_experiment(cfg, seeds, hooks);
      auto j = experiment_to_json(report);
      j["config"] = effective;
      write_text(fs::path(common.out) / "experiment_report.json", j.dump(2) + "\n");
      for (const auto& arm : report.arms) {
        if (arm.failed) {
          std::printf("%-14s FAILED %s\n", arm.arm.name.c_str(), arm.error.c_str());
        } else {
          std::printf("%-14s rank1 %.4f +- %.4f  mAP %.4f +- %.4f\n", arm.arm.name.c_str(), arm.rank1_mean,
                      arm.rank1_std, arm.map_mean, arm.map_std);
        }
      }
    }
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 2;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
