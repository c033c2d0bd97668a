#pragma once
// Identity-branch optimisation: SGD with momentum over annotated boxes plus
// detections propagated from them, per-epoch JSON-lines logging,
// checkpointing, and finite-difference gradient verification of the head
// and loss stack.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "clsa/data_model.hpp"
#include "clsa/detection.hpp"
#include "clsa/image.hpp"
#include "clsa/losses.hpp"
#include "clsa/pyramid_net.hpp"
#include "clsa/search_eval.hpp"

namespace clsa {

struct TrainConfig {
  double momentum = 0.9;
  double weight_decay = 1e-5;  // not applied to normalisation scale/shift
  int batch_size = 64;
  int epochs = 100;
  double initial_lr = 0.01;
  double lr_decay = 0.1;
  int lr_decay_every = 40;  // epochs
  std::uint64_t seed = 0;
  LossConfig loss;
  NetConfig net;  // class_count is taken from the training manifest
  int max_batches_per_epoch = 0;  // 0: full epoch
  bool augment = false;           // reserved; no augmentation is implemented
  double propagation_iou = 0.5;   // detections inherit labels above this IoU
  int jobs = 1;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// Learning rate in effect during `epoch` (1-based): initial_lr decayed by
// lr_decay once per completed lr_decay_every epochs.
double learning_rate_for_epoch(const TrainConfig& config, int epoch);

struct EpochRecord {
  int epoch = 0;
  LossBreakdown mean_loss;
  double lr = 0.0;
  double seconds = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  std::vector<std::string> checkpoint_paths;
};

// {"epoch":int,"ce":f,"clsa":[f,...],"total":f,"lr":f,"seconds":f}
std::string epoch_record_json(const EpochRecord& record);

struct TrainingSample {
  std::size_t scene = 0;
  BoundingBox box;
  int label = 0;
};

// Annotated boxes plus propagated detections, scene by scene.
std::vector<TrainingSample> build_training_pairs(const DatasetManifest& train,
                                                 const std::vector<DetectionSet>& detections,
                                                 double iou_min);

struct TrainResult {
  PyramidNet net;
  TrainLog log;
};

// Deterministic given config.seed. When out_dir is set, writes
// train_log.jsonl and overwrites checkpoint.bin at every epoch end.
using EpochCallback = std::function<void(const EpochRecord&)>;

TrainResult train(const DatasetManifest& train_split, const std::vector<DetectionSet>& detections,
                  const ImageSource& images, const TrainConfig& config,
                  const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                  const EpochCallback& on_epoch = nullptr);

// One SGD-with-momentum update from the gradients currently held by `net`.
void sgd_step(PyramidNet& net, const TrainConfig& config, double lr);

struct GradcheckConfig {
  int levels = 3;
  int classes = 7;
  int feature_dim = 6;
  int head_dim = 8;
  int batch = 4;
  double temperature = 3.0;
  bool teacher_gradient_blocked = false;
  double step = 3e-5;
};

struct GradcheckResult {
  double max_relative_error = 0.0;
  std::size_t checked = 0;  // scalar derivatives compared
  std::string worst;        // name of the worst coordinate
};

// |a - n| / max(|a|, |n|, kGradcheckFloor): relative error with an absolute
// floor so exactly-zero derivatives are compared absolutely.
inline constexpr double kGradcheckFloor = 1e-6;
double gradient_relative_error(double analytic, double numeric);

// Worst relative error between `gradient(x)` and central differences of `f`.
double max_gradient_error(const std::function<double(std::span<const double>)>& f,
                          const std::vector<double>& gradient, std::vector<double> x, double step);

// Random small head stack: pooled features -> FC -> BN(batch) -> ReLU -> FC,
// loss = batch-mean total_loss. Compares every head parameter, every input
// feature and every logit against central differences.
GradcheckResult gradcheck(const GradcheckConfig& config, std::uint64_t seed);

}  // namespace clsa
