#include "clsa/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "clsa/errors.hpp"
#include "clsa/parallel.hpp"

namespace clsa {

void TrainConfig::validate() const {
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ContractError("TrainConfig: momentum must be in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ContractError("TrainConfig: weight_decay must be >= 0");
  if (batch_size < 2) throw ContractError("TrainConfig: batch_size must be >= 2");
  if (epochs < 0) throw ContractError("TrainConfig: epochs must be >= 0");
  if (!(initial_lr > 0.0)) throw ContractError("TrainConfig: initial_lr must be positive");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ContractError("TrainConfig: lr_decay must be in (0, 1]");
  if (lr_decay_every < 1) throw ContractError("TrainConfig: lr_decay_every must be >= 1");
  if (max_batches_per_epoch < 0) throw ContractError("TrainConfig: max_batches_per_epoch must be >= 0");
  if (jobs < 1) throw ContractError("TrainConfig: jobs must be >= 1");
  if (!(propagation_iou >= 0.0 && propagation_iou < 1.0)) {
    throw ContractError("TrainConfig: propagation_iou must be in [0, 1)");
  }
  if (augment) throw ContractError("TrainConfig: augmentation is not implemented");
  if (!(loss.temperature > 0.0)) throw ContractError("TrainConfig: temperature must be positive");
  net.backbone.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"momentum", c.momentum},
                     {"weight_decay", c.weight_decay},
                     {"batch_size", c.batch_size},
                     {"epochs", c.epochs},
                     {"initial_lr", c.initial_lr},
                     {"lr_decay", c.lr_decay},
                     {"lr_decay_every", c.lr_decay_every},
                     {"seed", c.seed},
                     {"temperature", c.loss.temperature},
                     {"teacher_gradient_blocked", c.loss.teacher_gradient_blocked},
                     {"alignment_enabled", c.loss.alignment_enabled},
                     {"net", c.net},
                     {"max_batches_per_epoch", c.max_batches_per_epoch},
                     {"augment", c.augment},
                     {"propagation_iou", c.propagation_iou}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("momentum", c.momentum);
  get("weight_decay", c.weight_decay);
  get("batch_size", c.batch_size);
  get("epochs", c.epochs);
  get("initial_lr", c.initial_lr);
  get("lr_decay", c.lr_decay);
  get("lr_decay_every", c.lr_decay_every);
  get("seed", c.seed);
  get("temperature", c.loss.temperature);
  get("teacher_gradient_blocked", c.loss.teacher_gradient_blocked);
  get("alignment_enabled", c.loss.alignment_enabled);
  get("net", c.net);
  get("max_batches_per_epoch", c.max_batches_per_epoch);
  get("augment", c.augment);
  get("propagation_iou", c.propagation_iou);
}

double learning_rate_for_epoch(const TrainConfig& config, int epoch) {
  if (epoch < 1) throw ContractError("learning_rate_for_epoch: epochs are 1-based");
  // repeated multiplication keeps 0.01 -> 0.001 -> 0.0001 exact in binary
  double lr = config.initial_lr;
  for (int k = 0; k < (epoch - 1) / config.lr_decay_every; ++k) lr *= config.lr_decay;
  return lr;
}

std::string epoch_record_json(const EpochRecord& record) {
  nlohmann::json j{{"epoch", record.epoch},
                   {"ce", record.mean_loss.ce},
                   {"clsa", record.mean_loss.clsa_per_level},
                   {"total", record.mean_loss.total},
                   {"lr", record.lr},
                   {"seconds", record.seconds}};
  return j.dump();
}

std::vector<TrainingSample> build_training_pairs(const DatasetManifest& train,
                                                 const std::vector<DetectionSet>& detections,
                                                 double iou_min) {
  std::vector<TrainingSample> samples;
  for (std::size_t s = 0; s < train.scenes.size(); ++s) {
    const auto& scene = train.scenes[s];
    DetectionSet none{scene.image_id, {}, DetectionSource::kFile};
    const DetectionSet* dets = &none;
    for (const auto& set : detections) {
      if (set.image_id == scene.image_id) dets = &set;
    }
    for (auto& [box, label] : assign_labels(*dets, scene, iou_min)) {
      samples.push_back({s, box, label});
    }
  }
  return samples;
}

namespace {

template <typename T>
void sgd_update(Param<T>& p, const TrainConfig& config, double lr) {
  if (p.frozen) return;
  const T momentum = static_cast<T>(config.momentum);
  const T decay = p.decay ? static_cast<T>(config.weight_decay) : T(0);
  const T rate = static_cast<T>(lr);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const T g = p.grad[i] + decay * p.value[i];
    p.velocity[i] = momentum * p.velocity[i] + g;
    p.value[i] -= rate * p.velocity[i];
  }
}

}  // namespace

void sgd_step(PyramidNet& net, const TrainConfig& config, double lr) {
  for (auto* p : net.backbone_params()) sgd_update(*p, config, lr);
  for (auto* p : net.head_params()) sgd_update(*p, config, lr);
}

TrainResult train(const DatasetManifest& train_split, const std::vector<DetectionSet>& detections,
                  const ImageSource& images, const TrainConfig& config,
                  const std::optional<std::filesystem::path>& out_dir, const EpochCallback& on_epoch) {
  config.validate();
  if (train_split.identity_space_size < 2) {
    throw ContractError("train: the training split needs at least two identities");
  }
  const auto samples = build_training_pairs(train_split, detections, config.propagation_iou);
  if (samples.empty()) throw ContractError("train: no labeled training boxes");

  NetConfig net_config = config.net;
  net_config.class_count = train_split.identity_space_size;
  LossConfig loss = config.loss;
  loss.level_count = net_config.backbone.level_count();
  loss.class_count = net_config.class_count;
  loss.validate();

  TrainResult result{PyramidNet(net_config, config.seed), {}};
  PyramidNet& net = result.net;

  std::vector<Image> scene_images(train_split.scenes.size());
  std::vector<bool> needed(train_split.scenes.size(), false);
  for (const auto& s : samples) needed[s.scene] = true;
  parallel_for(scene_images.size(), config.jobs, [&](std::size_t s) {
    if (needed[s]) scene_images[s] = images(train_split.scenes[s]);
  });

  std::ofstream log_file;
  std::filesystem::path checkpoint_path;
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    log_file.open(*out_dir / "train_log.jsonl", std::ios::binary | std::ios::trunc);
    if (!log_file) throw IoError("cannot write " + (*out_dir / "train_log.jsonl").string());
    checkpoint_path = *out_dir / "checkpoint.bin";
  }
  auto write_checkpoint = [&](int epoch) {
    if (!out_dir) return;
    save_checkpoint(net, train_split.original_ids, {{"epoch", epoch}, {"train_config", config}}, checkpoint_path);
    result.log.checkpoint_paths.push_back(checkpoint_path.string());
  };
  if (config.epochs == 0) write_checkpoint(0);

  const int height = net_config.backbone.input_height;
  const int width = net_config.backbone.input_width;
  const std::size_t n = samples.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});

  // batch boundaries; a trailing single sample joins the previous batch
  std::vector<std::size_t> bounds;
  for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(config.batch_size)) {
    bounds.push_back(start);
  }
  bounds.push_back(n);
  if (bounds.size() > 2 && bounds[bounds.size() - 1] - bounds[bounds.size() - 2] == 1) {
    bounds.erase(bounds.end() - 2);
  }
  std::size_t batches = bounds.size() - 1;
  if (config.max_batches_per_epoch > 0) {
    batches = std::min(batches, static_cast<std::size_t>(config.max_batches_per_epoch));
  }

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    std::mt19937_64 rng(config.seed * 0x9E3779B97F4A7C15ull + static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng);
    const double lr = learning_rate_for_epoch(config, epoch);

    EpochRecord record;
    record.epoch = epoch;
    record.lr = lr;
    record.mean_loss.clsa_per_level.assign(static_cast<std::size_t>(std::max(0, loss.level_count - 1)), 0.0);
    std::size_t seen = 0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t begin = bounds[b];
      const std::size_t count = bounds[b + 1] - begin;
      std::vector<std::vector<float>> crops(count);
      std::vector<int> labels(count);
      parallel_for(count, config.jobs, [&](std::size_t i) {
        const auto& sample = samples[order[begin + i]];
        crops[i] = crop_resize(scene_images[sample.scene], sample.box, height, width);
        labels[i] = sample.label;
      });
      std::vector<std::span<const float>> views(crops.begin(), crops.end());
      LossBreakdown batch_loss;
      try {
        batch_loss = net.accumulate_batch_gradients(views, labels, loss, config.jobs);
      } catch (const DomainError& e) {
        throw DomainError("training diverged at epoch " + std::to_string(epoch) + " batch " + std::to_string(b) +
                          ": " + e.what());
      }
      if (!std::isfinite(batch_loss.total)) {
        throw DomainError("training diverged at epoch " + std::to_string(epoch) + " batch " + std::to_string(b) +
                          ": non-finite loss");
      }
      sgd_step(net, config, lr);
      const double w = static_cast<double>(count);
      record.mean_loss.ce += w * batch_loss.ce;
      record.mean_loss.total += w * batch_loss.total;
      for (std::size_t s = 0; s < batch_loss.clsa_per_level.size(); ++s) {
        record.mean_loss.clsa_per_level[s] += w * batch_loss.clsa_per_level[s];
      }
      seen += count;
    }
    const double inv = 1.0 / static_cast<double>(seen);
    record.mean_loss.ce *= inv;
    record.mean_loss.total *= inv;
    for (double& v : record.mean_loss.clsa_per_level) v *= inv;
    record.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    result.log.epochs.push_back(record);
    if (log_file.is_open()) {
      log_file << epoch_record_json(record) << "\n";
      log_file.flush();
    }
    write_checkpoint(epoch);
    if (on_epoch) on_epoch(record);
  }
  return result;
}

double gradient_relative_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), kGradcheckFloor});
  return std::abs(analytic - numeric) / scale;
}

double max_gradient_error(const std::function<double(std::span<const double>)>& f,
                          const std::vector<double>& gradient, std::vector<double> x, double step) {
  if (gradient.size() != x.size()) throw ContractError("max_gradient_error: gradient/point size mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + step;
    const double up = f(x);
    x[i] = saved - step;
    const double down = f(x);
    x[i] = saved;
    worst = std::max(worst, gradient_relative_error(gradient[i], (up - down) / (2.0 * step)));
  }
  return worst;
}

GradcheckResult gradcheck(const GradcheckConfig& config, std::uint64_t seed) {
  if (config.levels < 1 || config.classes < 2 || config.feature_dim < 1 || config.head_dim < 1 ||
      config.batch < 2 || !(config.step > 0.0)) {
    throw ContractError("gradcheck: invalid configuration");
  }
  NetConfig net_config;
  const int blocks = config.levels + 1;
  net_config.backbone.blocks.assign(static_cast<std::size_t>(blocks), BlockSpec{config.feature_dim, 2});
  net_config.backbone.selected_blocks.clear();
  for (int b = blocks; b > 1; --b) net_config.backbone.selected_blocks.push_back(b);
  net_config.backbone.input_height = 1 << blocks;
  net_config.backbone.input_width = 1 << blocks;
  net_config.head_dim = config.head_dim;
  net_config.class_count = config.classes;
  PyramidNet net(net_config, seed);

  LossConfig loss;
  loss.temperature = config.temperature;
  loss.level_count = config.levels;
  loss.class_count = config.classes;
  loss.teacher_gradient_blocked = config.teacher_gradient_blocked;

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (auto& head : net.heads()) {
    for (auto& v : head.fc_bias.value) v = 0.2 * (2.0 * unit(rng) - 1.0);
    for (auto& v : head.bn_gamma.value) v = 0.5 + unit(rng);
    for (auto& v : head.bn_beta.value) v = 0.3 * (2.0 * unit(rng) - 1.0);
    for (auto& v : head.cls_bias.value) v = 0.2 * (2.0 * unit(rng) - 1.0);
  }

  // redraw inputs until every ReLU input sits clear of the kink
  const auto batch = static_cast<std::size_t>(config.batch);
  LevelFeatures features;
  std::vector<int> labels(batch);
  LevelFeatures logits;
  const double margin_needed = 1e2 * config.step;
  bool clear = false;
  for (int attempt = 0; attempt < 200 && !clear; ++attempt) {
    features.assign(static_cast<std::size_t>(config.levels), {});
    for (auto& level : features) {
      level.assign(batch, std::vector<double>(static_cast<std::size_t>(config.feature_dim)));
      for (auto& row : level) {
        for (auto& v : row) v = 2.0 * unit(rng);
      }
    }
    for (auto& label : labels) label = static_cast<int>(rng() % static_cast<std::uint64_t>(config.classes));
    double margin = 0.0;
    HeadPassOptions probe{false, false, nullptr, &margin, &logits};
    net.head_stack_loss(features, labels, loss, probe, nullptr);
    clear = margin > margin_needed;
  }
  if (!clear) throw DomainError("gradcheck: could not draw a batch away from ReLU kinks");

  std::vector<std::vector<double>> teachers;
  if (config.teacher_gradient_blocked) {
    for (std::size_t b = 0; b < batch; ++b) {
      teachers.push_back(soften(logits.back()[b], config.temperature));
    }
  }
  const auto* frozen = config.teacher_gradient_blocked ? &teachers : nullptr;

  net.zero_grad();
  LevelFeatures feature_grads;
  net.head_stack_loss(features, labels, loss, HeadPassOptions{true, false, frozen}, &feature_grads);

  auto evaluate = [&]() {
    return net.head_stack_loss(features, labels, loss, HeadPassOptions{false, false, frozen}, nullptr).total;
  };
  GradcheckResult result;
  auto compare = [&](double analytic, double& coordinate, const std::string& name) {
    const double saved = coordinate;
    coordinate = saved + config.step;
    const double up = evaluate();
    coordinate = saved - config.step;
    const double down = evaluate();
    coordinate = saved;
    const double err = gradient_relative_error(analytic, (up - down) / (2.0 * config.step));
    ++result.checked;
    if (result.worst.empty() || err > result.max_relative_error) {
      result.max_relative_error = err;
      result.worst = name;
    }
  };

  // batch normalisation removes any shift of its input, so the bias feeding
  // it has an exactly zero derivative; central differences of it are pure
  // rounding noise, so it is compared against the exact value instead
  std::vector<const Param<double>*> shift_invariant;
  for (const auto& head : net.heads()) shift_invariant.push_back(&head.fc_bias);
  for (auto* p : net.head_params()) {
    const auto analytic = p->grad;
    const bool exact_zero = std::find(shift_invariant.begin(), shift_invariant.end(), p) != shift_invariant.end();
    for (std::size_t i = 0; i < p->size(); ++i) {
      const auto name = p->name + "[" + std::to_string(i) + "]";
      if (!exact_zero) {
        compare(analytic[i], p->value[i], name);
        continue;
      }
      const double err = gradient_relative_error(analytic[i], 0.0);
      ++result.checked;
      if (err > result.max_relative_error) {
        result.max_relative_error = err;
        result.worst = name;
      }
    }
  }
  for (std::size_t k = 0; k < features.size(); ++k) {
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t i = 0; i < features[k][b].size(); ++i) {
        compare(feature_grads[k][b][i], features[k][b][i],
                "feature[" + std::to_string(k) + "][" + std::to_string(b) + "][" + std::to_string(i) + "]");
      }
    }
  }

  // logits: the per-sample loss as a function of its K logit vectors
  for (std::size_t b = 0; b < batch; ++b) {
    std::vector<std::vector<double>> sample(static_cast<std::size_t>(config.levels));
    for (std::size_t k = 0; k < sample.size(); ++k) sample[k] = logits[k][b];
    const auto* teacher = frozen ? &teachers[b] : nullptr;
    std::vector<std::vector<double>> grads;
    loss_and_logit_gradients(sample, labels[b], loss, &grads, teacher);
    auto sample_loss = [&]() { return loss_and_logit_gradients(sample, labels[b], loss, nullptr, teacher).total; };
    for (std::size_t k = 0; k < sample.size(); ++k) {
      for (std::size_t c = 0; c < sample[k].size(); ++c) {
        const double saved = sample[k][c];
        sample[k][c] = saved + config.step;
        const double up = sample_loss();
        sample[k][c] = saved - config.step;
        const double down = sample_loss();
        sample[k][c] = saved;
        const double err = gradient_relative_error(grads[k][c], (up - down) / (2.0 * config.step));
        ++result.checked;
        if (err > result.max_relative_error) {
          result.max_relative_error = err;
          result.worst = "logit[" + std::to_string(b) + "][" + std::to_string(k) + "][" + std::to_string(c) + "]";
        }
      }
    }
  }
  return result;
}

}  // namespace clsa
