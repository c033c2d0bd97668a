#include "clsa/pyramid_net.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "clsa/errors.hpp"
#include "clsa/layers.hpp"
#include "clsa/parallel.hpp"

namespace clsa {

namespace {

constexpr std::size_t kChunkSamples = 8;

std::vector<nn::ConvShape> conv_shapes(const BackboneConfig& config, std::size_t block) {
  int channels = 3;
  int h = config.input_height;
  int w = config.input_width;
  for (std::size_t b = 0;; ++b) {
    const auto& spec = config.blocks[b];
    nn::ConvShape a{channels, h, w, spec.channels, spec.stride};
    nn::ConvShape c{spec.channels, a.out_height(), a.out_width(), spec.channels, 1};
    if (b == block) return {a, c};
    channels = spec.channels;
    h = a.out_height();
    w = a.out_width();
  }
}

template <typename T>
void fill_normal(std::vector<T>& values, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : values) v = static_cast<T>(dist(rng));
}

void relu_inplace(std::span<float> v) {
  for (float& x : v) x = std::max(x, 0.0f);
}

}  // namespace

std::vector<int> BackboneConfig::levels_bottom_up() const {
  std::vector<int> levels = selected_blocks;
  std::sort(levels.begin(), levels.end());
  return levels;
}

void BackboneConfig::validate() const {
  if (blocks.empty()) throw ContractError("BackboneConfig: at least one block required");
  for (const auto& b : blocks) {
    if (b.channels <= 0 || b.stride <= 0) {
      throw ContractError("BackboneConfig: block channels and stride must be positive");
    }
  }
  if (input_height <= 0 || input_width <= 0) {
    throw ContractError("BackboneConfig: input dimensions must be positive");
  }
  const int k = level_count();
  if (k < 1 || k > static_cast<int>(blocks.size())) {
    throw ContractError("BackboneConfig: selected_blocks must name 1..#blocks blocks");
  }
  // contiguous suffix: exactly the last K block numbers
  auto levels = levels_bottom_up();
  const int n = static_cast<int>(blocks.size());
  for (int i = 0; i < k; ++i) {
    if (levels[static_cast<std::size_t>(i)] != n - k + 1 + i) {
      throw ContractError("BackboneConfig: selected_blocks " + format_block_selection(selected_blocks) +
                          " is not a contiguous suffix of " + std::to_string(n) + " blocks");
    }
  }
  auto shapes = conv_shapes(*this, blocks.size() - 1);
  if (shapes[0].out_height() < 1 || shapes[0].out_width() < 1) {
    throw ContractError("BackboneConfig: input too small for the block plan");
  }
}

std::vector<int> parse_block_selection(const std::string& text) {
  std::vector<int> blocks;
  std::stringstream in(text);
  std::string part;
  while (std::getline(in, part, '-')) {
    try {
      std::size_t used = 0;
      const int v = std::stoi(part, &used);
      if (used != part.size() || v <= 0) throw std::invalid_argument(part);
      blocks.push_back(v);
    } catch (const std::exception&) {
      throw ContractError("bad block selection '" + text + "' (expected e.g. 5-4-3)");
    }
  }
  if (blocks.empty()) throw ContractError("empty block selection");
  return blocks;
}

std::string format_block_selection(const std::vector<int>& blocks) {
  std::string out;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (i) out += '-';
    out += std::to_string(blocks[i]);
  }
  return out;
}

void NetConfig::validate() const {
  backbone.validate();
  if (head_dim <= 0) throw ContractError("NetConfig: head_dim must be positive");
  if (class_count < 2) throw ContractError("NetConfig: class_count must be >= 2");
}

void to_json(nlohmann::json& j, const NetConfig& c) {
  nlohmann::json plan = nlohmann::json::array();
  for (const auto& b : c.backbone.blocks) plan.push_back({{"channels", b.channels}, {"stride", b.stride}});
  j = {{"block_channel_plan", plan},
       {"selected_blocks", format_block_selection(c.backbone.selected_blocks)},
       {"freeze_first_block", c.backbone.freeze_first_block},
       {"input_size", {c.backbone.input_height, c.backbone.input_width}},
       {"head_dim", c.head_dim},
       {"class_count", c.class_count}};
}

void from_json(const nlohmann::json& j, NetConfig& c) {
  if (j.contains("block_channel_plan")) {
    c.backbone.blocks.clear();
    for (const auto& b : j.at("block_channel_plan")) {
      c.backbone.blocks.push_back({b.at("channels").get<int>(), b.value("stride", 2)});
    }
  }
  if (j.contains("selected_blocks")) {
    c.backbone.selected_blocks = parse_block_selection(j.at("selected_blocks").get<std::string>());
  }
  c.backbone.freeze_first_block = j.value("freeze_first_block", c.backbone.freeze_first_block);
  if (j.contains("input_size")) {
    c.backbone.input_height = j.at("input_size").at(0).get<int>();
    c.backbone.input_width = j.at("input_size").at(1).get<int>();
  }
  c.head_dim = j.value("head_dim", c.head_dim);
  c.class_count = j.value("class_count", c.class_count);
}

std::vector<double> project_to_classes(std::span<const double> level_vector,
                                       std::span<const double> weight,
                                       std::span<const double> bias) {
  if (weight.size() != bias.size() * level_vector.size()) {
    throw ContractError("project_to_classes: head shape does not match (d, |Y|)");
  }
  std::vector<double> logits(bias.size());
  nn::linear_forward<double>(weight, bias, level_vector, logits);
  return logits;
}

std::vector<double> concat_descriptor(const std::vector<std::vector<double>>& levels) {
  if (levels.empty()) throw ContractError("concat_descriptor: no levels");
  std::vector<double> out;
  for (const auto& level : levels) {
    for (double v : level) {
      if (!std::isfinite(v)) throw ContractError("concat_descriptor: non-finite level entry");
    }
    out.insert(out.end(), level.begin(), level.end());
  }
  double norm_sq = 0.0;
  for (double v : out) norm_sq += v * v;
  if (!(norm_sq > 0.0)) throw DomainError("concat_descriptor: degenerate all-zero descriptor");
  const double inv = 1.0 / std::sqrt(norm_sq);
  for (double& v : out) v *= inv;
  return out;
}

struct PyramidNet::SampleTrace {
  std::span<const float> input;
  std::vector<std::vector<float>> mid;  // post-ReLU first conv, blocks >= 2
  std::vector<std::vector<float>> out;  // block outputs
};

PyramidNet::PyramidNet(NetConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const auto& bb = config_.backbone;
  for (std::size_t b = 0; b < bb.blocks.size(); ++b) {
    const auto shapes = conv_shapes(bb, b);
    const std::string prefix = "block" + std::to_string(b + 1);
    const int co = bb.blocks[b].channels;
    BackboneBlock block;
    block.conv_a_weight = Param<float>(prefix + ".conv_a.weight", {co, shapes[0].in_channels, 3, 3});
    block.conv_a_bias = Param<float>(prefix + ".conv_a.bias", {co});
    fill_normal(block.conv_a_weight.value, std::sqrt(2.0 / static_cast<double>(shapes[0].patch_size())), rng);
    if (b > 0) {
      block.conv_b_weight = Param<float>(prefix + ".conv_b.weight", {co, co, 3, 3});
      block.conv_b_bias = Param<float>(prefix + ".conv_b.bias", {co});
      fill_normal(block.conv_b_weight.value, std::sqrt(2.0 / static_cast<double>(shapes[1].patch_size())), rng);
    }
    if (b == 0 && bb.freeze_first_block) {
      block.conv_a_weight.frozen = true;
      block.conv_a_bias.frozen = true;
    }
    blocks_.push_back(std::move(block));
  }
  const int d = config_.head_dim;
  const int classes = config_.class_count;
  for (int block : bb.levels_bottom_up()) {
    const int c = bb.blocks[static_cast<std::size_t>(block - 1)].channels;
    const std::string prefix = "head.block" + std::to_string(block);
    LevelHead head;
    head.block = block;
    head.fc_weight = Param<double>(prefix + ".fc.weight", {d, c});
    head.fc_bias = Param<double>(prefix + ".fc.bias", {d});
    head.bn_gamma = Param<double>(prefix + ".bn.weight", {d}, false);
    head.bn_beta = Param<double>(prefix + ".bn.bias", {d}, false);
    head.cls_weight = Param<double>(prefix + ".cls.weight", {classes, d});
    head.cls_bias = Param<double>(prefix + ".cls.bias", {classes});
    fill_normal(head.fc_weight.value, std::sqrt(2.0 / c), rng);
    fill_normal(head.cls_weight.value, std::sqrt(2.0 / d), rng);
    std::fill(head.bn_gamma.value.begin(), head.bn_gamma.value.end(), 1.0);
    head.running_mean.assign(static_cast<std::size_t>(d), 0.0);
    head.running_var.assign(static_cast<std::size_t>(d), 1.0);
    heads_.push_back(std::move(head));
  }
}

std::size_t PyramidNet::input_size() const {
  return 3u * static_cast<std::size_t>(config_.backbone.input_height) *
         static_cast<std::size_t>(config_.backbone.input_width);
}

std::vector<int> PyramidNet::level_feature_dims() const {
  std::vector<int> dims;
  for (const auto& head : heads_) {
    dims.push_back(config_.backbone.blocks[static_cast<std::size_t>(head.block - 1)].channels);
  }
  return dims;
}

void PyramidNet::backbone_forward(std::span<const float> image, SampleTrace& trace) const {
  if (image.size() != input_size()) {
    throw ContractError("forward_pyramid: image has " + std::to_string(image.size()) +
                        " values, config expects 3x" + std::to_string(config_.backbone.input_height) +
                        "x" + std::to_string(config_.backbone.input_width));
  }
  const auto& bb = config_.backbone;
  trace.input = image;
  trace.mid.resize(bb.blocks.size());
  trace.out.resize(bb.blocks.size());
  std::vector<float> scratch;
  std::span<const float> input = image;
  for (std::size_t b = 0; b < bb.blocks.size(); ++b) {
    const auto shapes = conv_shapes(bb, b);
    const auto& block = blocks_[b];
    if (b == 0) {
      trace.out[b].resize(shapes[0].output_size());
      nn::conv3x3_forward<float>(shapes[0], block.conv_a_weight.value, block.conv_a_bias.value,
                                 input, trace.out[b], scratch);
      relu_inplace(trace.out[b]);
    } else {
      auto& mid = trace.mid[b];
      auto& out = trace.out[b];
      mid.resize(shapes[0].output_size());
      out.resize(shapes[1].output_size());
      nn::conv3x3_forward<float>(shapes[0], block.conv_a_weight.value, block.conv_a_bias.value,
                                 input, mid, scratch);
      relu_inplace(mid);
      nn::conv3x3_forward<float>(shapes[1], block.conv_b_weight.value, block.conv_b_bias.value,
                                 mid, out, scratch);
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(out[i] + mid[i], 0.0f);
    }
    input = trace.out[b];
  }
}

void PyramidNet::backbone_backward(const SampleTrace& trace,
                                   const std::vector<std::vector<float>>& pooled_grads,
                                   std::vector<std::vector<float>>& grads) const {
  const auto& bb = config_.backbone;
  const std::size_t n = bb.blocks.size();
  const std::size_t lowest = bb.freeze_first_block ? 1 : 0;
  std::vector<std::vector<float>> dout(n);
  for (std::size_t b = lowest; b < n; ++b) dout[b].assign(trace.out[b].size(), 0.0f);
  // pooled gradients spread uniformly over each channel plane
  for (std::size_t k = 0; k < heads_.size(); ++k) {
    const auto b = static_cast<std::size_t>(heads_[k].block - 1);
    if (b < lowest) continue;
    const int channels = bb.blocks[b].channels;
    const std::size_t plane = trace.out[b].size() / static_cast<std::size_t>(channels);
    const float inv = 1.0f / static_cast<float>(plane);
    for (int c = 0; c < channels; ++c) {
      const float g = pooled_grads[k][static_cast<std::size_t>(c)] * inv;
      float* dst = dout[b].data() + static_cast<std::size_t>(c) * plane;
      for (std::size_t i = 0; i < plane; ++i) dst[i] += g;
    }
  }
  std::vector<float> scratch;
  std::vector<float> scratch_grad;
  std::vector<float> dpre;
  std::vector<float> dmid;
  for (std::size_t b = n; b-- > lowest;) {
    const auto shapes = conv_shapes(bb, b);
    const auto& block = blocks_[b];
    const auto& out = trace.out[b];
    dpre.resize(out.size());
    for (std::size_t i = 0; i < out.size(); ++i) dpre[i] = out[i] > 0.0f ? dout[b][i] : 0.0f;
    std::span<const float> input = b == 0 ? trace.input : std::span<const float>(trace.out[b - 1]);
    std::span<float> input_grad = (b > lowest) ? std::span<float>(dout[b - 1]) : std::span<float>();
    if (b == 0) {
      nn::conv3x3_backward<float>(shapes[0], block.conv_a_weight.value, input, dpre, grads[0],
                                  grads[1], input_grad, scratch, scratch_grad);
      continue;
    }
    const auto& mid = trace.mid[b];
    dmid.assign(mid.size(), 0.0f);
    nn::conv3x3_backward<float>(shapes[1], block.conv_b_weight.value, mid, dpre, grads[4 * b + 2],
                                grads[4 * b + 3], dmid, scratch, scratch_grad);
    for (std::size_t i = 0; i < mid.size(); ++i) {
      dmid[i] = mid[i] > 0.0f ? dmid[i] + dpre[i] : 0.0f;
    }
    nn::conv3x3_backward<float>(shapes[0], block.conv_a_weight.value, input, dmid, grads[4 * b],
                                grads[4 * b + 1], input_grad, scratch, scratch_grad);
  }
}

std::vector<std::vector<double>> PyramidNet::pooled_features(std::span<const float> image) const {
  SampleTrace trace;
  backbone_forward(image, trace);
  std::vector<std::vector<double>> features;
  for (const auto& head : heads_) {
    const auto& out = trace.out[static_cast<std::size_t>(head.block - 1)];
    const int channels = config_.backbone.blocks[static_cast<std::size_t>(head.block - 1)].channels;
    const std::size_t plane = out.size() / static_cast<std::size_t>(channels);
    std::vector<double> pooled(static_cast<std::size_t>(channels));
    for (int c = 0; c < channels; ++c) {
      const float s = simd::sum(std::span<const float>(out.data() + c * plane, plane));
      pooled[static_cast<std::size_t>(c)] = static_cast<double>(s) / static_cast<double>(plane);
    }
    features.push_back(std::move(pooled));
  }
  return features;
}

std::pair<PyramidDescriptor, SoftPrediction> PyramidNet::forward_pyramid(
    std::span<const float> image, double temperature) const {
  const auto features = pooled_features(image);
  PyramidDescriptor descriptor;
  descriptor.level_count = level_count();
  std::vector<std::vector<double>> logits;
  for (std::size_t k = 0; k < heads_.size(); ++k) {
    const auto& head = heads_[k];
    std::vector<double> z(head.fc_bias.size());
    nn::linear_forward<double>(head.fc_weight.value, head.fc_bias.value, features[k], z);
    for (std::size_t j = 0; j < z.size(); ++j) {
      const double zhat = (z[j] - head.running_mean[j]) / std::sqrt(head.running_var[j] + kBatchNormEpsilon);
      z[j] = std::max(0.0, head.bn_gamma.value[j] * zhat + head.bn_beta.value[j]);
    }
    logits.push_back(project_to_classes(z, head.cls_weight.value, head.cls_bias.value));
    descriptor.levels.push_back(std::move(z));
  }
  bool any_positive = false;
  for (const auto& level : descriptor.levels) {
    any_positive = any_positive || std::any_of(level.begin(), level.end(), [](double v) { return v > 0.0; });
  }
  if (any_positive) descriptor.concat = concat_descriptor(descriptor.levels);
  return {std::move(descriptor), make_soft_prediction(std::move(logits), temperature)};
}

LossBreakdown PyramidNet::head_stack_loss(const LevelFeatures& features, std::span<const int> labels,
                                          const LossConfig& loss, const HeadPassOptions& options,
                                          LevelFeatures* feature_grads) {
  const std::size_t levels = heads_.size();
  if (features.size() != levels || static_cast<int>(levels) != loss.level_count) {
    throw ContractError("head_stack_loss: level count mismatch");
  }
  if (loss.class_count != config_.class_count) {
    throw ContractError("head_stack_loss: LossConfig class_count differs from the network");
  }
  const std::size_t batch = labels.size();
  if (batch == 0) throw ContractError("head_stack_loss: empty batch");
  const auto dims = level_feature_dims();
  for (std::size_t k = 0; k < levels; ++k) {
    if (features[k].size() != batch) throw ContractError("head_stack_loss: batch size mismatch");
    for (const auto& f : features[k]) {
      if (f.size() != static_cast<std::size_t>(dims[k])) {
        throw ContractError("head_stack_loss: feature width mismatch");
      }
    }
  }
  const auto d = static_cast<std::size_t>(config_.head_dim);
  const auto classes = static_cast<std::size_t>(config_.class_count);
  const double inv_batch = 1.0 / static_cast<double>(batch);

  struct LevelCache {
    std::vector<std::vector<double>> zhat, y, x, logits;
    std::vector<double> inv_std;
  };
  std::vector<LevelCache> caches(levels);
  for (std::size_t k = 0; k < levels; ++k) {
    auto& head = heads_[k];
    auto& cache = caches[k];
    std::vector<std::vector<double>> z(batch, std::vector<double>(d));
    for (std::size_t b = 0; b < batch; ++b) {
      nn::linear_forward<double>(head.fc_weight.value, head.fc_bias.value, features[k][b], z[b]);
    }
    std::vector<double> mean(d, 0.0), var(d, 0.0);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t j = 0; j < d; ++j) mean[j] += z[b][j];
    }
    for (double& m : mean) m *= inv_batch;
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t j = 0; j < d; ++j) var[j] += (z[b][j] - mean[j]) * (z[b][j] - mean[j]);
    }
    for (double& v : var) v *= inv_batch;
    cache.inv_std.resize(d);
    for (std::size_t j = 0; j < d; ++j) cache.inv_std[j] = 1.0 / std::sqrt(var[j] + kBatchNormEpsilon);
    if (options.update_running_stats) {
      const double unbias = batch > 1 ? static_cast<double>(batch) / static_cast<double>(batch - 1) : 1.0;
      for (std::size_t j = 0; j < d; ++j) {
        head.running_mean[j] = (1.0 - kBatchNormMomentum) * head.running_mean[j] + kBatchNormMomentum * mean[j];
        head.running_var[j] = (1.0 - kBatchNormMomentum) * head.running_var[j] + kBatchNormMomentum * var[j] * unbias;
      }
    }
    cache.zhat.assign(batch, std::vector<double>(d));
    cache.y.assign(batch, std::vector<double>(d));
    cache.x.assign(batch, std::vector<double>(d));
    cache.logits.assign(batch, std::vector<double>(classes));
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t j = 0; j < d; ++j) {
        cache.zhat[b][j] = (z[b][j] - mean[j]) * cache.inv_std[j];
        cache.y[b][j] = head.bn_gamma.value[j] * cache.zhat[b][j] + head.bn_beta.value[j];
        cache.x[b][j] = std::max(0.0, cache.y[b][j]);
      }
      nn::linear_forward<double>(head.cls_weight.value, head.cls_bias.value, cache.x[b], cache.logits[b]);
    }
  }

  if (options.min_relu_margin) {
    double margin = std::numeric_limits<double>::infinity();
    for (const auto& cache : caches) {
      for (const auto& row : cache.y) {
        for (double v : row) margin = std::min(margin, std::abs(v));
      }
    }
    *options.min_relu_margin = margin;
  }
  if (options.logits) {
    options.logits->clear();
    for (const auto& cache : caches) options.logits->push_back(cache.logits);
  }

  LossBreakdown mean_loss;
  mean_loss.clsa_per_level.assign(levels > 0 ? levels - 1 : 0, 0.0);
  std::vector<std::vector<std::vector<double>>> dlogits(batch);  // [sample][level][class]
  for (std::size_t b = 0; b < batch; ++b) {
    std::vector<std::vector<double>> sample_logits(levels);
    for (std::size_t k = 0; k < levels; ++k) sample_logits[k] = caches[k].logits[b];
    const auto* frozen = options.frozen_teachers ? &(*options.frozen_teachers)[b] : nullptr;
    const auto breakdown = loss_and_logit_gradients(sample_logits, labels[b], loss,
                                                    options.compute_gradients ? &dlogits[b] : nullptr, frozen);
    if (!std::isfinite(breakdown.total)) throw DomainError("head_stack_loss: non-finite loss");
    mean_loss.ce += breakdown.ce * inv_batch;
    mean_loss.total += breakdown.total * inv_batch;
    for (std::size_t s = 0; s < breakdown.clsa_per_level.size(); ++s) {
      mean_loss.clsa_per_level[s] += breakdown.clsa_per_level[s] * inv_batch;
    }
  }
  if (!options.compute_gradients) return mean_loss;

  if (feature_grads) {
    feature_grads->assign(levels, {});
    for (std::size_t k = 0; k < levels; ++k) {
      (*feature_grads)[k].assign(batch, std::vector<double>(static_cast<std::size_t>(dims[k]), 0.0));
    }
  }
  for (std::size_t k = 0; k < levels; ++k) {
    auto& head = heads_[k];
    const auto& cache = caches[k];
    std::vector<std::vector<double>> dzhat(batch, std::vector<double>(d));
    std::vector<double> dy(d);
    std::vector<double> dx(d);
    for (std::size_t b = 0; b < batch; ++b) {
      std::vector<double> dl = dlogits[b][k];
      for (double& g : dl) g *= inv_batch;
      std::fill(dx.begin(), dx.end(), 0.0);
      nn::linear_backward<double>(head.cls_weight.value, cache.x[b], dl, head.cls_weight.grad,
                                  head.cls_bias.grad, dx);
      for (std::size_t j = 0; j < d; ++j) {
        dy[j] = cache.y[b][j] > 0.0 ? dx[j] : 0.0;
        head.bn_gamma.grad[j] += dy[j] * cache.zhat[b][j];
        head.bn_beta.grad[j] += dy[j];
        dzhat[b][j] = dy[j] * head.bn_gamma.value[j];
      }
    }
    std::vector<double> sum_dzhat(d, 0.0), sum_dzhat_zhat(d, 0.0);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t j = 0; j < d; ++j) {
        sum_dzhat[j] += dzhat[b][j];
        sum_dzhat_zhat[j] += dzhat[b][j] * cache.zhat[b][j];
      }
    }
    std::vector<double> dz(d);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t j = 0; j < d; ++j) {
        dz[j] = cache.inv_std[j] * inv_batch *
                (static_cast<double>(batch) * dzhat[b][j] - sum_dzhat[j] - cache.zhat[b][j] * sum_dzhat_zhat[j]);
      }
      std::span<double> df;
      if (feature_grads) df = (*feature_grads)[k][b];
      nn::linear_backward<double>(head.fc_weight.value, features[k][b], dz, head.fc_weight.grad,
                                  head.fc_bias.grad, df);
    }
  }
  return mean_loss;
}

LossBreakdown PyramidNet::accumulate_batch_gradients(std::span<const std::span<const float>> images,
                                                     std::span<const int> labels,
                                                     const LossConfig& loss, int jobs) {
  const std::size_t batch = images.size();
  if (batch == 0 || labels.size() != batch) {
    throw ContractError("accumulate_batch_gradients: images and labels must be non-empty and aligned");
  }
  zero_grad();
  const std::size_t levels = heads_.size();
  const std::size_t chunks = (batch + kChunkSamples - 1) / kChunkSamples;
  std::vector<SampleTrace> traces(batch);
  LevelFeatures features(levels, std::vector<std::vector<double>>(batch));
  parallel_for(chunks, jobs, [&](std::size_t chunk) {
    const std::size_t end = std::min(batch, (chunk + 1) * kChunkSamples);
    for (std::size_t i = chunk * kChunkSamples; i < end; ++i) {
      backbone_forward(images[i], traces[i]);
      for (std::size_t k = 0; k < levels; ++k) {
        const auto blk = static_cast<std::size_t>(heads_[k].block - 1);
        const auto& out = traces[i].out[blk];
        const auto channels = static_cast<std::size_t>(config_.backbone.blocks[blk].channels);
        const std::size_t plane = out.size() / channels;
        auto& pooled = features[k][i];
        pooled.resize(channels);
        for (std::size_t c = 0; c < channels; ++c) {
          pooled[c] = static_cast<double>(simd::sum(std::span<const float>(out.data() + c * plane, plane))) /
                      static_cast<double>(plane);
        }
      }
    }
  });

  LevelFeatures feature_grads;
  const auto result = head_stack_loss(features, labels, loss, HeadPassOptions{}, &feature_grads);

  const std::size_t n_blocks = blocks_.size();
  std::vector<std::vector<std::vector<float>>> chunk_grads(chunks);
  parallel_for(chunks, jobs, [&](std::size_t chunk) {
    auto& grads = chunk_grads[chunk];
    grads.resize(4 * n_blocks);
    for (std::size_t b = 0; b < n_blocks; ++b) {
      grads[4 * b].assign(blocks_[b].conv_a_weight.size(), 0.0f);
      grads[4 * b + 1].assign(blocks_[b].conv_a_bias.size(), 0.0f);
      grads[4 * b + 2].assign(blocks_[b].conv_b_weight.size(), 0.0f);
      grads[4 * b + 3].assign(blocks_[b].conv_b_bias.size(), 0.0f);
    }
    const std::size_t end = std::min(batch, (chunk + 1) * kChunkSamples);
    std::vector<std::vector<float>> pooled_grads(levels);
    for (std::size_t i = chunk * kChunkSamples; i < end; ++i) {
      for (std::size_t k = 0; k < levels; ++k) {
        const auto& g = feature_grads[k][i];
        pooled_grads[k].assign(g.begin(), g.end());
      }
      backbone_backward(traces[i], pooled_grads, grads);
    }
  });
  for (std::size_t chunk = 0; chunk < chunks; ++chunk) {
    for (std::size_t b = 0; b < n_blocks; ++b) {
      Param<float>* params[4] = {&blocks_[b].conv_a_weight, &blocks_[b].conv_a_bias,
                                 &blocks_[b].conv_b_weight, &blocks_[b].conv_b_bias};
      for (std::size_t p = 0; p < 4; ++p) {
        if (params[p]->frozen) continue;
        simd::axpy(1.0f, std::span<const float>(chunk_grads[chunk][4 * b + p]),
                   std::span<float>(params[p]->grad));
      }
    }
  }
  return result;
}

void PyramidNet::zero_grad() {
  for (auto* p : backbone_params()) std::fill(p->grad.begin(), p->grad.end(), 0.0f);
  for (auto* p : head_params()) std::fill(p->grad.begin(), p->grad.end(), 0.0);
}

std::vector<Param<float>*> PyramidNet::backbone_params() {
  std::vector<Param<float>*> out;
  for (auto& b : blocks_) {
    for (auto* p : {&b.conv_a_weight, &b.conv_a_bias, &b.conv_b_weight, &b.conv_b_bias}) {
      if (p->size() > 0) out.push_back(p);
    }
  }
  return out;
}

std::vector<Param<double>*> PyramidNet::head_params() {
  std::vector<Param<double>*> out;
  for (auto& h : heads_) {
    for (auto* p : {&h.fc_weight, &h.fc_bias, &h.bn_gamma, &h.bn_beta, &h.cls_weight, &h.cls_bias}) {
      out.push_back(p);
    }
  }
  return out;
}

std::vector<const Param<float>*> PyramidNet::backbone_params() const {
  auto params = const_cast<PyramidNet*>(this)->backbone_params();
  return {params.begin(), params.end()};
}

std::vector<const Param<double>*> PyramidNet::head_params() const {
  auto params = const_cast<PyramidNet*>(this)->head_params();
  return {params.begin(), params.end()};
}

}  // namespace clsa
