#pragma once
// In-network feature pyramid for identity matching.
//
// A residual-style backbone of B blocks, each halving spatial size. The
// trailing K blocks ("5-4-3" style selection, block numbers 1-based) feed one
// head each:
//
//   block output -> global average pool -> FC(d) -> batch norm -> ReLU  = x^k
//   x^k -> FC(|Y|)                                                      = p^k
//
// Levels are ordered bottom-up, so level index K-1 is the top (deepest)
// block. The deployment descriptor is the L2-normalised concatenation
// x^1 || ... || x^K.
//
// The backbone runs in float through the SIMD kernels; heads and losses run
// in double so their gradients can be checked by finite differences.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "clsa/losses.hpp"

namespace clsa {

struct BlockSpec {
  int channels = 0;
  int stride = 2;
  bool operator==(const BlockSpec&) const = default;
};

struct BackboneConfig {
  std::vector<BlockSpec> blocks = {{8, 2}, {16, 2}, {32, 2}, {64, 2}, {128, 2}};
  // 1-based block numbers, e.g. {5, 4, 3}; must be a contiguous suffix.
  std::vector<int> selected_blocks = {5, 4, 3};
  bool freeze_first_block = true;
  int input_height = 256;
  int input_width = 128;

  int level_count() const { return static_cast<int>(selected_blocks.size()); }
  // Selected block numbers in ascending order (level 1 first).
  std::vector<int> levels_bottom_up() const;
  void validate() const;
  bool operator==(const BackboneConfig&) const = default;
};

// "5-4-3" -> {5, 4, 3}
std::vector<int> parse_block_selection(const std::string& text);
std::string format_block_selection(const std::vector<int>& blocks);

struct NetConfig {
  BackboneConfig backbone;
  int head_dim = 256;
  int class_count = 2;

  void validate() const;
  bool operator==(const NetConfig&) const = default;
};

void to_json(nlohmann::json& j, const NetConfig& c);
void from_json(const nlohmann::json& j, NetConfig& c);

inline constexpr double kBatchNormMomentum = 0.1;
inline constexpr double kBatchNormEpsilon = 1e-5;

template <typename T>
struct Param {
  std::string name;
  std::vector<int> shape;
  std::vector<T> value;
  std::vector<T> grad;
  std::vector<T> velocity;
  bool decay = true;    // weight decay applies
  bool frozen = false;  // never updated

  Param() = default;
  Param(std::string n, std::vector<int> s, bool d = true) : name(std::move(n)), shape(std::move(s)), decay(d) {
    std::size_t count = 1;
    for (int dim : shape) count *= static_cast<std::size_t>(dim);
    value.assign(count, T(0));
    grad.assign(count, T(0));
    velocity.assign(count, T(0));
  }
  std::size_t size() const { return value.size(); }
};

struct PyramidDescriptor {
  std::vector<std::vector<double>> levels;  // x^1..x^K, post-ReLU
  std::vector<double> concat;               // unit-norm x^1 || ... || x^K
  int level_count = 0;
};

// Affine map of one level vector into class logits: W x + b with W [|Y| x d].
std::vector<double> project_to_classes(std::span<const double> level_vector,
                                       std::span<const double> weight,
                                       std::span<const double> bias);

// Ordered concatenation, L2-normalised. DomainError on an all-zero input.
std::vector<double> concat_descriptor(const std::vector<std::vector<double>>& levels);

// features[level][sample] -> pooled block output for that level.
using LevelFeatures = std::vector<std::vector<std::vector<double>>>;

struct LevelHead {
  int block = 0;  // backbone block number feeding this head
  Param<double> fc_weight;
  Param<double> fc_bias;
  Param<double> bn_gamma;
  Param<double> bn_beta;
  Param<double> cls_weight;
  Param<double> cls_bias;
  std::vector<double> running_mean;
  std::vector<double> running_var;
};

struct BackboneBlock {
  Param<float> conv_a_weight;
  Param<float> conv_a_bias;
  Param<float> conv_b_weight;  // empty for the stem block
  Param<float> conv_b_bias;
};

struct HeadPassOptions {
  bool compute_gradients = true;
  bool update_running_stats = true;
  // Per-sample replacement teacher distributions, see loss_and_logit_gradients.
  const std::vector<std::vector<double>>* frozen_teachers = nullptr;
  // Optional outputs: smallest |pre-activation| at any ReLU, and the logits
  // as [level][sample][class].
  double* min_relu_margin = nullptr;
  LevelFeatures* logits = nullptr;
};

class PyramidNet {
 public:
  PyramidNet(NetConfig config, std::uint64_t seed);

  const NetConfig& config() const { return config_; }
  int level_count() const { return config_.backbone.level_count(); }
  std::size_t input_size() const;
  // Pooled channel count feeding each level, bottom-up.
  std::vector<int> level_feature_dims() const;

  // Inference mode (normalisation uses running statistics). `image` is a
  // planar 3 x H x W normalised crop of the configured input size.
  std::pair<PyramidDescriptor, SoftPrediction> forward_pyramid(std::span<const float> image,
                                                               double temperature) const;

  // Pooled per-level features for one image (inference path of the backbone).
  std::vector<std::vector<double>> pooled_features(std::span<const float> image) const;

  // Zeroes gradients, runs a training-mode forward/backward over the batch
  // and leaves d(mean loss)/d(param) in every Param::grad. Returns the batch
  // mean of the per-sample breakdowns. Samples are processed in fixed chunks
  // reduced in order, so the result does not depend on `jobs`.
  LossBreakdown accumulate_batch_gradients(std::span<const std::span<const float>> images,
                                           std::span<const int> labels,
                                           const LossConfig& loss, int jobs);

  // Head stack in training mode on given pooled features. Adds gradients of
  // the batch-mean loss to head Param::grad (caller zeroes them) and writes
  // d(mean loss)/d(features) into feature_grads when non-null.
  LossBreakdown head_stack_loss(const LevelFeatures& features, std::span<const int> labels,
                                const LossConfig& loss, const HeadPassOptions& options,
                                LevelFeatures* feature_grads);

  void zero_grad();

  std::vector<Param<float>*> backbone_params();
  std::vector<Param<double>*> head_params();
  std::vector<const Param<float>*> backbone_params() const;
  std::vector<const Param<double>*> head_params() const;

  std::vector<LevelHead>& heads() { return heads_; }
  const std::vector<LevelHead>& heads() const { return heads_; }
  std::vector<BackboneBlock>& blocks() { return blocks_; }
  const std::vector<BackboneBlock>& blocks() const { return blocks_; }

 private:
  struct SampleTrace;
  void backbone_forward(std::span<const float> image, SampleTrace& trace) const;
  void backbone_backward(const SampleTrace& trace,
                         const std::vector<std::vector<float>>& pooled_grads,
                         std::vector<std::vector<float>>& grads) const;

  NetConfig config_;
  std::vector<BackboneBlock> blocks_;
  std::vector<LevelHead> heads_;
};

// Checkpoint container:
//   "CLSACKPT" | u32 version | u32 meta length | meta JSON (config echo,
//   identity map, extra fields) | u32 tensor count | tensors
// Each tensor: u16 name length | name | u8 dtype (0 f32, 1 f64) | u8 rank |
// u32 dims[rank] | little-endian values. Normalisation running statistics are
// stored as "<head>.bn.running_mean" / "<head>.bn.running_var".
inline constexpr char kCheckpointMagic[8] = {'C', 'L', 'S', 'A', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  PyramidNet net;
  std::vector<std::int64_t> identity_map;  // dense class -> original label
  nlohmann::json extra;                    // free-form metadata
};

void save_checkpoint(const PyramidNet& net, const std::vector<std::int64_t>& identity_map,
                     const nlohmann::json& extra, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace clsa
