#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mctseg/ops.hpp"
#include "mctseg/rng.hpp"
#include "mctseg/tensor.hpp"

namespace mctseg {

/// Stride and dilation of one residual stage. When a stage is dilated its
/// first block still runs at the previous stage's dilation.
struct StagePlan {
  std::size_t stride = 1;
  std::size_t dilation = 1;
  bool operator==(const StagePlan&) const = default;
};

/// Declarative description of an FCN with a bottleneck-ResNet backbone.
struct ModelSpec {
  std::size_t num_classes = 6;
  std::array<std::size_t, 4> block_counts{3, 4, 23, 3};
  std::size_t base_width = 64;
  std::array<StagePlan, 4> stages{{{1, 1}, {2, 1}, {1, 2}, {1, 4}}};
  double head_dropout = 0.1;

  /// ResNet-101 backbone, output stride 8.
  static ModelSpec resnet101(std::size_t num_classes = 6);
  /// One block per stage; for desk-scale experiments and tests.
  static ModelSpec tiny(std::size_t num_classes, std::size_t base_width = 16);

  void validate() const;

  std::size_t stage_width(std::size_t stage) const { return base_width << stage; }
  std::size_t stage_out_channels(std::size_t stage) const { return stage_width(stage) * kExpansion; }
  std::size_t backbone_channels() const { return stage_out_channels(3); }
  std::size_t head_channels() const { return backbone_channels() / 4; }

  bool operator==(const ModelSpec&) const = default;

  static constexpr std::size_t kExpansion = 4;
  static constexpr std::size_t kMinInputExtent = 32;
};

template <typename T>
struct Conv {
  Tensor<T> weight;
  Tensor<T> bias;  // undefined when params.has_bias is false
  ConvParams params;

  std::size_t parameter_count() const { return weight.numel() + (bias.defined() ? bias.numel() : 0); }
};

template <typename T>
struct Bottleneck {
  Conv<T> conv1;
  BatchNorm<T> bn1;
  Conv<T> conv2;
  BatchNorm<T> bn2;
  Conv<T> conv3;
  BatchNorm<T> bn3;
  std::optional<Conv<T>> down_conv;
  std::optional<BatchNorm<T>> down_bn;

  std::size_t parameter_count() const;
};

/// One serializable tensor of model state (parameter or running statistic).
template <typename T>
struct StateEntry {
  std::string name;
  Shape shape;
  std::span<T> values;
  bool trainable;
};

template <typename T>
struct NamedParameter {
  std::string name;
  Tensor<T> tensor;
};

/// Output shape of one traced layer, recorded during forward.
struct LayerRecord {
  std::string path;
  Shape shape;
};
using ShapeTrace = std::vector<LayerRecord>;

/// Instantiated FCN. Move-only: parameters are shared tensor handles, so an
/// independent copy must be requested with clone().
template <typename T>
class Model {
 public:
  ModelSpec spec;
  Mode mode = Mode::train;

  Conv<T> stem_conv;
  BatchNorm<T> stem_bn;
  std::array<std::vector<Bottleneck<T>>, 4> layers;
  Conv<T> head_conv;
  BatchNorm<T> head_bn;
  Conv<T> classifier;

  Model() = default;
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  Model clone() const;

  /// Trainable tensors in stable serialization order.
  std::vector<NamedParameter<T>> parameters() const;
  std::size_t parameter_count() const;

  /// Parameters and BN running statistics, named `<path>.weight`, `<path>.bias`,
  /// `<path>.running_mean`, `<path>.running_var`.
  std::vector<StateEntry<T>> state();

  void zero_grad();
};

template <typename T>
Model<T> build_fcn(const ModelSpec& spec, Rng& rng);

/// Forward pass honoring `model.mode`. Train mode updates BN running
/// statistics and needs `rng` for head dropout.
template <typename T>
Tensor<T> forward(Model<T>& model, const Tensor<T>& input, Rng* rng = nullptr, ShapeTrace* trace = nullptr);

/// Eval-mode forward without gradient recording; safe to call concurrently.
template <typename T>
Tensor<T> infer(const Model<T>& model, const Tensor<T>& input, ShapeTrace* trace = nullptr);

/// Reinitializes only the final 1x1 classifier for a new class count.
template <typename T>
void replace_classifier(Model<T>& model, std::size_t new_num_classes, Rng& rng);

/// Shapes every traced layer would produce, without running the network.
ShapeTrace infer_shapes(const ModelSpec& spec, std::size_t batch, std::size_t height, std::size_t width);

struct LayerRow {
  std::string path;
  std::string type;
  std::size_t depth = 0;
  Shape output;
  std::optional<std::size_t> params;
};

struct LayerTable {
  std::vector<LayerRow> rows;
  std::size_t total_params = 0;

  const LayerRow* find(const std::string& path) const;
  /// Aligned text with columns: layer path, output shape, param count.
  std::string render() const;
};

template <typename T>
LayerTable summarize(const Model<T>& model, std::size_t input_h, std::size_t input_w);

/// "51,941,446"
std::string group_thousands(std::size_t value);

// Weight file ("FCNW" v1), all integers and floats little-endian:
//   "FCNW" | u32 version | u32 header_len | header text | u32 tensor_count |
//   per tensor: u32 name_len | name | u32 rank | u64 dims[rank] | f32 data[]
// The header text holds `num_classes=`, `block_counts=` and `base_width=` lines.

template <typename T>
void save_weights(Model<T>& model, const std::filesystem::path& path);

/// Loads a model whose spec is taken from the file header.
template <typename T>
Model<T> load_weights(const std::filesystem::path& path);

struct LoadOptions {
  /// When false, a classifier whose class count differs from the requested
  /// spec is skipped and freshly initialized from `seed`.
  bool strict = true;
  std::uint64_t seed = 0;
};

template <typename T>
Model<T> load_weights(const std::filesystem::path& path, const ModelSpec& spec, const LoadOptions& options = {});

/// Spec fields stored in a weight file header.
ModelSpec read_weight_spec(const std::filesystem::path& path);

}  // namespace mctseg
