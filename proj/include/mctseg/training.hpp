#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mctseg/image.hpp"
#include "mctseg/metrics.hpp"
#include "mctseg/model.hpp"

namespace mctseg {

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t epochs = 200;
  /// Samples whose gradients are accumulated before one optimizer step.
  std::size_t batch_size = 1;
  std::uint64_t seed = 0;
  double scale_factor = 1.0;
  bool augment = true;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
  /// `key = value` lines, one per field.
  std::string to_text() const;
};

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::uint64_t t = 0;
};

/// One Adam update over every parameter, then clears the gradients. Missing
/// gradients count as zero. Throws NumericalError naming the first parameter
/// with a non-finite gradient, before anything is modified.
template <typename T>
void adam_step(const std::vector<NamedParameter<T>>& params, AdamState<T>& state, const TrainConfig& config);

// --- augmentation ----------------------------------------------------------

/// Flips first (horizontal, then vertical), then `quarter_turns` clockwise
/// 90-degree rotations.
struct AugmentOp {
  bool flip_horizontal = false;
  bool flip_vertical = false;
  int quarter_turns = 0;
};

AugmentOp draw_augment(Rng& rng);
GrayImage apply_augment(const GrayImage& image, const AugmentOp& op);
LabelMask apply_augment(const LabelMask& mask, const AugmentOp& op);
SamplePair apply_augment(const SamplePair& pair, const AugmentOp& op);
SamplePair augment(const SamplePair& pair, Rng& rng);

// --- protocol --------------------------------------------------------------

/// Sorted by id; even positions train, odd positions validate.
std::pair<std::vector<SamplePair>, std::vector<SamplePair>> split_train_val(std::vector<SamplePair> pairs);

struct LossRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0;
  double val_loss = 0;
};
using LossHistory = std::vector<LossRecord>;

std::string loss_history_csv(const LossHistory& history);

struct TrainOptions {
  std::optional<std::filesystem::path> initial_weights;
  /// Receives final.fcnw, best.fcnw, their .meta sidecars and loss_history.csv.
  std::optional<std::filesystem::path> out_dir;
  std::function<void(const LossRecord&)> on_epoch;
};

struct TrainResult {
  Model<float> model;
  Model<float> best_model;
  LossHistory history;
  std::size_t best_epoch = 0;
  double best_val_loss = 0;
  std::vector<std::filesystem::path> checkpoints;
};

/// Mean loss over `pairs` in eval mode without gradient recording.
double validation_loss(const Model<float>& model, const std::vector<SamplePair>& pairs, const TrainConfig& config);

/// Half/half split, then per epoch: seeded shuffle, per-sample augment,
/// rescale, forward, sigmoid BCE against one-hot targets, backward, Adam;
/// followed by a validation pass.
TrainResult train(const std::vector<SamplePair>& pairs, const ModelSpec& spec, const TrainConfig& config,
                  const TrainOptions& options = {});

// --- sweeps ----------------------------------------------------------------

/// Pairs from one source scan.
struct SampleGroup {
  std::string id;
  std::vector<SamplePair> pairs;
};

enum class SweepAxis { leaves, epochs };

SweepAxis parse_sweep_axis(const std::string& text);
const char* to_string(SweepAxis axis);

struct SweepConfig {
  SweepAxis axis = SweepAxis::leaves;
  /// Leaves axis: number of leading groups; epochs axis: epoch budgets.
  std::vector<std::size_t> levels;
  std::size_t replicates = 10;
  std::size_t jobs = 1;
};

struct SweepModelResult {
  std::size_t level = 0;
  std::size_t replicate = 0;
  std::uint64_t seed = 0;
  MetricsReport final_metrics;
  MetricsReport best_metrics;
};

struct SweepSummaryRow {
  std::string weights;  // "final" or "best"
  std::size_t level = 0;
  std::size_t class_index = 0;
  std::string class_name;
  std::string metric;
  std::size_t n = 0;
  double mean = 0;
  double stddev = 0;
  double ci_low = 0;
  double ci_high = 0;
};

inline constexpr const char* kSweepSummaryHeader = "weights,level,class_index,class_name,metric,n,mean,stddev,ci_low,ci_high";

struct SweepReport {
  SweepAxis axis = SweepAxis::leaves;
  std::vector<SweepModelResult> models;  // level-major, then replicate

  /// `level,replicate,` followed by the metrics columns.
  std::string rows_csv(bool best) const;
  std::vector<SweepSummaryRow> summary() const;
  std::string summary_csv() const;
};

/// Mean, sample standard deviation and two-sided 95% Student-t interval of
/// the pooled per-model scores. With one model the interval collapses to the mean.
std::vector<SweepSummaryRow> summarize_sweep(const std::vector<SweepModelResult>& models);

/// Trains `replicates` models per level with seeds derived from
/// (config.seed, level, replicate) and scores each on `test_pairs`.
SweepReport sweep(const std::vector<SampleGroup>& groups, const std::vector<SamplePair>& test_pairs,
                  const ClassMap& classes, const ModelSpec& spec, const TrainConfig& config,
                  const SweepConfig& sweep_config);

}  // namespace mctseg
