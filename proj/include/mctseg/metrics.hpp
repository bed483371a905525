#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "mctseg/image.hpp"
#include "mctseg/model.hpp"

namespace mctseg {

/// Pixelwise one-vs-rest counts for a single class.
struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t tn = 0;
  std::uint64_t fn = 0;
  std::size_t class_index = 0;
  double epsilon = 1e-9;

  std::uint64_t total() const { return tp + fp + tn + fn; }
  ConfusionCounts& operator+=(const ConfusionCounts& other);
};

ConfusionCounts confusion(const LabelMask& pred, const LabelMask& truth, std::size_t class_index);
/// Counts for classes 0..num_classes-1 in a single pass.
std::vector<ConfusionCounts> confusion_all(const LabelMask& pred, const LabelMask& truth, std::size_t num_classes);

/// (tp+tn)/(tp+tn+fp+fn); throws on an empty region.
double accuracy(const ConfusionCounts& cc);
/// (tp+eps)/(tp+fp+eps)
double precision(const ConfusionCounts& cc);
/// (tp+eps)/(tp+fn+eps)
double recall(const ConfusionCounts& cc);
/// (tp+eps)/((tp+eps) + (fp+fn)/2)
double f1(const ConfusionCounts& cc);

inline constexpr const char* kPooledImageId = "ALL";

struct MetricsRow {
  std::string image;
  std::size_t class_index = 0;
  std::string class_name;
  std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;
  double accuracy = 0, precision = 0, recall = 0, f1 = 0;

  static MetricsRow from_counts(std::string image, const ConfusionCounts& cc, std::string class_name);
};

inline constexpr const char* kMetricsCsvHeader = "image,class_index,class_name,tp,fp,tn,fn,accuracy,precision,recall,f1";

/// Per-image rows followed by pooled rows (image == "ALL") whose counts are
/// the column sums of the per-image rows.
struct MetricsReport {
  std::vector<MetricsRow> rows;

  std::vector<MetricsRow> pooled() const;
  std::string to_csv() const;
  void write_csv(const std::filesystem::path& path) const;
};

/// Shortest round-trip decimal for a double.
std::string format_real(double value);
/// Comma-separated fields of one metrics row (no trailing newline).
std::string csv_fields(const MetricsRow& row);

/// Maps an 8-bit slice to [1,C,H,W] class scores at the same resolution.
using LogitPredictor = std::function<Tensor<float>(const GrayImage&)>;

LogitPredictor model_predictor(const Model<float>& model, const InputNormalization& norm = {});

/// Predicts every pair at `scale`, compares against the equally scaled
/// truth mask and reports per-image and pooled metrics for every class.
MetricsReport evaluate(const LogitPredictor& predictor, const std::vector<SamplePair>& pairs, const ClassMap& classes,
                       double scale, std::size_t jobs = 1);

MetricsReport evaluate(const Model<float>& model, const std::vector<SamplePair>& pairs, const ClassMap& classes,
                       double scale, std::size_t jobs = 1, const InputNormalization& norm = {});

/// Builds a report from already computed per-image counts (outer: images in order).
MetricsReport make_report(const std::vector<std::string>& image_ids,
                          const std::vector<std::vector<ConfusionCounts>>& counts, const ClassMap& classes);

}  // namespace mctseg
