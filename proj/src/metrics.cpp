#include "mctseg/metrics.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "mctseg/errors.hpp"
#include "mctseg/parallel.hpp"

namespace mctseg {

ConfusionCounts& ConfusionCounts::operator+=(const ConfusionCounts& other) {
  tp += other.tp;
  fp += other.fp;
  tn += other.tn;
  fn += other.fn;
  return *this;
}

namespace {
void check_same_size(const LabelMask& pred, const LabelMask& truth) {
  if (pred.width != truth.width || pred.height != truth.height) {
    throw DataError("prediction is " + std::to_string(pred.width) + "x" + std::to_string(pred.height) +
                    " but truth is " + std::to_string(truth.width) + "x" + std::to_string(truth.height));
  }
}
}  // namespace

ConfusionCounts confusion(const LabelMask& pred, const LabelMask& truth, std::size_t class_index) {
  check_same_size(pred, truth);
  ConfusionCounts cc;
  cc.class_index = class_index;
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const bool p = pred.labels[i] == class_index;
    const bool t = truth.labels[i] == class_index;
    if (p && t) {
      ++cc.tp;
    } else if (p) {
      ++cc.fp;
    } else if (t) {
      ++cc.fn;
    } else {
      ++cc.tn;
    }
  }
  return cc;
}

std::vector<ConfusionCounts> confusion_all(const LabelMask& pred, const LabelMask& truth, std::size_t num_classes) {
  check_same_size(pred, truth);
  // Joint histogram, then one-vs-rest marginals.
  std::vector<std::uint64_t> joint(num_classes * num_classes, 0);
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const std::size_t p = pred.labels[i], t = truth.labels[i];
    if (p >= num_classes || t >= num_classes) {
      throw DataError("label " + std::to_string(std::max(p, t)) + " exceeds class count " + std::to_string(num_classes));
    }
    ++joint[p * num_classes + t];
  }
  const std::uint64_t total = pred.labels.size();
  std::vector<ConfusionCounts> out(num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::uint64_t predicted = 0, actual = 0;
    for (std::size_t k = 0; k < num_classes; ++k) {
      predicted += joint[c * num_classes + k];
      actual += joint[k * num_classes + c];
    }
    ConfusionCounts& cc = out[c];
    cc.class_index = c;
    cc.tp = joint[c * num_classes + c];
    cc.fp = predicted - cc.tp;
    cc.fn = actual - cc.tp;
    cc.tn = total - cc.tp - cc.fp - cc.fn;
  }
  return out;
}

double accuracy(const ConfusionCounts& cc) {
  const std::uint64_t total = cc.total();
  if (total == 0) throw DataError("accuracy of an empty evaluation region");
  return static_cast<double>(cc.tp + cc.tn) / static_cast<double>(total);
}

double precision(const ConfusionCounts& cc) {
  return (static_cast<double>(cc.tp) + cc.epsilon) / (static_cast<double>(cc.tp + cc.fp) + cc.epsilon);
}

double recall(const ConfusionCounts& cc) {
  return (static_cast<double>(cc.tp) + cc.epsilon) / (static_cast<double>(cc.tp + cc.fn) + cc.epsilon);
}

double f1(const ConfusionCounts& cc) {
  const double tp = static_cast<double>(cc.tp) + cc.epsilon;
  return tp / (tp + 0.5 * static_cast<double>(cc.fp + cc.fn));
}

MetricsRow MetricsRow::from_counts(std::string image, const ConfusionCounts& cc, std::string class_name) {
  MetricsRow r;
  r.image = std::move(image);
  r.class_index = cc.class_index;
  r.class_name = std::move(class_name);
  r.tp = cc.tp;
  r.fp = cc.fp;
  r.tn = cc.tn;
  r.fn = cc.fn;
  r.accuracy = mctseg::accuracy(cc);
  r.precision = mctseg::precision(cc);
  r.recall = mctseg::recall(cc);
  r.f1 = mctseg::f1(cc);
  return r;
}

std::vector<MetricsRow> MetricsReport::pooled() const {
  std::vector<MetricsRow> out;
  for (const auto& r : rows) {
    if (r.image == kPooledImageId) out.push_back(r);
  }
  return out;
}

std::string format_real(double value) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, res.ptr);
}

std::string csv_fields(const MetricsRow& r) {
  std::ostringstream os;
  os << r.image << ',' << r.class_index << ',' << r.class_name << ',' << r.tp << ',' << r.fp << ',' << r.tn << ','
     << r.fn << ',' << format_real(r.accuracy) << ',' << format_real(r.precision) << ',' << format_real(r.recall)
     << ',' << format_real(r.f1);
  return os.str();
}

std::string MetricsReport::to_csv() const {
  std::string out = std::string(kMetricsCsvHeader) + "\n";
  for (const auto& r : rows) out += csv_fields(r) + "\n";
  return out;
}

void MetricsReport::write_csv(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  os << to_csv();
}

LogitPredictor model_predictor(const Model<float>& model, const InputNormalization& norm) {
  return [&model, norm](const GrayImage& image) { return infer(model, to_model_input<float>(image, norm)); };
}

MetricsReport make_report(const std::vector<std::string>& image_ids,
                          const std::vector<std::vector<ConfusionCounts>>& counts, const ClassMap& classes) {
  const std::size_t num_classes = classes.size();
  MetricsReport report;
  std::vector<ConfusionCounts> pooled(num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) pooled[c].class_index = c;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    for (std::size_t c = 0; c < num_classes; ++c) {
      report.rows.push_back(MetricsRow::from_counts(image_ids[i], counts[i][c], classes.name(c)));
      pooled[c] += counts[i][c];
    }
  }
  for (std::size_t c = 0; c < num_classes; ++c) {
    report.rows.push_back(MetricsRow::from_counts(kPooledImageId, pooled[c], classes.name(c)));
  }
  return report;
}

MetricsReport evaluate(const LogitPredictor& predictor, const std::vector<SamplePair>& pairs, const ClassMap& classes,
                       double scale, std::size_t jobs) {
  if (pairs.empty()) throw DataError("evaluation needs at least one image/mask pair");
  const std::size_t num_classes = classes.size();
  std::vector<std::vector<ConfusionCounts>> counts(pairs.size());
  parallel_for(pairs.size(), jobs, [&](std::size_t i) {
    const SamplePair scaled = downscale(pairs[i], scale);
    const Tensor<float> logits = predictor(scaled.image);
    if (logits.rank() != 4 || logits.dim(1) != num_classes) {
      throw DataError("predictor emits " + shape_str(logits.shape()) + " but the class map has " +
                      std::to_string(num_classes) + " classes");
    }
    counts[i] = confusion_all(argmax_labels(logits), scaled.mask, num_classes);
  });
  std::vector<std::string> ids;
  for (const auto& p : pairs) ids.push_back(p.id);
  return make_report(ids, counts, classes);
}

MetricsReport evaluate(const Model<float>& model, const std::vector<SamplePair>& pairs, const ClassMap& classes,
                       double scale, std::size_t jobs, const InputNormalization& norm) {
  if (model.spec.num_classes != classes.size()) {
    throw DataError("model predicts " + std::to_string(model.spec.num_classes) + " classes but the class map has " +
                    std::to_string(classes.size()));
  }
  return evaluate(model_predictor(model, norm), pairs, classes, scale, jobs);
}

}  // namespace mctseg
