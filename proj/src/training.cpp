#include "mctseg/training.hpp"

#include <algorithm>
#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <fstream>
#include <sstream>

#include "mctseg/errors.hpp"
#include "mctseg/parallel.hpp"

namespace fs = std::filesystem;

namespace mctseg {

namespace {
// Stream identifiers for derive_seed.
constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kShuffleStream = 2;
constexpr std::uint64_t kSampleStream = 3;
}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate > 0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be > 0");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(scale_factor > 0 && scale_factor <= 1)) throw ConfigError("scale_factor must lie in (0, 1]");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1)) throw ConfigError("adam_beta1 must lie in [0, 1)");
  if (!(adam_beta2 >= 0 && adam_beta2 < 1)) throw ConfigError("adam_beta2 must lie in [0, 1)");
  if (!(adam_eps > 0)) throw ConfigError("adam_eps must be > 0");
}

std::string TrainConfig::to_text() const {
  std::ostringstream os;
  os << "learning_rate = " << format_real(learning_rate) << '\n'
     << "epochs = " << epochs << '\n'
     << "batch_size = " << batch_size << '\n'
     << "seed = " << seed << '\n'
     << "scale_factor = " << format_real(scale_factor) << '\n'
     << "augment = " << (augment ? "true" : "false") << '\n'
     << "adam_beta1 = " << format_real(adam_beta1) << '\n'
     << "adam_beta2 = " << format_real(adam_beta2) << '\n'
     << "adam_eps = " << format_real(adam_eps) << '\n';
  return os.str();
}

// --- Adam ------------------------------------------------------------------

template <typename T>
void adam_step(const std::vector<NamedParameter<T>>& params, AdamState<T>& state, const TrainConfig& config) {
  if (state.m.size() != params.size()) {
    if (state.t != 0) throw ConfigError("optimizer state does not match the parameter list");
    state.m.assign(params.size(), {});
    state.v.assign(params.size(), {});
  }
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (T g : p.tensor.grad()) {
      if (!std::isfinite(static_cast<double>(g))) throw NumericalError("non-finite gradient in " + p.name);
    }
  }

  state.t += 1;
  const double b1 = config.adam_beta1, b2 = config.adam_beta2;
  const double correction1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double correction2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T> tensor = params[i].tensor;
    const std::size_t n = tensor.numel();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != n) {
      m.assign(n, T{});
      v.assign(n, T{});
    }
    const bool has_grad = tensor.has_grad();
    std::span<const T> grad = has_grad ? tensor.grad() : std::span<const T>{};
    std::span<T> w = tensor.mutable_data();
    for (std::size_t k = 0; k < n; ++k) {
      const double g = has_grad ? static_cast<double>(grad[k]) : 0.0;
      m[k] = static_cast<T>(b1 * m[k] + (1.0 - b1) * g);
      v[k] = static_cast<T>(b2 * v[k] + (1.0 - b2) * g * g);
      const double m_hat = m[k] / correction1;
      const double v_hat = v[k] / correction2;
      w[k] = static_cast<T>(w[k] - config.learning_rate * m_hat / (std::sqrt(v_hat) + config.adam_eps));
    }
    if (has_grad) tensor.zero_grad();
  }
}

template void adam_step<float>(const std::vector<NamedParameter<float>>&, AdamState<float>&, const TrainConfig&);
template void adam_step<double>(const std::vector<NamedParameter<double>>&, AdamState<double>&, const TrainConfig&);

// --- augmentation ----------------------------------------------------------

AugmentOp draw_augment(Rng& rng) {
  AugmentOp op;
  op.flip_horizontal = rng.bernoulli(0.5);
  op.flip_vertical = rng.bernoulli(0.5);
  op.quarter_turns = static_cast<int>(rng.below(4));
  return op;
}

namespace {
template <typename Px>
std::vector<Px> transform(const std::vector<Px>& src, std::size_t& w, std::size_t& h, const AugmentOp& op) {
  std::vector<Px> cur = src;
  if (op.flip_horizontal) {
    for (std::size_t y = 0; y < h; ++y) std::reverse(cur.begin() + y * w, cur.begin() + (y + 1) * w);
  }
  if (op.flip_vertical) {
    for (std::size_t y = 0; y < h / 2; ++y) {
      std::swap_ranges(cur.begin() + y * w, cur.begin() + (y + 1) * w, cur.begin() + (h - 1 - y) * w);
    }
  }
  const int turns = ((op.quarter_turns % 4) + 4) % 4;
  for (int t = 0; t < turns; ++t) {
    // Clockwise: out(x, y) = in(y, h - 1 - x), output is h wide and w tall.
    std::vector<Px> next(cur.size());
    const std::size_t ow = h, oh = w;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) next[y * ow + x] = cur[(h - 1 - x) * w + y];
    }
    cur = std::move(next);
    w = ow;
    h = oh;
  }
  return cur;
}
}  // namespace

GrayImage apply_augment(const GrayImage& image, const AugmentOp& op) {
  std::size_t w = image.width, h = image.height;
  auto px = transform(image.pixels, w, h, op);
  return GrayImage(w, h, std::move(px));
}

LabelMask apply_augment(const LabelMask& mask, const AugmentOp& op) {
  std::size_t w = mask.width, h = mask.height;
  auto lb = transform(mask.labels, w, h, op);
  return LabelMask(w, h, std::move(lb));
}

SamplePair apply_augment(const SamplePair& pair, const AugmentOp& op) {
  return {apply_augment(pair.image, op), apply_augment(pair.mask, op), pair.id};
}

SamplePair augment(const SamplePair& pair, Rng& rng) { return apply_augment(pair, draw_augment(rng)); }

// --- protocol --------------------------------------------------------------

std::pair<std::vector<SamplePair>, std::vector<SamplePair>> split_train_val(std::vector<SamplePair> pairs) {
  if (pairs.size() < 2) throw DataError("a train/validation split needs at least 2 pairs, got " + std::to_string(pairs.size()));
  std::stable_sort(pairs.begin(), pairs.end(), [](const SamplePair& a, const SamplePair& b) { return a.id < b.id; });
  std::vector<SamplePair> train_set, val_set;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    (i % 2 == 0 ? train_set : val_set).push_back(std::move(pairs[i]));
  }
  return {std::move(train_set), std::move(val_set)};
}

std::string loss_history_csv(const LossHistory& history) {
  std::string out = "epoch,train_loss,val_loss\n";
  for (const auto& r : history) {
    out += std::to_string(r.epoch) + "," + format_real(r.train_loss) + "," + format_real(r.val_loss) + "\n";
  }
  return out;
}

namespace {

void check_pairs(const std::vector<SamplePair>& pairs, std::size_t num_classes) {
  for (const auto& p : pairs) {
    if (p.image.width != p.mask.width || p.image.height != p.mask.height) {
      throw DataError("image and mask sizes differ for " + p.id);
    }
    for (std::uint8_t label : p.mask.labels) {
      if (label >= num_classes) {
        throw DataError("mask " + p.id + " has label " + std::to_string(label) + " but the model has " +
                        std::to_string(num_classes) + " classes");
      }
    }
  }
}

double sample_loss(const Model<float>& model, const SamplePair& pair) {
  const Tensor<float> logits = infer(model, to_model_input<float>(pair.image));
  return bce_with_logits(logits, to_onehot<float>(pair.mask, model.spec.num_classes)).item();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  os << text;
}

void write_checkpoint(Model<float>& model, const fs::path& path, const TrainConfig& config, std::size_t epoch,
                      double train_loss, double val_loss) {
  save_weights(model, path);
  std::ostringstream meta;
  meta << config.to_text() << "epoch = " << epoch << '\n'
       << "train_loss = " << format_real(train_loss) << '\n'
       << "val_loss = " << format_real(val_loss) << '\n';
  write_text(fs::path(path.string() + ".meta"), meta.str());
}

}  // namespace

double validation_loss(const Model<float>& model, const std::vector<SamplePair>& pairs, const TrainConfig& config) {
  if (pairs.empty()) throw DataError("empty validation split");
  double total = 0;
  for (const auto& p : pairs) total += sample_loss(model, downscale(p, config.scale_factor));
  return total / static_cast<double>(pairs.size());
}

TrainResult train(const std::vector<SamplePair>& pairs, const ModelSpec& spec, const TrainConfig& config,
                  const TrainOptions& options) {
  config.validate();
  spec.validate();
  check_pairs(pairs, spec.num_classes);
  auto [train_set, val_set] = split_train_val(pairs);

  std::vector<SamplePair> val_scaled;
  for (const auto& p : val_set) val_scaled.push_back(downscale(p, config.scale_factor));

  TrainResult result;
  if (options.initial_weights) {
    result.model = load_weights<float>(*options.initial_weights, spec,
                                       LoadOptions{false, derive_seed(config.seed, {kInitStream})});
  } else {
    Rng init_rng(derive_seed(config.seed, {kInitStream}));
    result.model = build_fcn<float>(spec, init_rng);
  }
  Model<float>& model = result.model;
  const auto params = model.parameters();
  AdamState<float> adam;
  const float batch_scale = 1.0f / static_cast<float>(config.batch_size);

  if (options.out_dir) fs::create_directories(*options.out_dir);

  double best_val = std::numeric_limits<double>::infinity();
  double best_train = 0;
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng(derive_seed(config.seed, {kShuffleStream, epoch}));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);

    model.mode = Mode::train;
    model.zero_grad();
    double epoch_loss = 0;
    for (std::size_t k = 0; k < order.size(); ++k) {
      const SamplePair& source = train_set[order[k]];
      Rng sample_rng(derive_seed(config.seed, {kSampleStream, epoch, k}));
      SamplePair sample = config.augment ? augment(source, sample_rng) : source;
      sample = downscale(sample, config.scale_factor);

      Tensor<float> logits = forward(model, to_model_input<float>(sample.image), &sample_rng);
      Tensor<float> loss;
      try {
        loss = bce_with_logits(logits, to_onehot<float>(sample.mask, spec.num_classes));
      } catch (const NumericalError& e) {
        throw NumericalError("epoch " + std::to_string(epoch) + ", sample " + source.id + ": " + e.what());
      }
      epoch_loss += loss.item();
      if (config.batch_size > 1) loss = mul(loss, Tensor<float>::scalar(batch_scale));
      loss.backward();
      if ((k + 1) % config.batch_size == 0 || k + 1 == order.size()) {
        try {
          adam_step(params, adam, config);
        } catch (const NumericalError& e) {
          throw NumericalError("epoch " + std::to_string(epoch) + ", sample " + source.id + ": " + e.what());
        }
      }
    }

    model.mode = Mode::eval;
    LossRecord record;
    record.epoch = epoch;
    record.train_loss = epoch_loss / static_cast<double>(order.size());
    record.val_loss = 0;
    for (const auto& p : val_scaled) record.val_loss += sample_loss(model, p);
    record.val_loss /= static_cast<double>(val_scaled.size());
    if (!std::isfinite(record.val_loss)) {
      throw NumericalError("epoch " + std::to_string(epoch) + ": non-finite validation loss");
    }
    result.history.push_back(record);
    if (record.val_loss < best_val) {
      best_val = record.val_loss;
      best_train = record.train_loss;
      result.best_epoch = epoch;
      result.best_model = model.clone();
    }
    if (options.on_epoch) options.on_epoch(record);
  }
  result.best_val_loss = best_val;
  result.best_model.mode = Mode::eval;

  if (options.out_dir) {
    const fs::path dir = *options.out_dir;
    const LossRecord& last = result.history.back();
    write_checkpoint(model, dir / "final.fcnw", config, last.epoch, last.train_loss, last.val_loss);
    write_checkpoint(result.best_model, dir / "best.fcnw", config, result.best_epoch, best_train, best_val);
    write_text(dir / "loss_history.csv", loss_history_csv(result.history));
    result.checkpoints = {dir / "final.fcnw", dir / "best.fcnw"};
  }
  return result;
}

// --- sweeps ----------------------------------------------------------------

SweepAxis parse_sweep_axis(const std::string& text) {
  if (text == "leaves") return SweepAxis::leaves;
  if (text == "epochs") return SweepAxis::epochs;
  throw ConfigError("unknown sweep axis '" + text + "' (expected leaves or epochs)");
}

const char* to_string(SweepAxis axis) { return axis == SweepAxis::leaves ? "leaves" : "epochs"; }

std::string SweepReport::rows_csv(bool best) const {
  std::string out = std::string("level,replicate,") + kMetricsCsvHeader + "\n";
  for (const auto& m : models) {
    const MetricsReport& report = best ? m.best_metrics : m.final_metrics;
    for (const auto& row : report.rows) {
      out += std::to_string(m.level) + "," + std::to_string(m.replicate) + "," + csv_fields(row) + "\n";
    }
  }
  return out;
}

std::vector<SweepSummaryRow> SweepReport::summary() const { return summarize_sweep(models); }

std::string SweepReport::summary_csv() const {
  std::string out = std::string(kSweepSummaryHeader) + "\n";
  for (const auto& r : summary()) {
    out += r.weights + "," + std::to_string(r.level) + "," + std::to_string(r.class_index) + "," + r.class_name + "," +
           r.metric + "," + std::to_string(r.n) + "," + format_real(r.mean) + "," + format_real(r.stddev) + "," +
           format_real(r.ci_low) + "," + format_real(r.ci_high) + "\n";
  }
  return out;
}

std::vector<SweepSummaryRow> summarize_sweep(const std::vector<SweepModelResult>& models) {
  std::vector<std::size_t> levels;
  for (const auto& m : models) {
    if (std::find(levels.begin(), levels.end(), m.level) == levels.end()) levels.push_back(m.level);
  }
  static const char* const kMetrics[] = {"accuracy", "precision", "recall", "f1"};
  std::vector<SweepSummaryRow> out;
  for (const bool best : {false, true}) {
    for (std::size_t level : levels) {
      std::vector<std::vector<MetricsRow>> pooled;
      for (const auto& m : models) {
        if (m.level == level) pooled.push_back((best ? m.best_metrics : m.final_metrics).pooled());
      }
      const std::size_t num_classes = pooled.front().size();
      for (std::size_t c = 0; c < num_classes; ++c) {
        for (const char* metric : kMetrics) {
          std::vector<double> values;
          for (const auto& rows : pooled) {
            const MetricsRow& r = rows.at(c);
            const std::string name = metric;
            values.push_back(name == "accuracy"    ? r.accuracy
                             : name == "precision" ? r.precision
                             : name == "recall"    ? r.recall
                                                   : r.f1);
          }
          SweepSummaryRow row;
          row.weights = best ? "best" : "final";
          row.level = level;
          row.class_index = c;
          row.class_name = pooled.front()[c].class_name;
          row.metric = metric;
          row.n = values.size();
          double total = 0;
          for (double v : values) total += v;
          row.mean = total / static_cast<double>(row.n);
          if (row.n > 1) {
            double ss = 0;
            for (double v : values) ss += (v - row.mean) * (v - row.mean);
            row.stddev = std::sqrt(ss / static_cast<double>(row.n - 1));
            boost::math::students_t dist(static_cast<double>(row.n - 1));
            const double half = boost::math::quantile(dist, 0.975) * row.stddev / std::sqrt(static_cast<double>(row.n));
            row.ci_low = row.mean - half;
            row.ci_high = row.mean + half;
          } else {
            row.stddev = 0;
            row.ci_low = row.ci_high = row.mean;
          }
          out.push_back(std::move(row));
        }
      }
    }
  }
  return out;
}

SweepReport sweep(const std::vector<SampleGroup>& groups, const std::vector<SamplePair>& test_pairs,
                  const ClassMap& classes, const ModelSpec& spec, const TrainConfig& config,
                  const SweepConfig& sweep_config) {
  if (sweep_config.levels.empty()) throw ConfigError("sweep needs at least one level");
  if (sweep_config.replicates < 1) throw ConfigError("sweep needs at least one replicate");
  if (test_pairs.empty()) throw DataError("sweep needs at least one test pair");
  if (spec.num_classes != classes.size()) {
    throw DataError("spec has " + std::to_string(spec.num_classes) + " classes but the class map has " +
                    std::to_string(classes.size()));
  }
  for (std::size_t level : sweep_config.levels) {
    if (level == 0) throw ConfigError("sweep levels must be >= 1");
    if (sweep_config.axis == SweepAxis::leaves && level > groups.size()) {
      throw DataError("requested level " + std::to_string(level) + " exceeds the " + std::to_string(groups.size()) +
                      " available groups");
    }
  }
  if (groups.empty()) throw DataError("sweep needs at least one sample group");

  std::vector<SampleGroup> sorted = groups;
  std::sort(sorted.begin(), sorted.end(), [](const SampleGroup& a, const SampleGroup& b) { return a.id < b.id; });

  SweepReport report;
  report.axis = sweep_config.axis;
  for (std::size_t level : sweep_config.levels) {
    for (std::size_t r = 0; r < sweep_config.replicates; ++r) {
      SweepModelResult m;
      m.level = level;
      m.replicate = r;
      m.seed = derive_seed(config.seed, {level, r});
      report.models.push_back(std::move(m));
    }
  }

  parallel_for(report.models.size(), sweep_config.jobs, [&](std::size_t i) {
    SweepModelResult& m = report.models[i];
    TrainConfig run = config;
    run.seed = m.seed;
    std::vector<SamplePair> pairs;
    const std::size_t used = sweep_config.axis == SweepAxis::leaves ? m.level : sorted.size();
    if (sweep_config.axis == SweepAxis::epochs) run.epochs = m.level;
    for (std::size_t g = 0; g < used; ++g) {
      for (const auto& p : sorted[g].pairs) {
        pairs.push_back(p);
        pairs.back().id = sorted[g].id + "/" + p.id;
      }
    }
    TrainResult trained = train(pairs, spec, run);
    trained.model.mode = Mode::eval;
    m.final_metrics = evaluate(trained.model, test_pairs, classes, run.scale_factor);
    m.best_metrics = evaluate(trained.best_model, test_pairs, classes, run.scale_factor);
  });
  return report;
}

}  // namespace mctseg
