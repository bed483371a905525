// microct-seg: command-line front end for training, prediction, evaluation and
// volume extraction.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mctseg/errors.hpp"
#include "mctseg/gradcheck.hpp"
#include "mctseg/image.hpp"
#include "mctseg/metrics.hpp"
#include "mctseg/model.hpp"
#include "mctseg/training.hpp"
#include "mctseg/volume.hpp"

namespace fs = std::filesystem;
using namespace mctseg;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumerical = 3;

// --- option storage --------------------------------------------------------

struct Common {
  std::size_t jobs = 1;
  std::string config;
  std::string log;
};

struct SummarizeArgs {
  std::size_t classes = 6;
  std::string blocks = "3,4,23,3";
  std::size_t base_width = 64;
  std::string input = "1000x500";
};

struct ModelArgs {
  std::string blocks = "3,4,23,3";
  std::size_t base_width = 64;
};

struct TrainArgs {
  std::string images, masks, classmap, out, init;
  ModelArgs model;
  TrainConfig config;
  bool no_augment = false;
};

struct SweepArgs {
  std::string groups, test_images, test_masks, classmap, out, axis = "leaves", levels;
  std::size_t replicates = 10;
  ModelArgs model;
  TrainConfig config;
  bool no_augment = false;
};

struct PredictArgs {
  std::string model, images, classmap, out;
  double scale = 1.0;
};

struct EvaluateArgs {
  std::string model, images, masks, classmap, out;
  double scale = 1.0;
};

struct ComposeArgs {
  std::string base, air, classmap, out;
  std::size_t air_class = 0;
};

struct DownscaleArgs {
  std::string in, out, kind = "image";
  double factor = 0.5;
};

struct StackArgs {
  std::string in, out, class_name, classmap;
};

struct StatsArgs {
  std::string in, classmap, out, unit = "px";
  std::optional<double> pixel_size;
};

struct GradcheckArgs {
  std::uint64_t seed = 0;
  double step = 1e-5;
};

// --- helpers ---------------------------------------------------------------

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(item);
  return out;
}

std::size_t parse_count(const std::string& text, const std::string& what) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(text, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != text.size() || text.front() == '-') throw ConfigError("invalid " + what + ": '" + text + "'");
  return static_cast<std::size_t>(v);
}

ModelSpec make_spec(const ModelArgs& args, std::size_t classes) {
  const auto parts = split(args.blocks, ',');
  if (parts.size() != 4) throw ConfigError("--blocks needs four comma-separated counts, got '" + args.blocks + "'");
  ModelSpec spec = ModelSpec::resnet101(classes);
  for (std::size_t i = 0; i < 4; ++i) spec.block_counts[i] = parse_count(parts[i], "block count");
  spec.base_width = args.base_width;
  spec.validate();
  return spec;
}

std::vector<std::size_t> parse_levels(const std::string& text) {
  std::vector<std::size_t> out;
  for (const auto& p : split(text, ',')) out.push_back(parse_count(p, "sweep level"));
  if (out.empty()) throw ConfigError("--levels is empty");
  return out;
}

std::vector<GrayImage> load_image_dir(const fs::path& dir, std::vector<std::string>* names = nullptr) {
  if (!fs::is_directory(dir)) throw DataError("images directory does not exist: " + dir.string());
  std::vector<GrayImage> images;
  for (const auto& path : list_images(dir)) {
    images.push_back(load_gray(path));
    if (names) names->push_back(path.filename().string());
  }
  if (images.empty()) throw DataError("no .pgm or .png images in " + dir.string());
  return images;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  os << text;
}

/// Expands `--config FILE` into `--key=value` arguments for keys not already
/// given on the command line.
std::vector<std::string> merge_config(const std::vector<std::string>& args) {
  std::string config_path;
  std::set<std::string> given;
  for (std::size_t i = 1; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a.rfind("--", 0) != 0) continue;
    const std::string key = a.substr(2, a.find('=') == std::string::npos ? std::string::npos : a.find('=') - 2);
    given.insert(key);
    if (key == "config") {
      if (a.find('=') != std::string::npos) {
        config_path = a.substr(a.find('=') + 1);
      } else if (i + 1 < args.size()) {
        config_path = args[i + 1];
      }
    }
  }
  if (config_path.empty() || args.size() < 2) return args;

  std::ifstream is(config_path);
  if (!is) throw ConfigError("cannot read config file " + config_path);
  std::vector<std::string> extra;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(config_path + ":" + std::to_string(line_no) + ": expected 'key = value'");
    }
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(config_path + ":" + std::to_string(line_no) + ": empty key");
    if (key == "config" || given.count(key)) continue;
    extra.push_back("--" + key + "=" + value);
  }
  std::vector<std::string> merged(args.begin(), args.begin() + 2);
  merged.insert(merged.end(), extra.begin(), extra.end());
  merged.insert(merged.end(), args.begin() + 2, args.end());
  return merged;
}

/// `key = value` lines for every option of a parsed subcommand.
std::string resolved_config(const CLI::App& sub) {
  std::ostringstream os;
  os << "# microct-seg " << sub.get_name() << "\n";
  for (const CLI::Option* opt : sub.get_options()) {
    const std::string name = opt->get_single_name();
    if (name == "help" || name == "config" || name == "log") continue;
    std::string value;
    if (opt->count() > 0) {
      const auto& results = opt->results();
      for (std::size_t i = 0; i < results.size(); ++i) value += (i ? "," : "") + results[i];
    } else {
      value = opt->get_default_str();
    }
    if (opt->get_expected_min() == 0 && value.empty()) value = "false";
    if (opt->get_expected_min() == 0 && value == "1") value = "true";
    os << name << " = " << value << "\n";
  }
  return os.str();
}

class RunLog {
 public:
  void open(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    stream_ = std::make_unique<std::ofstream>(path, std::ios::binary);
    if (!*stream_) throw DataError("cannot write run log " + path.string());
  }
  void write(const std::string& text) {
    if (stream_) *stream_ << text << std::flush;
  }

 private:
  std::unique_ptr<std::ofstream> stream_;
};

RunLog g_log;

void begin_run(const CLI::App& sub, const Common& common, const std::optional<fs::path>& default_log) {
  const std::string text = resolved_config(sub);
  if (!common.log.empty()) {
    g_log.open(common.log);
  } else if (default_log) {
    g_log.open(*default_log);
  }
  std::cout << text << std::flush;
  g_log.write(text);
}

void report(const std::string& line) {
  std::cout << line << "\n";
  g_log.write(line + "\n");
}

// --- subcommands -----------------------------------------------------------

int run_summarize(const SummarizeArgs& a) {
  const auto hw = split(a.input, 'x');
  if (hw.size() != 2) throw ConfigError("--input must look like HxW, got '" + a.input + "'");
  const std::size_t h = parse_count(hw[0], "input height"), w = parse_count(hw[1], "input width");
  const ModelSpec spec = make_spec({a.blocks, a.base_width}, a.classes);
  Rng rng(0);
  const Model<float> model = build_fcn<float>(spec, rng);
  std::cout << summarize(model, h, w).render();
  return kExitOk;
}

int run_train(const TrainArgs& a, const Common& common) {
  (void)common;
  const ClassMap classes = ClassMap::load(a.classmap);
  const auto pairs = load_pairs(a.images, a.masks, classes);
  TrainConfig config = a.config;
  config.augment = !a.no_augment;
  TrainOptions options;
  options.out_dir = fs::path(a.out);
  if (!a.init.empty()) options.initial_weights = fs::path(a.init);
  options.on_epoch = [&](const LossRecord& r) {
    std::ostringstream os;
    os << "epoch " << r.epoch << "/" << config.epochs << " train_loss " << format_real(r.train_loss) << " val_loss "
       << format_real(r.val_loss);
    report(os.str());
  };
  const TrainResult result = train(pairs, make_spec(a.model, classes.size()), config, options);
  report("best epoch " + std::to_string(result.best_epoch) + " val_loss " + format_real(result.best_val_loss));
  report("wrote " + (fs::path(a.out) / "final.fcnw").string() + ", " + (fs::path(a.out) / "best.fcnw").string());
  return kExitOk;
}

int run_sweep(const SweepArgs& a, const Common& common) {
  const ClassMap classes = ClassMap::load(a.classmap);
  if (!fs::is_directory(a.groups)) throw DataError("groups directory does not exist: " + a.groups);
  std::vector<SampleGroup> groups;
  std::vector<fs::path> group_dirs;
  for (const auto& entry : fs::directory_iterator(a.groups))
    if (entry.is_directory()) group_dirs.push_back(entry.path());
  std::sort(group_dirs.begin(), group_dirs.end());
  for (const auto& dir : group_dirs) {
    groups.push_back({dir.filename().string(), load_pairs(dir / "images", dir / "masks", classes)});
  }
  if (groups.empty()) throw DataError("no group subdirectories in " + a.groups);
  const auto test_pairs = load_pairs(a.test_images, a.test_masks, classes);

  TrainConfig config = a.config;
  config.augment = !a.no_augment;
  SweepConfig sc;
  sc.axis = parse_sweep_axis(a.axis);
  sc.levels = parse_levels(a.levels);
  sc.replicates = a.replicates;
  sc.jobs = common.jobs;
  const SweepReport result = sweep(groups, test_pairs, classes, make_spec(a.model, classes.size()), config, sc);
  const fs::path out(a.out);
  write_text(out / "sweep_final.csv", result.rows_csv(false));
  write_text(out / "sweep_best.csv", result.rows_csv(true));
  write_text(out / "sweep_summary.csv", result.summary_csv());
  report("trained " + std::to_string(result.models.size()) + " models; wrote sweep_final.csv, sweep_best.csv, "
         "sweep_summary.csv to " + out.string());
  return kExitOk;
}

int run_predict(const PredictArgs& a, const Common& common) {
  const ClassMap classes = ClassMap::load(a.classmap);
  const Model<float> model = load_weights<float>(a.model);
  std::vector<std::string> names;
  const auto images = load_image_dir(a.images, &names);
  const auto per_class = predict_slices(model, images, classes, a.scale, common.jobs);
  const fs::path out(a.out);
  std::string index = "slice,source\n";
  for (std::size_t k = 0; k < names.size(); ++k) index += std::to_string(k) + "," + names[k] + "\n";
  write_text(out / "slice_index.csv", index);
  for (std::size_t c = 0; c < per_class.size(); ++c) write_slice_pgms(per_class[c], classes.name(c), out);
  report("wrote " + std::to_string(images.size() * classes.size()) + " binary slices to " + out.string());
  return kExitOk;
}

int run_evaluate(const EvaluateArgs& a, const Common& common) {
  const ClassMap classes = ClassMap::load(a.classmap);
  const Model<float> model = load_weights<float>(a.model);
  const auto pairs = load_pairs(a.images, a.masks, classes);
  const MetricsReport metrics = evaluate(model, pairs, classes, a.scale, common.jobs);
  metrics.write_csv(a.out);
  for (const auto& row : metrics.pooled()) {
    report(row.class_name + " accuracy " + format_real(row.accuracy) + " precision " + format_real(row.precision) +
           " recall " + format_real(row.recall) + " f1 " + format_real(row.f1));
  }
  report("wrote " + a.out);
  return kExitOk;
}

int run_compose(const ComposeArgs& a) {
  const GrayImage base_image = load_gray(a.base);
  const GrayImage air = load_gray(a.air);
  if (a.classmap.empty()) {
    const LabelMask base(base_image.width, base_image.height, base_image.pixels);
    if (a.air_class > 255) throw ConfigError("--air-class must fit in 8 bits without a class map");
    const LabelMask out = compose_three_layer_mask(base, air, a.air_class);
    save_gray(GrayImage(out.width, out.height, out.labels), a.out);
  } else {
    const ClassMap classes = ClassMap::load(a.classmap);
    if (a.air_class >= classes.size()) {
      throw ConfigError("--air-class " + std::to_string(a.air_class) + " is not in the class map");
    }
    const LabelMask out = compose_three_layer_mask(decode_mask(base_image, classes), air, a.air_class);
    save_gray(encode_mask(out, classes), a.out);
  }
  report("wrote " + a.out);
  return kExitOk;
}

int run_downscale(const DownscaleArgs& a) {
  if (a.kind != "image" && a.kind != "mask") throw ConfigError("--kind must be image or mask, got '" + a.kind + "'");
  if (!(a.factor > 0 && a.factor <= 1)) throw ConfigError("--factor must be in (0, 1]");
  if (!fs::is_directory(a.in)) throw DataError("input directory does not exist: " + a.in);
  const auto files = list_images(a.in);
  if (files.empty()) throw DataError("no .pgm or .png images in " + a.in);
  fs::create_directories(a.out);
  for (const auto& path : files) {
    const GrayImage img = load_gray(path);
    GrayImage scaled;
    if (a.kind == "image") {
      scaled = downscale(img, a.factor);
    } else {
      const LabelMask m = downscale(LabelMask(img.width, img.height, img.pixels), a.factor);
      scaled = GrayImage(m.width, m.height, m.labels);
    }
    save_gray(scaled, fs::path(a.out) / path.filename());
  }
  report("downscaled " + std::to_string(files.size()) + " files by " + format_real(a.factor) + " into " + a.out);
  return kExitOk;
}

int run_stack(const StackArgs& a) {
  std::size_t class_index = 0;
  if (!a.classmap.empty()) {
    const auto found = ClassMap::load(a.classmap).find(a.class_name);
    if (!found) throw DataError("class '" + a.class_name + "' is not in " + a.classmap);
    class_index = *found;
  }
  const auto slices = read_slice_pgms(a.in, a.class_name, class_index);
  if (slices.empty()) throw DataError("no " + a.class_name + "_NNNNN.pgm slices in " + a.in);
  const Volume volume = stack(slices, a.class_name);
  write_rawvol(volume, a.out);
  std::string manifest = volume.manifest();
  while (!manifest.empty() && manifest.back() == '\n') manifest.pop_back();
  report(manifest);
  report("wrote " + a.out);
  return kExitOk;
}

int run_stats(const StatsArgs& a) {
  const ClassMap classes = ClassMap::load(a.classmap);
  std::vector<std::vector<BinarySlice>> per_class;
  std::size_t found = 0;
  for (const auto& entry : classes.entries()) {
    per_class.push_back(read_slice_pgms(a.in, entry.name, entry.class_index));
    found += per_class.back().size();
  }
  if (found == 0) throw DataError("no slice images for any class in " + a.in);
  const StatsTable table = slice_stats(per_class, classes, a.pixel_size, a.unit);
  write_text(a.out, table.to_csv());
  for (const auto& row : table.rows) {
    if (row.slice == "TOTAL") {
      report(row.class_name + " voxels " + std::to_string(row.area_px) +
             (row.area_physical ? " volume " + format_real(*row.area_physical) + " " + row.unit : std::string()));
    }
  }
  report("wrote " + a.out);
  return kExitOk;
}

int run_gradcheck(const GradcheckArgs& a) {
  const GradcheckReport result = mctseg::run_gradcheck(a.seed, a.step);
  std::cout << result.render();
  g_log.write(result.render());
  return result.passed(1e-4) ? kExitOk : kExitNumerical;
}

// --- wiring ----------------------------------------------------------------

void add_common(CLI::App* sub, Common& common) {
  sub->add_option("--jobs", common.jobs, "Worker threads (default: $MICROCT_SEG_JOBS or 1)")->check(CLI::PositiveNumber);
  sub->add_option("--config", common.config, "Text file of 'key = value' lines; command-line flags win");
  sub->add_option("--log", common.log, "Run log path (overrides the default next to --out)");
}

void add_model_options(CLI::App* sub, ModelArgs& m) {
  sub->add_option("--blocks", m.blocks, "Bottleneck blocks per stage, a,b,c,d");
  sub->add_option("--base-width", m.base_width, "Stem width; stage widths double from it")->check(CLI::PositiveNumber);
}

void add_train_options(CLI::App* sub, TrainConfig& c, bool& no_augment) {
  sub->add_option("--epochs", c.epochs, "Training epochs");
  sub->add_option("--lr", c.learning_rate, "Adam learning rate");
  sub->add_option("--batch-size", c.batch_size, "Samples per optimizer step");
  sub->add_option("--seed", c.seed, "Seed for initialization, shuffling and augmentation");
  sub->add_option("--scale", c.scale_factor, "Downscaling factor applied before the network");
  sub->add_flag("--no-augment", no_augment, "Disable flip/rotate augmentation");
}

std::size_t default_jobs() {
  const char* env = std::getenv("MICROCT_SEG_JOBS");
  if (!env || !*env) return 1;
  const std::size_t jobs = parse_count(env, "MICROCT_SEG_JOBS");
  if (jobs == 0) throw ConfigError("MICROCT_SEG_JOBS must be >= 1");
  return jobs;
}

int run(int argc, char** argv) {
  Common common;
  common.jobs = default_jobs();

  CLI::App app{"Segmentation of X-ray micro-CT slices with a fully convolutional network", "microct-seg"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  app.set_version_flag("--version", "microct-seg 0.1.0");

  SummarizeArgs sa;
  auto* summarize_cmd = app.add_subcommand("summarize", "Print the layer table and parameter count");
  summarize_cmd->add_option("--classes", sa.classes, "Output classes")->check(CLI::PositiveNumber);
  summarize_cmd->add_option("--blocks", sa.blocks, "Bottleneck blocks per stage, a,b,c,d");
  summarize_cmd->add_option("--base-width", sa.base_width, "Stem width")->check(CLI::PositiveNumber);
  summarize_cmd->add_option("--input", sa.input, "Input size HxW");
  add_common(summarize_cmd, common);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train a model on image/mask pairs");
  train_cmd->add_option("--images", ta.images, "Directory of grayscale slices")->required();
  train_cmd->add_option("--masks", ta.masks, "Directory of annotation masks with matching names")->required();
  train_cmd->add_option("--classmap", ta.classmap, "Class map file")->required();
  train_cmd->add_option("--out", ta.out, "Output directory for weights and loss history")->required();
  train_cmd->add_option("--init", ta.init, "Initial weights; the classifier is replaced on a class-count mismatch");
  add_train_options(train_cmd, ta.config, ta.no_augment);
  add_model_options(train_cmd, ta.model);
  add_common(train_cmd, common);

  SweepArgs wa;
  auto* sweep_cmd = app.add_subcommand("sweep", "Train replicate models over leaf-count or epoch levels");
  sweep_cmd->add_option("--groups", wa.groups, "Directory with one <group>/images + <group>/masks per leaf")->required();
  sweep_cmd->add_option("--test-images", wa.test_images, "Held-out test slices")->required();
  sweep_cmd->add_option("--test-masks", wa.test_masks, "Held-out test masks")->required();
  sweep_cmd->add_option("--classmap", wa.classmap, "Class map file")->required();
  sweep_cmd->add_option("--out", wa.out, "Output directory for sweep CSVs")->required();
  sweep_cmd->add_option("--axis", wa.axis, "leaves or epochs")->check(CLI::IsMember({"leaves", "epochs"}));
  sweep_cmd->add_option("--levels", wa.levels, "Comma-separated levels")->required();
  sweep_cmd->add_option("--replicates", wa.replicates, "Models per level")->check(CLI::PositiveNumber);
  add_train_options(sweep_cmd, wa.config, wa.no_augment);
  add_model_options(sweep_cmd, wa.model);
  add_common(sweep_cmd, common);

  PredictArgs pa;
  auto* predict_cmd = app.add_subcommand("predict", "Write per-class binary slices for a directory of images");
  predict_cmd->add_option("--model", pa.model, "Weight file")->required();
  predict_cmd->add_option("--images", pa.images, "Directory of grayscale slices")->required();
  predict_cmd->add_option("--classmap", pa.classmap, "Class map file")->required();
  predict_cmd->add_option("--out", pa.out, "Output directory")->required();
  predict_cmd->add_option("--scale", pa.scale, "Downscaling factor applied before the network");
  add_common(predict_cmd, common);

  EvaluateArgs ea;
  auto* evaluate_cmd = app.add_subcommand("evaluate", "Score a model against annotated masks");
  evaluate_cmd->add_option("--model", ea.model, "Weight file")->required();
  evaluate_cmd->add_option("--images", ea.images, "Directory of grayscale slices")->required();
  evaluate_cmd->add_option("--masks", ea.masks, "Directory of annotation masks")->required();
  evaluate_cmd->add_option("--classmap", ea.classmap, "Class map file")->required();
  evaluate_cmd->add_option("--out", ea.out, "Metrics CSV path")->required();
  evaluate_cmd->add_option("--scale", ea.scale, "Downscaling factor applied before the network");
  add_common(evaluate_cmd, common);

  ComposeArgs ca;
  auto* compose_cmd = app.add_subcommand("compose-mask", "Overlay a binary air-space mask onto a tissue mask");
  compose_cmd->add_option("--base", ca.base, "Tissue mask image")->required();
  compose_cmd->add_option("--air", ca.air, "Binary {0,255} air-space image")->required();
  compose_cmd->add_option("--air-class", ca.air_class, "Class index for air pixels")->required();
  compose_cmd->add_option("--out", ca.out, "Output mask image")->required();
  compose_cmd->add_option("--classmap", ca.classmap, "Class map; without it pixel values are class indices");
  add_common(compose_cmd, common);

  DownscaleArgs da;
  auto* downscale_cmd = app.add_subcommand("downscale", "Resample a directory of images or masks");
  downscale_cmd->add_option("--in", da.in, "Input directory")->required();
  downscale_cmd->add_option("--out", da.out, "Output directory")->required();
  downscale_cmd->add_option("--factor", da.factor, "Scale factor in (0, 1]")->required();
  downscale_cmd->add_option("--kind", da.kind, "image (bilinear) or mask (nearest)")
      ->check(CLI::IsMember({"image", "mask"}));
  add_common(downscale_cmd, common);

  StackArgs ka;
  auto* stack_cmd = app.add_subcommand("stack", "Stack binary slices of one class into a raw volume");
  stack_cmd->add_option("--in", ka.in, "Directory of <class>_NNNNN.pgm slices")->required();
  stack_cmd->add_option("--out", ka.out, "Raw volume file")->required();
  stack_cmd->add_option("--class", ka.class_name, "Class name")->required();
  stack_cmd->add_option("--classmap", ka.classmap, "Class map used to record the class index");
  add_common(stack_cmd, common);

  StatsArgs ra;
  auto* stats_cmd = app.add_subcommand("stats", "Per-slice area and perimeter plus per-class volume");
  stats_cmd->add_option("--in", ra.in, "Directory of <class>_NNNNN.pgm slices")->required();
  stats_cmd->add_option("--classmap", ra.classmap, "Class map file")->required();
  stats_cmd->add_option("--out", ra.out, "Stats CSV path")->required();
  stats_cmd->add_option("--pixel-size", ra.pixel_size, "Physical edge length of one pixel");
  stats_cmd->add_option("--unit", ra.unit, "Unit of --pixel-size");
  add_common(stats_cmd, common);

  GradcheckArgs ga;
  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
  gradcheck_cmd->add_option("--seed", ga.seed, "Seed for inputs and parameters");
  gradcheck_cmd->add_option("--step", ga.step, "Central-difference step");
  add_common(gradcheck_cmd, common);

  std::vector<std::string> args(argv, argv + argc);
  try {
    args = merge_config(args);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  std::vector<std::string> reversed(args.rbegin(), args.rend() - 1);
  try {
    app.parse(std::move(reversed));
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitUsage;
  }

  CLI::App* sub = app.get_subcommands().front();
  auto in_dir = [](const std::string& dir) { return std::optional<fs::path>(fs::path(dir) / "run.log"); };
  auto beside = [](const std::string& file) { return std::optional<fs::path>(fs::path(file + ".run.log")); };
  const std::optional<fs::path> none;

  if (sub == summarize_cmd) return begin_run(*sub, common, none), run_summarize(sa);
  if (sub == train_cmd) return begin_run(*sub, common, in_dir(ta.out)), run_train(ta, common);
  if (sub == sweep_cmd) return begin_run(*sub, common, in_dir(wa.out)), run_sweep(wa, common);
  if (sub == predict_cmd) return begin_run(*sub, common, in_dir(pa.out)), run_predict(pa, common);
  if (sub == evaluate_cmd) return begin_run(*sub, common, beside(ea.out)), run_evaluate(ea, common);
  if (sub == compose_cmd) return begin_run(*sub, common, beside(ca.out)), run_compose(ca);
  if (sub == downscale_cmd) return begin_run(*sub, common, in_dir(da.out)), run_downscale(da);
  if (sub == stack_cmd) return begin_run(*sub, common, beside(ka.out)), run_stack(ka);
  if (sub == stats_cmd) return begin_run(*sub, common, beside(ra.out)), run_stats(ra);
  if (sub == gradcheck_cmd) return begin_run(*sub, common, none), run_gradcheck(ga);
  return kExitUsage;
}

}  // namespace

int main(int argc, char** argv) {
  int code = kExitOk;
  try {
    code = run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    code = kExitUsage;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    code = kExitNumerical;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    code = kExitData;
  } catch (const ShapeError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    code = kExitData;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    code = kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    code = kExitData;
  }
  g_log.write("# exit = " + std::to_string(code) + "\n");
  return code;
}
