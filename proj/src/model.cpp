#include "mctseg/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <type_traits>
#include <utility>

#include "mctseg/errors.hpp"

namespace mctseg {

ModelSpec ModelSpec::resnet101(std::size_t num_classes) {
  ModelSpec spec;
  spec.num_classes = num_classes;
  return spec;
}

ModelSpec ModelSpec::tiny(std::size_t num_classes, std::size_t base_width) {
  ModelSpec spec;
  spec.num_classes = num_classes;
  spec.block_counts = {1, 1, 1, 1};
  spec.base_width = base_width;
  return spec;
}

void ModelSpec::validate() const {
  if (num_classes < 2) throw ConfigError("model needs at least 2 classes, got " + std::to_string(num_classes));
  if (num_classes > 256) throw ConfigError("model supports at most 256 classes");
  for (std::size_t c : block_counts) {
    if (c < 1) throw ConfigError("every stage needs at least one block");
  }
  if (base_width < 1) throw ConfigError("base_width must be positive");
  for (const StagePlan& s : stages) {
    if (s.stride < 1 || s.dilation < 1) throw ConfigError("stage stride and dilation must be positive");
  }
  if (!(head_dropout >= 0.0 && head_dropout < 1.0)) throw ConfigError("head dropout must lie in [0, 1)");
}

template <typename T>
std::size_t Bottleneck<T>::parameter_count() const {
  std::size_t n = conv1.parameter_count() + conv2.parameter_count() + conv3.parameter_count();
  n += 2 * (bn1.channels() + bn2.channels() + bn3.channels());
  if (down_conv) n += down_conv->parameter_count() + 2 * down_bn->channels();
  return n;
}

namespace {

template <typename T>
Conv<T> make_conv(std::size_t cin, std::size_t cout, const ConvParams& params, Rng& rng) {
  Conv<T> conv;
  conv.params = params;
  const std::size_t fan_out = cout * params.kernel_h * params.kernel_w;
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_out));
  std::vector<T> w(cout * cin * params.kernel_h * params.kernel_w);
  for (auto& v : w) v = static_cast<T>(rng.normal() * stddev);
  conv.weight = Tensor<T>({cout, cin, params.kernel_h, params.kernel_w}, std::move(w), true);
  if (params.has_bias) conv.bias = Tensor<T>(Shape{cout}, std::vector<T>(cout, T{0}), true);
  return conv;
}

template <typename T>
Conv<T> clone_conv(const Conv<T>& c) {
  Conv<T> out;
  out.params = c.params;
  out.weight = c.weight.clone();
  if (c.bias.defined()) out.bias = c.bias.clone();
  return out;
}

template <typename T>
BatchNorm<T> clone_bn(const BatchNorm<T>& bn) {
  BatchNorm<T> out = bn;
  out.gamma = bn.gamma.clone();
  out.beta = bn.beta.clone();
  return out;
}

template <typename T>
Bottleneck<T> make_block(std::size_t inplanes, std::size_t width, std::size_t stride, std::size_t dilation,
                         Rng& rng) {
  Bottleneck<T> b;
  const std::size_t out = width * ModelSpec::kExpansion;
  b.conv1 = make_conv<T>(inplanes, width, ConvParams::square(1), rng);
  b.bn1 = BatchNorm<T>::identity(width);
  b.conv2 = make_conv<T>(width, width, ConvParams::square(3, stride, dilation, dilation), rng);
  b.bn2 = BatchNorm<T>::identity(width);
  b.conv3 = make_conv<T>(width, out, ConvParams::square(1), rng);
  b.bn3 = BatchNorm<T>::identity(out);
  if (stride != 1 || inplanes != out) {
    b.down_conv = make_conv<T>(inplanes, out, ConvParams::square(1, stride), rng);
    b.down_bn = BatchNorm<T>::identity(out);
  }
  return b;
}

// Per-block (stride, dilation) following the stage plan.
struct BlockGeometry {
  std::size_t stride;
  std::size_t dilation;
};

BlockGeometry block_geometry(const ModelSpec& spec, std::size_t stage, std::size_t index) {
  const std::size_t previous = stage == 0 ? 1 : spec.stages[stage - 1].dilation;
  if (index == 0) return {spec.stages[stage].stride, previous};
  return {1, spec.stages[stage].dilation};
}

std::string layer_path(std::size_t stage) { return "layer" + std::to_string(stage + 1); }
std::string block_path(std::size_t stage, std::size_t index) {
  return layer_path(stage) + ".block" + std::to_string(index);
}

void record(ShapeTrace* trace, std::string path, const Shape& shape) {
  if (trace) trace->push_back({std::move(path), shape});
}

template <typename T, typename BN>
Tensor<T> apply_bn(const Tensor<T>& x, BN& bn, Mode mode) {
  if constexpr (std::is_const_v<BN>) {
    return batchnorm2d(x, bn);
  } else {
    return mode == Mode::train ? batchnorm2d(x, bn, Mode::train) : batchnorm2d(x, std::as_const(bn));
  }
}

template <typename T>
Tensor<T> apply_conv(const Tensor<T>& x, const Conv<T>& c) {
  return conv2d(x, c.weight, c.bias, c.params);
}

void check_input(const Shape& s) {
  if (s.size() != 4) throw ShapeError("model input must be NCHW, got " + shape_str(s));
  if (s[1] != 3) throw ShapeError("model input must have 3 channels, got " + shape_str(s));
  if (s[2] < ModelSpec::kMinInputExtent || s[3] < ModelSpec::kMinInputExtent) {
    throw ShapeError("model input must be at least 32x32, got " + shape_str(s));
  }
}

template <typename T, typename M>
Tensor<T> run_forward(M& model, const Tensor<T>& input, Mode mode, Rng* rng, ShapeTrace* trace) {
  const ModelSpec& spec = model.spec;
  check_input(input.shape());
  Tensor<T> x = apply_conv(input, model.stem_conv);
  record(trace, "stem.conv", x.shape());
  x = apply_bn(x, model.stem_bn, mode);
  record(trace, "stem.bn", x.shape());
  x = relu(x);
  record(trace, "stem.relu", x.shape());
  x = maxpool2d(x, 3, 2, 1);
  record(trace, "stem.maxpool", x.shape());

  for (std::size_t s = 0; s < 4; ++s) {
    for (std::size_t i = 0; i < model.layers[s].size(); ++i) {
      auto& blk = model.layers[s][i];
      Tensor<T> out = relu(apply_bn(apply_conv(x, blk.conv1), blk.bn1, mode));
      out = relu(apply_bn(apply_conv(out, blk.conv2), blk.bn2, mode));
      out = apply_bn(apply_conv(out, blk.conv3), blk.bn3, mode);
      Tensor<T> identity = x;
      if (blk.down_conv) identity = apply_bn(apply_conv(x, *blk.down_conv), *blk.down_bn, mode);
      x = relu(add(out, identity));
      record(trace, block_path(s, i), x.shape());
    }
    record(trace, layer_path(s), x.shape());
  }
  record(trace, "backbone", x.shape());

  x = apply_conv(x, model.head_conv);
  record(trace, "head.conv", x.shape());
  x = apply_bn(x, model.head_bn, mode);
  record(trace, "head.bn", x.shape());
  x = relu(x);
  record(trace, "head.relu", x.shape());
  if (mode == Mode::train && spec.head_dropout > 0.0) {
    if (!rng) throw ConfigError("train-mode forward needs a random source for dropout");
    x = dropout(x, spec.head_dropout, Mode::train, *rng);
  }
  record(trace, "head.dropout", x.shape());
  x = apply_conv(x, model.classifier);
  record(trace, "head.classifier", x.shape());
  record(trace, "head", x.shape());
  x = bilinear_upsample(x, input.dim(2), input.dim(3));
  record(trace, "FCN", x.shape());
  return x;
}

std::size_t checked_extent(std::int64_t e, const char* what) {
  if (e < 1) throw ShapeError(std::string("input too small: ") + what + " extent is not positive");
  return static_cast<std::size_t>(e);
}

}  // namespace

template <typename T>
Model<T> Model<T>::clone() const {
  Model<T> m;
  m.spec = spec;
  m.mode = mode;
  m.stem_conv = clone_conv(stem_conv);
  m.stem_bn = clone_bn(stem_bn);
  for (std::size_t s = 0; s < 4; ++s) {
    for (const auto& b : layers[s]) {
      Bottleneck<T> c;
      c.conv1 = clone_conv(b.conv1);
      c.bn1 = clone_bn(b.bn1);
      c.conv2 = clone_conv(b.conv2);
      c.bn2 = clone_bn(b.bn2);
      c.conv3 = clone_conv(b.conv3);
      c.bn3 = clone_bn(b.bn3);
      if (b.down_conv) {
        c.down_conv = clone_conv(*b.down_conv);
        c.down_bn = clone_bn(*b.down_bn);
      }
      m.layers[s].push_back(std::move(c));
    }
  }
  m.head_conv = clone_conv(head_conv);
  m.head_bn = clone_bn(head_bn);
  m.classifier = clone_conv(classifier);
  return m;
}

namespace {

template <typename M, typename ConvFn, typename BnFn>
void visit_modules(M& m, ConvFn&& on_conv, BnFn&& on_bn) {
  on_conv("stem.conv", m.stem_conv);
  on_bn("stem.bn", m.stem_bn);
  for (std::size_t s = 0; s < 4; ++s) {
    for (std::size_t i = 0; i < m.layers[s].size(); ++i) {
      auto& b = m.layers[s][i];
      const std::string p = block_path(s, i);
      on_conv(p + ".conv1", b.conv1);
      on_bn(p + ".bn1", b.bn1);
      on_conv(p + ".conv2", b.conv2);
      on_bn(p + ".bn2", b.bn2);
      on_conv(p + ".conv3", b.conv3);
      on_bn(p + ".bn3", b.bn3);
      if (b.down_conv) {
        on_conv(p + ".downsample.conv", *b.down_conv);
        on_bn(p + ".downsample.bn", *b.down_bn);
      }
    }
  }
  on_conv("head.conv", m.head_conv);
  on_bn("head.bn", m.head_bn);
  on_conv("head.classifier", m.classifier);
}

}  // namespace

template <typename T>
std::vector<NamedParameter<T>> Model<T>::parameters() const {
  std::vector<NamedParameter<T>> out;
  visit_modules(
      *this,
      [&](const std::string& path, const Conv<T>& conv) {
        out.push_back({path + ".weight", conv.weight});
        if (conv.bias.defined()) out.push_back({path + ".bias", conv.bias});
      },
      [&](const std::string& path, const BatchNorm<T>& bn) {
        out.push_back({path + ".weight", bn.gamma});
        out.push_back({path + ".bias", bn.beta});
      });
  return out;
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

template <typename T>
std::vector<StateEntry<T>> Model<T>::state() {
  std::vector<StateEntry<T>> out;
  visit_modules(
      *this,
      [&](const std::string& path, Conv<T>& conv) {
        out.push_back({path + ".weight", conv.weight.shape(), conv.weight.mutable_data(), true});
        if (conv.bias.defined()) out.push_back({path + ".bias", conv.bias.shape(), conv.bias.mutable_data(), true});
      },
      [&](const std::string& path, BatchNorm<T>& bn) {
        const Shape s{bn.channels()};
        out.push_back({path + ".weight", s, bn.gamma.mutable_data(), true});
        out.push_back({path + ".bias", s, bn.beta.mutable_data(), true});
        out.push_back({path + ".running_mean", s, bn.running_mean, false});
        out.push_back({path + ".running_var", s, bn.running_var, false});
      });
  return out;
}

template <typename T>
void Model<T>::zero_grad() {
  for (auto& p : parameters()) p.tensor.zero_grad();
}

template <typename T>
Model<T> build_fcn(const ModelSpec& spec, Rng& rng) {
  spec.validate();
  Model<T> m;
  m.spec = spec;
  m.stem_conv = make_conv<T>(3, spec.base_width, ConvParams::square(7, 2, 3), rng);
  m.stem_bn = BatchNorm<T>::identity(spec.base_width);
  std::size_t inplanes = spec.base_width;
  for (std::size_t s = 0; s < 4; ++s) {
    for (std::size_t i = 0; i < spec.block_counts[s]; ++i) {
      const BlockGeometry geo = block_geometry(spec, s, i);
      m.layers[s].push_back(make_block<T>(inplanes, spec.stage_width(s), geo.stride, geo.dilation, rng));
      inplanes = spec.stage_out_channels(s);
    }
  }
  m.head_conv = make_conv<T>(spec.backbone_channels(), spec.head_channels(), ConvParams::square(3, 1, 1), rng);
  m.head_bn = BatchNorm<T>::identity(spec.head_channels());
  m.classifier =
      make_conv<T>(spec.head_channels(), spec.num_classes, ConvParams::square(1, 1, 0, 1, true), rng);
  return m;
}

template <typename T>
Tensor<T> forward(Model<T>& model, const Tensor<T>& input, Rng* rng, ShapeTrace* trace) {
  return run_forward<T>(model, input, model.mode, rng, trace);
}

template <typename T>
Tensor<T> infer(const Model<T>& model, const Tensor<T>& input, ShapeTrace* trace) {
  NoGradGuard no_grad;
  return run_forward<T>(model, input, Mode::eval, nullptr, trace);
}

template <typename T>
void replace_classifier(Model<T>& model, std::size_t new_num_classes, Rng& rng) {
  ModelSpec spec = model.spec;
  spec.num_classes = new_num_classes;
  spec.validate();
  model.classifier =
      make_conv<T>(spec.head_channels(), new_num_classes, ConvParams::square(1, 1, 0, 1, true), rng);
  model.spec = spec;
}

ShapeTrace infer_shapes(const ModelSpec& spec, std::size_t batch, std::size_t height, std::size_t width) {
  spec.validate();
  check_input({batch, 3, height, width});
  ShapeTrace trace;
  std::size_t h = checked_extent(conv_out_extent(height, 7, 2, 3, 1), "stem");
  std::size_t w = checked_extent(conv_out_extent(width, 7, 2, 3, 1), "stem");
  const Shape stem{batch, spec.base_width, h, w};
  record(&trace, "stem.conv", stem);
  record(&trace, "stem.bn", stem);
  record(&trace, "stem.relu", stem);
  h = checked_extent(conv_out_extent(h, 3, 2, 1, 1), "maxpool");
  w = checked_extent(conv_out_extent(w, 3, 2, 1, 1), "maxpool");
  record(&trace, "stem.maxpool", {batch, spec.base_width, h, w});
  for (std::size_t s = 0; s < 4; ++s) {
    const std::size_t c = spec.stage_out_channels(s);
    for (std::size_t i = 0; i < spec.block_counts[s]; ++i) {
      const BlockGeometry geo = block_geometry(spec, s, i);
      h = checked_extent(conv_out_extent(h, 3, geo.stride, geo.dilation, geo.dilation), "block");
      w = checked_extent(conv_out_extent(w, 3, geo.stride, geo.dilation, geo.dilation), "block");
      record(&trace, block_path(s, i), {batch, c, h, w});
    }
    record(&trace, layer_path(s), {batch, c, h, w});
  }
  record(&trace, "backbone", {batch, spec.backbone_channels(), h, w});
  const Shape mid{batch, spec.head_channels(), h, w};
  for (const char* p : {"head.conv", "head.bn", "head.relu", "head.dropout"}) record(&trace, p, mid);
  record(&trace, "head.classifier", {batch, spec.num_classes, h, w});
  record(&trace, "head", {batch, spec.num_classes, h, w});
  record(&trace, "FCN", {batch, spec.num_classes, height, width});
  return trace;
}

const LayerRow* LayerTable::find(const std::string& path) const {
  for (const auto& r : rows) {
    if (r.path == path) return &r;
  }
  return nullptr;
}

std::string group_thousands(std::size_t value) {
  std::string digits = std::to_string(value);
  std::string out;
  for (std::size_t i = 0; i < digits.size(); ++i) {
    if (i != 0 && (digits.size() - i) % 3 == 0) out.push_back(',');
    out.push_back(digits[i]);
  }
  return out;
}

std::string LayerTable::render() const {
  std::vector<std::array<std::string, 3>> cells;
  cells.push_back({"Layer (path)", "Output Shape", "Param #"});
  for (const auto& r : rows) {
    cells.push_back({std::string(2 * r.depth, ' ') + r.path + " (" + r.type + ")", shape_str(r.output),
                     r.params ? group_thousands(*r.params) : "--"});
  }
  std::array<std::size_t, 3> width{};
  for (const auto& c : cells) {
    for (std::size_t i = 0; i < 3; ++i) width[i] = std::max(width[i], c[i].size());
  }
  const std::size_t line_len = width[0] + width[1] + width[2] + 6;
  std::ostringstream os;
  const std::string rule(line_len, '=');
  os << rule << '\n';
  for (std::size_t k = 0; k < cells.size(); ++k) {
    const auto& c = cells[k];
    os << c[0] << std::string(width[0] - c[0].size() + 3, ' ') << c[1]
       << std::string(width[1] - c[1].size() + 3, ' ') << std::string(width[2] - c[2].size(), ' ') << c[2] << '\n';
    if (k == 0) os << rule << '\n';
  }
  os << rule << '\n';
  os << "Total params: " << group_thousands(total_params) << '\n';
  os << "Trainable params: " << group_thousands(total_params) << '\n';
  os << "Non-trainable params: 0\n";
  os << rule << '\n';
  return os.str();
}

template <typename T>
LayerTable summarize(const Model<T>& model, std::size_t input_h, std::size_t input_w) {
  const ShapeTrace trace = infer_shapes(model.spec, 1, input_h, input_w);
  std::map<std::string, Shape> shapes;
  for (const auto& rec : trace) shapes[rec.path] = rec.shape;
  LayerTable table;
  auto add_row = [&](const std::string& path, const char* type, std::size_t depth, std::optional<std::size_t> params) {
    table.rows.push_back({path, type, depth, shapes.at(path), params});
    if (params) table.total_params += *params;
  };
  auto bn_params = [](const BatchNorm<T>& bn) { return 2 * bn.channels(); };

  add_row("FCN", "FCN", 0, std::nullopt);
  add_row("backbone", "IntermediateLayerGetter", 1, std::nullopt);
  add_row("stem.conv", "Conv2d", 2, model.stem_conv.parameter_count());
  add_row("stem.bn", "BatchNorm2d", 2, bn_params(model.stem_bn));
  add_row("stem.relu", "ReLU", 2, std::nullopt);
  add_row("stem.maxpool", "MaxPool2d", 2, std::nullopt);
  for (std::size_t s = 0; s < 4; ++s) {
    add_row(layer_path(s), "Sequential", 2, std::nullopt);
    for (std::size_t i = 0; i < model.layers[s].size(); ++i) {
      add_row(block_path(s, i), "Bottleneck", 3, model.layers[s][i].parameter_count());
    }
  }
  add_row("head", "FCNHead", 1, std::nullopt);
  add_row("head.conv", "Conv2d", 2, model.head_conv.parameter_count());
  add_row("head.bn", "BatchNorm2d", 2, bn_params(model.head_bn));
  add_row("head.relu", "ReLU", 2, std::nullopt);
  add_row("head.dropout", "Dropout", 2, std::nullopt);
  add_row("head.classifier", "Conv2d", 2, model.classifier.parameter_count());
  return table;
}

// ---------------------------------------------------------------------------
// Weight files

namespace {

constexpr char kMagic[4] = {'F', 'C', 'N', 'W'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  os.write(b, 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  os.write(b, 8);
}

class Reader {
 public:
  Reader(std::istream& is, const std::filesystem::path& path) : is_(is), path_(path) {}

  void bytes(char* dst, std::size_t n) {
    is_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) throw DataError("truncated weight file " + path_.string());
  }
  std::uint32_t u32() {
    unsigned char b[4];
    bytes(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }
  std::uint64_t u64() {
    unsigned char b[8];
    bytes(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }

 private:
  std::istream& is_;
  const std::filesystem::path& path_;
};

std::string spec_header(const ModelSpec& spec) {
  std::ostringstream os;
  os << "num_classes=" << spec.num_classes << '\n';
  os << "block_counts=" << spec.block_counts[0] << ',' << spec.block_counts[1] << ',' << spec.block_counts[2] << ','
     << spec.block_counts[3] << '\n';
  os << "base_width=" << spec.base_width << '\n';
  return os.str();
}

ModelSpec parse_spec_header(const std::string& text, const std::filesystem::path& path) {
  ModelSpec spec;
  std::istringstream is(text);
  std::string line;
  bool seen[3] = {false, false, false};
  auto fail = [&](const std::string& why) { return DataError("bad weight file header in " + path.string() + ": " + why); };
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw fail("line without '='");
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    try {
      if (key == "num_classes") {
        spec.num_classes = std::stoul(value);
        seen[0] = true;
      } else if (key == "block_counts") {
        std::istringstream vs(value);
        std::string item;
        std::size_t k = 0;
        while (std::getline(vs, item, ',')) {
          if (k >= 4) throw fail("block_counts needs 4 values");
          spec.block_counts[k++] = std::stoul(item);
        }
        if (k != 4) throw fail("block_counts needs 4 values");
        seen[1] = true;
      } else if (key == "base_width") {
        spec.base_width = std::stoul(value);
        seen[2] = true;
      }
    } catch (const std::logic_error&) {
      throw fail("unparsable value for " + key);
    }
  }
  if (!seen[0] || !seen[1] || !seen[2]) throw fail("missing spec field");
  try {
    spec.validate();
  } catch (const ConfigError& e) {
    throw fail(e.what());
  }
  return spec;
}

struct Record {
  Shape shape;
  std::vector<float> values;
};

struct WeightFile {
  ModelSpec spec;
  std::vector<std::pair<std::string, Record>> records;
};

WeightFile read_weight_file(const std::filesystem::path& path, bool header_only) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open weight file " + path.string());
  Reader r(is, path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw DataError("not a weight file (bad magic): " + path.string());
  const std::uint32_t version = r.u32();
  if (version != kVersion) {
    throw DataError("unsupported weight file version " + std::to_string(version) + " in " + path.string());
  }
  const std::uint32_t header_len = r.u32();
  if (header_len > (1u << 20)) throw DataError("weight file header too large in " + path.string());
  std::string header(header_len, '\0');
  r.bytes(header.data(), header_len);
  WeightFile wf;
  wf.spec = parse_spec_header(header, path);
  if (header_only) return wf;
  const std::uint32_t count = r.u32();
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::uint32_t name_len = r.u32();
    if (name_len > 4096) throw DataError("tensor name too long in " + path.string());
    std::string name(name_len, '\0');
    r.bytes(name.data(), name_len);
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) throw DataError("bad rank for tensor " + name + " in " + path.string());
    Record rec;
    std::uint64_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint64_t extent = r.u64();
      if (extent == 0 || extent > (std::uint64_t{1} << 32) || numel > (std::uint64_t{1} << 34) / extent) {
        throw DataError("bad dimensions for tensor " + name + " in " + path.string());
      }
      numel *= extent;
      rec.shape.push_back(static_cast<std::size_t>(extent));
    }
    rec.values.resize(static_cast<std::size_t>(numel));
    std::vector<unsigned char> raw(rec.values.size() * 4);
    r.bytes(reinterpret_cast<char*>(raw.data()), raw.size());
    for (std::size_t i = 0; i < rec.values.size(); ++i) {
      const std::uint32_t bits = static_cast<std::uint32_t>(raw[4 * i]) | (static_cast<std::uint32_t>(raw[4 * i + 1]) << 8) |
                                 (static_cast<std::uint32_t>(raw[4 * i + 2]) << 16) |
                                 (static_cast<std::uint32_t>(raw[4 * i + 3]) << 24);
      rec.values[i] = std::bit_cast<float>(bits);
    }
    wf.records.emplace_back(std::move(name), std::move(rec));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw DataError("trailing bytes after tensors in " + path.string());
  return wf;
}

template <typename T>
void apply_records(Model<T>& model, WeightFile& wf, const std::filesystem::path& path, bool strict) {
  std::map<std::string, Record*> by_name;
  for (auto& [name, rec] : wf.records) {
    if (!by_name.emplace(name, &rec).second) throw DataError("duplicate tensor " + name + " in " + path.string());
  }
  std::size_t used = 0;
  for (auto& entry : model.state()) {
    auto it = by_name.find(entry.name);
    if (it == by_name.end()) throw DataError("weight file " + path.string() + " lacks tensor " + entry.name);
    ++used;
    const Record& rec = *it->second;
    if (rec.shape != entry.shape) {
      if (!strict && entry.name.starts_with("head.classifier.")) continue;
      throw ShapeError("shape mismatch for tensor " + entry.name + ": file " + shape_str(rec.shape) + ", model " +
                       shape_str(entry.shape));
    }
    for (std::size_t i = 0; i < rec.values.size(); ++i) entry.values[i] = static_cast<T>(rec.values[i]);
  }
  if (strict && used != by_name.size()) throw DataError("weight file " + path.string() + " has unexpected tensors");
}

}  // namespace

template <typename T>
void save_weights(Model<T>& model, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write weight file " + path.string());
  os.write(kMagic, 4);
  put_u32(os, kVersion);
  const std::string header = spec_header(model.spec);
  put_u32(os, static_cast<std::uint32_t>(header.size()));
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  auto entries = model.state();
  put_u32(os, static_cast<std::uint32_t>(entries.size()));
  std::vector<char> buf;
  for (const auto& e : entries) {
    put_u32(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put_u32(os, static_cast<std::uint32_t>(e.shape.size()));
    for (std::size_t d : e.shape) put_u64(os, d);
    buf.resize(e.values.size() * 4);
    for (std::size_t i = 0; i < e.values.size(); ++i) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(e.values[i]));
      for (int k = 0; k < 4; ++k) buf[4 * i + k] = static_cast<char>((bits >> (8 * k)) & 0xFFu);
    }
    os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  }
  if (!os) throw DataError("failed writing weight file " + path.string());
}

ModelSpec read_weight_spec(const std::filesystem::path& path) { return read_weight_file(path, true).spec; }

template <typename T>
Model<T> load_weights(const std::filesystem::path& path) {
  WeightFile wf = read_weight_file(path, false);
  Rng rng(0);
  Model<T> model = build_fcn<T>(wf.spec, rng);
  apply_records(model, wf, path, true);
  return model;
}

template <typename T>
Model<T> load_weights(const std::filesystem::path& path, const ModelSpec& spec, const LoadOptions& options) {
  WeightFile wf = read_weight_file(path, false);
  if (wf.spec.block_counts != spec.block_counts || wf.spec.base_width != spec.base_width) {
    throw DataError("weight file " + path.string() + " was written for a different backbone");
  }
  Rng rng(options.seed);
  Model<T> model = build_fcn<T>(spec, rng);
  apply_records(model, wf, path, options.strict);
  return model;
}

#define MCTSEG_INSTANTIATE_MODEL(T)                                                                            \
  template struct Bottleneck<T>;                                                                               \
  template class Model<T>;                                                                                     \
  template Model<T> build_fcn<T>(const ModelSpec&, Rng&);                                                      \
  template Tensor<T> forward<T>(Model<T>&, const Tensor<T>&, Rng*, ShapeTrace*);                               \
  template Tensor<T> infer<T>(const Model<T>&, const Tensor<T>&, ShapeTrace*);                                 \
  template void replace_classifier<T>(Model<T>&, std::size_t, Rng&);                                           \
  template LayerTable summarize<T>(const Model<T>&, std::size_t, std::size_t);                                 \
  template void save_weights<T>(Model<T>&, const std::filesystem::path&);                                      \
  template Model<T> load_weights<T>(const std::filesystem::path&);                                             \
  template Model<T> load_weights<T>(const std::filesystem::path&, const ModelSpec&, const LoadOptions&);

MCTSEG_INSTANTIATE_MODEL(float)
MCTSEG_INSTANTIATE_MODEL(double)

}  // namespace mctseg
