#include "mctseg/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <sstream>

#include "mctseg/errors.hpp"

namespace mctseg {

namespace fs = std::filesystem;

// Guards against absurd headers before any allocation.
constexpr std::size_t kMaxPixels = std::size_t{1} << 31;

GrayImage::GrayImage(std::size_t w, std::size_t h, std::vector<std::uint8_t> px)
    : width(w), height(h), pixels(std::move(px)) {
  if (w == 0 || h == 0 || w * h != pixels.size()) throw DataError("image dimensions do not match pixel count");
}

GrayImage::GrayImage(std::size_t w, std::size_t h, std::uint8_t fill) : GrayImage(w, h, std::vector<std::uint8_t>(w * h, fill)) {}

LabelMask::LabelMask(std::size_t w, std::size_t h, std::vector<std::uint8_t> lb)
    : width(w), height(h), labels(std::move(lb)) {
  if (w == 0 || h == 0 || w * h != labels.size()) throw DataError("mask dimensions do not match label count");
}

LabelMask::LabelMask(std::size_t w, std::size_t h, std::uint8_t fill) : LabelMask(w, h, std::vector<std::uint8_t>(w * h, fill)) {}

// ---------------------------------------------------------------------------
// ClassMap

ClassMap::ClassMap(std::vector<ClassEntry> entries) : entries_(std::move(entries)) {
  if (entries_.size() < 2) throw DataError("class map needs at least 2 classes");
  if (entries_.size() > 256) throw DataError("class map supports at most 256 classes");
  std::sort(entries_.begin(), entries_.end(),
            [](const ClassEntry& a, const ClassEntry& b) { return a.class_index < b.class_index; });
  lookup_.fill(-1);
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const ClassEntry& e = entries_[i];
    if (e.class_index != i) {
      throw DataError("class indices must cover 0.." + std::to_string(entries_.size() - 1) +
                      " exactly once; problem at index " + std::to_string(e.class_index));
    }
    if (lookup_[e.pixel_value] >= 0) {
      throw DataError("pixel value " + std::to_string(e.pixel_value) + " is mapped more than once");
    }
    if (e.name.empty()) throw DataError("class " + std::to_string(i) + " has no name");
    lookup_[e.pixel_value] = static_cast<std::int16_t>(i);
  }
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    for (std::size_t j = i + 1; j < entries_.size(); ++j) {
      if (entries_[i].name == entries_[j].name) throw DataError("duplicate class name " + entries_[i].name);
    }
  }
}

ClassMap ClassMap::parse(std::string_view text) {
  std::vector<ClassEntry> entries;
  std::istringstream is{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    long pixel = 0, index = 0;
    std::string name;
    if (!(ls >> pixel)) continue;  // blank or comment-only line
    if (!(ls >> index >> name)) {
      throw DataError("class map line " + std::to_string(lineno) + ": expected `pixel_value class_index class_name`");
    }
    std::string extra;
    if (ls >> extra) throw DataError("class map line " + std::to_string(lineno) + ": unexpected trailing text");
    if (pixel < 0 || pixel > 255) throw DataError("class map line " + std::to_string(lineno) + ": pixel value out of range");
    if (index < 0 || index > 255) throw DataError("class map line " + std::to_string(lineno) + ": class index out of range");
    entries.push_back({static_cast<std::uint8_t>(pixel), static_cast<std::size_t>(index), name});
  }
  return ClassMap(std::move(entries));
}

ClassMap ClassMap::load(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open class map " + path.string());
  std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  try {
    return parse(text);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

std::string ClassMap::to_text() const {
  std::ostringstream os;
  os << "# pixel_value class_index class_name\n";
  for (const auto& e : entries_) os << static_cast<int>(e.pixel_value) << ' ' << e.class_index << ' ' << e.name << '\n';
  return os.str();
}

std::optional<std::size_t> ClassMap::class_of(std::uint8_t pixel_value) const {
  const std::int16_t c = lookup_[pixel_value];
  if (c < 0) return std::nullopt;
  return static_cast<std::size_t>(c);
}

std::uint8_t ClassMap::pixel_of(std::size_t class_index) const {
  if (class_index >= entries_.size()) throw DataError("class index " + std::to_string(class_index) + " out of range");
  return entries_[class_index].pixel_value;
}

const std::string& ClassMap::name(std::size_t class_index) const {
  if (class_index >= entries_.size()) throw DataError("class index " + std::to_string(class_index) + " out of range");
  return entries_[class_index].name;
}

std::optional<std::size_t> ClassMap::find(std::string_view name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e.class_index;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// PGM / PNG

namespace {

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw DataError("failed writing " + path.string());
}

bool is_space(std::uint8_t c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

class PgmHeaderReader {
 public:
  explicit PgmHeaderReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t number(const char* what) {
    skip_space_and_comments();
    if (pos_ >= bytes_.size() || bytes_[pos_] < '0' || bytes_[pos_] > '9') {
      throw DataError(std::string("corrupt PGM header: missing ") + what);
    }
    std::size_t v = 0;
    while (pos_ < bytes_.size() && bytes_[pos_] >= '0' && bytes_[pos_] <= '9') {
      const std::size_t digit = bytes_[pos_++] - '0';
      if (v > (std::numeric_limits<std::uint32_t>::max() - digit) / 10) {
        throw DataError(std::string("PGM dimension overflow in ") + what);
      }
      v = v * 10 + digit;
    }
    return v;
  }

  // Exactly one whitespace byte separates maxval from the raster.
  std::size_t raster_offset() {
    if (pos_ >= bytes_.size() || !is_space(bytes_[pos_])) throw DataError("corrupt PGM header: no separator before raster");
    return pos_ + 1;
  }

 private:
  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (is_space(bytes_[pos_])) {
        ++pos_;
      } else if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 2;
};

bool is_png(std::span<const std::uint8_t> b) {
  static constexpr std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
  return b.size() >= 8 && std::equal(sig, sig + 8, b.begin());
}

}  // namespace

GrayImage decode_pgm(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P') throw DataError("not a PGM file");
  if (bytes[1] != '5') throw DataError(std::string("unsupported PNM variant P") + static_cast<char>(bytes[1]) + "; only binary P5 is accepted");
  PgmHeaderReader r(bytes);
  const std::size_t width = r.number("width");
  const std::size_t height = r.number("height");
  const std::size_t maxval = r.number("maxval");
  if (width == 0 || height == 0) throw DataError("PGM has a zero dimension");
  if (width > kMaxPixels / height) throw DataError("PGM dimension overflow: " + std::to_string(width) + "x" + std::to_string(height));
  if (maxval != 255) {
    throw DataError("unsupported PGM depth: maxval " + std::to_string(maxval) + " (only 8-bit maxval 255 is accepted)");
  }
  const std::size_t offset = r.raster_offset();
  if (bytes.size() - offset < width * height) throw DataError("truncated PGM raster");
  return GrayImage(width, height, std::vector<std::uint8_t>(bytes.begin() + offset, bytes.begin() + offset + width * height));
}

std::vector<std::uint8_t> encode_pgm(const GrayImage& image) {
  const std::string header = "P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), image.pixels.begin(), image.pixels.end());
  return out;
}

GrayImage decode_png(std::span<const std::uint8_t> bytes) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
    throw DataError(std::string("corrupt PNG: ") + img.message);
  }
  const auto flags = PNG_FORMAT_FLAG_COLOR | PNG_FORMAT_FLAG_ALPHA | PNG_FORMAT_FLAG_LINEAR | PNG_FORMAT_FLAG_COLORMAP;
  if ((img.format & flags) != 0) {
    png_image_free(&img);
    throw DataError("unsupported PNG: only 8-bit single-channel grayscale without alpha is accepted");
  }
  if (img.width == 0 || img.height == 0 || img.width > kMaxPixels / img.height) {
    png_image_free(&img);
    throw DataError("PNG dimension overflow");
  }
  img.format = PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> px(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, px.data(), 0, nullptr)) {
    throw DataError(std::string("corrupt PNG: ") + img.message);
  }
  return GrayImage(img.width, img.height, std::move(px));
}

std::vector<std::uint8_t> encode_png(const GrayImage& image) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, image.pixels.data(), 0, nullptr)) {
    throw DataError(std::string("PNG encode failed: ") + img.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, image.pixels.data(), 0, nullptr)) {
    throw DataError(std::string("PNG encode failed: ") + img.message);
  }
  out.resize(size);
  return out;
}

GrayImage load_gray(const fs::path& path) {
  const auto bytes = read_file(path);
  try {
    if (is_png(bytes)) return decode_png(bytes);
    return decode_pgm(bytes);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void save_gray(const GrayImage& image, const fs::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  write_file(path, ext == ".png" ? encode_png(image) : encode_pgm(image));
}

std::vector<fs::path> list_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    std::string ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (ext == ".pgm" || ext == ".png") out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end(), [](const fs::path& a, const fs::path& b) { return a.filename() < b.filename(); });
  return out;
}

// ---------------------------------------------------------------------------
// Masks

LabelMask decode_mask(const GrayImage& image, const ClassMap& map) {
  LabelMask mask(image.width, image.height);
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) {
      const std::uint8_t v = image.at(x, y);
      const auto c = map.class_of(v);
      if (!c) {
        throw DataError("mask pixel value " + std::to_string(v) + " is not in the class map (first at x=" +
                        std::to_string(x) + ", y=" + std::to_string(y) + ")");
      }
      mask.at(x, y) = static_cast<std::uint8_t>(*c);
    }
  }
  return mask;
}

GrayImage encode_mask(const LabelMask& mask, const ClassMap& map) {
  GrayImage image(mask.width, mask.height);
  for (std::size_t i = 0; i < mask.labels.size(); ++i) image.pixels[i] = map.pixel_of(mask.labels[i]);
  return image;
}

LabelMask compose_three_layer_mask(const LabelMask& base, const GrayImage& air_binary, std::size_t air_class) {
  if (base.width != air_binary.width || base.height != air_binary.height) {
    throw DataError("air mask is " + std::to_string(air_binary.width) + "x" + std::to_string(air_binary.height) +
                    " but base mask is " + std::to_string(base.width) + "x" + std::to_string(base.height));
  }
  if (air_class > 255) throw DataError("air class index out of range");
  LabelMask out = base;
  for (std::size_t i = 0; i < base.labels.size(); ++i) {
    const std::uint8_t v = air_binary.pixels[i];
    if (v == 255) {
      out.labels[i] = static_cast<std::uint8_t>(air_class);
    } else if (v != 0) {
      throw DataError("air mask must be binary {0,255}; found value " + std::to_string(v));
    }
  }
  return out;
}

std::vector<SamplePair> load_pairs(const fs::path& images_dir, const fs::path& masks_dir, const ClassMap& map) {
  const auto images = list_images(images_dir);
  if (images.empty()) throw DataError("no .pgm/.png images in " + images_dir.string());
  std::map<std::string, fs::path> masks;
  for (const auto& p : list_images(masks_dir)) masks.emplace(p.stem().string(), p);
  std::vector<SamplePair> pairs;
  for (const auto& img_path : images) {
    const std::string id = img_path.stem().string();
    auto it = masks.find(id);
    if (it == masks.end()) throw DataError("no mask for image " + img_path.string() + " in " + masks_dir.string());
    SamplePair pair{load_gray(img_path), decode_mask(load_gray(it->second), map), id};
    if (pair.image.width != pair.mask.width || pair.image.height != pair.mask.height) {
      throw DataError("image and mask sizes differ for " + id);
    }
    pairs.push_back(std::move(pair));
  }
  std::sort(pairs.begin(), pairs.end(), [](const SamplePair& a, const SamplePair& b) { return a.id < b.id; });
  return pairs;
}

// ---------------------------------------------------------------------------
// Rescaling

namespace {

void check_factor(double factor) {
  if (!(factor > 0.0 && factor <= 1.0)) throw ConfigError("scale factor must lie in (0, 1], got " + std::to_string(factor));
}

}  // namespace

std::size_t scaled_extent(std::size_t extent, double factor) {
  check_factor(factor);
  const auto r = std::llround(static_cast<double>(extent) * factor);
  return r < 1 ? 1 : static_cast<std::size_t>(r);
}

GrayImage downscale(const GrayImage& image, double factor) {
  const std::size_t ow = scaled_extent(image.width, factor), oh = scaled_extent(image.height, factor);
  if (ow == image.width && oh == image.height) return image;
  auto axis = [](std::size_t in, std::size_t out, std::size_t d, std::size_t& lo, std::size_t& hi, double& frac) {
    double src = (static_cast<double>(d) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
    if (src < 0.0) src = 0.0;
    lo = std::min(static_cast<std::size_t>(src), in - 1);
    hi = lo + 1 < in ? lo + 1 : lo;
    frac = src - static_cast<double>(lo);
  };
  GrayImage out(ow, oh);
  for (std::size_t y = 0; y < oh; ++y) {
    std::size_t y0, y1;
    double fy;
    axis(image.height, oh, y, y0, y1, fy);
    for (std::size_t x = 0; x < ow; ++x) {
      std::size_t x0, x1;
      double fx;
      axis(image.width, ow, x, x0, x1, fx);
      const double top = (1.0 - fx) * image.at(x0, y0) + fx * image.at(x1, y0);
      const double bot = (1.0 - fx) * image.at(x0, y1) + fx * image.at(x1, y1);
      const double v = (1.0 - fy) * top + fy * bot;
      out.at(x, y) = static_cast<std::uint8_t>(std::clamp<long>(std::lround(v), 0, 255));
    }
  }
  return out;
}

LabelMask downscale(const LabelMask& mask, double factor) {
  const std::size_t ow = scaled_extent(mask.width, factor), oh = scaled_extent(mask.height, factor);
  if (ow == mask.width && oh == mask.height) return mask;
  auto nearest = [](std::size_t in, std::size_t out, std::size_t d) {
    const auto src = static_cast<std::size_t>((static_cast<double>(d) + 0.5) * static_cast<double>(in) / static_cast<double>(out));
    return std::min(src, in - 1);
  };
  LabelMask out(ow, oh);
  for (std::size_t y = 0; y < oh; ++y) {
    const std::size_t sy = nearest(mask.height, oh, y);
    for (std::size_t x = 0; x < ow; ++x) out.at(x, y) = mask.at(nearest(mask.width, ow, x), sy);
  }
  return out;
}

SamplePair downscale(const SamplePair& pair, double factor) {
  return {downscale(pair.image, factor), downscale(pair.mask, factor), pair.id};
}

// ---------------------------------------------------------------------------
// Tensors

template <typename T>
Tensor<T> to_model_input(const GrayImage& image, const InputNormalization& norm) {
  const std::size_t hw = image.width * image.height;
  std::vector<T> data(3 * hw);
  for (std::size_t c = 0; c < 3; ++c) {
    if (!(norm.stddev[c] > 0.0)) throw ConfigError("input normalization stddev must be positive");
    for (std::size_t i = 0; i < hw; ++i) {
      data[c * hw + i] = static_cast<T>((image.pixels[i] / 255.0 - norm.mean[c]) / norm.stddev[c]);
    }
  }
  return Tensor<T>({1, 3, image.height, image.width}, std::move(data));
}

template <typename T>
Tensor<T> to_onehot(const LabelMask& mask, std::size_t num_classes) {
  const std::size_t hw = mask.width * mask.height;
  std::vector<T> data(num_classes * hw, T{0});
  for (std::size_t i = 0; i < hw; ++i) {
    const std::size_t c = mask.labels[i];
    if (c >= num_classes) {
      throw DataError("label " + std::to_string(c) + " is not below the class count " + std::to_string(num_classes));
    }
    data[c * hw + i] = T{1};
  }
  return Tensor<T>({1, num_classes, mask.height, mask.width}, std::move(data));
}

template <typename T>
LabelMask argmax_labels(const Tensor<T>& logits) {
  if (logits.rank() != 4 || logits.dim(0) != 1) throw ShapeError("argmax_labels expects [1,C,H,W], got " + shape_str(logits.shape()));
  const std::size_t c = logits.dim(1), h = logits.dim(2), w = logits.dim(3), hw = h * w;
  if (c > 256) throw ShapeError("argmax_labels supports at most 256 classes");
  const auto v = logits.data();
  LabelMask mask(w, h);
  for (std::size_t i = 0; i < hw; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < c; ++k) {
      if (v[k * hw + i] > v[best * hw + i]) best = k;
    }
    mask.labels[i] = static_cast<std::uint8_t>(best);
  }
  return mask;
}

template Tensor<float> to_model_input<float>(const GrayImage&, const InputNormalization&);
template Tensor<double> to_model_input<double>(const GrayImage&, const InputNormalization&);
template Tensor<float> to_onehot<float>(const LabelMask&, std::size_t);
template Tensor<double> to_onehot<double>(const LabelMask&, std::size_t);
template LabelMask argmax_labels<float>(const Tensor<float>&);
template LabelMask argmax_labels<double>(const Tensor<double>&);

}  // namespace mctseg
