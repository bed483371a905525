#include "mctseg/volume.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "mctseg/errors.hpp"
#include "mctseg/parallel.hpp"

namespace fs = std::filesystem;

namespace mctseg {

std::size_t BinarySlice::area() const {
  return static_cast<std::size_t>(std::count_if(bits.begin(), bits.end(), [](std::uint8_t b) { return b != 0; }));
}

std::vector<BinarySlice> binarize(const LabelMask& labels, std::size_t num_classes, std::size_t slice_order) {
  std::vector<BinarySlice> out(num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) {
    out[c].class_index = c;
    out[c].width = labels.width;
    out[c].height = labels.height;
    out[c].slice_order = slice_order;
    out[c].bits.assign(labels.labels.size(), 0);
  }
  for (std::size_t i = 0; i < labels.labels.size(); ++i) {
    const std::size_t c = labels.labels[i];
    if (c >= num_classes) throw DataError("label " + std::to_string(c) + " exceeds class count " + std::to_string(num_classes));
    out[c].bits[i] = 255;
  }
  return out;
}

std::vector<std::vector<BinarySlice>> predict_slices(const LogitPredictor& predictor,
                                                     const std::vector<GrayImage>& images, std::size_t num_classes,
                                                     double scale, std::size_t jobs) {
  for (const auto& img : images) {
    if (img.width != images.front().width || img.height != images.front().height) {
      throw DataError("slice sizes differ: " + std::to_string(images.front().width) + "x" +
                      std::to_string(images.front().height) + " vs " + std::to_string(img.width) + "x" +
                      std::to_string(img.height));
    }
  }
  std::vector<std::vector<BinarySlice>> per_slice(images.size());
  parallel_for(images.size(), jobs, [&](std::size_t i) {
    const Tensor<float> logits = predictor(downscale(images[i], scale));
    if (logits.rank() != 4 || logits.dim(1) != num_classes) {
      throw DataError("predictor emits " + shape_str(logits.shape()) + " for " + std::to_string(num_classes) + " classes");
    }
    per_slice[i] = binarize(argmax_labels(logits), num_classes, i);
  });
  std::vector<std::vector<BinarySlice>> per_class(num_classes);
  for (auto& slices : per_slice) {
    for (std::size_t c = 0; c < num_classes; ++c) per_class[c].push_back(std::move(slices[c]));
  }
  return per_class;
}

std::vector<std::vector<BinarySlice>> predict_slices(const Model<float>& model, const std::vector<GrayImage>& images,
                                                     const ClassMap& classes, double scale, std::size_t jobs) {
  if (model.spec.num_classes != classes.size()) {
    throw DataError("model predicts " + std::to_string(model.spec.num_classes) + " classes but the class map has " +
                    std::to_string(classes.size()));
  }
  return predict_slices(model_predictor(model), images, classes.size(), scale, jobs);
}

// --- volumes ---------------------------------------------------------------

std::size_t Volume::foreground_count() const {
  return static_cast<std::size_t>(std::count_if(voxels.begin(), voxels.end(), [](std::uint8_t b) { return b != 0; }));
}

std::string Volume::manifest() const {
  std::ostringstream os;
  os << "class_name = " << class_name << '\n'
     << "class_index = " << class_index << '\n'
     << "width = " << width << '\n'
     << "height = " << height << '\n'
     << "depth = " << depth << '\n'
     << "slices =";
  for (std::size_t s : slice_orders) os << ' ' << s;
  os << '\n';
  return os.str();
}

Volume stack(std::vector<BinarySlice> slices, const std::string& class_name) {
  if (slices.empty()) throw DataError("no slices to stack for class " + class_name);
  std::sort(slices.begin(), slices.end(),
            [](const BinarySlice& a, const BinarySlice& b) { return a.slice_order < b.slice_order; });
  Volume v;
  v.class_index = slices.front().class_index;
  v.class_name = class_name;
  v.width = slices.front().width;
  v.height = slices.front().height;
  v.depth = slices.size();
  v.voxels.reserve(v.width * v.height * v.depth);
  for (std::size_t i = 0; i < slices.size(); ++i) {
    const BinarySlice& s = slices[i];
    if (i > 0 && s.slice_order == slices[i - 1].slice_order) {
      throw DataError("duplicate slice order " + std::to_string(s.slice_order));
    }
    if (s.width != v.width || s.height != v.height) {
      throw DataError("slice " + std::to_string(s.slice_order) + " is " + std::to_string(s.width) + "x" +
                      std::to_string(s.height) + ", expected " + std::to_string(v.width) + "x" + std::to_string(v.height));
    }
    if (s.class_index != v.class_index) throw DataError("slices from different classes cannot be stacked");
    v.voxels.insert(v.voxels.end(), s.bits.begin(), s.bits.end());
    v.slice_orders.push_back(s.slice_order);
  }
  return v;
}

void write_rawvol(const Volume& volume, const fs::path& path) {
  if (volume.class_name.empty() || volume.class_name.find_first_of(" \t\r\n") != std::string::npos) {
    throw DataError("class name '" + volume.class_name + "' cannot be stored in a RAWVOL1 header");
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  os << "RAWVOL1 " << volume.width << ' ' << volume.height << ' ' << volume.depth << ' ' << volume.class_name << '\n';
  os.write(reinterpret_cast<const char*>(volume.voxels.data()), static_cast<std::streamsize>(volume.voxels.size()));
  if (!os) throw DataError("write failed for " + path.string());
}

Volume read_rawvol(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  std::string header;
  if (!std::getline(is, header)) throw DataError(path.string() + ": missing RAWVOL1 header");
  std::istringstream hs(header);
  std::string magic;
  Volume v;
  if (!(hs >> magic >> v.width >> v.height >> v.depth >> v.class_name) || magic != "RAWVOL1") {
    throw DataError(path.string() + ": malformed RAWVOL1 header");
  }
  v.voxels.resize(v.width * v.height * v.depth);
  is.read(reinterpret_cast<char*>(v.voxels.data()), static_cast<std::streamsize>(v.voxels.size()));
  if (static_cast<std::size_t>(is.gcount()) != v.voxels.size()) throw DataError(path.string() + ": truncated voxel data");
  if (is.peek() != std::char_traits<char>::eof()) throw DataError(path.string() + ": trailing bytes after voxel data");
  for (std::size_t i = 0; i < v.depth; ++i) v.slice_orders.push_back(i);
  return v;
}

std::string slice_file_name(const std::string& class_name, std::size_t order) {
  char digits[32];
  std::snprintf(digits, sizeof digits, "%05zu", order);
  return class_name + "_" + digits + ".pgm";
}

void write_slice_pgms(const std::vector<BinarySlice>& slices, const std::string& class_name, const fs::path& dir) {
  fs::create_directories(dir);
  for (const auto& s : slices) save_gray(GrayImage(s.width, s.height, s.bits), dir / slice_file_name(class_name, s.slice_order));
}

std::vector<BinarySlice> read_slice_pgms(const fs::path& dir, const std::string& class_name, std::size_t class_index) {
  if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir.string());
  std::vector<BinarySlice> out;
  const std::string prefix = class_name + "_";
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.size() <= prefix.size() + 4 || name.compare(0, prefix.size(), prefix) != 0 ||
        entry.path().extension() != ".pgm") {
      continue;
    }
    const std::string digits = name.substr(prefix.size(), name.size() - prefix.size() - 4);
    if (digits.empty() || !std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; })) continue;
    const GrayImage img = load_gray(entry.path());
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
      if (img.pixels[i] != 0 && img.pixels[i] != 255) {
        throw DataError(entry.path().string() + ": pixel value " + std::to_string(img.pixels[i]) + " at (" +
                        std::to_string(i % img.width) + "," + std::to_string(i / img.width) + ") is not binary");
      }
    }
    BinarySlice s;
    s.class_index = class_index;
    s.width = img.width;
    s.height = img.height;
    s.bits = img.pixels;
    s.slice_order = std::stoull(digits);
    out.push_back(std::move(s));
  }
  std::sort(out.begin(), out.end(), [](const BinarySlice& a, const BinarySlice& b) { return a.slice_order < b.slice_order; });
  return out;
}

// --- morphology ------------------------------------------------------------

std::size_t perimeter(const BinarySlice& slice) {
  const std::size_t w = slice.width, h = slice.height;
  std::size_t edges = 0;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      if (!slice.at(x, y)) continue;
      edges += (x == 0 || !slice.at(x - 1, y));
      edges += (x + 1 == w || !slice.at(x + 1, y));
      edges += (y == 0 || !slice.at(x, y - 1));
      edges += (y + 1 == h || !slice.at(x, y + 1));
    }
  }
  return edges;
}

std::string StatsTable::to_csv() const {
  std::string out = std::string(kStatsCsvHeader) + "\n";
  for (const auto& r : rows) {
    out += r.slice + "," + std::to_string(r.class_index) + "," + r.class_name + "," + std::to_string(r.area_px) + "," +
           std::to_string(r.perimeter_px) + "," + (r.area_physical ? format_real(*r.area_physical) : "") + "," + r.unit +
           "\n";
  }
  return out;
}

StatsTable slice_stats(const std::vector<std::vector<BinarySlice>>& per_class, const ClassMap& classes,
                       std::optional<double> pixel_size, const std::string& unit) {
  if (pixel_size && !(*pixel_size > 0)) throw ConfigError("pixel size must be > 0");
  StatsTable table;
  for (const auto& slices : per_class) {
    if (slices.empty()) continue;
    const std::size_t c = slices.front().class_index;
    const std::string& name = classes.name(c);
    std::uint64_t total_area = 0, total_perimeter = 0;
    for (const auto& s : slices) {
      SliceStatsRow row;
      row.slice = std::to_string(s.slice_order);
      row.class_index = c;
      row.class_name = name;
      row.area_px = s.area();
      row.perimeter_px = perimeter(s);
      if (pixel_size) {
        row.area_physical = static_cast<double>(row.area_px) * *pixel_size * *pixel_size;
        row.unit = unit + "^2";
      }
      total_area += row.area_px;
      total_perimeter += row.perimeter_px;
      table.rows.push_back(std::move(row));
    }
    SliceStatsRow total;
    total.slice = "TOTAL";
    total.class_index = c;
    total.class_name = name;
    total.area_px = total_area;
    total.perimeter_px = total_perimeter;
    if (pixel_size) {
      total.area_physical = static_cast<double>(total_area) * *pixel_size * *pixel_size * *pixel_size;
      total.unit = unit + "^3";
    }
    table.rows.push_back(std::move(total));
  }
  return table;
}

}  // namespace mctseg
