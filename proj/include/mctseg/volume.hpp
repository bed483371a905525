#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mctseg/image.hpp"
#include "mctseg/metrics.hpp"

namespace mctseg {

/// Per-class prediction for one slice: 255 where the class won, 0 elsewhere.
struct BinarySlice {
  std::size_t class_index = 0;
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> bits;
  std::size_t slice_order = 0;

  std::size_t area() const;
  bool at(std::size_t x, std::size_t y) const { return bits[y * width + x] != 0; }
};

/// One BinarySlice per class (index order) from a label mask.
std::vector<BinarySlice> binarize(const LabelMask& labels, std::size_t num_classes, std::size_t slice_order);

/// Outer index: class; inner: slices in input order. Slice orders are the
/// positions in `images`.
std::vector<std::vector<BinarySlice>> predict_slices(const LogitPredictor& predictor,
                                                     const std::vector<GrayImage>& images, std::size_t num_classes,
                                                     double scale, std::size_t jobs = 1);

std::vector<std::vector<BinarySlice>> predict_slices(const Model<float>& model, const std::vector<GrayImage>& images,
                                                     const ClassMap& classes, double scale, std::size_t jobs = 1);

/// Slice-major {0,255} voxels.
struct Volume {
  std::size_t class_index = 0;
  std::string class_name;
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t depth = 0;
  std::vector<std::uint8_t> voxels;
  std::vector<std::size_t> slice_orders;

  std::size_t foreground_count() const;
  std::string manifest() const;
  bool operator==(const Volume&) const = default;
};

/// Orders slices by slice_order. All slices must belong to one class and share dimensions.
Volume stack(std::vector<BinarySlice> slices, const std::string& class_name);

/// "RAWVOL1 <w> <h> <d> <class_name>\n" followed by w*h*d bytes.
void write_rawvol(const Volume& volume, const std::filesystem::path& path);
Volume read_rawvol(const std::filesystem::path& path);

/// `<class_name>_<order:05d>.pgm`
std::string slice_file_name(const std::string& class_name, std::size_t order);
void write_slice_pgms(const std::vector<BinarySlice>& slices, const std::string& class_name,
                      const std::filesystem::path& dir);
/// Reads every `<class_name>_NNNNN.pgm` in `dir`; non-binary pixels are a DataError.
std::vector<BinarySlice> read_slice_pgms(const std::filesystem::path& dir, const std::string& class_name,
                                         std::size_t class_index);

/// 4-connected edges between foreground and background or the image border.
std::size_t perimeter(const BinarySlice& slice);

struct SliceStatsRow {
  std::string slice;  // slice order, or "TOTAL" for the per-class volume row
  std::size_t class_index = 0;
  std::string class_name;
  std::uint64_t area_px = 0;
  std::uint64_t perimeter_px = 0;
  std::optional<double> area_physical;
  std::string unit;
};

inline constexpr const char* kStatsCsvHeader = "slice,class_index,class_name,area_px,perimeter_px,area_physical,unit";

struct StatsTable {
  std::vector<SliceStatsRow> rows;
  std::string to_csv() const;
};

/// Per slice and class: area and perimeter, plus area * pixel_size^2 when a
/// pixel size is given. Each class ends with a TOTAL row holding the voxel
/// count, summed perimeter and, when a pixel size is given, the physical
/// volume (voxels * pixel_size^3, unit suffixed with ^3).
StatsTable slice_stats(const std::vector<std::vector<BinarySlice>>& per_class, const ClassMap& classes,
                       std::optional<double> pixel_size = std::nullopt, const std::string& unit = "");

}  // namespace mctseg
