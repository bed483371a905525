#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mctseg/tensor.hpp"

namespace mctseg {

/// 8-bit single-channel image, row-major.
struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  GrayImage() = default;
  GrayImage(std::size_t w, std::size_t h, std::vector<std::uint8_t> px);
  GrayImage(std::size_t w, std::size_t h, std::uint8_t fill = 0);

  std::uint8_t at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }
  std::uint8_t& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
  bool operator==(const GrayImage&) const = default;
};

/// Per-pixel class indices.
struct LabelMask {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> labels;

  LabelMask() = default;
  LabelMask(std::size_t w, std::size_t h, std::vector<std::uint8_t> lb);
  LabelMask(std::size_t w, std::size_t h, std::uint8_t fill = 0);

  std::uint8_t at(std::size_t x, std::size_t y) const { return labels[y * width + x]; }
  std::uint8_t& at(std::size_t x, std::size_t y) { return labels[y * width + x]; }
  bool operator==(const LabelMask&) const = default;
};

struct ClassEntry {
  std::uint8_t pixel_value = 0;
  std::size_t class_index = 0;
  std::string name;
};

/// Bijection between grayscale annotation values and class indices 0..C-1.
/// Class 0 is the background.
///
/// Text form: one `pixel_value class_index class_name` entry per line; `#`
/// starts a comment.
class ClassMap {
 public:
  ClassMap() = default;
  explicit ClassMap(std::vector<ClassEntry> entries);

  static ClassMap parse(std::string_view text);
  static ClassMap load(const std::filesystem::path& path);
  std::string to_text() const;

  std::size_t size() const { return entries_.size(); }
  /// Entries ordered by class index.
  const std::vector<ClassEntry>& entries() const { return entries_; }
  std::optional<std::size_t> class_of(std::uint8_t pixel_value) const;
  std::uint8_t pixel_of(std::size_t class_index) const;
  const std::string& name(std::size_t class_index) const;
  std::optional<std::size_t> find(std::string_view name) const;

 private:
  std::vector<ClassEntry> entries_;
  std::array<std::int16_t, 256> lookup_{};
};

struct SamplePair {
  GrayImage image;
  LabelMask mask;
  std::string id;
};

// --- image files -----------------------------------------------------------

/// Reads binary PGM (P5, maxval 255) or 8-bit grayscale PNG, chosen by magic bytes.
GrayImage load_gray(const std::filesystem::path& path);
GrayImage decode_pgm(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_pgm(const GrayImage& image);
GrayImage decode_png(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_png(const GrayImage& image);
/// Writes PNG for a `.png` extension, PGM otherwise.
void save_gray(const GrayImage& image, const std::filesystem::path& path);

/// Regular files with a .pgm or .png extension, sorted by file name.
std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir);

// --- masks -----------------------------------------------------------------

LabelMask decode_mask(const GrayImage& image, const ClassMap& map);
GrayImage encode_mask(const LabelMask& mask, const ClassMap& map);

/// Overlays a binary {0,255} air-space mask onto a tissue mask: 255 pixels
/// become `air_class`, 0 pixels keep the base label.
LabelMask compose_three_layer_mask(const LabelMask& base, const GrayImage& air_binary, std::size_t air_class);

/// Pairs images with masks of the same file stem. Result sorted by id.
std::vector<SamplePair> load_pairs(const std::filesystem::path& images_dir, const std::filesystem::path& masks_dir,
                                   const ClassMap& map);

// --- rescaling -------------------------------------------------------------

/// max(1, round(extent * factor))
std::size_t scaled_extent(std::size_t extent, double factor);

/// Half-pixel bilinear resampling, rounded back to 8 bits.
GrayImage downscale(const GrayImage& image, double factor);
/// Nearest-neighbor resampling so labels stay valid.
LabelMask downscale(const LabelMask& mask, double factor);
SamplePair downscale(const SamplePair& pair, double factor);

// --- tensors ---------------------------------------------------------------

struct InputNormalization {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> stddev{1.0, 1.0, 1.0};
};

/// [1,3,H,W] tensor: pixel/255 replicated across three channels, then
/// (value - mean[c]) / stddev[c].
template <typename T>
Tensor<T> to_model_input(const GrayImage& image, const InputNormalization& norm = {});

/// [1,C,H,W] one-hot planes.
template <typename T>
Tensor<T> to_onehot(const LabelMask& mask, std::size_t num_classes);

/// Channel argmax of a [1,C,H,W] tensor; ties resolve to the lowest class.
template <typename T>
LabelMask argmax_labels(const Tensor<T>& logits);

}  // namespace mctseg
