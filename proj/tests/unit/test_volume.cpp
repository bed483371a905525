#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "mctseg/errors.hpp"
#include "mctseg/volume.hpp"
#include "test_support.hpp"

using namespace mctseg;
namespace fs = std::filesystem;

namespace {

BinarySlice slice_of(std::size_t w, std::size_t h, std::size_t order, Rng& rng, std::size_t class_index = 1) {
  BinarySlice s;
  s.class_index = class_index;
  s.width = w;
  s.height = h;
  s.slice_order = order;
  s.bits.resize(w * h);
  for (auto& b : s.bits) b = rng.below(2) ? 255 : 0;
  return s;
}

/// Counts foreground/background and foreground/outside transitions one edge at a time.
std::size_t brute_perimeter(const BinarySlice& s) {
  auto fg = [&](long x, long y) {
    return x >= 0 && y >= 0 && x < static_cast<long>(s.width) && y < static_cast<long>(s.height) && s.at(x, y);
  };
  std::size_t edges = 0;
  for (long y = -1; y <= static_cast<long>(s.height); ++y)
    for (long x = -1; x <= static_cast<long>(s.width); ++x) {
      if (fg(x, y) != fg(x + 1, y)) ++edges;
      if (fg(x, y) != fg(x, y + 1)) ++edges;
    }
  return edges;
}

const ClassMap kClasses = ClassMap::parse("0 0 background\n128 1 tissue\n255 2 air\n");

}  // namespace

TEST_SUITE("slices") {
  TEST_CASE("binarized planes partition the image") {
    Rng rng(1);
    const LabelMask mask = testing::random_mask(17, 11, 4, rng);
    const auto planes = binarize(mask, 4, 3);
    REQUIRE(planes.size() == 4);
    std::size_t total = 0;
    for (std::size_t c = 0; c < 4; ++c) {
      CHECK(planes[c].class_index == c);
      CHECK(planes[c].slice_order == 3);
      total += planes[c].area();
      for (std::size_t i = 0; i < mask.labels.size(); ++i) {
        CHECK(planes[c].bits[i] == (mask.labels[i] == c ? 255 : 0));
      }
    }
    CHECK(total == 17 * 11);
  }

  TEST_CASE("oracle predictor reproduces the reference one-hot planes") {
    Rng rng(2);
    std::vector<GrayImage> images;
    std::vector<LabelMask> masks;
    for (int i = 0; i < 4; ++i) {
      images.push_back(testing::random_image(12, 9, rng));
      masks.push_back(testing::random_mask(12, 9, 3, rng));
    }
    const LogitPredictor oracle = [&](const GrayImage& img) {
      for (std::size_t i = 0; i < images.size(); ++i)
        if (images[i] == img) return to_onehot<float>(masks[i], 3);
      throw DataError("unknown image");
    };
    const auto per_class = predict_slices(oracle, images, 3, 1.0, 2);
    REQUIRE(per_class.size() == 3);
    for (std::size_t c = 0; c < 3; ++c) {
      REQUIRE(per_class[c].size() == 4);
      for (std::size_t k = 0; k < 4; ++k) {
        CHECK(per_class[c][k].slice_order == k);
        for (std::size_t i = 0; i < masks[k].labels.size(); ++i)
          CHECK(per_class[c][k].at(i % 12, i / 12) == (masks[k].labels[i] == c));
      }
    }
  }

  TEST_CASE("slices follow the argmax of replayed logits") {
    Rng rng(3);
    const GrayImage image = testing::random_image(6, 5, rng);
    std::vector<float> logits(3 * 30);
    for (auto& v : logits) v = static_cast<float>(rng.uniform() * 4 - 2);
    const LogitPredictor replay = [&](const GrayImage&) { return Tensor<float>({1, 3, 5, 6}, logits); };
    const auto per_class = predict_slices(replay, {image}, 3, 1.0);
    for (std::size_t i = 0; i < 30; ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < 3; ++c)
        if (logits[c * 30 + i] > logits[best * 30 + i]) best = c;
      for (std::size_t c = 0; c < 3; ++c) CHECK(per_class[c][0].bits[i] == (c == best ? 255 : 0));
    }
  }

  TEST_CASE("images must share dimensions") {
    const LogitPredictor unused = [](const GrayImage& img) {
      return to_onehot<float>(LabelMask(img.width, img.height), 2);
    };
    CHECK_THROWS_AS(predict_slices(unused, {GrayImage(4, 4), GrayImage(4, 5)}, 2, 1.0), DataError);
  }
}

TEST_SUITE("stack") {
  TEST_CASE("three slices give a depth-three volume") {
    Rng rng(4);
    std::vector<BinarySlice> slices{slice_of(4, 5, 0, rng), slice_of(4, 5, 1, rng), slice_of(4, 5, 2, rng)};
    const Volume v = stack(slices, "tissue");
    CHECK(v.width == 4);
    CHECK(v.height == 5);
    CHECK(v.depth == 3);
    CHECK(v.voxels.size() == 60);
    for (std::size_t z = 0; z < 3; ++z)
      for (std::size_t i = 0; i < 20; ++i) CHECK(v.voxels[z * 20 + i] == slices[z].bits[i]);
    std::size_t areas = 0;
    for (const auto& s : slices) areas += s.area();
    CHECK(v.foreground_count() == areas);
  }

  TEST_CASE("input order does not matter") {
    Rng rng(5);
    std::vector<BinarySlice> slices;
    for (std::size_t k = 0; k < 6; ++k) slices.push_back(slice_of(3, 3, k * 2, rng));
    const Volume sorted = stack(slices, "x");
    std::reverse(slices.begin(), slices.end());
    std::swap(slices[1], slices[4]);
    CHECK(stack(slices, "x") == sorted);
    CHECK(sorted.slice_orders == std::vector<std::size_t>{0, 2, 4, 6, 8, 10});
  }

  TEST_CASE("malformed stacks") {
    Rng rng(6);
    CHECK_THROWS_AS(stack({slice_of(3, 3, 0, rng), slice_of(3, 3, 0, rng)}, "x"), DataError);
    CHECK_THROWS_AS(stack({slice_of(3, 3, 0, rng), slice_of(3, 4, 1, rng)}, "x"), DataError);
    CHECK_THROWS_AS(stack({slice_of(3, 3, 0, rng, 1), slice_of(3, 3, 1, rng, 2)}, "x"), DataError);
    CHECK_THROWS_AS(stack({}, "x"), DataError);
  }
}

TEST_SUITE("files") {
  TEST_CASE("raw volume round trip and header bytes") {
    Rng rng(7);
    const Volume v = stack({slice_of(4, 5, 0, rng), slice_of(4, 5, 1, rng), slice_of(4, 5, 2, rng)}, "air");
    testing::TempDir dir("rawvol");
    write_rawvol(v, dir / "air.raw");
    std::ifstream is(dir / "air.raw", std::ios::binary);
    std::ostringstream os;
    os << is.rdbuf();
    const std::string bytes = os.str();
    const std::string header = "RAWVOL1 4 5 3 air\n";
    CHECK(bytes.substr(0, header.size()) == header);
    CHECK(bytes.size() == header.size() + 60);
    const Volume back = read_rawvol(dir / "air.raw");
    CHECK(back.voxels == v.voxels);
    CHECK(back.width == 4);
    CHECK(back.depth == 3);
    CHECK(back.class_name == "air");
  }

  TEST_CASE("truncated or padded volumes are rejected") {
    testing::TempDir dir("rawvol-bad");
    {
      std::ofstream os(dir / "short.raw", std::ios::binary);
      os << "RAWVOL1 2 2 2 x\n" << std::string(7, '\xff');
    }
    {
      std::ofstream os(dir / "long.raw", std::ios::binary);
      os << "RAWVOL1 2 2 2 x\n" << std::string(9, '\xff');
    }
    CHECK_THROWS_AS(read_rawvol(dir / "short.raw"), DataError);
    CHECK_THROWS_AS(read_rawvol(dir / "long.raw"), DataError);
    Volume spaced;
    spaced.class_name = "two words";
    CHECK_THROWS(write_rawvol(spaced, dir / "x.raw"));
  }

  TEST_CASE("slice images") {
    CHECK(slice_file_name("tissue", 7) == "tissue_00007.pgm");
    Rng rng(8);
    std::vector<BinarySlice> slices{slice_of(5, 4, 0, rng, 2), slice_of(5, 4, 1, rng, 2)};
    testing::TempDir dir("slices");
    write_slice_pgms(slices, "air", dir.path());
    CHECK(fs::exists(dir / "air_00000.pgm"));
    CHECK(fs::exists(dir / "air_00001.pgm"));
    const auto back = read_slice_pgms(dir.path(), "air", 2);
    REQUIRE(back.size() == 2);
    CHECK(back[1].bits == slices[1].bits);
    CHECK(back[1].slice_order == 1);
    CHECK(back[1].class_index == 2);

    GrayImage gray(2, 2, std::uint8_t{17});
    save_gray(gray, dir / "air_00002.pgm");
    CHECK_THROWS_AS(read_slice_pgms(dir.path(), "air", 2), DataError);
  }
}

TEST_SUITE("stats") {
  TEST_CASE("perimeter of simple shapes") {
    BinarySlice one;
    one.width = 5;
    one.height = 5;
    one.bits.assign(25, 0);
    one.bits[12] = 255;
    CHECK(perimeter(one) == 4);
    BinarySlice full = one;
    full.width = 7;
    full.height = 3;
    full.bits.assign(21, 255);
    CHECK(perimeter(full) == 2 * (7 + 3));
    one.bits.assign(25, 0);
    CHECK(perimeter(one) == 0);
  }

  TEST_CASE("perimeter agrees with an edge enumeration") {
    Rng rng(9);
    for (int i = 0; i < 25; ++i) {
      const BinarySlice s = slice_of(3 + rng.below(14), 3 + rng.below(14), 0, rng);
      CHECK(perimeter(s) == brute_perimeter(s));
    }
  }

  TEST_CASE("table layout and totals") {
    Rng rng(10);
    std::vector<std::vector<BinarySlice>> per_class(3);
    for (std::size_t k = 0; k < 2; ++k) {
      const auto planes = binarize(testing::random_mask(6, 4, 3, rng), 3, k);
      for (std::size_t c = 0; c < 3; ++c) per_class[c].push_back(planes[c]);
    }
    const StatsTable table = slice_stats(per_class, kClasses, 0.5, "um");
    CHECK(table.rows.size() == 3 * 3);
    const SliceStatsRow& total = table.rows[5];
    CHECK(total.slice == "TOTAL");
    CHECK(total.class_index == 1);
    CHECK(total.area_px == per_class[1][0].area() + per_class[1][1].area());
    CHECK(total.perimeter_px == perimeter(per_class[1][0]) + perimeter(per_class[1][1]));
    CHECK(*total.area_physical == doctest::Approx(total.area_px * 0.125));
    CHECK(total.unit == "um^3");
    CHECK(table.rows[3].unit == "um^2");
    CHECK(*table.rows[3].area_physical == doctest::Approx(table.rows[3].area_px * 0.25));
    const std::string csv = table.to_csv();
    CHECK(csv.rfind(std::string(kStatsCsvHeader) + "\n", 0) == 0);
    CHECK(csv.find("\nTOTAL,2,air,") != std::string::npos);

    const StatsTable bare = slice_stats(per_class, kClasses);
    CHECK_FALSE(bare.rows[0].area_physical.has_value());
    CHECK_THROWS_AS(slice_stats(per_class, kClasses, 0.0, "um"), ConfigError);
  }
}
