#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "mctseg/errors.hpp"
#include "mctseg/image.hpp"
#include "test_support.hpp"

using namespace mctseg;
namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> bytes_of(const std::string& s) { return {s.begin(), s.end()}; }

ClassMap three_classes() { return ClassMap::parse("0 0 background\n128 1 tissue\n255 2 air\n"); }

}  // namespace

TEST_SUITE("class map") {
  TEST_CASE("parse with comments and lookup") {
    const ClassMap map = ClassMap::parse("# leaf classes\n0 0 background\n\n200 2 air  # overlay\n90 1 mesophyll\n");
    CHECK(map.size() == 3);
    CHECK(map.class_of(200) == 2u);
    CHECK_FALSE(map.class_of(37).has_value());
    CHECK(map.pixel_of(1) == 90);
    CHECK(map.name(2) == "air");
    CHECK(map.find("mesophyll") == 1u);
    CHECK(ClassMap::parse(map.to_text()).entries().size() == 3);
  }

  TEST_CASE("invalid maps") {
    CHECK_THROWS_AS(ClassMap::parse("0 0 a\n5 2 b\n"), DataError);       // gap in indices
    CHECK_THROWS_AS(ClassMap::parse("0 0 a\n0 1 b\n"), DataError);       // duplicate value
    CHECK_THROWS_AS(ClassMap::parse("0 0 a\n3 1 a\n"), DataError);       // duplicate name
    CHECK_THROWS_AS(ClassMap::parse("0 0 a\n300 1 b\n"), DataError);     // out of range
    CHECK_THROWS_AS(ClassMap::parse("0 0\n1 1 b\n"), DataError);         // missing name
    CHECK_THROWS_AS(ClassMap::parse("0 0 a\n"), DataError);              // single class
  }
}

TEST_SUITE("pgm and png") {
  TEST_CASE("2x2 PGM decodes exactly") {
    std::vector<std::uint8_t> file = bytes_of("P5\n2 2\n255\n");
    file.insert(file.end(), {0, 128, 255, 7});
    const GrayImage img = decode_pgm(file);
    CHECK(img.width == 2);
    CHECK(img.height == 2);
    CHECK(img.pixels == std::vector<std::uint8_t>{0, 128, 255, 7});
  }

  TEST_CASE("header comments are skipped") {
    std::vector<std::uint8_t> file = bytes_of("P5 # made by hand\n1 # width\n 2\n255\n");
    file.insert(file.end(), {9, 10});
    CHECK(decode_pgm(file).pixels == std::vector<std::uint8_t>{9, 10});
  }

  TEST_CASE("PGM errors") {
    std::vector<std::uint8_t> deep = bytes_of("P5\n2 2\n65535\n");
    deep.resize(deep.size() + 8, 0);
    CHECK_THROWS_WITH_AS(decode_pgm(deep), doctest::Contains("unsupported PGM depth"), DataError);
    CHECK_THROWS_WITH_AS(decode_pgm(bytes_of("P5\n2 x\n255\n")), doctest::Contains("corrupt PGM header"), DataError);
    CHECK_THROWS_WITH_AS(decode_pgm(bytes_of("P5\n99999999999 99999999999\n255\n")), doctest::Contains("overflow"),
                         DataError);
    CHECK_THROWS_WITH_AS(decode_pgm(bytes_of("P5\n3 3\n255\nabc")), doctest::Contains("truncated"), DataError);
    CHECK_THROWS_AS(decode_pgm(bytes_of("P2\n1 1\n255\n0\n")), DataError);
  }

  TEST_CASE("PGM and PNG round trips are bit-exact") {
    Rng rng(1);
    const GrayImage img = testing::random_image(37, 23, rng);
    CHECK(decode_pgm(encode_pgm(img)) == img);
    CHECK(decode_png(encode_png(img)) == img);

    testing::TempDir dir("io");
    save_gray(img, dir / "a.pgm");
    save_gray(img, dir / "a.png");
    CHECK(load_gray(dir / "a.pgm") == img);
    CHECK(load_gray(dir / "a.png") == load_gray(dir / "a.pgm"));
  }

  TEST_CASE("image listing is sorted and filtered") {
    testing::TempDir dir("list");
    Rng rng(2);
    for (const char* name : {"b.pgm", "a.png", "c.txt", "d.pgm"}) {
      std::ofstream(dir / name) << "x";
    }
    const auto files = list_images(dir.path());
    REQUIRE(files.size() == 3);
    CHECK(files[0].filename() == "a.png");
    CHECK(files[2].filename() == "d.pgm");
    CHECK_THROWS_AS(list_images(dir / "missing"), DataError);
  }
}

TEST_SUITE("masks") {
  TEST_CASE("decode via the class map") {
    const GrayImage img(3, 1, std::vector<std::uint8_t>{0, 128, 255});
    CHECK(decode_mask(img, three_classes()).labels == std::vector<std::uint8_t>{0, 1, 2});
  }

  TEST_CASE("unmapped value is reported with its position") {
    GrayImage img(4, 3, std::uint8_t{0});
    img.at(2, 1) = 37;
    img.at(3, 2) = 37;
    CHECK_THROWS_WITH_AS(decode_mask(img, three_classes()), doctest::Contains("37"), DataError);
    CHECK_THROWS_WITH_AS(decode_mask(img, three_classes()), doctest::Contains("x=2"), DataError);
  }

  TEST_CASE("decode and encode are inverse") {
    Rng rng(3);
    const ClassMap map = three_classes();
    const LabelMask mask = testing::random_mask(19, 11, 3, rng);
    const GrayImage encoded = encode_mask(mask, map);
    for (std::size_t i = 0; i < encoded.pixels.size(); ++i) CHECK(encoded.pixels[i] == map.pixel_of(mask.labels[i]));
    CHECK(decode_mask(encoded, map) == mask);
  }

  TEST_CASE("three-layer composition") {
    Rng rng(4);
    const LabelMask base = testing::random_mask(8, 6, 2, rng);
    CHECK(compose_three_layer_mask(base, GrayImage(8, 6, std::uint8_t{0}), 2) == base);
    const LabelMask full = compose_three_layer_mask(base, GrayImage(8, 6, std::uint8_t{255}), 2);
    for (auto l : full.labels) CHECK(l == 2);

    GrayImage checker(8, 6);
    for (std::size_t y = 0; y < 6; ++y)
      for (std::size_t x = 0; x < 8; ++x) checker.at(x, y) = (x + y) % 2 ? 255 : 0;
    const LabelMask uniform(8, 6, std::uint8_t{1});
    const LabelMask composed = compose_three_layer_mask(uniform, checker, 2);
    for (std::size_t y = 0; y < 6; ++y)
      for (std::size_t x = 0; x < 8; ++x) CHECK(composed.at(x, y) == (checker.at(x, y) == 255 ? 2 : 1));
    CHECK(compose_three_layer_mask(composed, checker, 2) == composed);

    checker.at(0, 0) = 17;
    CHECK_THROWS_AS(compose_three_layer_mask(uniform, checker, 2), DataError);
    CHECK_THROWS_AS(compose_three_layer_mask(uniform, GrayImage(3, 3), 2), DataError);
  }

  TEST_CASE("pairs load by matching stem") {
    testing::TempDir dir("pairs");
    fs::create_directories(dir / "img");
    fs::create_directories(dir / "msk");
    Rng rng(5);
    const ClassMap map = three_classes();
    for (const char* id : {"s02", "s01"}) {
      save_gray(testing::random_image(9, 7, rng), dir / "img" / (std::string(id) + ".png"));
      save_gray(encode_mask(testing::random_mask(9, 7, 3, rng), map), dir / "msk" / (std::string(id) + ".pgm"));
    }
    const auto pairs = load_pairs(dir / "img", dir / "msk", map);
    REQUIRE(pairs.size() == 2);
    CHECK(pairs[0].id == "s01");
    CHECK(pairs[1].mask.width == 9);
    fs::remove(dir / "msk" / "s02.pgm");
    CHECK_THROWS_AS(load_pairs(dir / "img", dir / "msk", map), DataError);
    fs::create_directories(dir / "empty");
    CHECK_THROWS_WITH_AS(load_pairs(dir / "empty", dir / "msk", map), doctest::Contains("empty"), DataError);
  }
}

TEST_SUITE("rescaling") {
  TEST_CASE("factor one is bit identity") {
    Rng rng(6);
    const GrayImage img = testing::random_image(31, 17, rng);
    const LabelMask mask = testing::random_mask(31, 17, 4, rng);
    CHECK(downscale(img, 1.0) == img);
    CHECK(downscale(mask, 1.0) == mask);
  }

  TEST_CASE("half scale keeps a quarter of the pixels") {
    const GrayImage img(100, 200, std::uint8_t{3});
    const GrayImage half = downscale(img, 0.5);
    CHECK(half.width == 50);
    CHECK(half.height == 100);
    CHECK(half.pixels.size() * 4 == img.pixels.size());
    Rng rng(7);
    for (int i = 0; i < 40; ++i) {
      const std::size_t w = 50 + rng.below(400), h = 50 + rng.below(400);
      const double ratio = static_cast<double>(scaled_extent(w, 0.5) * scaled_extent(h, 0.5)) / static_cast<double>(w * h);
      CHECK(std::abs(ratio - 0.25) <= 0.02 * 0.25);
      const double f = 0.3 + 0.7 * rng.uniform();
      const double r2 = static_cast<double>(scaled_extent(w, f) * scaled_extent(h, f)) / static_cast<double>(w * h);
      CHECK(std::abs(r2 - f * f) <= 0.02 * f * f);
    }
  }

  TEST_CASE("bilinear downscale of a constant image is constant") {
    const GrayImage img(40, 30, std::uint8_t{77});
    for (auto p : downscale(img, 0.85).pixels) CHECK(p == 77);
  }

  TEST_CASE("mask downscale introduces no new labels") {
    Rng rng(8);
    for (int i = 0; i < 20; ++i) {
      LabelMask mask(60, 55);
      std::set<std::uint8_t> used;
      const std::uint8_t pick[3] = {1, 4, 5};
      for (auto& l : mask.labels) {
        l = pick[rng.below(3)];
        used.insert(l);
      }
      for (auto l : downscale(mask, 0.3 + 0.6 * rng.uniform()).labels) CHECK(used.count(l) == 1);
    }
  }

  TEST_CASE("extent floor and invalid factors") {
    CHECK(scaled_extent(1, 0.1) == 1);
    CHECK(scaled_extent(3, 0.5) == 2);
    CHECK_THROWS_AS(downscale(GrayImage(4, 4), 0.0), ConfigError);
    CHECK_THROWS_AS(downscale(GrayImage(4, 4), 1.5), ConfigError);
  }
}

TEST_SUITE("tensors") {
  TEST_CASE("model input scaling") {
    GrayImage img(2, 1, std::vector<std::uint8_t>{0, 255});
    const Tensor<float> t = to_model_input<float>(img);
    CHECK(t.shape() == Shape{1, 3, 1, 2});
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(t.data()[c * 2] == 0.0f);
      CHECK(t.data()[c * 2 + 1] == 1.0f);
    }
    Rng rng(9);
    const GrayImage random = testing::random_image(13, 9, rng);
    const Tensor<double> d = to_model_input<double>(random);
    for (std::size_t i = 0; i < random.pixels.size(); ++i) {
      CHECK(std::abs(d.data()[i] * 255.0 - random.pixels[i]) < 1.0 / 255.0);
      CHECK(std::lround(d.data()[2 * random.pixels.size() + i] * 255.0) == random.pixels[i]);
    }
    InputNormalization norm{{0.5, 0.5, 0.5}, {0.25, 0.25, 0.25}};
    CHECK(to_model_input<double>(img, norm).data()[1] == doctest::Approx(2.0));
  }

  TEST_CASE("one-hot and argmax") {
    Rng rng(10);
    const LabelMask mask = testing::random_mask(12, 7, 5, rng);
    const Tensor<float> oh = to_onehot<float>(mask, 5);
    const std::size_t plane = 12 * 7;
    for (std::size_t i = 0; i < plane; ++i) {
      float s = 0;
      for (std::size_t c = 0; c < 5; ++c) s += oh.data()[c * plane + i];
      CHECK(s == 1.0f);
    }
    CHECK(argmax_labels(oh) == mask);

    const Tensor<double> uniform = to_onehot<double>(LabelMask(3, 2, std::uint8_t{2}), 4);
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t i = 0; i < 6; ++i) CHECK(uniform.data()[c * 6 + i] == (c == 2 ? 1.0 : 0.0));
    CHECK_THROWS_AS(to_onehot<float>(LabelMask(2, 2, std::uint8_t{4}), 4), DataError);
  }

  TEST_CASE("argmax ties resolve to the lowest class") {
    const Tensor<float> t = Tensor<float>::full({1, 3, 1, 2}, 0.5f);
    CHECK(argmax_labels(t).labels == std::vector<std::uint8_t>{0, 0});
  }
}
