#include <boost/multiprecision/cpp_int.hpp>

#include "doctest.h"
#include "mctseg/errors.hpp"
#include "mctseg/metrics.hpp"
#include "test_support.hpp"

using namespace mctseg;
using boost::multiprecision::cpp_rational;

namespace {

ConfusionCounts counts(std::uint64_t tp, std::uint64_t fp, std::uint64_t tn, std::uint64_t fn) {
  ConfusionCounts cc;
  cc.tp = tp;
  cc.fp = fp;
  cc.tn = tn;
  cc.fn = fn;
  return cc;
}

struct Exact {
  double accuracy, precision, recall, f1;
};

Exact exact_scores(const ConfusionCounts& cc) {
  const cpp_rational eps(1, 1000000000);
  const cpp_rational tp(cc.tp), fp(cc.fp), tn(cc.tn), fn(cc.fn);
  Exact e{};
  e.accuracy = static_cast<double>(cpp_rational((tp + tn) / (tp + tn + fp + fn)));
  e.precision = static_cast<double>(cpp_rational((tp + eps) / (tp + fp + eps)));
  e.recall = static_cast<double>(cpp_rational((tp + eps) / (tp + fn + eps)));
  e.f1 = static_cast<double>(cpp_rational((tp + eps) / (tp + eps + (fp + fn) / 2)));
  return e;
}

/// Brute-force four-way tally.
ConfusionCounts tally(const LabelMask& pred, const LabelMask& truth, std::size_t c) {
  ConfusionCounts cc;
  for (std::size_t y = 0; y < pred.height; ++y)
    for (std::size_t x = 0; x < pred.width; ++x) {
      const bool p = pred.at(x, y) == c, t = truth.at(x, y) == c;
      cc.tp += p && t;
      cc.fp += p && !t;
      cc.fn += !p && t;
      cc.tn += !p && !t;
    }
  return cc;
}

}  // namespace

TEST_SUITE("scores") {
  TEST_CASE("hand-tallied example") {
    const ConfusionCounts cc = counts(3, 1, 10, 2);
    CHECK(accuracy(cc) == 13.0 / 16.0);
    CHECK(std::abs(precision(cc) - 0.75) < 1e-9);
    CHECK(std::abs(recall(cc) - 0.6) < 1e-9);
    CHECK(std::abs(f1(cc) - 2.0 / 3.0) < 1e-9);
  }

  TEST_CASE("degenerate class scores exactly one") {
    const ConfusionCounts cc = counts(0, 0, 50, 0);
    CHECK(precision(cc) == 1.0);
    CHECK(recall(cc) == 1.0);
    CHECK(f1(cc) == 1.0);
    CHECK(accuracy(cc) == 1.0);
  }

  TEST_CASE("perfect and all-wrong predictions") {
    const ConfusionCounts perfect = counts(7, 0, 9, 0);
    CHECK(accuracy(perfect) == 1.0);
    CHECK(std::abs(precision(perfect) - 1.0) < 1e-9);
    CHECK(std::abs(recall(perfect) - 1.0) < 1e-9);
    CHECK(std::abs(f1(perfect) - 1.0) < 1e-9);
    CHECK(accuracy(counts(0, 4, 0, 5)) == 0.0);
  }

  TEST_CASE("empty region is an error for accuracy only") {
    const ConfusionCounts empty;
    CHECK_THROWS_AS(accuracy(empty), DataError);
    CHECK(precision(empty) == 1.0);
  }

  TEST_CASE("agree with rational arithmetic on random counts") {
    Rng rng(1);
    for (int i = 0; i < 1000; ++i) {
      const std::uint64_t limit = i % 2 ? 1000000000ull : 1000ull;
      const ConfusionCounts cc = counts(rng.below(limit), rng.below(limit), rng.below(limit), rng.below(limit) + 1);
      const Exact e = exact_scores(cc);
      CHECK(std::abs(accuracy(cc) - e.accuracy) <= 1e-12);
      CHECK(std::abs(precision(cc) - e.precision) <= 1e-12);
      CHECK(std::abs(recall(cc) - e.recall) <= 1e-12);
      CHECK(std::abs(f1(cc) - e.f1) <= 1e-12);
      for (double s : {accuracy(cc), precision(cc), recall(cc), f1(cc)}) {
        CHECK(s >= 0.0);
        CHECK(s <= 1.0);
      }
    }
  }

  TEST_CASE("binary complement symmetry") {
    Rng rng(2);
    for (int i = 0; i < 20; ++i) {
      const LabelMask truth = testing::random_mask(16, 16, 2, rng);
      const LabelMask pred = testing::random_mask(16, 16, 2, rng);
      const auto all = confusion_all(pred, truth, 2);
      CHECK(accuracy(all[0]) == accuracy(all[1]));
      const ConfusionCounts swapped = counts(all[1].tn, all[1].fn, all[1].tp, all[1].fp);
      CHECK(precision(all[0]) == precision(swapped));
    }
  }
}

TEST_SUITE("confusion") {
  TEST_CASE("perfect and complementary masks") {
    Rng rng(3);
    const LabelMask truth = testing::random_mask(10, 10, 2, rng);
    const ConfusionCounts same = confusion(truth, truth, 1);
    CHECK(same.fp == 0);
    CHECK(same.fn == 0);
    LabelMask flipped = truth;
    for (auto& l : flipped.labels) l = 1 - l;
    const ConfusionCounts opposite = confusion(flipped, truth, 1);
    CHECK(opposite.tp == 0);
    CHECK(opposite.tn == 0);
  }

  TEST_CASE("single pass equals brute-force tally") {
    Rng rng(4);
    for (std::size_t classes : {2, 4, 6}) {
      for (int i = 0; i < 10; ++i) {
        const LabelMask truth = testing::random_mask(32, 32, classes, rng);
        const LabelMask pred = testing::random_mask(32, 32, classes, rng);
        const auto all = confusion_all(pred, truth, classes);
        for (std::size_t c = 0; c < classes; ++c) {
          const ConfusionCounts t = tally(pred, truth, c);
          const ConfusionCounts one = confusion(pred, truth, c);
          CHECK(all[c].tp == t.tp);
          CHECK(all[c].fp == t.fp);
          CHECK(all[c].tn == t.tn);
          CHECK(all[c].fn == t.fn);
          CHECK(one.tp == t.tp);
          CHECK(one.tn == t.tn);
          CHECK(all[c].total() == 32 * 32);
        }
      }
    }
  }

  TEST_CASE("dimension mismatch") {
    CHECK_THROWS_AS(confusion(LabelMask(3, 3), LabelMask(3, 4), 0), DataError);
  }
}

TEST_SUITE("evaluate") {
  const ClassMap kClasses = ClassMap::parse("0 0 bg\n100 1 a\n200 2 b\n");

  std::vector<SamplePair> random_pairs(Rng& rng, std::size_t n, std::size_t w, std::size_t h) {
    std::vector<SamplePair> pairs;
    for (std::size_t i = 0; i < n; ++i) {
      pairs.push_back({testing::random_image(w, h, rng), testing::random_mask(w, h, 3, rng), "img" + std::to_string(i)});
    }
    return pairs;
  }

  /// Predictor that returns one-hot planes of a fixed mask lookup keyed by image content.
  LogitPredictor lookup_predictor(const std::vector<SamplePair>& pairs) {
    return [&pairs](const GrayImage& img) {
      for (const auto& p : pairs) {
        if (p.image == img) return to_onehot<float>(p.mask, 3);
      }
      throw DataError("unknown image");
    };
  }

  TEST_CASE("oracle predictor scores one everywhere") {
    Rng rng(5);
    const auto pairs = random_pairs(rng, 3, 20, 12);
    const MetricsReport report = evaluate(lookup_predictor(pairs), pairs, kClasses, 1.0);
    CHECK(report.rows.size() == 4 * 3);
    for (const auto& r : report.rows) {
      CHECK(r.accuracy == 1.0);
      CHECK(std::abs(r.f1 - 1.0) < 1e-9);
      CHECK(std::abs(r.precision - 1.0) < 1e-9);
    }
  }

  TEST_CASE("constant background predictor on a 90 percent background mask") {
    LabelMask mask(10, 10, std::uint8_t{0});
    for (std::size_t x = 0; x < 10; ++x) mask.at(x, 0) = 1;
    const std::vector<SamplePair> pairs{{GrayImage(10, 10), mask, "m"}};
    const LogitPredictor background = [](const GrayImage& img) {
      return to_onehot<float>(LabelMask(img.width, img.height, std::uint8_t{0}), 3);
    };
    const MetricsReport report = evaluate(background, pairs, kClasses, 1.0);
    const auto pooled = report.pooled();
    CHECK(pooled[0].accuracy == doctest::Approx(0.9));
    CHECK(pooled[2].precision == 1.0);
    CHECK(pooled[2].recall == 1.0);
    CHECK(pooled[2].f1 == 1.0);
    CHECK(pooled[1].tp == 0);
    CHECK(pooled[1].fn == 10);
  }

  TEST_CASE("pooled rows sum counts rather than averaging scores") {
    // Image A: class 1 has tp=1 fp=0 fn=0; image B: tp=0 fp=0 fn=9.
    LabelMask ta(10, 1, std::uint8_t{0}), pa(10, 1, std::uint8_t{0});
    ta.at(0, 0) = pa.at(0, 0) = 1;
    LabelMask tb(10, 1, std::uint8_t{1}), pb(10, 1, std::uint8_t{0});
    tb.at(9, 0) = 0;
    const MetricsReport report = make_report({"a", "b"}, {confusion_all(pa, ta, 3), confusion_all(pb, tb, 3)}, kClasses);
    const MetricsRow pooled = report.pooled()[1];
    CHECK(pooled.tp == 1);
    CHECK(pooled.fn == 9);
    const double summed = (1 + 1e-9) / (1 + 1e-9 + 4.5);
    double mean_of_images = 0;
    for (const auto& r : report.rows)
      if (r.image != kPooledImageId && r.class_index == 1) mean_of_images += r.f1 / 2;
    CHECK(pooled.f1 == doctest::Approx(summed).epsilon(1e-12));
    CHECK(std::abs(pooled.f1 - mean_of_images) > 0.1);

    for (std::size_t c = 0; c < 3; ++c) {
      std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;
      for (const auto& r : report.rows)
        if (r.image != kPooledImageId && r.class_index == c) {
          tp += r.tp, fp += r.fp, tn += r.tn, fn += r.fn;
        }
      const MetricsRow p = report.pooled()[c];
      CHECK(p.tp == tp);
      CHECK(p.fp == fp);
      CHECK(p.tn == tn);
      CHECK(p.fn == fn);
    }
  }

  TEST_CASE("report is independent of the job count") {
    Rng rng(6);
    const auto pairs = random_pairs(rng, 5, 16, 16);
    const LogitPredictor noisy = [](const GrayImage& img) {
      LabelMask m(img.width, img.height);
      for (std::size_t i = 0; i < m.labels.size(); ++i) m.labels[i] = img.pixels[i] % 3;
      return to_onehot<float>(m, 3);
    };
    CHECK(evaluate(noisy, pairs, kClasses, 1.0, 1).to_csv() == evaluate(noisy, pairs, kClasses, 1.0, 3).to_csv());
  }

  TEST_CASE("model class count must match the class map") {
    Rng rng(7);
    Model<float> model = build_fcn<float>(ModelSpec::tiny(4, 4), rng);
    const auto pairs = random_pairs(rng, 1, 32, 32);
    CHECK_THROWS_AS(evaluate(model, pairs, kClasses, 1.0), DataError);
  }

  TEST_CASE("csv layout") {
    const MetricsReport report = make_report({"x"}, {confusion_all(LabelMask(2, 1), LabelMask(2, 1), 3)}, kClasses);
    const std::string csv = report.to_csv();
    CHECK(csv.rfind("image,class_index,class_name,tp,fp,tn,fn,accuracy,precision,recall,f1\n", 0) == 0);
    CHECK(csv.find("x,0,bg,2,0,0,0,1,1,1,1\n") != std::string::npos);
    CHECK(csv.find("ALL,2,b,0,0,2,0,1,1,1,1\n") != std::string::npos);
  }
}
