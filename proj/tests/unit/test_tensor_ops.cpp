#include <cmath>
#include <limits>
#include <vector>

#include "doctest.h"
#include "mctseg/errors.hpp"
#include "mctseg/gradcheck.hpp"
#include "mctseg/ops.hpp"
#include "mctseg/tensor.hpp"

using namespace mctseg;
using TD = Tensor<double>;
using TF = Tensor<float>;

namespace {

TD random_td(const Shape& shape, Rng& rng, bool grad = false) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal();
  return TD(shape, std::move(v), grad);
}

std::vector<double> values(const TD& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST_SUITE("tensor") {
  TEST_CASE("construction checks data length and extents") {
    CHECK_THROWS_AS(TD({2, 3}, std::vector<double>(5)), ShapeError);
    CHECK_THROWS_AS(TD({2, 0}, {}), ShapeError);
    TD t({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.numel() == 6);
    CHECK(t.dim(1) == 3);
    CHECK(shape_str(t.shape()) == "[2, 3]");
  }

  TEST_CASE("backward of sum gives ones") {
    TD x({3}, {0.5, -1.0, 2.0}, true);
    sum(x).backward();
    CHECK(values(TD(x.shape(), {x.grad().begin(), x.grad().end()})) == std::vector<double>{1, 1, 1});
  }

  TEST_CASE("backward of sum of squares") {
    TD x({2}, {1.0, -2.0}, true);
    sum(mul(x, x)).backward();
    CHECK(x.grad()[0] == 2.0);
    CHECK(x.grad()[1] == -4.0);
  }

  TEST_CASE("repeated backward accumulates into leaves") {
    TD x({2}, {1.0, -2.0}, true);
    TD loss = sum(mul(x, x));
    loss.backward();
    loss.backward();
    CHECK(x.grad()[0] == 4.0);
    CHECK(x.grad()[1] == -8.0);
    x.zero_grad();
    CHECK(x.grad()[0] == 0.0);
  }

  TEST_CASE("shared subexpressions sum their contributions") {
    TD x({1}, {3.0}, true);
    TD y = mul(x, x);
    sum(add(y, y)).backward();
    CHECK(x.grad()[0] == doctest::Approx(12.0));
  }

  TEST_CASE("backward errors") {
    TD x({2}, {1.0, 2.0}, true);
    CHECK_THROWS_AS(mul(x, x).backward(), ShapeError);
    TD leaf({1}, {1.0}, true);
    CHECK_THROWS_AS(leaf.backward(), Error);
  }

  TEST_CASE("no-grad guard records no history") {
    TD x({2}, {1.0, 2.0}, true);
    NoGradGuard guard;
    TD y = sum(mul(x, x));
    CHECK_FALSE(y.has_history());
    CHECK(y.item() == 5.0);
  }
}

TEST_SUITE("conv2d") {
  TEST_CASE("resnet stem shape") {
    const auto ho = conv_out_extent(1000, 7, 2, 3, 1);
    const auto wo = conv_out_extent(500, 7, 2, 3, 1);
    CHECK(ho == 500);
    CHECK(wo == 250);
  }

  TEST_CASE("zero input without bias yields zeros") {
    Rng rng(1);
    TD x = TD::zeros({1, 1, 3, 3});
    TD w = random_td({2, 1, 3, 3}, rng);
    TD y = conv2d(x, w, TD(), ConvParams::square(3, 1, 1));
    for (double v : y.data()) CHECK(v == 0.0);
  }

  TEST_CASE("single window dot product") {
    TD x({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    TD w = TD::full({1, 1, 3, 3}, 1.0);
    TD y = conv2d(x, w, TD(), ConvParams::square(3));
    REQUIRE(y.shape() == Shape{1, 1, 1, 1});
    double oracle = 0;
    for (double v : x.data()) oracle += v;
    CHECK(y.item() == oracle);
    CHECK(y.item() == 45.0);
  }

  TEST_CASE("matches a direct loop oracle with stride, padding and dilation") {
    Rng rng(2);
    const ConvParams p{3, 2, 2, 1, 2, 1, 2, 1, true};
    TD x = random_td({2, 3, 9, 7}, rng);
    TD w = random_td({4, 3, 3, 2}, rng);
    TD b = random_td({4}, rng);
    TD y = conv2d(x, w, b, p);
    const std::size_t ho = static_cast<std::size_t>(conv_out_extent(9, 3, 2, 2, 2));
    const std::size_t wo = static_cast<std::size_t>(conv_out_extent(7, 2, 1, 1, 1));
    REQUIRE(y.shape() == Shape{2, 4, ho, wo});
    double worst = 0;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t co = 0; co < 4; ++co)
        for (std::size_t oy = 0; oy < ho; ++oy)
          for (std::size_t ox = 0; ox < wo; ++ox) {
            double acc = b.data()[co];
            for (std::size_t ci = 0; ci < 3; ++ci)
              for (std::size_t ky = 0; ky < 3; ++ky)
                for (std::size_t kx = 0; kx < 2; ++kx) {
                  const long iy = static_cast<long>(oy * 2 + ky * 2) - 2;
                  const long ix = static_cast<long>(ox + kx) - 1;
                  if (iy < 0 || iy >= 9 || ix < 0 || ix >= 7) continue;
                  acc += x.data()[((n * 3 + ci) * 9 + iy) * 7 + ix] * w.data()[((co * 3 + ci) * 3 + ky) * 2 + kx];
                }
            worst = std::max(worst, std::abs(acc - y.data()[((n * 4 + co) * ho + oy) * wo + ox]));
          }
    CHECK(worst < 1e-12);
  }

  TEST_CASE("output extent formula holds across a parameter sweep") {
    Rng rng(3);
    for (int trial = 0; trial < 60; ++trial) {
      const std::size_t k = 1 + rng.below(4), s = 1 + rng.below(3), d = 1 + rng.below(3), pad = rng.below(3);
      const std::size_t h = 6 + rng.below(10), w = 6 + rng.below(10);
      const auto ho = conv_out_extent(h, k, s, pad, d);
      const auto wo = conv_out_extent(w, k, s, pad, d);
      TD x = TD::zeros({1, 1, h, w});
      TD wt = TD::zeros({1, 1, k, k});
      if (ho < 1 || wo < 1) {
        CHECK_THROWS_AS(conv2d(x, wt, TD(), ConvParams::square(k, s, pad, d)), ShapeError);
        continue;
      }
      const std::int64_t formula_h = (static_cast<std::int64_t>(h + 2 * pad) - static_cast<std::int64_t>(d * (k - 1)) - 1) /
                                         static_cast<std::int64_t>(s) + 1;
      CHECK(ho == formula_h);
      TD y = conv2d(x, wt, TD(), ConvParams::square(k, s, pad, d));
      CHECK(y.dim(2) == static_cast<std::size_t>(ho));
      CHECK(y.dim(3) == static_cast<std::size_t>(wo));
    }
  }

  TEST_CASE("bias-free convolution is linear") {
    Rng rng(4);
    TF x({1, 3, 8, 8}, std::vector<float>(192));
    for (auto& v : x.mutable_data()) v = static_cast<float>(rng.normal());
    TF w({5, 3, 3, 3}, std::vector<float>(135));
    for (auto& v : w.mutable_data()) v = static_cast<float>(rng.normal());
    const float alpha = 2.5f;
    TF scaled = x.clone();
    for (auto& v : scaled.mutable_data()) v *= alpha;
    TF a = conv2d(scaled, w, TF(), ConvParams::square(3, 1, 1));
    TF b = conv2d(x, w, TF(), ConvParams::square(3, 1, 1));
    for (std::size_t i = 0; i < a.numel(); ++i) {
      CHECK(std::abs(a.data()[i] - alpha * b.data()[i]) <= 1e-6 * std::max(1.0f, std::abs(a.data()[i])) * 10);
    }
  }

  TEST_CASE("channel mismatch is rejected") {
    CHECK_THROWS_AS(conv2d(TD::zeros({1, 2, 5, 5}), TD::zeros({1, 3, 3, 3}), TD(), ConvParams::square(3)), ShapeError);
  }
}

TEST_SUITE("batchnorm2d") {
  TEST_CASE("eval with identity statistics divides by sqrt(1 + eps)") {
    Rng rng(5);
    TD x = random_td({1, 2, 3, 3}, rng);
    const BatchNorm<double> bn = BatchNorm<double>::identity(2);
    TD y = batchnorm2d(x, bn);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == doctest::Approx(x.data()[i] / std::sqrt(1 + 1e-5)).epsilon(1e-12));
  }

  TEST_CASE("train mode on a constant input outputs beta") {
    BatchNorm<double> bn = BatchNorm<double>::identity(2);
    bn.beta = TD({2}, {0.25, -1.5});
    TD y = batchnorm2d(TD::full({1, 2, 3, 3}, 7.0), bn, Mode::train);
    for (std::size_t i = 0; i < 9; ++i) CHECK(y.data()[i] == doctest::Approx(0.25));
    for (std::size_t i = 9; i < 18; ++i) CHECK(y.data()[i] == doctest::Approx(-1.5));
  }

  TEST_CASE("train mode output moments equal beta and gamma squared") {
    Rng rng(6);
    BatchNorm<double> bn = BatchNorm<double>::identity(2);
    bn.gamma = TD({2}, {1.7, 0.4});
    bn.beta = TD({2}, {-0.3, 2.0});
    TD y = batchnorm2d(random_td({1, 2, 4, 4}, rng), bn, Mode::train);
    for (std::size_t c = 0; c < 2; ++c) {
      double m = 0, v = 0;
      for (std::size_t i = 0; i < 16; ++i) m += y.data()[c * 16 + i] / 16;
      for (std::size_t i = 0; i < 16; ++i) v += (y.data()[c * 16 + i] - m) * (y.data()[c * 16 + i] - m) / 16;
      CHECK(std::abs(m - bn.beta.data()[c]) < 1e-4);
      CHECK(std::abs(v - bn.gamma.data()[c] * bn.gamma.data()[c]) < 1e-4);
    }
  }

  TEST_CASE("running statistics follow the momentum update") {
    TD x({1, 1, 2, 2}, {1, 2, 3, 6});
    BatchNorm<double> bn = BatchNorm<double>::identity(1);
    batchnorm2d(x, bn, Mode::train);
    // batch mean 3, unbiased variance (4+1+0+9)/3
    CHECK(bn.running_mean[0] == doctest::Approx(0.9 * 0 + 0.1 * 3));
    CHECK(bn.running_var[0] == doctest::Approx(0.9 * 1 + 0.1 * (14.0 / 3)));
  }

  TEST_CASE("errors") {
    BatchNorm<double> bn = BatchNorm<double>::identity(3);
    CHECK_THROWS_AS(batchnorm2d(TD::zeros({1, 2, 2, 2}), bn, Mode::train), ShapeError);
    BatchNorm<double> one = BatchNorm<double>::identity(1);
    CHECK_THROWS_AS(batchnorm2d(TD::zeros({1, 1, 1, 1}), one, Mode::train), ShapeError);
  }
}

TEST_SUITE("pointwise and pooling") {
  TEST_CASE("relu") {
    TD y = relu(TD({3}, {-1, 0, 2}));
    CHECK(values(y) == std::vector<double>{0, 0, 2});
    TD neg = relu(TD::full({4}, -3.0));
    for (double v : neg.data()) CHECK(v == 0.0);
    TD x({2}, {-1.0, 2.0}, true);
    sum(relu(x)).backward();
    CHECK(x.grad()[0] == 0.0);
    CHECK(x.grad()[1] == 1.0);
  }

  TEST_CASE("relu subgradient at zero is zero") {
    TD x({1}, {0.0}, true);
    sum(relu(x)).backward();
    CHECK(x.grad()[0] == 0.0);
  }

  TEST_CASE("maxpool shapes and values") {
    CHECK(conv_out_extent(500, 3, 2, 1, 1) == 250);
    CHECK(conv_out_extent(250, 3, 2, 1, 1) == 125);
    TD y = maxpool2d(TD({1, 1, 2, 2}, {1, 2, 3, 4}), 2, 2, 0);
    CHECK(y.item() == 4.0);
    TD z = maxpool2d(TD::full({1, 1, 5, 5}, -7.0), 3, 2, 1);
    for (double v : z.data()) CHECK(v == -7.0);
  }

  TEST_CASE("maxpool gradient routes one unit per window to the maximum") {
    Rng rng(7);
    std::vector<double> v(16);
    for (std::size_t i = 0; i < 16; ++i) v[i] = static_cast<double>(i);
    for (std::size_t i = 15; i > 0; --i) std::swap(v[i], v[rng.below(i + 1)]);
    TD x({1, 1, 4, 4}, v, true);
    sum(maxpool2d(x, 2, 2, 0)).backward();
    for (std::size_t wy = 0; wy < 2; ++wy)
      for (std::size_t wx = 0; wx < 2; ++wx) {
        double best = -1, ones = 0, at_best = 0;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t i = (wy * 2 + dy) * 4 + wx * 2 + dx;
            ones += x.grad()[i];
            if (v[i] > best) {
              best = v[i];
              at_best = x.grad()[i];
            }
          }
        CHECK(ones == 1.0);
        CHECK(at_best == 1.0);
      }
  }

  TEST_CASE("maxpool ties go to the first element") {
    TD x({1, 1, 2, 2}, {5, 5, 5, 5}, true);
    sum(maxpool2d(x, 2, 2, 0)).backward();
    CHECK(values(TD({4}, {x.grad().begin(), x.grad().end()})) == std::vector<double>{1, 0, 0, 0});
  }

  TEST_CASE("bilinear upsample identity and closed-form oracle") {
    Rng rng(8);
    TD x = random_td({1, 2, 3, 5}, rng);
    CHECK(values(bilinear_upsample(x, 3, 5)) == values(x));

    // Source grid is the linear field 2*row + col, so any bilinear sample
    // equals 2*sy + sx at the clamped source coordinates.
    TD g({1, 1, 2, 2}, {0, 1, 2, 3});
    TD y = bilinear_upsample(g, 4, 4);
    auto src = [](std::size_t d) { return std::clamp((d + 0.5) * 2.0 / 4.0 - 0.5, 0.0, 1.0); };
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t c = 0; c < 4; ++c) CHECK(std::abs(y.data()[r * 4 + c] - (2 * src(r) + src(c))) < 1e-6);
  }

  TEST_CASE("bilinear upsample restores the 1000x500 input size") {
    TF x = TF::zeros({1, 6, 125, 63});
    CHECK(bilinear_upsample(x, 1000, 500).shape() == Shape{1, 6, 1000, 500});
  }

  TEST_CASE("dropout") {
    Rng rng(9);
    TD x = random_td({2, 3, 4, 4}, rng);
    CHECK(dropout(x, 0.5, Mode::eval, rng).aliases(x));
    CHECK(values(dropout(x, 0.0, Mode::train, rng)) == values(x));
    CHECK_THROWS_AS(dropout(x, 1.0, Mode::train, rng), ConfigError);

    TF ones = TF::full({1000000}, 1.0f);
    Rng r1(10);
    TF y = dropout(ones, 0.1, Mode::train, r1);
    double m = 0;
    for (float v : y.data()) m += v;
    m /= 1e6;
    CHECK(m >= 0.99);
    CHECK(m <= 1.01);

    Rng r2(10);
    TF y2 = dropout(ones, 0.1, Mode::train, r2);
    CHECK(std::equal(y.data().begin(), y.data().end(), y2.data().begin()));
  }

  TEST_CASE("add") {
    TD a({2}, {1, 2}, true), b({2}, {3, 4}, true);
    CHECK(values(add(a, b)) == std::vector<double>{4, 6});
    CHECK(values(add(a, TD::zeros({2}))) == values(a));
    sum(add(a, b)).backward();
    CHECK(a.grad()[0] == 1.0);
    CHECK(b.grad()[1] == 1.0);
    CHECK_THROWS_AS(add(a, TD::zeros({3})), ShapeError);
  }
}

TEST_SUITE("bce_with_logits") {
  TEST_CASE("zero logits give ln 2") {
    TD t({4}, {0, 1, 1, 0});
    CHECK(bce_with_logits(TD::zeros({4}), t).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }

  TEST_CASE("saturated correct logits give near-zero loss") {
    TD t({4}, {0, 1, 1, 0});
    TD z({4}, {-40, 40, 40, -40});
    CHECK(bce_with_logits(z, t).item() < 1e-6);
  }

  TEST_CASE("matches the elementwise formula and finite differences") {
    Rng rng(11);
    TD z = random_td({2, 3, 4, 4}, rng, true);
    std::vector<double> tv(z.numel());
    for (auto& v : tv) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
    TD t(z.shape(), tv);
    double oracle = 0;
    for (std::size_t i = 0; i < z.numel(); ++i) {
      const double s = 1 / (1 + std::exp(-z.data()[i]));
      oracle -= tv[i] * std::log(s) + (1 - tv[i]) * std::log(1 - s);
    }
    oracle /= static_cast<double>(z.numel());
    CHECK(std::abs(bce_with_logits(z, t).item() - oracle) < 1e-6);

    Rng pick(12);
    const double err = check_gradients([&] { return bce_with_logits(z, t); }, {z}, pick, 96, 1e-5);
    CHECK(err < 1e-4);
  }

  TEST_CASE("errors") {
    CHECK_THROWS_AS(bce_with_logits(TD::zeros({2}), TD({2}, {0.5, 1})), DataError);
    CHECK_THROWS_AS(bce_with_logits(TD::zeros({2}), TD::zeros({3})), ShapeError);
    const double inf = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(bce_with_logits(TD({2}, {inf, 0}), TD({2}, {0, 1})), NumericalError);
  }
}

TEST_SUITE("gradcheck") {
  TEST_CASE("every operator passes at 64-bit precision") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const GradcheckReport report = run_gradcheck(seed);
      for (const auto& r : report.results) {
        INFO(r.name, " seed ", seed);
        CHECK(r.max_rel_error < 1e-4);
        CHECK(r.checked > 0);
        CHECK(r.skipped * 4 < r.checked);
      }
    }
  }

  TEST_CASE("branch digests see relu sign flips and maxpool winner changes") {
    TD x({1, 1, 2, 2}, {0.5, -0.25, 0.75, 1e-6});
    auto digest = [&] {
      BranchRecorder rec;
      relu(x);
      maxpool2d(x, 2, 2, 0);
      return rec.digest();
    };
    const std::uint64_t base = digest();
    CHECK(digest() == base);
    x.mutable_data()[3] = 2e-6;
    CHECK(digest() == base);
    x.mutable_data()[3] = -1e-6;
    CHECK(digest() != base);
    x.mutable_data()[3] = 1e-6;
    x.mutable_data()[0] = 0.8;
    CHECK(digest() != base);
  }

  TEST_CASE("step straddling a kink is skipped rather than compared") {
    TD x({3}, {0.5, 4e-6, -2.0}, true);
    Rng rng(1);
    std::size_t checked = 0, skipped = 0;
    const double err = check_gradients([=] { return sum(relu(x)); }, {x}, rng, 8, 1e-5, &checked, &skipped);
    CHECK(err < 1e-9);
    CHECK(checked == 2);
    CHECK(skipped == 1);
  }

  TEST_CASE("identical seeds give identical reports") {
    CHECK(run_gradcheck(3).render() == run_gradcheck(3).render());
  }
}
