#include "mctseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "mctseg/errors.hpp"
#include "mctseg/image.hpp"
#include "mctseg/model.hpp"
#include "mctseg/ops.hpp"

namespace mctseg {

double GradcheckReport::max_rel_error() const {
  double worst = 0;
  for (const auto& r : results) worst = std::max(worst, r.max_rel_error);
  return worst;
}

std::string GradcheckReport::render() const {
  std::string out;
  char line[160];
  for (const auto& r : results) {
    std::snprintf(line, sizeof line, "%-28s coords=%-5zu skipped=%-3zu max_rel_error=%.3e\n", r.name.c_str(), r.checked,
                  r.skipped, r.max_rel_error);
    out += line;
  }
  std::snprintf(line, sizeof line, "max relative error: %.6e\n", max_rel_error());
  out += line;
  return out;
}

double check_gradients(const std::function<Tensor<double>()>& loss, const std::vector<Tensor<double>>& inputs,
                       Rng& rng, std::size_t max_coords, double step, std::size_t* checked, std::size_t* skipped) {
  for (auto t : inputs) t.zero_grad();
  const Tensor<double> value = loss();
  value.backward();
  std::vector<std::vector<double>> analytic;
  for (const auto& t : inputs) {
    if (t.has_grad()) {
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    } else {
      analytic.emplace_back(t.numel(), 0.0);
    }
  }

  NoGradGuard no_grad;
  BranchRecorder branches;
  auto branch_digest = [&] {
    branches.reset();
    const double v = loss().item();
    return std::pair{v, branches.digest()};
  };
  const std::uint64_t base_branches = branch_digest().second;

  double worst = 0;
  std::size_t count = 0, straddled = 0;
  // Compares one coordinate; false when the step crosses a relu or maxpool switch.
  auto compare = [&](Tensor<double>& t, std::size_t i, std::size_t k) {
    const double saved = t.data()[k];
    t.mutable_data()[k] = saved + step;
    const auto [plus, plus_branches] = branch_digest();
    t.mutable_data()[k] = saved - step;
    const auto [minus, minus_branches] = branch_digest();
    t.mutable_data()[k] = saved;
    if (plus_branches != base_branches || minus_branches != base_branches) {
      ++straddled;
      return false;
    }
    const double numeric = (plus - minus) / (2 * step);
    const double err = std::abs(analytic[i][k] - numeric) / std::max(1.0, std::abs(numeric));
    if (!std::isfinite(err)) throw NumericalError("non-finite gradient comparison");
    worst = std::max(worst, err);
    ++count;
    return true;
  };

  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tensor<double> t = inputs[i];
    const std::size_t n = t.numel();
    if (n <= max_coords) {
      for (std::size_t k = 0; k < n; ++k) compare(t, i, k);
    } else {
      std::size_t accepted = 0;
      for (std::size_t draws = 0; accepted < max_coords && draws < 8 * max_coords; ++draws) {
        accepted += compare(t, i, rng.below(n));
      }
    }
  }
  if (checked) *checked = count;
  if (skipped) *skipped = straddled;
  return worst;
}

namespace {

using TD = Tensor<double>;

TD random_tensor(const Shape& shape, Rng& rng, bool requires_grad = true, double scale = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal() * scale;
  return TD(shape, std::move(v), requires_grad);
}

/// Weighted sum so every output element carries a distinct gradient.
TD project(const TD& out, const TD& weights) { return sum(mul(out, weights)); }

struct Suite {
  GradcheckReport report;
  Rng rng;
  double step;

  void check(const std::string& name, const std::function<TD()>& loss, const std::vector<TD>& inputs,
             std::size_t max_coords = 64) {
    GradcheckResult r;
    r.name = name;
    r.max_rel_error = check_gradients(loss, inputs, rng, max_coords, step, &r.checked, &r.skipped);
    report.results.push_back(r);
  }

  void unary(const std::string& name, const Shape& in_shape, const std::function<TD(const TD&)>& op) {
    TD x = random_tensor(in_shape, rng);
    TD probe;
    {
      NoGradGuard g;
      probe = op(x);
    }
    TD w = random_tensor(probe.shape(), rng, false);
    check(name, [=] { return project(op(x), w); }, {x});
  }
};

void conv_cases(Suite& s) {
  struct Case {
    const char* name;
    Shape input;
    Shape weight;
    ConvParams params;
  };
  const Case cases[] = {
      {"conv2d 3x3 s2 p1 bias", {2, 3, 7, 6}, {4, 3, 3, 3}, ConvParams::square(3, 2, 1, 1, true)},
      {"conv2d 3x2 dilated", {1, 2, 8, 7}, {3, 2, 3, 2}, {3, 2, 1, 1, 2, 1, 2, 2, false}},
      {"conv2d 1x1 s2", {1, 5, 6, 5}, {4, 5, 1, 1}, ConvParams::square(1, 2)},
      {"conv2d 7x7 s2 p3", {1, 3, 12, 10}, {2, 3, 7, 7}, ConvParams::square(7, 2, 3)},
  };
  for (const auto& c : cases) {
    TD x = random_tensor(c.input, s.rng);
    TD w = random_tensor(c.weight, s.rng, true, 0.5);
    TD b = c.params.has_bias ? random_tensor({c.weight[0]}, s.rng) : TD();
    TD probe;
    {
      NoGradGuard g;
      probe = conv2d(x, w, b, c.params);
    }
    TD r = random_tensor(probe.shape(), s.rng, false);
    std::vector<TD> inputs{x, w};
    if (b.defined()) inputs.push_back(b);
    const ConvParams p = c.params;
    s.check(c.name, [=] { return project(conv2d(x, w, b, p), r); }, inputs);
  }
}

void batchnorm_cases(Suite& s) {
  const Shape shape{2, 3, 4, 5};
  TD x = random_tensor(shape, s.rng);
  BatchNorm<double> bn = BatchNorm<double>::identity(3);
  bn.gamma = random_tensor({3}, s.rng);
  bn.beta = random_tensor({3}, s.rng);
  TD r = random_tensor(shape, s.rng, false);
  s.check("batchnorm2d train", [=]() mutable { return project(batchnorm2d(x, bn, Mode::train), r); },
          {x, bn.gamma, bn.beta});

  BatchNorm<double> frozen = bn;
  for (auto& v : frozen.running_mean) v = s.rng.normal();
  for (auto& v : frozen.running_var) v = 0.5 + s.rng.uniform();
  s.check("batchnorm2d eval", [=] { return project(batchnorm2d(x, frozen), r); }, {x, frozen.gamma, frozen.beta});
}

void elementwise_cases(Suite& s) {
  s.unary("relu", {2, 3, 5, 4}, [](const TD& x) { return relu(x); });
  s.unary("maxpool2d 3x3 s2 p1", {1, 2, 9, 8}, [](const TD& x) { return maxpool2d(x, 3, 2, 1); });
  s.unary("maxpool2d 2x2 s2", {1, 2, 6, 6}, [](const TD& x) { return maxpool2d(x, 2, 2, 0); });
  s.unary("bilinear upsample", {1, 2, 3, 4}, [](const TD& x) { return bilinear_upsample(x, 7, 9); });
  s.unary("bilinear downsample", {1, 2, 7, 6}, [](const TD& x) { return bilinear_upsample(x, 3, 4); });
  const std::uint64_t dropout_seed = s.rng.next();
  s.unary("dropout train", {2, 3, 4, 4}, [dropout_seed](const TD& x) {
    Rng r(dropout_seed);
    return dropout(x, 0.3, Mode::train, r);
  });

  TD a = random_tensor({2, 3, 4}, s.rng);
  TD b = random_tensor({2, 3, 4}, s.rng);
  TD r = random_tensor({2, 3, 4}, s.rng, false);
  s.check("add", [=] { return project(add(a, b), r); }, {a, b});
  s.check("mul", [=] { return project(mul(a, b), r); }, {a, b});
  s.check("sum", [=] { return sum(a); }, {a});
  s.check("mean", [=] { return mean(mul(a, a)); }, {a});

  TD logits = random_tensor({1, 3, 5, 5}, s.rng, true, 3.0);
  std::vector<double> targets(logits.numel());
  for (auto& t : targets) t = s.rng.bernoulli(0.5) ? 1.0 : 0.0;
  TD target(logits.shape(), std::move(targets));
  s.check("bce_with_logits", [=] { return bce_with_logits(logits, target); }, {logits});
}

void fcn_case(Suite& s) {
  const ModelSpec spec = ModelSpec::tiny(3, 4);
  Rng init(s.rng.next());
  auto model = std::make_shared<Model<double>>(build_fcn<double>(spec, init));
  model->mode = Mode::train;
  TD input = random_tensor({1, 3, 32, 32}, s.rng);
  LabelMask mask(32, 32);
  for (auto& l : mask.labels) l = static_cast<std::uint8_t>(s.rng.below(3));
  const TD target = to_onehot<double>(mask, 3);
  const std::uint64_t dropout_seed = s.rng.next();

  std::vector<TD> inputs{input};
  for (const auto& p : model->parameters()) inputs.push_back(p.tensor);
  s.check(
      "fcn tiny end-to-end",
      [=] {
        Rng r(dropout_seed);
        return bce_with_logits(forward(*model, input, &r), target);
      },
      inputs, 4);
}

}  // namespace

GradcheckReport run_gradcheck(std::uint64_t seed, double step) {
  Suite s{{}, Rng(seed), step};
  conv_cases(s);
  batchnorm_cases(s);
  elementwise_cases(s);
  fcn_case(s);
  return std::move(s.report);
}

}  // namespace mctseg
