#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mctseg/rng.hpp"
#include "mctseg/tensor.hpp"

namespace mctseg {

struct GradcheckResult {
  std::string name;
  double max_rel_error = 0;
  std::size_t checked = 0;  // coordinates compared
  std::size_t skipped = 0;  // coordinates whose +-step crossed a relu/maxpool switch
};

struct GradcheckReport {
  std::vector<GradcheckResult> results;

  double max_rel_error() const;
  bool passed(double tolerance = 1e-4) const { return max_rel_error() < tolerance; }
  std::string render() const;
};

/// Compares reverse-mode gradients of a scalar loss against central
/// differences, |ad - fd| / max(1, |fd|), on up to `max_coords` randomly
/// chosen coordinates of each input (all of them when the input is smaller).
/// Coordinates where +-step changes a relu sign or maxpool winner are not
/// differentiable there; they are skipped and, when sampling, redrawn.
/// `loss` must be a pure function of the current input values.
double check_gradients(const std::function<Tensor<double>()>& loss, const std::vector<Tensor<double>>& inputs,
                       Rng& rng, std::size_t max_coords, double step, std::size_t* checked = nullptr,
                       std::size_t* skipped = nullptr);

/// Every differentiable operator plus a tiny end-to-end FCN, in double precision.
GradcheckReport run_gradcheck(std::uint64_t seed, double step = 1e-5);

}  // namespace mctseg
