#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "mctseg/rng.hpp"
#include "mctseg/tensor.hpp"

namespace mctseg {

struct ConvParams {
  std::size_t kernel_h = 1, kernel_w = 1;
  std::size_t stride_h = 1, stride_w = 1;
  std::size_t pad_h = 0, pad_w = 0;
  std::size_t dil_h = 1, dil_w = 1;
  bool has_bias = false;

  static ConvParams square(std::size_t kernel, std::size_t stride = 1, std::size_t pad = 0,
                           std::size_t dilation = 1, bool bias = false) {
    return {kernel, kernel, stride, stride, pad, pad, dilation, dilation, bias};
  }
};

/// floor((in + 2*pad - dil*(k-1) - 1) / stride) + 1, or a value <= 0 when the
/// window does not fit.
std::int64_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad,
                             std::size_t dilation);

/// Cross-correlation over NCHW input. `bias` may be undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, const ConvParams& params);

/// Affine batch normalization with running statistics.
template <typename T>
struct BatchNorm {
  Tensor<T> gamma;
  Tensor<T> beta;
  std::vector<T> running_mean;
  std::vector<T> running_var;
  double eps = 1e-5;
  double momentum = 0.1;

  static BatchNorm identity(std::size_t channels);
  std::size_t channels() const { return running_mean.size(); }
};

/// Train mode normalizes with batch statistics and updates the running
/// estimates (unbiased variance); eval mode uses the running estimates only.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& input, BatchNorm<T>& state, Mode mode);

/// Eval-mode batch normalization over a read-only state.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const BatchNorm<T>& state);

/// While alive, folds the branch taken by every relu element and maxpool
/// window on this thread into a digest. Two forward passes with equal digests
/// took the same piecewise-linear branches.
class BranchRecorder {
 public:
  BranchRecorder();
  ~BranchRecorder();
  BranchRecorder(const BranchRecorder&) = delete;
  BranchRecorder& operator=(const BranchRecorder&) = delete;

  std::uint64_t digest() const { return digest_; }
  void reset() { digest_ = kSeed; }
  void record(std::uint64_t value);

 private:
  static constexpr std::uint64_t kSeed = 0xcbf29ce484222325ull;
  std::uint64_t digest_ = kSeed;
  BranchRecorder* previous_;
};

template <typename T>
Tensor<T> relu(const Tensor<T>& input);

/// Windowed maximum with -inf padding. Gradient goes to the first maximal
/// element in row-major window order.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& input, std::size_t kernel = 3, std::size_t stride = 2, std::size_t pad = 1);

/// Half-pixel-center bilinear resize with border clamping.
template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& input, std::size_t out_h, std::size_t out_w);

/// Inverted dropout; identity in eval mode.
template <typename T>
Tensor<T> dropout(const Tensor<T>& input, double p, Mode mode, Rng& rng);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

/// Elementwise product.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> sum(const Tensor<T>& input);

template <typename T>
Tensor<T> mean(const Tensor<T>& input);

/// Mean sigmoid binary cross-entropy, log-sum-exp stable. Targets must be 0 or 1.
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& targets);

}  // namespace mctseg
