#include "mctseg/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "mctseg/errors.hpp"

namespace mctseg {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

// Upper bound on elements in one im2col tile.
constexpr std::size_t kTileBudget = std::size_t{1} << 21;

void require_rank4(const Shape& s, const char* op) {
  if (s.size() != 4) throw ShapeError(std::string(op) + " expects NCHW input, got " + shape_str(s));
}

struct ConvGeometry {
  std::size_t n, cin, h, w, cout, hout, wout, k, p;
  bool pointwise;
};

// Gathers the receptive fields of output positions [p0, p0+tile) into a K x tile matrix.
template <typename T>
void im2col(const T* image, const ConvGeometry& g, const ConvParams& cp, std::size_t p0, std::size_t tile,
            T* cols) {
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ki = 0; ki < cp.kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < cp.kernel_w; ++kj) {
        const std::size_t row = (c * cp.kernel_h + ki) * cp.kernel_w + kj;
        T* dst = cols + row * tile;
        const T* plane = image + c * g.h * g.w;
        for (std::size_t t = 0; t < tile; ++t) {
          const std::size_t p = p0 + t;
          const std::size_t oy = p / g.wout, ox = p % g.wout;
          const auto iy = static_cast<std::int64_t>(oy * cp.stride_h + ki * cp.dil_h) - static_cast<std::int64_t>(cp.pad_h);
          const auto ix = static_cast<std::int64_t>(ox * cp.stride_w + kj * cp.dil_w) - static_cast<std::int64_t>(cp.pad_w);
          const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::int64_t>(g.h) && ix < static_cast<std::int64_t>(g.w);
          dst[t] = inside ? plane[iy * static_cast<std::int64_t>(g.w) + ix] : T{};
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, const ConvParams& cp, std::size_t p0, std::size_t tile,
                T* image_grad) {
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ki = 0; ki < cp.kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < cp.kernel_w; ++kj) {
        const std::size_t row = (c * cp.kernel_h + ki) * cp.kernel_w + kj;
        const T* src = cols + row * tile;
        T* plane = image_grad + c * g.h * g.w;
        for (std::size_t t = 0; t < tile; ++t) {
          const std::size_t p = p0 + t;
          const std::size_t oy = p / g.wout, ox = p % g.wout;
          const auto iy = static_cast<std::int64_t>(oy * cp.stride_h + ki * cp.dil_h) - static_cast<std::int64_t>(cp.pad_h);
          const auto ix = static_cast<std::int64_t>(ox * cp.stride_w + kj * cp.dil_w) - static_cast<std::int64_t>(cp.pad_w);
          if (iy >= 0 && ix >= 0 && iy < static_cast<std::int64_t>(g.h) && ix < static_cast<std::int64_t>(g.w)) {
            plane[iy * static_cast<std::int64_t>(g.w) + ix] += src[t];
          }
        }
      }
    }
  }
}

template <typename T>
void batchnorm_check(const Tensor<T>& input, const BatchNorm<T>& state) {
  require_rank4(input.shape(), "batchnorm2d");
  if (input.dim(1) != state.channels() || state.gamma.numel() != state.channels() ||
      state.beta.numel() != state.channels() || state.running_var.size() != state.channels()) {
    throw ShapeError("batchnorm2d channel mismatch: input " + shape_str(input.shape()) + ", state has " +
                     std::to_string(state.channels()) + " channels");
  }
  if (!(state.eps > 0.0)) throw ConfigError("batchnorm2d eps must be positive");
}

template <typename T>
Tensor<T> batchnorm_impl(const Tensor<T>& input, const BatchNorm<T>& state, Mode mode, std::vector<T>* run_mean,
                         std::vector<T>* run_var) {
  batchnorm_check(input, state);
  const std::size_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  const std::size_t count = n * hw;
  if (mode == Mode::train && count < 2) {
    throw ShapeError("batchnorm2d in train mode needs at least 2 values per channel, got " + shape_str(input.shape()));
  }
  const auto x = input.data();
  const auto gamma = state.gamma.data();
  const auto beta = state.beta.data();

  std::vector<T> mean_c(c), invstd_c(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mu, var;
    if (mode == Mode::train) {
      double s = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = x.data() + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) s += p[i];
      }
      mu = s / static_cast<double>(count);
      double sq = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = x.data() + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          const double d = p[i] - mu;
          sq += d * d;
        }
      }
      var = sq / static_cast<double>(count);
      const double unbiased = sq / static_cast<double>(count - 1);
      (*run_mean)[ch] = static_cast<T>((1.0 - state.momentum) * (*run_mean)[ch] + state.momentum * mu);
      (*run_var)[ch] = static_cast<T>((1.0 - state.momentum) * (*run_var)[ch] + state.momentum * unbiased);
    } else {
      mu = state.running_mean[ch];
      var = state.running_var[ch];
    }
    mean_c[ch] = static_cast<T>(mu);
    invstd_c[ch] = static_cast<T>(1.0 / std::sqrt(var + state.eps));
  }

  std::vector<T> out(x.size());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * hw;
      const T scale = gamma[ch] * invstd_c[ch];
      const T shift = beta[ch] - mean_c[ch] * scale;
      for (std::size_t i = 0; i < hw; ++i) out[off + i] = x[off + i] * scale + shift;
    }
  }

  Tensor<T> in_t = input, g_t = state.gamma, b_t = state.beta;
  return make_result<T>(
      input.shape(), std::move(out), {input, state.gamma, state.beta}, "batchnorm2d",
      [in_t, g_t, b_t, mean_c, invstd_c, mode, n, c, hw, count](std::span<const T> gout) {
        const auto xv = in_t.data();
        const auto gam = g_t.data();
        auto gx = grad_sink(in_t);
        auto gg = grad_sink(g_t);
        auto gb = grad_sink(b_t);
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::size_t b = 0; b < n; ++b) {
            const std::size_t off = (b * c + ch) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
              const double xhat = (xv[off + i] - mean_c[ch]) * invstd_c[ch];
              sum_dy += gout[off + i];
              sum_dy_xhat += gout[off + i] * xhat;
            }
          }
          if (!gg.empty()) gg[ch] += static_cast<T>(sum_dy_xhat);
          if (!gb.empty()) gb[ch] += static_cast<T>(sum_dy);
          if (gx.empty()) continue;
          const double k = static_cast<double>(gam[ch]) * invstd_c[ch];
          const double m = static_cast<double>(count);
          for (std::size_t b = 0; b < n; ++b) {
            const std::size_t off = (b * c + ch) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
              if (mode == Mode::train) {
                const double xhat = (xv[off + i] - mean_c[ch]) * invstd_c[ch];
                gx[off + i] += static_cast<T>(k * (gout[off + i] - sum_dy / m - xhat * sum_dy_xhat / m));
              } else {
                gx[off + i] += static_cast<T>(k * gout[off + i]);
              }
            }
          }
        }
      });
}

// Per-axis source indices and weights for half-pixel bilinear sampling.
struct Interp1d {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;
};

Interp1d bilinear_axis(std::size_t in, std::size_t out) {
  Interp1d r;
  r.lo.resize(out);
  r.hi.resize(out);
  r.frac.resize(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t d = 0; d < out; ++d) {
    double src = (static_cast<double>(d) + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    auto lo = static_cast<std::size_t>(src);
    if (lo > in - 1) lo = in - 1;
    r.lo[d] = lo;
    r.hi[d] = lo + 1 < in ? lo + 1 : lo;
    r.frac[d] = src - static_cast<double>(lo);
  }
  return r;
}

}  // namespace

std::int64_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad,
                             std::size_t dilation) {
  const auto numer = static_cast<std::int64_t>(in + 2 * pad) - static_cast<std::int64_t>(dilation * (kernel - 1)) - 1;
  if (numer < 0) return 0;
  return numer / static_cast<std::int64_t>(stride) + 1;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, const ConvParams& cp) {
  require_rank4(input.shape(), "conv2d");
  if (weight.rank() != 4) throw ShapeError("conv2d weight must be rank 4, got " + shape_str(weight.shape()));
  if (cp.kernel_h == 0 || cp.kernel_w == 0 || cp.stride_h == 0 || cp.stride_w == 0 || cp.dil_h == 0 || cp.dil_w == 0) {
    throw ConfigError("conv2d kernel, stride and dilation must be positive");
  }
  ConvGeometry g{};
  g.n = input.dim(0);
  g.cin = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.cout = weight.dim(0);
  if (weight.dim(1) != g.cin || weight.dim(2) != cp.kernel_h || weight.dim(3) != cp.kernel_w) {
    throw ShapeError("conv2d weight " + shape_str(weight.shape()) + " does not match input " +
                     shape_str(input.shape()) + " and kernel " + std::to_string(cp.kernel_h) + "x" +
                     std::to_string(cp.kernel_w));
  }
  if (cp.has_bias != bias.defined()) throw ShapeError("conv2d bias presence disagrees with has_bias");
  if (bias.defined() && bias.numel() != g.cout) throw ShapeError("conv2d bias length mismatch");
  const auto hout = conv_out_extent(g.h, cp.kernel_h, cp.stride_h, cp.pad_h, cp.dil_h);
  const auto wout = conv_out_extent(g.w, cp.kernel_w, cp.stride_w, cp.pad_w, cp.dil_w);
  if (hout < 1 || wout < 1) {
    throw ShapeError("conv2d output extent is not positive for input " + shape_str(input.shape()));
  }
  g.hout = static_cast<std::size_t>(hout);
  g.wout = static_cast<std::size_t>(wout);
  g.k = g.cin * cp.kernel_h * cp.kernel_w;
  g.p = g.hout * g.wout;
  g.pointwise = cp.kernel_h == 1 && cp.kernel_w == 1 && cp.stride_h == 1 && cp.stride_w == 1 && cp.pad_h == 0 &&
                cp.pad_w == 0;
  const std::size_t tile = g.pointwise ? g.p : std::clamp<std::size_t>(kTileBudget / g.k, 1, g.p);

  const auto x = input.data();
  const auto wdata = weight.data();
  std::vector<T> out(g.n * g.cout * g.p);
  std::vector<T> cols(g.pointwise ? 0 : g.k * tile);
  Eigen::Map<const RowMat<T>> wmat(wdata.data(), g.cout, g.k);
  for (std::size_t b = 0; b < g.n; ++b) {
    const T* image = x.data() + b * g.cin * g.h * g.w;
    T* dst = out.data() + b * g.cout * g.p;
    for (std::size_t p0 = 0; p0 < g.p; p0 += tile) {
      const std::size_t tl = std::min(tile, g.p - p0);
      StridedMap<T> omat(dst + p0, g.cout, tl, Eigen::OuterStride<>(g.p));
      if (g.pointwise) {
        Eigen::Map<const RowMat<T>> cmat(image, g.k, tl);
        omat.noalias() = wmat * cmat;
      } else {
        im2col(image, g, cp, p0, tl, cols.data());
        Eigen::Map<const RowMat<T>> cmat(cols.data(), g.k, tl);
        omat.noalias() = wmat * cmat;
      }
    }
    if (bias.defined()) {
      const auto bv = bias.data();
      for (std::size_t co = 0; co < g.cout; ++co) {
        T* row = dst + co * g.p;
        for (std::size_t i = 0; i < g.p; ++i) row[i] += bv[co];
      }
    }
  }

  std::vector<Tensor<T>> inputs{input, weight};
  if (bias.defined()) inputs.push_back(bias);
  Tensor<T> in_t = input, w_t = weight, b_t = bias;
  return make_result<T>(
      Shape{g.n, g.cout, g.hout, g.wout}, std::move(out), inputs, "conv2d",
      [in_t, w_t, b_t, g, cp, tile](std::span<const T> gout) {
        auto gx = grad_sink(in_t);
        auto gw = grad_sink(w_t);
        auto gb = grad_sink(b_t);
        const auto xv = in_t.data();
        Eigen::Map<const RowMat<T>> wmat(w_t.data().data(), g.cout, g.k);
        std::vector<T> cols(g.pointwise ? 0 : g.k * tile);
        std::vector<T> gcols(gx.empty() || g.pointwise ? 0 : g.k * tile);
        for (std::size_t b = 0; b < g.n; ++b) {
          const T* image = xv.data() + b * g.cin * g.h * g.w;
          const T* go = gout.data() + b * g.cout * g.p;
          if (!gb.empty()) {
            for (std::size_t co = 0; co < g.cout; ++co) {
              T s{};
              for (std::size_t i = 0; i < g.p; ++i) s += go[co * g.p + i];
              gb[co] += s;
            }
          }
          for (std::size_t p0 = 0; p0 < g.p; p0 += tile) {
            const std::size_t tl = std::min(tile, g.p - p0);
            ConstStridedMap<T> gomat(go + p0, g.cout, tl, Eigen::OuterStride<>(g.p));
            if (!gw.empty()) {
              Eigen::Map<RowMat<T>> gwmat(gw.data(), g.cout, g.k);
              if (g.pointwise) {
                Eigen::Map<const RowMat<T>> cmat(image, g.k, tl);
                gwmat.noalias() += gomat * cmat.transpose();
              } else {
                im2col(image, g, cp, p0, tl, cols.data());
                Eigen::Map<const RowMat<T>> cmat(cols.data(), g.k, tl);
                gwmat.noalias() += gomat * cmat.transpose();
              }
            }
            if (!gx.empty()) {
              T* gimage = gx.data() + b * g.cin * g.h * g.w;
              if (g.pointwise) {
                Eigen::Map<RowMat<T>> gimat(gimage, g.k, tl);
                gimat.noalias() += wmat.transpose() * gomat;
              } else {
                Eigen::Map<RowMat<T>> gcmat(gcols.data(), g.k, tl);
                gcmat.noalias() = wmat.transpose() * gomat;
                col2im_add(gcols.data(), g, cp, p0, tl, gimage);
              }
            }
          }
        }
      });
}

template <typename T>
BatchNorm<T> BatchNorm<T>::identity(std::size_t channels) {
  BatchNorm bn;
  bn.gamma = Tensor<T>::full({channels}, T{1});
  bn.gamma.set_requires_grad(true);
  bn.beta = Tensor<T>::zeros({channels});
  bn.beta.set_requires_grad(true);
  bn.running_mean.assign(channels, T{0});
  bn.running_var.assign(channels, T{1});
  return bn;
}

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& input, BatchNorm<T>& state, Mode mode) {
  return batchnorm_impl(input, state, mode, &state.running_mean, &state.running_var);
}

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const BatchNorm<T>& state) {
  return batchnorm_impl<T>(input, state, Mode::eval, nullptr, nullptr);
}

namespace {
thread_local BranchRecorder* active_recorder = nullptr;
}  // namespace

BranchRecorder::BranchRecorder() : previous_(active_recorder) { active_recorder = this; }
BranchRecorder::~BranchRecorder() { active_recorder = previous_; }

void BranchRecorder::record(std::uint64_t value) {
  for (int i = 0; i < 8; ++i) {
    digest_ ^= (value >> (8 * i)) & 0xff;
    digest_ *= 0x100000001b3ull;
  }
}

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  const auto x = input.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T{0} ? x[i] : T{0};
  if (BranchRecorder* rec = active_recorder) {
    std::uint64_t word = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      word = (word << 1) | (x[i] > T{0});
      if (i % 64 == 63 || i + 1 == x.size()) rec->record(word);
    }
  }
  Tensor<T> in_t = input;
  return make_result<T>(input.shape(), std::move(out), {input}, "relu", [in_t](std::span<const T> gout) {
    auto gx = grad_sink(in_t);
    const auto xv = in_t.data();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      if (xv[i] > T{0}) gx[i] += gout[i];
    }
  });
}

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& input, std::size_t kernel, std::size_t stride, std::size_t pad) {
  require_rank4(input.shape(), "maxpool2d");
  if (kernel == 0 || stride == 0) throw ConfigError("maxpool2d kernel and stride must be positive");
  if (2 * pad > kernel) throw ConfigError("maxpool2d padding must be at most half the kernel");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const auto hout_s = conv_out_extent(h, kernel, stride, pad, 1);
  const auto wout_s = conv_out_extent(w, kernel, stride, pad, 1);
  if (hout_s < 1 || wout_s < 1) throw ShapeError("maxpool2d output extent is not positive for " + shape_str(input.shape()));
  const auto hout = static_cast<std::size_t>(hout_s), wout = static_cast<std::size_t>(wout_s);
  const auto x = input.data();
  std::vector<T> out(n * c * hout * wout);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const T* src = x.data() + plane * h * w;
    for (std::size_t oy = 0; oy < hout; ++oy) {
      for (std::size_t ox = 0; ox < wout; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t best_idx = 0;
        bool found = false;
        for (std::size_t ki = 0; ki < kernel; ++ki) {
          const auto iy = static_cast<std::int64_t>(oy * stride + ki) - static_cast<std::int64_t>(pad);
          if (iy < 0 || iy >= static_cast<std::int64_t>(h)) continue;
          for (std::size_t kj = 0; kj < kernel; ++kj) {
            const auto ix = static_cast<std::int64_t>(ox * stride + kj) - static_cast<std::int64_t>(pad);
            if (ix < 0 || ix >= static_cast<std::int64_t>(w)) continue;
            const std::size_t idx = static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix);
            if (!found || src[idx] > best) {
              best = src[idx];
              best_idx = idx;
              found = true;
            }
          }
        }
        const std::size_t o = (plane * hout + oy) * wout + ox;
        out[o] = best;
        argmax[o] = plane * h * w + best_idx;
      }
    }
  }
  if (BranchRecorder* rec = active_recorder) {
    for (std::size_t idx : argmax) rec->record(idx);
  }
  Tensor<T> in_t = input;
  return make_result<T>(Shape{n, c, hout, wout}, std::move(out), {input}, "maxpool2d",
                        [in_t, argmax = std::move(argmax)](std::span<const T> gout) {
                          auto gx = grad_sink(in_t);
                          for (std::size_t o = 0; o < argmax.size(); ++o) gx[argmax[o]] += gout[o];
                        });
}

template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& input, std::size_t out_h, std::size_t out_w) {
  require_rank4(input.shape(), "bilinear_upsample");
  if (out_h == 0 || out_w == 0) throw ConfigError("bilinear_upsample target extents must be positive");
  const std::size_t planes = input.dim(0) * input.dim(1), h = input.dim(2), w = input.dim(3);
  const Interp1d ay = bilinear_axis(h, out_h);
  const Interp1d ax = bilinear_axis(w, out_w);
  const auto x = input.data();
  std::vector<T> out(planes * out_h * out_w);
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const T* src = x.data() + pl * h * w;
    T* dst = out.data() + pl * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const T fy = static_cast<T>(ay.frac[oy]);
      const T* r0 = src + ay.lo[oy] * w;
      const T* r1 = src + ay.hi[oy] * w;
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const T fx = static_cast<T>(ax.frac[ox]);
        const T top = (T{1} - fx) * r0[ax.lo[ox]] + fx * r0[ax.hi[ox]];
        const T bot = (T{1} - fx) * r1[ax.lo[ox]] + fx * r1[ax.hi[ox]];
        dst[oy * out_w + ox] = (T{1} - fy) * top + fy * bot;
      }
    }
  }
  Tensor<T> in_t = input;
  return make_result<T>(
      Shape{input.dim(0), input.dim(1), out_h, out_w}, std::move(out), {input}, "bilinear_upsample",
      [in_t, ay, ax, planes, h, w, out_h, out_w](std::span<const T> gout) {
        auto gx = grad_sink(in_t);
        for (std::size_t pl = 0; pl < planes; ++pl) {
          T* g = gx.data() + pl * h * w;
          const T* go = gout.data() + pl * out_h * out_w;
          for (std::size_t oy = 0; oy < out_h; ++oy) {
            const T fy = static_cast<T>(ay.frac[oy]);
            for (std::size_t ox = 0; ox < out_w; ++ox) {
              const T fx = static_cast<T>(ax.frac[ox]);
              const T v = go[oy * out_w + ox];
              g[ay.lo[oy] * w + ax.lo[ox]] += (T{1} - fy) * (T{1} - fx) * v;
              g[ay.lo[oy] * w + ax.hi[ox]] += (T{1} - fy) * fx * v;
              g[ay.hi[oy] * w + ax.lo[ox]] += fy * (T{1} - fx) * v;
              g[ay.hi[oy] * w + ax.hi[ox]] += fy * fx * v;
            }
          }
        }
      });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& input, double p, Mode mode, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout probability must lie in [0, 1), got " + std::to_string(p));
  if (mode == Mode::eval || p == 0.0) return input;
  const auto x = input.data();
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(x.size());
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    mask[i] = rng.uniform() < p ? T{0} : keep_scale;
    out[i] = x[i] * mask[i];
  }
  Tensor<T> in_t = input;
  return make_result<T>(input.shape(), std::move(out), {input}, "dropout",
                        [in_t, mask = std::move(mask)](std::span<const T> gout) {
                          auto gx = grad_sink(in_t);
                          for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gout[i] * mask[i];
                        });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("add shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const auto av = a.data(), bv = b.data();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  Tensor<T> a_t = a, b_t = b;
  return make_result<T>(a.shape(), std::move(out), {a, b}, "add", [a_t, b_t](std::span<const T> gout) {
    for (const Tensor<T>* t : {&a_t, &b_t}) {
      auto g = grad_sink(*t);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gout[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("mul shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const auto av = a.data(), bv = b.data();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  Tensor<T> a_t = a, b_t = b;
  return make_result<T>(a.shape(), std::move(out), {a, b}, "mul", [a_t, b_t](std::span<const T> gout) {
    auto ga = grad_sink(a_t);
    const auto bv2 = b_t.data();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gout[i] * bv2[i];
    auto gb = grad_sink(b_t);
    const auto av2 = a_t.data();
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gout[i] * av2[i];
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& input) {
  double s = 0.0;
  for (T v : input.data()) s += v;
  Tensor<T> in_t = input;
  return make_result<T>(Shape{1}, {static_cast<T>(s)}, {input}, "sum", [in_t](std::span<const T> gout) {
    auto g = grad_sink(in_t);
    for (auto& v : g) v += gout[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& input) {
  double s = 0.0;
  for (T v : input.data()) s += v;
  const double n = static_cast<double>(input.numel());
  Tensor<T> in_t = input;
  return make_result<T>(Shape{1}, {static_cast<T>(s / n)}, {input}, "mean", [in_t, n](std::span<const T> gout) {
    auto g = grad_sink(in_t);
    const T share = static_cast<T>(gout[0] / n);
    for (auto& v : g) v += share;
  });
}

template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& targets) {
  if (logits.shape() != targets.shape()) {
    throw ShapeError("bce_with_logits shape mismatch: " + shape_str(logits.shape()) + " vs " + shape_str(targets.shape()));
  }
  const auto z = logits.data(), t = targets.data();
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (t[i] != T{0} && t[i] != T{1}) throw DataError("bce_with_logits targets must be 0 or 1");
    const double zi = z[i];
    total += std::max(zi, 0.0) - zi * t[i] + std::log1p(std::exp(-std::abs(zi)));
  }
  const double n = static_cast<double>(z.size());
  const double loss = total / n;
  if (!std::isfinite(loss)) throw NumericalError("bce_with_logits produced a non-finite loss");
  Tensor<T> z_t = logits, t_t = targets;
  return make_result<T>(Shape{1}, {static_cast<T>(loss)}, {logits, targets}, "bce_with_logits",
                        [z_t, t_t, n](std::span<const T> gout) {
                          auto gz = grad_sink(z_t);
                          const auto zv = z_t.data(), tv = t_t.data();
                          const double scale = gout[0] / n;
                          for (std::size_t i = 0; i < gz.size(); ++i) {
                            const double zi = zv[i];
                            const double sig = zi >= 0 ? 1.0 / (1.0 + std::exp(-zi)) : std::exp(zi) / (1.0 + std::exp(zi));
                            gz[i] += static_cast<T>((sig - tv[i]) * scale);
                          }
                        });
}

#define MCTSEG_INSTANTIATE_OPS(T)                                                                          \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const ConvParams&);      \
  template struct BatchNorm<T>;                                                                            \
  template Tensor<T> batchnorm2d(const Tensor<T>&, BatchNorm<T>&, Mode);                                   \
  template Tensor<T> batchnorm2d(const Tensor<T>&, const BatchNorm<T>&);                                   \
  template Tensor<T> relu(const Tensor<T>&);                                                               \
  template Tensor<T> maxpool2d(const Tensor<T>&, std::size_t, std::size_t, std::size_t);                   \
  template Tensor<T> bilinear_upsample(const Tensor<T>&, std::size_t, std::size_t);                        \
  template Tensor<T> dropout(const Tensor<T>&, double, Mode, Rng&);                                        \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                              \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                              \
  template Tensor<T> sum(const Tensor<T>&);                                                                \
  template Tensor<T> mean(const Tensor<T>&);                                                               \
  template Tensor<T> bce_with_logits(const Tensor<T>&, const Tensor<T>&);

MCTSEG_INSTANTIATE_OPS(float)
MCTSEG_INSTANTIATE_OPS(double)

}  // namespace mctseg
