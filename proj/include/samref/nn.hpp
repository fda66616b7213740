#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "samref/tensor.hpp"

namespace samref::nn {

/// A named learnable array with its accumulated gradient.
template <typename T>
struct Param {
  std::string name;
  std::vector<int> shape;
  AlignedVector<T> value;
  AlignedVector<T> grad;

  Param() = default;
  Param(std::string n, std::vector<int> s) : name(std::move(n)), shape(std::move(s)) {
    std::size_t count = 1;
    for (int d : shape) count *= static_cast<std::size_t>(d);
    value.assign(count, T(0));
    grad.assign(count, T(0));
  }
  std::size_t size() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

template <typename T>
using ParamList = std::vector<Param<T>*>;

template <typename T>
void zero_grads(const ParamList<T>& params) {
  for (auto* p : params) p->zero_grad();
}

/// 2-D convolution over a single C x H x W sample via im2col + GEMM.
///
/// Weight layout is [out][in][ky][kx]. Backward accumulates into the
/// parameter gradients and returns the input gradient.
template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, int in_channels, int out_channels, int kernel, int stride = 1,
         int padding = -1, bool with_bias = true);

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  int kernel() const { return k_; }
  int stride() const { return stride_; }
  int padding() const { return pad_; }
  bool has_bias() const { return has_bias_; }
  int out_size(int in) const { return (in + 2 * pad_ - k_) / stride_ + 1; }

  Tensor<T> forward(const Tensor<T>& x) const;
  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy, bool need_input_grad = true);

  void init_he(std::mt19937_64& rng, double gain = 1.0);
  void collect(ParamList<T>& out) {
    out.push_back(&weight);
    if (has_bias_) out.push_back(&bias);
  }

  T& w(int o, int i, int ky, int kx) {
    return weight.value[((static_cast<std::size_t>(o) * in_ + i) * k_ + ky) * k_ + kx];
  }

  Param<T> weight;
  Param<T> bias;

 private:
  int in_ = 0, out_ = 0, k_ = 1, stride_ = 1, pad_ = 0;
  bool has_bias_ = true;
};

/// Group normalisation with per-channel affine (gamma, beta). Statistics are
/// per sample, so training and inference behave identically.
template <typename T>
class GroupNorm {
 public:
  GroupNorm() = default;
  GroupNorm(std::string name, int channels, int groups, double eps = 1e-5);

  Tensor<T> forward(const Tensor<T>& x) const;
  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy);
  void collect(ParamList<T>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }

  Param<T> gamma;
  Param<T> beta;

 private:
  int channels_ = 0, groups_ = 1;
  double eps_ = 1e-5;
};

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
/// Gradient of relu given its output.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& y, const Tensor<T>& dy);

template <typename T>
T sigmoid(T z) {
  if (z >= T(0)) {
    T e = std::exp(-z);
    return T(1) / (T(1) + e);
  }
  T e = std::exp(z);
  return e / (T(1) + e);
}

/// Axis-aligned region of a raster in continuous pixel units: the region
/// [y0, y1) x [x0, x1), pixel i spanning [i, i+1).
struct Region {
  double y0 = 0, x0 = 0, y1 = 0, x1 = 0;
};

/// Bilinear region resampling with the half-pixel (align_corners = false)
/// convention and border clamping: output bin (i, j) samples the source at
/// y = y0 + (i + 0.5) * (y1 - y0) / out_h - 0.5 (likewise for x).
template <typename T>
Tensor<T> roi_align(const Tensor<T>& x, const Region& region, int out_h, int out_w);
template <typename T>
Tensor<T> roi_align_backward(const Tensor<T>& dy, const Region& region, int in_h, int in_w);

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, int out_h, int out_w) {
  return roi_align(x, Region{0, 0, double(x.height()), double(x.width())}, out_h, out_w);
}
template <typename T>
Tensor<T> resize_bilinear_backward(const Tensor<T>& dy, int in_h, int in_w) {
  return roi_align_backward(dy, Region{0, 0, double(in_h), double(in_w)}, in_h, in_w);
}

/// Non-overlapping k x k mean pooling (dimensions must divide).
template <typename T>
Tensor<T> avg_pool(const Tensor<T>& x, int k);
template <typename T>
Tensor<T> avg_pool_backward(const Tensor<T>& dy, int k);

/// Channel concatenation and its split.
template <typename T>
Tensor<T> concat_channels(const std::vector<const Tensor<T>*>& parts);
template <typename T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& x, const std::vector<int>& sizes);

/// Adam with bias correction; state keyed by parameter name.
template <typename T>
class Adam {
 public:
  struct Slot {
    std::vector<T> m, v;
  };

  explicit Adam(double lr = 5e-4, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const ParamList<T>& params);

  double learning_rate() const { return lr_; }
  std::int64_t steps() const { return t_; }
  void set_steps(std::int64_t t) { t_ = t; }
  std::map<std::string, Slot>& slots() { return slots_; }
  const std::map<std::string, Slot>& slots() const { return slots_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::map<std::string, Slot> slots_;
};

}  // namespace samref::nn
