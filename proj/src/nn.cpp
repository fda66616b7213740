#include "samref/nn.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <numeric>

namespace samref::nn {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
void im2col(const Tensor<T>& x, int k, int stride, int pad, int oh, int ow, AlignedVector<T>& col) {
  const int c = x.channels(), h = x.height(), w = x.width();
  const std::size_t n = static_cast<std::size_t>(oh) * ow;
  col.assign(static_cast<std::size_t>(c) * k * k * n, T(0));
  for (int ci = 0; ci < c; ++ci) {
    const T* src = x.data() + ci * x.plane();
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* dst = col.data() + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * n;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          const T* row = src + static_cast<std::size_t>(iy) * w;
          T* drow = dst + static_cast<std::size_t>(oy) * ow;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) drow[ox] = row[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const AlignedVector<T>& col, int k, int stride, int pad, int oh, int ow, Tensor<T>& dx) {
  const int c = dx.channels(), h = dx.height(), w = dx.width();
  const std::size_t n = static_cast<std::size_t>(oh) * ow;
  for (int ci = 0; ci < c; ++ci) {
    T* dst = dx.data() + ci * dx.plane();
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* src = col.data() + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * n;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          T* row = dst + static_cast<std::size_t>(iy) * w;
          const T* srow = src + static_cast<std::size_t>(oy) * ow;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) row[ix] += srow[ox];
          }
        }
      }
    }
  }
}

struct AxisSample {
  int lo = 0, hi = 0;
  double frac = 0;
};

std::vector<AxisSample> axis_samples(double start, double extent, int out, int in) {
  std::vector<AxisSample> s(out);
  const double step = extent / out;
  for (int i = 0; i < out; ++i) {
    double p = start + (i + 0.5) * step - 0.5;
    p = std::clamp(p, 0.0, double(in - 1));
    int lo = static_cast<int>(std::floor(p));
    lo = std::min(lo, in - 1);
    s[i].lo = lo;
    s[i].hi = std::min(lo + 1, in - 1);
    s[i].frac = p - lo;
  }
  return s;
}

}  // namespace

// ---------------------------------------------------------------- Conv2d

template <typename T>
Conv2d<T>::Conv2d(std::string name, int in_channels, int out_channels, int kernel, int stride,
                  int padding, bool with_bias)
    : weight(name + ".weight", {out_channels, in_channels, kernel, kernel}),
      bias(name + ".bias", {out_channels}),
      in_(in_channels), out_(out_channels), k_(kernel), stride_(stride),
      pad_(padding < 0 ? kernel / 2 : padding), has_bias_(with_bias) {
  require(in_channels > 0 && out_channels > 0 && kernel > 0 && stride > 0,
          ErrorCode::InvalidArgument, "invalid conv configuration for " + name);
}

template <typename T>
void Conv2d<T>::init_he(std::mt19937_64& rng, double gain) {
  const double fan_in = double(in_) * k_ * k_;
  std::normal_distribution<double> dist(0.0, gain * std::sqrt(2.0 / fan_in));
  for (auto& v : weight.value) v = static_cast<T>(dist(rng));
  std::fill(bias.value.begin(), bias.value.end(), T(0));
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x) const {
  require(x.channels() == in_, ErrorCode::InvalidArgument,
          weight.name + ": expected " + std::to_string(in_) + " input channels, got " +
              x.shape_string());
  const int oh = out_size(x.height()), ow = out_size(x.width());
  Tensor<T> y(out_, oh, ow);
  const std::size_t n = static_cast<std::size_t>(oh) * ow;
  const int kk = in_ * k_ * k_;
  ConstMapMat<T> wm(weight.value.data(), out_, kk);
  MapMat<T> ym(y.data(), out_, static_cast<Eigen::Index>(n));
  if (k_ == 1 && stride_ == 1 && pad_ == 0) {
    ConstMapMat<T> xm(x.data(), in_, static_cast<Eigen::Index>(n));
    ym.noalias() = wm * xm;
  } else {
    AlignedVector<T> col;
    im2col(x, k_, stride_, pad_, oh, ow, col);
    ConstMapMat<T> cm(col.data(), kk, static_cast<Eigen::Index>(n));
    ym.noalias() = wm * cm;
  }
  if (has_bias_) {
    for (int o = 0; o < out_; ++o) ym.row(o).array() += bias.value[o];
  }
  return y;
}

template <typename T>
Tensor<T> Conv2d<T>::backward(const Tensor<T>& x, const Tensor<T>& dy, bool need_input_grad) {
  const int oh = dy.height(), ow = dy.width();
  const std::size_t n = static_cast<std::size_t>(oh) * ow;
  const int kk = in_ * k_ * k_;
  ConstMapMat<T> dym(dy.data(), out_, static_cast<Eigen::Index>(n));
  MapMat<T> dwm(weight.grad.data(), out_, kk);
  ConstMapMat<T> wm(weight.value.data(), out_, kk);
  if (has_bias_) {
    for (int o = 0; o < out_; ++o) bias.grad[o] += dym.row(o).sum();
  }
  Tensor<T> dx;
  if (k_ == 1 && stride_ == 1 && pad_ == 0) {
    ConstMapMat<T> xm(x.data(), in_, static_cast<Eigen::Index>(n));
    dwm.noalias() += dym * xm.transpose();
    if (need_input_grad) {
      dx = Tensor<T>(in_, x.height(), x.width());
      MapMat<T> dxm(dx.data(), in_, static_cast<Eigen::Index>(n));
      dxm.noalias() = wm.transpose() * dym;
    }
    return dx;
  }
  AlignedVector<T> col;
  im2col(x, k_, stride_, pad_, oh, ow, col);
  ConstMapMat<T> cm(col.data(), kk, static_cast<Eigen::Index>(n));
  dwm.noalias() += dym * cm.transpose();
  if (need_input_grad) {
    AlignedVector<T> dcol(col.size());
    MapMat<T> dcm(dcol.data(), kk, static_cast<Eigen::Index>(n));
    dcm.noalias() = wm.transpose() * dym;
    dx = Tensor<T>(in_, x.height(), x.width());
    col2im(dcol, k_, stride_, pad_, oh, ow, dx);
  }
  return dx;
}

// ------------------------------------------------------------- GroupNorm

template <typename T>
GroupNorm<T>::GroupNorm(std::string name, int channels, int groups, double eps)
    : gamma(name + ".gamma", {channels}), beta(name + ".beta", {channels}),
      channels_(channels), groups_(groups), eps_(eps) {
  require(groups > 0 && channels % groups == 0, ErrorCode::InvalidArgument,
          name + ": channels must divide into groups");
  std::fill(gamma.value.begin(), gamma.value.end(), T(1));
}

template <typename T>
Tensor<T> GroupNorm<T>::forward(const Tensor<T>& x) const {
  require(x.channels() == channels_, ErrorCode::InvalidArgument, gamma.name + ": channel mismatch");
  Tensor<T> y(x.channels(), x.height(), x.width());
  const int cpg = channels_ / groups_;
  const std::size_t n = cpg * x.plane();
  for (int g = 0; g < groups_; ++g) {
    const T* src = x.data() + g * n;
    double mean = 0;
    for (std::size_t i = 0; i < n; ++i) mean += src[i];
    mean /= double(n);
    double var = 0;
    for (std::size_t i = 0; i < n; ++i) var += (src[i] - mean) * (src[i] - mean);
    var /= double(n);
    const double rstd = 1.0 / std::sqrt(var + eps_);
    for (int cc = 0; cc < cpg; ++cc) {
      const int c = g * cpg + cc;
      const T* s = x.data() + c * x.plane();
      T* d = y.data() + c * x.plane();
      const double ga = gamma.value[c], be = beta.value[c];
      for (std::size_t i = 0; i < x.plane(); ++i)
        d[i] = static_cast<T>((s[i] - mean) * rstd * ga + be);
    }
  }
  return y;
}

template <typename T>
Tensor<T> GroupNorm<T>::backward(const Tensor<T>& x, const Tensor<T>& dy) {
  Tensor<T> dx(x.channels(), x.height(), x.width());
  const int cpg = channels_ / groups_;
  const std::size_t plane = x.plane();
  const std::size_t n = cpg * plane;
  for (int g = 0; g < groups_; ++g) {
    const T* src = x.data() + g * n;
    double mean = 0;
    for (std::size_t i = 0; i < n; ++i) mean += src[i];
    mean /= double(n);
    double var = 0;
    for (std::size_t i = 0; i < n; ++i) var += (src[i] - mean) * (src[i] - mean);
    var /= double(n);
    const double rstd = 1.0 / std::sqrt(var + eps_);
    double sum_dxh = 0, sum_dxh_xh = 0;
    for (int cc = 0; cc < cpg; ++cc) {
      const int c = g * cpg + cc;
      const T* s = x.data() + c * plane;
      const T* d = dy.data() + c * plane;
      const double ga = gamma.value[c];
      double dg = 0, db = 0;
      for (std::size_t i = 0; i < plane; ++i) {
        const double xh = (s[i] - mean) * rstd;
        dg += d[i] * xh;
        db += d[i];
        sum_dxh += d[i] * ga;
        sum_dxh_xh += d[i] * ga * xh;
      }
      gamma.grad[c] += static_cast<T>(dg);
      beta.grad[c] += static_cast<T>(db);
    }
    const double m1 = sum_dxh / double(n), m2 = sum_dxh_xh / double(n);
    for (int cc = 0; cc < cpg; ++cc) {
      const int c = g * cpg + cc;
      const T* s = x.data() + c * plane;
      const T* d = dy.data() + c * plane;
      T* o = dx.data() + c * plane;
      const double ga = gamma.value[c];
      for (std::size_t i = 0; i < plane; ++i) {
        const double xh = (s[i] - mean) * rstd;
        o[i] = static_cast<T>(rstd * (d[i] * ga - m1 - xh * m2));
      }
    }
  }
  return dx;
}

// ------------------------------------------------------------ elementwise

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y(x.channels(), x.height(), x.width());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  return y;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& y, const Tensor<T>& dy) {
  Tensor<T> dx(dy.channels(), dy.height(), dy.width());
  for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = y[i] > T(0) ? dy[i] : T(0);
  return dx;
}

// ------------------------------------------------------------- resampling

template <typename T>
Tensor<T> roi_align(const Tensor<T>& x, const Region& r, int out_h, int out_w) {
  require(out_h > 0 && out_w > 0 && !x.empty(), ErrorCode::InvalidArgument,
          "roi_align: empty input or output");
  const auto ys = axis_samples(r.y0, r.y1 - r.y0, out_h, x.height());
  const auto xs = axis_samples(r.x0, r.x1 - r.x0, out_w, x.width());
  Tensor<T> y(x.channels(), out_h, out_w);
  for (int c = 0; c < x.channels(); ++c) {
    for (int i = 0; i < out_h; ++i) {
      const auto& sy = ys[i];
      for (int j = 0; j < out_w; ++j) {
        const auto& sx = xs[j];
        const double v00 = x(c, sy.lo, sx.lo), v01 = x(c, sy.lo, sx.hi);
        const double v10 = x(c, sy.hi, sx.lo), v11 = x(c, sy.hi, sx.hi);
        const double top = v00 + (v01 - v00) * sx.frac;
        const double bot = v10 + (v11 - v10) * sx.frac;
        y(c, i, j) = static_cast<T>(top + (bot - top) * sy.frac);
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> roi_align_backward(const Tensor<T>& dy, const Region& r, int in_h, int in_w) {
  const auto ys = axis_samples(r.y0, r.y1 - r.y0, dy.height(), in_h);
  const auto xs = axis_samples(r.x0, r.x1 - r.x0, dy.width(), in_w);
  Tensor<T> dx(dy.channels(), in_h, in_w);
  for (int c = 0; c < dy.channels(); ++c) {
    for (int i = 0; i < dy.height(); ++i) {
      const auto& sy = ys[i];
      for (int j = 0; j < dy.width(); ++j) {
        const auto& sx = xs[j];
        const double g = dy(c, i, j);
        dx(c, sy.lo, sx.lo) += static_cast<T>(g * (1 - sy.frac) * (1 - sx.frac));
        dx(c, sy.lo, sx.hi) += static_cast<T>(g * (1 - sy.frac) * sx.frac);
        dx(c, sy.hi, sx.lo) += static_cast<T>(g * sy.frac * (1 - sx.frac));
        dx(c, sy.hi, sx.hi) += static_cast<T>(g * sy.frac * sx.frac);
      }
    }
  }
  return dx;
}

template <typename T>
Tensor<T> avg_pool(const Tensor<T>& x, int k) {
  require(x.height() % k == 0 && x.width() % k == 0, ErrorCode::InvalidArgument,
          "avg_pool: size not divisible");
  Tensor<T> y(x.channels(), x.height() / k, x.width() / k);
  const double inv = 1.0 / (k * k);
  for (int c = 0; c < x.channels(); ++c)
    for (int i = 0; i < y.height(); ++i)
      for (int j = 0; j < y.width(); ++j) {
        double s = 0;
        for (int a = 0; a < k; ++a)
          for (int b = 0; b < k; ++b) s += x(c, i * k + a, j * k + b);
        y(c, i, j) = static_cast<T>(s * inv);
      }
  return y;
}

template <typename T>
Tensor<T> avg_pool_backward(const Tensor<T>& dy, int k) {
  Tensor<T> dx(dy.channels(), dy.height() * k, dy.width() * k);
  const T inv = T(1) / T(k * k);
  for (int c = 0; c < dx.channels(); ++c)
    for (int i = 0; i < dx.height(); ++i)
      for (int j = 0; j < dx.width(); ++j) dx(c, i, j) = dy(c, i / k, j / k) * inv;
  return dx;
}

template <typename T>
Tensor<T> concat_channels(const std::vector<const Tensor<T>*>& parts) {
  require(!parts.empty(), ErrorCode::InvalidArgument, "concat of nothing");
  int c = 0;
  for (auto* p : parts) {
    require_shape(p->height() == parts[0]->height() && p->width() == parts[0]->width(),
                  "concat spatial dims");
    c += p->channels();
  }
  Tensor<T> y(c, parts[0]->height(), parts[0]->width());
  std::size_t off = 0;
  for (auto* p : parts) {
    std::copy(p->data(), p->data() + p->size(), y.data() + off);
    off += p->size();
  }
  return y;
}

template <typename T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& x, const std::vector<int>& sizes) {
  std::vector<Tensor<T>> out;
  std::size_t off = 0;
  for (int s : sizes) {
    Tensor<T> t(s, x.height(), x.width());
    std::copy(x.data() + off, x.data() + off + t.size(), t.data());
    off += t.size();
    out.push_back(std::move(t));
  }
  require_shape(off == x.size(), "split sizes do not cover tensor");
  return out;
}

// ------------------------------------------------------------------ Adam

template <typename T>
void Adam<T>::step(const ParamList<T>& params) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, double(t_));
  const double bc2 = 1.0 - std::pow(beta2_, double(t_));
  for (auto* p : params) {
    auto& slot = slots_[p->name];
    if (slot.m.size() != p->size()) {
      slot.m.assign(p->size(), T(0));
      slot.v.assign(p->size(), T(0));
    }
    for (std::size_t i = 0; i < p->size(); ++i) {
      const double g = p->grad[i];
      const double m = beta1_ * slot.m[i] + (1 - beta1_) * g;
      const double v = beta2_ * slot.v[i] + (1 - beta2_) * g * g;
      slot.m[i] = static_cast<T>(m);
      slot.v[i] = static_cast<T>(v);
      const double update = lr_ * (m / bc1) / (std::sqrt(v / bc2) + eps_);
      p->value[i] = static_cast<T>(p->value[i] - update);
    }
  }
}

#define SAMREF_NN_INSTANTIATE(T)                                                          \
  template class Conv2d<T>;                                                               \
  template class GroupNorm<T>;                                                            \
  template class Adam<T>;                                                                 \
  template Tensor<T> relu<T>(const Tensor<T>&);                                           \
  template Tensor<T> relu_backward<T>(const Tensor<T>&, const Tensor<T>&);                \
  template Tensor<T> roi_align<T>(const Tensor<T>&, const Region&, int, int);             \
  template Tensor<T> roi_align_backward<T>(const Tensor<T>&, const Region&, int, int);    \
  template Tensor<T> avg_pool<T>(const Tensor<T>&, int);                                  \
  template Tensor<T> avg_pool_backward<T>(const Tensor<T>&, int);                         \
  template Tensor<T> concat_channels<T>(const std::vector<const Tensor<T>*>&);            \
  template std::vector<Tensor<T>> split_channels<T>(const Tensor<T>&, const std::vector<int>&);

SAMREF_NN_INSTANTIATE(float)
SAMREF_NN_INSTANTIATE(double)

}  // namespace samref::nn
