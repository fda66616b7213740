#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "samref/dataset.hpp"
#include "samref/nn.hpp"
#include "samref/tensor.hpp"
#include "samref/types.hpp"

namespace samref::testing {

/// 16x16 map, 64x64 image, 4x4 embedding grid; small enough for
/// finite-difference checks in double precision.
inline ModelDims tiny_dims() {
  ModelDims d;
  d.map_size = 16;
  d.emb_channels = 8;
  d.feat_channels = 8;
  d.enc_width = 4;
  d.token_dim = 8;
  d.crop_size = 8;
  d.disk_radius = 2;
  d.n_blocks = 3;
  return d;
}

template <typename T>
Tensor<T> random_tensor(std::mt19937_64& rng, int c, int h, int w, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<T> t(c, h, w);
  for (auto& v : t.values()) v = static_cast<T>(u(rng));
  return t;
}

inline BinaryMask random_mask(std::mt19937_64& rng, int h, int w, double p = 0.5) {
  std::bernoulli_distribution b(p);
  BinaryMask m(h, w);
  for (auto& v : m.bits) v = b(rng) ? 1 : 0;
  return m;
}

/// sum(r * y): a scalar probe whose gradient w.r.t. y is r.
inline double probe(const Tensor<double>& y, const Tensor<double>& r) {
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * r[i];
  return s;
}

/// Norm-wise relative error between two gradient vectors.
inline double rel_error(const std::vector<double>& a, const std::vector<double>& n) {
  double diff = 0, na = 0, nn = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - n[i]) * (a[i] - n[i]);
    na += a[i] * a[i];
    nn += n[i] * n[i];
  }
  const double denom = std::max(std::sqrt(na), std::sqrt(nn));
  return denom == 0 ? 0 : std::sqrt(diff) / denom;
}

/// Central differences of `loss` w.r.t. every entry of `vars`.
inline std::vector<double> numeric_grad(const std::function<double()>& loss,
                                        const std::vector<double*>& vars, double h = 1e-6) {
  std::vector<double> g(vars.size());
  for (std::size_t i = 0; i < vars.size(); ++i) {
    const double v = *vars[i];
    *vars[i] = v + h;
    const double lp = loss();
    *vars[i] = v - h;
    const double lm = loss();
    *vars[i] = v;
    g[i] = (lp - lm) / (2 * h);
  }
  return g;
}

/// Pointers and analytic gradients over a parameter list, optionally
/// subsampled to at most `max_per_param` entries per parameter.
struct ParamProbe {
  std::vector<double*> vars;
  std::vector<double> analytic;
};

inline ParamProbe probe_params(const nn::ParamList<double>& params, std::mt19937_64& rng,
                               std::size_t max_per_param = 0) {
  ParamProbe out;
  for (auto* p : params) {
    std::vector<std::size_t> idx(p->size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (max_per_param && idx.size() > max_per_param) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(max_per_param);
    }
    for (auto i : idx) {
      out.vars.push_back(&p->value[i]);
      out.analytic.push_back(p->grad[i]);
    }
  }
  return out;
}

inline ParamProbe probe_tensor(Tensor<double>& x, const Tensor<double>& grad) {
  ParamProbe out;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out.vars.push_back(&x[i]);
    out.analytic.push_back(grad[i]);
  }
  return out;
}

/// Scalar bilinear sample of channel c at continuous (y, x), border clamped.
template <typename T>
double bilinear_at(const Tensor<T>& t, int c, double y, double x) {
  y = std::clamp(y, 0.0, double(t.height() - 1));
  x = std::clamp(x, 0.0, double(t.width() - 1));
  const int y0 = int(std::floor(y)), x0 = int(std::floor(x));
  const int y1 = std::min(y0 + 1, t.height() - 1), x1 = std::min(x0 + 1, t.width() - 1);
  const double fy = y - y0, fx = x - x0;
  return (1 - fy) * ((1 - fx) * t(c, y0, x0) + fx * t(c, y0, x1)) +
         fy * ((1 - fx) * t(c, y1, x0) + fx * t(c, y1, x1));
}

/// In-memory synthetic samples at the resolution of `dims`.
inline std::vector<LoadedSample> toy_samples(int n, std::uint64_t seed, const ModelDims& dims,
                                             int min_foreground = 24) {
  SyntheticOptions o;
  o.count = n;
  o.seed = seed;
  o.image_size = dims.image_size();
  o.map_size = dims.map_size;
  o.min_foreground = min_foreground;
  std::vector<LoadedSample> out;
  for (int i = 0; i < n; ++i) {
    SyntheticSample s = generate_sample(o, i);
    LoadedSample l;
    l.id = s.id;
    l.image = make_image_plane(s.image, dims.image_size());
    l.gt = s.gt;
    l.has_hole = s.has_hole;
    l.has_protrusion = s.has_protrusion;
    out.push_back(std::move(l));
  }
  return out;
}

}  // namespace samref::testing
