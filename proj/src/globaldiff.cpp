#include "samref/globaldiff.hpp"

namespace samref {

template <typename T>
Tensor<T> error_detail_blend(const Tensor<T>& e, const Tensor<T>& d, const Tensor<T>& b) {
  require_shape(e.same_shape(d) && e.same_shape(b),
                "blend inputs " + e.shape_string() + ", " + d.shape_string() + ", " +
                    b.shape_string());
  Tensor<T> out(e.channels(), e.height(), e.width());
  for (std::size_t i = 0; i < e.size(); ++i) {
    const T s = nn::sigmoid(e[i]);
    out[i] = s * d[i] + (T(1) - s) * b[i];
  }
  return out;
}

template <typename T>
BlendGrads<T> error_detail_blend_backward(const Tensor<T>& e, const Tensor<T>& d,
                                          const Tensor<T>& b, const Tensor<T>& g) {
  BlendGrads<T> r{Tensor<T>(e.channels(), e.height(), e.width()),
                  Tensor<T>(e.channels(), e.height(), e.width()),
                  Tensor<T>(e.channels(), e.height(), e.width())};
  for (std::size_t i = 0; i < e.size(); ++i) {
    const T s = nn::sigmoid(e[i]);
    r.d_error[i] = g[i] * (d[i] - b[i]) * s * (T(1) - s);
    r.d_detail[i] = g[i] * s;
    r.d_base[i] = g[i] * (T(1) - s);
  }
  return r;
}

// -------------------------------------------------------------- Upscaler

template <typename T>
Upscaler<T>::Upscaler(const ModelDims& d)
    : conv1("globaldiff.up1", d.emb_channels, d.emb_channels / 2, 3, 1, 1),
      conv2("globaldiff.up2", d.emb_channels / 2, d.feat_channels, 3, 1, 1) {}

template <typename T>
UpscaledEmbedding<T> Upscaler<T>::forward(const Tensor<T>& emb, Cache* cache) const {
  require(emb.channels() == conv1.in_channels(), ErrorCode::InvalidArgument,
          "upscaler expects " + std::to_string(conv1.in_channels()) + " channels, got " +
              emb.shape_string());
  Tensor<T> u1 = nn::resize_bilinear(emb, 2 * emb.height(), 2 * emb.width());
  Tensor<T> a1 = nn::relu(conv1.forward(u1));
  Tensor<T> u2 = nn::resize_bilinear(a1, 2 * a1.height(), 2 * a1.width());
  UpscaledEmbedding<T> out{conv2.forward(u2)};
  if (cache) {
    cache->u1 = std::move(u1);
    cache->a1 = std::move(a1);
    cache->u2 = std::move(u2);
  }
  return out;
}

template <typename T>
void Upscaler<T>::backward(const Cache& c, const Tensor<T>& dy) {
  Tensor<T> du2 = conv2.backward(c.u2, dy);
  Tensor<T> da1 =
      nn::relu_backward(c.a1, nn::resize_bilinear_backward(du2, c.a1.height(), c.a1.width()));
  conv1.backward(c.u1, da1, false);
}

template <typename T>
void Upscaler<T>::init(std::mt19937_64& rng) {
  conv1.init_he(rng);
  conv2.init_he(rng, 0.5);
}

template <typename T>
void Upscaler<T>::collect(nn::ParamList<T>& out) {
  conv1.collect(out);
  conv2.collect(out);
}

// --------------------------------------------------------- ResBasicBlock

template <typename T>
ResBasicBlock<T>::ResBasicBlock(const std::string& name, int ch)
    : conv1(name + ".conv1", ch, ch, 3, 1, 1), conv2(name + ".conv2", ch, ch, 3, 1, 1),
      norm1(name + ".norm1", ch, norm_groups(ch)), norm2(name + ".norm2", ch, norm_groups(ch)) {}

template <typename T>
Tensor<T> ResBasicBlock<T>::forward(const Tensor<T>& x, Cache* cache) const {
  Tensor<T> c1 = conv1.forward(x);
  Tensor<T> r1 = nn::relu(norm1.forward(c1));
  Tensor<T> c2 = conv2.forward(r1);
  Tensor<T> s = norm2.forward(c2);
  s += x;
  Tensor<T> y = nn::relu(s);
  if (cache) {
    cache->x = x;
    cache->c1 = std::move(c1);
    cache->r1 = std::move(r1);
    cache->c2 = std::move(c2);
    cache->y = y;
  }
  return y;
}

template <typename T>
Tensor<T> ResBasicBlock<T>::backward(const Cache& c, const Tensor<T>& dy) {
  Tensor<T> ds = nn::relu_backward(c.y, dy);
  Tensor<T> dc2 = norm2.backward(c.c2, ds);
  Tensor<T> dr1 = conv2.backward(c.r1, dc2);
  Tensor<T> dc1 = norm1.backward(c.c1, nn::relu_backward(c.r1, dr1));
  Tensor<T> dx = conv1.backward(c.x, dc1);
  dx += ds;
  return dx;
}

template <typename T>
void ResBasicBlock<T>::init(std::mt19937_64& rng) {
  conv1.init_he(rng);
  conv2.init_he(rng);
  // Small residual branch at start so the stack begins near identity.
  std::fill(norm2.gamma.value.begin(), norm2.gamma.value.end(), T(0.1));
}

template <typename T>
void ResBasicBlock<T>::collect(nn::ParamList<T>& out) {
  conv1.collect(out);
  norm1.collect(out);
  conv2.collect(out);
  norm2.collect(out);
}

// ------------------------------------------------------ ErrorDetailHeads

template <typename T>
ErrorDetailHeads<T>::ErrorDetailHeads(const std::string& name, int in_ch, int red_ch)
    : reduce(name + ".reduce", in_ch, red_ch, 3, 1, 1),
      error_head(name + ".error", red_ch, 1, 1, 1, 0),
      detail_head(name + ".detail", red_ch, 1, 1, 1, 0) {}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> ErrorDetailHeads<T>::forward(const Tensor<T>& x,
                                                             Cache* cache) const {
  Tensor<T> r = nn::relu(reduce.forward(x));
  auto out = std::make_pair(error_head.forward(r), detail_head.forward(r));
  if (cache) {
    cache->x = x;
    cache->r = std::move(r);
  }
  return out;
}

template <typename T>
Tensor<T> ErrorDetailHeads<T>::backward(const Cache& c, const Tensor<T>& d_error,
                                        const Tensor<T>& d_detail) {
  Tensor<T> dr = error_head.backward(c.r, d_error);
  dr += detail_head.backward(c.r, d_detail);
  return reduce.backward(c.x, nn::relu_backward(c.r, dr));
}

template <typename T>
void ErrorDetailHeads<T>::init(std::mt19937_64& rng) {
  reduce.init_he(rng);
  error_head.init_he(rng, 0.5);
  detail_head.init_he(rng, 0.5);
  error_head.bias.value[0] = T(-2);  // gate starts mostly closed
}

template <typename T>
void ErrorDetailHeads<T>::collect(nn::ParamList<T>& out) {
  reduce.collect(out);
  error_head.collect(out);
  detail_head.collect(out);
}

// ------------------------------------------------------------ GlobalDiff

template <typename T>
GlobalDiff<T>::GlobalDiff(const ModelDims& d)
    : upscaler(d), heads("globaldiff.heads", d.feat_channels, d.feat_channels / 2) {
  for (int i = 0; i < d.n_blocks; ++i)
    blocks.emplace_back("globaldiff.block" + std::to_string(i), d.feat_channels);
}

template <typename T>
FusedFeature<T> GlobalDiff<T>::global_extract(const FusedFeature<T>& f0,
                                              const UpscaledEmbedding<T>& emb_up,
                                              ExtractCache* cache) const {
  require_shape(f0.data.same_shape(emb_up.data),
                "fused feature " + f0.data.shape_string() + " vs upscaled embedding " +
                    emb_up.data.shape_string());
  if (cache) cache->blocks.resize(blocks.size());
  Tensor<T> f = f0.data;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    f += emb_up.data;
    f = blocks[i].forward(f, cache ? &cache->blocks[i] : nullptr);
  }
  return {std::move(f), f0.stage + static_cast<int>(blocks.size())};
}

template <typename T>
RefinerHeadsOutput<T> GlobalDiff<T>::predict_heads(const FusedFeature<T>& fn,
                                                   typename ErrorDetailHeads<T>::Cache* cache) const {
  auto [e, d] = heads.forward(fn.data, cache);
  return {std::move(e), std::move(d), fn};
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> GlobalDiff<T>::global_extract_backward(const ExtractCache& cache,
                                                                       const Tensor<T>& d_fn) {
  Tensor<T> g = d_fn;
  Tensor<T> d_emb(d_fn.channels(), d_fn.height(), d_fn.width());
  for (std::size_t i = blocks.size(); i-- > 0;) {
    g = blocks[i].backward(cache.blocks[i], g);
    d_emb += g;
  }
  return {std::move(g), std::move(d_emb)};
}

template <typename T>
void GlobalDiff<T>::init(std::mt19937_64& rng) {
  upscaler.init(rng);
  for (auto& b : blocks) b.init(rng);
  heads.init(rng);
}

template <typename T>
void GlobalDiff<T>::collect(nn::ParamList<T>& out) {
  upscaler.collect(out);
  for (auto& b : blocks) b.collect(out);
  heads.collect(out);
}

template Tensor<float> error_detail_blend(const Tensor<float>&, const Tensor<float>&,
                                          const Tensor<float>&);
template Tensor<double> error_detail_blend(const Tensor<double>&, const Tensor<double>&,
                                           const Tensor<double>&);
template BlendGrads<float> error_detail_blend_backward(const Tensor<float>&, const Tensor<float>&,
                                                       const Tensor<float>&, const Tensor<float>&);
template BlendGrads<double> error_detail_blend_backward(const Tensor<double>&,
                                                        const Tensor<double>&,
                                                        const Tensor<double>&,
                                                        const Tensor<double>&);
template class Upscaler<float>;
template class Upscaler<double>;
template class ResBasicBlock<float>;
template class ResBasicBlock<double>;
template class ErrorDetailHeads<float>;
template class ErrorDetailHeads<double>;
template class GlobalDiff<float>;
template class GlobalDiff<double>;

}  // namespace samref
