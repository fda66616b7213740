#include "samref/backbone.hpp"

#include <cmath>
#include <numbers>

namespace samref {

void fourier_features(double u, double v, std::span<double> out) {
  for (int f = 0; f < kFourierFreqs; ++f) {
    const double w = std::numbers::pi * double(1 << f);
    out[4 * f + 0] = std::sin(w * u);
    out[4 * f + 1] = std::cos(w * u);
    out[4 * f + 2] = std::sin(w * v);
    out[4 * f + 3] = std::cos(w * v);
  }
}

template <typename T>
ToyBackbone<T>::ToyBackbone(const ModelDims& d)
    : enc1("backbone.enc1", 3, d.enc_width, 3, 2, 1),
      enc2("backbone.enc2", d.enc_width, 2 * d.enc_width, 3, 2, 1),
      enc3("backbone.enc3", 2 * d.enc_width, 4 * d.enc_width, 3, 2, 1),
      enc4("backbone.enc4", 4 * d.enc_width, d.emb_channels, 3, 2, 1),
      tok_from_emb("decoder.tok_from_emb", {d.token_dim, d.emb_channels}),
      tok_from_pos("decoder.tok_from_pos", {d.token_dim, kFourierDims}),
      tok_polarity("decoder.tok_polarity", {2, d.token_dim}),
      query("decoder.query", d.emb_channels + kFourierDims, d.token_dim, 1, 1, 0),
      trunk1("decoder.trunk1", d.emb_channels + 3, d.token_dim, 3, 1, 1),
      trunk2("decoder.trunk2", d.token_dim, d.token_dim, 3, 1, 1),
      trunk3("decoder.trunk3", d.token_dim, d.token_dim, 3, 1, 1),
      out("decoder.out", d.token_dim, 1, 1, 1, 0),
      dims_(d) {
  d.validate();
  const int g = d.emb_size();
  grid_pe_ = Tensor<T>(kFourierDims, g, g);
  std::vector<double> ff(kFourierDims);
  for (int r = 0; r < g; ++r)
    for (int c = 0; c < g; ++c) {
      fourier_features((c + 0.5) / g, (r + 0.5) / g, ff);
      for (int f = 0; f < kFourierDims; ++f) grid_pe_(f, r, c) = static_cast<T>(ff[f]);
    }
}

template <typename T>
void ToyBackbone<T>::init(std::mt19937_64& rng) {
  enc1.init_he(rng);
  enc2.init_he(rng);
  enc3.init_he(rng);
  enc4.init_he(rng, 0.7);
  auto fill = [&](nn::Param<T>& p, double stdev) {
    std::normal_distribution<double> dist(0.0, stdev);
    for (auto& v : p.value) v = static_cast<T>(dist(rng));
  };
  fill(tok_from_emb, 1.0 / std::sqrt(double(dims_.emb_channels)));
  fill(tok_from_pos, 1.0 / std::sqrt(double(kFourierDims)));
  fill(tok_polarity, 0.5);
  query.init_he(rng, 0.7);
  trunk1.init_he(rng);
  trunk2.init_he(rng);
  trunk3.init_he(rng);
  out.init_he(rng, 0.5);
  out.bias.value[0] = T(-2);  // background prior before any evidence
}

template <typename T>
void ToyBackbone<T>::collect_encoder(nn::ParamList<T>& o) {
  enc1.collect(o);
  enc2.collect(o);
  enc3.collect(o);
  enc4.collect(o);
}

template <typename T>
void ToyBackbone<T>::collect_decoder(nn::ParamList<T>& o) {
  o.push_back(&tok_from_emb);
  o.push_back(&tok_from_pos);
  o.push_back(&tok_polarity);
  query.collect(o);
  trunk1.collect(o);
  trunk2.collect(o);
  trunk3.collect(o);
  out.collect(o);
}

template <typename T>
Tensor<T> ToyBackbone<T>::encode(const Tensor<T>& image, EncoderCache* cache) const {
  require(image.channels() == 3 && image.height() == dims_.image_size() &&
              image.width() == dims_.image_size(),
          ErrorCode::InvalidArgument,
          "encoder expects 3x" + std::to_string(dims_.image_size()) + "x" +
              std::to_string(dims_.image_size()) + ", got " + image.shape_string());
  require(image.all_finite(), ErrorCode::InvalidArgument, "image contains non-finite values");
  Tensor<T> a1 = nn::relu(enc1.forward(image));
  Tensor<T> a2 = nn::relu(enc2.forward(a1));
  Tensor<T> a3 = nn::relu(enc3.forward(a2));
  Tensor<T> e = enc4.forward(a3);
  if (cache) {
    cache->a1 = std::move(a1);
    cache->a2 = std::move(a2);
    cache->a3 = std::move(a3);
  }
  return e;
}

template <typename T>
void ToyBackbone<T>::encode_backward(const Tensor<T>& image, const EncoderCache& c,
                                     const Tensor<T>& d_emb) {
  Tensor<T> d3 = nn::relu_backward(c.a3, enc4.backward(c.a3, d_emb));
  Tensor<T> d2 = nn::relu_backward(c.a2, enc3.backward(c.a2, d3));
  Tensor<T> d1 = nn::relu_backward(c.a1, enc2.backward(c.a1, d2));
  enc1.backward(image, d1, false);
}

template <typename T>
Tensor<T> ToyBackbone<T>::decode(const Tensor<T>& emb, std::span<const Click> clicks,
                                 const Tensor<T>* prev_logits, DecoderCache* cache) const {
  const int g = dims_.emb_size(), E = dims_.emb_channels, D = dims_.token_dim;
  const int S = dims_.image_size(), M = dims_.map_size;
  require(emb.channels() == E && emb.height() == g && emb.width() == g,
          ErrorCode::State, "embedding shape " + emb.shape_string() + " does not match the model");

  DecoderCache local;
  DecoderCache& c = cache ? *cache : local;
  c = DecoderCache{};

  // Sparse click tokens.
  for (const Click& k : clicks) {
    require(k.x >= 0 && k.y >= 0 && k.x < S && k.y < S, ErrorCode::InvalidArgument,
            "click outside image bounds");
    std::vector<double> ff(kFourierDims);
    fourier_features((k.x + 0.5) / S, (k.y + 0.5) / S, ff);
    const int cr = std::min(g - 1, k.y * g / S), cc = std::min(g - 1, k.x * g / S);
    const int pol = k.polarity == Polarity::Positive ? 0 : 1;
    std::vector<T> tok(D);
    for (int d = 0; d < D; ++d) {
      double s = tok_polarity.value[pol * D + d];
      for (int e = 0; e < E; ++e) s += tok_from_emb.value[d * E + e] * emb(e, cr, cc);
      for (int f = 0; f < kFourierDims; ++f) s += tok_from_pos.value[d * kFourierDims + f] * ff[f];
      tok[d] = static_cast<T>(s);
    }
    c.click_ff.push_back(std::move(ff));
    c.click_cells.emplace_back(cr, cc);
    c.click_pol.push_back(pol);
    c.tokens.push_back(std::move(tok));
  }

  c.query_in = nn::concat_channels<T>({&emb, &grid_pe_});
  c.query = query.forward(c.query_in);

  const std::size_t cells = static_cast<std::size_t>(g) * g;
  Tensor<T> best(2, g, g);
  c.best_pos.assign(cells, -1);
  c.best_neg.assign(cells, -1);
  const double inv_sqrt_d = 1.0 / std::sqrt(double(D));
  for (std::size_t p = 0; p < cells; ++p) {
    double top[2] = {0, 0};
    int arg[2] = {-1, -1};
    for (std::size_t k = 0; k < c.tokens.size(); ++k) {
      double s = 0;
      for (int d = 0; d < D; ++d) s += c.query[d * cells + p] * c.tokens[k][d];
      s *= inv_sqrt_d;
      const int pol = c.click_pol[k];
      if (arg[pol] < 0 || s > top[pol]) {
        top[pol] = s;
        arg[pol] = static_cast<int>(k);
      }
    }
    best[p] = static_cast<T>(top[0]);
    best[cells + p] = static_cast<T>(top[1]);
    c.best_pos[p] = arg[0];
    c.best_neg[p] = arg[1];
  }

  Tensor<T> prev(1, g, g);
  if (prev_logits) {
    require_shape(prev_logits->channels() == 1 && prev_logits->height() == M &&
                      prev_logits->width() == M,
                  "previous logits must be 1x" + std::to_string(M) + "x" + std::to_string(M));
    Tensor<T> prob(1, M, M);
    for (std::size_t i = 0; i < prob.size(); ++i)
      prob[i] = T(2) * nn::sigmoid((*prev_logits)[i]) - T(1);
    prev = nn::avg_pool(prob, M / g);
  }
  auto parts = nn::split_channels(best, {1, 1});
  c.x0 = nn::concat_channels<T>({&emb, &parts[0], &parts[1], &prev});
  c.h1 = nn::relu(trunk1.forward(c.x0));
  c.h2 = nn::relu(trunk2.forward(c.h1));
  c.h3 = nn::relu(trunk3.forward(c.h2));
  Tensor<T> low = out.forward(c.h3);
  return nn::resize_bilinear(low, M, M);
}

template <typename T>
Tensor<T> ToyBackbone<T>::decode_backward(const Tensor<T>& emb, const DecoderCache& c,
                                          const Tensor<T>& d_logits, bool need_emb_grad) {
  const int g = dims_.emb_size(), E = dims_.emb_channels, D = dims_.token_dim;
  const std::size_t cells = static_cast<std::size_t>(g) * g;
  Tensor<T> d_low = nn::resize_bilinear_backward(d_logits, g, g);
  Tensor<T> d3 = nn::relu_backward(c.h3, out.backward(c.h3, d_low));
  Tensor<T> d2 = nn::relu_backward(c.h2, trunk3.backward(c.h2, d3));
  Tensor<T> d1 = nn::relu_backward(c.h1, trunk2.backward(c.h1, d2));
  Tensor<T> dx0 = trunk1.backward(c.x0, d1);
  auto dparts = nn::split_channels(dx0, {E, 1, 1, 1});

  const double inv_sqrt_d = 1.0 / std::sqrt(double(D));
  Tensor<T> dq(D, g, g);
  std::vector<std::vector<double>> dtok(c.tokens.size(), std::vector<double>(D, 0.0));
  for (std::size_t p = 0; p < cells; ++p) {
    const int winners[2] = {c.best_pos[p], c.best_neg[p]};
    const T grads[2] = {dparts[1][p], dparts[2][p]};
    for (int pol = 0; pol < 2; ++pol) {
      const int k = winners[pol];
      if (k < 0) continue;
      const double gs = grads[pol] * inv_sqrt_d;
      for (int d = 0; d < D; ++d) {
        dq[d * cells + p] += static_cast<T>(gs * c.tokens[k][d]);
        dtok[k][d] += gs * c.query[d * cells + p];
      }
    }
  }
  Tensor<T> dq_in = query.backward(c.query_in, dq, need_emb_grad);

  Tensor<T> d_emb;
  if (need_emb_grad) {
    d_emb = std::move(dparts[0]);
    auto qparts = nn::split_channels(dq_in, {E, kFourierDims});
    d_emb += qparts[0];
  }
  for (std::size_t k = 0; k < c.tokens.size(); ++k) {
    const auto [cr, cc] = c.click_cells[k];
    const int pol = c.click_pol[k];
    for (int d = 0; d < D; ++d) {
      const double gd = dtok[k][d];
      tok_polarity.grad[pol * D + d] += static_cast<T>(gd);
      for (int e = 0; e < E; ++e) {
        tok_from_emb.grad[d * E + e] += static_cast<T>(gd * emb(e, cr, cc));
        if (need_emb_grad) d_emb(e, cr, cc) += static_cast<T>(gd * tok_from_emb.value[d * E + e]);
      }
      for (int f = 0; f < kFourierDims; ++f)
        tok_from_pos.grad[d * kFourierDims + f] += static_cast<T>(gd * c.click_ff[k][f]);
    }
  }
  return d_emb;
}

template class ToyBackbone<float>;
template class ToyBackbone<double>;

ToyBackboneAdapter::ToyBackboneAdapter(std::shared_ptr<const ToyBackbone<float>> model,
                                       std::string id)
    : model_(std::move(model)), id_(std::move(id)) {}

EmbeddingMap ToyBackboneAdapter::encode(const ImagePlane& image) const {
  ++encode_calls_;
  return {model_->encode(image.pixels), image.key};
}

CoarsePrediction ToyBackboneAdapter::decode(const EmbeddingMap& emb, std::span<const Click> clicks,
                                            const MaskLogits* prev_logits) const {
  ++decode_calls_;
  return {model_->decode(emb.data, clicks, prev_logits), id_};
}

}  // namespace samref
