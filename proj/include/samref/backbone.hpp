#pragma once

#include <atomic>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "samref/nn.hpp"
#include "samref/types.hpp"

namespace samref {

/// Backbone feature map (E x M/4 x M/4) tagged with the source image key.
struct EmbeddingMap {
  Tensor<float> data;
  std::string image_key;
};

struct CoarsePrediction {
  MaskLogits logits;  // 1 x M x M
  std::string source;
};

/// Frozen late-fusion segmenter: heavy encoder run once per image, light
/// prompt decoder run per click. Any implementation honouring this tensor
/// contract can drive the refiners.
class Backbone {
 public:
  virtual ~Backbone() = default;
  virtual std::string id() const = 0;
  virtual const ModelDims& dims() const = 0;
  virtual EmbeddingMap encode(const ImagePlane& image) const = 0;
  virtual CoarsePrediction decode(const EmbeddingMap& emb, std::span<const Click> clicks,
                                  const MaskLogits* prev_logits) const = 0;
};

/// Fourier features of a normalised coordinate pair; kFourierDims values.
inline constexpr int kFourierFreqs = 4;
inline constexpr int kFourierDims = 4 * kFourierFreqs;
void fourier_features(double u, double v, std::span<double> out);

/// Small convolutional stand-in for the foundation segmenter.
///
/// Encoder: four 3x3 stride-2 stages (S -> S/16 = M/4), widths
/// w, 2w, 4w, E. Decoder: each click becomes a sparse token built from the
/// embedding under it, its Fourier position and a polarity bias; tokens score
/// every embedding cell against a position-aware query projection, the best
/// positive and negative scores join the embedding and the downsampled
/// previous mask in a three-layer conv trunk, and the M/4 logits are
/// bilinearly upsampled to M x M.
template <typename T>
class ToyBackbone {
 public:
  struct EncoderCache {
    Tensor<T> a1, a2, a3;
  };
  struct DecoderCache {
    Tensor<T> query_in, query, x0, h1, h2, h3;
    std::vector<std::vector<double>> click_ff;
    std::vector<std::pair<int, int>> click_cells;
    std::vector<int> click_pol;
    std::vector<std::vector<T>> tokens;
    std::vector<int> best_pos, best_neg;  // winning click per cell, -1 if none
  };

  ToyBackbone() = default;
  explicit ToyBackbone(const ModelDims& dims);

  const ModelDims& dims() const { return dims_; }

  Tensor<T> encode(const Tensor<T>& image, EncoderCache* cache = nullptr) const;
  /// prev_logits may be null (no mask prompt).
  Tensor<T> decode(const Tensor<T>& emb, std::span<const Click> clicks,
                   const Tensor<T>* prev_logits, DecoderCache* cache = nullptr) const;

  /// Accumulates decoder gradients; returns d(emb) when requested.
  Tensor<T> decode_backward(const Tensor<T>& emb, const DecoderCache& cache,
                            const Tensor<T>& d_logits, bool need_emb_grad);
  void encode_backward(const Tensor<T>& image, const EncoderCache& cache, const Tensor<T>& d_emb);

  void init(std::mt19937_64& rng);
  void collect_encoder(nn::ParamList<T>& out);
  void collect_decoder(nn::ParamList<T>& out);

  nn::Conv2d<T> enc1, enc2, enc3, enc4;
  nn::Param<T> tok_from_emb;  // D x E
  nn::Param<T> tok_from_pos;  // D x F
  nn::Param<T> tok_polarity;  // 2 x D
  nn::Conv2d<T> query;        // 1x1, (E + F) -> D
  nn::Conv2d<T> trunk1, trunk2, trunk3, out;

 private:
  ModelDims dims_;
  Tensor<T> grid_pe_;  // F x M/4 x M/4
};

/// Backbone adapter over a float toy model, counting invocations.
class ToyBackboneAdapter final : public Backbone {
 public:
  explicit ToyBackboneAdapter(std::shared_ptr<const ToyBackbone<float>> model,
                              std::string id = "toy");

  std::string id() const override { return id_; }
  const ModelDims& dims() const override { return model_->dims(); }
  EmbeddingMap encode(const ImagePlane& image) const override;
  CoarsePrediction decode(const EmbeddingMap& emb, std::span<const Click> clicks,
                          const MaskLogits* prev_logits) const override;

  long encode_calls() const { return encode_calls_.load(); }
  long decode_calls() const { return decode_calls_.load(); }

 private:
  std::shared_ptr<const ToyBackbone<float>> model_;
  std::string id_;
  mutable std::atomic<long> encode_calls_{0};
  mutable std::atomic<long> decode_calls_{0};
};

}  // namespace samref
