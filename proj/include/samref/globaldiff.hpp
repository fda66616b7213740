#pragma once

#include <random>
#include <vector>

#include "samref/nn.hpp"
#include "samref/prompt_codec.hpp"
#include "samref/types.hpp"

namespace samref {

/// Error/detail logits plus the feature they were decoded from.
template <typename T>
struct RefinerHeadsOutput {
  Tensor<T> error_logits;
  Tensor<T> detail_logits;
  FusedFeature<T> feature;
};

/// Embedding upscaled to the refiner resolution (C x M x M).
template <typename T>
struct UpscaledEmbedding {
  Tensor<T> data;
};

/// out = sigmoid(e) * detail + (1 - sigmoid(e)) * base, per pixel, in logit space.
template <typename T>
Tensor<T> error_detail_blend(const Tensor<T>& error_logits, const Tensor<T>& detail_logits,
                             const Tensor<T>& base_logits);

template <typename T>
struct BlendGrads {
  Tensor<T> d_error, d_detail, d_base;
};

template <typename T>
BlendGrads<T> error_detail_blend_backward(const Tensor<T>& error_logits,
                                          const Tensor<T>& detail_logits,
                                          const Tensor<T>& base_logits, const Tensor<T>& d_out);

/// Two learned x2 stages: bilinear x2 -> 3x3 conv (E -> E/2) -> ReLU ->
/// bilinear x2 -> 3x3 conv (E/2 -> C).
template <typename T>
class Upscaler {
 public:
  struct Cache {
    Tensor<T> u1, a1, u2;
  };
  Upscaler() = default;
  Upscaler(const ModelDims& dims);

  UpscaledEmbedding<T> forward(const Tensor<T>& emb, Cache* cache = nullptr) const;
  void backward(const Cache& cache, const Tensor<T>& dy);
  void init(std::mt19937_64& rng);
  void collect(nn::ParamList<T>& out);

  nn::Conv2d<T> conv1, conv2;
};

/// conv3x3 -> norm -> ReLU -> conv3x3 -> norm, identity skip, ReLU. Stride 1.
template <typename T>
class ResBasicBlock {
 public:
  struct Cache {
    Tensor<T> x, c1, r1, c2, y;
  };
  ResBasicBlock() = default;
  ResBasicBlock(const std::string& name, int channels);

  Tensor<T> forward(const Tensor<T>& x, Cache* cache = nullptr) const;
  Tensor<T> backward(const Cache& cache, const Tensor<T>& dy);
  void init(std::mt19937_64& rng);
  void collect(nn::ParamList<T>& out);

  nn::Conv2d<T> conv1, conv2;
  nn::GroupNorm<T> norm1, norm2;
};

/// 3x3 channel reduction -> ReLU -> two 1x1 heads (error, detail).
template <typename T>
class ErrorDetailHeads {
 public:
  struct Cache {
    Tensor<T> x, r;
  };
  ErrorDetailHeads() = default;
  ErrorDetailHeads(const std::string& name, int in_channels, int reduced_channels);

  std::pair<Tensor<T>, Tensor<T>> forward(const Tensor<T>& x, Cache* cache = nullptr) const;
  Tensor<T> backward(const Cache& cache, const Tensor<T>& d_error, const Tensor<T>& d_detail);
  void init(std::mt19937_64& rng);
  void collect(nn::ParamList<T>& out);

  nn::Conv2d<T> reduce, error_head, detail_head;
};

template <typename T>
class GlobalDiff {
 public:
  struct ExtractCache {
    std::vector<typename ResBasicBlock<T>::Cache> blocks;
  };

  GlobalDiff() = default;
  explicit GlobalDiff(const ModelDims& dims);

  UpscaledEmbedding<T> upscale_embeddings(const Tensor<T>& emb,
                                          typename Upscaler<T>::Cache* cache = nullptr) const {
    return upscaler.forward(emb, cache);
  }
  /// F(i) = Block_i(F(i-1) + emb_up) for i = 1..N.
  FusedFeature<T> global_extract(const FusedFeature<T>& f0, const UpscaledEmbedding<T>& emb_up,
                                 ExtractCache* cache = nullptr) const;
  RefinerHeadsOutput<T> predict_heads(const FusedFeature<T>& fn,
                                      typename ErrorDetailHeads<T>::Cache* cache = nullptr) const;

  /// Returns (dF0, d emb_up).
  std::pair<Tensor<T>, Tensor<T>> global_extract_backward(const ExtractCache& cache,
                                                          const Tensor<T>& d_fn);

  int n_blocks() const { return static_cast<int>(blocks.size()); }
  void init(std::mt19937_64& rng);
  void collect(nn::ParamList<T>& out);

  Upscaler<T> upscaler;
  std::vector<ResBasicBlock<T>> blocks;
  ErrorDetailHeads<T> heads;
};

}  // namespace samref
