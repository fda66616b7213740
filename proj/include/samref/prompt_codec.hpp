#pragma once

#include <random>
#include <span>
#include <vector>

#include "samref/nn.hpp"
#include "samref/types.hpp"

namespace samref {

/// 3 x M x M: positive disks, negative disks, raw coarse logits.
template <typename T>
struct DensePromptMap {
  Tensor<T> channels;
};

/// 64 x M x M refiner state F_fuse(stage).
template <typename T>
struct FusedFeature {
  Tensor<T> data;
  int stage = 0;
};

/// Renders clicks as binary disks on a 2 x out_size x out_size raster
/// (channel 0 positive, channel 1 negative). A pixel is set iff its
/// Euclidean distance to a same-polarity click centre is <= radius.
Tensor<float> encode_clicks_to_disks(std::span<const Click> clicks, int radius, int out_size,
                                     int image_size);

/// Stacks (pos, neg, coarse logits) without rescaling the logits.
template <typename T>
DensePromptMap<T> assemble_dense_map(const Tensor<T>& pos, const Tensor<T>& neg,
                                     const Tensor<T>& coarse_logits);

/// The two alignment stems whose sum is F_fuse(0).
///
/// Image stem: 3x3/2 conv -> ReLU -> 3x3/2 conv -> ReLU -> 1x1 projection
/// (S x S image down to the M x M map). Prompt stem: 3x3 conv -> 1x1
/// projection, kept linear so the coarse-logit channel enters additively.
template <typename T>
class FusionStem {
 public:
  struct ImageCache {
    Tensor<T> a1, a2;  // post-ReLU activations
  };

  FusionStem() = default;
  explicit FusionStem(const ModelDims& dims);

  Tensor<T> image_stem(const Tensor<T>& image, ImageCache* cache = nullptr) const;
  Tensor<T> prompt_stem(const DensePromptMap<T>& dense, Tensor<T>* hidden = nullptr) const;
  FusedFeature<T> fuse(const Tensor<T>& image, const DensePromptMap<T>& dense) const;
  /// Fuse with a precomputed image-stem output (the image stem depends on the
  /// image alone, so sessions compute it once).
  FusedFeature<T> fuse_prepared(const Tensor<T>& image_features,
                                const DensePromptMap<T>& dense) const;

  void image_stem_backward(const Tensor<T>& image, const ImageCache& cache, const Tensor<T>& dy);
  /// Returns the gradient w.r.t. the dense map.
  Tensor<T> prompt_stem_backward(const DensePromptMap<T>& dense, const Tensor<T>& hidden,
                                 const Tensor<T>& dy);

  void init(std::mt19937_64& rng);
  void collect(nn::ParamList<T>& out);

  nn::Conv2d<T> img_conv1, img_conv2, img_proj;
  nn::Conv2d<T> prompt_conv, prompt_proj;
};

}  // namespace samref
