#include "samref/prompt_codec.hpp"

#include <string>

namespace samref {

Tensor<float> encode_clicks_to_disks(std::span<const Click> clicks, int radius, int out_size,
                                     int image_size) {
  require(radius >= 1, ErrorCode::InvalidArgument, "disk radius must be >= 1");
  Tensor<float> disks(2, out_size, out_size);
  const int r2 = radius * radius;
  for (const Click& c : clicks) {
    if (c.x < 0 || c.y < 0 || c.x >= image_size || c.y >= image_size)
      fail(ErrorCode::InvalidArgument, "click (" + std::to_string(c.x) + "," +
                                           std::to_string(c.y) + ") outside the " +
                                           std::to_string(image_size) + "px image");
    const MapPoint p = to_map(c, image_size, out_size);
    const int ch = c.polarity == Polarity::Positive ? 0 : 1;
    for (int dy = -radius; dy <= radius; ++dy) {
      const int r = p.row + dy;
      if (r < 0 || r >= out_size) continue;
      for (int dx = -radius; dx <= radius; ++dx) {
        const int col = p.col + dx;
        if (col < 0 || col >= out_size || dx * dx + dy * dy > r2) continue;
        disks(ch, r, col) = 1.0f;
      }
    }
  }
  return disks;
}

template <typename T>
DensePromptMap<T> assemble_dense_map(const Tensor<T>& pos, const Tensor<T>& neg,
                                     const Tensor<T>& coarse_logits) {
  require_shape(pos.channels() == 1 && neg.channels() == 1 && coarse_logits.channels() == 1,
                "dense map inputs must be single-channel");
  require_shape(pos.same_shape(neg) && pos.same_shape(coarse_logits),
                "dense map inputs " + pos.shape_string() + ", " + neg.shape_string() + ", " +
                    coarse_logits.shape_string());
  return {nn::concat_channels<T>({&pos, &neg, &coarse_logits})};
}

template <typename T>
FusionStem<T>::FusionStem(const ModelDims& d)
    : img_conv1("fusion.img_conv1", 3, d.feat_channels / 2, 3, 2, 1),
      img_conv2("fusion.img_conv2", d.feat_channels / 2, d.feat_channels, 3, 2, 1),
      img_proj("fusion.img_proj", d.feat_channels, d.feat_channels, 1, 1, 0),
      prompt_conv("fusion.prompt_conv", 3, d.feat_channels, 3, 1, 1),
      prompt_proj("fusion.prompt_proj", d.feat_channels, d.feat_channels, 1, 1, 0) {}

template <typename T>
Tensor<T> FusionStem<T>::image_stem(const Tensor<T>& image, ImageCache* cache) const {
  require(image.all_finite(), ErrorCode::InvalidArgument, "image contains non-finite values");
  Tensor<T> a1 = nn::relu(img_conv1.forward(image));
  Tensor<T> a2 = nn::relu(img_conv2.forward(a1));
  Tensor<T> out = img_proj.forward(a2);
  if (cache) {
    cache->a1 = std::move(a1);
    cache->a2 = std::move(a2);
  }
  return out;
}

template <typename T>
Tensor<T> FusionStem<T>::prompt_stem(const DensePromptMap<T>& dense, Tensor<T>* hidden) const {
  require(dense.channels.channels() == 3, ErrorCode::InvalidArgument,
          "dense map must have 3 channels");
  require(dense.channels.all_finite(), ErrorCode::InvalidArgument,
          "dense map contains non-finite values");
  Tensor<T> h = prompt_conv.forward(dense.channels);
  Tensor<T> out = prompt_proj.forward(h);
  if (hidden) *hidden = std::move(h);
  return out;
}

template <typename T>
FusedFeature<T> FusionStem<T>::fuse_prepared(const Tensor<T>& image_features,
                                             const DensePromptMap<T>& dense) const {
  Tensor<T> out = prompt_stem(dense);
  require_shape(out.same_shape(image_features),
                "image stem " + image_features.shape_string() + " vs prompt stem " +
                    out.shape_string());
  out += image_features;
  return {std::move(out), 0};
}

template <typename T>
FusedFeature<T> FusionStem<T>::fuse(const Tensor<T>& image, const DensePromptMap<T>& dense) const {
  require_shape(image.height() == 4 * dense.channels.height(),
                "image must be 4x the dense map resolution");
  return fuse_prepared(image_stem(image), dense);
}

template <typename T>
void FusionStem<T>::image_stem_backward(const Tensor<T>& image, const ImageCache& cache,
                                        const Tensor<T>& dy) {
  Tensor<T> d2 = nn::relu_backward(cache.a2, img_proj.backward(cache.a2, dy));
  Tensor<T> d1 = nn::relu_backward(cache.a1, img_conv2.backward(cache.a1, d2));
  img_conv1.backward(image, d1, false);
}

template <typename T>
Tensor<T> FusionStem<T>::prompt_stem_backward(const DensePromptMap<T>& dense,
                                              const Tensor<T>& hidden, const Tensor<T>& dy) {
  Tensor<T> dh = prompt_proj.backward(hidden, dy);
  return prompt_conv.backward(dense.channels, dh);
}

template <typename T>
void FusionStem<T>::init(std::mt19937_64& rng) {
  img_conv1.init_he(rng);
  img_conv2.init_he(rng);
  img_proj.init_he(rng, 0.5);
  prompt_conv.init_he(rng);
  prompt_proj.init_he(rng, 0.5);
}

template <typename T>
void FusionStem<T>::collect(nn::ParamList<T>& out) {
  img_conv1.collect(out);
  img_conv2.collect(out);
  img_proj.collect(out);
  prompt_conv.collect(out);
  prompt_proj.collect(out);
}

template struct DensePromptMap<float>;
template struct DensePromptMap<double>;
template DensePromptMap<float> assemble_dense_map(const Tensor<float>&, const Tensor<float>&,
                                                  const Tensor<float>&);
template DensePromptMap<double> assemble_dense_map(const Tensor<double>&, const Tensor<double>&,
                                                   const Tensor<double>&);
template class FusionStem<float>;
template class FusionStem<double>;

}  // namespace samref
