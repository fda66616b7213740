#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "samref/tensor.hpp"

namespace samref {

enum class Polarity : std::uint8_t { Positive = 0, Negative = 1 };

inline const char* polarity_name(Polarity p) {
  return p == Polarity::Positive ? "positive" : "negative";
}

/// A user click in working-resolution image coordinates.
struct Click {
  int x = 0;  // column
  int y = 0;  // row
  Polarity polarity = Polarity::Positive;
  int index = 1;  // 1-based interaction ordinal

  friend bool operator==(const Click&, const Click&) = default;
};

/// Tensor geometry of the whole model. Every other resolution derives from
/// map_size: the image plane is 4x larger, the embedding grid 4x smaller.
struct ModelDims {
  int map_size = 256;
  int emb_channels = 256;
  int feat_channels = 64;
  int enc_width = 16;
  int token_dim = 64;
  int crop_size = 128;
  int disk_radius = 5;
  int n_blocks = 3;
  double expand_ratio = 1.4;

  int image_size() const { return 4 * map_size; }
  int emb_size() const { return map_size / 4; }
  void validate() const;

  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

/// Channels per group used by every GroupNorm in the model.
inline int norm_groups(int channels) {
  int g = channels >= 8 ? channels / 8 : 1;
  while (channels % g != 0) --g;
  return g;
}

/// Normalised 3-channel working-resolution image plus its provenance.
struct ImagePlane {
  Tensor<float> pixels;        // 3 x S x S, (v / 255 - 0.5) / 0.25
  int original_width = 0;
  int original_height = 0;
  std::string key;             // SHA-256 hex of the working-resolution RGB8 bytes
};

using MaskLogits = Tensor<float>;

/// Map-space pixel position of a click: image coords scaled by map/image with
/// round-to-nearest, clamped into the map.
struct MapPoint {
  int row = 0;
  int col = 0;
  friend bool operator==(const MapPoint&, const MapPoint&) = default;
};

MapPoint to_map(const Click& click, int image_size, int map_size);
/// Image-space click whose map position is exactly (row, col).
Click from_map(int row, int col, Polarity polarity, int index, int image_size, int map_size);

}  // namespace samref
