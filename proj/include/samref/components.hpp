#pragma once

#include <vector>

#include "samref/tensor.hpp"

namespace samref {

struct Component {
  int label = 0;      // 1-based
  int size = 0;
  int row0 = 0, col0 = 0, row1 = 0, col1 = 0;  // tight box, exclusive end
};

struct Labeling {
  int height = 0, width = 0;
  std::vector<int> labels;  // 0 = background
  std::vector<Component> components;  // components[i].label == i + 1
};

/// 4-connected labelling in raster-scan discovery order.
Labeling label_components(const BinaryMask& mask);

/// Largest component; ties broken by smallest (row0, col0) of its box.
/// Returns nullptr when there are none.
const Component* largest_component(const Labeling& labeling);

/// Squared Euclidean distance from every pixel to the nearest pixel where
/// `mask` is 0. The raster border counts as outside, i.e. a one-pixel
/// zero frame surrounds the mask.
std::vector<double> squared_distance_to_outside(const BinaryMask& mask);

}  // namespace samref
