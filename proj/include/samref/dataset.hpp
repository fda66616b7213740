#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "samref/image_io.hpp"
#include "samref/types.hpp"

namespace samref {

struct SyntheticOptions {
  int count = 200;
  std::uint64_t seed = 7;
  int image_size = 1024;
  int map_size = 256;
  double hole_fraction = 0.5;
  double protrusion_fraction = 0.5;
  int min_foreground = 64;  // map-resolution pixels
};

/// One rendered scene: anti-aliased layered shapes with one designated
/// target. Flags describe the target's visible (post-occlusion) mask.
struct SyntheticSample {
  std::string id;
  Image8 image;        // RGB, image_size^2
  BinaryMask gt_full;  // image resolution
  BinaryMask gt;       // map resolution
  std::string shape;   // polygon | ellipse | ring
  bool has_hole = false;
  bool has_protrusion = false;
  bool matches_request = true;  // rendered topology agrees with the sampled flags
};

/// Deterministic in (options.seed, index).
SyntheticSample generate_sample(const SyntheticOptions& options, int index);

/// Writes `<dir>/images/<id>.png`, `<dir>/masks/<id>.png`, `<dir>/meta.jsonl`
/// and `<dir>/manifest.json`. A non-empty `dir` is refused unless `force`.
void write_synthetic_dataset(const std::filesystem::path& dir, const SyntheticOptions& options,
                             bool force);

/// True iff the background has a 4-connected component that does not touch
/// the raster border.
bool mask_has_hole(const BinaryMask& mask);

struct DatasetItem {
  std::string id;
  std::filesystem::path image_path, mask_path;  // mask_path empty when missing
  bool has_hole = false, has_protrusion = false;
};

/// Generic image+mask directory reader: every `images/*.png`, paired with
/// `masks/<id>.png` when present; flags from `meta.jsonl` when present.
/// Items are sorted by id.
std::vector<DatasetItem> list_dataset(const std::filesystem::path& dir);

struct LoadedSample {
  std::string id;
  ImagePlane image;
  BinaryMask gt;  // map resolution
  bool has_hole = false, has_protrusion = false;
};

/// Loads the image at working resolution and the gt downsampled to the map.
LoadedSample load_sample(const DatasetItem& item, const ModelDims& dims);

/// SHA-256 over the sorted (relative path, file hash) list of a directory.
std::string directory_hash(const std::filesystem::path& dir);

}  // namespace samref
