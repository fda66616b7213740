#include "samref/types.hpp"

#include <algorithm>
#include <cmath>

#include "samref/error.hpp"

namespace samref {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "invalid_argument";
    case ErrorCode::Io: return "io";
    case ErrorCode::Format: return "format";
    case ErrorCode::NotFound: return "not_found";
    case ErrorCode::State: return "state";
    case ErrorCode::Numeric: return "numeric";
    case ErrorCode::Config: return "config";
    case ErrorCode::Conflict: return "conflict";
    case ErrorCode::TooLarge: return "too_large";
    case ErrorCode::Internal: return "internal";
  }
  return "unknown";
}

void ModelDims::validate() const {
  auto bad = [](const std::string& what) { fail(ErrorCode::Config, "model dims: " + what); };
  if (map_size < 16 || map_size % 4 != 0) bad("map_size must be a multiple of 4 and >= 16");
  if (emb_channels < 4 || emb_channels % 2 != 0) bad("emb_channels must be even and >= 4");
  if (feat_channels < 4 || feat_channels % 2 != 0) bad("feat_channels must be even and >= 4");
  if (enc_width < 2) bad("enc_width must be >= 2");
  if (token_dim < 2) bad("token_dim must be >= 2");
  if (crop_size < 4) bad("crop_size must be >= 4");
  if (disk_radius < 1) bad("disk_radius must be >= 1");
  if (n_blocks < 1) bad("n_blocks must be >= 1");
  if (!(expand_ratio >= 1.0)) bad("expand_ratio must be >= 1");
}

MapPoint to_map(const Click& click, int image_size, int map_size) {
  const double s = double(map_size) / double(image_size);
  const int col = static_cast<int>(std::lround(click.x * s));
  const int row = static_cast<int>(std::lround(click.y * s));
  return {std::clamp(row, 0, map_size - 1), std::clamp(col, 0, map_size - 1)};
}

Click from_map(int row, int col, Polarity polarity, int index, int image_size, int map_size) {
  const int f = image_size / map_size;
  return Click{col * f, row * f, polarity, index};
}

}  // namespace samref
