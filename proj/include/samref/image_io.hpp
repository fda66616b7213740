#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "samref/types.hpp"

namespace samref {

/// 8-bit interleaved raster (1 = gray, 3 = RGB).
struct Image8 {
  int width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> pixels;

  Image8() = default;
  Image8(int w, int h, int c) : width(w), height(h), channels(c), pixels(std::size_t(w) * h * c) {}
  std::uint8_t& at(int y, int x, int c) { return pixels[(std::size_t(y) * width + x) * channels + c]; }
  std::uint8_t at(int y, int x, int c) const {
    return pixels[(std::size_t(y) * width + x) * channels + c];
  }
  friend bool operator==(const Image8&, const Image8&) = default;
};

inline constexpr std::int64_t kMaxImagePixels = 16'000'000;

/// Decodes a PNG to `channels` (1 or 3) channels. Undecodable data throws
/// Format; images above kMaxImagePixels throw TooLarge before decoding.
Image8 decode_png(std::span<const std::uint8_t> bytes, int channels);
std::vector<std::uint8_t> encode_png(const Image8& image);

Image8 read_png(const std::filesystem::path& path, int channels);
void write_png(const std::filesystem::path& path, const Image8& image);

/// Half-pixel bilinear resampling, rounded to nearest.
Image8 resize_image(const Image8& image, int width, int height);

/// Resamples to image_size x image_size and normalises to (v/255 - 0.5)/0.25.
/// The key is the SHA-256 of the resampled RGB bytes.
ImagePlane make_image_plane(const Image8& rgb, int image_size);

/// Foreground where the gray value is >= 128.
BinaryMask mask_from_gray(const Image8& gray);
Image8 mask_to_gray(const BinaryMask& mask);
/// Box-average downsampling by an integer factor, foreground where the
/// covered fraction is >= 0.5.
BinaryMask downsample_mask(const BinaryMask& mask, int size);
/// Nearest-neighbour upsampling by an integer factor.
BinaryMask upsample_mask(const BinaryMask& mask, int size);

}  // namespace samref
