#include "samref/image_io.hpp"

#include <png.h>

#include <cmath>
#include <cstring>

#include "samref/util.hpp"

namespace samref {

namespace {

struct PngImage {
  png_image img;
  PngImage() {
    std::memset(&img, 0, sizeof img);
    img.version = PNG_IMAGE_VERSION;
  }
  ~PngImage() { png_image_free(&img); }
};

}  // namespace

Image8 decode_png(std::span<const std::uint8_t> bytes, int channels) {
  require(channels == 1 || channels == 3, ErrorCode::InvalidArgument, "channels must be 1 or 3");
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0)
    fail(ErrorCode::Format, "not a PNG image");
  PngImage p;
  if (!png_image_begin_read_from_memory(&p.img, bytes.data(), bytes.size()))
    fail(ErrorCode::Format, std::string("PNG header: ") + p.img.message);
  if (std::int64_t(p.img.width) * p.img.height > kMaxImagePixels)
    fail(ErrorCode::TooLarge, "image has " + std::to_string(p.img.width) + "x" +
                                  std::to_string(p.img.height) + " pixels, limit is " +
                                  std::to_string(kMaxImagePixels));
  p.img.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  Image8 out(int(p.img.width), int(p.img.height), channels);
  if (!png_image_finish_read(&p.img, nullptr, out.pixels.data(), 0, nullptr))
    fail(ErrorCode::Format, std::string("PNG decode: ") + p.img.message);
  return out;
}

std::vector<std::uint8_t> encode_png(const Image8& image) {
  require(image.channels == 1 || image.channels == 3, ErrorCode::InvalidArgument,
          "PNG encode expects 1 or 3 channels");
  PngImage p;
  p.img.width = static_cast<png_uint_32>(image.width);
  p.img.height = static_cast<png_uint_32>(image.height);
  p.img.format = image.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&p.img, nullptr, &size, 0, image.pixels.data(), 0, nullptr))
    fail(ErrorCode::Internal, std::string("PNG encode: ") + p.img.message);
  std::vector<std::uint8_t> buf(size);
  if (!png_image_write_to_memory(&p.img, buf.data(), &size, 0, image.pixels.data(), 0, nullptr))
    fail(ErrorCode::Internal, std::string("PNG encode: ") + p.img.message);
  buf.resize(size);
  return buf;
}

Image8 read_png(const std::filesystem::path& path, int channels) {
  try {
    return decode_png(read_file(path), channels);
  } catch (const Error& e) {
    fail(e.code(), path.string() + ": " + e.what());
  }
}

void write_png(const std::filesystem::path& path, const Image8& image) {
  write_file_atomic(path, encode_png(image));
}

Image8 resize_image(const Image8& in, int width, int height) {
  if (in.width == width && in.height == height) return in;
  Image8 out(width, height, in.channels);
  const double sy = double(in.height) / height, sx = double(in.width) / width;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, double(in.height - 1));
    const int y0 = int(fy), y1 = std::min(y0 + 1, in.height - 1);
    const double ay = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, double(in.width - 1));
      const int x0 = int(fx), x1 = std::min(x0 + 1, in.width - 1);
      const double ax = fx - x0;
      for (int c = 0; c < in.channels; ++c) {
        const double top = in.at(y0, x0, c) * (1 - ax) + in.at(y0, x1, c) * ax;
        const double bot = in.at(y1, x0, c) * (1 - ax) + in.at(y1, x1, c) * ax;
        out.at(y, x, c) = static_cast<std::uint8_t>(std::lround(top * (1 - ay) + bot * ay));
      }
    }
  }
  return out;
}

ImagePlane make_image_plane(const Image8& rgb, int image_size) {
  require(rgb.channels == 3, ErrorCode::InvalidArgument, "image plane needs an RGB image");
  const Image8 r = resize_image(rgb, image_size, image_size);
  ImagePlane plane;
  plane.original_width = rgb.width;
  plane.original_height = rgb.height;
  plane.key = sha256_hex(r.pixels);
  plane.pixels = Tensor<float>(3, image_size, image_size);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < image_size; ++y)
      for (int x = 0; x < image_size; ++x)
        plane.pixels(c, y, x) = (r.at(y, x, c) / 255.0f - 0.5f) / 0.25f;
  return plane;
}

BinaryMask mask_from_gray(const Image8& gray) {
  require(gray.channels == 1, ErrorCode::InvalidArgument, "mask image must be gray");
  BinaryMask m(gray.height, gray.width);
  for (std::size_t i = 0; i < m.bits.size(); ++i) m.bits[i] = gray.pixels[i] >= 128 ? 1 : 0;
  return m;
}

Image8 mask_to_gray(const BinaryMask& mask) {
  Image8 g(mask.width, mask.height, 1);
  for (std::size_t i = 0; i < mask.bits.size(); ++i) g.pixels[i] = mask.bits[i] ? 255 : 0;
  return g;
}

BinaryMask downsample_mask(const BinaryMask& mask, int size) {
  require(mask.height == mask.width && mask.height % size == 0, ErrorCode::InvalidArgument,
          "mask downsampling needs a square mask divisible by the target size");
  const int f = mask.height / size;
  BinaryMask out(size, size);
  for (int r = 0; r < size; ++r)
    for (int c = 0; c < size; ++c) {
      int n = 0;
      for (int a = 0; a < f; ++a)
        for (int b = 0; b < f; ++b) n += mask.at(r * f + a, c * f + b);
      out.bits[r * size + c] = 2 * n >= f * f ? 1 : 0;
    }
  return out;
}

BinaryMask upsample_mask(const BinaryMask& mask, int size) {
  require(mask.height == mask.width && size % mask.height == 0, ErrorCode::InvalidArgument,
          "mask upsampling needs an integer factor");
  const int f = size / mask.height;
  BinaryMask out(size, size);
  for (int r = 0; r < size; ++r)
    for (int c = 0; c < size; ++c) out.bits[r * size + c] = mask.at(r / f, c / f);
  return out;
}

}  // namespace samref
