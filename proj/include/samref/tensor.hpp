#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <new>
#include <span>
#include <string>
#include <vector>

#include "samref/error.hpp"

namespace samref {

/// 64-byte aligned storage. Vectorised kernels peel differently depending on
/// the start address, so unaligned buffers would make float results vary
/// from run to run with the heap layout.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) noexcept {
    return true;
  }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

/// Dense channel-major (C x H x W) raster. All activations in the library use
/// this layout; batches are processed sample by sample.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(int channels, int height, int width, T fill = T(0))
      : c_(channels), h_(height), w_(width),
        data_(static_cast<std::size_t>(channels) * height * width, fill) {
    require(channels >= 0 && height >= 0 && width >= 0, ErrorCode::InvalidArgument,
            "tensor dimensions must be non-negative");
  }

  int channels() const noexcept { return c_; }
  int height() const noexcept { return h_; }
  int width() const noexcept { return w_; }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t plane() const noexcept { return static_cast<std::size_t>(h_) * w_; }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::span<T> channel(int c) noexcept { return {data_.data() + c * plane(), plane()}; }
  std::span<const T> channel(int c) const noexcept {
    return {data_.data() + c * plane(), plane()};
  }

  T& operator()(int c, int y, int x) noexcept {
    return data_[(static_cast<std::size_t>(c) * h_ + y) * w_ + x];
  }
  const T& operator()(int c, int y, int x) const noexcept {
    return data_[(static_cast<std::size_t>(c) * h_ + y) * w_ + x];
  }
  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  bool same_shape(const Tensor& o) const noexcept {
    return c_ == o.c_ && h_ == o.h_ && w_ == o.w_;
  }
  std::string shape_string() const {
    return std::to_string(c_) + "x" + std::to_string(h_) + "x" + std::to_string(w_);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& o) {
    require(same_shape(o), ErrorCode::InvalidArgument,
            "tensor add shape mismatch: " + shape_string() + " vs " + o.shape_string());
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(c_, h_, w_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.same_shape(b) && a.data_ == b.data_;
  }

 private:
  int c_ = 0, h_ = 0, w_ = 0;
  AlignedVector<T> data_;
};

inline void require_shape(bool ok, const std::string& what) {
  require(ok, ErrorCode::InvalidArgument, "shape mismatch: " + what);
}

/// Binary raster (0/1 bytes), row-major H x W.
struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<unsigned char> bits;

  BinaryMask() = default;
  BinaryMask(int h, int w, unsigned char fill = 0)
      : height(h), width(w), bits(static_cast<std::size_t>(h) * w, fill) {}

  unsigned char& at(int r, int c) { return bits[static_cast<std::size_t>(r) * width + c]; }
  unsigned char at(int r, int c) const { return bits[static_cast<std::size_t>(r) * width + c]; }
  std::size_t count() const {
    std::size_t n = 0;
    for (auto b : bits) n += b ? 1 : 0;
    return n;
  }
  bool same_shape(const BinaryMask& o) const { return height == o.height && width == o.width; }
  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;
};

/// Probability 0.5 threshold on logits (sigmoid(z) > 0.5 iff z > 0).
template <typename T>
BinaryMask binarize_logits(const Tensor<T>& logits) {
  BinaryMask m(logits.height(), logits.width());
  for (std::size_t i = 0; i < m.bits.size(); ++i) m.bits[i] = logits[i] > T(0) ? 1 : 0;
  return m;
}

template <typename T>
Tensor<T> mask_to_tensor(const BinaryMask& m) {
  Tensor<T> t(1, m.height, m.width);
  for (std::size_t i = 0; i < m.bits.size(); ++i) t[i] = m.bits[i] ? T(1) : T(0);
  return t;
}

}  // namespace samref
