#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "samref/backbone.hpp"

namespace samref {

/// On-disk embedding store, one file per image key at
/// `<root>/emb/<first 2 hex>/<key>.emb`.
///
/// Record: 32-byte little-endian header (magic "SREM", version, channels,
/// height, width, element width, payload crc32, backbone tag) followed by
/// the float32 payload. Writes go through a temp file and rename, so readers
/// never observe partial records. Entries written by a different backbone
/// (tag mismatch) are misses; unreadable or checksum-failing entries are
/// misses with a warning.
class EmbeddingCache {
 public:
  static constexpr std::size_t kHeaderBytes = 32;
  static constexpr std::uint32_t kVersion = 1;

  EmbeddingCache(std::filesystem::path root, std::uint32_t backbone_tag);

  std::optional<Tensor<float>> get(const std::string& key) const;
  void put(const std::string& key, const Tensor<float>& data) const;
  std::filesystem::path entry_path(const std::string& key) const;
  const std::filesystem::path& root() const { return root_; }
  std::uint32_t backbone_tag() const { return tag_; }

  long corrupt_entries() const { return corrupt_.load(); }

 private:
  std::filesystem::path root_;
  std::uint32_t tag_;
  mutable std::atomic<long> corrupt_{0};
};

/// `SAMREF_CACHE_DIR` if set, else `cache`.
std::filesystem::path default_cache_dir();

/// Backbone encoder in front of an optional cache, counting hits and misses.
class CachedEncoder {
 public:
  CachedEncoder(const Backbone& backbone, const EmbeddingCache* cache)
      : backbone_(backbone), cache_(cache) {}

  EmbeddingMap encode(const ImagePlane& image) const;
  long hits() const { return hits_.load(); }
  long misses() const { return misses_.load(); }

 private:
  const Backbone& backbone_;
  const EmbeddingCache* cache_;
  mutable std::atomic<long> hits_{0}, misses_{0};
};

}  // namespace samref
