#include "samref/embedding_cache.hpp"

#include <cstdlib>

#include "samref/util.hpp"

namespace samref {

namespace {

constexpr std::uint32_t kMagic = 0x4d455253;  // "SREM"

}  // namespace

EmbeddingCache::EmbeddingCache(std::filesystem::path root, std::uint32_t tag)
    : root_(std::move(root)), tag_(tag) {}

std::filesystem::path EmbeddingCache::entry_path(const std::string& key) const {
  require(key.size() >= 2, ErrorCode::InvalidArgument, "cache key too short");
  return root_ / "emb" / key.substr(0, 2) / (key + ".emb");
}

void EmbeddingCache::put(const std::string& key, const Tensor<float>& data) const {
  const auto* payload = reinterpret_cast<const std::uint8_t*>(data.data());
  const std::size_t n = data.size() * sizeof(float);
  ByteWriter w;
  w.u32(kMagic);
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(data.channels()));
  w.u32(static_cast<std::uint32_t>(data.height()));
  w.u32(static_cast<std::uint32_t>(data.width()));
  w.u32(sizeof(float));
  w.u32(crc32({payload, n}));
  w.u32(tag_);
  w.raw(payload, n);
  write_file_atomic(entry_path(key), w.bytes());
}

std::optional<Tensor<float>> EmbeddingCache::get(const std::string& key) const {
  const auto path = entry_path(key);
  std::error_code ec;
  if (!std::filesystem::exists(path, ec)) return std::nullopt;
  auto corrupt = [&](const std::string& why) -> std::optional<Tensor<float>> {
    ++corrupt_;
    log_warning("embedding cache entry " + path.string() + " ignored: " + why);
    return std::nullopt;
  };
  std::vector<std::uint8_t> bytes;
  try {
    bytes = read_file(path);
  } catch (const Error& e) {
    return corrupt(e.what());
  }
  if (bytes.size() < kHeaderBytes) return corrupt("truncated header");
  ByteReader r(bytes);
  const std::uint32_t magic = r.u32(), version = r.u32();
  const std::uint32_t c = r.u32(), h = r.u32(), w = r.u32(), elem = r.u32();
  const std::uint32_t crc = r.u32(), tag = r.u32();
  if (magic != kMagic || version != kVersion || elem != sizeof(float))
    return corrupt("bad magic, version or element width");
  if (tag != tag_) return std::nullopt;  // written by another backbone
  const std::size_t n = std::size_t(c) * h * w * sizeof(float);
  if (r.remaining() != n) return corrupt("payload size does not match the header shape");
  if (crc32({bytes.data() + kHeaderBytes, n}) != crc) return corrupt("checksum mismatch");
  Tensor<float> t(static_cast<int>(c), static_cast<int>(h), static_cast<int>(w));
  r.raw(t.data(), n);
  return t;
}

std::filesystem::path default_cache_dir() {
  const char* env = std::getenv("SAMREF_CACHE_DIR");
  return env && *env ? std::filesystem::path(env) : std::filesystem::path("cache");
}

EmbeddingMap CachedEncoder::encode(const ImagePlane& image) const {
  if (cache_) {
    if (auto t = cache_->get(image.key)) {
      ++hits_;
      return {std::move(*t), image.key};
    }
  }
  ++misses_;
  EmbeddingMap emb = backbone_.encode(image);
  if (cache_) cache_->put(image.key, emb.data);
  return emb;
}

}  // namespace samref
