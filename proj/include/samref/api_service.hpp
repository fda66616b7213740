#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "samref/pipeline.hpp"

namespace samref {

/// Row-major run lengths of a binary mask, starting with a (possibly
/// empty) run of zeros and alternating.
struct MaskRle {
  int height = 0, width = 0;
  std::vector<std::uint32_t> counts;

  friend bool operator==(const MaskRle&, const MaskRle&) = default;
};

MaskRle rle_encode(const BinaryMask& mask);
/// Rejects counts that do not cover exactly height * width pixels.
BinaryMask rle_decode(const MaskRle& rle);
nlohmann::json rle_to_json(const MaskRle& rle);
MaskRle rle_from_json(const nlohmann::json& j);

/// Map-resolution logits bilinearly resized to the working image and
/// thresholded at 0.
BinaryMask working_mask(const Tensor<float>& logits, int image_size);

struct ServiceOptions {
  std::chrono::milliseconds idle_timeout{std::chrono::minutes(30)};
  std::filesystem::path log_dir;  // session logs; empty disables logging
  std::string checkpoint_hash;
  std::string version;
};

/// Live interactive sessions over one immutable pipeline.
///
/// Requests for one session are serialised by that session's mutex;
/// different sessions proceed concurrently. Undo restores the interaction
/// state captured before the undone click, so it is exact. Every session
/// keeps an event log (creation, clicks with the resulting mask digest,
/// undos) that is written to `log_dir` when the session expires or when
/// the manager flushes or shuts down.
///
/// Coordinates and masks are in the working image (the upload resized to
/// S x S, S = 4 x map size).
class SessionManager {
 public:
  SessionManager(std::shared_ptr<const Pipeline> pipeline, ServiceOptions options);
  ~SessionManager();

  /// PNG bytes in; returns the new session id.
  std::string create(const std::vector<std::uint8_t>& image_bytes);
  /// {mask_rle, error_heatmap_png_b64, selector, timings_ms, click_index}.
  nlohmann::json click(const std::string& id, int x, int y, Polarity polarity);
  /// Pops the last click; returns the restored state.
  nlohmann::json undo(const std::string& id);
  nlohmann::json state(const std::string& id);
  nlohmann::json health() const;

  /// Drops sessions idle for longer than the timeout, logging them.
  int expire_idle();
  /// Writes the logs of all open sessions.
  void flush_logs();
  std::size_t session_count() const;
  /// The event log of a session (as written to disk).
  std::vector<nlohmann::json> session_log(const std::string& id);

  const Pipeline& pipeline() const { return *pipeline_; }

 private:
  struct Live;
  std::shared_ptr<Live> find(const std::string& id);
  nlohmann::json snapshot(const Live& s) const;
  void write_log(const Live& s) const;

  std::shared_ptr<const Pipeline> pipeline_;
  ServiceOptions options_;
  mutable std::shared_mutex map_mutex_;
  std::map<std::string, std::shared_ptr<Live>> sessions_;
  std::uint64_t next_serial_ = 0;
};

/// HTTP front end: POST /v1/sessions, POST /v1/sessions/{id}/clicks,
/// POST /v1/sessions/{id}/undo, GET /v1/sessions/{id}, GET /v1/health.
/// Error bodies are {code, message}.
class ApiServer {
 public:
  explicit ApiServer(std::shared_ptr<SessionManager> sessions);
  ~ApiServer();

  /// Binds the port (0 picks a free one) and serves on a background thread.
  /// A port in use is an Io error.
  int start(const std::string& host, int port);
  /// Stops accepting, waits for in-flight requests and flushes session logs.
  void stop();
  int port() const { return port_; }

  static constexpr std::size_t kMaxBodyBytes = 64u << 20;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::shared_ptr<SessionManager> sessions_;
  int port_ = 0;
};

}  // namespace samref
