#include "samref/api_service.hpp"

#include <httplib.h>

#include <random>
#include <sstream>

#include "samref/image_io.hpp"
#include "samref/nn.hpp"
#include "samref/util.hpp"

namespace samref {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

std::string mask_digest(const BinaryMask& m) {
  return sha256_hex(std::span<const std::uint8_t>(m.bits.data(), m.bits.size()));
}

std::string heatmap_png_b64(const Tensor<float>& error_logits, int map_size) {
  Image8 img(map_size, map_size, 1);
  if (!error_logits.empty())
    for (std::size_t i = 0; i < img.pixels.size(); ++i)
      img.pixels[i] = static_cast<std::uint8_t>(std::lround(255.0 * nn::sigmoid(double(error_logits[i]))));
  return base64_encode(encode_png(img));
}

nlohmann::json click_json(const Click& c) {
  return {{"x", c.x}, {"y", c.y}, {"polarity", polarity_name(c.polarity)}, {"index", c.index}};
}

}  // namespace

MaskRle rle_encode(const BinaryMask& mask) {
  MaskRle r{mask.height, mask.width, {}};
  std::uint8_t current = 0;
  std::uint32_t run = 0;
  for (std::uint8_t b : mask.bits) {
    const std::uint8_t v = b ? 1 : 0;
    if (v != current) {
      r.counts.push_back(run);
      run = 0;
      current = v;
    }
    ++run;
  }
  r.counts.push_back(run);
  return r;
}

BinaryMask rle_decode(const MaskRle& r) {
  require(r.height >= 0 && r.width >= 0, ErrorCode::InvalidArgument, "negative RLE dimensions");
  BinaryMask m(r.height, r.width);
  std::size_t at = 0;
  std::uint8_t v = 0;
  for (std::uint32_t n : r.counts) {
    require(at + n <= m.bits.size(), ErrorCode::Format, "RLE runs exceed the mask size");
    std::fill_n(m.bits.begin() + static_cast<std::ptrdiff_t>(at), n, v);
    at += n;
    v ^= 1;
  }
  require(at == m.bits.size(), ErrorCode::Format, "RLE runs do not cover the mask");
  return m;
}

nlohmann::json rle_to_json(const MaskRle& r) {
  return {{"height", r.height}, {"width", r.width}, {"counts", r.counts}};
}

MaskRle rle_from_json(const nlohmann::json& j) {
  MaskRle r;
  r.height = j.at("height");
  r.width = j.at("width");
  r.counts = j.at("counts").get<std::vector<std::uint32_t>>();
  return r;
}

BinaryMask working_mask(const Tensor<float>& logits, int image_size) {
  return binarize_logits(nn::resize_bilinear(logits, image_size, image_size));
}

struct SessionManager::Live {
  std::string id;
  std::mutex mu;
  std::unique_ptr<PipelineSession> session;
  std::vector<InteractionState<float>> history;  // state before each live click
  Clock::time_point last_active;
  std::vector<nlohmann::json> log;
  bool closed = false;
};

SessionManager::SessionManager(std::shared_ptr<const Pipeline> pipeline, ServiceOptions options)
    : pipeline_(std::move(pipeline)), options_(std::move(options)) {}

SessionManager::~SessionManager() {
  try {
    flush_logs();
  } catch (const std::exception& e) {
    log_warning(std::string("session logs not flushed: ") + e.what());
  }
}

std::string SessionManager::create(const std::vector<std::uint8_t>& bytes) {
  const Image8 img = decode_png(bytes, 3);
  auto live = std::make_shared<Live>();
  live->session = pipeline_->open(make_image_plane(img, pipeline_->dims().image_size()));
  live->last_active = Clock::now();
  std::unique_lock lock(map_mutex_);
  static thread_local std::mt19937_64 rng{std::random_device{}()};
  std::ostringstream id;
  id << std::hex << (rng() ^ (++next_serial_ << 48));
  live->id = id.str();
  live->log.push_back({{"event", "create"},
                       {"image_sha256", live->session->image.key},
                       {"original_width", img.width},
                       {"original_height", img.height}});
  sessions_[live->id] = live;
  return live->id;
}

std::shared_ptr<SessionManager::Live> SessionManager::find(const std::string& id) {
  std::shared_ptr<Live> s;
  {
    std::shared_lock lock(map_mutex_);
    auto it = sessions_.find(id);
    if (it != sessions_.end()) s = it->second;
  }
  require(s != nullptr, ErrorCode::NotFound, "unknown session '" + id + "'");
  return s;
}

nlohmann::json SessionManager::snapshot(const Live& s) const {
  const auto& st = s.session->state;
  const int S = pipeline_->dims().image_size();
  nlohmann::json j;
  j["id"] = s.id;
  j["image"] = {{"width", S},
                {"height", S},
                {"original_width", s.session->image.original_width},
                {"original_height", s.session->image.original_height}};
  j["clicks"] = nlohmann::json::array();
  for (const auto& c : st.clicks) j["clicks"].push_back(click_json(c));
  j["num_clicks"] = st.clicks.size();
  j["selector"] = {{"prev_error_area", st.selector.prev_error_area
                                           ? nlohmann::json(*st.selector.prev_error_area)
                                           : nlohmann::json(nullptr)},
                   {"curr_error_area", st.selector.curr_error_area}};
  j["mask_rle"] = st.prev_logits ? rle_to_json(rle_encode(working_mask(*st.prev_logits, S)))
                                 : nlohmann::json(nullptr);
  return j;
}

nlohmann::json SessionManager::click(const std::string& id, int x, int y, Polarity polarity) {
  auto s = find(id);
  std::lock_guard lock(s->mu);
  require(!s->closed, ErrorCode::NotFound, "unknown session '" + id + "'");
  const auto t0 = Clock::now();
  InteractionState<float> before = s->session->state;
  Click c;
  c.x = x;
  c.y = y;
  c.polarity = polarity;
  const ClickOutcome out = pipeline_->click(*s->session, c, StepOptions{});
  s->history.push_back(std::move(before));
  const auto t1 = Clock::now();
  const int S = pipeline_->dims().image_size();
  const BinaryMask mask = working_mask(out.step.final_logits, S);
  nlohmann::json r;
  r["mask_rle"] = rle_to_json(rle_encode(mask));
  r["error_heatmap_png_b64"] = heatmap_png_b64(out.step.error_g, pipeline_->dims().map_size);
  r["selector"] = decision_name(out.step.decision);
  r["click_index"] = s->session->state.clicks.size();
  const double post = ms_since(t1);
  const double total = ms_since(t0);
  r["timings_ms"] = {{"decode", out.decode_ms},
                     {"globaldiff", out.globaldiff_ms},
                     {"patchdiff", out.patchdiff_ms},
                     {"postprocess", post},
                     {"total", total}};
  s->log.push_back({{"event", "click"},
                    {"x", x},
                    {"y", y},
                    {"polarity", polarity_name(polarity)},
                    {"selector", decision_name(out.step.decision)},
                    {"mask_sha256", mask_digest(mask)}});
  s->last_active = Clock::now();
  return r;
}

nlohmann::json SessionManager::undo(const std::string& id) {
  auto s = find(id);
  std::lock_guard lock(s->mu);
  require(!s->closed, ErrorCode::NotFound, "unknown session '" + id + "'");
  require(!s->history.empty(), ErrorCode::Conflict, "nothing to undo");
  s->session->state = std::move(s->history.back());
  s->history.pop_back();
  s->log.push_back({{"event", "undo"}});
  s->last_active = Clock::now();
  return snapshot(*s);
}

nlohmann::json SessionManager::state(const std::string& id) {
  auto s = find(id);
  std::lock_guard lock(s->mu);
  require(!s->closed, ErrorCode::NotFound, "unknown session '" + id + "'");
  s->last_active = Clock::now();
  return snapshot(*s);
}

nlohmann::json SessionManager::health() const {
  const ModelDims& d = pipeline_->dims();
  return {{"status", "ok"},
          {"version", options_.version},
          {"checkpoint_sha256", options_.checkpoint_hash},
          {"backbone", pipeline_->backbone().id()},
          {"working_size", d.image_size()},
          {"map_size", d.map_size},
          {"sessions", session_count()},
          {"embedding_cache_hits", pipeline_->cache_hits()}};
}

int SessionManager::expire_idle() {
  std::vector<std::shared_ptr<Live>> expired;
  {
    std::unique_lock lock(map_mutex_);
    const auto now = Clock::now();
    for (auto it = sessions_.begin(); it != sessions_.end();) {
      std::unique_lock slock(it->second->mu, std::try_to_lock);
      if (slock.owns_lock() && now - it->second->last_active > options_.idle_timeout) {
        it->second->closed = true;
        expired.push_back(it->second);
        it = sessions_.erase(it);
      } else {
        ++it;
      }
    }
  }
  for (const auto& s : expired) {
    std::lock_guard lock(s->mu);
    s->log.push_back({{"event", "expired"}});
    write_log(*s);
  }
  return static_cast<int>(expired.size());
}

void SessionManager::write_log(const Live& s) const {
  if (options_.log_dir.empty()) return;
  std::string text;
  for (const auto& e : s.log) text += e.dump() + '\n';
  std::filesystem::create_directories(options_.log_dir);
  write_file_atomic(options_.log_dir / (s.id + ".jsonl"), text);
}

void SessionManager::flush_logs() {
  std::vector<std::shared_ptr<Live>> all;
  {
    std::shared_lock lock(map_mutex_);
    for (const auto& [id, s] : sessions_) all.push_back(s);
  }
  for (const auto& s : all) {
    std::lock_guard lock(s->mu);
    write_log(*s);
  }
}

std::size_t SessionManager::session_count() const {
  std::shared_lock lock(map_mutex_);
  return sessions_.size();
}

std::vector<nlohmann::json> SessionManager::session_log(const std::string& id) {
  auto s = find(id);
  std::lock_guard lock(s->mu);
  return s->log;
}

// HTTP ---------------------------------------------------------------------

struct ApiServer::Impl {
  httplib::Server server;
  std::thread thread;
  std::thread reaper;
  std::mutex reaper_mu;
  std::condition_variable reaper_cv;
  bool stopping = false;
};

namespace {

int http_status(ErrorCode c) {
  switch (c) {
    case ErrorCode::InvalidArgument:
    case ErrorCode::Format:
    case ErrorCode::Config: return 400;
    case ErrorCode::NotFound: return 404;
    case ErrorCode::State:
    case ErrorCode::Conflict: return 409;
    case ErrorCode::TooLarge: return 413;
    default: return 500;
  }
}

void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& code,
                const std::string& message) {
  send_json(res, status, {{"code", code}, {"message", message}});
}

template <typename F>
httplib::Server::Handler guarded(F f) {
  return [f](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const Error& e) {
      send_error(res, http_status(e.code()), error_code_name(e.code()), e.what());
    } catch (const nlohmann::json::exception& e) {
      send_error(res, 400, "invalid_argument", std::string("bad JSON body: ") + e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, "internal", e.what());
    }
  };
}

Polarity parse_polarity(const nlohmann::json& v) {
  if (v.is_string()) {
    if (v == "positive") return Polarity::Positive;
    if (v == "negative") return Polarity::Negative;
  }
  fail(ErrorCode::InvalidArgument, "polarity must be \"positive\" or \"negative\"");
}

}  // namespace

ApiServer::ApiServer(std::shared_ptr<SessionManager> sessions)
    : impl_(std::make_unique<Impl>()), sessions_(std::move(sessions)) {
  auto& srv = impl_->server;
  auto mgr = sessions_;
  srv.set_payload_max_length(kMaxBodyBytes);
  // The library default adds SO_REUSEPORT, which lets a second server bind
  // a port that is already serving.
  srv.set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
  });

  srv.Get("/v1/health", guarded([mgr](const httplib::Request&, httplib::Response& res) {
            send_json(res, 200, mgr->health());
          }));
  srv.Post("/v1/sessions", guarded([mgr](const httplib::Request& req, httplib::Response& res) {
             std::string data;
             if (req.is_multipart_form_data()) {
               require(req.has_file("image"), ErrorCode::InvalidArgument,
                       "multipart field 'image' is missing");
               data = req.get_file_value("image").content;
             } else {
               data = req.body;
             }
             require(!data.empty(), ErrorCode::InvalidArgument, "empty image upload");
             const std::vector<std::uint8_t> bytes(data.begin(), data.end());
             send_json(res, 201, {{"id", mgr->create(bytes)}});
           }));
  srv.Post(R"(/v1/sessions/([0-9a-f]+)/clicks)",
           guarded([mgr](const httplib::Request& req, httplib::Response& res) {
             const auto body = nlohmann::json::parse(req.body);
             require(body.is_object() && body.contains("x") && body.contains("y") &&
                         body.at("x").is_number_integer() && body.at("y").is_number_integer(),
                     ErrorCode::InvalidArgument, "click body needs integer x and y");
             const Polarity pol =
                 body.contains("polarity") ? parse_polarity(body.at("polarity")) : Polarity::Positive;
             send_json(res, 200,
                       mgr->click(req.matches[1], body.at("x").get<int>(), body.at("y").get<int>(), pol));
           }));
  srv.Post(R"(/v1/sessions/([0-9a-f]+)/undo)",
           guarded([mgr](const httplib::Request& req, httplib::Response& res) {
             send_json(res, 200, mgr->undo(req.matches[1]));
           }));
  srv.Get(R"(/v1/sessions/([0-9a-f]+))",
          guarded([mgr](const httplib::Request& req, httplib::Response& res) {
            send_json(res, 200, mgr->state(req.matches[1]));
          }));
  srv.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
    if (!res.body.empty()) return;
    if (res.status == 404)
      send_error(res, 404, "not_found", "no route for " + req.method + " " + req.path);
    else if (res.status == 413)
      send_error(res, 413, "too_large", "request body exceeds the upload limit");
    else
      send_error(res, res.status, "http_error", "request failed with status " + std::to_string(res.status));
  });
}

ApiServer::~ApiServer() { stop(); }

int ApiServer::start(const std::string& host, int port) {
  auto& srv = impl_->server;
  if (port == 0) {
    port_ = srv.bind_to_any_port(host);
    require(port_ > 0, ErrorCode::Io, "cannot bind " + host);
  } else {
    require(srv.bind_to_port(host, port), ErrorCode::Io,
            "cannot bind " + host + ":" + std::to_string(port) + " (port in use?)");
    port_ = port;
  }
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->reaper = std::thread([this] {
    std::unique_lock lock(impl_->reaper_mu);
    while (!impl_->stopping) {
      impl_->reaper_cv.wait_for(lock, std::chrono::seconds(1));
      if (!impl_->stopping) sessions_->expire_idle();
    }
  });
  impl_->server.wait_until_ready();
  return port_;
}

void ApiServer::stop() {
  if (!impl_) return;
  {
    std::lock_guard lock(impl_->reaper_mu);
    if (impl_->stopping) return;
    impl_->stopping = true;
  }
  impl_->reaper_cv.notify_all();
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
  if (impl_->reaper.joinable()) impl_->reaper.join();
  sessions_->flush_logs();
}

}  // namespace samref
