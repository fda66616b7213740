#include "samref/eval.hpp"

#include <chrono>
#include <iomanip>
#include <sstream>

#include <nlohmann/json.hpp>

#include "samref/components.hpp"
#include "samref/image_io.hpp"
#include "samref/util.hpp"

namespace samref {

namespace {

using Clock = std::chrono::steady_clock;

bool all_reached(double v, const std::array<double, 2>& targets) {
  for (double t : targets)
    if (v < t) return false;
  return true;
}

}  // namespace

double iou(const BinaryMask& a, const BinaryMask& b) {
  require(a.same_shape(b), ErrorCode::InvalidArgument, "iou of masks with different shapes");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.bits.size(); ++i) {
    inter += a.bits[i] && b.bits[i];
    uni += a.bits[i] || b.bits[i];
  }
  return uni == 0 ? 1.0 : double(inter) / double(uni);
}

Click next_eval_click(const BinaryMask& pred, const BinaryMask& gt, int index, int image_size) {
  require(pred.same_shape(gt), ErrorCode::InvalidArgument, "prediction / gt shape mismatch");
  BinaryMask err(gt.height, gt.width);
  for (std::size_t i = 0; i < err.bits.size(); ++i) err.bits[i] = pred.bits[i] != gt.bits[i];
  const Labeling lab = label_components(err);
  const Component* big = largest_component(lab);
  require(big != nullptr, ErrorCode::State, "no error left; the session should have stopped");
  BinaryMask comp(gt.height, gt.width);
  for (std::size_t i = 0; i < comp.bits.size(); ++i) comp.bits[i] = lab.labels[i] == big->label;
  const auto sq = squared_distance_to_outside(comp);
  std::size_t best = 0;
  double best_d = -1;
  for (std::size_t i = 0; i < sq.size(); ++i)
    if (comp.bits[i] && sq[i] > best_d) {
      best_d = sq[i];
      best = i;
    }
  const int r = static_cast<int>(best) / gt.width, c = static_cast<int>(best) % gt.width;
  const Polarity pol = gt.bits[best] ? Polarity::Positive : Polarity::Negative;
  return from_map(r, c, pol, index, image_size, gt.height);
}

std::pair<int, bool> noc_from_ious(const std::vector<double>& ious, double target, int max_clicks) {
  for (std::size_t k = 0; k < ious.size() && int(k) < max_clicks; ++k)
    if (ious[k] >= target) return {int(k) + 1, false};
  return {max_clicks, true};
}

SessionRecord run_session(const Pipeline& pipeline, const ImagePlane& image, const BinaryMask& gt,
                          const SessionOptions& o, std::vector<BinaryMask>* masks) {
  require(gt.count() > 0, ErrorCode::InvalidArgument, "session gt is empty");
  require(o.max_clicks >= 1, ErrorCode::InvalidArgument, "max_clicks must be >= 1");
  SessionRecord rec;
  const long enc0 = pipeline.encode_requests();
  std::vector<double> ious;
  try {
    auto session = pipeline.open(image);
    BinaryMask pred(gt.height, gt.width);
    for (int k = 1; k <= o.max_clicks; ++k) {
      const Click c = next_eval_click(pred, gt, k, pipeline.dims().image_size());
      const ClickOutcome out = pipeline.click(*session, c, o.step);
      pred = out.mask;
      ClickRecord cr;
      cr.click = session->state.clicks.back();
      cr.iou = iou(pred, gt);
      cr.decision = out.step.decision;
      cr.patch_ran = out.step.local.has_value();
      cr.seconds = out.total_ms / 1000.0;
      rec.clicks.push_back(cr);
      ious.push_back(cr.iou);
      if (masks) masks->push_back(pred);
      if (all_reached(cr.iou, o.targets)) break;
    }
  } catch (const std::exception& e) {
    rec.error = true;
    rec.error_message = e.what();
  }
  rec.encodes = pipeline.encode_requests() - enc0;
  std::tie(rec.noc90, rec.failed90) = noc_from_ious(ious, o.targets[0], o.max_clicks);
  std::tie(rec.noc95, rec.failed95) = noc_from_ious(ious, o.targets[1], o.max_clicks);
  if (rec.error) {
    rec.noc90 = rec.noc95 = o.max_clicks;
    rec.failed90 = rec.failed95 = true;
  }
  return rec;
}

SatResult sat_latency(const Pipeline& pipeline, const ImagePlane& image, const StepOptions& options) {
  SatResult r;
  const long e0 = pipeline.encode_requests(), c0 = pipeline.click_invocations();
  auto session = pipeline.open(image);
  const int S = pipeline.dims().image_size();
  const auto t0 = Clock::now();
  for (int gy = 0; gy < 16; ++gy)
    for (int gx = 0; gx < 16; ++gx) {
      // A fresh single-point prompt that keeps the previous mask.
      session->state.clicks.clear();
      session->state.selector = SelectorState{};
      Click c;
      c.x = static_cast<int>((gx + 0.5) * S / 16.0);
      c.y = static_cast<int>((gy + 0.5) * S / 16.0);
      pipeline.click(*session, c, options);
    }
  r.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  r.encodes = pipeline.encode_requests() - e0;
  r.invocations = pipeline.click_invocations() - c0;
  return r;
}

BenchmarkReport compute_report(const std::vector<SessionRecord>& sessions, int skipped,
                               const std::string& subset) {
  require(!sessions.empty(), ErrorCode::InvalidArgument, "report needs at least one session");
  BenchmarkReport r;
  r.subset = subset;
  r.skipped = skipped;
  r.sessions = static_cast<int>(sessions.size());
  double noc90 = 0, noc95 = 0, miou = 0, spc = 0;
  long spc_clicks = 0;
  for (const auto& s : sessions) {
    noc90 += s.noc90;
    noc95 += s.noc95;
    r.nof90 += s.failed90;
    r.nof95 += s.failed95;
    r.errors += s.error;
    if (s.clicks.size() >= 5) {
      miou += s.clicks[4].iou;
    } else {
      miou += s.clicks.empty() ? 0.0 : s.clicks.back().iou;
      ++r.miou5_from_final;
    }
    if (!s.error)
      for (const auto& c : s.clicks) {
        spc += c.seconds;
        ++spc_clicks;
      }
  }
  const double n = double(sessions.size());
  r.noc90 = noc90 / n;
  r.noc95 = noc95 / n;
  r.miou5 = miou / n;
  r.spc = spc_clicks ? spc / double(spc_clicks) : 0.0;
  return r;
}

std::vector<BenchmarkReport> subset_reports(const std::vector<SessionRecord>& sessions,
                                            int skipped) {
  std::vector<BenchmarkReport> out{compute_report(sessions, skipped, "all")};
  auto add = [&](const std::string& name, auto pred) {
    std::vector<SessionRecord> sub;
    for (const auto& s : sessions)
      if (pred(s)) sub.push_back(s);
    if (!sub.empty()) out.push_back(compute_report(sub, 0, name));
  };
  add("hole", [](const SessionRecord& s) { return s.has_hole; });
  add("protrusion", [](const SessionRecord& s) { return s.has_protrusion; });
  add("hole_or_protrusion", [](const SessionRecord& s) { return s.has_hole || s.has_protrusion; });
  add("plain", [](const SessionRecord& s) { return !s.has_hole && !s.has_protrusion; });
  return out;
}

std::string report_csv(const std::vector<BenchmarkReport>& reports) {
  std::ostringstream o;
  o << "subset,sessions,errors,skipped,NoC90,NoC95,NoF90,NoF95,mIoU@5,mIoU@5_from_final,"
       "SPC_s,SAT_s\n";
  o << std::setprecision(10);
  for (const auto& r : reports) {
    o << r.subset << ',' << r.sessions << ',' << r.errors << ',' << r.skipped << ',' << r.noc90
      << ',' << r.noc95 << ',' << r.nof90 << ',' << r.nof95 << ',' << r.miou5 << ','
      << r.miou5_from_final << ',' << r.spc << ',';
    if (r.sat_seconds) o << *r.sat_seconds;
    o << '\n';
  }
  return o.str();
}

std::string session_jsonl(const std::vector<SessionRecord>& sessions) {
  std::string out;
  for (const auto& s : sessions) {
    nlohmann::json j{{"image_id", s.image_id}, {"has_hole", s.has_hole},
                     {"has_protrusion", s.has_protrusion}, {"noc90", s.noc90},
                     {"noc95", s.noc95}, {"failed90", s.failed90}, {"failed95", s.failed95},
                     {"error", s.error}, {"error_message", s.error_message},
                     {"encodes", s.encodes}};
    auto& clicks = j["clicks"] = nlohmann::json::array();
    for (const auto& c : s.clicks)
      clicks.push_back({{"x", c.click.x}, {"y", c.click.y},
                        {"polarity", polarity_name(c.click.polarity)}, {"iou", c.iou},
                        {"selector", decision_name(c.decision)}, {"patch_ran", c.patch_ran},
                        {"seconds", c.seconds}});
    out += j.dump() + '\n';
  }
  return out;
}

std::vector<SessionRecord> parse_session_jsonl(const std::string& text) {
  std::vector<SessionRecord> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    SessionRecord s;
    s.image_id = j.at("image_id");
    s.has_hole = j.at("has_hole");
    s.has_protrusion = j.at("has_protrusion");
    s.noc90 = j.at("noc90");
    s.noc95 = j.at("noc95");
    s.failed90 = j.at("failed90");
    s.failed95 = j.at("failed95");
    s.error = j.at("error");
    s.error_message = j.at("error_message");
    s.encodes = j.at("encodes");
    int index = 0;
    for (const auto& c : j.at("clicks")) {
      ClickRecord cr;
      cr.click.x = c.at("x");
      cr.click.y = c.at("y");
      cr.click.polarity =
          c.at("polarity") == "negative" ? Polarity::Negative : Polarity::Positive;
      cr.click.index = ++index;
      cr.iou = c.at("iou");
      cr.decision =
          c.at("selector") == "run_patchdiff" ? SelectorDecision::RunPatchDiff : SelectorDecision::Skip;
      cr.patch_ran = c.at("patch_ran");
      cr.seconds = c.at("seconds");
      s.clicks.push_back(cr);
    }
    out.push_back(std::move(s));
  }
  return out;
}

const char* eval_mode_name(EvalMode m) {
  switch (m) {
    case EvalMode::Full: return "full";
    case EvalMode::GlobalDiffOnly: return "globaldiff";
    case EvalMode::CoarseOnly: return "coarse";
  }
  return "full";
}

EvalMode parse_eval_mode(const std::string& s) {
  if (s == "full") return EvalMode::Full;
  if (s == "globaldiff") return EvalMode::GlobalDiffOnly;
  if (s == "coarse") return EvalMode::CoarseOnly;
  fail(ErrorCode::InvalidArgument, "unknown eval mode '" + s + "' (full, globaldiff, coarse)");
}

std::filesystem::path mask_dump_path(const std::filesystem::path& run_dir, const std::string& id,
                                     int click) {
  std::ostringstream name;
  name << std::setw(2) << std::setfill('0') << click << ".png";
  return run_dir / "masks" / id / name.str();
}

EvalOutcome run_evaluation(const Pipeline& pipeline, const EvalConfig& cfg) {
  require(cfg.max_clicks >= 1, ErrorCode::InvalidArgument, "max_clicks must be >= 1");
  EvalOutcome out;
  SessionOptions so;
  so.max_clicks = cfg.max_clicks;
  so.step.mode = cfg.mode == EvalMode::Full             ? RefineMode::Full
                 : cfg.mode == EvalMode::GlobalDiffOnly ? RefineMode::GlobalDiffOnly
                                                        : RefineMode::CoarseOnly;
  std::optional<ImagePlane> sat_image;
  int used = 0;
  for (const auto& item : list_dataset(cfg.dataset)) {
    if (cfg.sample_limit && used >= cfg.sample_limit) break;
    if (item.mask_path.empty()) {
      log_warning("image " + item.id + " has no gt mask; skipped");
      ++out.skipped;
      continue;
    }
    ++used;
    const LoadedSample s = load_sample(item, pipeline.dims());
    std::vector<BinaryMask> masks;
    SessionRecord rec = run_session(pipeline, s.image, s.gt, so, cfg.dump_masks ? &masks : nullptr);
    rec.image_id = s.id;
    rec.has_hole = s.has_hole;
    rec.has_protrusion = s.has_protrusion;
    if (cfg.dump_masks && !cfg.run_dir.empty()) {
      write_png(cfg.run_dir / "masks" / s.id / "gt.png", mask_to_gray(s.gt));
      for (std::size_t k = 0; k < masks.size(); ++k)
        write_png(mask_dump_path(cfg.run_dir, s.id, int(k) + 1), mask_to_gray(masks[k]));
    }
    if (!sat_image) sat_image = s.image;
    out.sessions.push_back(std::move(rec));
  }
  require(!out.sessions.empty(), ErrorCode::NotFound,
          "no evaluable images (with gt masks) in " + cfg.dataset.string());
  out.reports = subset_reports(out.sessions, out.skipped);
  if (cfg.sat) out.reports.front().sat_seconds = sat_latency(pipeline, *sat_image, so.step).seconds;
  if (!cfg.run_dir.empty()) {
    std::filesystem::create_directories(cfg.run_dir);
    write_file_atomic(cfg.run_dir / "report.csv", report_csv(out.reports));
    write_file_atomic(cfg.run_dir / "sessions.jsonl", session_jsonl(out.sessions));
  }
  return out;
}

}  // namespace samref
