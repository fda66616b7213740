#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "samref/dataset.hpp"
#include "samref/pipeline.hpp"

namespace samref {

/// |a & b| / |a | b|, 1 when both are empty.
double iou(const BinaryMask& a, const BinaryMask& b);

/// Deterministic evaluation click: the largest 4-connected error component
/// (positive on missed foreground, negative on spurious foreground), at its
/// pixel farthest from the component boundary, ties to the smallest
/// (row, col). pred == gt is a State error.
Click next_eval_click(const BinaryMask& pred, const BinaryMask& gt, int index, int image_size);

struct ClickRecord {
  Click click;
  double iou = 0;
  SelectorDecision decision = SelectorDecision::Skip;
  bool patch_ran = false;
  double seconds = 0;  // decoder + refiners, encoder excluded
};

struct SessionRecord {
  std::string image_id;
  bool has_hole = false, has_protrusion = false;
  std::vector<ClickRecord> clicks;
  int noc90 = 0, noc95 = 0;
  bool failed90 = false, failed95 = false;
  bool error = false;  // pipeline exception; counts as a failure, excluded from SPC
  std::string error_message;
  long encodes = 0;    // encoder requests made for this session
};

struct SessionOptions {
  int max_clicks = 20;
  std::array<double, 2> targets{0.90, 0.95};
  StepOptions step;
};

/// Click loop until every target is reached or `max_clicks` is spent.
/// When `masks` is set, the binarised prediction after every click is
/// appended to it.
SessionRecord run_session(const Pipeline& pipeline, const ImagePlane& image, const BinaryMask& gt,
                          const SessionOptions& options, std::vector<BinaryMask>* masks = nullptr);

/// NoC at a target from an IoU series: first 1-based click reaching it, or
/// max_clicks with the failure flag.
std::pair<int, bool> noc_from_ious(const std::vector<double>& ious, double target, int max_clicks);

struct SatResult {
  double seconds = 0;
  long encodes = 0;
  long invocations = 0;
};

/// Encodes once, then prompts a 16x16 grid of single points one at a time,
/// each with the previous prompt's mask. Times the prompt loop only.
SatResult sat_latency(const Pipeline& pipeline, const ImagePlane& image, const StepOptions& options);

struct BenchmarkReport {
  std::string subset = "all";
  int sessions = 0;
  int errors = 0;
  int skipped = 0;  // images without gt
  double noc90 = 0, noc95 = 0;
  int nof90 = 0, nof95 = 0;
  double miou5 = 0;
  int miou5_from_final = 0;  // sessions that stopped before click 5
  double spc = 0;            // mean seconds per click over non-error sessions
  std::optional<double> sat_seconds;
};

/// Aggregates; at least one session is required.
BenchmarkReport compute_report(const std::vector<SessionRecord>& sessions, int skipped = 0,
                               const std::string& subset = "all");

/// Reports for all sessions and the hole / protrusion / thin-structure
/// subsets (empty subsets omitted).
std::vector<BenchmarkReport> subset_reports(const std::vector<SessionRecord>& sessions,
                                            int skipped);

std::string report_csv(const std::vector<BenchmarkReport>& reports);
std::string session_jsonl(const std::vector<SessionRecord>& sessions);
/// Reparses session_jsonl output.
std::vector<SessionRecord> parse_session_jsonl(const std::string& text);

enum class EvalMode { Full, GlobalDiffOnly, CoarseOnly };
const char* eval_mode_name(EvalMode m);
EvalMode parse_eval_mode(const std::string& s);

struct EvalConfig {
  std::filesystem::path dataset;
  std::filesystem::path run_dir;  // report.csv, sessions.jsonl, masks/
  EvalMode mode = EvalMode::Full;
  int max_clicks = 20;
  bool dump_masks = false;
  bool sat = false;
  int sample_limit = 0;
};

struct EvalOutcome {
  std::vector<SessionRecord> sessions;
  std::vector<BenchmarkReport> reports;
  int skipped = 0;
};

/// Runs the harness over a dataset directory and writes the report files.
/// Images without a gt mask are skipped with a warning and counted.
EvalOutcome run_evaluation(const Pipeline& pipeline, const EvalConfig& config);

/// `<run>/masks/<image id>/<click, 2 digits>.png`.
std::filesystem::path mask_dump_path(const std::filesystem::path& run_dir, const std::string& id,
                                     int click);

}  // namespace samref
