#pragma once

#include <optional>
#include <random>

#include "samref/globaldiff.hpp"
#include "samref/types.hpp"

namespace samref {

/// Map-space box [row0, row1) x [col0, col1).
struct PatchWindow {
  int row0 = 0, col0 = 0, row1 = 0, col1 = 0;
  double expand_ratio = 1.0;

  int height() const { return row1 - row0; }
  int width() const { return col1 - col0; }
  bool contains(int r, int c) const { return r >= row0 && r < row1 && c >= col0 && c < col1; }
  friend bool operator==(const PatchWindow&, const PatchWindow&) = default;
};

/// Error-area history for the dynamic patch selector.
struct SelectorState {
  std::optional<long> prev_error_area;
  long curr_error_area = 0;
  friend bool operator==(const SelectorState&, const SelectorState&) = default;
};

enum class SelectorDecision { Skip, RunPatchDiff };

inline const char* decision_name(SelectorDecision d) {
  return d == SelectorDecision::RunPatchDiff ? "run_patchdiff" : "skip";
}

/// Largest 4-connected component of (refined XOR prev), its box grown to
/// include the click pixel, expanded about its centre by `ratio` and clipped
/// to the map. nullopt when the masks agree everywhere.
std::optional<PatchWindow> find_refine_window(const BinaryMask& refined, const BinaryMask& prev,
                                              MapPoint last_click, double ratio);

/// Expands a box about its centre by `ratio` (outward rounding) and clips it
/// to [0, size)^2.
PatchWindow expand_box(int row0, int col0, int row1, int col1, double ratio, int size);

/// Grows windows smaller than 4 px per side to 4 px (kept inside the map).
PatchWindow inflate_min_window(const PatchWindow& w, int size);

template <typename T>
struct LocalCrop {
  Tensor<T> feature;  // C x K x K
  Tensor<T> logits;   // 1 x K x K
};

/// RoI-align crop of the refiner feature and the coarse logits.
template <typename T>
LocalCrop<T> roi_crop(const Tensor<T>& feature, const Tensor<T>& logits, const PatchWindow& window,
                      int out_size);

/// Binary mask resampled to the crop grid (bilinear, kept where >= 0.5).
BinaryMask crop_mask(const BinaryMask& mask, const PatchWindow& window, int out_size);

/// Writes `local` (resampled to the window extent) into a copy of
/// `global_logits`. Windows under 4 px per side are inflated first, as in
/// roi_crop; pixels outside the inflated window are untouched.
template <typename T>
Tensor<T> paste_back(const Tensor<T>& global_logits, const Tensor<T>& local,
                     const std::optional<PatchWindow>& window);

/// run iff a previous area exists and the current one is strictly larger;
/// the current area always becomes the new baseline.
SelectorDecision dynamic_select(SelectorState& state);

/// Counts pixels whose error probability exceeds 0.5.
template <typename T>
long error_area(const Tensor<T>& error_logits) {
  long n = 0;
  for (std::size_t i = 0; i < error_logits.size(); ++i) n += error_logits[i] > T(0) ? 1 : 0;
  return n;
}

template <typename T>
struct LocalRefineOutput {
  Tensor<T> error_logits;   // M_e^p
  Tensor<T> detail_logits;  // M_d^p
  Tensor<T> refined;        // blend over the local coarse logits
};

/// Local error/detail heads over [local feature; local coarse logits].
template <typename T>
class PatchDiff {
 public:
  struct Cache {
    Tensor<T> input;
    typename ErrorDetailHeads<T>::Cache heads;
  };

  PatchDiff() = default;
  explicit PatchDiff(const ModelDims& dims);

  LocalRefineOutput<T> local_refine(const Tensor<T>& local_feature,
                                    const Tensor<T>& local_coarse, Cache* cache = nullptr) const;
  /// Returns gradient w.r.t. the local feature.
  Tensor<T> backward(const Cache& cache, const Tensor<T>& d_error, const Tensor<T>& d_detail);

  void init(std::mt19937_64& rng) { heads.init(rng); }
  void collect(nn::ParamList<T>& out) { heads.collect(out); }

  ErrorDetailHeads<T> heads;
};

}  // namespace samref
