#pragma once

#include <optional>
#include <vector>

#include "samref/losses.hpp"
#include "samref/model.hpp"

namespace samref {

/// Per-session interaction state carried between clicks.
template <typename T>
struct InteractionState {
  std::vector<Click> clicks;
  std::optional<Tensor<T>> prev_logits;  // previous interaction's final logits
  std::optional<BinaryMask> prev_mask;   // ... binarised
  SelectorState selector;

  friend bool operator==(const InteractionState&, const InteractionState&) = default;
};

enum class RefineMode { CoarseOnly, GlobalDiffOnly, Full };
enum class SelectorPolicy { Dynamic, AlwaysSkip, AlwaysRun };

struct StepOptions {
  RefineMode mode = RefineMode::Full;
  SelectorPolicy selector = SelectorPolicy::Dynamic;
};

/// Image-only refiner inputs, computed once per image (per step in training,
/// where the caches feed backward).
template <typename T>
struct PreparedImage {
  const Tensor<T>* image = nullptr;
  Tensor<T> image_features;
  UpscaledEmbedding<T> emb_up;
  bool has_caches = false;
  typename FusionStem<T>::ImageCache image_cache;
  typename Upscaler<T>::Cache up_cache;
};

template <typename T>
PreparedImage<T> prepare_image(const Refiner<T>& refiner, const Tensor<T>& image,
                               const Tensor<T>& emb, bool keep_caches = false);

template <typename T>
struct StepTrace {
  DensePromptMap<T> dense;
  Tensor<T> prompt_hidden;
  typename GlobalDiff<T>::ExtractCache extract;
  typename ErrorDetailHeads<T>::Cache heads;
  typename PatchDiff<T>::Cache patch;
};

template <typename T>
struct StepResult {
  Tensor<T> coarse;
  Tensor<T> error_g, detail_g, refined_g;
  Tensor<T> feature_n;
  long error_area = 0;
  SelectorDecision decision = SelectorDecision::Skip;
  std::optional<PatchWindow> window;
  std::optional<LocalCrop<T>> crop;
  std::optional<LocalRefineOutput<T>> local;
  Tensor<T> final_logits;
  double globaldiff_ms = 0;
  double patchdiff_ms = 0;
};

/// One refinement pass for the click most recently appended to
/// `state.clicks`, given the backbone's coarse logits for that click.
/// Updates the previous-mask and selector state.
template <typename T>
StepResult<T> refine_step(const Refiner<T>& refiner, const PreparedImage<T>& prep,
                          InteractionState<T>& state, const Tensor<T>& coarse,
                          const StepOptions& options, StepTrace<T>* trace = nullptr);

/// Stage-2 objective of one traced step against the map-resolution gt. The
/// patch terms are present iff PatchDiff ran.
template <typename T>
LossBundle refine_step_loss(const StepResult<T>& result, const BinaryMask& gt,
                            const LossConfig& cfg, LossGrads<T>* grads = nullptr);

/// Accumulates refiner parameter gradients for a traced step.
template <typename T>
void refine_step_backward(Refiner<T>& refiner, const PreparedImage<T>& prep,
                          const StepResult<T>& result, const StepTrace<T>& trace,
                          const LossGrads<T>& grads);

}  // namespace samref
