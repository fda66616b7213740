#pragma once

#include <optional>

#include "samref/tensor.hpp"

namespace samref {

inline constexpr double kProbClamp = 1e-7;

/// Scalar loss with its gradient w.r.t. the input logits.
template <typename T>
struct LossValue {
  double value = 0;
  Tensor<T> d_logits;
};

/// Normalised focal loss: per-pixel weights (1 - p_t)^gamma, scaled by
/// `weight` inside `region`, normalised to sum to one; returns the weighted
/// mean of -log p_t. The gradient is exact (normaliser included).
template <typename T>
LossValue<T> weighted_nfl(const Tensor<T>& logits, const BinaryMask& target,
                          const BinaryMask* region, double weight, double gamma = 2.0);

template <typename T>
LossValue<T> nfl(const Tensor<T>& logits, const BinaryMask& target, double gamma = 2.0) {
  return weighted_nfl(logits, target, nullptr, 1.0, gamma);
}

/// 1 - (2 sum(p t) + s) / (sum(p) + sum(t) + s) on sigmoid probabilities.
template <typename T>
LossValue<T> dice(const Tensor<T>& logits, const BinaryMask& target, double smooth = 1.0);

/// Mean binary cross-entropy of sigmoid(logits), p_t clamped like nfl.
template <typename T>
LossValue<T> bce(const Tensor<T>& logits, const BinaryMask& target);

/// (sigmoid(coarse) > 0.5) XOR gt.
template <typename T>
BinaryMask make_error_target(const Tensor<T>& coarse_logits, const BinaryMask& gt);

struct LossBundle {
  double nfl = 0, dice_g = 0, bce_g = 0, bnfl_g = 0, dice_p = 0, bce_p = 0, bnfl_p = 0;
  double total() const { return nfl + dice_g + bce_g + bnfl_g + dice_p + bce_p + bnfl_p; }
  bool all_finite() const;
};

struct LossConfig {
  double gamma = 2.0;
  double dice_smooth = 1.0;
  double error_weight = 1.5;
};

/// Inputs of one training sample. Stage 1 reads only `coarse_logits`;
/// stage 2 requires the global outputs and reads the patch outputs when
/// PatchDiff ran for this sample.
template <typename T>
struct LossInputs {
  const Tensor<T>* coarse_logits = nullptr;
  const BinaryMask* gt = nullptr;
  const Tensor<T>* global_error = nullptr;
  const Tensor<T>* global_refined = nullptr;
  const BinaryMask* global_error_target = nullptr;
  const Tensor<T>* patch_error = nullptr;
  const Tensor<T>* patch_refined = nullptr;
  const BinaryMask* patch_gt = nullptr;
  const BinaryMask* patch_error_target = nullptr;
};

template <typename T>
struct LossGrads {
  Tensor<T> d_coarse, d_global_error, d_global_refined, d_patch_error, d_patch_refined;
};

/// Sum of the seven unit-weighted terms.
template <typename T>
LossBundle total_loss(int stage, const LossInputs<T>& in, const LossConfig& cfg,
                      LossGrads<T>* grads = nullptr);

}  // namespace samref
