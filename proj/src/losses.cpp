#include "samref/losses.hpp"

#include <cmath>

#include "samref/nn.hpp"

namespace samref {

namespace {

struct ClampedPt {
  double pt;
  double dpt_dz;  // zero when clamped
};

ClampedPt prob_target(double z, bool target) {
  const double s = nn::sigmoid(z);
  double pt = target ? s : 1.0 - s;
  double d = (target ? 1.0 : -1.0) * s * (1.0 - s);
  if (pt < kProbClamp) {
    pt = kProbClamp;
    d = 0;
  } else if (pt > 1.0 - kProbClamp) {
    pt = 1.0 - kProbClamp;
    d = 0;
  }
  return {pt, d};
}

template <typename T>
void check_pair(const Tensor<T>& logits, const BinaryMask& target) {
  require_shape(logits.channels() == 1 && logits.height() == target.height &&
                    logits.width() == target.width,
                "loss logits " + logits.shape_string() + " vs target " +
                    std::to_string(target.height) + "x" + std::to_string(target.width));
}

}  // namespace

bool LossBundle::all_finite() const {
  for (double v : {nfl, dice_g, bce_g, bnfl_g, dice_p, bce_p, bnfl_p})
    if (!std::isfinite(v)) return false;
  return true;
}

template <typename T>
LossValue<T> weighted_nfl(const Tensor<T>& logits, const BinaryMask& target,
                          const BinaryMask* region, double weight, double gamma) {
  check_pair(logits, target);
  if (region) require_shape(region->same_shape(target), "nfl error region");
  require(gamma >= 0, ErrorCode::InvalidArgument, "focal gamma must be >= 0");
  const std::size_t n = logits.size();
  std::vector<double> w(n), ell(n), dw(n), pt(n), dpt(n);
  double wsum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto p = prob_target(logits[i], target.bits[i] != 0);
    const double r = (region && region->bits[i]) ? weight : 1.0;
    const double q = 1.0 - p.pt;
    pt[i] = p.pt;
    dpt[i] = p.dpt_dz;
    w[i] = r * std::pow(q, gamma);
    dw[i] = gamma > 0 ? -r * gamma * std::pow(q, gamma - 1.0) : 0.0;
    ell[i] = -std::log(p.pt);
    wsum += w[i];
  }
  double loss = 0;
  for (std::size_t i = 0; i < n; ++i) loss += w[i] * ell[i];
  loss /= wsum;
  LossValue<T> out{loss, Tensor<T>(1, logits.height(), logits.width())};
  for (std::size_t i = 0; i < n; ++i) {
    const double dl_dpt = (w[i] * (-1.0 / pt[i]) + (ell[i] - loss) * dw[i]) / wsum;
    out.d_logits[i] = static_cast<T>(dl_dpt * dpt[i]);
  }
  return out;
}

template <typename T>
LossValue<T> dice(const Tensor<T>& logits, const BinaryMask& target, double smooth) {
  check_pair(logits, target);
  const std::size_t n = logits.size();
  double inter = 0, psum = 0, tsum = 0;
  std::vector<double> p(n);
  for (std::size_t i = 0; i < n; ++i) {
    p[i] = nn::sigmoid(double(logits[i]));
    const double t = target.bits[i] ? 1.0 : 0.0;
    inter += p[i] * t;
    psum += p[i];
    tsum += t;
  }
  const double num = 2 * inter + smooth, den = psum + tsum + smooth;
  LossValue<T> out{1.0 - num / den, Tensor<T>(1, logits.height(), logits.width())};
  for (std::size_t i = 0; i < n; ++i) {
    const double t = target.bits[i] ? 1.0 : 0.0;
    const double dl_dp = -(2 * t * den - num) / (den * den);
    out.d_logits[i] = static_cast<T>(dl_dp * p[i] * (1 - p[i]));
  }
  return out;
}

template <typename T>
LossValue<T> bce(const Tensor<T>& logits, const BinaryMask& target) {
  check_pair(logits, target);
  const std::size_t n = logits.size();
  LossValue<T> out{0.0, Tensor<T>(1, logits.height(), logits.width())};
  double sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto p = prob_target(logits[i], target.bits[i] != 0);
    sum += -std::log(p.pt);
    out.d_logits[i] = static_cast<T>(-1.0 / p.pt * p.dpt_dz / double(n));
  }
  out.value = sum / double(n);
  return out;
}

template <typename T>
BinaryMask make_error_target(const Tensor<T>& coarse_logits, const BinaryMask& gt) {
  check_pair(coarse_logits, gt);
  BinaryMask e(gt.height, gt.width);
  for (std::size_t i = 0; i < e.bits.size(); ++i)
    e.bits[i] = ((coarse_logits[i] > T(0)) != (gt.bits[i] != 0)) ? 1 : 0;
  return e;
}

template <typename T>
LossBundle total_loss(int stage, const LossInputs<T>& in, const LossConfig& cfg,
                      LossGrads<T>* grads) {
  require(stage == 0 || stage == 1 || stage == 2, ErrorCode::Config, "unknown training stage");
  require(in.coarse_logits && in.gt, ErrorCode::Config, "loss needs coarse logits and gt");
  LossBundle b;
  auto n0 = nfl(*in.coarse_logits, *in.gt, cfg.gamma);
  b.nfl = n0.value;
  if (grads) grads->d_coarse = std::move(n0.d_logits);
  if (stage < 2) return b;

  require(in.global_error && in.global_refined && in.global_error_target, ErrorCode::Config,
          "stage 2 loss needs GlobalDiff outputs");
  auto dg = dice(*in.global_error, *in.global_error_target, cfg.dice_smooth);
  auto bg = bce(*in.global_error, *in.global_error_target);
  auto ng = weighted_nfl(*in.global_refined, *in.gt, in.global_error_target, cfg.error_weight,
                         cfg.gamma);
  b.dice_g = dg.value;
  b.bce_g = bg.value;
  b.bnfl_g = ng.value;
  if (grads) {
    grads->d_global_error = std::move(dg.d_logits);
    grads->d_global_error += bg.d_logits;
    grads->d_global_refined = std::move(ng.d_logits);
  }
  if (in.patch_error || in.patch_refined) {
    require(in.patch_error && in.patch_refined && in.patch_gt && in.patch_error_target,
            ErrorCode::Config, "incomplete PatchDiff loss inputs");
    auto dp = dice(*in.patch_error, *in.patch_error_target, cfg.dice_smooth);
    auto bp = bce(*in.patch_error, *in.patch_error_target);
    auto np = weighted_nfl(*in.patch_refined, *in.patch_gt, in.patch_error_target,
                           cfg.error_weight, cfg.gamma);
    b.dice_p = dp.value;
    b.bce_p = bp.value;
    b.bnfl_p = np.value;
    if (grads) {
      grads->d_patch_error = std::move(dp.d_logits);
      grads->d_patch_error += bp.d_logits;
      grads->d_patch_refined = std::move(np.d_logits);
    }
  }
  return b;
}

#define SAMREF_LOSS_INSTANTIATE(T)                                                          \
  template LossValue<T> weighted_nfl(const Tensor<T>&, const BinaryMask&, const BinaryMask*, \
                                     double, double);                                       \
  template LossValue<T> dice(const Tensor<T>&, const BinaryMask&, double);                  \
  template LossValue<T> bce(const Tensor<T>&, const BinaryMask&);                           \
  template BinaryMask make_error_target(const Tensor<T>&, const BinaryMask&);               \
  template LossBundle total_loss(int, const LossInputs<T>&, const LossConfig&, LossGrads<T>*);

SAMREF_LOSS_INSTANTIATE(float)
SAMREF_LOSS_INSTANTIATE(double)

}  // namespace samref
