#include "samref/refine_step.hpp"

#include <chrono>

namespace samref {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

}  // namespace

template <typename T>
PreparedImage<T> prepare_image(const Refiner<T>& refiner, const Tensor<T>& image,
                               const Tensor<T>& emb, bool keep_caches) {
  PreparedImage<T> prep;
  prep.image = &image;
  prep.has_caches = keep_caches;
  prep.image_features =
      refiner.fusion.image_stem(image, keep_caches ? &prep.image_cache : nullptr);
  prep.emb_up = refiner.globaldiff.upscale_embeddings(emb, keep_caches ? &prep.up_cache : nullptr);
  return prep;
}

template <typename T>
StepResult<T> refine_step(const Refiner<T>& refiner, const PreparedImage<T>& prep,
                          InteractionState<T>& state, const Tensor<T>& coarse,
                          const StepOptions& options, StepTrace<T>* trace) {
  require(!state.clicks.empty(), ErrorCode::State, "refine step without a click");
  const ModelDims& d = refiner.dims;
  const int M = d.map_size;
  require_shape(coarse.channels() == 1 && coarse.height() == M && coarse.width() == M,
                "coarse logits must be 1x" + std::to_string(M) + "x" + std::to_string(M));

  StepResult<T> r;
  r.coarse = coarse;
  if (options.mode == RefineMode::CoarseOnly) {
    r.final_logits = coarse;
  } else {
    const auto t0 = Clock::now();
    Tensor<float> disks = encode_clicks_to_disks(state.clicks, d.disk_radius, M, d.image_size());
    auto parts = nn::split_channels(disks.cast<T>(), {1, 1});
    DensePromptMap<T> dense = assemble_dense_map(parts[0], parts[1], coarse);
    Tensor<T> f0 = refiner.fusion.prompt_stem(dense, trace ? &trace->prompt_hidden : nullptr);
    f0 += prep.image_features;
    auto fn = refiner.globaldiff.global_extract(FusedFeature<T>{std::move(f0), 0}, prep.emb_up,
                                                trace ? &trace->extract : nullptr);
    auto heads = refiner.globaldiff.predict_heads(fn, trace ? &trace->heads : nullptr);
    r.error_g = std::move(heads.error_logits);
    r.detail_g = std::move(heads.detail_logits);
    r.feature_n = std::move(fn.data);
    r.refined_g = error_detail_blend(r.error_g, r.detail_g, coarse);
    if (trace) trace->dense = std::move(dense);
    r.globaldiff_ms = ms_since(t0);

    const auto t1 = Clock::now();
    r.error_area = error_area(r.error_g);
    state.selector.curr_error_area = r.error_area;
    r.decision = dynamic_select(state.selector);
    if (options.mode == RefineMode::GlobalDiffOnly ||
        options.selector == SelectorPolicy::AlwaysSkip)
      r.decision = SelectorDecision::Skip;
    else if (options.selector == SelectorPolicy::AlwaysRun && state.prev_mask)
      r.decision = SelectorDecision::RunPatchDiff;

    r.final_logits = r.refined_g;
    if (r.decision == SelectorDecision::RunPatchDiff && state.prev_mask) {
      const MapPoint last = to_map(state.clicks.back(), d.image_size(), M);
      r.window = find_refine_window(binarize_logits(r.refined_g), *state.prev_mask, last,
                                    d.expand_ratio);
      if (r.window) {
        r.crop = roi_crop(r.feature_n, coarse, *r.window, d.crop_size);
        r.local = refiner.patchdiff.local_refine(r.crop->feature, r.crop->logits,
                                                 trace ? &trace->patch : nullptr);
        r.final_logits = paste_back(r.refined_g, r.local->refined, r.window);
      }
    }
    r.patchdiff_ms = ms_since(t1);
  }
  state.prev_logits = r.final_logits;
  state.prev_mask = binarize_logits(r.final_logits);
  return r;
}

template <typename T>
LossBundle refine_step_loss(const StepResult<T>& r, const BinaryMask& gt, const LossConfig& cfg,
                            LossGrads<T>* grads) {
  require(!r.error_g.empty(), ErrorCode::Config, "stage 2 loss needs a refined step");
  const BinaryMask err = make_error_target(r.coarse, gt);
  LossInputs<T> in;
  in.coarse_logits = &r.coarse;
  in.gt = &gt;
  in.global_error = &r.error_g;
  in.global_refined = &r.refined_g;
  in.global_error_target = &err;
  BinaryMask patch_gt, patch_err;
  if (r.local) {
    patch_gt = crop_mask(gt, *r.window, r.local->refined.height());
    patch_err = make_error_target(r.crop->logits, patch_gt);
    in.patch_error = &r.local->error_logits;
    in.patch_refined = &r.local->refined;
    in.patch_gt = &patch_gt;
    in.patch_error_target = &patch_err;
  }
  return total_loss(2, in, cfg, grads);
}

template <typename T>
void refine_step_backward(Refiner<T>& refiner, const PreparedImage<T>& prep,
                          const StepResult<T>& r, const StepTrace<T>& trace,
                          const LossGrads<T>& grads) {
  require(prep.has_caches, ErrorCode::Internal, "backward needs a traced prepared image");
  const int M = refiner.dims.map_size;
  auto bg = error_detail_blend_backward(r.error_g, r.detail_g, r.coarse, grads.d_global_refined);
  bg.d_error += grads.d_global_error;
  Tensor<T> d_fn = refiner.globaldiff.heads.backward(trace.heads, bg.d_error, bg.d_detail);

  if (r.local && !grads.d_patch_refined.empty()) {
    auto bp = error_detail_blend_backward(r.local->error_logits, r.local->detail_logits,
                                          r.crop->logits, grads.d_patch_refined);
    bp.d_error += grads.d_patch_error;
    Tensor<T> d_local = refiner.patchdiff.backward(trace.patch, bp.d_error, bp.d_detail);
    const PatchWindow w = inflate_min_window(*r.window, M);
    const nn::Region region{double(w.row0), double(w.col0), double(w.row1), double(w.col1)};
    d_fn += nn::roi_align_backward(d_local, region, M, M);
  }

  auto [d_f0, d_emb_up] = refiner.globaldiff.global_extract_backward(trace.extract, d_fn);
  refiner.globaldiff.upscaler.backward(prep.up_cache, d_emb_up);
  refiner.fusion.image_stem_backward(*prep.image, prep.image_cache, d_f0);
  refiner.fusion.prompt_stem_backward(trace.dense, trace.prompt_hidden, d_f0);
}

template PreparedImage<float> prepare_image(const Refiner<float>&, const Tensor<float>&,
                                            const Tensor<float>&, bool);
template PreparedImage<double> prepare_image(const Refiner<double>&, const Tensor<double>&,
                                             const Tensor<double>&, bool);
template StepResult<float> refine_step(const Refiner<float>&, const PreparedImage<float>&,
                                       InteractionState<float>&, const Tensor<float>&,
                                       const StepOptions&, StepTrace<float>*);
template StepResult<double> refine_step(const Refiner<double>&, const PreparedImage<double>&,
                                        InteractionState<double>&, const Tensor<double>&,
                                        const StepOptions&, StepTrace<double>*);
template LossBundle refine_step_loss(const StepResult<float>&, const BinaryMask&,
                                     const LossConfig&, LossGrads<float>*);
template LossBundle refine_step_loss(const StepResult<double>&, const BinaryMask&,
                                     const LossConfig&, LossGrads<double>*);
template void refine_step_backward(Refiner<float>&, const PreparedImage<float>&,
                                   const StepResult<float>&, const StepTrace<float>&,
                                   const LossGrads<float>&);
template void refine_step_backward(Refiner<double>&, const PreparedImage<double>&,
                                   const StepResult<double>&, const StepTrace<double>&,
                                   const LossGrads<double>&);

}  // namespace samref
