#include "samref/patchdiff.hpp"

#include <cmath>

#include "samref/components.hpp"

namespace samref {

PatchWindow expand_box(int row0, int col0, int row1, int col1, double ratio, int size) {
  const double cy = 0.5 * (row0 + row1), cx = 0.5 * (col0 + col1);
  const double hh = 0.5 * (row1 - row0) * ratio, hw = 0.5 * (col1 - col0) * ratio;
  constexpr double kSlack = 1e-9;  // absorbs representation error in ratio
  PatchWindow w;
  w.row0 = std::max(0, static_cast<int>(std::floor(cy - hh + kSlack)));
  w.col0 = std::max(0, static_cast<int>(std::floor(cx - hw + kSlack)));
  w.row1 = std::min(size, static_cast<int>(std::ceil(cy + hh - kSlack)));
  w.col1 = std::min(size, static_cast<int>(std::ceil(cx + hw - kSlack)));
  w.expand_ratio = ratio;
  return w;
}

PatchWindow inflate_min_window(const PatchWindow& w, int size) {
  constexpr int kMin = 4;
  PatchWindow out = w;
  auto grow = [&](int& a, int& b) {
    const int extent = b - a;
    if (extent >= kMin) return;
    a = std::max(0, std::min(a - (kMin - extent) / 2, size - kMin));
    b = a + kMin;
  };
  grow(out.row0, out.row1);
  grow(out.col0, out.col1);
  return out;
}

std::optional<PatchWindow> find_refine_window(const BinaryMask& refined, const BinaryMask& prev,
                                              MapPoint click, double ratio) {
  require_shape(refined.same_shape(prev), "refined and previous masks");
  require(ratio >= 1.0, ErrorCode::InvalidArgument, "expand ratio must be >= 1");
  require(click.row >= 0 && click.row < refined.height && click.col >= 0 &&
              click.col < refined.width,
          ErrorCode::InvalidArgument, "click outside the map");
  BinaryMask diff(refined.height, refined.width);
  for (std::size_t i = 0; i < diff.bits.size(); ++i)
    diff.bits[i] = (refined.bits[i] != 0) != (prev.bits[i] != 0) ? 1 : 0;
  const Labeling lab = label_components(diff);
  const Component* best = largest_component(lab);
  if (!best) return std::nullopt;
  const int r0 = std::min(best->row0, click.row), c0 = std::min(best->col0, click.col);
  const int r1 = std::max(best->row1, click.row + 1), c1 = std::max(best->col1, click.col + 1);
  const int size = refined.height;
  PatchWindow w = expand_box(r0, c0, r1, c1, ratio, size);
  return inflate_min_window(w, size);
}

template <typename T>
LocalCrop<T> roi_crop(const Tensor<T>& feature, const Tensor<T>& logits, const PatchWindow& window,
                      int out_size) {
  require_shape(feature.height() == logits.height() && feature.width() == logits.width(),
                "feature and logits spatial dims");
  const PatchWindow w = inflate_min_window(window, feature.height());
  require(w.row0 >= 0 && w.col0 >= 0 && w.row1 <= feature.height() && w.col1 <= feature.width() &&
              w.height() > 0 && w.width() > 0,
          ErrorCode::InvalidArgument, "invalid crop window");
  const nn::Region region{double(w.row0), double(w.col0), double(w.row1), double(w.col1)};
  return {nn::roi_align(feature, region, out_size, out_size),
          nn::roi_align(logits, region, out_size, out_size)};
}

BinaryMask crop_mask(const BinaryMask& mask, const PatchWindow& window, int out_size) {
  const PatchWindow w = inflate_min_window(window, mask.height);
  const nn::Region region{double(w.row0), double(w.col0), double(w.row1), double(w.col1)};
  const Tensor<float> t = nn::roi_align(mask_to_tensor<float>(mask), region, out_size, out_size);
  BinaryMask out(out_size, out_size);
  for (std::size_t i = 0; i < out.bits.size(); ++i) out.bits[i] = t[i] >= 0.5f ? 1 : 0;
  return out;
}

template <typename T>
Tensor<T> paste_back(const Tensor<T>& global_logits, const Tensor<T>& local,
                     const std::optional<PatchWindow>& window) {
  Tensor<T> out = global_logits;
  if (!window) return out;
  const PatchWindow w = inflate_min_window(*window, global_logits.height());
  const Tensor<T> patch = nn::resize_bilinear(local, w.height(), w.width());
  for (int c = 0; c < out.channels(); ++c)
    for (int r = 0; r < w.height(); ++r)
      for (int k = 0; k < w.width(); ++k) out(c, w.row0 + r, w.col0 + k) = patch(c, r, k);
  return out;
}

SelectorDecision dynamic_select(SelectorState& state) {
  const bool run = state.prev_error_area.has_value() &&
                   state.curr_error_area > *state.prev_error_area;
  state.prev_error_area = state.curr_error_area;
  return run ? SelectorDecision::RunPatchDiff : SelectorDecision::Skip;
}

template <typename T>
PatchDiff<T>::PatchDiff(const ModelDims& d)
    : heads("patchdiff.heads", d.feat_channels + 1, d.feat_channels / 2) {}

template <typename T>
LocalRefineOutput<T> PatchDiff<T>::local_refine(const Tensor<T>& feat, const Tensor<T>& coarse,
                                                Cache* cache) const {
  require_shape(coarse.channels() == 1 && feat.height() == coarse.height() &&
                    feat.width() == coarse.width(),
                "local feature " + feat.shape_string() + " vs local logits " +
                    coarse.shape_string());
  Tensor<T> input = nn::concat_channels<T>({&feat, &coarse});
  auto [e, d] = heads.forward(input, cache ? &cache->heads : nullptr);
  Tensor<T> refined = error_detail_blend(e, d, coarse);
  if (cache) cache->input = std::move(input);
  return {std::move(e), std::move(d), std::move(refined)};
}

template <typename T>
Tensor<T> PatchDiff<T>::backward(const Cache& cache, const Tensor<T>& d_error,
                                 const Tensor<T>& d_detail) {
  Tensor<T> d_in = heads.backward(cache.heads, d_error, d_detail);
  auto parts = nn::split_channels(d_in, {d_in.channels() - 1, 1});
  return std::move(parts[0]);
}

template LocalCrop<float> roi_crop(const Tensor<float>&, const Tensor<float>&, const PatchWindow&,
                                   int);
template LocalCrop<double> roi_crop(const Tensor<double>&, const Tensor<double>&,
                                    const PatchWindow&, int);
template Tensor<float> paste_back(const Tensor<float>&, const Tensor<float>&,
                                  const std::optional<PatchWindow>&);
template Tensor<double> paste_back(const Tensor<double>&, const Tensor<double>&,
                                   const std::optional<PatchWindow>&);
template class PatchDiff<float>;
template class PatchDiff<double>;

}  // namespace samref
