#include "samref/pipeline.hpp"

#include <chrono>

namespace samref {

namespace {

using Clock = std::chrono::steady_clock;

double ms_between(Clock::time_point a, Clock::time_point b) {
  return std::chrono::duration<double, std::milli>(b - a).count();
}

}  // namespace

Pipeline::Pipeline(std::shared_ptr<const Backbone> backbone,
                   std::shared_ptr<const Refiner<float>> refiner,
                   std::shared_ptr<const EmbeddingCache> cache)
    : backbone_(std::move(backbone)),
      refiner_(std::move(refiner)),
      cache_(std::move(cache)),
      encoder_(*backbone_, cache_.get()) {
  require(backbone_->dims() == refiner_->dims, ErrorCode::Config,
          "backbone and refiner dims differ");
}

std::unique_ptr<PipelineSession> Pipeline::open(const ImagePlane& image) const {
  const int S = dims().image_size();
  require_shape(image.pixels.channels() == 3 && image.pixels.height() == S &&
                    image.pixels.width() == S,
                "image plane must be 3x" + std::to_string(S) + "x" + std::to_string(S));
  auto s = std::make_unique<PipelineSession>();
  s->image = image;
  ++encodes_;
  s->embedding = encoder_.encode(s->image);
  s->prepared = prepare_image(*refiner_, s->image.pixels, s->embedding.data);
  return s;
}

ClickOutcome Pipeline::click(PipelineSession& s, Click c, const StepOptions& options) const {
  const int S = dims().image_size();
  require(c.x >= 0 && c.y >= 0 && c.x < S && c.y < S, ErrorCode::InvalidArgument,
          "click (" + std::to_string(c.x) + ", " + std::to_string(c.y) +
              ") outside the working image " + std::to_string(S) + "x" + std::to_string(S));
  ++clicks_;
  c.index = static_cast<int>(s.state.clicks.size()) + 1;
  ClickOutcome out;
  // A failed interaction must not leave a half-applied click behind.
  const auto saved = std::make_unique<InteractionState<float>>(s.state);
  const auto t0 = Clock::now();
  s.state.clicks.push_back(c);
  Clock::time_point t1, t2;
  try {
    const CoarsePrediction coarse = backbone_->decode(
        s.embedding, s.state.clicks, s.state.prev_logits ? &*s.state.prev_logits : nullptr);
    t1 = Clock::now();
    out.step = refine_step(*refiner_, s.prepared, s.state, coarse.logits, options);
    t2 = Clock::now();
  } catch (...) {
    s.state = std::move(*saved);
    throw;
  }
  out.mask = *s.state.prev_mask;
  out.decode_ms = ms_between(t0, t1);
  out.globaldiff_ms = out.step.globaldiff_ms;
  out.patchdiff_ms = out.step.patchdiff_ms;
  out.total_ms = ms_between(t0, t2);
  return out;
}

LoadedPipeline make_pipeline(const SamRefModel<float>& model,
                             std::shared_ptr<const EmbeddingCache> cache) {
  LoadedPipeline lp;
  lp.backbone = std::make_shared<ToyBackboneAdapter>(
      std::make_shared<const ToyBackbone<float>>(model.backbone));
  lp.refiner = std::make_shared<const Refiner<float>>(model.refiner);
  lp.pipeline = std::make_unique<Pipeline>(lp.backbone, lp.refiner, std::move(cache));
  return lp;
}

}  // namespace samref
