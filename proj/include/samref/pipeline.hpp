#pragma once

#include <atomic>
#include <memory>

#include "samref/backbone.hpp"
#include "samref/embedding_cache.hpp"
#include "samref/refine_step.hpp"

namespace samref {

/// Per-image interaction context. Not movable: the prepared refiner inputs
/// point at the owned image.
struct PipelineSession {
  ImagePlane image;
  EmbeddingMap embedding;
  PreparedImage<float> prepared;
  InteractionState<float> state;

  PipelineSession() = default;
  PipelineSession(const PipelineSession&) = delete;
  PipelineSession& operator=(const PipelineSession&) = delete;
};

struct ClickOutcome {
  StepResult<float> step;
  BinaryMask mask;  // binarised final logits, map resolution
  double decode_ms = 0, globaldiff_ms = 0, patchdiff_ms = 0, total_ms = 0;
};

/// Backbone + refiners wired for inference. The encoder runs once per
/// opened session (or never, on a cache hit); every click runs the prompt
/// decoder and, unless in coarse-only mode, the refiners. Thread-safe for
/// distinct sessions; parameters are never mutated.
class Pipeline {
 public:
  Pipeline(std::shared_ptr<const Backbone> backbone, std::shared_ptr<const Refiner<float>> refiner,
           std::shared_ptr<const EmbeddingCache> cache = nullptr);

  const ModelDims& dims() const { return refiner_->dims; }
  const Backbone& backbone() const { return *backbone_; }

  std::unique_ptr<PipelineSession> open(const ImagePlane& image) const;
  /// Appends `click` (its index is reassigned to the next ordinal) and runs
  /// one interaction. Out-of-image clicks are InvalidArgument and leave the
  /// session untouched.
  ClickOutcome click(PipelineSession& session, Click click, const StepOptions& options) const;

  long encode_requests() const { return encodes_.load(); }
  long click_invocations() const { return clicks_.load(); }
  long cache_hits() const { return encoder_.hits(); }

 private:
  std::shared_ptr<const Backbone> backbone_;
  std::shared_ptr<const Refiner<float>> refiner_;
  std::shared_ptr<const EmbeddingCache> cache_;
  CachedEncoder encoder_;
  mutable std::atomic<long> encodes_{0}, clicks_{0};
};

/// Builds a pipeline over a trained model (the toy backbone is copied into
/// an adapter; the refiner is shared).
struct LoadedPipeline {
  std::shared_ptr<ToyBackboneAdapter> backbone;
  std::shared_ptr<const Refiner<float>> refiner;
  std::unique_ptr<Pipeline> pipeline;
};
LoadedPipeline make_pipeline(const SamRefModel<float>& model,
                             std::shared_ptr<const EmbeddingCache> cache = nullptr);

}  // namespace samref
