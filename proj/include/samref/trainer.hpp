#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "samref/checkpoint.hpp"
#include "samref/config.hpp"
#include "samref/dataset.hpp"
#include "samref/embedding_cache.hpp"
#include "samref/losses.hpp"
#include "samref/refine_step.hpp"

namespace samref {

/// Training stages. Stage 0 pretrains the toy encoder and decoder jointly
/// from scratch (the stand-in has no pretrained weights); stage 1 fine-tunes
/// the decoder with the encoder frozen; stage 2 trains the refiners with the
/// whole backbone frozen.
struct TrainConfig {
  int stage = 1;
  int iterations = 2000;
  int batch_size = 4;
  double learning_rate = 5e-4;
  std::uint64_t seed = 1;
  int max_clicks = 5;  // clicks per training sample ~ U{1..max_clicks}
  std::filesystem::path dataset;
  std::filesystem::path cache_dir;  // empty: embeddings computed on the fly
  std::filesystem::path init_checkpoint;
  std::filesystem::path output;     // checkpoint written at the end (and periodically)
  std::filesystem::path log_path;   // JSON lines, one record per step
  int checkpoint_every = 0;         // 0: only at the end
  int sample_limit = 0;             // 0: whole dataset
  ModelDims dims;
  LossConfig loss;

  void validate() const;
};

/// Every key accepted by train_config_from.
const std::set<std::string>& train_config_keys();

/// Reads a flat key-value config; unknown keys are a Config error listing
/// them. Model dims keys are shared with the checkpoint format.
TrainConfig train_config_from(const KeyValueConfig& cfg);

/// Training-time click simulator. With no clicks so far the click is drawn
/// uniformly from the gt eroded by `margin` (falling back to the deepest gt
/// pixels when erosion empties it). Otherwise it is drawn from the interior
/// of the largest error component of `pred` (pixels at least half as deep
/// as the deepest one), positive on a false-negative region and negative on
/// a false-positive one. No error means no click.
std::optional<Click> simulate_training_click(const BinaryMask& gt, const BinaryMask* pred,
                                             int index, int image_size, std::mt19937_64& rng,
                                             int margin = 3);

/// Backbone tag for cache records: first 32 bits of the encoder digest, so
/// entries from other encoder weights never match.
std::uint32_t encoder_tag(SamRefModel<float>& model);

/// Writes a cache entry for every sample that lacks one. Returns the number
/// written; failures are per-file warnings and counted in `failed`.
int precompute_embeddings(const std::vector<LoadedSample>& samples, SamRefModel<float>& model,
                          const EmbeddingCache& cache, int* failed = nullptr);

struct StepStats {
  std::int64_t step = 0;  // 1-based index of the completed step
  LossBundle mean;        // per-term mean over the batch
  double total = 0;
  int patch_samples = 0;  // batch samples whose PatchDiff terms were active
  double ms = 0;
};

class Trainer {
 public:
  /// Loads every sample of `cfg.dataset` with a gt mask.
  explicit Trainer(TrainConfig cfg);
  /// Uses preloaded samples (tests, benchmarks).
  Trainer(TrainConfig cfg, std::vector<LoadedSample> samples);

  /// One optimizer step over a freshly drawn batch.
  StepStats step();
  /// Runs until `iterations` steps are complete, logging and checkpointing.
  StepStats run(const std::function<void(const StepStats&)>& on_step = {});

  /// Full trainer state, including optimizer and RNG.
  Checkpoint checkpoint();
  void save(const std::filesystem::path& path);
  /// Continues a run from a checkpoint written by `save` for the same stage.
  void resume(const Checkpoint& ckpt);

  /// Loss of the current weights on fixed samples with fixed click seeds,
  /// no update.
  double evaluate_loss(const std::vector<int>& indices, std::uint64_t seed);

  SamRefModel<float>& model() { return *model_; }
  const TrainConfig& config() const { return cfg_; }
  std::int64_t steps_done() const { return step_; }
  const std::vector<LoadedSample>& samples() const { return samples_; }
  long cache_hits() const { return cache_hits_; }

 private:
  struct SampleLoss {
    LossBundle loss;
    bool patch = false;
  };

  void setup();
  nn::ParamList<float> trainable();
  std::vector<nn::ParamList<float>> frozen();
  const Tensor<float>& embedding(int index, Tensor<float>& storage);
  SampleLoss train_sample(int index, std::mt19937_64& rng, bool backward);
  void check_frozen();

  TrainConfig cfg_;
  std::vector<LoadedSample> samples_;
  std::unique_ptr<SamRefModel<float>> model_;
  nn::Adam<float> opt_;
  std::mt19937_64 rng_;
  std::int64_t step_ = 0;
  std::unique_ptr<EmbeddingCache> cache_;
  std::vector<std::string> frozen_digests_;
  std::string init_hash_;
  long cache_hits_ = 0;
};

}  // namespace samref
