#pragma once
#include <memory>
#include <set>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "samref/config.hpp"
#include "samref/model.hpp"

namespace samref {

struct ParamBlob {
  std::string name;
  std::vector<int> shape;
  std::vector<float> values;
};

struct OptimizerState {
  std::int64_t steps = 0;
  double learning_rate = 0;
  std::map<std::string, nn::Adam<float>::Slot> slots;
};

/// Everything needed to continue or evaluate a run.
///
/// File: magic "SRCK", version, then length-prefixed sections (dims,
/// metadata, parameters, optional optimizer state, RNG state) and a trailing
/// crc32 over all preceding bytes. Written atomically.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  ModelDims dims;
  int stage = 0;            // last stage trained into these weights (0 = init)
  std::int64_t step = 0;    // completed steps of `stage`
  std::map<std::string, std::string> meta;
  std::vector<ParamBlob> params;
  std::optional<OptimizerState> optimizer;
  std::string rng_state;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// SHA-256 of the checkpoint file bytes.
std::string checkpoint_hash(const std::filesystem::path& path);

Checkpoint capture_model(SamRefModel<float>& model);
/// Copies weights into `model` (which must have matching dims); every
/// parameter must be present with the same shape.
void restore_model(SamRefModel<float>& model, const Checkpoint& ckpt);
std::unique_ptr<SamRefModel<float>> model_from_checkpoint(const Checkpoint& ckpt);

OptimizerState capture_optimizer(const nn::Adam<float>& opt);
nn::Adam<float> restore_optimizer(const OptimizerState& state);

KeyValueConfig dims_to_config(const ModelDims& dims);
ModelDims dims_from_config(const KeyValueConfig& cfg, ModelDims base = {});
/// Keys read by dims_from_config.
const std::set<std::string>& dims_config_keys();

std::string rng_to_string(const std::mt19937_64& rng);
std::mt19937_64 rng_from_string(const std::string& s);

}  // namespace samref
