#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "samref/backbone.hpp"
#include "samref/globaldiff.hpp"
#include "samref/patchdiff.hpp"
#include "samref/prompt_codec.hpp"

namespace samref {

/// Parameter groups used for freezing and checkpoint bookkeeping.
enum class ParamGroup { Encoder, Decoder, Refiner };

/// GlobalDiff + PatchDiff with their fusion stems; everything trained in stage 2.
template <typename T>
struct Refiner {
  ModelDims dims;
  FusionStem<T> fusion;
  GlobalDiff<T> globaldiff;
  PatchDiff<T> patchdiff;

  Refiner() = default;
  explicit Refiner(const ModelDims& d) : dims(d), fusion(d), globaldiff(d), patchdiff(d) {}

  void init(std::mt19937_64& rng) {
    fusion.init(rng);
    globaldiff.init(rng);
    patchdiff.init(rng);
  }
  void collect(nn::ParamList<T>& out) {
    fusion.collect(out);
    globaldiff.collect(out);
    patchdiff.collect(out);
  }
};

template <typename T>
struct SamRefModel {
  ModelDims dims;
  ToyBackbone<T> backbone;
  Refiner<T> refiner;

  SamRefModel() = default;
  explicit SamRefModel(const ModelDims& d) : dims(d), backbone(d), refiner(d) {}

  /// Deterministic initialisation from a seed.
  void init(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    backbone.init(rng);
    refiner.init(rng);
  }

  nn::ParamList<T> params(ParamGroup group) {
    nn::ParamList<T> out;
    switch (group) {
      case ParamGroup::Encoder: backbone.collect_encoder(out); break;
      case ParamGroup::Decoder: backbone.collect_decoder(out); break;
      case ParamGroup::Refiner: refiner.collect(out); break;
    }
    return out;
  }
  nn::ParamList<T> all_params() {
    nn::ParamList<T> out = params(ParamGroup::Encoder);
    for (auto g : {ParamGroup::Decoder, ParamGroup::Refiner})
      for (auto* p : params(g)) out.push_back(p);
    return out;
  }

  template <typename U>
  SamRefModel<U> cast() const {
    SamRefModel<U> out(dims);
    auto src = const_cast<SamRefModel*>(this)->all_params();
    auto dst = out.all_params();
    for (std::size_t i = 0; i < src.size(); ++i)
      for (std::size_t k = 0; k < src[i]->size(); ++k)
        dst[i]->value[k] = static_cast<U>(src[i]->value[k]);
    return out;
  }
};

/// Number of scalar parameters in a list.
template <typename T>
std::size_t count_params(const nn::ParamList<T>& params) {
  std::size_t n = 0;
  for (auto* p : params) n += p->size();
  return n;
}

/// SHA-256 over parameter names and raw values (hex).
std::string params_digest(const nn::ParamList<float>& params);

}  // namespace samref
