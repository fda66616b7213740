#include "samref/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "samref/components.hpp"
#include "samref/util.hpp"

namespace samref {

namespace {

using Clock = std::chrono::steady_clock;

const char* const kTrainKeys[] = {
    "stage",       "iterations",      "batch_size",    "learning_rate", "seed",
    "max_clicks",  "dataset",         "cache_dir",     "init_checkpoint", "output",
    "log_path",    "checkpoint_every", "sample_limit", "focal_gamma",   "dice_smooth",
    "error_weight"};

int pick(std::mt19937_64& rng, std::size_t n) {
  return static_cast<int>(std::uniform_int_distribution<std::size_t>(0, n - 1)(rng));
}

BinaryMask binarize(const Tensor<float>& logits) { return binarize_logits(logits); }

nlohmann::json loss_json(const LossBundle& b) {
  return {{"nfl", b.nfl},       {"dice_g", b.dice_g}, {"bce_g", b.bce_g}, {"bnfl_g", b.bnfl_g},
          {"dice_p", b.dice_p}, {"bce_p", b.bce_p},   {"bnfl_p", b.bnfl_p}};
}

}  // namespace

void TrainConfig::validate() const {
  require(stage >= 0 && stage <= 2, ErrorCode::Config, "stage must be 0, 1 or 2");
  require(iterations > 0, ErrorCode::Config, "iterations must be > 0");
  require(batch_size > 0, ErrorCode::Config, "batch_size must be > 0");
  require(learning_rate > 0 && std::isfinite(learning_rate), ErrorCode::Config,
          "learning_rate must be positive");
  require(max_clicks >= 1, ErrorCode::Config, "max_clicks must be >= 1");
  require(checkpoint_every >= 0 && sample_limit >= 0, ErrorCode::Config,
          "checkpoint_every and sample_limit must be >= 0");
  require(stage < 2 || !init_checkpoint.empty(), ErrorCode::Config,
          "stage 2 requires a stage-1 checkpoint (set init_checkpoint)");
  dims.validate();
}

const std::set<std::string>& train_config_keys() {
  static const std::set<std::string> keys = [] {
    std::set<std::string> k(std::begin(kTrainKeys), std::end(kTrainKeys));
    k.insert(dims_config_keys().begin(), dims_config_keys().end());
    return k;
  }();
  return keys;
}

TrainConfig train_config_from(const KeyValueConfig& c) {
  c.require_known(train_config_keys());
  TrainConfig t;
  t.stage = int(c.get_int("stage", t.stage));
  t.iterations = int(c.get_int("iterations", t.iterations));
  t.batch_size = int(c.get_int("batch_size", t.batch_size));
  t.learning_rate = c.get_double("learning_rate", t.learning_rate);
  t.seed = static_cast<std::uint64_t>(c.get_int("seed", static_cast<long long>(t.seed)));
  t.max_clicks = int(c.get_int("max_clicks", t.max_clicks));
  t.dataset = c.get_string("dataset", "");
  t.cache_dir = c.get_string("cache_dir", "");
  t.init_checkpoint = c.get_string("init_checkpoint", "");
  t.output = c.get_string("output", "");
  t.log_path = c.get_string("log_path", "");
  t.checkpoint_every = int(c.get_int("checkpoint_every", 0));
  t.sample_limit = int(c.get_int("sample_limit", 0));
  t.loss.gamma = c.get_double("focal_gamma", t.loss.gamma);
  t.loss.dice_smooth = c.get_double("dice_smooth", t.loss.dice_smooth);
  t.loss.error_weight = c.get_double("error_weight", t.loss.error_weight);
  t.dims = dims_from_config(c, t.dims);
  t.validate();
  return t;
}

std::optional<Click> simulate_training_click(const BinaryMask& gt, const BinaryMask* pred,
                                             int index, int image_size, std::mt19937_64& rng,
                                             int margin) {
  require(gt.count() > 0, ErrorCode::InvalidArgument, "click simulation needs a nonempty gt");
  const int h = gt.height, w = gt.width;
  BinaryMask region;
  Polarity pol = Polarity::Positive;
  double min_sq = 0;
  if (!pred) {
    region = gt;
    min_sq = double(margin) * margin;
  } else {
    require(pred->same_shape(gt), ErrorCode::InvalidArgument, "prediction / gt shape mismatch");
    BinaryMask err(h, w);
    for (std::size_t i = 0; i < err.bits.size(); ++i) err.bits[i] = pred->bits[i] != gt.bits[i];
    const Labeling lab = label_components(err);
    const Component* big = largest_component(lab);
    if (!big) return std::nullopt;
    region = BinaryMask(h, w);
    for (std::size_t i = 0; i < region.bits.size(); ++i)
      region.bits[i] = lab.labels[i] == big->label;
    const std::size_t any = static_cast<std::size_t>(
        std::find(region.bits.begin(), region.bits.end(), 1) - region.bits.begin());
    pol = gt.bits[any] ? Polarity::Positive : Polarity::Negative;
  }
  const auto sq = squared_distance_to_outside(region);
  const double deepest = *std::max_element(sq.begin(), sq.end());
  if (pred) min_sq = deepest / 4.0;  // half depth in distance
  std::vector<int> pool;
  for (int i = 0; i < h * w; ++i)
    if (region.bits[i] && sq[i] > min_sq) pool.push_back(i);
  if (pool.empty())
    for (int i = 0; i < h * w; ++i)
      if (region.bits[i] && sq[i] >= deepest) pool.push_back(i);
  const int at = pool[pick(rng, pool.size())];
  return from_map(at / w, at % w, pol, index, image_size, h);
}

std::uint32_t encoder_tag(SamRefModel<float>& model) {
  const std::string hex = params_digest(model.params(ParamGroup::Encoder));
  return static_cast<std::uint32_t>(std::stoul(hex.substr(0, 8), nullptr, 16));
}

int precompute_embeddings(const std::vector<LoadedSample>& samples, SamRefModel<float>& model,
                          const EmbeddingCache& cache, int* failed) {
  int written = 0, bad = 0;
  for (const auto& s : samples) {
    if (std::filesystem::exists(cache.entry_path(s.image.key)) && cache.get(s.image.key))
      continue;
    try {
      cache.put(s.image.key, model.backbone.encode(s.image.pixels));
      ++written;
    } catch (const std::exception& e) {
      ++bad;
      log_warning("embedding for " + s.id + " not written: " + e.what());
    }
  }
  if (failed) *failed = bad;
  return written;
}

Trainer::Trainer(TrainConfig cfg) : cfg_(std::move(cfg)), opt_(cfg_.learning_rate) {
  cfg_.validate();
  require(!cfg_.dataset.empty(), ErrorCode::Config, "training needs a dataset directory");
  for (const auto& item : list_dataset(cfg_.dataset)) {
    if (item.mask_path.empty()) {
      log_warning("training sample " + item.id + " has no gt mask; skipped");
      continue;
    }
    samples_.push_back(load_sample(item, cfg_.dims));
    if (cfg_.sample_limit && int(samples_.size()) >= cfg_.sample_limit) break;
  }
  setup();
}

Trainer::Trainer(TrainConfig cfg, std::vector<LoadedSample> samples)
    : cfg_(std::move(cfg)), samples_(std::move(samples)), opt_(cfg_.learning_rate) {
  cfg_.validate();
  if (cfg_.sample_limit && int(samples_.size()) > cfg_.sample_limit)
    samples_.resize(static_cast<std::size_t>(cfg_.sample_limit));
  setup();
}

void Trainer::setup() {
  require(!samples_.empty(), ErrorCode::Config, "training set is empty");
  rng_.seed(cfg_.seed);
  if (!cfg_.init_checkpoint.empty()) {
    const Checkpoint init = load_checkpoint(cfg_.init_checkpoint);
    require(cfg_.stage < 2 || init.stage >= 1, ErrorCode::Config,
            "stage 2 requires a stage-1 checkpoint; " + cfg_.init_checkpoint.string() +
                " is stage " + std::to_string(init.stage));
    require(init.dims == cfg_.dims, ErrorCode::Config,
            "init checkpoint dims differ from the configured dims");
    model_ = model_from_checkpoint(init);
    init_hash_ = checkpoint_hash(cfg_.init_checkpoint);
  } else {
    model_ = std::make_unique<SamRefModel<float>>(cfg_.dims);
    model_->init(cfg_.seed);
  }
  for (const auto& s : samples_)
    require(s.gt.height == cfg_.dims.map_size && s.image.pixels.height() == cfg_.dims.image_size(),
            ErrorCode::Config, "sample " + s.id + " does not match the model resolution");
  if (!cfg_.cache_dir.empty() && cfg_.stage > 0)
    cache_ = std::make_unique<EmbeddingCache>(cfg_.cache_dir, encoder_tag(*model_));
  for (auto& group : frozen()) frozen_digests_.push_back(params_digest(group));
}

nn::ParamList<float> Trainer::trainable() {
  switch (cfg_.stage) {
    case 0: {
      auto p = model_->params(ParamGroup::Encoder);
      for (auto* q : model_->params(ParamGroup::Decoder)) p.push_back(q);
      return p;
    }
    case 1: return model_->params(ParamGroup::Decoder);
    default: return model_->params(ParamGroup::Refiner);
  }
}

std::vector<nn::ParamList<float>> Trainer::frozen() {
  std::vector<nn::ParamList<float>> out;
  if (cfg_.stage >= 1) out.push_back(model_->params(ParamGroup::Encoder));
  if (cfg_.stage >= 2) out.push_back(model_->params(ParamGroup::Decoder));
  if (cfg_.stage <= 1) out.push_back(model_->params(ParamGroup::Refiner));
  return out;
}

void Trainer::check_frozen() {
  auto groups = frozen();
  for (std::size_t i = 0; i < groups.size(); ++i)
    if (params_digest(groups[i]) != frozen_digests_[i])
      fail(ErrorCode::Numeric, "frozen parameters changed during stage " +
                                   std::to_string(cfg_.stage) + " training");
}

const Tensor<float>& Trainer::embedding(int index, Tensor<float>& storage) {
  const auto& s = samples_[static_cast<std::size_t>(index)];
  if (cache_) {
    if (auto hit = cache_->get(s.image.key)) {
      ++cache_hits_;
      storage = std::move(*hit);
      return storage;
    }
    storage = model_->backbone.encode(s.image.pixels);
    cache_->put(s.image.key, storage);
    return storage;
  }
  storage = model_->backbone.encode(s.image.pixels);
  return storage;
}

Trainer::SampleLoss Trainer::train_sample(int index, std::mt19937_64& rng, bool backward) {
  const auto& s = samples_[static_cast<std::size_t>(index)];
  const ModelDims& d = cfg_.dims;
  auto& bb = model_->backbone;
  const int want = std::uniform_int_distribution<int>(1, cfg_.max_clicks)(rng);

  ToyBackbone<float>::EncoderCache enc_cache;
  Tensor<float> emb_storage;
  const Tensor<float>& emb = cfg_.stage == 0
                                 ? (emb_storage = bb.encode(s.image.pixels, &enc_cache))
                                 : embedding(index, emb_storage);

  SampleLoss out;
  if (cfg_.stage < 2) {
    // Iterative simulation against the decoder's own predictions; the last
    // decode is the supervised one.
    std::vector<Click> clicks;
    std::optional<Tensor<float>> prev;
    clicks.push_back(*simulate_training_click(s.gt, nullptr, 1, d.image_size(), rng));
    for (;;) {
      const bool last = int(clicks.size()) == want;
      ToyBackbone<float>::DecoderCache dc;
      Tensor<float> logits = bb.decode(emb, clicks, prev ? &*prev : nullptr, last ? &dc : nullptr);
      if (!last) {
        const BinaryMask pred = binarize(logits);
        auto next = simulate_training_click(s.gt, &pred, int(clicks.size()) + 1, d.image_size(), rng);
        if (next) {
          clicks.push_back(*next);
          prev = std::move(logits);
          continue;
        }
        // Perfect prediction: supervise the current click count.
        logits = bb.decode(emb, clicks, prev ? &*prev : nullptr, &dc);
      }
      LossInputs<float> in;
      in.coarse_logits = &logits;
      in.gt = &s.gt;
      LossGrads<float> g;
      out.loss = total_loss(cfg_.stage, in, cfg_.loss, backward ? &g : nullptr);
      if (backward && out.loss.all_finite()) {
        Tensor<float> d_emb = bb.decode_backward(emb, dc, g.d_coarse, cfg_.stage == 0);
        if (cfg_.stage == 0) bb.encode_backward(s.image.pixels, enc_cache, d_emb);
      }
      return out;
    }
  }

  // Stage 2: the backbone is frozen, so only the refiner is traced.
  Refiner<float>& refiner = model_->refiner;
  const PreparedImage<float> prep = prepare_image(refiner, s.image.pixels, emb, backward);
  InteractionState<float> state;
  StepOptions opts;
  opts.selector = SelectorPolicy::Dynamic;
  state.clicks.push_back(*simulate_training_click(s.gt, nullptr, 1, d.image_size(), rng));
  for (;;) {
    Tensor<float> coarse =
        bb.decode(emb, state.clicks, state.prev_logits ? &*state.prev_logits : nullptr);
    const bool last = int(state.clicks.size()) == want;
    StepTrace<float> trace;
    StepResult<float> r = refine_step(refiner, prep, state, coarse, opts, &trace);
    if (!last) {
      auto next = simulate_training_click(s.gt, &*state.prev_mask, int(state.clicks.size()) + 1,
                                          d.image_size(), rng);
      if (next) {
        state.clicks.push_back(*next);
        continue;
      }
    }
    LossGrads<float> g;
    out.loss = refine_step_loss(r, s.gt, cfg_.loss, backward ? &g : nullptr);
    out.patch = r.local.has_value();
    if (backward && out.loss.all_finite()) refine_step_backward(refiner, prep, r, trace, g);
    return out;
  }
}

StepStats Trainer::step() {
  const auto t0 = Clock::now();
  auto params = trainable();
  nn::zero_grads(params);
  StepStats st;
  for (int b = 0; b < cfg_.batch_size; ++b) {
    const int index = pick(rng_, samples_.size());
    const SampleLoss sl = train_sample(index, rng_, true);
    if (!sl.loss.all_finite()) {
      std::ostringstream msg;
      msg << "non-finite loss at stage " << cfg_.stage << " step " << step_ + 1 << " sample "
          << samples_[static_cast<std::size_t>(index)].id << ": " << loss_json(sl.loss).dump();
      fail(ErrorCode::Numeric, msg.str());
    }
    const double k = 1.0 / cfg_.batch_size;
    st.mean.nfl += k * sl.loss.nfl;
    st.mean.dice_g += k * sl.loss.dice_g;
    st.mean.bce_g += k * sl.loss.bce_g;
    st.mean.bnfl_g += k * sl.loss.bnfl_g;
    st.mean.dice_p += k * sl.loss.dice_p;
    st.mean.bce_p += k * sl.loss.bce_p;
    st.mean.bnfl_p += k * sl.loss.bnfl_p;
    st.patch_samples += sl.patch;
  }
  const float scale = 1.0f / static_cast<float>(cfg_.batch_size);
  for (auto* p : params) {
    for (auto& g : p->grad) {
      g *= scale;
      require(std::isfinite(g), ErrorCode::Numeric,
              "non-finite gradient in " + p->name + " at step " + std::to_string(step_ + 1));
    }
  }
  opt_.step(params);
  ++step_;
  st.step = step_;
  st.total = st.mean.total();
  st.ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
  return st;
}

StepStats Trainer::run(const std::function<void(const StepStats&)>& on_step) {
  std::ofstream log;
  if (!cfg_.log_path.empty()) {
    if (cfg_.log_path.has_parent_path())
      std::filesystem::create_directories(cfg_.log_path.parent_path());
    log.open(cfg_.log_path, step_ > 0 ? std::ios::app : std::ios::trunc);
    require(bool(log), ErrorCode::Io, "cannot open training log " + cfg_.log_path.string());
  }
  StepStats last;
  while (step_ < cfg_.iterations) {
    last = step();
    if (log) {
      nlohmann::json rec = loss_json(last.mean);
      rec["step"] = last.step;
      rec["stage"] = cfg_.stage;
      rec["total"] = last.total;
      rec["patch_samples"] = last.patch_samples;
      rec["ms"] = last.ms;
      log << rec.dump() << '\n';
      log.flush();
    }
    if (on_step) on_step(last);
    if (cfg_.checkpoint_every && !cfg_.output.empty() && step_ % cfg_.checkpoint_every == 0 &&
        step_ < cfg_.iterations)
      save(cfg_.output);
  }
  check_frozen();
  if (!cfg_.output.empty()) save(cfg_.output);
  return last;
}

Checkpoint Trainer::checkpoint() {
  check_frozen();
  Checkpoint c = capture_model(*model_);
  c.stage = cfg_.stage;
  c.step = step_;
  c.meta["seed"] = std::to_string(cfg_.seed);
  c.meta["batch_size"] = std::to_string(cfg_.batch_size);
  c.meta["iterations"] = std::to_string(cfg_.iterations);
  if (!init_hash_.empty()) c.meta["init_checkpoint_sha256"] = init_hash_;
  c.optimizer = capture_optimizer(opt_);
  c.rng_state = rng_to_string(rng_);
  return c;
}

void Trainer::save(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  save_checkpoint(path, checkpoint());
}

void Trainer::resume(const Checkpoint& c) {
  require(c.stage == cfg_.stage, ErrorCode::Config,
          "resume checkpoint is stage " + std::to_string(c.stage) + ", config is stage " +
              std::to_string(cfg_.stage));
  require(c.optimizer.has_value(), ErrorCode::Format, "resume checkpoint has no optimizer state");
  restore_model(*model_, c);
  opt_ = restore_optimizer(*c.optimizer);
  rng_ = rng_from_string(c.rng_state);
  step_ = c.step;
  frozen_digests_.clear();
  for (auto& group : frozen()) frozen_digests_.push_back(params_digest(group));
}

double Trainer::evaluate_loss(const std::vector<int>& indices, std::uint64_t seed) {
  double sum = 0;
  for (int i : indices) {
    std::mt19937_64 rng(seed ^ (0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(i + 1)));
    sum += train_sample(i, rng, false).loss.total();
  }
  return sum / double(indices.size());
}

}  // namespace samref
