#include "samref/checkpoint.hpp"

#include <sstream>

#include "samref/util.hpp"

namespace samref {

namespace {

constexpr std::uint32_t kMagic = 0x4b435253;  // "SRCK"

void write_floats(ByteWriter& w, const std::vector<float>& v) {
  w.u64(v.size());
  w.raw(v.data(), v.size() * sizeof(float));
}

std::vector<float> read_floats(ByteReader& r) {
  const std::uint64_t n = r.u64();
  if (n > r.remaining() / sizeof(float)) fail(ErrorCode::Format, "checkpoint: bad array length");
  std::vector<float> v(n);
  r.raw(v.data(), n * sizeof(float));
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  ByteWriter w;
  w.u32(kMagic);
  w.u32(Checkpoint::kVersion);
  w.str(dims_to_config(c.dims).to_text());
  w.u32(static_cast<std::uint32_t>(c.stage));
  w.u64(static_cast<std::uint64_t>(c.step));
  w.u32(static_cast<std::uint32_t>(c.meta.size()));
  for (const auto& [k, v] : c.meta) {
    w.str(k);
    w.str(v);
  }
  w.u32(static_cast<std::uint32_t>(c.params.size()));
  for (const auto& p : c.params) {
    w.str(p.name);
    w.u32(static_cast<std::uint32_t>(p.shape.size()));
    for (int d : p.shape) w.u32(static_cast<std::uint32_t>(d));
    write_floats(w, p.values);
  }
  w.u32(c.optimizer ? 1 : 0);
  if (c.optimizer) {
    w.u64(static_cast<std::uint64_t>(c.optimizer->steps));
    w.f64(c.optimizer->learning_rate);
    w.u32(static_cast<std::uint32_t>(c.optimizer->slots.size()));
    for (const auto& [name, slot] : c.optimizer->slots) {
      w.str(name);
      write_floats(w, slot.m);
      write_floats(w, slot.v);
    }
  }
  w.str(c.rng_state);
  w.u32(crc32(w.bytes()));
  write_file_atomic(path, w.bytes());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  const std::string where = "checkpoint " + path.string() + ": ";
  if (bytes.size() < 12) fail(ErrorCode::Format, where + "too short");
  ByteReader tail({bytes.data() + bytes.size() - 4, 4});
  if (crc32({bytes.data(), bytes.size() - 4}) != tail.u32())
    fail(ErrorCode::Format, where + "checksum mismatch");
  ByteReader r({bytes.data(), bytes.size() - 4});
  try {
    if (r.u32() != kMagic) fail(ErrorCode::Format, "bad magic");
    if (const auto v = r.u32(); v != Checkpoint::kVersion)
      fail(ErrorCode::Format, "unsupported version " + std::to_string(v));
    Checkpoint c;
    c.dims = dims_from_config(KeyValueConfig::parse(r.str()));
    c.stage = static_cast<int>(r.u32());
    c.step = static_cast<std::int64_t>(r.u64());
    for (std::uint32_t i = 0, n = r.u32(); i < n; ++i) {
      std::string k = r.str();
      c.meta[k] = r.str();
    }
    for (std::uint32_t i = 0, n = r.u32(); i < n; ++i) {
      ParamBlob p;
      p.name = r.str();
      for (std::uint32_t d = 0, nd = r.u32(); d < nd; ++d) p.shape.push_back(int(r.u32()));
      p.values = read_floats(r);
      c.params.push_back(std::move(p));
    }
    if (r.u32()) {
      OptimizerState o;
      o.steps = static_cast<std::int64_t>(r.u64());
      o.learning_rate = r.f64();
      for (std::uint32_t i = 0, n = r.u32(); i < n; ++i) {
        std::string name = r.str();
        auto& slot = o.slots[name];
        slot.m = read_floats(r);
        slot.v = read_floats(r);
      }
      c.optimizer = std::move(o);
    }
    c.rng_state = r.str();
    if (r.remaining() != 0) fail(ErrorCode::Format, "trailing bytes");
    return c;
  } catch (const Error& e) {
    fail(e.code(), where + e.what());
  }
}

std::string checkpoint_hash(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

Checkpoint capture_model(SamRefModel<float>& model) {
  Checkpoint c;
  c.dims = model.dims;
  for (auto* p : model.all_params()) c.params.push_back({p->name, p->shape, {p->value.begin(), p->value.end()}});
  return c;
}

void restore_model(SamRefModel<float>& model, const Checkpoint& ckpt) {
  require(model.dims == ckpt.dims, ErrorCode::Config, "checkpoint model dims differ");
  std::map<std::string, const ParamBlob*> by_name;
  for (const auto& p : ckpt.params) by_name[p.name] = &p;
  for (auto* p : model.all_params()) {
    const auto it = by_name.find(p->name);
    if (it == by_name.end()) fail(ErrorCode::Format, "checkpoint lacks parameter " + p->name);
    if (it->second->shape != p->shape || it->second->values.size() != p->size())
      fail(ErrorCode::Format, "checkpoint parameter " + p->name + " has the wrong shape");
    p->value.assign(it->second->values.begin(), it->second->values.end());
  }
}

std::unique_ptr<SamRefModel<float>> model_from_checkpoint(const Checkpoint& ckpt) {
  auto m = std::make_unique<SamRefModel<float>>(ckpt.dims);
  restore_model(*m, ckpt);
  return m;
}

OptimizerState capture_optimizer(const nn::Adam<float>& opt) {
  return {opt.steps(), opt.learning_rate(), opt.slots()};
}

nn::Adam<float> restore_optimizer(const OptimizerState& s) {
  nn::Adam<float> opt(s.learning_rate);
  opt.set_steps(s.steps);
  opt.slots() = s.slots;
  return opt;
}

KeyValueConfig dims_to_config(const ModelDims& d) {
  KeyValueConfig c;
  c.set("map_size", std::to_string(d.map_size));
  c.set("emb_channels", std::to_string(d.emb_channels));
  c.set("feat_channels", std::to_string(d.feat_channels));
  c.set("enc_width", std::to_string(d.enc_width));
  c.set("token_dim", std::to_string(d.token_dim));
  c.set("crop_size", std::to_string(d.crop_size));
  c.set("disk_radius", std::to_string(d.disk_radius));
  c.set("n_blocks", std::to_string(d.n_blocks));
  std::ostringstream r;
  r.precision(17);
  r << d.expand_ratio;
  c.set("expand_ratio", r.str());
  return c;
}

const std::set<std::string>& dims_config_keys() {
  static const std::set<std::string> keys{"map_size",  "emb_channels", "feat_channels",
                                          "enc_width", "token_dim",    "crop_size",
                                          "disk_radius", "n_blocks",   "expand_ratio"};
  return keys;
}

ModelDims dims_from_config(const KeyValueConfig& c, ModelDims d) {
  d.map_size = int(c.get_int("map_size", d.map_size));
  d.emb_channels = int(c.get_int("emb_channels", d.emb_channels));
  d.feat_channels = int(c.get_int("feat_channels", d.feat_channels));
  d.enc_width = int(c.get_int("enc_width", d.enc_width));
  d.token_dim = int(c.get_int("token_dim", d.token_dim));
  d.crop_size = int(c.get_int("crop_size", d.crop_size));
  d.disk_radius = int(c.get_int("disk_radius", d.disk_radius));
  d.n_blocks = int(c.get_int("n_blocks", d.n_blocks));
  d.expand_ratio = c.get_double("expand_ratio", d.expand_ratio);
  d.validate();
  return d;
}

std::string rng_to_string(const std::mt19937_64& rng) {
  std::ostringstream s;
  s << rng;
  return s.str();
}

std::mt19937_64 rng_from_string(const std::string& s) {
  std::mt19937_64 rng;
  if (s.empty()) return rng;
  std::istringstream in(s);
  in >> rng;
  if (!in) fail(ErrorCode::Format, "bad RNG state");
  return rng;
}

}  // namespace samref
