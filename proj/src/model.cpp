#include "samref/model.hpp"

#include "samref/util.hpp"

namespace samref {

std::string params_digest(const nn::ParamList<float>& params) {
  ByteWriter w;
  for (const auto* p : params) {
    w.str(p->name);
    w.raw(p->value.data(), p->value.size() * sizeof(float));
  }
  return sha256_hex(w.bytes());
}

}  // namespace samref
