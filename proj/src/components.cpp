#include "samref/components.hpp"

#include <algorithm>
#include <limits>

namespace samref {

Labeling label_components(const BinaryMask& mask) {
  Labeling out;
  out.height = mask.height;
  out.width = mask.width;
  out.labels.assign(mask.bits.size(), 0);
  std::vector<int> stack;
  const int h = mask.height, w = mask.width;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const int start = r * w + c;
      if (!mask.bits[start] || out.labels[start]) continue;
      Component comp;
      comp.label = static_cast<int>(out.components.size()) + 1;
      comp.row0 = r;
      comp.col0 = c;
      comp.row1 = r + 1;
      comp.col1 = c + 1;
      stack.assign(1, start);
      out.labels[start] = comp.label;
      while (!stack.empty()) {
        const int p = stack.back();
        stack.pop_back();
        const int pr = p / w, pc = p % w;
        ++comp.size;
        comp.row0 = std::min(comp.row0, pr);
        comp.col0 = std::min(comp.col0, pc);
        comp.row1 = std::max(comp.row1, pr + 1);
        comp.col1 = std::max(comp.col1, pc + 1);
        const int nb[4][2] = {{pr - 1, pc}, {pr + 1, pc}, {pr, pc - 1}, {pr, pc + 1}};
        for (auto& n : nb) {
          if (n[0] < 0 || n[0] >= h || n[1] < 0 || n[1] >= w) continue;
          const int q = n[0] * w + n[1];
          if (mask.bits[q] && !out.labels[q]) {
            out.labels[q] = comp.label;
            stack.push_back(q);
          }
        }
      }
      out.components.push_back(comp);
    }
  }
  return out;
}

const Component* largest_component(const Labeling& labeling) {
  const Component* best = nullptr;
  for (const auto& c : labeling.components) {
    if (!best || c.size > best->size ||
        (c.size == best->size &&
         (c.row0 < best->row0 || (c.row0 == best->row0 && c.col0 < best->col0))))
      best = &c;
  }
  return best;
}

namespace {

// Felzenszwalb-Huttenlocher 1-D squared distance transform of f in place.
void edt_1d(std::vector<double>& f, std::vector<double>& d, std::vector<int>& v,
            std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  const double inf = std::numeric_limits<double>::infinity();
  d.resize(n);
  v.resize(n);
  z.resize(n + 1);
  int k = 0;
  v[0] = 0;
  z[0] = -inf;
  z[1] = inf;
  for (int q = 1; q < n; ++q) {
    if (f[q] == inf) continue;
    if (f[v[k]] == inf) {
      v[k] = q;
      continue;
    }
    double s;
    while (true) {
      s = ((f[q] + double(q) * q) - (f[v[k]] + double(v[k]) * v[k])) / (2.0 * q - 2.0 * v[k]);
      if (s <= z[k] && k > 0) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  if (f[v[0]] == inf) {
    std::fill(d.begin(), d.end(), inf);
    f = d;
    return;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    d[q] = (double(q) - v[k]) * (double(q) - v[k]) + f[v[k]];
  }
  f = d;
}

}  // namespace

std::vector<double> squared_distance_to_outside(const BinaryMask& mask) {
  // Pad by one pixel so the border acts as background.
  const int h = mask.height + 2, w = mask.width + 2;
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> g(static_cast<std::size_t>(h) * w, 0.0);
  for (int r = 0; r < mask.height; ++r)
    for (int c = 0; c < mask.width; ++c)
      g[(r + 1) * w + (c + 1)] = mask.at(r, c) ? inf : 0.0;
  std::vector<double> f, d, z;
  std::vector<int> v;
  for (int c = 0; c < w; ++c) {
    f.resize(h);
    for (int r = 0; r < h; ++r) f[r] = g[r * w + c];
    edt_1d(f, d, v, z);
    for (int r = 0; r < h; ++r) g[r * w + c] = f[r];
  }
  for (int r = 0; r < h; ++r) {
    f.assign(g.begin() + r * w, g.begin() + (r + 1) * w);
    edt_1d(f, d, v, z);
    std::copy(f.begin(), f.end(), g.begin() + r * w);
  }
  std::vector<double> out(mask.bits.size());
  for (int r = 0; r < mask.height; ++r)
    for (int c = 0; c < mask.width; ++c) out[r * mask.width + c] = g[(r + 1) * w + (c + 1)];
  return out;
}

}  // namespace samref
