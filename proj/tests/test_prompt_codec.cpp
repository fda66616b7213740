#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>

#include "samref/prompt_codec.hpp"
#include "support.hpp"

using namespace samref;
using namespace samref::testing;

namespace {

// Number of integer offsets (dx, dy) with dx^2 + dy^2 <= r^2.
int lattice_disk_count(int r) {
  int n = 0;
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx) n += dx * dx + dy * dy <= r * r;
  return n;
}

double channel_sum(const Tensor<float>& t, int c) {
  double s = 0;
  for (float v : t.channel(c)) s += v;
  return s;
}

Click at_map(int row, int col, Polarity p = Polarity::Positive, int idx = 1) {
  return from_map(row, col, p, idx, 1024, 256);
}

}  // namespace

TEST_CASE("single centred click covers the lattice disk") {
  REQUIRE(lattice_disk_count(5) == 81);
  const Click c = at_map(128, 128);
  const auto d = encode_clicks_to_disks(std::span(&c, 1), 5, 256, 1024);
  CHECK(d.channels() == 2);
  CHECK(channel_sum(d, 0) == lattice_disk_count(5));
  CHECK(channel_sum(d, 1) == 0);
}

TEST_CASE("disk membership is exactly the Euclidean ball") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> pos(0, 1023);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Click> clicks;
    for (int k = 0; k < 4; ++k)
      clicks.push_back({pos(rng), pos(rng), k % 2 ? Polarity::Negative : Polarity::Positive, k + 1});
    const auto d = encode_clicks_to_disks(clicks, 4, 256, 1024);
    for (int ch = 0; ch < 2; ++ch)
      for (int r = 0; r < 256; ++r)
        for (int c = 0; c < 256; ++c) {
          bool inside = false;
          for (const auto& k : clicks) {
            if (int(k.polarity) != ch) continue;
            const MapPoint p = to_map(k, 1024, 256);
            inside |= (r - p.row) * (r - p.row) + (c - p.col) * (c - p.col) <= 16;
          }
          REQUIRE((d(ch, r, c) == 1.0f) == inside);
        }
  }
}

TEST_CASE("empty clicks, duplicates and ordering") {
  const auto empty = encode_clicks_to_disks({}, 5, 256, 1024);
  CHECK(channel_sum(empty, 0) + channel_sum(empty, 1) == 0);
  const Click a = at_map(40, 50);
  std::vector<Click> twice{a, a};
  CHECK(encode_clicks_to_disks(twice, 5, 256, 1024) == encode_clicks_to_disks(std::span(&a, 1), 5, 256, 1024));
  std::vector<Click> seq{at_map(10, 10), at_map(100, 30, Polarity::Negative), at_map(200, 200)};
  auto rev = seq;
  std::reverse(rev.begin(), rev.end());
  CHECK(encode_clicks_to_disks(seq, 5, 256, 1024) == encode_clicks_to_disks(rev, 5, 256, 1024));
}

TEST_CASE("disk raster is translation-equivariant away from the border") {
  const std::vector<Click> base{at_map(60, 70), at_map(90, 40, Polarity::Negative)};
  std::vector<Click> shifted;
  for (auto c : base) {
    const MapPoint p = to_map(c, 1024, 256);
    shifted.push_back(at_map(p.row + 7, p.col - 3, c.polarity));
  }
  const auto a = encode_clicks_to_disks(base, 5, 256, 1024);
  const auto b = encode_clicks_to_disks(shifted, 5, 256, 1024);
  for (int ch = 0; ch < 2; ++ch)
    for (int r = 0; r < 240; ++r)
      for (int c = 3; c < 256; ++c) REQUIRE(a(ch, r, c) == b(ch, r + 7, c - 3));
}

TEST_CASE("out-of-bounds clicks and bad radius are rejected") {
  Click c{1024, 5, Polarity::Positive, 1};
  CHECK_THROWS_AS(encode_clicks_to_disks(std::span(&c, 1), 5, 256, 1024), Error);
  c = {-1, 5, Polarity::Positive, 1};
  CHECK_THROWS_AS(encode_clicks_to_disks(std::span(&c, 1), 5, 256, 1024), Error);
  CHECK_THROWS_AS(encode_clicks_to_disks({}, 0, 256, 1024), Error);
}

TEST_CASE("image to map rounding") {
  CHECK(to_map(Click{2, 1, Polarity::Positive, 1}, 1024, 256) == MapPoint{0, 1});  // 0.25 -> 0, 0.5 -> 1
  CHECK(to_map(Click{1023, 1022, Polarity::Positive, 1}, 1024, 256) == MapPoint{255, 255});
  for (int r : {0, 17, 255}) CHECK(to_map(at_map(r, 255 - r), 1024, 256) == MapPoint{r, 255 - r});
}

TEST_CASE("assemble_dense_map stacks channels in order without rescaling") {
  std::mt19937_64 rng(12);
  const Click c = at_map(128, 128);
  const auto disks = encode_clicks_to_disks(std::span(&c, 1), 5, 256, 1024);
  auto parts = nn::split_channels(disks, {1, 1});
  const auto logits = random_tensor<float>(rng, 1, 256, 256, -30, 30);
  const auto dense = assemble_dense_map(parts[0], parts[1], logits);
  CHECK(dense.channels.channels() == 3);
  CHECK(channel_sum(dense.channels, 0) == 81);
  CHECK(channel_sum(dense.channels, 1) == 0);
  for (std::size_t i = 0; i < logits.size(); ++i) REQUIRE(dense.channels.channel(2)[i] == logits[i]);
  const Tensor<float> zero(1, 256, 256);
  const auto z = assemble_dense_map(parts[0], zero, zero);
  CHECK(channel_sum(z.channels, 2) == 0);
  CHECK_THROWS_AS(assemble_dense_map(parts[0], parts[1], Tensor<float>(1, 128, 128)), Error);
}

TEST_CASE("fusion is the sum of the two stems and linear in the prompt") {
  const ModelDims d = tiny_dims();
  FusionStem<double> stem(d);
  std::mt19937_64 rng(13);
  stem.init(rng);
  const auto image = random_tensor<double>(rng, 3, d.image_size(), d.image_size());
  auto dense = DensePromptMap<double>{random_tensor<double>(rng, 3, d.map_size, d.map_size)};
  const auto fused = stem.fuse(image, dense);
  CHECK(fused.stage == 0);
  CHECK(fused.data.shape_string() == "8x16x16");
  auto sum = stem.image_stem(image);
  sum += stem.prompt_stem(dense);
  for (std::size_t i = 0; i < sum.size(); ++i) REQUIRE(fused.data[i] == doctest::Approx(sum[i]).epsilon(1e-12));

  // Bias-free stems: doubling the logits channel adds exactly prompt_stem(delta).
  for (auto* conv : {&stem.prompt_conv, &stem.prompt_proj}) conv->bias.value.assign(conv->bias.size(), 0.0);
  auto dense2 = dense;
  DensePromptMap<double> delta{Tensor<double>(3, d.map_size, d.map_size)};
  for (int r = 0; r < d.map_size; ++r)
    for (int c = 0; c < d.map_size; ++c) {
      dense2.channels(2, r, c) *= 2;
      delta.channels(2, r, c) = dense.channels(2, r, c);
    }
  const auto f1 = stem.fuse(image, dense), f2 = stem.fuse(image, dense2);
  const auto pd = stem.prompt_stem(delta);
  for (std::size_t i = 0; i < pd.size(); ++i) REQUIRE(f2.data[i] - f1.data[i] == doctest::Approx(pd[i]).epsilon(1e-10));
}

TEST_CASE("zero stems give zero fusion; non-finite input is rejected") {
  const ModelDims d = tiny_dims();
  FusionStem<double> stem(d);
  const Tensor<double> image(3, d.image_size(), d.image_size());
  const DensePromptMap<double> dense{Tensor<double>(3, d.map_size, d.map_size)};
  const auto f = stem.fuse(image, dense);
  for (double v : f.data.values()) REQUIRE(v == 0.0);
  auto bad = image;
  bad[5] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(stem.fuse(bad, dense), Error);
  auto bad_dense = dense;
  bad_dense.channels[7] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(stem.fuse(image, bad_dense), Error);
}

TEST_CASE("fusion stem gradients match finite differences") {
  const ModelDims d = tiny_dims();
  FusionStem<double> stem(d);
  std::mt19937_64 rng(14);
  stem.init(rng);
  const auto image = random_tensor<double>(rng, 3, d.image_size(), d.image_size());
  DensePromptMap<double> dense{random_tensor<double>(rng, 3, d.map_size, d.map_size)};
  const auto r = random_tensor<double>(rng, d.feat_channels, d.map_size, d.map_size);
  nn::ParamList<double> params;
  stem.collect(params);
  nn::zero_grads(params);
  FusionStem<double>::ImageCache ic;
  Tensor<double> hidden;
  stem.image_stem(image, &ic);
  stem.prompt_stem(dense, &hidden);
  stem.image_stem_backward(image, ic, r);
  const auto d_dense = stem.prompt_stem_backward(dense, hidden, r);
  auto loss = [&] { return probe(stem.fuse(image, dense).data, r); };
  auto pp = probe_params(params, rng, 40);
  CHECK(rel_error(pp.analytic, numeric_grad(loss, pp.vars)) < 1e-4);
  auto pd = probe_tensor(dense.channels, d_dense);
  CHECK(rel_error(pd.analytic, numeric_grad(loss, pd.vars)) < 1e-4);
}
