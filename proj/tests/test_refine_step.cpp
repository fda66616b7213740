#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "samref/refine_step.hpp"
#include "support.hpp"

using namespace samref;
using namespace samref::testing;

namespace {

struct Fixture {
  ModelDims d = tiny_dims();
  SamRefModel<double> model{d};
  Tensor<double> image, emb;
  BinaryMask gt;
  std::mt19937_64 rng{71};

  Fixture() {
    model.init(5);
    image = random_tensor<double>(rng, 3, d.image_size(), d.image_size());
    emb = model.backbone.encode(image);
    gt = BinaryMask(d.map_size, d.map_size);
    for (int r = 3; r < 12; ++r)
      for (int c = 4; c < 13; ++c) gt.bits[r * d.map_size + c] = 1;
  }
  Tensor<double> coarse(const InteractionState<double>& s) const {
    return model.backbone.decode(emb, s.clicks, s.prev_logits ? &*s.prev_logits : nullptr);
  }
};

}  // namespace

TEST_CASE("first step skips PatchDiff and sets the baseline") {
  Fixture f;
  const auto prep = prepare_image(f.model.refiner, f.image, f.emb);
  InteractionState<double> s;
  s.clicks.push_back(from_map(7, 8, Polarity::Positive, 1, f.d.image_size(), f.d.map_size));
  const auto r = refine_step(f.model.refiner, prep, s, f.coarse(s), {});
  CHECK(r.decision == SelectorDecision::Skip);
  CHECK_FALSE(r.local.has_value());
  CHECK(r.final_logits == r.refined_g);
  CHECK(s.selector.prev_error_area == r.error_area);
  CHECK(s.prev_mask == binarize_logits(r.final_logits));
}

TEST_CASE("forced skip equals the GlobalDiff output bit-exactly") {
  Fixture f;
  const auto prep = prepare_image(f.model.refiner, f.image, f.emb);
  InteractionState<double> a, b;
  StepOptions skip{RefineMode::Full, SelectorPolicy::AlwaysSkip};
  StepOptions global{RefineMode::GlobalDiffOnly, SelectorPolicy::Dynamic};
  const int S = f.d.image_size(), M = f.d.map_size;
  const std::vector<Click> clicks{from_map(7, 8, Polarity::Positive, 1, S, M),
                                  from_map(1, 1, Polarity::Negative, 2, S, M),
                                  from_map(10, 5, Polarity::Positive, 3, S, M)};
  for (const auto& c : clicks) {
    a.clicks.push_back(c);
    b.clicks.push_back(c);
    const auto ra = refine_step(f.model.refiner, prep, a, f.coarse(a), skip);
    const auto rb = refine_step(f.model.refiner, prep, b, f.coarse(b), global);
    CHECK(ra.final_logits == rb.final_logits);
    CHECK(ra.final_logits == ra.refined_g);
  }
}

TEST_CASE("coarse-only mode passes the backbone through") {
  Fixture f;
  const auto prep = prepare_image(f.model.refiner, f.image, f.emb);
  InteractionState<double> s;
  s.clicks.push_back(from_map(7, 8, Polarity::Positive, 1, f.d.image_size(), f.d.map_size));
  const auto c = f.coarse(s);
  const auto r = refine_step(f.model.refiner, prep, s, c, {RefineMode::CoarseOnly});
  CHECK(r.final_logits == c);
}

TEST_CASE("an open-gate patch step only changes pixels inside the window") {
  Fixture f;
  const auto prep = prepare_image(f.model.refiner, f.image, f.emb);
  InteractionState<double> s;
  const int S = f.d.image_size(), M = f.d.map_size;
  s.clicks.push_back(from_map(7, 8, Polarity::Positive, 1, S, M));
  refine_step(f.model.refiner, prep, s, f.coarse(s), {});
  // make the previous mask disagree with anything the model will produce
  s.prev_mask = BinaryMask(M, M);
  for (int r = 0; r < 5; ++r)
    for (int c = 0; c < 5; ++c) s.prev_mask->bits[r * M + c] = !binarize_logits(*s.prev_logits).at(r, c);
  s.clicks.push_back(from_map(2, 2, Polarity::Negative, 2, S, M));
  const auto r = refine_step(f.model.refiner, prep, s, f.coarse(s), {RefineMode::Full, SelectorPolicy::AlwaysRun});
  REQUIRE(r.window);
  REQUIRE(r.local);
  CHECK(r.window->contains(2, 2));
  for (int y = 0; y < M; ++y)
    for (int x = 0; x < M; ++x)
      if (!r.window->contains(y, x)) REQUIRE(r.final_logits(0, y, x) == r.refined_g(0, y, x));
}

TEST_CASE("stage-2 loss gradients w.r.t. every refiner parameter match finite differences") {
  Fixture f;
  for (auto& b : f.model.refiner.globaldiff.blocks)
    for (auto& g : b.norm2.gamma.value) g = 0.6;
  const int S = f.d.image_size(), M = f.d.map_size;
  InteractionState<double> s0;
  s0.clicks.push_back(from_map(7, 8, Polarity::Positive, 1, S, M));
  {
    const auto prep = prepare_image(f.model.refiner, f.image, f.emb);
    refine_step(f.model.refiner, prep, s0, f.coarse(s0), {});
  }
  // Second click with PatchDiff forced on; the loss covers all seven terms.
  s0.prev_mask = f.gt;
  s0.clicks.push_back(from_map(4, 11, Polarity::Positive, 2, S, M));
  const auto coarse = f.coarse(s0);
  const StepOptions opts{RefineMode::Full, SelectorPolicy::AlwaysRun};
  const LossConfig cfg;

  auto params = f.model.params(ParamGroup::Refiner);
  nn::zero_grads(params);
  auto prep = prepare_image(f.model.refiner, f.image, f.emb, true);
  InteractionState<double> s = s0;
  StepTrace<double> trace;
  const auto r = refine_step(f.model.refiner, prep, s, coarse, opts, &trace);
  REQUIRE(r.local);
  LossGrads<double> grads;
  const auto bundle = refine_step_loss(r, f.gt, cfg, &grads);
  CHECK(bundle.dice_p > 0);
  refine_step_backward(f.model.refiner, prep, r, trace, grads);

  auto loss = [&] {
    const auto p = prepare_image(f.model.refiner, f.image, f.emb);
    InteractionState<double> st = s0;
    const auto rr = refine_step(f.model.refiner, p, st, coarse, opts);
    REQUIRE(rr.window == r.window);
    return refine_step_loss(rr, f.gt, cfg).total();
  };
  auto pp = probe_params(params, f.rng, 12);
  const double err = rel_error(pp.analytic, numeric_grad(loss, pp.vars));
  MESSAGE("refiner rel err " << err << " over " << pp.vars.size() << " entries");
  CHECK(err < 1e-4);
}
