#include <doctest.h>
#include <torch/torch.h>

#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "pat/afp.hpp"
#include "pat/backbones.hpp"
#include "pat/errors.hpp"
#include "pat/losses.hpp"

using namespace pat;
using pat::testing::check_gradient;
using pat::testing::random_stages;

namespace {

StageShapes uniform(const StageShape& s) { return {s, s, s, s}; }

std::vector<StageFeature> as_features(const std::array<torch::Tensor, 4>& ts, Layout layout) {
  std::vector<StageFeature> out;
  for (int s = 0; s < 4; ++s) out.push_back({ts[s], layout, s + 1});
  return out;
}

}  // namespace

TEST_SUITE("afp") {
  TEST_CASE("fusion and prompt blocks start as the identity on the teacher half") {
    for (const auto& shape : {StageShape::spatial(5, 4, 4), StageShape::tokens(9, 6)}) {
      FusionBlock fb(shape);
      PromptBlock pb(shape);
      auto t = torch::randn(shape.with_batch(3));
      auto feedback = torch::randn(shape.with_batch(3));
      torch::NoGradGuard g;
      CHECK(torch::equal(pb(fb(feedback, t)), t));
    }
  }

  TEST_CASE("identity at init for every zoo teacher") {
    torch::NoGradGuard g;
    for (const char* name : {"tiny_cnn", "tiny_vit", "tiny_mixer"}) {
      auto teacher = build_backbone({name, 10, 32}, 1);
      freeze(*teacher);
      auto student = expected_stage_shapes({"tiny_vit", 10, 32});
      AdaptiveFeedbackPrompts afp(AfpConfig{}, teacher->stage_shapes(), student);
      FeedbackBuffer buffer;
      auto x = torch::randn({4, 3, 32, 32});
      auto clean = teacher->forward_stages(x);
      // an initialized buffer makes the feedback nonzero; the FB still ignores it
      buffer.update(clean.stages, random_stages(student, 4));
      auto adapted = teacher_forward_adapted(*teacher, x, *afp, buffer);
      for (int s = 0; s < 4; ++s) CHECK(torch::equal(adapted.stages[s].data, clean.stages[s].data));
      CHECK(torch::equal(adapted.logits, clean.logits));
      CHECK(reg_loss(clean.logits, adapted.logits, 1.0).item<double>() <= 1e-12);
    }
  }

  TEST_CASE("uninitialized buffer gives exact zero feedback") {
    AdaptiveFeedbackPrompts afp(AfpConfig{}, uniform(StageShape::spatial(2, 2, 2)), uniform(StageShape::spatial(3, 4, 4)));
    FeedbackBuffer buffer;
    for (int s = 1; s <= 4; ++s) {
      auto fb = afp->compute_feedback(buffer, s, 5);
      CHECK(fb.sizes().vec() == std::vector<int64_t>{5, 2, 2, 2});
      CHECK(fb.abs().max().item<float>() == 0.0f);
    }
  }

  TEST_CASE("scalar toy: prev student 3, prev teacher 1, identity projector gives 2") {
    const auto one = StageShape::spatial(1, 1, 1);
    AdaptiveFeedbackPrompts afp(AfpConfig{}, uniform(one), uniform(one));
    for (int s = 1; s <= 4; ++s) afp->student_projector(s)->set_identity();
    FeedbackBuffer buffer;
    std::array<torch::Tensor, 4> t, st;
    for (int s = 0; s < 4; ++s) {
      t[s] = torch::ones({1, 1, 1, 1});
      st[s] = torch::full({1, 1, 1, 1}, 3.0);
    }
    buffer.update(as_features(t, Layout::kSpatial), as_features(st, Layout::kSpatial));
    CHECK(afp->compute_feedback(buffer, 1, 1).item<float>() == 2.0f);

    // matching projection and teacher cancel
    buffer.update(as_features(t, Layout::kSpatial), as_features(t, Layout::kSpatial));
    CHECK(afp->compute_feedback(buffer, 2, 1).item<float>() == 0.0f);
  }

  TEST_CASE("scalar toy with hand-set fusion weights") {
    const auto one = StageShape::spatial(1, 1, 1);
    AdaptiveFeedbackPrompts afp(AfpConfig{{1}, true}, uniform(one), uniform(one));
    {
      torch::NoGradGuard g;
      afp->fusion(1)->conv->weight.copy_(torch::tensor({0.5f, 2.0f}).reshape({1, 2, 1, 1}));
      afp->fusion(1)->conv->bias.fill_(0.25f);
    }
    auto out = afp->afp_stage(torch::full({1, 1, 1, 1}, 3.0), torch::full({1, 1, 1, 1}, 2.0), 1);
    CHECK(out.item<float>() == doctest::Approx(0.5 * 2 + 2.0 * 3 + 0.25));
  }

  TEST_CASE("perturbed prompt branch adds branch(FB(0 ++ T))") {
    const auto shape = StageShape::spatial(3, 4, 4);
    AdaptiveFeedbackPrompts afp(AfpConfig{}, uniform(shape), uniform(shape));
    {
      torch::NoGradGuard g;
      afp->prompt(2)->conv2->weight.normal_();
    }
    auto t = torch::randn({2, 3, 4, 4});
    auto zero = torch::zeros_like(t);
    torch::NoGradGuard g;
    auto out = afp->afp_stage(t, zero, 2);
    auto expected = t + afp->prompt(2)->branch(afp->fusion(2)(zero, t));
    CHECK(torch::allclose(out, expected, 0, 1e-6));
    CHECK(pat::testing::max_abs_diff(out, t) > 1e-4);
  }

  TEST_CASE("perturbing PB_2 changes stages 2-4 and the head, not stage 1") {
    auto teacher = build_backbone({"tiny_cnn", 10, 16}, 2);
    freeze(*teacher);
    AdaptiveFeedbackPrompts afp(AfpConfig{}, teacher->stage_shapes(), teacher->stage_shapes());
    {
      torch::NoGradGuard g;
      afp->prompt(2)->conv2->weight.normal_(0, 0.1);
    }
    FeedbackBuffer buffer;
    auto x = torch::randn({2, 3, 16, 16});
    torch::NoGradGuard g;
    auto clean = teacher->forward_stages(x);
    auto adapted = teacher_forward_adapted(*teacher, x, *afp, buffer);
    CHECK(torch::equal(adapted.stages[0].data, clean.stages[0].data));
    for (int s = 1; s < 4; ++s) CHECK(pat::testing::max_abs_diff(adapted.stages[s].data, clean.stages[s].data) > 0);
    CHECK(pat::testing::max_abs_diff(adapted.logits, clean.logits) > 0);
  }

  TEST_CASE("no active stages reproduces the plain pass") {
    auto teacher = build_backbone({"tiny_vit", 10, 16}, 4);
    freeze(*teacher);
    AdaptiveFeedbackPrompts afp(AfpConfig{{}, true}, teacher->stage_shapes(), teacher->stage_shapes());
    CHECK(parameter_count(*afp) == 0);
    FeedbackBuffer buffer;
    auto x = torch::randn({2, 3, 16, 16});
    torch::NoGradGuard g;
    auto clean = teacher->forward_stages(x);
    auto adapted = teacher_forward_adapted(*teacher, x, *afp, buffer);
    for (int s = 0; s < 4; ++s) CHECK(torch::equal(adapted.stages[s].data, clean.stages[s].data));
    CHECK(torch::equal(adapted.logits, clean.logits));
    CHECK_THROWS_AS(afp->compute_feedback(buffer, 1, 2), ContractError);
  }

  TEST_CASE("adapted pass requires a frozen teacher") {
    auto teacher = build_backbone({"tiny_cnn", 10, 16}, 0);
    AdaptiveFeedbackPrompts afp(AfpConfig{}, teacher->stage_shapes(), teacher->stage_shapes());
    FeedbackBuffer buffer;
    CHECK_THROWS_AS(teacher_forward_adapted(*teacher, torch::randn({1, 3, 16, 16}), *afp, buffer), ContractError);
  }

  TEST_CASE("afp_stage rejects misaligned feedback") {
    const auto shape = StageShape::spatial(3, 4, 4);
    AdaptiveFeedbackPrompts afp(AfpConfig{}, uniform(shape), uniform(shape));
    CHECK_THROWS_AS(afp->afp_stage(torch::randn({2, 3, 4, 4}), torch::randn({2, 3, 2, 2}), 1), ShapeError);
  }

  TEST_CASE("buffer: detached, single slot, contract") {
    const auto shape = StageShape::tokens(4, 3);
    FeedbackBuffer buffer;
    auto a = random_stages(uniform(shape), 2);
    auto b = random_stages(uniform(shape), 2);
    for (auto& f : a) f.data.requires_grad_(true);
    buffer.update(a, a);
    CHECK(buffer.initialized);
    for (int s = 0; s < 4; ++s) {
      CHECK_FALSE(buffer.prev_teacher[s].requires_grad());
      CHECK_FALSE(buffer.prev_student[s].grad_fn());
    }
    buffer.update(b, b);
    for (int s = 0; s < 4; ++s) CHECK(torch::equal(buffer.prev_teacher[s], b[s].data));
    // later in-place edits of the sources do not reach the buffer
    {
      torch::NoGradGuard g;
      b[0].data.add_(1.0);
    }
    CHECK_FALSE(torch::equal(buffer.prev_teacher[0], b[0].data));
    a.pop_back();
    CHECK_THROWS_AS(buffer.update(a, b), ContractError);
    buffer.reset();
    CHECK_FALSE(buffer.initialized);
  }

  TEST_CASE("feedback modes: batch mean broadcasts, per sample truncates or pads") {
    const auto shape = StageShape::spatial(2, 2, 2);
    FeedbackBuffer buffer;
    auto t = random_stages(uniform(shape), 3);
    auto s = random_stages(uniform(shape), 3);
    buffer.update(t, s);

    AfpConfig mean_cfg;
    AdaptiveFeedbackPrompts mean_afp(mean_cfg, uniform(shape), uniform(shape));
    mean_afp->student_projector(1)->set_identity();
    auto fb = mean_afp->compute_feedback(buffer, 1, 5);
    CHECK(fb.sizes().vec() == std::vector<int64_t>{5, 2, 2, 2});
    auto expected = (s[0].data - t[0].data).mean(0);
    for (int i = 0; i < 5; ++i) CHECK(torch::allclose(fb[i], expected, 0, 1e-6));

    AfpConfig per_cfg;
    per_cfg.mode = FeedbackMode::kPerSample;
    AdaptiveFeedbackPrompts per_afp(per_cfg, uniform(shape), uniform(shape));
    per_afp->student_projector(1)->set_identity();
    auto diff = s[0].data - t[0].data;
    auto longer = per_afp->compute_feedback(buffer, 1, 5);
    CHECK(torch::allclose(longer.slice(0, 0, 3), diff, 0, 1e-6));
    CHECK(longer.slice(0, 3, 5).abs().max().item<float>() == 0.0f);
    CHECK(torch::allclose(per_afp->compute_feedback(buffer, 1, 2), diff.slice(0, 0, 2), 0, 1e-6));

    AfpConfig off;
    off.use_feedback = false;
    AdaptiveFeedbackPrompts off_afp(off, uniform(shape), uniform(shape));
    CHECK(off_afp->compute_feedback(buffer, 1, 3).abs().max().item<float>() == 0.0f);
  }

  TEST_CASE("gradients never reach buffered activations") {
    const auto shape = StageShape::spatial(2, 2, 2);
    torch::manual_seed(0);
    AdaptiveFeedbackPrompts afp(AfpConfig{}, uniform(shape), uniform(StageShape::spatial(3, 2, 2)));
    afp->to(torch::kFloat64);
    {
      torch::NoGradGuard g;
      afp->prompt(1)->conv2->weight.normal_();
      afp->fusion(1)->conv->weight.normal_();
    }
    FeedbackBuffer buffer;
    buffer.update(random_stages(uniform(shape), 2, torch::kFloat64),
                  random_stages(uniform(StageShape::spatial(3, 2, 2)), 2, torch::kFloat64));
    buffer.prev_student[0].requires_grad_(true);
    auto teacher = torch::randn({2, 2, 2, 2}, torch::kFloat64);
    auto loss = [&] { return afp->afp_stage(teacher, afp->compute_feedback(buffer, 1, 2, teacher.options()), 1).pow(2).sum(); };
    auto l0 = loss();
    auto grads = torch::autograd::grad({l0}, {buffer.prev_student[0]}, {}, false, false, true);
    CHECK_FALSE(grads[0].defined());
    {
      torch::NoGradGuard g;
      buffer.prev_student[0].add_(0.1);
    }
    CHECK(std::abs(loss().item<double>() - l0.item<double>()) > 1e-8);
  }

  TEST_CASE("finite differences through afp_stage (2 channels, 2x2, float64)") {
    for (const auto& tshape : {StageShape::spatial(2, 2, 2), StageShape::tokens(4, 2)}) {
      const auto sshape = StageShape::spatial(3, 2, 2);
      torch::manual_seed(7);
      AdaptiveFeedbackPrompts afp(AfpConfig{}, uniform(tshape), uniform(sshape));
      afp->to(torch::kFloat64);
      {
        torch::NoGradGuard g;
        for (auto& p : afp->parameters()) p.add_(0.3 * torch::randn_like(p));
      }
      FeedbackBuffer buffer;
      buffer.update(random_stages(uniform(tshape), 2, torch::kFloat64), random_stages(uniform(sshape), 2, torch::kFloat64));
      auto teacher = torch::randn(tshape.with_batch(2), torch::kFloat64).requires_grad_(true);
      auto target = torch::randn(tshape.with_batch(2), torch::kFloat64);
      auto loss = [&] {
        auto fb = afp->compute_feedback(buffer, 3, 2, teacher.options());
        return (afp->afp_stage(teacher, fb, 3) - target).pow(2).sum();
      };
      double worst = 0;
      for (auto& p : afp->parameters()) {
        auto r = check_gradient(loss, p, 8, 1e-5, 3);
        worst = std::max(worst, r.max_rel_error);
      }
      worst = std::max(worst, check_gradient(loss, teacher, 8, 1e-5, 4).max_rel_error);
      CHECK(worst <= 1e-4);
    }
  }

  TEST_CASE("config and closed-form count") {
    CHECK_THROWS_AS((AfpConfig{{0, 2}, true}.validate()), ConfigError);
    CHECK_THROWS_AS((AfpConfig{{2, 2}, true}.validate()), ConfigError);
    CHECK_THROWS_AS((AfpConfig{{5}, true}.validate()), ConfigError);
    const char* zoo[] = {"tiny_cnn", "tiny_vit", "tiny_mixer"};
    for (const char* t : zoo) {
      for (const char* s : zoo) {
        auto ts = expected_stage_shapes({t, 10, 32});
        auto ss = expected_stage_shapes({s, 10, 32});
        for (const auto& cfg : {AfpConfig{}, AfpConfig{{2, 3}, true}, AfpConfig{{1, 4}, false}}) {
          AdaptiveFeedbackPrompts afp(cfg, ts, ss);
          CHECK(parameter_count(*afp) == afp_parameter_count(cfg, ts, ss));
        }
      }
    }
  }
}
