#include <gtest/gtest.h>

#include "kinflow/kinetics.hpp"
#include "kinflow/losses.hpp"
#include "kinflow/model.hpp"
#include "oracles.hpp"

using namespace kinflow;
using namespace kinflow::losses;

TEST(FlowL1, Basics) {
  auto z = torch::zeros({1, 2, 4, 4}), o = torch::ones({1, 2, 4, 4});
  EXPECT_EQ(flow_l1(z, z).item<double>(), 0.0);
  // |du| + |dv| = 2 at every pixel.
  EXPECT_DOUBLE_EQ(flow_l1(o, z).item<double>(), 2.0);
  torch::manual_seed(1);
  auto a = torch::randn({1, 2, 4, 4}), b = torch::randn({1, 2, 4, 4});
  EXPECT_NEAR(flow_l1(a, b).item<double>(), oracle::l1_loop(a[0], b[0]), 1e-6);
}

TEST(FlowL1, MaskAndEmptySet) {
  auto pred = torch::zeros({1, 2, 4, 4}), gt = torch::zeros({1, 2, 4, 4});
  pred.select(1, 0).fill_(10);
  pred[0][0][0][0] = 1;
  auto valid = torch::zeros({1, 1, 4, 4});
  valid[0][0][0][0] = 1;
  EXPECT_DOUBLE_EQ(flow_l1(pred, gt, valid).item<double>(), 1.0);
  EXPECT_THROW(flow_l1(pred, gt, torch::zeros({1, 1, 4, 4})), EmptyValidSet);
}

TEST(SeqL1, HandWeightedSum) {
  auto gt = torch::zeros({1, 2, 4, 4});
  auto p1 = torch::ones({1, 2, 4, 4}), p2 = 2 * torch::ones({1, 2, 4, 4});  // per-pred L1 2 and 4
  EXPECT_DOUBLE_EQ(seq_l1({p1, p2}, gt, 0.5).item<double>(), 0.5 * 2 + 4);
  EXPECT_DOUBLE_EQ(seq_l1({p2}, gt, 0.3).item<double>(), 4.0);
  EXPECT_EQ(seq_l1({gt, gt}, gt, 0.8).item<double>(), 0.0);
  EXPECT_THROW(seq_l1({p1}, gt, 0.0), RangeError);
}

TEST(Perceptual, IdentitySymmetryNonNegativity) {
  torch::manual_seed(2);
  PerceptualExtractor ext(3);
  LossConfig cfg;
  auto a = torch::rand({2, 3, 24, 20}), b = torch::rand({2, 3, 24, 20});
  EXPECT_EQ(perceptual(ext, a, a, cfg).item<double>(), 0.0);
  const double ab = perceptual(ext, a, b, cfg).item<double>(), ba = perceptual(ext, b, a, cfg).item<double>();
  EXPECT_GT(ab, 0.0);
  EXPECT_DOUBLE_EQ(ab, ba);
}

TEST(Perceptual, ExtractorIsFrozenAndSeeded) {
  PerceptualExtractor a(3, RngSeed{4}), b(3, RngSeed{4}), c(3, RngSeed{5});
  EXPECT_TRUE(a->parameters().empty());
  auto x = torch::rand({1, 3, 16, 16});
  auto fa = a->forward(x), fb = b->forward(x), fc = c->forward(x);
  ASSERT_EQ(fa.size(), 5u);
  EXPECT_TRUE(torch::equal(fa.back(), fb.back()));
  EXPECT_FALSE(torch::equal(fa.back(), fc.back()));
}

TEST(OccL1, Basics) {
  auto z = torch::zeros({1, 1, 4, 4}), o = torch::ones({1, 1, 4, 4});
  EXPECT_EQ(occ_l1(z, z).item<double>(), 0.0);
  EXPECT_DOUBLE_EQ(occ_l1(o, z).item<double>(), 1.0);
}

TEST(KineticsLoss, StopGradientOnTeacher) {
  auto teacher = torch::randn({1, 2, 4, 4}).requires_grad_();
  auto student = torch::randn({1, 2, 4, 4}).requires_grad_();
  auto loss = kinetics_loss(teacher, {student}, 0.8);
  EXPECT_NEAR(loss.item<double>(), flow_l1(student, teacher).item<double>(), 1e-6);
  loss.backward();
  EXPECT_FALSE(teacher.grad().defined() && teacher.grad().abs().sum().item<double>() != 0.0);
  EXPECT_GT(student.grad().abs().sum().item<double>(), 0.0);
  auto t = teacher.detach();
  EXPECT_EQ(kinetics_loss(t, {t, t}, 0.8).item<double>(), 0.0);
}

TEST(Totals, WeightSemantics) {
  LossConfig cfg;
  auto one = torch::tensor(1.0), two = torch::tensor(2.0), three = torch::tensor(3.0);
  EXPECT_DOUBLE_EQ(ail_total(one, two, three, cfg).item<double>(), 6.0);
  auto z = torch::tensor(0.0);
  EXPECT_DOUBLE_EQ(ail_total(z, z, z, cfg).item<double>(), 0.0);
  cfg.lambda_occ = 0;
  EXPECT_DOUBLE_EQ(ail_total(one, two, torch::tensor(1e9), cfg).item<double>(), 3.0);
  EXPECT_DOUBLE_EQ(ail_total(one, two, Tensor(), cfg).item<double>(), 3.0);
  cfg.lambda_kin = 0.5;
  EXPECT_DOUBLE_EQ(kgl_total(two, three, cfg).item<double>(), 4.0);
}

TEST(Config, Validation) {
  LossConfig cfg;
  cfg.perc_scales = {0};
  EXPECT_THROW(validate(cfg), ConfigError);
  cfg = {};
  cfg.perc_layers = {7};
  EXPECT_THROW(validate(cfg), ConfigError);
  cfg = {};
  cfg.lambda_perc = -1;
  EXPECT_THROW(validate(cfg), ConfigError);
}

// ---------------------------------------------------------------------------
// Kinetics

TEST(MotionGenerator, Scaling) {
  FlowField f(torch::tensor({4.0f, -2.0f}).view({1, 1, 2}).expand({8, 8, 2}).contiguous());
  auto half = kinetics::motion_generator(f, 0.5);
  EXPECT_TRUE(torch::all(half.uv().select(2, 0) == 2.0f).item<bool>());
  EXPECT_TRUE(torch::all(half.uv().select(2, 1) == -1.0f).item<bool>());
  EXPECT_THROW(kinetics::motion_generator(f, 1.0), RangeError);
  EXPECT_THROW(kinetics::motion_generator(f, 0.0), RangeError);
}

TEST(MotionGenerator, NearIdentityAndComposition) {
  torch::manual_seed(3);
  auto uv = torch::randn({8, 8, 2}) * 10;
  const double eps = 1e-3;
  auto near = kinetics::motion_generator(uv, 1 - eps);
  EXPECT_LE((near - uv).abs().max().item<double>(), eps * uv.abs().max().item<double>() + 1e-5);  // plus one float rounding
  auto ab = kinetics::motion_generator(kinetics::motion_generator(uv, 0.5), 0.6);
  EXPECT_TRUE(torch::allclose(ab, kinetics::motion_generator(uv, 0.3), 1e-6, 1e-6));
}

TEST(MotionGenerator, Detached) {
  auto uv = torch::randn({1, 2, 4, 4}).requires_grad_();
  EXPECT_FALSE(kinetics::motion_generator(uv, 0.5).requires_grad());
}

TEST(SampleAlpha, RangeAndDeterminism) {
  kinetics::KineticsConfig cfg;
  auto r1 = make_engine(RngSeed{1}, 2), r2 = make_engine(RngSeed{1}, 2);
  for (int i = 0; i < 1000; ++i) {
    const double a = kinetics::sample_alpha(cfg, r1);
    EXPECT_GE(a, cfg.lo);
    EXPECT_LE(a, cfg.hi);
    EXPECT_EQ(a, kinetics::sample_alpha(cfg, r2));
  }
  cfg.alpha_sampling = kinetics::AlphaSampling::fixed;
  EXPECT_EQ(kinetics::sample_alpha(cfg, r1), 0.5);
  cfg.alpha_sampling = kinetics::AlphaSampling::uniform;
  cfg.hi = 1.0;
  EXPECT_THROW(kinetics::validate(cfg), ConfigError);
}

TEST(KglStep, ZeroFlowFixedPointAtInit) {
  torch::manual_seed(4);
  model::ModelConfig mc;
  mc.scale = 4;
  mc.dim = 16;
  mc.heads = 2;
  mc.top_k = 4;
  mc.residual_blocks = 2;
  mc.hidden = 16;
  mc.warp_width = 8;
  model::FlowModel m(mc);
  PerceptualExtractor ext(3);
  auto i0 = torch::rand({2, 3, 16, 16}), i1 = torch::rand({2, 3, 16, 16});
  auto r = kinetics::kgl_step(m, ext, i0, i1, 0.5, LossConfig{});
  EXPECT_EQ(r.teacher.abs().max().item<float>(), 0.0f);
  EXPECT_FALSE(r.teacher.requires_grad());
  EXPECT_EQ(r.kinetics.item<double>(), 0.0);
  EXPECT_EQ(r.student.size(), 2u);
  EXPECT_TRUE(r.loss.requires_grad());
  EXPECT_THROW(kinetics::kgl_step(m, ext, i0, i1, 1.5, LossConfig{}), RangeError);
}
