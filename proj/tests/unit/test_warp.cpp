#include <gtest/gtest.h>

#include "kinflow/dataio.hpp"
#include "kinflow/warp.hpp"
#include "oracles.hpp"

using namespace kinflow;
using namespace kinflow::warp;

namespace {

Tensor uniform_nchw(int64_t h, int64_t w, double u, double v) {
  auto f = torch::zeros({1, 2, h, w});
  f.select(1, 0).fill_(u);
  f.select(1, 1).fill_(v);
  return f;
}

}  // namespace

TEST(BackwardWarp, ZeroFlowIsIdentity) {
  Frame f(torch::rand({9, 12, 3}));
  auto out = backward_warp(f, FlowField(torch::zeros({9, 12, 2})));
  EXPECT_TRUE(torch::equal(out.pixels(), f.pixels()));
}

TEST(BackwardWarp, IntegerShift) {
  auto p = torch::rand({1, 1, 8, 10});
  auto out = backward_warp(p, uniform_nchw(8, 10, 2, 0));
  EXPECT_TRUE(torch::equal(out.narrow(3, 0, 8), p.narrow(3, 2, 8)));
  // Clamped at the border.
  EXPECT_TRUE(torch::equal(out.select(3, 9), p.select(3, 9)));
}

TEST(BackwardWarp, MatchesLoopOracle) {
  torch::manual_seed(8);
  auto p = torch::rand({2, 3, 7, 9}, torch::kFloat64), f = torch::randn({2, 2, 7, 9}, torch::kFloat64) * 4;
  auto out = backward_warp(p, f);
  for (int n = 0; n < 2; ++n) EXPECT_TRUE(torch::allclose(out[n], oracle::warp_loop(p[n], f[n]), 0, 1e-12));
}

TEST(BackwardWarp, ShapeMismatch) {
  EXPECT_THROW(backward_warp(torch::rand({1, 1, 8, 8}), torch::zeros({1, 2, 8, 9})), ShapeMismatch);
  EXPECT_THROW(backward_warp(Frame(torch::rand({8, 8, 1})), FlowField(torch::zeros({9, 8, 2}))), ShapeMismatch);
}

TEST(OcclusionOracle, ConsistentPairInterior) {
  auto occ = occlusion_oracle(uniform_nchw(8, 12, 3, 0), uniform_nchw(8, 12, -3, 0));
  EXPECT_EQ(occ.narrow(3, 0, 9).max().item<float>(), 0.0f);
  // Pixels whose target leaves the frame are occluded.
  EXPECT_EQ(occ.narrow(3, 9, 3).min().item<float>(), 1.0f);
}

TEST(OcclusionOracle, InconsistentPairIsOccluded) {
  auto occ = occlusion_oracle(uniform_nchw(8, 12, 1, 0), uniform_nchw(8, 12, 1, 0));
  EXPECT_EQ(occ.narrow(3, 0, 8).min().item<float>(), 1.0f);
}

TEST(OcclusionOracle, MatchesSyntheticTranslationBand) {
  auto r = dataio::synth_pair({dataio::MotionKind::translation, {5, 0}, RngSeed{1}, 3}, 32, 32);
  auto bwd = FlowField(-r.gt_flow->uv());
  auto occ = occlusion_oracle(*r.gt_flow, bwd);
  EXPECT_TRUE(torch::equal(occ.occ(), r.gt_occ->occ()));
}

TEST(FeatureScale, AveragesAndRescales) {
  auto f = uniform_nchw(16, 16, 8, -4);
  auto s = flow_to_feature_scale(f, 2, 2, 8);
  EXPECT_EQ(s.sizes(), (std::vector<int64_t>{1, 2, 2, 2}));
  EXPECT_TRUE(torch::allclose(s.select(1, 0), torch::ones({1, 2, 2})));
  EXPECT_TRUE(torch::allclose(s.select(1, 1), -0.5 * torch::ones({1, 2, 2})));
}

TEST(BinaryIou, Cases) {
  auto a = torch::zeros({4, 4});
  EXPECT_DOUBLE_EQ(binary_iou(a, a), 1.0);
  auto b = a.clone();
  b[0][0] = 1;
  b[0][1] = 1;
  auto c = a.clone();
  c[0][0] = 1;
  EXPECT_DOUBLE_EQ(binary_iou(b, c), 0.5);
}

TEST(WarpNet, ZeroFlowAtInitIsIdentityWithUninformedOcclusion) {
  torch::manual_seed(1);
  WarpNet net(WarpNetConfig{});
  Frame f(torch::rand({16, 16, 3}));
  FlowField zero(torch::zeros({16, 16, 2}));
  auto [warped, occ] = warpnet_forward(net, f, zero, zero);
  EXPECT_TRUE(torch::allclose(warped.pixels(), f.pixels(), 0, 1e-6));
  EXPECT_TRUE(torch::allclose(occ.occ(), torch::full({16, 16}, 0.5), 0, 1e-6));
}

TEST(WarpNet, ModeAndChannelErrors) {
  WarpNetConfig cfg;
  cfg.require_bidirectional = true;
  WarpNet net(cfg);
  auto p = torch::rand({1, 3, 16, 16});
  EXPECT_THROW(net->forward(p, PayloadKind::image, torch::zeros({1, 2, 16, 16})), ModeError);
  EXPECT_THROW(net->forward(torch::rand({1, 1, 16, 16}), PayloadKind::image, torch::zeros({1, 2, 16, 16}),
                            torch::zeros({1, 2, 16, 16})),
               ShapeMismatch);
  EXPECT_THROW(net->forward(p, PayloadKind::image, torch::zeros({1, 2, 16, 16}), torch::zeros({1, 2, 16, 8})),
               ShapeMismatch);
}

TEST(WarpNet, FeaturePayload) {
  WarpNetConfig cfg;
  cfg.feature_channels = 16;
  WarpNet net(cfg);
  FeatureMap m(torch::randn({5, 6, 16}), FeatureStage::raw, 8);
  auto [w, occ] = warpnet_forward(net, m, FlowField(torch::zeros({5, 6, 2})));
  EXPECT_EQ(w.data().sizes(), m.data().sizes());
  EXPECT_EQ(w.stage(), FeatureStage::raw);
  EXPECT_EQ(occ.height(), 5);
}

TEST(WarpNet, GradientReachesFlowInputs) {
  torch::manual_seed(2);
  WarpNet net(WarpNetConfig{});
  auto fwd = (torch::randn({1, 2, 16, 16}) * 2).requires_grad_();
  auto bwd = (torch::randn({1, 2, 16, 16}) * 2).requires_grad_();
  auto out = net->forward(torch::rand({1, 3, 16, 16}), PayloadKind::image, fwd, bwd);
  (out.warped.sum() + out.occ.sum()).backward();
  EXPECT_GT(bwd.grad().abs().sum().item<double>(), 0);
}
