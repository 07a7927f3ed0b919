#include <gtest/gtest.h>

#include "kinflow/core.hpp"

using namespace kinflow;

namespace {

template <typename F>
std::string invariant_of(F&& f) {
  try {
    f();
  } catch (const InvariantViolation& e) {
    return e.invariant();
  }
  return "<none>";
}

}  // namespace

TEST(Frame, ZerosAreValid) {
  Frame f(torch::zeros({8, 8, 3}));
  EXPECT_NO_THROW(validate(f));
}

TEST(Frame, NanIsRejectedWithIndex) {
  auto p = torch::zeros({8, 8, 3});
  p[2][5][1] = std::nan("");
  Frame f(p);
  try {
    validate(f);
    FAIL() << "expected InvariantViolation";
  } catch (const InvariantViolation& e) {
    EXPECT_EQ(e.invariant(), "finite");
    EXPECT_EQ(e.index(), (std::vector<int64_t>{2, 5, 1}));
  }
}

TEST(Frame, RangeAndChannels) {
  EXPECT_NE(invariant_of([] { validate(Frame(torch::full({8, 8, 3}, 1.5))); }), "<none>");
  EXPECT_EQ(invariant_of([] { validate(Frame(torch::zeros({8, 8, 2}))); }), "channels in {1, 3}");
  EXPECT_EQ(invariant_of([] { validate(Frame(torch::zeros({4, 8, 3}))); }), "H >= 8 and W >= 8");
}

TEST(FlowField, LastDimMustBeTwo) {
  EXPECT_EQ(invariant_of([] { validate(FlowField(torch::zeros({8, 8, 3}))); }), "last dim = 2");
}

TEST(FlowField, MaskMustBeBooleanHw) {
  EXPECT_EQ(invariant_of([] { validate(FlowField(torch::zeros({8, 8, 2}), torch::ones({8, 8}))); }),
            "valid mask is boolean");
  EXPECT_EQ(invariant_of([] {
              validate(FlowField(torch::zeros({8, 8, 2}), torch::ones({8, 7}, torch::kBool)));
            }),
            "valid mask shape = [H, W]");
  FlowField dense(torch::zeros({8, 8, 2}));
  EXPECT_TRUE(dense.valid_or_all().all().item<bool>());
}

TEST(FlowSequence, ItemsShareSize) {
  EXPECT_THROW(validate(FlowSequence()), InvariantViolation);
  EXPECT_THROW(FlowSequence().last(), InvariantViolation);
  FlowSequence s({FlowField(torch::zeros({8, 8, 2})), FlowField(torch::zeros({8, 9, 2}))});
  EXPECT_EQ(invariant_of([&] { validate(s); }), "sequence items share H, W");
}

TEST(FeatureMap, ScaleContract) {
  FeatureMap m(torch::zeros({3, 2, 4}), FeatureStage::raw, 8);
  EXPECT_NO_THROW(validate(m, 17, 16));
  EXPECT_THROW(validate(m, 16, 16), InvariantViolation);
}

TEST(OcclusionMap, BinaryThreshold) {
  auto o = torch::tensor({0.2f, 0.5f, 0.51f, 1.0f}).view({2, 2});
  OcclusionMap m(o);
  auto b = m.binary();
  EXPECT_FALSE(b[0][0].item<bool>());
  EXPECT_FALSE(b[0][1].item<bool>());
  EXPECT_TRUE(b[1][0].item<bool>());
  EXPECT_TRUE(b[1][1].item<bool>());
}

TEST(Errors, KindsAndExitCodes) {
  EXPECT_EQ(ConfigError("x").kind(), "ConfigError");
  EXPECT_EQ(ConfigError("x").exit_code(), kExitConfig);
  EXPECT_EQ(UsageError("x").exit_code(), kExitUsage);
  EXPECT_EQ(FormatError("x").exit_code(), kExitIo);
  EXPECT_EQ(ShapeMismatch("x").exit_code(), kExitRuntime);
}

TEST(Layout, RoundTrip) {
  auto uv = torch::randn({9, 11, 2});
  auto back = flow_from_nchw(to_nchw(FlowField(uv)), 0);
  EXPECT_TRUE(torch::equal(back.uv(), uv));
  EXPECT_EQ(to_nchw(FlowField(uv)).sizes(), (std::vector<int64_t>{1, 2, 9, 11}));
}

TEST(Seeding, EnginesAreIndependentStreams) {
  auto a = make_engine(RngSeed{1}, 0), b = make_engine(RngSeed{1}, 0), c = make_engine(RngSeed{1}, 1);
  EXPECT_EQ(a(), b());
  EXPECT_NE(make_engine(RngSeed{1}, 0)(), c());
}
