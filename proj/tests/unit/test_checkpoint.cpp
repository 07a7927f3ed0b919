#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "kinflow/checkpoint.hpp"

using namespace kinflow;
using namespace kinflow::checkpoint;
namespace fs = std::filesystem;

namespace {

fs::path dir() {
  auto d = fs::temp_directory_path() / "kinflow_unit" / "ckpt";
  fs::create_directories(d);
  return d;
}

Checkpoint sample() {
  Checkpoint c;
  c.architecture = "arch";
  c.config_json = "{\"a\": 1}";
  c.phase = "AIL";
  c.step = 17;
  c.seed = 99;
  c.optimizer = std::string("\0bin\xff", 5);
  c.data_state = "1 2 3";
  c.rng_state = "42";
  c.params["w"] = torch::randn({3, 4});
  c.params["d"] = torch::randn({2}, torch::kFloat64);
  c.params["i"] = torch::arange(5);
  c.params["b"] = torch::tensor({true, false});
  c.params["scalar"] = torch::tensor(2.5f);
  return c;
}

}  // namespace

TEST(Checkpoint, RoundTripIsExact) {
  const auto c = sample();
  save(c, dir() / "a.ckpt");
  EXPECT_FALSE(fs::exists(dir() / "a.ckpt.tmp"));
  const auto back = load(dir() / "a.ckpt");
  EXPECT_EQ(back.architecture, c.architecture);
  EXPECT_EQ(back.config_json, c.config_json);
  EXPECT_EQ(back.phase, c.phase);
  EXPECT_EQ(back.step, c.step);
  EXPECT_EQ(back.seed, c.seed);
  EXPECT_EQ(back.optimizer, c.optimizer);
  EXPECT_EQ(back.data_state, c.data_state);
  EXPECT_EQ(back.rng_state, c.rng_state);
  ASSERT_EQ(back.params.size(), c.params.size());
  for (const auto& [k, v] : c.params) {
    EXPECT_EQ(back.params.at(k).scalar_type(), v.scalar_type()) << k;
    EXPECT_TRUE(torch::equal(back.params.at(k), v)) << k;
  }
}

TEST(Checkpoint, RejectsBadFiles) {
  EXPECT_THROW(load(dir() / "missing.ckpt"), IoError);
  {
    std::ofstream os(dir() / "junk.ckpt", std::ios::binary);
    os << "NOPE and some more bytes";
  }
  EXPECT_THROW(load(dir() / "junk.ckpt"), FormatError);
  save(sample(), dir() / "t.ckpt");
  fs::resize_file(dir() / "t.ckpt", fs::file_size(dir() / "t.ckpt") - 7);
  EXPECT_THROW(load(dir() / "t.ckpt"), FormatError);
  Checkpoint c;
  c.params["h"] = torch::zeros({2}, torch::kHalf);
  EXPECT_THROW(save(c, dir() / "h.ckpt"), FormatError);
}

TEST(Checkpoint, SnapshotAndCopyInto) {
  torch::nn::Linear a(3, 2), b(3, 2);
  copy_into(*b, snapshot(*a));
  EXPECT_TRUE(torch::equal(a->weight, b->weight));
  EXPECT_TRUE(torch::equal(a->bias, b->bias));
  auto s = snapshot(*a);
  s.erase("bias");
  EXPECT_THROW(copy_into(*b, s), FormatError);
  s = snapshot(*a);
  s["weight"] = torch::zeros({2, 2});
  EXPECT_THROW(copy_into(*b, s), FormatError);
}
