#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "kinflow/cli.hpp"
#include "kinflow/dataio.hpp"
#include "kinflow/metrics.hpp"

using namespace kinflow;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "kinflow");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path fresh(const std::string& name) {
  auto d = fs::temp_directory_path() / "kinflow_unit" / "cli" / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

void write(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

// Small model and a handful of steps so the CLI tests stay fast.
std::string train_config(const std::string& phase, int steps) {
  return R"({"phase": ")" + phase + R"(", "steps": )" + std::to_string(steps) +
         R"(, "batch": 2, "lr_max": 4e-4, "weight_decay": 1e-4, "seed": 1,
             "train_manifests": ["train.jsonl"], "eval_manifests": ["train.jsonl"],
             "model": {"scale": 4, "dim": 16, "heads": 2, "top_k": 4, "residual_blocks": 2, "hidden": 16,
                       "warp_width": 8}})";
}

}  // namespace

TEST(Cli, HelpAndUsageErrors) {
  EXPECT_EQ(run({"--help"}).code, 0);
  auto none = run({});
  EXPECT_EQ(none.code, kExitUsage);
  EXPECT_EQ(none.err.rfind("error UsageError:", 0), 0u);
  EXPECT_EQ(run({"frobnicate"}).code, kExitUsage);
  EXPECT_EQ(run({"eval", "--checkpoint", "oracle"}).code, kExitUsage);  // missing --manifest
}

TEST(Cli, SynthWritesRecordsDeterministically) {
  const auto d = fresh("synth");
  auto r = run({"--seed", "4", "synth", "--out", (d / "a.jsonl").string(), "--count", "10", "--size", "16x24"});
  ASSERT_EQ(r.code, 0) << r.err;
  auto entries = dataio::read_manifest(d / "a.jsonl");
  ASSERT_EQ(entries.size(), 10u);
  auto recs = dataio::load_records(entries);
  EXPECT_EQ(recs[3].frame0.height(), 16);
  EXPECT_EQ(recs[3].frame0.width(), 24);
  EXPECT_TRUE(recs[3].gt_flow && recs[3].gt_occ);

  ASSERT_EQ(run({"--seed", "4", "synth", "--out", (d / "b.jsonl").string(), "--count", "10", "--size", "16x24"}).code,
            0);
  for (const char* f : {"00000_0.png", "00004_1.png", "00009.flo", "00007_occ.png"})
    EXPECT_EQ(slurp(d / "a_data" / f), slurp(d / "b_data" / f)) << f;
}

TEST(Cli, SynthRejectsUnknownKind) {
  const auto d = fresh("synth_bad");
  auto r = run({"synth", "--out", (d / "a.jsonl").string(), "--kinds", "translation,shear"});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("shear"), std::string::npos);
}

TEST(Cli, TrainConfigErrorsAndPreconditions) {
  const auto d = fresh("train_err");
  write(d / "bad.json", R"({"phase": "AIL", "steps": 10})");
  auto r = run({"train", "--config", (d / "bad.json").string(), "--out-dir", d.string()});
  EXPECT_EQ(r.code, kExitConfig);
  EXPECT_NE(r.err.find("error ConfigError"), std::string::npos);
  EXPECT_NE(r.err.find("'batch'"), std::string::npos);

  write(d / "kgl.json", train_config("KGL", 2));
  r = run({"train", "--config", (d / "kgl.json").string(), "--out-dir", d.string()});
  EXPECT_EQ(r.code, kExitConfig);
  EXPECT_NE(r.err.find("error PreconditionError"), std::string::npos);

  r = run({"train", "--config", (d / "missing.json").string()});
  EXPECT_EQ(r.code, kExitIo);
}

TEST(Cli, EndToEnd) {
  const auto d = fresh("e2e");
  ASSERT_EQ(run({"synth", "--out", (d / "train.jsonl").string(), "--count", "4", "--size", "16x16"}).code, 0);
  write(d / "ail.json", train_config("AIL", 4));
  write(d / "kgl.json", train_config("KGL", 2));
  const auto out = (d / "out").string();

  // AIL, interrupted and resumed; the log then holds every step once.
  auto r = run({"train", "--config", (d / "ail.json").string(), "--out-dir", out, "--stop-after", "2"});
  ASSERT_EQ(r.code, 0) << r.err;
  r = run({"train", "--config", (d / "ail.json").string(), "--out-dir", out, "--resume"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("at step 4"), std::string::npos);
  std::istringstream log(slurp(d / "out" / "ail_log.jsonl"));
  int lines = 0;
  for (std::string l; std::getline(log, l);) ++lines;
  EXPECT_EQ(lines, 4);

  // KGL from the AIL checkpoint.
  r = run({"train", "--config", (d / "kgl.json").string(), "--out-dir", out, "--init", out + "/ail.ckpt"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(d / "out" / "kgl.ckpt"));
  EXPECT_TRUE(fs::exists(d / "out" / "kgl_log.jsonl"));

  // Evaluation: the oracle stub is perfect and the report parses back.
  r = run({"eval", "--checkpoint", "oracle", "--manifest", (d / "train.jsonl").string(), "--report",
           (d / "oracle.txt").string(), "--csv", (d / "oracle.csv").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(metrics::report_from_text(slurp(d / "oracle.txt")).epe, 0.0);
  EXPECT_EQ(slurp(d / "oracle.csv").rfind(metrics::csv_header(), 0), 0u);
  r = run({"eval", "--checkpoint", out + "/kgl.ckpt", "--manifest", (d / "train.jsonl").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_GT(metrics::report_from_text(r.out).n_valid, 0);

  // Inference writes a readable .flo and a colour PNG.
  r = run({"infer", "--checkpoint", out + "/ail.ckpt", "--frame0", (d / "train_data/00000_0.png").string(), "--frame1",
           (d / "train_data/00000_1.png").string(), "--flo-out", (d / "p.flo").string(), "--viz-out",
           (d / "p.png").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(dataio::read_flo(d / "p.flo").height(), 16);
  EXPECT_TRUE(fs::exists(d / "p.png"));

  // WarpNet occlusion map is a [0, 1] grayscale image.
  r = run({"occ", "--checkpoint", out + "/ail.ckpt", "--frame0", (d / "train_data/00000_0.png").string(), "--frame1",
           (d / "train_data/00000_1.png").string(), "--out", (d / "occ.png").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("iou_vs_oracle"), std::string::npos);
  auto occ = dataio::read_occlusion_png(d / "occ.png").occ();
  EXPECT_GE(occ.min().item<float>(), 0.0f);
  EXPECT_LE(occ.max().item<float>(), 1.0f);

  // Resuming a phase from the other phase's checkpoint is refused.
  fs::copy_file(d / "out" / "ail.ckpt", d / "out" / "kgl.ckpt", fs::copy_options::overwrite_existing);
  r = run({"train", "--config", (d / "kgl.json").string(), "--out-dir", out, "--resume"});
  EXPECT_EQ(r.code, kExitConfig);
}

TEST(Cli, OracleOcclusionOnConsistentFlowsIsBlack) {
  const auto d = fresh("occ");
  // Zero flow both ways: every pixel consistent and in frame.
  dataio::write_flo(FlowField(torch::zeros({12, 12, 2})), d / "f.flo");
  auto r = run({"occ", "--checkpoint", "oracle", "--fwd", (d / "f.flo").string(), "--bwd", (d / "f.flo").string(),
                "--out", (d / "o.png").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("occluded_fraction 0"), std::string::npos);
  EXPECT_EQ(dataio::read_occlusion_png(d / "o.png").occ().max().item<float>(), 0.0f);
  EXPECT_EQ(run({"occ", "--checkpoint", "oracle", "--out", (d / "o.png").string()}).code, kExitUsage);
}

TEST(Cli, CorruptCheckpointIsIoKind) {
  const auto d = fresh("corrupt");
  write(d / "x.ckpt", "garbage");
  ASSERT_EQ(run({"synth", "--out", (d / "m.jsonl").string(), "--count", "1", "--size", "16x16"}).code, 0);
  auto r = run({"eval", "--checkpoint", (d / "x.ckpt").string(), "--manifest", (d / "m.jsonl").string()});
  EXPECT_EQ(r.code, kExitIo);
  EXPECT_NE(r.err.find("error FormatError"), std::string::npos);
}
