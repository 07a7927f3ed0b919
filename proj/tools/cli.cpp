#include "kinflow/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <regex>

#include <CLI11.hpp>

#include "kinflow/checkpoint.hpp"
#include "kinflow/dataio.hpp"
#include "kinflow/flowviz.hpp"
#include "kinflow/metrics.hpp"
#include "kinflow/model.hpp"
#include "kinflow/trainer.hpp"
#include "kinflow/warp.hpp"

namespace kinflow::cli {

namespace fs = std::filesystem;

namespace {

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  std::replace(s.begin(), s.end(), '\r', ' ');
  return s;
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  if (!os) throw IoError("failed writing " + path.string());
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  fs::path out;
  int64_t count = 10;
  std::vector<std::string> kinds{"translation"};
  std::string size = "64x64";
  int64_t channels = 3;
};

int cmd_synth(const SynthArgs& a, uint64_t seed, std::ostream& out) {
  std::smatch m;
  static const std::regex size_re(R"((\d+)x(\d+))");
  if (!std::regex_match(a.size, m, size_re)) throw UsageError("--size must look like HxW, got '" + a.size + "'");
  const int64_t h = std::stoll(m[1]), w = std::stoll(m[2]);
  std::vector<dataio::MotionKind> kinds;
  for (const auto& k : a.kinds) {
    try {
      kinds.push_back(dataio::motion_kind_from_string(k));
    } catch (const SpecError&) {
      throw UsageError("unknown motion kind '" + k + "' (translation, rotation, zoom, affine)");
    }
  }
  if (kinds.empty()) throw UsageError("--kinds is empty");

  const fs::path dir = a.out.parent_path();
  const std::string data_name = a.out.stem().string() + "_data";
  std::error_code ec;
  fs::create_directories(dir.empty() ? fs::path(data_name) : dir / data_name, ec);
  if (ec) throw IoError("cannot create " + (dir / data_name).string() + ": " + ec.message());

  auto rng = make_engine(RngSeed{seed}, 0x5e7);
  std::vector<dataio::ManifestEntry> entries;
  for (int64_t i = 0; i < a.count; ++i) {
    const auto kind = kinds[static_cast<std::size_t>(i) % kinds.size()];
    const auto spec = dataio::random_spec(kind, h, w, rng, a.channels);
    char id[24];
    std::snprintf(id, sizeof id, "%05lld", static_cast<long long>(i));
    const auto rec = dataio::synth_pair(spec, h, w, id);
    const fs::path rel = fs::path(data_name);
    dataio::ManifestEntry e;
    e.id = id;
    e.height = h;
    e.width = w;
    e.frame0 = rel / (std::string(id) + "_0.png");
    e.frame1 = rel / (std::string(id) + "_1.png");
    e.flow = rel / (std::string(id) + ".flo");
    e.occ = rel / (std::string(id) + "_occ.png");
    dataio::write_frame_png(rec.frame0, dir / e.frame0);
    dataio::write_frame_png(rec.frame1, dir / e.frame1);
    dataio::write_flo(*rec.gt_flow, dir / *e.flow);
    dataio::write_occlusion_png(*rec.gt_occ, dir / *e.occ);
    entries.push_back(e);
  }
  dataio::write_manifest(entries, a.out);
  out << "wrote " << a.count << " records to " << a.out.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  fs::path config;
  std::string phase;
  bool resume = false;
  fs::path init;
  fs::path out_dir = ".";
  int64_t stop_after = -1;
  int64_t print_every = 100;
};

int cmd_train(const TrainArgs& a, std::optional<uint64_t> seed, std::ostream& out) {
  auto cfg = trainer::load_config(a.config);
  if (!a.phase.empty()) cfg.phase = trainer::phase_from_string(a.phase);
  if (seed) cfg.seed = RngSeed{*seed};

  const auto tag = lower(trainer::to_string(cfg.phase));
  const fs::path ckpt_path = a.out_dir / (tag + ".ckpt");
  const fs::path log_path = a.out_dir / (tag + "_log.jsonl");
  if (a.resume && !fs::exists(ckpt_path))
    throw PreconditionError("--resume given but " + ckpt_path.string() + " does not exist");
  if (!a.resume && cfg.phase == trainer::Phase::kgl && a.init.empty())
    throw PreconditionError("KGL starts from an AIL checkpoint; pass --init <checkpoint>");
  std::error_code ec;
  fs::create_directories(a.out_dir, ec);
  if (ec) throw IoError("cannot create " + a.out_dir.string() + ": " + ec.message());

  auto train = trainer::load_manifests(cfg.train_manifests);
  auto eval = trainer::load_manifests(cfg.eval_manifests);
  trainer::Trainer t(cfg, std::move(train), std::move(eval));
  if (a.resume) {
    t.resume(checkpoint::load(ckpt_path));
  } else {
    if (cfg.phase == trainer::Phase::kgl) t.load_weights(checkpoint::load(a.init));
    write_text(log_path, "");  // fresh run, fresh log
  }

  trainer::RunOptions opts;
  opts.log_path = log_path;
  opts.checkpoint_path = ckpt_path;
  opts.stop_after = a.stop_after;
  opts.on_step = [&](const trainer::StepRecord& r) {
    if (a.print_every > 0 && ((r.step + 1) % a.print_every == 0 || r.eval))
      out << trainer::to_json_line(r) << "\n";
  };
  trainer::run(t, opts);
  out << "checkpoint " << ckpt_path.string() << " at step " << t.step_index() << "\n";
  if (auto rep = t.evaluate_held_out()) out << "held-out epe " << rep->epe << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

model::FlowModel load_model(const fs::path& path) {
  return trainer::model_from_checkpoint(checkpoint::load(path));
}

struct EvalArgs {
  std::string checkpoint;
  fs::path manifest;
  fs::path report;
  fs::path csv;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  trainer::Predictor predictor;
  if (a.checkpoint == "oracle") predictor = trainer::oracle_predictor();
  else if (a.checkpoint == "zero") predictor = trainer::zero_predictor();
  else predictor = trainer::model_predictor(load_model(a.checkpoint));
  const auto records = dataio::load_records(dataio::read_manifest(a.manifest));
  const auto report = trainer::evaluate(predictor, records);
  const auto text = metrics::to_text(report);
  if (!a.report.empty()) write_text(a.report, text);
  if (!a.csv.empty()) write_text(a.csv, metrics::csv_header() + "\n" + metrics::to_csv_row(report) + "\n");
  out << text;
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct InferArgs {
  fs::path checkpoint, frame0, frame1, flo_out, viz_out;
  std::optional<double> viz_max;
};

int cmd_infer(const InferArgs& a, std::ostream& out) {
  auto m = load_model(a.checkpoint);
  const auto ch = m->config().image_channels;
  const auto f0 = dataio::read_frame_png(a.frame0, ch);
  const auto f1 = dataio::read_frame_png(a.frame1, ch);
  torch::NoGradGuard g;
  const auto seq = model::predict(m, f0, f1);
  dataio::write_flo(seq.last(), a.flo_out);
  if (!a.viz_out.empty()) viz::write_flow_png(seq.last(), a.viz_out, a.viz_max);
  out << "mean |uv| " << seq.last().uv().norm(2, {2}).mean().item<double>() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct OccArgs {
  std::string checkpoint;
  fs::path frame0, frame1, fwd, bwd, out;
};

int cmd_occ(const OccArgs& a, std::ostream& out) {
  if (a.checkpoint == "oracle") {
    if (a.fwd.empty() || a.bwd.empty()) throw UsageError("oracle mode needs --fwd and --bwd flow files");
    const auto occ = warp::occlusion_oracle(dataio::read_flo(a.fwd), dataio::read_flo(a.bwd));
    dataio::write_occlusion_png(occ, a.out);
    out << "occluded_fraction " << occ.occ().mean().item<double>() << "\n";
    return kExitOk;
  }
  if (a.frame0.empty() || a.frame1.empty()) throw UsageError("WarpNet mode needs --frame0 and --frame1");
  auto m = load_model(a.checkpoint);
  const auto ch = m->config().image_channels;
  const auto i0 = to_nchw(dataio::read_frame_png(a.frame0, ch));
  const auto i1 = to_nchw(dataio::read_frame_png(a.frame1, ch));
  torch::NoGradGuard g;
  auto [s01, s10] = m->predict_bidirectional(i0, i1);
  // Reconstructing I0 from I1 puts the occlusion map on the first frame's grid.
  const auto recon = m->warpnet->forward(i1, warp::PayloadKind::image, s10.back(), s01.back());
  const auto oracle = warp::occlusion_oracle(s01.back(), s10.back());
  dataio::write_occlusion_png(occlusion_from_nchw(recon.occ, 0), a.out);
  out << "iou_vs_oracle " << warp::binary_iou(recon.occ > 0.5, oracle > 0.5) << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"kinflow: correlation-free optical flow with kinetics-guided self-supervision"};
  app.require_subcommand(1);
  app.fallthrough();
  std::optional<uint64_t> seed;
  app.add_option("--seed", seed, "Global seed (overrides the config seed)");

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Write a synthetic dataset and its manifest");
  synth->add_option("--out,--manifest", sa.out, "Manifest path")->required();
  synth->add_option("--count", sa.count, "Number of pairs")->check(CLI::PositiveNumber);
  synth->add_option("--kinds", sa.kinds, "Motion kinds, comma separated")->delimiter(',');
  synth->add_option("--size", sa.size, "Frame size HxW");
  synth->add_option("--channels", sa.channels, "1 or 3")->check(CLI::IsMember({1, 3}));

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Run the AIL or KGL phase");
  train->add_option("--config", ta.config, "JSON training config")->required();
  train->add_option("--phase", ta.phase, "AIL or KGL (overrides the config)");
  train->add_flag("--resume", ta.resume, "Continue from <out-dir>/<phase>.ckpt");
  train->add_option("--init", ta.init, "Checkpoint to start KGL from");
  train->add_option("--out-dir", ta.out_dir, "Where checkpoints and logs go");
  train->add_option("--stop-after", ta.stop_after, "Stop once this many steps are done");
  train->add_option("--print-every", ta.print_every, "Echo every n-th log line (0 = quiet)");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint (or 'oracle' / 'zero') on a manifest");
  eval->add_option("--checkpoint", ea.checkpoint)->required();
  eval->add_option("--manifest,--dataset", ea.manifest)->required();
  eval->add_option("--report", ea.report, "Report file (key value lines)");
  eval->add_option("--csv", ea.csv, "Also write a one-row CSV");

  InferArgs ia;
  auto* infer = app.add_subcommand("infer", "Predict flow for one frame pair");
  infer->add_option("--checkpoint", ia.checkpoint)->required();
  infer->add_option("--frame0", ia.frame0)->required();
  infer->add_option("--frame1", ia.frame1)->required();
  infer->add_option("--flo-out", ia.flo_out)->required();
  infer->add_option("--viz-out", ia.viz_out, "Colour-wheel PNG");
  infer->add_option("--viz-max", ia.viz_max, "Fixed normalisation magnitude");

  OccArgs oa;
  auto* occ = app.add_subcommand("occ", "Occlusion map from a checkpoint's WarpNet or the consistency oracle");
  occ->add_option("--checkpoint", oa.checkpoint, "Checkpoint path or 'oracle'")->required();
  occ->add_option("--frame0", oa.frame0);
  occ->add_option("--frame1", oa.frame1);
  occ->add_option("--fwd", oa.fwd, "Forward flow (.flo), oracle mode");
  occ->add_option("--bwd", oa.bwd, "Backward flow (.flo), oracle mode");
  occ->add_option("--out", oa.out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error UsageError: " << one_line(e.what()) << "\n";
    return kExitUsage;
  }

  try {
    if (synth->parsed()) return cmd_synth(sa, seed.value_or(0), out);
    if (train->parsed()) return cmd_train(ta, seed, out);
    if (eval->parsed()) return cmd_eval(ea, out);
    if (infer->parsed()) return cmd_infer(ia, out);
    if (occ->parsed()) return cmd_occ(oa, out);
    throw UsageError("no command given");
  } catch (const Error& e) {
    err << "error " << e.kind() << ": " << one_line(e.what()) << "\n";
    return e.exit_code();
  } catch (const c10::Error& e) {
    err << "error RuntimeError: " << one_line(e.what_without_backtrace()) << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error RuntimeError: " << one_line(e.what()) << "\n";
    return kExitRuntime;
  }
}

}  // namespace kinflow::cli
