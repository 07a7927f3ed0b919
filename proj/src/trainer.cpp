#include "kinflow/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace kinflow::trainer {

using json = nlohmann::json;
namespace fs = std::filesystem;

const char* to_string(Phase p) { return p == Phase::ail ? "AIL" : "KGL"; }

Phase phase_from_string(const std::string& s) {
  if (s == "AIL" || s == "ail") return Phase::ail;
  if (s == "KGL" || s == "kgl") return Phase::kgl;
  throw ConfigError("phase: must be AIL or KGL, got '" + s + "'");
}

// ---------------------------------------------------------------------------
// Config

namespace {

// Reads one JSON object, remembering which keys were consumed so leftovers
// (usually typos) can be reported.
class Section {
 public:
  Section(const json& j, std::string prefix) : j_(j), prefix_(std::move(prefix)) {
    if (!j_.is_object()) throw ConfigError((prefix_.empty() ? "config" : prefix_) + ": expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <typename T>
  T required(const std::string& key) {
    if (!j_.contains(key)) throw ConfigError("missing required key '" + name(key) + "'");
    return get<T>(key);
  }

  template <typename T>
  T optional(const std::string& key, T fallback) {
    return j_.contains(key) ? get<T>(key) : fallback;
  }

  Section child(const std::string& key) {
    seen_.insert(key);
    return Section(j_.at(key), name(key));
  }

  void finish() const {
    for (const auto& item : j_.items())
      if (!seen_.count(item.key())) throw ConfigError("unknown key '" + name(item.key()) + "'");
  }

  std::string name(const std::string& key) const { return prefix_.empty() ? key : prefix_ + "." + key; }

 private:
  template <typename T>
  T get(const std::string& key) {
    seen_.insert(key);
    try {
      return j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError("key '" + name(key) + "' has the wrong type");
    }
  }

  const json& j_;
  std::string prefix_;
  std::set<std::string> seen_;
};

std::vector<fs::path> paths_from(const std::vector<std::string>& raw, const fs::path& base) {
  std::vector<fs::path> out;
  for (const auto& s : raw) {
    fs::path p(s);
    out.push_back(p.is_relative() && !base.empty() ? base / p : p);
  }
  return out;
}

}  // namespace

TrainConfig parse_config(const std::string& text, const fs::path& base_dir) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  Section root(j, "");
  TrainConfig c;
  c.phase = phase_from_string(root.required<std::string>("phase"));
  c.steps = root.required<int64_t>("steps");
  c.batch = root.required<int64_t>("batch");
  c.lr_max = root.required<double>("lr_max");
  c.weight_decay = root.required<double>("weight_decay");
  c.seed = RngSeed{root.required<uint64_t>("seed")};
  c.train_manifests = paths_from(root.required<std::vector<std::string>>("train_manifests"), base_dir);
  c.eval_manifests = paths_from(root.optional<std::vector<std::string>>("eval_manifests", {}), base_dir);
  c.eval_every = root.optional<int64_t>("eval_every", c.eval_every);
  c.clip_norm = root.optional<double>("clip_norm", c.clip_norm);
  c.augment = root.optional<bool>("augment", c.augment);
  c.checkpoint_every = root.optional<int64_t>("checkpoint_every", c.checkpoint_every);
  if (root.has("crop")) {
    auto crop = root.optional<std::vector<int64_t>>("crop", {});
    if (crop.size() != 2) throw ConfigError("key 'crop' must be [height, width]");
    c.crop = {crop[0], crop[1]};
  }
  if (root.has("schedule")) {
    auto s = root.child("schedule");
    c.schedule.one_cycle = s.optional<bool>("one_cycle", c.schedule.one_cycle);
    c.schedule.warmup_fraction = s.optional<double>("warmup_fraction", c.schedule.warmup_fraction);
    c.schedule.start_fraction = s.optional<double>("start_fraction", c.schedule.start_fraction);
    c.schedule.final_fraction = s.optional<double>("final_fraction", c.schedule.final_fraction);
    s.finish();
  }
  if (root.has("loss_cfg")) {
    auto s = root.child("loss_cfg");
    auto& l = c.loss_cfg;
    l.gamma = s.optional<double>("gamma", l.gamma);
    l.lambda_perc = s.optional<double>("lambda_perc", l.lambda_perc);
    l.lambda_occ = s.optional<double>("lambda_occ", l.lambda_occ);
    l.lambda_kin = s.optional<double>("lambda_kin", l.lambda_kin);
    l.perc_scales = s.optional<std::vector<int64_t>>("perc_scales", l.perc_scales);
    l.perc_layers = s.optional<std::vector<int64_t>>("perc_layers", l.perc_layers);
    s.finish();
  }
  if (root.has("kinetics_cfg")) {
    auto s = root.child("kinetics_cfg");
    auto& k = c.kinetics_cfg;
    if (s.has("alpha_sampling"))
      k.alpha_sampling = kinetics::alpha_sampling_from_string(s.optional<std::string>("alpha_sampling", ""));
    k.alpha = s.optional<double>("alpha", k.alpha);
    if (s.has("alpha_range")) {
      auto r = s.optional<std::vector<double>>("alpha_range", {});
      if (r.size() != 2) throw ConfigError("key 'kinetics_cfg.alpha_range' must be [lo, hi]");
      k.lo = r[0];
      k.hi = r[1];
    }
    k.teacher_detached = s.optional<bool>("teacher_detached", k.teacher_detached);
    k.freeze_encoder = s.optional<bool>("freeze_encoder", k.freeze_encoder);
    s.finish();
  }
  if (root.has("model")) {
    auto s = root.child("model");
    auto& m = c.model;
    m.image_channels = s.optional<int64_t>("image_channels", m.image_channels);
    m.scale = s.optional<int64_t>("scale", m.scale);
    m.dim = s.optional<int64_t>("dim", m.dim);
    m.heads = s.optional<int64_t>("heads", m.heads);
    m.self_layers = s.optional<int64_t>("self_layers", m.self_layers);
    m.cross_layers = s.optional<int64_t>("cross_layers", m.cross_layers);
    m.top_k = s.optional<int64_t>("top_k", m.top_k);
    m.residual_blocks = s.optional<int64_t>("residual_blocks", m.residual_blocks);
    m.hidden = s.optional<int64_t>("hidden", m.hidden);
    m.learned_pos = s.optional<bool>("learned_pos", m.learned_pos);
    if (s.has("aux_source")) m.aux_source = model::aux_source_from_string(s.optional<std::string>("aux_source", ""));
    if (s.has("upsampler")) m.upsampler = model::upsampler_from_string(s.optional<std::string>("upsampler", ""));
    m.warp_width = s.optional<int64_t>("warp_width", m.warp_width);
    m.warp_depth = s.optional<int64_t>("warp_depth", m.warp_depth);
    s.finish();
  }
  root.finish();
  validate(c);
  return c;
}

TrainConfig load_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), path.parent_path());
}

std::string to_json(const TrainConfig& c) {
  auto strings = [](const std::vector<fs::path>& ps) {
    std::vector<std::string> out;
    for (const auto& p : ps) out.push_back(p.string());
    return out;
  };
  const auto& m = c.model;
  const auto& l = c.loss_cfg;
  const auto& k = c.kinetics_cfg;
  json j = {
      {"phase", to_string(c.phase)},
      {"steps", c.steps},
      {"batch", c.batch},
      {"lr_max", c.lr_max},
      {"weight_decay", c.weight_decay},
      {"schedule",
       {{"one_cycle", c.schedule.one_cycle},
        {"warmup_fraction", c.schedule.warmup_fraction},
        {"start_fraction", c.schedule.start_fraction},
        {"final_fraction", c.schedule.final_fraction}}},
      {"crop", {c.crop.height, c.crop.width}},
      {"seed", c.seed.value},
      {"eval_every", c.eval_every},
      {"train_manifests", strings(c.train_manifests)},
      {"eval_manifests", strings(c.eval_manifests)},
      {"loss_cfg",
       {{"gamma", l.gamma},
        {"lambda_perc", l.lambda_perc},
        {"lambda_occ", l.lambda_occ},
        {"lambda_kin", l.lambda_kin},
        {"perc_scales", l.perc_scales},
        {"perc_layers", l.perc_layers}}},
      {"kinetics_cfg",
       {{"alpha_sampling", kinetics::to_string(k.alpha_sampling)},
        {"alpha", k.alpha},
        {"alpha_range", {k.lo, k.hi}},
        {"teacher_detached", k.teacher_detached},
        {"freeze_encoder", k.freeze_encoder}}},
      {"model",
       {{"image_channels", m.image_channels},
        {"scale", m.scale},
        {"dim", m.dim},
        {"heads", m.heads},
        {"self_layers", m.self_layers},
        {"cross_layers", m.cross_layers},
        {"top_k", m.top_k},
        {"residual_blocks", m.residual_blocks},
        {"hidden", m.hidden},
        {"learned_pos", m.learned_pos},
        {"aux_source", model::to_string(m.aux_source)},
        {"upsampler", model::to_string(m.upsampler)},
        {"warp_width", m.warp_width},
        {"warp_depth", m.warp_depth}}},
      {"clip_norm", c.clip_norm},
      {"augment", c.augment},
      {"checkpoint_every", c.checkpoint_every},
  };
  return j.dump(2);
}

void validate(const TrainConfig& c) {
  if (c.steps < 1) throw ConfigError("steps: must be >= 1");
  if (c.batch < 1) throw ConfigError("batch: must be >= 1");
  // lr_max = 0 is allowed: it is the null-update configuration.
  if (!(c.lr_max >= 0.0) || !std::isfinite(c.lr_max)) throw ConfigError("lr_max: must be finite and >= 0");
  if (!(c.weight_decay >= 0.0)) throw ConfigError("weight_decay: must be >= 0");
  const auto& s = c.schedule;
  auto frac = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!frac(s.warmup_fraction) || s.warmup_fraction >= 1.0) throw ConfigError("schedule.warmup_fraction: must lie in [0, 1)");
  if (!frac(s.start_fraction)) throw ConfigError("schedule.start_fraction: must lie in [0, 1]");
  if (!frac(s.final_fraction)) throw ConfigError("schedule.final_fraction: must lie in [0, 1]");
  if (c.crop.height < 0 || c.crop.width < 0) throw ConfigError("crop: must be nonnegative");
  if (c.eval_every < 0) throw ConfigError("eval_every: must be >= 0");
  if (c.checkpoint_every < 0) throw ConfigError("checkpoint_every: must be >= 0");
  if (!(c.clip_norm > 0.0)) throw ConfigError("clip_norm: must be positive");
  losses::validate(c.loss_cfg);
  kinetics::validate(c.kinetics_cfg);
  model::validate(c.model);
}

double one_cycle_lr(int64_t step, const TrainConfig& c) {
  if (step < 0 || step >= c.steps)
    throw RangeError("step " + std::to_string(step) + " outside [0, " + std::to_string(c.steps) + ")");
  const auto& s = c.schedule;
  if (!s.one_cycle) return c.lr_max;
  if (c.steps == 1) return c.lr_max * s.start_fraction;
  const auto warm = std::clamp<int64_t>(static_cast<int64_t>(std::floor(s.warmup_fraction * static_cast<double>(c.steps))),
                                        1, c.steps - 1);
  if (step < warm) {
    const double t = static_cast<double>(step) / static_cast<double>(warm);
    return c.lr_max * (s.start_fraction + (1.0 - s.start_fraction) * t);
  }
  const int64_t span = c.steps - 1 - warm;
  if (span == 0) return c.lr_max * s.final_fraction;
  const double t = static_cast<double>(step - warm) / static_cast<double>(span);
  return c.lr_max * (1.0 + (s.final_fraction - 1.0) * t);
}

// ---------------------------------------------------------------------------
// Batches and losses

Batch collate(const std::vector<dataio::SampleRecord>& records) {
  if (records.empty()) throw ShapeMismatch("empty batch");
  std::vector<Frame> f0, f1;
  std::vector<FlowField> flows;
  std::vector<Tensor> masks, occs;
  bool all_flow = true, all_occ = true, any_mask = false;
  for (const auto& r : records) {
    f0.push_back(r.frame0);
    f1.push_back(r.frame1);
    all_flow = all_flow && r.gt_flow.has_value();
    all_occ = all_occ && r.gt_occ.has_value();
    if (r.gt_flow) {
      flows.push_back(*r.gt_flow);
      any_mask = any_mask || r.gt_flow->has_mask();
      if (r.gt_flow->has_mask() && !r.gt_flow->valid()->any().item<bool>())
        throw EmptyValidSet("record '" + r.id + "' has no valid ground-truth pixel");
    }
    if (r.gt_occ) occs.push_back(r.gt_occ->occ().unsqueeze(0));
  }
  Batch b;
  b.i0 = stack_frames(f0);
  b.i1 = stack_frames(f1);
  if (all_flow) {
    b.flow = stack_flows(flows);
    if (any_mask) {
      for (const auto& f : flows) masks.push_back(valid_to_nchw(f)[0]);
      b.valid = torch::stack(masks);
    }
  }
  if (all_occ) b.occ = torch::stack(occs).to(b.i0.scalar_type());
  return b;
}

AilTerms ail_loss(model::FlowModel& model, losses::PerceptualExtractor& extractor, const Batch& batch,
                  const losses::LossConfig& cfg) {
  if (!batch.flow.defined()) throw PreconditionError("AIL needs ground-truth flow for every record");
  auto [s01, s10] = model->predict_bidirectional(batch.i0, batch.i1);
  AilTerms t;
  t.l1 = losses::seq_l1(s01, batch.flow, cfg.gamma, batch.valid);
  t.final_l1 = losses::flow_l1(s01.back().detach(), batch.flow, batch.valid);
  auto recon = model->warpnet->forward(batch.i1, warp::PayloadKind::image, s10.back(), s01.back());
  t.perceptual = cfg.lambda_perc > 0 ? losses::perceptual(extractor, recon.warped, batch.i0, cfg)
                                     : torch::zeros({}, batch.i0.options());
  if (batch.occ.defined()) t.occ = losses::occ_l1(recon.occ, batch.occ);
  t.total = losses::ail_total(t.l1, t.perceptual, t.occ, cfg);
  return t;
}

// ---------------------------------------------------------------------------
// Evaluation

Predictor model_predictor(model::FlowModel model) {
  return [model](const dataio::SampleRecord& r) mutable {
    torch::NoGradGuard g;
    auto seq = model->predict(to_nchw(r.frame0), to_nchw(r.frame1));
    return flow_from_nchw(seq.back(), 0);
  };
}

Predictor oracle_predictor() {
  return [](const dataio::SampleRecord& r) {
    if (!r.gt_flow) throw PreconditionError("oracle predictor needs gt_flow");
    return FlowField(r.gt_flow->uv());
  };
}

Predictor zero_predictor() {
  return [](const dataio::SampleRecord& r) {
    return FlowField(torch::zeros({r.frame0.height(), r.frame0.width(), 2}, r.frame0.pixels().options()));
  };
}

metrics::MetricReport evaluate(const Predictor& predictor, const std::vector<dataio::SampleRecord>& records) {
  metrics::MetricAccumulator acc;
  for (const auto& r : records) {
    if (!r.gt_flow) throw PreconditionError("evaluation record '" + r.id + "' has no gt_flow");
    acc.add(predictor(r), *r.gt_flow);
  }
  return acc.report();
}

// ---------------------------------------------------------------------------
// Trainer

double StepRecord::loss(const std::string& name) const {
  for (const auto& [k, v] : losses)
    if (k == name) return v;
  throw std::out_of_range("no loss named " + name);
}

std::string to_json_line(const StepRecord& r) {
  json j;
  j["phase"] = to_string(r.phase);
  j["step"] = r.step;
  j["lr"] = r.lr;
  if (r.alpha) j["alpha"] = *r.alpha;
  json l = json::object();
  for (const auto& [k, v] : r.losses) l[k] = v;
  j["losses"] = l;
  j["wall_ms"] = r.wall_ms;
  if (r.eval) {
    j["eval"] = {{"epe", r.eval->epe}, {"fl_all", r.eval->fl_all}, {"n_valid", r.eval->n_valid}};
  }
  return j.dump();
}

model::FlowModel model_from_checkpoint(const checkpoint::Checkpoint& ckpt) {
  if (ckpt.config_json.empty()) throw FormatError("checkpoint carries no config echo");
  const auto cfg = parse_config(ckpt.config_json);
  model::FlowModel m(cfg.model);
  if (m->architecture() != ckpt.architecture) throw FormatError("checkpoint architecture does not match its config");
  checkpoint::copy_into(*m, ckpt.params);
  return m;
}

std::vector<dataio::SampleRecord> load_manifests(const std::vector<fs::path>& paths) {
  std::vector<dataio::SampleRecord> out;
  for (const auto& p : paths) {
    auto recs = dataio::load_records(dataio::read_manifest(p));
    out.insert(out.end(), std::make_move_iterator(recs.begin()), std::make_move_iterator(recs.end()));
  }
  return out;
}

Trainer::Trainer(TrainConfig config, std::vector<dataio::SampleRecord> train, std::vector<dataio::SampleRecord> eval)
    : config_(std::move(config)), train_(std::move(train)), eval_(std::move(eval)) {
  validate(config_);
  if (config_.phase == Phase::ail) {
    for (const auto& r : train_)
      if (!r.gt_flow) throw PreconditionError("AIL record '" + r.id + "' has no gt_flow");
  }
  for (const auto& r : eval_)
    if (!r.gt_flow) throw PreconditionError("evaluation record '" + r.id + "' has no gt_flow");
  // Single-threaded kernels keep reductions in a fixed order.
  torch::set_num_threads(1);
  seed_torch(config_.seed);
  model_ = model::FlowModel(config_.model);
  auto extractor_engine = make_engine(config_.seed, 3);
  extractor_ = losses::PerceptualExtractor(config_.model.image_channels, RngSeed{extractor_engine()});
  optimizer_ = std::make_unique<torch::optim::AdamW>(
      trainable(), torch::optim::AdamWOptions(config_.lr_max).weight_decay(config_.weight_decay));
  iterator_ = std::make_unique<dataio::DatasetIterator>(train_, config_.batch, config_.seed, config_.crop,
                                                        config_.augment);
  rng_ = make_engine(config_.seed, 2);
}

std::vector<Tensor> Trainer::trainable() const {
  std::set<const void*> frozen;
  if (config_.phase == Phase::kgl && config_.kinetics_cfg.freeze_encoder)
    for (const auto& p : model_->encoder->parameters()) frozen.insert(p.unsafeGetTensorImpl());
  std::vector<Tensor> out;
  for (const auto& p : model_->parameters())
    if (p.requires_grad() && !frozen.count(p.unsafeGetTensorImpl())) out.push_back(p);
  return out;
}

void Trainer::load_weights(const checkpoint::Checkpoint& ckpt) {
  if (ckpt.architecture != model_->architecture())
    throw ConfigError("checkpoint architecture does not match the configured model");
  checkpoint::copy_into(*model_, ckpt.params);
}

void Trainer::resume(const checkpoint::Checkpoint& ckpt) {
  if (ckpt.phase != to_string(config_.phase))
    throw PreconditionError("checkpoint is from phase " + ckpt.phase + ", cannot resume " + to_string(config_.phase));
  if (ckpt.step > config_.steps) throw PreconditionError("checkpoint step exceeds configured steps");
  load_weights(ckpt);
  if (!ckpt.optimizer.empty()) {
    torch::serialize::InputArchive ar;
    std::istringstream is(ckpt.optimizer);
    ar.load_from(is);
    optimizer_->load(ar);
  }
  iterator_->restore(ckpt.data_state);
  std::istringstream rs(ckpt.rng_state);
  rs >> rng_;
  if (!rs) throw FormatError("corrupt rng state in checkpoint");
  step_ = ckpt.step;
}

checkpoint::Checkpoint Trainer::save_state() const {
  checkpoint::Checkpoint c;
  c.architecture = model_->architecture();
  c.config_json = to_json(config_);
  c.phase = to_string(config_.phase);
  c.step = step_;
  c.seed = config_.seed.value;
  c.params = checkpoint::snapshot(*model_);
  torch::serialize::OutputArchive ar;
  optimizer_->save(ar);
  std::ostringstream os;
  ar.save_to(os);
  c.optimizer = os.str();
  c.data_state = iterator_->state();
  std::ostringstream rs;
  rs << rng_;
  c.rng_state = rs.str();
  return c;
}

StepRecord Trainer::step() {
  if (done()) throw PreconditionError("training already finished");
  const auto start = std::chrono::steady_clock::now();
  const auto records = iterator_->next();
  const double lr = one_cycle_lr(step_, config_);
  for (auto& group : optimizer_->param_groups()) group.options().set_lr(lr);

  StepRecord rec = config_.phase == Phase::ail ? ail_step(records) : kgl_step(records);
  rec.phase = config_.phase;
  rec.step = step_;
  rec.lr = lr;
  ++step_;
  if (config_.eval_every > 0 && step_ % config_.eval_every == 0) rec.eval = evaluate_held_out();
  rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return rec;
}

StepRecord Trainer::ail_step(const std::vector<dataio::SampleRecord>& records) {
  const auto batch = collate(records);
  model_->zero_grad();
  auto t = ail_loss(model_, extractor_, batch, config_.loss_cfg);
  t.total.backward();
  torch::nn::utils::clip_grad_norm_(trainable(), config_.clip_norm);
  optimizer_->step();
  StepRecord r;
  r.losses = {{"total", t.total.item<double>()},
              {"l1", t.l1.item<double>()},
              {"l1_final", t.final_l1.item<double>()},
              {"perceptual", t.perceptual.item<double>()}};
  if (t.occ.defined()) r.losses.emplace_back("occ", t.occ.item<double>());
  return r;
}

StepRecord Trainer::kgl_step(const std::vector<dataio::SampleRecord>& records) {
  const auto batch = collate(records);
  const double alpha = kinetics::sample_alpha(config_.kinetics_cfg, rng_);
  model_->zero_grad();
  auto k = kinetics::kgl_step(model_, extractor_, batch.i0, batch.i1, alpha, config_.loss_cfg);
  k.loss.backward();
  torch::nn::utils::clip_grad_norm_(trainable(), config_.clip_norm);
  optimizer_->step();
  StepRecord r;
  r.alpha = alpha;
  r.losses = {{"total", k.loss.item<double>()},
              {"kinetics", k.kinetics.item<double>()},
              {"perceptual", k.perceptual.item<double>()}};
  return r;
}

std::optional<metrics::MetricReport> Trainer::evaluate_held_out() {
  if (eval_.empty()) return std::nullopt;
  return evaluate(model_predictor(model_), eval_);
}

void run(Trainer& trainer, const RunOptions& options) {
  std::ofstream log;
  if (!options.log_path.empty()) {
    log.open(options.log_path, std::ios::app);
    if (!log) throw IoError("cannot open training log " + options.log_path.string());
  }
  const auto every = trainer.config().checkpoint_every;
  auto save = [&] {
    if (!options.checkpoint_path.empty()) checkpoint::save(trainer.save_state(), options.checkpoint_path);
  };
  while (!trainer.done() && (options.stop_after < 0 || trainer.step_index() < options.stop_after)) {
    const auto rec = trainer.step();
    if (log.is_open()) {
      log << to_json_line(rec) << '\n';
      log.flush();
    }
    if (options.on_step) options.on_step(rec);
    if (every > 0 && trainer.step_index() % every == 0) save();
  }
  save();
}

}  // namespace kinflow::trainer
