#include "kinflow/kinetics.hpp"

#include "kinflow/warp.hpp"

namespace kinflow::kinetics {

const char* to_string(AlphaSampling s) { return s == AlphaSampling::fixed ? "fixed" : "uniform"; }

AlphaSampling alpha_sampling_from_string(const std::string& s) {
  if (s == "fixed") return AlphaSampling::fixed;
  if (s == "uniform") return AlphaSampling::uniform;
  throw ConfigError("alpha_sampling must be fixed or uniform, got '" + s + "'");
}

void validate(const KineticsConfig& c) {
  if (c.alpha_sampling == AlphaSampling::fixed) {
    if (!(c.alpha > 0.0 && c.alpha < 1.0)) throw ConfigError("alpha: must lie in (0, 1)");
  } else if (!(c.lo > 0.0 && c.lo <= c.hi && c.hi < 1.0)) {
    throw ConfigError("alpha_range: need 0 < lo <= hi < 1");
  }
  if (!c.teacher_detached) throw ConfigError("teacher_detached: the teacher is always detached");
}

double sample_alpha(const KineticsConfig& c, std::mt19937_64& rng) {
  if (c.alpha_sampling == AlphaSampling::fixed) return c.alpha;
  // Explicit mapping rather than std::uniform_real_distribution, whose output
  // is implementation-defined.
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return c.lo + (c.hi - c.lo) * u;
}

Tensor motion_generator(const Tensor& full_flow, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw RangeError("alpha must lie in (0, 1), got " + std::to_string(alpha));
  // Product formed in double and rounded once to the flow's dtype.
  return (full_flow.detach().to(torch::kFloat64) * alpha).to(full_flow.scalar_type());
}

FlowField motion_generator(const FlowField& full_flow, double alpha) {
  check_input(full_flow);
  return FlowField(motion_generator(full_flow.uv(), alpha), full_flow.valid());
}

KglResult kgl_step(model::FlowModel& model, losses::PerceptualExtractor& extractor, const Tensor& i0,
                   const Tensor& i1, double alpha, const losses::LossConfig& loss_cfg) {
  if (i0.dim() != 4 || i0.sizes() != i1.sizes()) throw ShapeMismatch("kgl_step: frames differ in shape");
  const int64_t h = i0.size(2), w = i0.size(3), s = model->config().scale;

  auto f0 = model->encoder->forward(i0);
  auto f1 = model->encoder->forward(i1);

  // Teacher branch: no gradient reaches any weight through it.
  Tensor fwd, bwd;
  {
    torch::NoGradGuard no_grad;
    auto [seq01, seq10] = model->decoder->forward_bidirectional(f0.detach(), f1.detach(), h, w);
    fwd = seq01.back();
    bwd = seq10.back();
  }
  KglResult r;
  r.teacher = motion_generator(fwd, alpha);

  auto teacher_fs = warp::flow_to_feature_scale(r.teacher, f0.size(2), f0.size(3), s);
  auto mid = model->warpnet->forward(f0, warp::PayloadKind::feature, teacher_fs);
  r.student = model->decoder->forward(f0, mid.warped, h, w);
  r.kinetics = losses::kinetics_loss(r.teacher, r.student, loss_cfg.gamma);

  // Reconstruct I0 from I1 so the output shares the t0 grid.
  auto recon = model->warpnet->forward(i1, warp::PayloadKind::image, bwd, fwd);
  r.perceptual = losses::perceptual(extractor, recon.warped, i0, loss_cfg);
  r.loss = losses::kgl_total(r.kinetics, r.perceptual, loss_cfg);
  return r;
}

KglDomainResult kgl_step(model::FlowModel& model, losses::PerceptualExtractor& extractor, const Frame& i0,
                         const Frame& i1, double alpha, const losses::LossConfig& loss_cfg) {
  check_input(i0);
  check_input(i1);
  require_same_size(i0.height(), i0.width(), i1.height(), i1.width(), "kgl_step");
  auto r = kgl_step(model, extractor, to_nchw(i0), to_nchw(i1), alpha, loss_cfg);
  std::vector<FlowField> items;
  for (const auto& f : r.student) items.push_back(flow_from_nchw(f, 0));
  return {r.loss, flow_from_nchw(r.teacher, 0), FlowSequence(std::move(items))};
}

}  // namespace kinflow::kinetics
