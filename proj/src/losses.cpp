#include "kinflow/losses.hpp"

#include <cmath>

namespace kinflow::losses {

namespace F = torch::nn::functional;

void validate(const LossConfig& c) {
  if (!(c.gamma > 0.0 && c.gamma <= 1.0)) throw ConfigError("gamma: must lie in (0, 1]");
  if (c.lambda_perc < 0) throw ConfigError("lambda_perc: must be nonnegative");
  if (c.lambda_occ < 0) throw ConfigError("lambda_occ: must be nonnegative");
  if (c.lambda_kin < 0) throw ConfigError("lambda_kin: must be nonnegative");
  for (auto s : c.perc_scales)
    if (s < 1) throw ConfigError("perc_scales: factors must be >= 1");
  for (auto l : c.perc_layers)
    if (l < 0 || l >= PerceptualExtractorImpl::kLayers) throw ConfigError("perc_layers: index out of range");
}

// ---------------------------------------------------------------------------

PerceptualExtractorImpl::PerceptualExtractorImpl(int64_t channels, RngSeed seed) {
  struct Layer {
    int64_t out, stride;
  };
  const Layer layers[kLayers] = {{16, 1}, {16, 1}, {32, 2}, {32, 1}, {64, 2}};
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed.value);
  int64_t in = channels;
  for (int64_t i = 0; i < kLayers; ++i) {
    const double std = std::sqrt(2.0 / static_cast<double>(in * 9));
    auto w = at::normal(0.0, std, {layers[i].out, in, 3, 3}, gen, torch::TensorOptions(torch::kFloat32));
    weights_.push_back(register_buffer("w" + std::to_string(i), w));
    biases_.push_back(register_buffer("b" + std::to_string(i), torch::zeros({layers[i].out})));
    strides_.push_back(layers[i].stride);
    in = layers[i].out;
  }
}

std::vector<Tensor> PerceptualExtractorImpl::forward(const Tensor& images) {
  std::vector<Tensor> out;
  auto x = images * 2 - 1;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    auto w = weights_[i].to(x.scalar_type());
    auto b = biases_[i].to(x.scalar_type());
    x = torch::relu(F::conv2d(x, w, F::Conv2dFuncOptions().bias(b).stride(strides_[i]).padding(1)));
    out.push_back(x);
  }
  return out;
}

void PerceptualExtractorImpl::load_weights(const std::vector<Tensor>& weights, const std::vector<Tensor>& biases) {
  if (weights.size() != weights_.size() || biases.size() != biases_.size())
    throw ShapeMismatch("perceptual extractor expects " + std::to_string(kLayers) + " layers");
  torch::NoGradGuard g;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    if (weights[i].sizes() != weights_[i].sizes() || biases[i].sizes() != biases_[i].sizes())
      throw ShapeMismatch("perceptual extractor layer " + std::to_string(i) + " shape differs");
    weights_[i].copy_(weights[i]);
    biases_[i].copy_(biases[i]);
  }
}

// ---------------------------------------------------------------------------

Tensor flow_l1(const Tensor& pred, const Tensor& gt, const Tensor& valid) {
  if (pred.dim() != 4 || pred.size(1) != 2 || pred.sizes() != gt.sizes())
    throw ShapeMismatch("flow L1: expected matching [B, 2, H, W] flows");
  auto err = (pred - gt).abs().sum(1, /*keepdim=*/true);
  if (!valid.defined()) return err.mean();
  if (valid.dim() != 4 || valid.size(1) != 1 || valid.size(0) != pred.size(0) || valid.size(2) != pred.size(2) ||
      valid.size(3) != pred.size(3))
    throw ShapeMismatch("flow L1: valid mask must be [B, 1, H, W]");
  auto m = valid.to(err.scalar_type());
  const double n = m.sum().item<double>();
  if (n == 0.0) throw EmptyValidSet("flow L1: no valid pixels");
  return (err * m).sum() / n;
}

Tensor seq_l1(const std::vector<Tensor>& preds, const Tensor& gt, double gamma, const Tensor& valid) {
  if (preds.empty()) throw ShapeMismatch("sequence loss needs at least one prediction");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw RangeError("gamma must lie in (0, 1]");
  const auto n = preds.size();
  Tensor total;
  for (std::size_t i = 0; i < n; ++i) {
    const double w = std::pow(gamma, static_cast<double>(n - 1 - i));
    auto term = flow_l1(preds[i], gt, valid) * w;
    total = total.defined() ? total + term : term;
  }
  return total;
}

Tensor perceptual(PerceptualExtractor& extractor, const Tensor& a, const Tensor& b, const LossConfig& cfg) {
  if (a.dim() != 4 || a.sizes() != b.sizes()) throw ShapeMismatch("perceptual: frames differ in shape");
  Tensor total = torch::zeros({}, a.options());
  for (auto j : cfg.perc_scales) {
    Tensor aj = a, bj = b;
    if (j > 1) {
      const std::vector<int64_t> size{(a.size(2) + j - 1) / j, (a.size(3) + j - 1) / j};
      aj = F::adaptive_avg_pool2d(a, F::AdaptiveAvgPool2dFuncOptions(size));
      bj = F::adaptive_avg_pool2d(b, F::AdaptiveAvgPool2dFuncOptions(size));
    }
    auto fa = extractor->forward(aj);
    auto fb = extractor->forward(bj);
    for (auto i : cfg.perc_layers) total = total + (fa[i] - fb[i]).abs().mean();
  }
  return total;
}

Tensor occ_l1(const Tensor& pred, const Tensor& gt) {
  if (pred.sizes() != gt.sizes()) throw ShapeMismatch("occlusion L1: maps differ in shape");
  return (pred - gt).abs().mean();
}

Tensor kinetics_loss(const Tensor& teacher, const std::vector<Tensor>& student, double gamma, const Tensor& valid) {
  return seq_l1(student, teacher.detach(), gamma, valid);
}

Tensor ail_total(const Tensor& l1, const Tensor& perc, const Tensor& occ, const LossConfig& cfg) {
  auto total = l1 + cfg.lambda_perc * perc;
  if (occ.defined() && cfg.lambda_occ != 0.0) total = total + cfg.lambda_occ * occ;
  return total;
}

Tensor kgl_total(const Tensor& kin, const Tensor& perc, const LossConfig& cfg) {
  return cfg.lambda_kin * kin + cfg.lambda_perc * perc;
}

// ---------------------------------------------------------------------------

namespace {

Tensor mask_of(const FlowField& f) { return f.has_mask() ? valid_to_nchw(f) : Tensor(); }

std::vector<Tensor> seq_to_nchw(const FlowSequence& s) {
  std::vector<Tensor> out;
  for (const auto& f : s.items()) out.push_back(to_nchw(f));
  return out;
}

}  // namespace

Tensor seq_l1(const FlowSequence& preds, const FlowField& gt, double gamma) {
  check_input(preds);
  check_input(gt);
  for (const auto& p : preds.items()) require_same_size(p.height(), p.width(), gt.height(), gt.width(), "seq_l1");
  return seq_l1(seq_to_nchw(preds), to_nchw(gt), gamma, mask_of(gt));
}

Tensor perceptual(PerceptualExtractor& extractor, const Frame& a, const Frame& b, const LossConfig& cfg) {
  check_input(a);
  check_input(b);
  require_same_size(a.height(), a.width(), b.height(), b.width(), "perceptual");
  return perceptual(extractor, to_nchw(a), to_nchw(b), cfg);
}

Tensor occ_l1(const OcclusionMap& pred, const OcclusionMap& gt) {
  check_input(pred);
  check_input(gt);
  require_same_size(pred.height(), pred.width(), gt.height(), gt.width(), "occ_l1");
  return occ_l1(to_nchw(pred), to_nchw(gt));
}

Tensor kinetics_loss(const FlowField& teacher, const FlowSequence& student, double gamma) {
  check_input(teacher);
  check_input(student);
  for (const auto& p : student.items())
    require_same_size(p.height(), p.width(), teacher.height(), teacher.width(), "kinetics_loss");
  return kinetics_loss(to_nchw(teacher), seq_to_nchw(student), gamma, mask_of(teacher));
}

}  // namespace kinflow::losses
