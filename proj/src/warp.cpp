#include "kinflow/warp.hpp"

#include <sstream>

namespace kinflow::warp {

namespace F = torch::nn::functional;

namespace {

void require_flow_for(const Tensor& payload, const Tensor& flow) {
  if (payload.dim() != 4 || flow.dim() != 4 || flow.size(1) != 2)
    throw ShapeMismatch("expected payload [B, C, H, W] and flow [B, 2, H, W]");
  if (payload.size(0) != flow.size(0)) throw ShapeMismatch("payload and flow batch sizes differ");
  require_same_size(payload.size(2), payload.size(3), flow.size(2), flow.size(3), "payload vs flow");
}

// Pixel-centre coordinate grids broadcastable to [B, H, W].
std::pair<Tensor, Tensor> pixel_grid(int64_t h, int64_t w, const torch::TensorOptions& opts) {
  auto xs = torch::arange(w, opts).view({1, 1, w});
  auto ys = torch::arange(h, opts).view({1, h, 1});
  return {xs, ys};
}

int64_t stage_width(int64_t base, int64_t level) { return base * (2 + std::min<int64_t>(level, 2)) / 2; }

torch::nn::Conv2d conv3x3(int64_t in, int64_t out, int64_t stride = 1) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

void zero_(torch::nn::Conv2d& conv) {
  torch::NoGradGuard guard;
  conv->weight.zero_();
  if (conv->bias.defined()) conv->bias.zero_();
}

}  // namespace

Tensor backward_warp(const Tensor& payload, const Tensor& flow) {
  require_flow_for(payload, flow);
  const int64_t b = payload.size(0), c = payload.size(1), h = payload.size(2), w = payload.size(3);
  auto [xs, ys] = pixel_grid(h, w, flow.options());
  auto x = (xs + flow.select(1, 0)).clamp(0, static_cast<double>(w - 1));
  auto y = (ys + flow.select(1, 1)).clamp(0, static_cast<double>(h - 1));
  auto x0f = x.detach().floor();
  auto y0f = y.detach().floor();
  auto wx = (x - x0f).unsqueeze(1);
  auto wy = (y - y0f).unsqueeze(1);
  auto x0 = x0f.to(torch::kLong), y0 = y0f.to(torch::kLong);
  auto x1 = (x0 + 1).clamp_max(w - 1), y1 = (y0 + 1).clamp_max(h - 1);

  auto flat = payload.reshape({b, c, h * w});
  auto gather = [&](const Tensor& yy, const Tensor& xx) {
    auto idx = (yy * w + xx).reshape({b, 1, h * w}).expand({b, c, h * w});
    return flat.gather(2, idx).view({b, c, h, w});
  };
  return gather(y0, x0) * ((1 - wx) * (1 - wy)) + gather(y0, x1) * (wx * (1 - wy)) +
         gather(y1, x0) * ((1 - wx) * wy) + gather(y1, x1) * (wx * wy);
}

Frame backward_warp(const Frame& payload, const FlowField& flow) {
  check_input(payload);
  check_input(flow);
  require_same_size(payload.height(), payload.width(), flow.height(), flow.width(), "backward_warp");
  auto out = backward_warp(to_nchw(payload), to_nchw(flow).to(payload.pixels().scalar_type()));
  return frame_from_nchw(out, 0, payload.time_tag());
}

FeatureMap backward_warp(const FeatureMap& payload, const FlowField& flow) {
  check_input(payload);
  check_input(flow);
  require_same_size(payload.height(), payload.width(), flow.height(), flow.width(), "backward_warp");
  auto out = backward_warp(to_nchw(payload), to_nchw(flow).to(payload.data().scalar_type()));
  return feature_from_nchw(out, 0, payload.stage(), payload.scale());
}

Tensor occlusion_oracle(const Tensor& fwd_in, const Tensor& bwd_in, ConsistencyThresholds th) {
  if (fwd_in.sizes() != bwd_in.sizes()) throw ShapeMismatch("forward and backward flows differ in shape");
  auto fwd = fwd_in.detach();
  auto bwd = bwd_in.detach();
  require_flow_for(bwd, fwd);
  const int64_t h = fwd.size(2), w = fwd.size(3);
  auto [xs, ys] = pixel_grid(h, w, fwd.options());
  auto tx = xs + fwd.select(1, 0);
  auto ty = ys + fwd.select(1, 1);
  auto outside = (tx < 0) | (tx > static_cast<double>(w - 1)) | (ty < 0) | (ty > static_cast<double>(h - 1));
  auto back = backward_warp(bwd, fwd);
  auto lhs = (fwd + back).pow(2).sum(1);
  auto rhs = th.a * (fwd.pow(2).sum(1) + back.pow(2).sum(1)) + th.b;
  return ((lhs > rhs) | outside).unsqueeze(1).to(fwd.scalar_type());
}

OcclusionMap occlusion_oracle(const FlowField& fwd, const FlowField& bwd, ConsistencyThresholds th) {
  check_input(fwd);
  check_input(bwd);
  require_same_size(fwd.height(), fwd.width(), bwd.height(), bwd.width(), "occlusion_oracle");
  return occlusion_from_nchw(occlusion_oracle(to_nchw(fwd), to_nchw(bwd), th), 0);
}

Tensor flow_to_feature_scale(const Tensor& flow, int64_t height, int64_t width, int64_t scale) {
  return F::adaptive_avg_pool2d(flow, F::AdaptiveAvgPool2dFuncOptions({height, width})) /
         static_cast<double>(scale);
}

double binary_iou(const Tensor& a, const Tensor& b) {
  auto x = a.to(torch::kBool), y = b.to(torch::kBool);
  const auto inter = (x & y).sum().item<int64_t>();
  const auto uni = (x | y).sum().item<int64_t>();
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

// ---------------------------------------------------------------------------
// WarpNet

namespace {
constexpr int64_t kFlowChannels = 8;
}

WarpNetImpl::WarpNetImpl(WarpNetConfig config) : config_(config) {
  if (config_.width < 1 || config_.depth < 1) throw ConfigError("WarpNet width and depth must be positive");
  const int64_t w0 = config_.width;
  image_in_ = register_module("image_in", conv3x3(config_.image_channels + kFlowChannels, w0));
  feature_in_ = register_module("feature_in", conv3x3(config_.feature_channels + kFlowChannels, w0));
  for (int64_t e = 1; e <= config_.depth; ++e) {
    const int64_t in = stage_width(w0, e - 1), out = stage_width(w0, e);
    down_->push_back(torch::nn::Sequential(conv3x3(in, out, 2), torch::nn::ReLU(), conv3x3(out, out),
                                           torch::nn::ReLU()));
    up_->push_back(conv3x3(out + in, in));
  }
  register_module("down", down_);
  register_module("up", up_);
  occ_head_ = register_module("occ_head", conv3x3(w0, 1));
  refine_head_ = register_module("refine_head", conv3x3(w0, w0));
  image_out_ = register_module("image_out", torch::nn::Conv2d(torch::nn::Conv2dOptions(w0, config_.image_channels, 1)));
  feature_out_ =
      register_module("feature_out", torch::nn::Conv2d(torch::nn::Conv2dOptions(w0, config_.feature_channels, 1)));
  zero_(occ_head_);
  zero_(image_out_);
  zero_(feature_out_);
}

Tensor WarpNetImpl::flow_channels(const Tensor& fwd, const Tensor& sample) const {
  // Everything is expressed on the output grid, where `sample` lives.
  const int64_t h = fwd.size(2), w = fwd.size(3);
  auto norm = torch::tensor({2.0 / static_cast<double>(w), 2.0 / static_cast<double>(h)}, fwd.options()).view({1, 2, 1, 1});
  auto [xs, ys] = pixel_grid(h, w, fwd.options());
  auto tx = (xs + sample.select(1, 0)) * (2.0 / static_cast<double>(std::max<int64_t>(w - 1, 1))) - 1.0;
  auto ty = (ys + sample.select(1, 1)) * (2.0 / static_cast<double>(std::max<int64_t>(h - 1, 1))) - 1.0;
  auto residual = sample + backward_warp(fwd, sample);
  return torch::cat({fwd * norm, sample * norm, residual * norm, torch::stack({tx, ty}, 1)}, 1);
}

WarpNetOutput WarpNetImpl::forward(const Tensor& payload, PayloadKind kind, const Tensor& fwd,
                                   const std::optional<Tensor>& bwd) {
  require_flow_for(payload, fwd);
  if (bwd) {
    if (bwd->sizes() != fwd.sizes()) throw ShapeMismatch("forward and backward flows differ in shape");
  } else if (config_.require_bidirectional) {
    throw ModeError("WarpNet configured for bidirectional flow but no backward flow was given");
  }
  const int64_t expected = kind == PayloadKind::image ? config_.image_channels : config_.feature_channels;
  if (payload.size(1) != expected)
    throw ShapeMismatch("WarpNet payload has " + std::to_string(payload.size(1)) + " channels, expected " +
                        std::to_string(expected));

  // Output grid = the grid of the backward flow; single-flow mode stands in
  // -fwd for it (constant-velocity approximation).
  const Tensor sample_flow = bwd ? *bwd : -fwd;
  Tensor base = backward_warp(payload, sample_flow);

  auto adapter = kind == PayloadKind::image ? image_in_ : feature_in_;
  Tensor x = torch::relu(adapter->forward(torch::cat({payload, flow_channels(fwd, sample_flow)}, 1)));
  std::vector<Tensor> skips{x};
  for (std::size_t e = 0; e < down_->size(); ++e) {
    x = down_[e]->as<torch::nn::Sequential>()->forward(x);
    skips.push_back(x);
  }
  for (auto e = static_cast<int64_t>(up_->size()) - 1; e >= 0; --e) {
    const Tensor& skip = skips[static_cast<std::size_t>(e)];
    auto up = F::interpolate(x, F::InterpolateFuncOptions()
                                    .size(std::vector<int64_t>{skip.size(2), skip.size(3)})
                                    .mode(torch::kBilinear)
                                    .align_corners(false));
    x = torch::relu(up_[static_cast<std::size_t>(e)]->as<torch::nn::Conv2d>()->forward(torch::cat({up, skip}, 1)));
  }

  Tensor occ = torch::sigmoid(occ_head_->forward(x));
  auto out_adapter = kind == PayloadKind::image ? image_out_ : feature_out_;
  Tensor refined = base + out_adapter->forward(torch::relu(refine_head_->forward(x)));
  Tensor warped = base * (1 - occ) + refined * occ;
  return {warped, occ, base, refined};
}

std::string WarpNetImpl::architecture() const {
  std::ostringstream os;
  os << "warpnet";
  for (const auto& p : named_parameters()) {
    os << ';' << p.key() << ':';
    for (auto s : p.value().sizes()) os << s << ',';
  }
  return os.str();
}

std::pair<Frame, OcclusionMap> warpnet_forward(WarpNet& net, const Frame& payload, const FlowField& fwd,
                                               const std::optional<FlowField>& bwd) {
  check_input(payload);
  check_input(fwd);
  require_same_size(payload.height(), payload.width(), fwd.height(), fwd.width(), "warpnet_forward");
  std::optional<Tensor> b;
  if (bwd) {
    check_input(*bwd);
    b = to_nchw(*bwd);
  }
  auto out = net->forward(to_nchw(payload), PayloadKind::image, to_nchw(fwd), b);
  return {Frame(out.warped[0].permute({1, 2, 0}).clamp(0, 1).contiguous(), payload.time_tag()),
          occlusion_from_nchw(out.occ, 0)};
}

std::pair<FeatureMap, OcclusionMap> warpnet_forward(WarpNet& net, const FeatureMap& payload, const FlowField& fwd,
                                                    const std::optional<FlowField>& bwd) {
  check_input(payload);
  check_input(fwd);
  require_same_size(payload.height(), payload.width(), fwd.height(), fwd.width(), "warpnet_forward");
  std::optional<Tensor> b;
  if (bwd) {
    check_input(*bwd);
    b = to_nchw(*bwd);
  }
  auto out = net->forward(to_nchw(payload), PayloadKind::feature, to_nchw(fwd), b);
  return {feature_from_nchw(out.warped, 0, payload.stage(), payload.scale()), occlusion_from_nchw(out.occ, 0)};
}

}  // namespace kinflow::warp
