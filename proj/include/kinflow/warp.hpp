#pragma once

#include <optional>
#include <string>

#include "kinflow/core.hpp"

namespace kinflow::warp {

// ---------------------------------------------------------------------------
// Classical warping

/// out(p) = bilinear(payload, p + flow(p)) with sample coordinates clamped to
/// the border. payload [B, C, H, W], flow [B, 2, H, W]; any floating dtype.
/// Differentiable with respect to both arguments.
Tensor backward_warp(const Tensor& payload, const Tensor& flow);

Frame backward_warp(const Frame& payload, const FlowField& flow);
/// `flow` must already be expressed at the feature resolution.
FeatureMap backward_warp(const FeatureMap& payload, const FlowField& flow);

/// Forward-backward consistency tolerance: p is occluded when
/// |f(p) + b(p + f(p))|^2 > a (|f(p)|^2 + |b(p + f(p))|^2) + b_offset.
struct ConsistencyThresholds {
  double a = 0.01;
  double b = 0.5;
};

/// Binary occlusion [B, 1, H, W] (1 = occluded); pixels whose target leaves
/// the frame are always occluded.
Tensor occlusion_oracle(const Tensor& fwd, const Tensor& bwd, ConsistencyThresholds th = {});
OcclusionMap occlusion_oracle(const FlowField& fwd, const FlowField& bwd, ConsistencyThresholds th = {});

/// Flow resampled to a feature grid of `height` x `width` (area average) and
/// divided by `scale`, so displacements are in feature pixels.
Tensor flow_to_feature_scale(const Tensor& flow, int64_t height, int64_t width, int64_t scale);

/// Intersection over union of two binary maps; 1 when both are empty.
double binary_iou(const Tensor& a, const Tensor& b);

// ---------------------------------------------------------------------------
// WarpNet

enum class PayloadKind { image, feature };

struct WarpNetConfig {
  int64_t image_channels = 3;
  int64_t feature_channels = 128;
  int64_t width = 32;  // D_w
  int64_t depth = 3;   // E down/up stages
  bool require_bidirectional = false;
};

struct WarpNetOutput {
  Tensor warped;   // same shape as payload
  Tensor occ;      // [B, 1, H, W] in [0, 1]
  Tensor base;     // classical backward warp of the payload
  Tensor refined;  // refinement branch used inside occluded regions
};

/// Learnable occlusion-aware warp. An encoder-decoder over the payload and
/// its flow channels predicts an occlusion map and a refinement of the
/// classical warp; the output blends the two per pixel:
///   warped = base * (1 - occ) + refined * occ.
/// `fwd` maps the payload's time to the target time and `bwd` the reverse, so
/// the output lives on the grid of `bwd`: the classical warp samples the
/// payload through bwd, approximated by -fwd when only the forward flow is
/// given (single-flow mode). occ = 1 marks output pixels with no source in
/// the payload. Both heads start at zero so an untrained net returns the
/// classical warp with occ = 0.5.
class WarpNetImpl : public torch::nn::Module {
 public:
  explicit WarpNetImpl(WarpNetConfig config = {});

  /// payload [B, C, H, W]; fwd/bwd [B, 2, H, W] at the payload's resolution.
  /// Without bwd (single-flow mode) -fwd fills the backward slot.
  WarpNetOutput forward(const Tensor& payload, PayloadKind kind, const Tensor& fwd,
                        const std::optional<Tensor>& bwd = std::nullopt);

  const WarpNetConfig& config() const noexcept { return config_; }

  /// Stable string describing layer names and shapes, for checkpoints.
  std::string architecture() const;

 private:
  Tensor flow_channels(const Tensor& fwd, const Tensor& sample) const;

  WarpNetConfig config_;
  torch::nn::Conv2d image_in_{nullptr}, feature_in_{nullptr};
  torch::nn::ModuleList down_, up_;
  torch::nn::Conv2d occ_head_{nullptr}, refine_head_{nullptr};
  torch::nn::Conv2d image_out_{nullptr}, feature_out_{nullptr};
};
TORCH_MODULE(WarpNet);

std::pair<Frame, OcclusionMap> warpnet_forward(WarpNet& net, const Frame& payload, const FlowField& fwd,
                                               const std::optional<FlowField>& bwd = std::nullopt);

/// Feature payload with flows already at the feature resolution.
std::pair<FeatureMap, OcclusionMap> warpnet_forward(WarpNet& net, const FeatureMap& payload,
                                                    const FlowField& fwd,
                                                    const std::optional<FlowField>& bwd = std::nullopt);

}  // namespace kinflow::warp
