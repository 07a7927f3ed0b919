#pragma once

#include <optional>
#include <vector>

#include "kinflow/core.hpp"

namespace kinflow::losses {

struct LossConfig {
  double gamma = 0.8;
  double lambda_perc = 1.0;
  double lambda_occ = 1.0;
  double lambda_kin = 1.0;
  std::vector<int64_t> perc_scales{1, 2, 4};
  std::vector<int64_t> perc_layers{0, 1, 2, 3, 4};
};

/// Throws ConfigError naming the offending field.
void validate(const LossConfig& config);

/// Frozen random-weight conv pyramid standing in for a pretrained perceptual
/// network. Weights come from a private generator, so the same seed gives the
/// same extractor regardless of what else touched torch's global RNG.
class PerceptualExtractorImpl : public torch::nn::Module {
 public:
  static constexpr int64_t kLayers = 5;

  explicit PerceptualExtractorImpl(int64_t channels = 3, RngSeed seed = {0x9e3779b9});

  /// Activations of every layer, shallow to deep. Runs in the input's dtype.
  std::vector<Tensor> forward(const Tensor& images);

  /// Replaces layer weights, e.g. with a real pretrained network's first
  /// layers. Shapes must match (ShapeMismatch otherwise).
  void load_weights(const std::vector<Tensor>& weights, const std::vector<Tensor>& biases);

 private:
  std::vector<Tensor> weights_, biases_;
  std::vector<int64_t> strides_;
};
TORCH_MODULE(PerceptualExtractor);

/// Mean over valid pixels of |du| + |dv|. pred/gt [B, 2, H, W]; valid
/// [B, 1, H, W] (1 = valid) or undefined for dense gt. EmptyValidSet if no
/// pixel is valid.
Tensor flow_l1(const Tensor& pred, const Tensor& gt, const Tensor& valid = {});

/// sum_i gamma^(N-i) flow_l1(pred_i, gt).
Tensor seq_l1(const std::vector<Tensor>& preds, const Tensor& gt, double gamma, const Tensor& valid = {});

/// sum over scales j and layers i of mean |V_i(a_j) - V_i(b_j)|.
Tensor perceptual(PerceptualExtractor& extractor, const Tensor& a, const Tensor& b, const LossConfig& cfg);

/// Mean absolute difference of occlusion maps [B, 1, H, W].
Tensor occ_l1(const Tensor& pred, const Tensor& gt);

/// seq_l1 against a stop-gradient teacher.
Tensor kinetics_loss(const Tensor& teacher, const std::vector<Tensor>& student, double gamma,
                     const Tensor& valid = {});

/// L1 + lambda_perc * perceptual + lambda_occ * occ; occ may be undefined
/// when no ground-truth occlusion is available.
Tensor ail_total(const Tensor& l1, const Tensor& perc, const Tensor& occ, const LossConfig& cfg);
/// lambda_kin * kinetics + lambda_perc * perceptual.
Tensor kgl_total(const Tensor& kin, const Tensor& perc, const LossConfig& cfg);

// Domain-level forms.
Tensor seq_l1(const FlowSequence& preds, const FlowField& gt, double gamma);
Tensor perceptual(PerceptualExtractor& extractor, const Frame& a, const Frame& b, const LossConfig& cfg);
Tensor occ_l1(const OcclusionMap& pred, const OcclusionMap& gt);
Tensor kinetics_loss(const FlowField& teacher, const FlowSequence& student, double gamma);

}  // namespace kinflow::losses
