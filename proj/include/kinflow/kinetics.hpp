#pragma once

#include <random>
#include <string>

#include "kinflow/core.hpp"
#include "kinflow/losses.hpp"
#include "kinflow/model.hpp"

namespace kinflow::kinetics {

enum class AlphaSampling { fixed, uniform };

const char* to_string(AlphaSampling s);
AlphaSampling alpha_sampling_from_string(const std::string& s);  // ConfigError

struct KineticsConfig {
  AlphaSampling alpha_sampling = AlphaSampling::uniform;
  double alpha = 0.5;  // fixed mode
  double lo = 0.1;     // uniform mode range
  double hi = 0.9;
  bool teacher_detached = true;  // always true; recorded for the config echo
  bool freeze_encoder = false;
};

/// Throws ConfigError unless the sampled values are guaranteed in (0, 1).
void validate(const KineticsConfig& config);

/// One Δt per batch.
double sample_alpha(const KineticsConfig& config, std::mt19937_64& rng);

/// alpha * flow, detached; RangeError unless 0 < alpha < 1.
Tensor motion_generator(const Tensor& full_flow, double alpha);
FlowField motion_generator(const FlowField& full_flow, double alpha);

struct KglResult {
  Tensor loss;        // kinetics + perceptual, differentiable
  Tensor kinetics;    // the kinetics term alone
  Tensor perceptual;  // the perceptual term alone
  Tensor teacher;     // [B, 2, H, W], detached
  std::vector<Tensor> student;
};

/// Teacher-student step: the full-interval prediction, scaled by alpha and
/// detached, supervises the decoder on (F0, WarpNet(F0, teacher)). The
/// perceptual term compares I0 with WarpNet's image-mode reconstruction of
/// it from I1; it trains WarpNet only.
KglResult kgl_step(model::FlowModel& model, losses::PerceptualExtractor& extractor, const Tensor& i0,
                   const Tensor& i1, double alpha, const losses::LossConfig& loss_cfg);

struct KglDomainResult {
  Tensor loss;
  FlowField teacher;
  FlowSequence student;
};

KglDomainResult kgl_step(model::FlowModel& model, losses::PerceptualExtractor& extractor, const Frame& i0,
                         const Frame& i1, double alpha, const losses::LossConfig& loss_cfg);

}  // namespace kinflow::kinetics
