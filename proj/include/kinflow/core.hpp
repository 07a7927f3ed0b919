#pragma once

// Domain types shared by every module: frames, flow fields, feature maps,
// occlusion maps, and the error taxonomy used across the library and CLI.
//
// Axis order for all domain types is [height, width, channel]. Network code
// works on batched NCHW tensors; the conversion helpers at the bottom of this
// header are the only place where the two layouts meet.

#include <torch/torch.h>

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#ifndef KINFLOW_VALIDATE_INPUTS
#define KINFLOW_VALIDATE_INPUTS 1
#endif

namespace kinflow {

using Tensor = torch::Tensor;

// ---------------------------------------------------------------------------
// Errors

/// Base of every error raised by the library. `kind()` is the stable,
/// machine-readable name; `exit_code()` is what the CLI returns for it.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message, int exit_code);

  const std::string& kind() const noexcept { return kind_; }
  int exit_code() const noexcept { return exit_code_; }

 private:
  std::string kind_;
  int exit_code_;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitConfig = 3;
inline constexpr int kExitIo = 4;
inline constexpr int kExitRuntime = 5;

class InvariantViolation : public Error {
 public:
  InvariantViolation(std::string invariant, std::vector<int64_t> index = {});

  const std::string& invariant() const noexcept { return invariant_; }
  const std::vector<int64_t>& index() const noexcept { return index_; }

 private:
  std::string invariant_;
  std::vector<int64_t> index_;
};

#define KINFLOW_DECLARE_ERROR(Name, code)                                     \
  class Name : public Error {                                                 \
   public:                                                                    \
    explicit Name(const std::string& message) : Error(#Name, message, code) {} \
  }

KINFLOW_DECLARE_ERROR(ShapeMismatch, kExitRuntime);
KINFLOW_DECLARE_ERROR(StageError, kExitRuntime);
KINFLOW_DECLARE_ERROR(RangeError, kExitRuntime);
KINFLOW_DECLARE_ERROR(ModeError, kExitRuntime);
KINFLOW_DECLARE_ERROR(EmptyValidSet, kExitRuntime);
KINFLOW_DECLARE_ERROR(FormatError, kExitIo);
KINFLOW_DECLARE_ERROR(IoError, kExitIo);
KINFLOW_DECLARE_ERROR(ConfigError, kExitConfig);
KINFLOW_DECLARE_ERROR(SpecError, kExitConfig);
KINFLOW_DECLARE_ERROR(PreconditionError, kExitConfig);
KINFLOW_DECLARE_ERROR(UsageError, kExitUsage);

#undef KINFLOW_DECLARE_ERROR

// ---------------------------------------------------------------------------
// Domain types. All are immutable after construction; tensors are never
// mutated in place by library code once wrapped.

/// Image in [0, 1], shape [H, W, C] with C in {1, 3}.
class Frame {
 public:
  explicit Frame(Tensor pixels, double time_tag = 0.0);

  const Tensor& pixels() const noexcept { return pixels_; }
  double time_tag() const noexcept { return time_tag_; }
  int64_t height() const { return pixels_.size(0); }
  int64_t width() const { return pixels_.size(1); }
  int64_t channels() const { return pixels_.size(2); }

 private:
  Tensor pixels_;
  double time_tag_;
};

/// Per-pixel displacement [H, W, 2]; component 0 is horizontal (u), 1 is
/// vertical (v). Forward convention: the correspondence of pixel p in the
/// second frame is p + uv(p). An optional boolean [H, W] mask marks pixels
/// carrying ground truth (sparse, KITTI-style).
class FlowField {
 public:
  explicit FlowField(Tensor uv, std::optional<Tensor> valid = std::nullopt);

  const Tensor& uv() const noexcept { return uv_; }
  const std::optional<Tensor>& valid() const noexcept { return valid_; }
  bool has_mask() const noexcept { return valid_.has_value(); }
  int64_t height() const { return uv_.size(0); }
  int64_t width() const { return uv_.size(1); }

  /// Boolean [H, W] mask; all-true when no mask is attached.
  Tensor valid_or_all() const;

 private:
  Tensor uv_;
  std::optional<Tensor> valid_;
};

/// Ordered intermediate predictions; the last item is the final prediction.
class FlowSequence {
 public:
  FlowSequence() = default;
  explicit FlowSequence(std::vector<FlowField> items);

  const std::vector<FlowField>& items() const noexcept { return items_; }
  std::size_t size() const noexcept { return items_.size(); }
  const FlowField& last() const;

 private:
  std::vector<FlowField> items_;
};

enum class FeatureStage { raw, pos_embedded, self_attended, cross_attended };

const char* to_string(FeatureStage stage);

/// Latent map [H', W', D] at integer downsampling `scale` from its frame.
class FeatureMap {
 public:
  FeatureMap(Tensor data, FeatureStage stage, int64_t scale);

  const Tensor& data() const noexcept { return data_; }
  FeatureStage stage() const noexcept { return stage_; }
  int64_t scale() const noexcept { return scale_; }
  int64_t height() const { return data_.size(0); }
  int64_t width() const { return data_.size(1); }
  int64_t channels() const { return data_.size(2); }

 private:
  Tensor data_;
  FeatureStage stage_;
  int64_t scale_;
};

/// Occlusion probability [H, W] in [0, 1]; 1 means visible in the first
/// frame but without a correspondence in the second.
class OcclusionMap {
 public:
  explicit OcclusionMap(Tensor occ);

  const Tensor& occ() const noexcept { return occ_; }
  int64_t height() const { return occ_.size(0); }
  int64_t width() const { return occ_.size(1); }

  /// occ > 0.5
  Tensor binary() const;

 private:
  Tensor occ_;
};

struct RngSeed {
  uint64_t value = 0;
  friend bool operator==(RngSeed, RngSeed) = default;
};

// ---------------------------------------------------------------------------
// Validation

void validate(const Frame& frame);
void validate(const FlowField& flow);
void validate(const FlowSequence& seq);
void validate(const FeatureMap& map);
/// Additionally checks H' = ceil(H / scale), W' = ceil(W / scale).
void validate(const FeatureMap& map, int64_t source_height, int64_t source_width);
void validate(const OcclusionMap& map);

/// Validation hook used at public entry points. Compiled out when the
/// library is configured with KINFLOW_VALIDATE_INPUTS=OFF.
template <typename T>
inline void check_input(const T& value) {
  if constexpr (KINFLOW_VALIDATE_INPUTS != 0) validate(value);
}

/// Throws ShapeMismatch unless both have equal height and width.
void require_same_size(int64_t h0, int64_t w0, int64_t h1, int64_t w1, const char* what);

// ---------------------------------------------------------------------------
// Seeding

/// Seeds torch's global generator; model initialisation is drawn from it.
void seed_torch(RngSeed seed);

/// Independent engine for one named randomness stream derived from a seed.
std::mt19937_64 make_engine(RngSeed seed, uint64_t stream);

// ---------------------------------------------------------------------------
// Layout conversion

Tensor to_nchw(const Frame& frame);          // [1, C, H, W]
Tensor to_nchw(const FlowField& flow);       // [1, 2, H, W]
Tensor to_nchw(const OcclusionMap& occ);     // [1, 1, H, W]
Tensor to_nchw(const FeatureMap& map);       // [1, D, H', W']
Tensor valid_to_nchw(const FlowField& flow); // [1, 1, H, W] float, 1 = valid

Tensor stack_frames(std::span<const Frame> frames);   // [B, C, H, W]
Tensor stack_flows(std::span<const FlowField> flows); // [B, 2, H, W]

Frame frame_from_nchw(const Tensor& batch, int64_t index, double time_tag = 0.0);
FlowField flow_from_nchw(const Tensor& batch, int64_t index);
OcclusionMap occlusion_from_nchw(const Tensor& batch, int64_t index);
FeatureMap feature_from_nchw(const Tensor& batch, int64_t index, FeatureStage stage,
                             int64_t scale);

}  // namespace kinflow
