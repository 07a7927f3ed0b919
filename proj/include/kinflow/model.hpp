#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "kinflow/core.hpp"
#include "kinflow/warp.hpp"

namespace kinflow::model {

enum class Upsampler { bilinear, convex };
enum class AuxSource { second, first };  // which stream K_aux channels are copied from

const char* to_string(Upsampler u);
const char* to_string(AuxSource a);
Upsampler upsampler_from_string(const std::string& s);  // ConfigError
AuxSource aux_source_from_string(const std::string& s);  // ConfigError

struct ModelConfig {
  int64_t image_channels = 3;
  int64_t scale = 8;   // s, a power of two
  int64_t dim = 128;   // D
  int64_t heads = 4;
  int64_t self_layers = 2;
  int64_t cross_layers = 2;
  int64_t top_k = 64;  // K
  int64_t residual_blocks = 4;  // R = N
  int64_t hidden = 128;
  bool learned_pos = true;
  AuxSource aux_source = AuxSource::second;
  Upsampler upsampler = Upsampler::bilinear;
  int64_t warp_width = 32;
  int64_t warp_depth = 3;
};

/// Throws ConfigError naming the offending field.
void validate(const ModelConfig& config);

warp::WarpNetConfig warpnet_config(const ModelConfig& config);

// ---------------------------------------------------------------------------
// Encoder

/// log2(s) stride-2 convolutions, a residual block and a 1x1 projection to D.
class EncoderImpl : public torch::nn::Module {
 public:
  explicit EncoderImpl(const ModelConfig& config);
  Tensor forward(const Tensor& images);  // [B, C, H, W] in [0, 1] -> [B, D, ceil(H/s), ceil(W/s)]

 private:
  torch::nn::Sequential stem_{nullptr};
  torch::nn::Conv2d res_a_{nullptr}, res_b_{nullptr}, proj_{nullptr};
};
TORCH_MODULE(Encoder);

// ---------------------------------------------------------------------------
// Decoder

/// Post-norm multi-head attention block: y = LN(x + MHA(x, kv, kv)),
/// out = LN(y + FFN(y)). Tokens are [B, N, D].
class AttentionBlockImpl : public torch::nn::Module {
 public:
  AttentionBlockImpl(int64_t dim, int64_t heads);
  Tensor forward(const Tensor& x, const Tensor& kv);
  /// Softmax attention weights [B, heads, N, M].
  Tensor weights(const Tensor& x, const Tensor& kv);
  /// Output projection applied to the value projection of kv; equals the
  /// attention output whenever kv holds a single token.
  Tensor value_path(const Tensor& kv);

  torch::nn::Linear q{nullptr}, k{nullptr}, v{nullptr}, o{nullptr};
  torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Linear ff1{nullptr}, ff2{nullptr};

 private:
  Tensor split_heads(const Tensor& t) const;
  int64_t heads_;
};
TORCH_MODULE(AttentionBlock);

/// Channel-wise cosine similarity between matching channels of a and b,
/// [B, D] float64; zero when either channel is all zeros.
Tensor channel_scores(const Tensor& a, const Tensor& b);

/// Channels of `source` ([B, D, h, w]) with the K highest scores, in
/// descending score order; ties go to the lower channel index.
Tensor topk_aux(const Tensor& f0, const Tensor& f1, int64_t k, const Tensor& source);

class MotionDecoderImpl : public torch::nn::Module {
 public:
  explicit MotionDecoderImpl(const ModelConfig& config);

  Tensor add_channel_pos(const Tensor& f);
  /// Self attention on each stream, then cross attention with the other
  /// stream's positional features as keys and values.
  std::pair<Tensor, Tensor> attend(const Tensor& f0p, const Tensor& f1p);
  Tensor aux(const Tensor& f0cc, const Tensor& f1cc);
  /// Intermediate full-resolution flows [B, 2, H, W], one per residual block.
  std::vector<Tensor> decode_flow(const Tensor& f0cc, const Tensor& f1cc, const Tensor& k_aux, int64_t height,
                                  int64_t width);

  /// Raw features -> flow sequence (forward direction only).
  std::vector<Tensor> forward(const Tensor& f0, const Tensor& f1, int64_t height, int64_t width);
  /// Forward and backward sequences from one attention pass; the backward
  /// direction swaps the roles of the two streams.
  std::pair<std::vector<Tensor>, std::vector<Tensor>> forward_bidirectional(const Tensor& f0, const Tensor& f1,
                                                                            int64_t height, int64_t width);

  Tensor pos;  // P [D]
  torch::nn::ModuleList self_blocks, cross_blocks;
  torch::nn::ModuleList flow_heads;

 private:
  Tensor upsample(const Tensor& flow, const Tensor& hidden, int64_t height, int64_t width);

  ModelConfig config_;
  torch::nn::Conv2d in_proj_{nullptr};
  torch::nn::ModuleList res_blocks_;
  torch::nn::Conv2d mask_head_{nullptr};
};
TORCH_MODULE(MotionDecoder);

// ---------------------------------------------------------------------------
// Full model

/// Encoder, motion decoder and WarpNet. Parameters are initialised from
/// torch's global generator, so call seed_torch first for reproducibility.
class FlowModelImpl : public torch::nn::Module {
 public:
  explicit FlowModelImpl(ModelConfig config = {});

  std::vector<Tensor> predict(const Tensor& i0, const Tensor& i1);
  std::pair<std::vector<Tensor>, std::vector<Tensor>> predict_bidirectional(const Tensor& i0, const Tensor& i1);

  const ModelConfig& config() const noexcept { return config_; }
  /// Config and parameter shapes; checkpoints refuse to load across a change.
  std::string architecture() const;

  Encoder encoder{nullptr};
  MotionDecoder decoder{nullptr};
  warp::WarpNet warpnet{nullptr};

 private:
  ModelConfig config_;
};
TORCH_MODULE(FlowModel);

/// Hook for externally trained encoder weights (e.g. a feature-matching
/// backbone). Keys are encoder parameter names; every key must exist with a
/// matching shape (ConfigError / ShapeMismatch otherwise). Returns the number
/// of tensors copied.
std::size_t load_encoder_weights(FlowModel& model, const std::map<std::string, Tensor>& weights);

// ---------------------------------------------------------------------------
// Domain-level operations

FeatureMap encode(FlowModel& model, const Frame& frame);
FeatureMap add_channel_pos(FlowModel& model, const FeatureMap& raw);  // StageError unless raw
std::pair<FeatureMap, FeatureMap> attend(FlowModel& model, const FeatureMap& f0p, const FeatureMap& f1p);
/// K_aux copied from f1 (the spec-level operation); ConfigError if K > D.
FeatureMap topk_aux(const FeatureMap& f0cc, const FeatureMap& f1cc, int64_t k);
FlowSequence decode_flow(FlowModel& model, const FeatureMap& f0cc, const FeatureMap& f1cc, const FeatureMap& k_aux,
                         int64_t height, int64_t width);
FlowSequence predict(FlowModel& model, const Frame& i0, const Frame& i1);

}  // namespace kinflow::model
