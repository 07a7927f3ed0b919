#include "kinflow/model.hpp"

#include <cmath>
#include <sstream>

namespace kinflow::model {

namespace F = torch::nn::functional;

namespace {

bool is_power_of_two(int64_t v) { return v > 0 && (v & (v - 1)) == 0; }

int64_t log2i(int64_t v) {
  int64_t n = 0;
  while (v > 1) {
    v >>= 1;
    ++n;
  }
  return n;
}

torch::nn::Conv2d conv(int64_t in, int64_t out, int64_t k, int64_t stride = 1) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, k).stride(stride).padding(k / 2));
}

void zero_(torch::nn::Conv2d& c) {
  torch::NoGradGuard g;
  c->weight.zero_();
  c->bias.zero_();
}

// [B, D, h, w] <-> [B, h*w, D]
Tensor to_tokens(const Tensor& f) { return f.flatten(2).transpose(1, 2); }
Tensor from_tokens(const Tensor& t, int64_t h, int64_t w) {
  return t.transpose(1, 2).reshape({t.size(0), t.size(2), h, w});
}

void require_nchw_pair(const Tensor& a, const Tensor& b, const char* what) {
  if (a.dim() != 4 || a.sizes() != b.sizes()) throw ShapeMismatch(std::string(what) + ": feature shapes differ");
}

}  // namespace

const char* to_string(Upsampler u) { return u == Upsampler::bilinear ? "bilinear" : "convex"; }
const char* to_string(AuxSource a) { return a == AuxSource::second ? "second" : "first"; }

Upsampler upsampler_from_string(const std::string& s) {
  if (s == "bilinear") return Upsampler::bilinear;
  if (s == "convex") return Upsampler::convex;
  throw ConfigError("upsampler must be bilinear or convex, got '" + s + "'");
}

AuxSource aux_source_from_string(const std::string& s) {
  if (s == "second") return AuxSource::second;
  if (s == "first") return AuxSource::first;
  throw ConfigError("aux_source must be first or second, got '" + s + "'");
}

void validate(const ModelConfig& c) {
  auto fail = [](const std::string& key, const std::string& why) { throw ConfigError(key + ": " + why); };
  if (c.image_channels != 1 && c.image_channels != 3) fail("image_channels", "must be 1 or 3");
  if (!is_power_of_two(c.scale) || c.scale < 2) fail("scale", "must be a power of two >= 2");
  if (c.dim < 1) fail("dim", "must be positive");
  if (c.heads < 1 || c.dim % c.heads != 0) fail("heads", "must divide dim");
  if (c.self_layers < 0 || c.cross_layers < 0) fail("self_layers", "layer counts must be >= 0");
  if (c.top_k < 1 || c.top_k > c.dim) fail("top_k", "K must satisfy 1 <= K <= D");
  if (c.residual_blocks < 1) fail("residual_blocks", "must be >= 1");
  if (c.hidden < 1) fail("hidden", "must be positive");
  if (c.warp_width < 1) fail("warp_width", "must be positive");
  if (c.warp_depth < 1) fail("warp_depth", "must be positive");
}

warp::WarpNetConfig warpnet_config(const ModelConfig& c) {
  warp::WarpNetConfig w;
  w.image_channels = c.image_channels;
  w.feature_channels = c.dim;
  w.width = c.warp_width;
  w.depth = c.warp_depth;
  return w;
}

// ---------------------------------------------------------------------------

EncoderImpl::EncoderImpl(const ModelConfig& c) {
  stem_ = torch::nn::Sequential();
  int64_t in = c.image_channels;
  const int64_t stages = log2i(c.scale);
  for (int64_t i = 0; i < stages; ++i) {
    const int64_t out = std::min<int64_t>(32 << i, 128);
    stem_->push_back(conv(in, out, i == 0 ? 7 : 3, 2));
    stem_->push_back(torch::nn::ReLU());
    in = out;
  }
  register_module("stem", stem_);
  res_a_ = register_module("res_a", conv(in, in, 3));
  res_b_ = register_module("res_b", conv(in, in, 3));
  proj_ = register_module("proj", conv(in, c.dim, 1));
}

Tensor EncoderImpl::forward(const Tensor& images) {
  auto x = stem_->forward(images * 2 - 1);
  x = torch::relu(x + res_b_->forward(torch::relu(res_a_->forward(x))));
  return proj_->forward(x);
}

// ---------------------------------------------------------------------------

AttentionBlockImpl::AttentionBlockImpl(int64_t dim, int64_t heads) : heads_(heads) {
  q = register_module("q", torch::nn::Linear(dim, dim));
  k = register_module("k", torch::nn::Linear(dim, dim));
  v = register_module("v", torch::nn::Linear(dim, dim));
  o = register_module("o", torch::nn::Linear(dim, dim));
  norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  ff1 = register_module("ff1", torch::nn::Linear(dim, 2 * dim));
  ff2 = register_module("ff2", torch::nn::Linear(2 * dim, dim));
}

Tensor AttentionBlockImpl::split_heads(const Tensor& t) const {
  // [B, N, D] -> [B, h, N, D/h]
  return t.view({t.size(0), t.size(1), heads_, t.size(2) / heads_}).transpose(1, 2);
}

Tensor AttentionBlockImpl::weights(const Tensor& x, const Tensor& kv) {
  auto qh = split_heads(q->forward(x));
  auto kh = split_heads(k->forward(kv));
  const double scale = 1.0 / std::sqrt(static_cast<double>(qh.size(3)));
  return torch::softmax(torch::matmul(qh, kh.transpose(2, 3)) * scale, -1);
}

Tensor AttentionBlockImpl::value_path(const Tensor& kv) { return o->forward(v->forward(kv)); }

Tensor AttentionBlockImpl::forward(const Tensor& x, const Tensor& kv) {
  auto att = weights(x, kv);
  auto vh = split_heads(v->forward(kv));
  auto mixed = torch::matmul(att, vh).transpose(1, 2).reshape(x.sizes());
  auto y = norm1->forward(x + o->forward(mixed));
  return norm2->forward(y + ff2->forward(torch::gelu(ff1->forward(y))));
}

// ---------------------------------------------------------------------------

Tensor channel_scores(const Tensor& a, const Tensor& b) {
  if (a.dim() != 4 || a.sizes() != b.sizes()) throw ShapeMismatch("channel_scores: feature shapes differ");
  auto x = a.detach().to(torch::kFloat64).flatten(2);
  auto y = b.detach().to(torch::kFloat64).flatten(2);
  auto dot = (x * y).sum(2);
  auto denom = ((x * x).sum(2) * (y * y).sum(2)).sqrt();
  return torch::where(denom > 0, dot / denom.clamp_min(1e-300), torch::zeros_like(dot));
}

Tensor topk_aux(const Tensor& f0, const Tensor& f1, int64_t k, const Tensor& source) {
  if (k > f0.size(1)) throw ConfigError("top_k: K = " + std::to_string(k) + " exceeds D = " + std::to_string(f0.size(1)));
  if (k < 1) throw ConfigError("top_k: K must be positive");
  if (source.sizes() != f0.sizes()) throw ShapeMismatch("topk_aux: source shape differs");
  auto scores = channel_scores(f0, f1);
  auto order = std::get<1>(torch::sort(scores, /*stable=*/true, /*dim=*/1, /*descending=*/true));
  auto idx = order.slice(1, 0, k);
  const auto sz = source.sizes();
  auto gather_idx = idx.view({sz[0], k, 1, 1}).expand({sz[0], k, sz[2], sz[3]});
  return source.gather(1, gather_idx);
}

MotionDecoderImpl::MotionDecoderImpl(const ModelConfig& c) : config_(c) {
  pos = register_parameter("pos", torch::randn({c.dim}) * 0.02, /*requires_grad=*/c.learned_pos);
  for (int64_t i = 0; i < c.self_layers; ++i) self_blocks->push_back(AttentionBlock(c.dim, c.heads));
  for (int64_t i = 0; i < c.cross_layers; ++i) cross_blocks->push_back(AttentionBlock(c.dim, c.heads));
  register_module("self_blocks", self_blocks);
  register_module("cross_blocks", cross_blocks);
  in_proj_ = register_module("in_proj", conv(2 * c.dim + c.top_k, c.hidden, 1));
  for (int64_t i = 0; i < c.residual_blocks; ++i) {
    res_blocks_->push_back(torch::nn::Sequential(conv(c.hidden, c.hidden, 3), torch::nn::ReLU(),
                                                 conv(c.hidden, c.hidden, 3)));
    auto head = conv(c.hidden, 2, 3);
    zero_(head);
    flow_heads->push_back(head);
  }
  register_module("res_blocks", res_blocks_);
  register_module("flow_heads", flow_heads);
  if (c.upsampler == Upsampler::convex) {
    mask_head_ = register_module("mask_head", conv(c.hidden, 9 * c.scale * c.scale, 3));
    zero_(mask_head_);
  }
}

Tensor MotionDecoderImpl::add_channel_pos(const Tensor& f) {
  if (f.dim() != 4 || f.size(1) != config_.dim) throw ShapeMismatch("add_channel_pos: expected [B, D, h, w]");
  return f + pos.view({1, -1, 1, 1});
}

std::pair<Tensor, Tensor> MotionDecoderImpl::attend(const Tensor& f0p, const Tensor& f1p) {
  require_nchw_pair(f0p, f1p, "attend");
  const int64_t h = f0p.size(2), w = f0p.size(3);
  const auto p0 = to_tokens(f0p), p1 = to_tokens(f1p);
  auto s0 = p0, s1 = p1;
  for (const auto& m : *self_blocks) {
    auto blk = m->as<AttentionBlockImpl>();
    s0 = blk->forward(s0, s0);
    s1 = blk->forward(s1, s1);
  }
  for (const auto& m : *cross_blocks) {
    auto blk = m->as<AttentionBlockImpl>();
    s0 = blk->forward(s0, p1);
    s1 = blk->forward(s1, p0);
  }
  return {from_tokens(s0, h, w), from_tokens(s1, h, w)};
}

Tensor MotionDecoderImpl::aux(const Tensor& f0cc, const Tensor& f1cc) {
  const auto& source = config_.aux_source == AuxSource::second ? f1cc : f0cc;
  return topk_aux(f0cc, f1cc, config_.top_k, source);
}

Tensor MotionDecoderImpl::upsample(const Tensor& flow, const Tensor& hidden, int64_t height, int64_t width) {
  const int64_t s = config_.scale;
  if (config_.upsampler == Upsampler::bilinear) {
    return F::interpolate(flow * static_cast<double>(s), F::InterpolateFuncOptions()
                                                             .size(std::vector<int64_t>{height, width})
                                                             .mode(torch::kBilinear)
                                                             .align_corners(false));
  }
  // Convex combination of the 3x3 coarse neighbourhood per fine pixel.
  const int64_t b = flow.size(0), h = flow.size(2), w = flow.size(3);
  auto mask = mask_head_->forward(hidden).view({b, 1, 9, s, s, h, w}).softmax(2);
  auto nb = F::unfold(flow * static_cast<double>(s), F::UnfoldFuncOptions({3, 3}).padding(1))
                .view({b, 2, 9, 1, 1, h, w});
  auto up = (mask * nb).sum(2).permute({0, 1, 4, 2, 5, 3}).reshape({b, 2, h * s, w * s});
  return up.slice(2, 0, height).slice(3, 0, width);
}

std::vector<Tensor> MotionDecoderImpl::decode_flow(const Tensor& f0cc, const Tensor& f1cc, const Tensor& k_aux,
                                                   int64_t height, int64_t width) {
  require_nchw_pair(f0cc, f1cc, "decode_flow");
  if (k_aux.dim() != 4 || k_aux.size(0) != f0cc.size(0) || k_aux.size(1) != config_.top_k ||
      k_aux.size(2) != f0cc.size(2) || k_aux.size(3) != f0cc.size(3))
    throw ShapeMismatch("decode_flow: K_aux must be [B, K, h, w] matching the features");
  const int64_t s = config_.scale;
  if ((height + s - 1) / s != f0cc.size(2) || (width + s - 1) / s != f0cc.size(3))
    throw ShapeMismatch("decode_flow: output size inconsistent with feature grid and scale");

  auto x = torch::relu(in_proj_->forward(torch::cat({f0cc, f1cc, k_aux}, 1)));
  Tensor flow = torch::zeros({f0cc.size(0), 2, f0cc.size(2), f0cc.size(3)}, f0cc.options());
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < res_blocks_->size(); ++i) {
    x = torch::relu(x + res_blocks_[i]->as<torch::nn::Sequential>()->forward(x));
    flow = flow + flow_heads[i]->as<torch::nn::Conv2d>()->forward(x);
    out.push_back(upsample(flow, x, height, width));
  }
  return out;
}

std::vector<Tensor> MotionDecoderImpl::forward(const Tensor& f0, const Tensor& f1, int64_t height, int64_t width) {
  auto [a, b] = attend(add_channel_pos(f0), add_channel_pos(f1));
  return decode_flow(a, b, aux(a, b), height, width);
}

std::pair<std::vector<Tensor>, std::vector<Tensor>> MotionDecoderImpl::forward_bidirectional(const Tensor& f0,
                                                                                             const Tensor& f1,
                                                                                             int64_t height,
                                                                                             int64_t width) {
  // Both streams share every weight, so attend(F1, F0) is attend(F0, F1) swapped.
  auto [a, b] = attend(add_channel_pos(f0), add_channel_pos(f1));
  return {decode_flow(a, b, aux(a, b), height, width), decode_flow(b, a, aux(b, a), height, width)};
}

// ---------------------------------------------------------------------------

FlowModelImpl::FlowModelImpl(ModelConfig config) : config_(config) {
  validate(config_);
  encoder = register_module("encoder", Encoder(config_));
  decoder = register_module("decoder", MotionDecoder(config_));
  warpnet = register_module("warpnet", warp::WarpNet(warpnet_config(config_)));
}

std::vector<Tensor> FlowModelImpl::predict(const Tensor& i0, const Tensor& i1) {
  if (i0.sizes() != i1.sizes()) throw ShapeMismatch("predict: frames differ in shape");
  return decoder->forward(encoder->forward(i0), encoder->forward(i1), i0.size(2), i0.size(3));
}

std::pair<std::vector<Tensor>, std::vector<Tensor>> FlowModelImpl::predict_bidirectional(const Tensor& i0,
                                                                                         const Tensor& i1) {
  if (i0.sizes() != i1.sizes()) throw ShapeMismatch("predict: frames differ in shape");
  return decoder->forward_bidirectional(encoder->forward(i0), encoder->forward(i1), i0.size(2), i0.size(3));
}

std::string FlowModelImpl::architecture() const {
  const auto& c = config_;
  std::ostringstream os;
  os << "kinflow-model channels=" << c.image_channels << " s=" << c.scale << " D=" << c.dim << " h=" << c.heads
     << " Ls=" << c.self_layers << " Lc=" << c.cross_layers << " K=" << c.top_k << " R=" << c.residual_blocks
     << " hidden=" << c.hidden << " learned_pos=" << c.learned_pos << " aux=" << to_string(c.aux_source)
     << " up=" << to_string(c.upsampler) << " warp=" << c.warp_width << "x" << c.warp_depth;
  for (const auto& p : named_parameters()) {
    os << ';' << p.key() << ':';
    for (auto s : p.value().sizes()) os << s << ',';
  }
  return os.str();
}

std::size_t load_encoder_weights(FlowModel& model, const std::map<std::string, Tensor>& weights) {
  auto params = model->encoder->named_parameters();
  torch::NoGradGuard g;
  for (const auto& [name, value] : weights) {
    auto* p = params.find(name);
    if (!p) throw ConfigError("external encoder weights: unknown parameter '" + name + "'");
    if (p->sizes() != value.sizes()) throw ShapeMismatch("external encoder weights: shape mismatch for '" + name + "'");
    p->copy_(value);
  }
  return weights.size();
}

// ---------------------------------------------------------------------------

namespace {

void require_stage(const FeatureMap& f, FeatureStage stage, const char* op) {
  if (f.stage() != stage)
    throw StageError(std::string(op) + ": expected " + to_string(stage) + " features, got " + to_string(f.stage()));
}

}  // namespace

FeatureMap encode(FlowModel& model, const Frame& frame) {
  check_input(frame);
  if (frame.channels() != model->config().image_channels)
    throw ShapeMismatch("encode: frame has " + std::to_string(frame.channels()) + " channels");
  auto f = model->encoder->forward(to_nchw(frame));
  return feature_from_nchw(f, 0, FeatureStage::raw, model->config().scale);
}

FeatureMap add_channel_pos(FlowModel& model, const FeatureMap& raw) {
  check_input(raw);
  require_stage(raw, FeatureStage::raw, "add_channel_pos");
  auto out = model->decoder->add_channel_pos(to_nchw(raw));
  return feature_from_nchw(out, 0, FeatureStage::pos_embedded, raw.scale());
}

std::pair<FeatureMap, FeatureMap> attend(FlowModel& model, const FeatureMap& f0p, const FeatureMap& f1p) {
  check_input(f0p);
  check_input(f1p);
  require_stage(f0p, FeatureStage::pos_embedded, "attend");
  require_stage(f1p, FeatureStage::pos_embedded, "attend");
  if (f0p.data().sizes() != f1p.data().sizes()) throw ShapeMismatch("attend: feature shapes differ");
  auto [a, b] = model->decoder->attend(to_nchw(f0p), to_nchw(f1p));
  return {feature_from_nchw(a, 0, FeatureStage::cross_attended, f0p.scale()),
          feature_from_nchw(b, 0, FeatureStage::cross_attended, f1p.scale())};
}

FeatureMap topk_aux(const FeatureMap& f0cc, const FeatureMap& f1cc, int64_t k) {
  check_input(f0cc);
  check_input(f1cc);
  if (k > f1cc.channels())
    throw ConfigError("top_k: K = " + std::to_string(k) + " exceeds D = " + std::to_string(f1cc.channels()));
  if (f0cc.data().sizes() != f1cc.data().sizes()) throw ShapeMismatch("topk_aux: feature shapes differ");
  auto b = to_nchw(f1cc);
  return feature_from_nchw(topk_aux(to_nchw(f0cc), b, k, b), 0, f1cc.stage(), f1cc.scale());
}

FlowSequence decode_flow(FlowModel& model, const FeatureMap& f0cc, const FeatureMap& f1cc, const FeatureMap& k_aux,
                         int64_t height, int64_t width) {
  check_input(f0cc);
  check_input(f1cc);
  check_input(k_aux);
  require_stage(f0cc, FeatureStage::cross_attended, "decode_flow");
  require_stage(f1cc, FeatureStage::cross_attended, "decode_flow");
  auto seq = model->decoder->decode_flow(to_nchw(f0cc), to_nchw(f1cc), to_nchw(k_aux), height, width);
  std::vector<FlowField> items;
  for (const auto& f : seq) items.push_back(flow_from_nchw(f, 0));
  return FlowSequence(std::move(items));
}

FlowSequence predict(FlowModel& model, const Frame& i0, const Frame& i1) {
  check_input(i0);
  check_input(i1);
  require_same_size(i0.height(), i0.width(), i1.height(), i1.width(), "predict");
  if (i0.channels() != i1.channels()) throw ShapeMismatch("predict: frames differ in channel count");
  auto seq = model->predict(to_nchw(i0), to_nchw(i1));
  std::vector<FlowField> items;
  for (const auto& f : seq) items.push_back(flow_from_nchw(f, 0));
  return FlowSequence(std::move(items));
}

}  // namespace kinflow::model
