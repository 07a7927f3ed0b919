#include "kinflow/core.hpp"

#include <sstream>

namespace kinflow {

Error::Error(std::string kind, const std::string& message, int exit_code)
    : std::runtime_error(message), kind_(std::move(kind)), exit_code_(exit_code) {}

namespace {

std::string describe(const std::string& invariant, const std::vector<int64_t>& index) {
  std::ostringstream os;
  os << "invariant violated: " << invariant;
  if (!index.empty()) {
    os << " at [";
    for (std::size_t i = 0; i < index.size(); ++i) os << (i ? "," : "") << index[i];
    os << "]";
  }
  return os.str();
}

std::vector<int64_t> first_index(const Tensor& mask) {
  auto nz = mask.nonzero();
  if (nz.size(0) == 0) return {};
  auto row = nz[0].contiguous();
  return {row.data_ptr<int64_t>(), row.data_ptr<int64_t>() + row.numel()};
}

void require_floating(const Tensor& t, const char* what) {
  if (!t.defined()) throw InvariantViolation(std::string(what) + " defined");
  if (!t.is_floating_point()) throw InvariantViolation(std::string(what) + " floating point");
}

void require_finite(const Tensor& t) {
  auto bad = torch::logical_not(torch::isfinite(t.detach()));
  if (bad.any().item<bool>()) throw InvariantViolation("finite", first_index(bad));
}

void require_unit_interval(const Tensor& t, const char* name) {
  auto d = t.detach();
  auto bad = torch::logical_or(d < 0, d > 1);
  if (bad.any().item<bool>()) throw InvariantViolation(name, first_index(bad));
}

}  // namespace

InvariantViolation::InvariantViolation(std::string invariant, std::vector<int64_t> index)
    : Error("InvariantViolation", describe(invariant, index), kExitRuntime),
      invariant_(std::move(invariant)),
      index_(std::move(index)) {}

Frame::Frame(Tensor pixels, double time_tag) : pixels_(std::move(pixels)), time_tag_(time_tag) {
  if (!pixels_.defined() || pixels_.dim() != 3) throw InvariantViolation("frame rank = 3");
}

FlowField::FlowField(Tensor uv, std::optional<Tensor> valid)
    : uv_(std::move(uv)), valid_(std::move(valid)) {
  if (!uv_.defined() || uv_.dim() != 3) throw InvariantViolation("flow rank = 3");
}

Tensor FlowField::valid_or_all() const {
  if (valid_) return *valid_;
  return torch::ones({height(), width()}, torch::TensorOptions().dtype(torch::kBool));
}

FlowSequence::FlowSequence(std::vector<FlowField> items) : items_(std::move(items)) {}

const FlowField& FlowSequence::last() const {
  if (items_.empty()) throw InvariantViolation("sequence length >= 1");
  return items_.back();
}

const char* to_string(FeatureStage stage) {
  switch (stage) {
    case FeatureStage::raw: return "raw";
    case FeatureStage::pos_embedded: return "pos_embedded";
    case FeatureStage::self_attended: return "self_attended";
    case FeatureStage::cross_attended: return "cross_attended";
  }
  return "unknown";
}

FeatureMap::FeatureMap(Tensor data, FeatureStage stage, int64_t scale)
    : data_(std::move(data)), stage_(stage), scale_(scale) {
  if (!data_.defined() || data_.dim() != 3) throw InvariantViolation("feature rank = 3");
}

OcclusionMap::OcclusionMap(Tensor occ) : occ_(std::move(occ)) {
  if (!occ_.defined() || occ_.dim() != 2) throw InvariantViolation("occlusion rank = 2");
}

Tensor OcclusionMap::binary() const { return occ_.detach() > 0.5; }

void validate(const Frame& frame) {
  const auto& p = frame.pixels();
  require_floating(p, "frame pixels");
  if (p.size(2) != 1 && p.size(2) != 3) throw InvariantViolation("channels in {1, 3}");
  if (p.size(0) < 8 || p.size(1) < 8) throw InvariantViolation("H >= 8 and W >= 8");
  require_finite(p);
  require_unit_interval(p, "0 <= value <= 1");
  if (!std::isfinite(frame.time_tag())) throw InvariantViolation("finite time tag");
}

void validate(const FlowField& flow) {
  const auto& uv = flow.uv();
  require_floating(uv, "flow uv");
  if (uv.size(2) != 2) throw InvariantViolation("last dim = 2");
  require_finite(uv);
  if (flow.valid()) {
    const auto& m = *flow.valid();
    if (m.scalar_type() != torch::kBool) throw InvariantViolation("valid mask is boolean");
    if (m.dim() != 2 || m.size(0) != uv.size(0) || m.size(1) != uv.size(1))
      throw InvariantViolation("valid mask shape = [H, W]");
  }
}

void validate(const FlowSequence& seq) {
  if (seq.size() == 0) throw InvariantViolation("sequence length >= 1");
  const auto& first = seq.items().front();
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const auto& f = seq.items()[i];
    validate(f);
    if (f.height() != first.height() || f.width() != first.width())
      throw InvariantViolation("sequence items share H, W", {static_cast<int64_t>(i)});
  }
}

void validate(const FeatureMap& map) {
  require_floating(map.data(), "feature data");
  if (map.scale() < 1) throw InvariantViolation("scale >= 1");
  require_finite(map.data());
}

void validate(const FeatureMap& map, int64_t source_height, int64_t source_width) {
  validate(map);
  const auto s = map.scale();
  if (map.height() != (source_height + s - 1) / s || map.width() != (source_width + s - 1) / s)
    throw InvariantViolation("H' = ceil(H / scale), W' = ceil(W / scale)");
}

void validate(const OcclusionMap& map) {
  require_floating(map.occ(), "occlusion");
  require_finite(map.occ());
  require_unit_interval(map.occ(), "0 <= occ <= 1");
}

void require_same_size(int64_t h0, int64_t w0, int64_t h1, int64_t w1, const char* what) {
  if (h0 != h1 || w0 != w1) {
    std::ostringstream os;
    os << what << ": " << h0 << "x" << w0 << " vs " << h1 << "x" << w1;
    throw ShapeMismatch(os.str());
  }
}

void seed_torch(RngSeed seed) { torch::manual_seed(seed.value); }

std::mt19937_64 make_engine(RngSeed seed, uint64_t stream) {
  std::seed_seq seq{static_cast<uint32_t>(seed.value), static_cast<uint32_t>(seed.value >> 32),
                    static_cast<uint32_t>(stream), static_cast<uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}

Tensor to_nchw(const Frame& frame) { return frame.pixels().permute({2, 0, 1}).unsqueeze(0).contiguous(); }

Tensor to_nchw(const FlowField& flow) { return flow.uv().permute({2, 0, 1}).unsqueeze(0).contiguous(); }

Tensor to_nchw(const OcclusionMap& occ) { return occ.occ().unsqueeze(0).unsqueeze(0).contiguous(); }

Tensor to_nchw(const FeatureMap& map) { return map.data().permute({2, 0, 1}).unsqueeze(0).contiguous(); }

Tensor valid_to_nchw(const FlowField& flow) {
  return flow.valid_or_all().to(flow.uv().scalar_type()).unsqueeze(0).unsqueeze(0);
}

Tensor stack_frames(std::span<const Frame> frames) {
  std::vector<Tensor> parts;
  parts.reserve(frames.size());
  for (const auto& f : frames) parts.push_back(f.pixels().permute({2, 0, 1}));
  return torch::stack(parts).contiguous();
}

Tensor stack_flows(std::span<const FlowField> flows) {
  std::vector<Tensor> parts;
  parts.reserve(flows.size());
  for (const auto& f : flows) parts.push_back(f.uv().permute({2, 0, 1}));
  return torch::stack(parts).contiguous();
}

Frame frame_from_nchw(const Tensor& batch, int64_t index, double time_tag) {
  return Frame(batch[index].permute({1, 2, 0}).contiguous(), time_tag);
}

FlowField flow_from_nchw(const Tensor& batch, int64_t index) {
  return FlowField(batch[index].permute({1, 2, 0}).contiguous());
}

OcclusionMap occlusion_from_nchw(const Tensor& batch, int64_t index) {
  return OcclusionMap(batch[index][0].contiguous());
}

FeatureMap feature_from_nchw(const Tensor& batch, int64_t index, FeatureStage stage, int64_t scale) {
  return FeatureMap(batch[index].permute({1, 2, 0}).contiguous(), stage, scale);
}

}  // namespace kinflow
