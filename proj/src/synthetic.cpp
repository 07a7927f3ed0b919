#include <cmath>
#include <algorithm>

#include <opencv2/imgproc.hpp>

#include "kinflow/dataio.hpp"
#include "kinflow/warp.hpp"

namespace kinflow::dataio {

namespace {

constexpr double kTextureSigma = 2.0;

std::array<double, 2> center_of(const std::vector<double>& params, std::size_t first, int64_t h, int64_t w) {
  if (params.size() >= first + 2) return {params[first], params[first + 1]};
  return {(static_cast<double>(w) - 1.0) / 2.0, (static_cast<double>(h) - 1.0) / 2.0};
}

// Linear part M applied about centre c, then translation d: p -> c + M (p - c) + d.
AffineMap about_center(std::array<double, 4> m, std::array<double, 2> c, std::array<double, 2> d) {
  AffineMap map;
  map.a = m;
  map.t = {c[0] - (m[0] * c[0] + m[1] * c[1]) + d[0], c[1] - (m[2] * c[0] + m[3] * c[1]) + d[1]};
  return map;
}

// Bilinear sample of an [H, W, C] texture at an in-frame point (x, y).
void sample_into(const float* tex, int64_t h, int64_t w, int64_t c, double x, double y, float* out) {
  const double x0f = std::floor(x), y0f = std::floor(y);
  const double wx = x - x0f, wy = y - y0f;
  const auto x0 = static_cast<int64_t>(x0f), y0 = static_cast<int64_t>(y0f);
  const int64_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
  for (int64_t k = 0; k < c; ++k) {
    const double v00 = tex[(y0 * w + x0) * c + k], v01 = tex[(y0 * w + x1) * c + k];
    const double v10 = tex[(y1 * w + x0) * c + k], v11 = tex[(y1 * w + x1) * c + k];
    const double v = v00 * (1 - wx) * (1 - wy) + v01 * wx * (1 - wy) + v10 * (1 - wx) * wy + v11 * wx * wy;
    out[k] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
}

bool in_frame(double x, double y, int64_t h, int64_t w) {
  return x >= 0.0 && y >= 0.0 && x <= static_cast<double>(w - 1) && y <= static_cast<double>(h - 1);
}

// Second frame seen through `map`: out(q) = texture(map^-1(q)), zero where the
// source falls outside the first frame.
Tensor render(const Tensor& texture, const AffineMap& map) {
  const auto tex = texture.to(torch::kFloat32).contiguous();
  const int64_t h = tex.size(0), w = tex.size(1), c = tex.size(2);
  const AffineMap inv = map.inverse();
  auto out = torch::zeros({h, w, c}, torch::kFloat32);
  const float* src = tex.data_ptr<float>();
  float* dst = out.data_ptr<float>();
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      const auto s = inv.apply(static_cast<double>(x), static_cast<double>(y));
      if (in_frame(s[0], s[1], h, w)) sample_into(src, h, w, c, s[0], s[1], dst + (y * w + x) * c);
    }
  }
  return out;
}

// Displacement field of `map` evaluated on the pixel grid, [H, W, 2].
Tensor displacement(const AffineMap& map, int64_t h, int64_t w) {
  auto uv = torch::empty({h, w, 2}, torch::kFloat32);
  auto a = uv.accessor<float, 3>();
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      const auto p = map.apply(static_cast<double>(x), static_cast<double>(y));
      a[y][x][0] = static_cast<float>(p[0] - static_cast<double>(x));
      a[y][x][1] = static_cast<float>(p[1] - static_cast<double>(y));
    }
  }
  return uv;
}

OcclusionMap occlusion_for(const FlowField& fwd, const AffineMap& map, int64_t h, int64_t w) {
  const FlowField bwd(displacement(map.inverse(), h, w));
  return warp::occlusion_oracle(fwd, bwd);
}

}  // namespace

const char* to_string(MotionKind kind) {
  switch (kind) {
    case MotionKind::translation: return "translation";
    case MotionKind::rotation: return "rotation";
    case MotionKind::zoom: return "zoom";
    case MotionKind::affine: return "affine";
  }
  return "unknown";
}

MotionKind motion_kind_from_string(const std::string& name) {
  if (name == "translation") return MotionKind::translation;
  if (name == "rotation") return MotionKind::rotation;
  if (name == "zoom") return MotionKind::zoom;
  if (name == "affine") return MotionKind::affine;
  throw SpecError("unknown motion kind '" + name + "'");
}

AffineMap AffineMap::inverse() const {
  const double d = det();
  if (!(std::abs(d) > 1e-12)) throw SpecError("motion map is singular");
  AffineMap inv;
  inv.a = {a[3] / d, -a[1] / d, -a[2] / d, a[0] / d};
  inv.t = {-(inv.a[0] * t[0] + inv.a[1] * t[1]), -(inv.a[2] * t[0] + inv.a[3] * t[1])};
  return inv;
}

void validate_spec(const SyntheticMotionSpec& spec, int64_t height, int64_t width) {
  if (height < 8 || width < 8) throw SpecError("frame size must be at least 8x8");
  if (spec.channels != 1 && spec.channels != 3) throw SpecError("channels must be 1 or 3");
  for (double v : spec.params)
    if (!std::isfinite(v)) throw SpecError("motion parameters must be finite");
  const auto& p = spec.params;
  const double max_dx = static_cast<double>(width) / 4.0, max_dy = static_cast<double>(height) / 4.0;
  switch (spec.kind) {
    case MotionKind::translation:
      if (p.size() != 2) throw SpecError("translation takes {dx, dy}");
      if (std::abs(p[0]) > max_dx || std::abs(p[1]) > max_dy) throw SpecError("translation exceeds W/4, H/4");
      break;
    case MotionKind::rotation:
      if (p.size() != 1 && p.size() != 3) throw SpecError("rotation takes {angle} or {angle, cx, cy}");
      break;
    case MotionKind::zoom:
      if (p.size() != 1 && p.size() != 3) throw SpecError("zoom takes {factor} or {factor, cx, cy}");
      if (p[0] < 0.5 || p[0] > 2.0) throw SpecError("zoom factor outside [0.5, 2.0]");
      break;
    case MotionKind::affine: {
      if (p.size() != 6) throw SpecError("affine takes {a11, a12, a21, a22, tx, ty}");
      if (std::abs(p[0] * p[3] - p[1] * p[2]) < 1e-6) throw SpecError("affine matrix is singular");
      if (std::abs(p[4]) > max_dx || std::abs(p[5]) > max_dy) throw SpecError("affine translation exceeds W/4, H/4");
      break;
    }
  }
}

AffineMap motion_map(const SyntheticMotionSpec& spec, int64_t height, int64_t width) {
  validate_spec(spec, height, width);
  const auto& p = spec.params;
  switch (spec.kind) {
    case MotionKind::translation: {
      AffineMap m;
      m.t = {p[0], p[1]};
      return m;
    }
    case MotionKind::rotation: {
      const double c = std::cos(p[0]), s = std::sin(p[0]);
      return about_center({c, -s, s, c}, center_of(p, 1, height, width), {0, 0});
    }
    case MotionKind::zoom:
      return about_center({p[0], 0, 0, p[0]}, center_of(p, 1, height, width), {0, 0});
    case MotionKind::affine:
      return about_center({p[0], p[1], p[2], p[3]}, center_of({}, 0, height, width), {p[4], p[5]});
  }
  throw SpecError("unknown motion kind");
}

AffineMap motion_map_at(const SyntheticMotionSpec& spec, int64_t height, int64_t width, double alpha) {
  const AffineMap full = motion_map(spec, height, width);
  AffineMap m;
  m.a = {(1 - alpha) + alpha * full.a[0], alpha * full.a[1], alpha * full.a[2], (1 - alpha) + alpha * full.a[3]};
  m.t = {alpha * full.t[0], alpha * full.t[1]};
  return m;
}

Tensor band_limited_texture(RngSeed seed, int64_t height, int64_t width, int64_t channels) {
  auto rng = make_engine(seed, /*stream=*/0x7e47);
  std::uniform_real_distribution<float> uni(0.0f, 1.0f);
  cv::Mat noise(static_cast<int>(height), static_cast<int>(width), CV_32FC(static_cast<int>(channels)));
  auto* p = noise.ptr<float>();
  for (int64_t i = 0; i < height * width * channels; ++i) p[i] = uni(rng);
  cv::Mat smooth;
  cv::GaussianBlur(noise, smooth, cv::Size(0, 0), kTextureSigma, kTextureSigma, cv::BORDER_REFLECT_101);
  auto t = torch::from_blob(smooth.ptr<float>(), {height, width, channels}, torch::kFloat32).clone();
  for (int64_t k = 0; k < channels; ++k) {
    auto ch = t.select(2, k);
    const auto lo = ch.min(), hi = ch.max();
    ch.sub_(lo).div_((hi - lo).clamp_min(1e-12));
  }
  return t.clamp_(0.0, 1.0);
}

void validate(const SampleRecord& record) {
  validate(record.frame0);
  validate(record.frame1);
  if (record.frame0.height() != record.frame1.height() || record.frame0.width() != record.frame1.width() ||
      record.frame0.channels() != record.frame1.channels())
    throw InvariantViolation("frame0 and frame1 share H, W, C");
  if (record.gt_flow) {
    validate(*record.gt_flow);
    if (record.gt_flow->height() != record.frame0.height() || record.gt_flow->width() != record.frame0.width())
      throw InvariantViolation("gt_flow matches frame H, W");
  }
  if (record.gt_occ) {
    validate(*record.gt_occ);
    if (record.gt_occ->height() != record.frame0.height() || record.gt_occ->width() != record.frame0.width())
      throw InvariantViolation("gt_occ matches frame H, W");
  }
}

SampleRecord synth_pair(const SyntheticMotionSpec& spec, int64_t height, int64_t width, std::string id) {
  const AffineMap map = motion_map(spec, height, width);
  const Tensor texture = band_limited_texture(spec.texture_seed, height, width, spec.channels);
  FlowField flow(displacement(map, height, width));
  OcclusionMap occ = occlusion_for(flow, map, height, width);
  return SampleRecord{Frame(texture, 0.0), Frame(render(texture, map), 1.0), flow, occ, std::move(id), spec};
}

SampleRecord make_subsampled_pair(const SampleRecord& record, double alpha) {
  if (!record.gt_flow) throw SpecError("make_subsampled_pair needs ground-truth flow");
  if (!record.motion) throw SpecError("make_subsampled_pair needs the record's analytic motion");
  if (!(alpha > 0.0 && alpha <= 1.0)) throw RangeError("alpha must lie in (0, 1]");
  check_input(record.frame0);
  const int64_t h = record.frame0.height(), w = record.frame0.width();
  const AffineMap map = motion_map_at(*record.motion, h, w, alpha);
  // Scaled in double and rounded once, exactly like the kinetics generator.
  const auto& uv = record.gt_flow->uv();
  FlowField flow((uv.detach().to(torch::kFloat64) * alpha).to(uv.scalar_type()), record.gt_flow->valid());
  OcclusionMap occ = occlusion_for(flow, map, h, w);
  return SampleRecord{record.frame0, Frame(render(record.frame0.pixels(), map), alpha), flow, occ, record.id,
                      record.motion};
}

SyntheticMotionSpec random_spec(MotionKind kind, int64_t height, int64_t width, std::mt19937_64& rng,
                                int64_t channels) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  SyntheticMotionSpec spec;
  spec.kind = kind;
  spec.channels = channels;
  const double w4 = static_cast<double>(width) / 4.0, h4 = static_cast<double>(height) / 4.0;
  switch (kind) {
    case MotionKind::translation: spec.params = {w4 * u(rng), h4 * u(rng)}; break;
    case MotionKind::rotation: spec.params = {0.3 * u(rng)}; break;
    case MotionKind::zoom: spec.params = {std::exp(0.22 * u(rng))}; break;
    case MotionKind::affine:
      spec.params = {1.0 + 0.1 * u(rng), 0.1 * u(rng), 0.1 * u(rng), 1.0 + 0.1 * u(rng), 0.5 * w4 * u(rng),
                     0.5 * h4 * u(rng)};
      break;
  }
  spec.texture_seed = RngSeed{rng()};
  return spec;
}

}  // namespace kinflow::dataio
