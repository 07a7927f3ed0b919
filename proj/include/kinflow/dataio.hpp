#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "kinflow/core.hpp"

namespace kinflow::dataio {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Synthetic motion

enum class MotionKind { translation, rotation, zoom, affine };

const char* to_string(MotionKind kind);
MotionKind motion_kind_from_string(const std::string& name);  // throws SpecError

/// Analytic motion of a synthetic pair. Parameter layout per kind:
///   translation: {dx, dy}
///   rotation:    {angle} or {angle, cx, cy}   (radians, about the centre)
///   zoom:        {factor} or {factor, cx, cy}
///   affine:      {a11, a12, a21, a22, tx, ty} applied about the image centre
/// The centre defaults to ((W - 1) / 2, (H - 1) / 2).
struct SyntheticMotionSpec {
  MotionKind kind = MotionKind::translation;
  std::vector<double> params;
  RngSeed texture_seed;
  int64_t channels = 3;
};

/// p -> A p + t in pixel coordinates (x = column, y = row).
struct AffineMap {
  std::array<double, 4> a{1, 0, 0, 1};  // row-major 2x2
  std::array<double, 2> t{0, 0};

  std::array<double, 2> apply(double x, double y) const {
    return {a[0] * x + a[1] * y + t[0], a[2] * x + a[3] * y + t[1]};
  }
  double det() const { return a[0] * a[3] - a[1] * a[2]; }
  AffineMap inverse() const;  // throws SpecError when singular
};

/// Throws SpecError naming the violated constraint.
void validate_spec(const SyntheticMotionSpec& spec, int64_t height, int64_t width);

/// The full-interval motion map of a spec for a frame of the given size.
AffineMap motion_map(const SyntheticMotionSpec& spec, int64_t height, int64_t width);

/// Constant-velocity map at time fraction alpha: p -> p + alpha (T(p) - p).
AffineMap motion_map_at(const SyntheticMotionSpec& spec, int64_t height, int64_t width, double alpha);

/// Gaussian-smoothed (sigma = 2 px) uniform noise rescaled to [0, 1].
Tensor band_limited_texture(RngSeed seed, int64_t height, int64_t width, int64_t channels);

// ---------------------------------------------------------------------------
// Records

struct SampleRecord {
  Frame frame0;
  Frame frame1;
  std::optional<FlowField> gt_flow;
  std::optional<OcclusionMap> gt_occ;
  std::string id;
  /// Present for synthetic records; needed to resynthesise intermediate times.
  std::optional<SyntheticMotionSpec> motion;
};

void validate(const SampleRecord& record);

/// Textured pair with exact analytic flow and occlusion.
SampleRecord synth_pair(const SyntheticMotionSpec& spec, int64_t height, int64_t width,
                        std::string id = {});

/// Same scene observed at t0 + alpha under constant velocity.
SampleRecord make_subsampled_pair(const SampleRecord& record, double alpha);

/// Random, valid spec of the given kind; ranges are kept mild enough that most
/// pixels stay in frame.
SyntheticMotionSpec random_spec(MotionKind kind, int64_t height, int64_t width, std::mt19937_64& rng,
                                int64_t channels = 3);

// ---------------------------------------------------------------------------
// File formats

/// Middlebury .flo: float 202021.25 magic, int32 width, int32 height, then
/// interleaved little-endian float32 (u, v), row-major.
FlowField read_flo(const fs::path& path);
void write_flo(const FlowField& flow, const fs::path& path);

/// KITTI 16-bit RGB PNG: u = (R - 2^15) / 64, v = (G - 2^15) / 64, valid = B > 0.
FlowField read_kitti_png(const fs::path& path);
void write_kitti_png(const FlowField& flow, const fs::path& path);

/// 8- or 16-bit PNG (gray or colour) to a [0, 1] frame; colour frames are RGB.
Frame read_frame_png(const fs::path& path, int64_t channels = 3);
/// Written as 16-bit PNG so synthetic corpora survive the round trip.
void write_frame_png(const Frame& frame, const fs::path& path);

/// 8-bit grayscale, 255 = occluded.
OcclusionMap read_occlusion_png(const fs::path& path);
void write_occlusion_png(const OcclusionMap& occ, const fs::path& path);

// ---------------------------------------------------------------------------
// Manifests and dataset layouts

/// One manifest line. Synthetic entries regenerate their record from
/// (kind, params, seed, size); file entries point at images on disk.
struct ManifestEntry {
  std::string id;
  std::optional<SyntheticMotionSpec> synthetic;
  int64_t height = 0;
  int64_t width = 0;
  fs::path frame0, frame1;
  std::optional<fs::path> flow;  // .flo or KITTI .png
  std::optional<fs::path> occ;
};

/// JSON lines, one entry per line. Relative paths resolve against the
/// manifest's directory.
std::vector<ManifestEntry> read_manifest(const fs::path& path);
void write_manifest(const std::vector<ManifestEntry>& entries, const fs::path& path);

SampleRecord load_record(const ManifestEntry& entry);
std::vector<SampleRecord> load_records(const std::vector<ManifestEntry>& entries);

/// Sintel layout:
///   <root>/<split>/<pass>/<scene>/frame_NNNN.png
///   <root>/<split>/flow/<scene>/frame_NNNN.flo
///   <root>/<split>/occlusions/<scene>/frame_NNNN.png
std::vector<ManifestEntry> list_sintel(const fs::path& root, const std::string& split = "training",
                                       const std::string& pass = "clean");

/// KITTI-2015 layout:
///   <root>/<split>/image_2/NNNNNN_10.png, NNNNNN_11.png
///   <root>/<split>/flow_occ/NNNNNN_10.png
std::vector<ManifestEntry> list_kitti(const fs::path& root, const std::string& split = "training");

// ---------------------------------------------------------------------------
// Iteration

struct CropSize {
  int64_t height = 0;
  int64_t width = 0;
};

/// Random crop with optional horizontal flip applied consistently to frames,
/// flow (u negated on flip), mask and occlusion.
SampleRecord crop_record(const SampleRecord& record, int64_t top, int64_t left, CropSize crop, bool flip);

/// Deterministic shuffled batches. Each epoch is a fresh permutation; the
/// trailing partial batch is dropped so every batch has the same size.
class DatasetIterator {
 public:
  DatasetIterator(const std::vector<SampleRecord>& records, int64_t batch, RngSeed seed, CropSize crop,
                  bool augment);

  std::vector<SampleRecord> next();

  int64_t batches_per_epoch() const noexcept { return batches_per_epoch_; }
  int64_t epoch() const noexcept { return epoch_; }

  /// Opaque text encoding of the position and engine state, for checkpoints.
  std::string state() const;
  void restore(const std::string& state);

 private:
  void reshuffle();

  const std::vector<SampleRecord>* records_;
  int64_t batch_;
  CropSize crop_;
  bool augment_;
  int64_t batches_per_epoch_;
  std::mt19937_64 rng_;
  std::vector<int64_t> order_;
  int64_t epoch_ = 0;
  int64_t cursor_ = 0;
};

}  // namespace kinflow::dataio
