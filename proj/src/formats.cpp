#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <regex>

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "kinflow/dataio.hpp"

namespace kinflow::dataio {

namespace {

constexpr float kFloMagic = 202021.25f;

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

uint32_t get_u32(const unsigned char* p) {
  return uint32_t(p[0]) | (uint32_t(p[1]) << 8) | (uint32_t(p[2]) << 16) | (uint32_t(p[3]) << 24);
}

std::string read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::string& bytes, const fs::path& path) {
  if (path.empty()) throw IoError("empty output path");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

cv::Mat read_image(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("no such file: " + path.string());
  cv::Mat img = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (img.empty()) throw FormatError("not a readable image: " + path.string());
  return img;
}

void write_image(const cv::Mat& img, const fs::path& path) {
  if (path.empty()) throw IoError("empty output path");
  bool ok = false;
  try {
    ok = cv::imwrite(path.string(), img);
  } catch (const cv::Exception& e) {
    throw IoError("cannot write " + path.string() + ": " + e.what());
  }
  if (!ok) throw IoError("cannot write " + path.string());
}

fs::path resolve(const fs::path& base, const fs::path& p) {
  if (p.empty() || p.is_absolute()) return p;
  return base / p;
}

}  // namespace

// ---------------------------------------------------------------------------
// .flo

FlowField read_flo(const fs::path& path) {
  const std::string bytes = read_bytes(path);
  if (bytes.size() < 12) throw FormatError("truncated .flo header: " + path.string());
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (std::bit_cast<float>(get_u32(p)) != kFloMagic) throw FormatError("bad .flo magic: " + path.string());
  const auto width = static_cast<int32_t>(get_u32(p + 4));
  const auto height = static_cast<int32_t>(get_u32(p + 8));
  if (width <= 0 || height <= 0) throw FormatError("non-positive .flo dimensions: " + path.string());
  const uint64_t count = uint64_t(width) * uint64_t(height) * 2;
  if (bytes.size() - 12 < count * 4) throw FormatError("truncated .flo payload: " + path.string());

  auto uv = torch::empty({height, width, 2}, torch::kFloat32);
  float* dst = uv.data_ptr<float>();
  for (uint64_t i = 0; i < count; ++i) dst[i] = std::bit_cast<float>(get_u32(p + 12 + 4 * i));
  return FlowField(uv);
}

void write_flo(const FlowField& flow, const fs::path& path) {
  if (path.empty()) throw IoError("empty output path");
  check_input(flow);
  if (flow.has_mask()) throw FormatError(".flo cannot store a validity mask; use the KITTI PNG format");
  const auto uv = flow.uv().detach().to(torch::kFloat32).contiguous();
  const int64_t n = uv.numel();
  std::string out;
  out.reserve(12 + 4 * n);
  put_u32(out, std::bit_cast<uint32_t>(kFloMagic));
  put_u32(out, static_cast<uint32_t>(flow.width()));
  put_u32(out, static_cast<uint32_t>(flow.height()));
  const float* src = uv.data_ptr<float>();
  for (int64_t i = 0; i < n; ++i) put_u32(out, std::bit_cast<uint32_t>(src[i]));
  write_bytes(out, path);
}

// ---------------------------------------------------------------------------
// KITTI PNG. OpenCV stores BGR, so file channel R is Mat channel 2.

FlowField read_kitti_png(const fs::path& path) {
  cv::Mat img = read_image(path);
  if (img.depth() != CV_16U) throw FormatError("KITTI flow PNG must be 16-bit: " + path.string());
  if (img.channels() != 3) throw FormatError("KITTI flow PNG must have 3 channels: " + path.string());
  const int64_t h = img.rows, w = img.cols;
  auto uv = torch::zeros({h, w, 2}, torch::kFloat32);
  auto valid = torch::zeros({h, w}, torch::kBool);
  auto uva = uv.accessor<float, 3>();
  auto va = valid.accessor<bool, 2>();
  for (int64_t y = 0; y < h; ++y) {
    const auto* row = img.ptr<cv::Vec3w>(static_cast<int>(y));
    for (int64_t x = 0; x < w; ++x) {
      const cv::Vec3w px = row[x];
      const bool ok = px[0] > 0;
      va[y][x] = ok;
      if (ok) {
        uva[y][x][0] = (static_cast<float>(px[2]) - 32768.0f) / 64.0f;
        uva[y][x][1] = (static_cast<float>(px[1]) - 32768.0f) / 64.0f;
      }
    }
  }
  return FlowField(uv, valid);
}

void write_kitti_png(const FlowField& flow, const fs::path& path) {
  check_input(flow);
  const int64_t h = flow.height(), w = flow.width();
  const auto uv = flow.uv().detach().to(torch::kFloat64).contiguous();
  const auto valid = flow.valid_or_all().contiguous();
  auto uva = uv.accessor<double, 3>();
  auto va = valid.accessor<bool, 2>();
  auto encode = [](double value) {
    const double q = std::round(value * 64.0 + 32768.0);
    return static_cast<uint16_t>(std::clamp(q, 0.0, 65535.0));
  };
  cv::Mat img(static_cast<int>(h), static_cast<int>(w), CV_16UC3);
  for (int64_t y = 0; y < h; ++y) {
    auto* row = img.ptr<cv::Vec3w>(static_cast<int>(y));
    for (int64_t x = 0; x < w; ++x) {
      if (va[y][x]) {
        row[x] = cv::Vec3w(1, encode(uva[y][x][1]), encode(uva[y][x][0]));
      } else {
        row[x] = cv::Vec3w(0, 32768, 32768);
      }
    }
  }
  write_image(img, path);
}

// ---------------------------------------------------------------------------
// Frames and occlusion maps

Frame read_frame_png(const fs::path& path, int64_t channels) {
  if (channels != 1 && channels != 3) throw SpecError("frame channels must be 1 or 3");
  cv::Mat img = read_image(path);
  double scale = 0;
  switch (img.depth()) {
    case CV_8U: scale = 1.0 / 255.0; break;
    case CV_16U: scale = 1.0 / 65535.0; break;
    default: throw FormatError("unsupported frame bit depth: " + path.string());
  }
  cv::Mat conv;
  if (channels == 3) {
    if (img.channels() == 1) cv::cvtColor(img, conv, cv::COLOR_GRAY2RGB);
    else if (img.channels() == 4) cv::cvtColor(img, conv, cv::COLOR_BGRA2RGB);
    else cv::cvtColor(img, conv, cv::COLOR_BGR2RGB);
  } else {
    if (img.channels() == 3) cv::cvtColor(img, conv, cv::COLOR_BGR2GRAY);
    else if (img.channels() == 4) cv::cvtColor(img, conv, cv::COLOR_BGRA2GRAY);
    else conv = img;
  }
  cv::Mat f;
  conv.convertTo(f, CV_32F, scale);
  auto t = torch::from_blob(f.data, {f.rows, f.cols, channels}, torch::kFloat32).clone();
  return Frame(t.clamp(0.0, 1.0));
}

void write_frame_png(const Frame& frame, const fs::path& path) {
  check_input(frame);
  auto px = frame.pixels().detach().to(torch::kFloat32).clamp(0, 1).contiguous();
  const int rows = static_cast<int>(frame.height()), cols = static_cast<int>(frame.width());
  const int ch = static_cast<int>(frame.channels());
  cv::Mat f(rows, cols, CV_32FC(ch), px.data_ptr<float>());
  cv::Mat q;
  f.convertTo(q, CV_16U, 65535.0);
  if (ch == 3) cv::cvtColor(q, q, cv::COLOR_RGB2BGR);
  write_image(q, path);
}

OcclusionMap read_occlusion_png(const fs::path& path) {
  cv::Mat img = read_image(path);
  if (img.channels() != 1) cv::cvtColor(img, img, cv::COLOR_BGR2GRAY);
  const double scale = img.depth() == CV_16U ? 1.0 / 65535.0 : 1.0 / 255.0;
  cv::Mat f;
  img.convertTo(f, CV_32F, scale);
  return OcclusionMap(torch::from_blob(f.data, {f.rows, f.cols}, torch::kFloat32).clone());
}

void write_occlusion_png(const OcclusionMap& occ, const fs::path& path) {
  check_input(occ);
  auto o = occ.occ().detach().to(torch::kFloat32).contiguous();
  cv::Mat f(static_cast<int>(occ.height()), static_cast<int>(occ.width()), CV_32F, o.data_ptr<float>());
  cv::Mat q;
  f.convertTo(q, CV_8U, 255.0);
  write_image(q, path);
}

// ---------------------------------------------------------------------------
// Manifests

std::vector<ManifestEntry> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  const fs::path base = path.parent_path();
  std::vector<ManifestEntry> entries;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    try {
      ManifestEntry e;
      e.id = j.at("id").get<std::string>();
      if (j.contains("kind")) {
        SyntheticMotionSpec spec;
        spec.kind = motion_kind_from_string(j.at("kind").get<std::string>());
        spec.params = j.at("params").get<std::vector<double>>();
        spec.texture_seed = RngSeed{j.at("seed").get<uint64_t>()};
        spec.channels = j.value("channels", int64_t{3});
        const auto size = j.at("size").get<std::vector<int64_t>>();
        if (size.size() != 2) throw FormatError("size must be [H, W]");
        e.height = size[0];
        e.width = size[1];
        e.synthetic = spec;
      } else {
        e.frame0 = resolve(base, j.at("frame0").get<std::string>());
        e.frame1 = resolve(base, j.at("frame1").get<std::string>());
        if (j.contains("flow")) e.flow = resolve(base, j.at("flow").get<std::string>());
        if (j.contains("occ")) e.occ = resolve(base, j.at("occ").get<std::string>());
      }
      entries.push_back(std::move(e));
    } catch (const nlohmann::json::exception& ex) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
    }
  }
  return entries;
}

void write_manifest(const std::vector<ManifestEntry>& entries, const fs::path& path) {
  std::string out;
  for (const auto& e : entries) {
    nlohmann::ordered_json j;
    j["id"] = e.id;
    if (e.synthetic) {
      j["kind"] = to_string(e.synthetic->kind);
      j["params"] = e.synthetic->params;
      j["seed"] = e.synthetic->texture_seed.value;
      j["channels"] = e.synthetic->channels;
      j["size"] = {e.height, e.width};
    } else {
      j["frame0"] = e.frame0.string();
      j["frame1"] = e.frame1.string();
      if (e.flow) j["flow"] = e.flow->string();
      if (e.occ) j["occ"] = e.occ->string();
    }
    out += j.dump() + "\n";
  }
  write_bytes(out, path);
}

SampleRecord load_record(const ManifestEntry& entry) {
  if (entry.synthetic) return synth_pair(*entry.synthetic, entry.height, entry.width, entry.id);
  auto f0 = read_frame_png(entry.frame0);
  auto f1 = read_frame_png(entry.frame1);
  SampleRecord r{f0, Frame(f1.pixels(), 1.0), std::nullopt, std::nullopt, entry.id, std::nullopt};
  if (entry.flow) {
    r.gt_flow = entry.flow->extension() == ".png" ? read_kitti_png(*entry.flow) : read_flo(*entry.flow);
  }
  if (entry.occ) r.gt_occ = read_occlusion_png(*entry.occ);
  check_input(r);
  return r;
}

std::vector<SampleRecord> load_records(const std::vector<ManifestEntry>& entries) {
  std::vector<SampleRecord> out;
  out.reserve(entries.size());
  for (const auto& e : entries) out.push_back(load_record(e));
  return out;
}

namespace {

std::vector<fs::path> sorted_files(const fs::path& dir, const std::regex& pattern) {
  std::vector<fs::path> files;
  if (!fs::is_directory(dir)) return files;
  for (const auto& de : fs::directory_iterator(dir)) {
    if (de.is_regular_file() && std::regex_match(de.path().filename().string(), pattern))
      files.push_back(de.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

}  // namespace

std::vector<ManifestEntry> list_sintel(const fs::path& root, const std::string& split, const std::string& pass) {
  const fs::path images = root / split / pass;
  if (!fs::is_directory(images)) throw IoError("missing Sintel directory " + images.string());
  std::vector<fs::path> scenes;
  for (const auto& de : fs::directory_iterator(images))
    if (de.is_directory()) scenes.push_back(de.path().filename());
  std::sort(scenes.begin(), scenes.end());

  static const std::regex frame_re(R"(frame_\d{4}\.png)");
  std::vector<ManifestEntry> out;
  for (const auto& scene : scenes) {
    const auto frames = sorted_files(images / scene, frame_re);
    for (std::size_t i = 0; i + 1 < frames.size(); ++i) {
      ManifestEntry e;
      const std::string stem = frames[i].stem().string();
      e.id = scene.string() + "/" + stem;
      e.frame0 = frames[i];
      e.frame1 = frames[i + 1];
      const auto flo = root / split / "flow" / scene / (stem + ".flo");
      if (fs::exists(flo)) e.flow = flo;
      const auto occ = root / split / "occlusions" / scene / (stem + ".png");
      if (fs::exists(occ)) e.occ = occ;
      out.push_back(std::move(e));
    }
  }
  return out;
}

std::vector<ManifestEntry> list_kitti(const fs::path& root, const std::string& split) {
  const fs::path images = root / split / "image_2";
  if (!fs::is_directory(images)) throw IoError("missing KITTI directory " + images.string());
  static const std::regex first_re(R"(\d{6}_10\.png)");
  std::vector<ManifestEntry> out;
  for (const auto& f0 : sorted_files(images, first_re)) {
    const std::string name = f0.filename().string();
    const std::string index = name.substr(0, 6);
    const auto f1 = images / (index + "_11.png");
    if (!fs::exists(f1)) continue;
    ManifestEntry e;
    e.id = index;
    e.frame0 = f0;
    e.frame1 = f1;
    const auto flow = root / split / "flow_occ" / name;
    if (fs::exists(flow)) e.flow = flow;
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace kinflow::dataio
