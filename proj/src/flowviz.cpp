#include "kinflow/flowviz.hpp"

#include <array>
#include <cmath>
#include <numbers>
#include <vector>

#include <cstring>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace kinflow::viz {

namespace {

// Colour wheel segment lengths: red-yellow, yellow-green, green-cyan,
// cyan-blue, blue-magenta, magenta-red.
std::vector<std::array<double, 3>> make_wheel() {
  constexpr int RY = 15, YG = 6, GC = 4, CB = 11, BM = 13, MR = 6;
  std::vector<std::array<double, 3>> w;
  for (int i = 0; i < RY; ++i) w.push_back({255, 255.0 * i / RY, 0});
  for (int i = 0; i < YG; ++i) w.push_back({255 - 255.0 * i / YG, 255, 0});
  for (int i = 0; i < GC; ++i) w.push_back({0, 255, 255.0 * i / GC});
  for (int i = 0; i < CB; ++i) w.push_back({0, 255 - 255.0 * i / CB, 255});
  for (int i = 0; i < BM; ++i) w.push_back({255.0 * i / BM, 0, 255});
  for (int i = 0; i < MR; ++i) w.push_back({255, 0, 255 - 255.0 * i / MR});
  return w;
}

}  // namespace

Tensor flow_to_color(const FlowField& flow, std::optional<double> max_magnitude) {
  check_input(flow);
  if (max_magnitude && !(*max_magnitude > 0)) throw RangeError("max_magnitude must be positive");
  static const auto wheel = make_wheel();
  const int ncols = static_cast<int>(wheel.size());
  const auto uv = flow.uv().detach().to(torch::kFloat64).contiguous();
  const auto valid = flow.valid_or_all().contiguous();
  auto a = uv.accessor<double, 3>();
  auto va = valid.accessor<bool, 2>();
  const int64_t h = flow.height(), w = flow.width();

  double norm = max_magnitude.value_or(0.0);
  if (!max_magnitude) {
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x)
        if (va[y][x]) norm = std::max(norm, std::hypot(a[y][x][0], a[y][x][1]));
  }
  if (norm <= 0) norm = 1.0;  // all-zero flow renders white

  auto out = torch::zeros({h, w, 3}, torch::kUInt8);
  auto oa = out.accessor<uint8_t, 3>();
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      if (!va[y][x]) continue;
      const double u = a[y][x][0] / norm, v = a[y][x][1] / norm;
      const double rad = std::hypot(u, v);
      const double ang = std::atan2(-v, -u) / std::numbers::pi;
      const double fk = (ang + 1.0) / 2.0 * (ncols - 1);
      const int k0 = static_cast<int>(std::floor(fk));
      const int k1 = (k0 + 1) % ncols;
      const double f = fk - k0;
      for (int c = 0; c < 3; ++c) {
        double col = ((1 - f) * wheel[k0][c] + f * wheel[k1][c]) / 255.0;
        col = rad <= 1 ? 1 - rad * (1 - col) : col * 0.75;
        oa[y][x][c] = static_cast<uint8_t>(std::lround(255.0 * col));
      }
    }
  }
  return out;
}

void write_flow_png(const FlowField& flow, const std::filesystem::path& path, std::optional<double> max_magnitude) {
  auto rgb = flow_to_color(flow, max_magnitude);
  cv::Mat img(static_cast<int>(rgb.size(0)), static_cast<int>(rgb.size(1)), CV_8UC3);
  std::memcpy(img.data, rgb.data_ptr(), static_cast<std::size_t>(rgb.numel()));
  cv::cvtColor(img, img, cv::COLOR_RGB2BGR);
  bool ok = false;
  try {
    ok = cv::imwrite(path.string(), img);
  } catch (const cv::Exception&) {
    ok = false;
  }
  if (!ok) throw IoError("cannot write " + path.string());
}

}  // namespace kinflow::viz
