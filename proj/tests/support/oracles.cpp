#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace kinflow::oracle {

double bilinear(const Tensor& chw, int64_t c, double x, double y) {
  auto a = chw.accessor<double, 3>();
  const int64_t h = chw.size(1), w = chw.size(2);
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  const auto x0 = static_cast<int64_t>(std::floor(x)), y0 = static_cast<int64_t>(std::floor(y));
  const auto x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
  const double fx = x - static_cast<double>(x0), fy = y - static_cast<double>(y0);
  return a[c][y0][x0] * (1 - fx) * (1 - fy) + a[c][y0][x1] * fx * (1 - fy) + a[c][y1][x0] * (1 - fx) * fy +
         a[c][y1][x1] * fx * fy;
}

Tensor warp_loop(const Tensor& payload, const Tensor& flow) {
  const auto p = payload.to(torch::kFloat64).contiguous();
  const auto f = flow.to(torch::kFloat64).contiguous();
  auto fa = f.accessor<double, 3>();
  const int64_t c = p.size(0), h = p.size(1), w = p.size(2);
  auto out = torch::empty({c, h, w}, torch::kFloat64);
  auto oa = out.accessor<double, 3>();
  for (int64_t k = 0; k < c; ++k)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x)
        oa[k][y][x] = bilinear(p, k, static_cast<double>(x) + fa[0][y][x], static_cast<double>(y) + fa[1][y][x]);
  return out;
}

Tensor epe_map_loop(const FlowField& pred, const FlowField& gt) {
  const auto p = pred.uv().to(torch::kFloat64).contiguous();
  const auto g = gt.uv().to(torch::kFloat64).contiguous();
  const auto v = gt.valid_or_all().contiguous();
  auto pa = p.accessor<double, 3>();
  auto ga = g.accessor<double, 3>();
  auto va = v.accessor<bool, 2>();
  auto out = torch::empty({gt.height(), gt.width()}, torch::kFloat64);
  auto oa = out.accessor<double, 2>();
  for (int64_t y = 0; y < gt.height(); ++y)
    for (int64_t x = 0; x < gt.width(); ++x) {
      const double du = pa[y][x][0] - ga[y][x][0], dv = pa[y][x][1] - ga[y][x][1];
      oa[y][x] = va[y][x] ? std::sqrt(du * du + dv * dv) : std::numeric_limits<double>::quiet_NaN();
    }
  return out;
}

metrics::MetricReport report_loop(const FlowField& pred, const FlowField& gt) {
  const auto e = epe_map_loop(pred, gt);
  const auto g = gt.uv().to(torch::kFloat64).contiguous();
  auto ea = e.accessor<double, 2>();
  auto ga = g.accessor<double, 3>();
  double sum = 0, bsum[3] = {0, 0, 0};
  int64_t n = 0, out = 0, o1 = 0, o3 = 0, o5 = 0, bn[3] = {0, 0, 0};
  for (int64_t y = 0; y < gt.height(); ++y)
    for (int64_t x = 0; x < gt.width(); ++x) {
      const double err = ea[y][x];
      if (std::isnan(err)) continue;
      const double mag = std::sqrt(ga[y][x][0] * ga[y][x][0] + ga[y][x][1] * ga[y][x][1]);
      ++n;
      sum += err;
      if (err > 3.0 && err / mag > 0.05) ++out;
      o1 += err > 1.0;
      o3 += err > 3.0;
      o5 += err > 5.0;
      const int b = mag < 10.0 ? 0 : (mag < 40.0 ? 1 : 2);
      bsum[b] += err;
      ++bn[b];
    }
  metrics::MetricReport r;
  r.n_valid = n;
  const double dn = static_cast<double>(n);
  r.epe = sum / dn;
  r.fl_all = 100.0 * static_cast<double>(out) / dn;
  r.frac_1px = static_cast<double>(o1) / dn;
  r.frac_3px = static_cast<double>(o3) / dn;
  r.frac_5px = static_cast<double>(o5) / dn;
  auto bucket = [&](int b) -> std::optional<double> {
    if (bn[b] == 0) return std::nullopt;
    return bsum[b] / static_cast<double>(bn[b]);
  };
  r.s0_10 = bucket(0);
  r.s10_40 = bucket(1);
  r.s40plus = bucket(2);
  return r;
}

Tensor coverage_occlusion(const dataio::AffineMap& map, int64_t h, int64_t w) {
  auto out = torch::zeros({h, w}, torch::kFloat32);
  auto oa = out.accessor<float, 2>();
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      const auto t = map.apply(static_cast<double>(x), static_cast<double>(y));
      const bool inside = t[0] >= 0 && t[0] <= static_cast<double>(w - 1) && t[1] >= 0 && t[1] <= static_cast<double>(h - 1);
      oa[y][x] = inside ? 0.0f : 1.0f;
    }
  return out;
}

std::vector<double> channel_scores_loop(const Tensor& a_chw, const Tensor& b_chw) {
  const auto a = a_chw.to(torch::kFloat64).contiguous();
  const auto b = b_chw.to(torch::kFloat64).contiguous();
  auto aa = a.accessor<double, 3>();
  auto ba = b.accessor<double, 3>();
  std::vector<double> scores;
  for (int64_t d = 0; d < a.size(0); ++d) {
    double dot = 0, na = 0, nb = 0;
    for (int64_t y = 0; y < a.size(1); ++y)
      for (int64_t x = 0; x < a.size(2); ++x) {
        dot += aa[d][y][x] * ba[d][y][x];
        na += aa[d][y][x] * aa[d][y][x];
        nb += ba[d][y][x] * ba[d][y][x];
      }
    scores.push_back(na > 0 && nb > 0 ? dot / std::sqrt(na * nb) : 0.0);
  }
  return scores;
}

std::vector<int64_t> topk_indices_loop(const Tensor& a_chw, const Tensor& b_chw, int64_t k) {
  const auto scores = channel_scores_loop(a_chw, b_chw);
  std::vector<int64_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](int64_t i, int64_t j) {
    if (scores[i] != scores[j]) return scores[i] > scores[j];
    return i < j;
  });
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

double l1_loop(const Tensor& pred, const Tensor& gt) {
  const auto p = pred.to(torch::kFloat64).contiguous();
  const auto g = gt.to(torch::kFloat64).contiguous();
  auto pa = p.accessor<double, 3>();
  auto ga = g.accessor<double, 3>();
  double sum = 0;
  for (int64_t y = 0; y < p.size(1); ++y)
    for (int64_t x = 0; x < p.size(2); ++x) sum += std::abs(pa[0][y][x] - ga[0][y][x]) + std::abs(pa[1][y][x] - ga[1][y][x]);
  return sum / static_cast<double>(p.size(1) * p.size(2));
}

GradCheck check_gradient(const std::function<Tensor(const std::vector<Tensor>&)>& f, std::vector<Tensor> inputs,
                         int64_t per_input, uint64_t seed, double eps, double floor) {
  for (auto& t : inputs) t = t.detach().to(torch::kFloat64).clone().requires_grad_(true);
  auto out = f(inputs);
  auto grads = torch::autograd::grad({out}, inputs, {}, false, false, /*allow_unused=*/true);

  std::mt19937_64 rng(seed);
  GradCheck r;
  torch::NoGradGuard g;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const int64_t n = inputs[i].numel();
    std::vector<int64_t> coords(n);
    std::iota(coords.begin(), coords.end(), 0);
    if (per_input < n) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(per_input);
    }
    auto flat = inputs[i].view(-1);
    const auto analytic = grads[i].defined() ? grads[i].reshape(-1) : torch::zeros({n}, torch::kFloat64);
    for (auto c : coords) {
      const double orig = flat[c].item<double>();
      flat[c].fill_(orig + eps);
      const double up = f(inputs).item<double>();
      flat[c].fill_(orig - eps);
      const double down = f(inputs).item<double>();
      flat[c].fill_(orig);
      const double num = (up - down) / (2 * eps);
      const double ana = analytic[c].item<double>();
      const double rel = std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), floor});
      r.max_rel_error = std::max(r.max_rel_error, rel);
      ++r.probed;
    }
  }
  return r;
}

}  // namespace kinflow::oracle
