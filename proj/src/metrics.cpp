#include "kinflow/metrics.hpp"

#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>

namespace kinflow::metrics {

namespace {

void require_pair(const FlowField& pred, const FlowField& gt) {
  check_input(pred);
  check_input(gt);
  require_same_size(pred.height(), pred.width(), gt.height(), gt.width(), "metric inputs");
}

int bucket_of(double mag) {
  if (mag < kBucketLow) return 0;
  if (mag < kBucketHigh) return 1;
  return 2;
}

// Visits every pixel that carries ground truth (valid in gt, and in pred when
// pred has its own mask).
template <typename Fn>
void for_each_valid(const FlowField& pred, const FlowField& gt, Fn&& fn) {
  const auto p = pred.uv().detach().to(torch::kFloat64).contiguous();
  const auto g = gt.uv().detach().to(torch::kFloat64).contiguous();
  const auto valid = gt.valid_or_all().contiguous();
  auto pa = p.accessor<double, 3>();
  auto ga = g.accessor<double, 3>();
  auto va = valid.accessor<bool, 2>();
  for (int64_t y = 0; y < gt.height(); ++y) {
    for (int64_t x = 0; x < gt.width(); ++x) {
      if (!va[y][x]) continue;
      const double du = pa[y][x][0] - ga[y][x][0], dv = pa[y][x][1] - ga[y][x][1];
      const double err = std::sqrt(du * du + dv * dv);
      const double mag = std::sqrt(ga[y][x][0] * ga[y][x][0] + ga[y][x][1] * ga[y][x][1]);
      fn(err, mag);
    }
  }
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string("NA"); }

}  // namespace

Tensor epe_map(const FlowField& pred, const FlowField& gt) {
  require_pair(pred, gt);
  auto diff = pred.uv().detach().to(torch::kFloat64) - gt.uv().detach().to(torch::kFloat64);
  auto e = diff.pow(2).sum(2).sqrt();
  if (gt.valid()) {
    e = torch::where(*gt.valid(), e, torch::full_like(e, std::numeric_limits<double>::quiet_NaN()));
  }
  return e;
}

double epe(const FlowField& pred, const FlowField& gt) { return evaluate_pair(pred, gt).epe; }

double fl_all(const FlowField& pred, const FlowField& gt) { return evaluate_pair(pred, gt).fl_all; }

Buckets bucketed_epe(const FlowField& pred, const FlowField& gt) {
  require_pair(pred, gt);
  MetricAccumulator acc;
  acc.add(pred, gt);
  if (acc.n_valid() == 0) return {};
  const auto r = acc.report();
  return {r.s0_10, r.s10_40, r.s40plus};
}

PixelFractions px_fractions(const FlowField& pred, const FlowField& gt) {
  const auto r = evaluate_pair(pred, gt);
  return {r.frac_1px, r.frac_3px, r.frac_5px};
}

MetricReport evaluate_pair(const FlowField& pred, const FlowField& gt) {
  MetricAccumulator acc;
  acc.add(pred, gt);
  return acc.report();
}

void MetricAccumulator::add(const FlowField& pred, const FlowField& gt) {
  require_pair(pred, gt);
  for_each_valid(pred, gt, [&](double err, double mag) {
    ++n_;
    epe_sum_ += err;
    if (err > kFlAbsThreshold && err / mag > kFlRelThreshold) ++outliers_;
    if (err > 1.0) ++over1_;
    if (err > 3.0) ++over3_;
    if (err > 5.0) ++over5_;
    const int b = bucket_of(mag);
    bucket_sum_[b] += err;
    ++bucket_n_[b];
  });
}

MetricReport MetricAccumulator::report() const {
  if (n_ == 0) throw EmptyValidSet("no valid ground-truth pixels");
  const double n = static_cast<double>(n_);
  MetricReport r;
  r.n_valid = n_;
  r.epe = epe_sum_ / n;
  r.fl_all = 100.0 * static_cast<double>(outliers_) / n;
  r.frac_1px = static_cast<double>(over1_) / n;
  r.frac_3px = static_cast<double>(over3_) / n;
  r.frac_5px = static_cast<double>(over5_) / n;
  auto bucket = [&](int b) -> std::optional<double> {
    if (bucket_n_[b] == 0) return std::nullopt;
    return bucket_sum_[b] / static_cast<double>(bucket_n_[b]);
  };
  r.s0_10 = bucket(0);
  r.s10_40 = bucket(1);
  r.s40plus = bucket(2);
  return r;
}

std::string to_text(const MetricReport& r) {
  std::ostringstream os;
  os << "epe " << fmt(r.epe) << "\n"
     << "fl_all " << fmt(r.fl_all) << "\n"
     << "s0_10 " << fmt(r.s0_10) << "\n"
     << "s10_40 " << fmt(r.s10_40) << "\n"
     << "s40plus " << fmt(r.s40plus) << "\n"
     << "frac_1px " << fmt(r.frac_1px) << "\n"
     << "frac_3px " << fmt(r.frac_3px) << "\n"
     << "frac_5px " << fmt(r.frac_5px) << "\n"
     << "n_valid " << r.n_valid << "\n";
  return os.str();
}

MetricReport report_from_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto sp = line.find(' ');
    if (sp == std::string::npos) throw FormatError("malformed report line: " + line);
    kv[line.substr(0, sp)] = line.substr(sp + 1);
  }
  auto get = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError(std::string("report missing field ") + key);
    return it->second;
  };
  auto num = [&](const char* key) {
    try {
      return std::stod(get(key));
    } catch (const std::logic_error&) {
      throw FormatError(std::string("report field not numeric: ") + key);
    }
  };
  auto opt = [&](const char* key) -> std::optional<double> {
    if (get(key) == "NA") return std::nullopt;
    return num(key);
  };
  MetricReport r;
  r.epe = num("epe");
  r.fl_all = num("fl_all");
  r.s0_10 = opt("s0_10");
  r.s10_40 = opt("s10_40");
  r.s40plus = opt("s40plus");
  r.frac_1px = num("frac_1px");
  r.frac_3px = num("frac_3px");
  r.frac_5px = num("frac_5px");
  r.n_valid = static_cast<int64_t>(num("n_valid"));
  return r;
}

std::string csv_header() { return "epe,fl_all,s0_10,s10_40,s40plus,frac_1px,frac_3px,frac_5px,n_valid"; }

std::string to_csv_row(const MetricReport& r) {
  std::ostringstream os;
  os << fmt(r.epe) << ',' << fmt(r.fl_all) << ',' << fmt(r.s0_10) << ',' << fmt(r.s10_40) << ','
     << fmt(r.s40plus) << ',' << fmt(r.frac_1px) << ',' << fmt(r.frac_3px) << ',' << fmt(r.frac_5px) << ','
     << r.n_valid;
  return os.str();
}

}  // namespace kinflow::metrics
