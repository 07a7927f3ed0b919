#include <numeric>
#include <sstream>

#include "kinflow/dataio.hpp"

namespace kinflow::dataio {

SampleRecord crop_record(const SampleRecord& record, int64_t top, int64_t left, CropSize crop, bool flip) {
  const int64_t h = record.frame0.height(), w = record.frame0.width();
  if (crop.height > h || crop.width > w || top < 0 || left < 0 || top + crop.height > h ||
      left + crop.width > w)
    throw ConfigError("crop window exceeds frame");
  auto window = [&](const Tensor& t) {
    auto c = t.narrow(0, top, crop.height).narrow(1, left, crop.width);
    if (flip) c = c.flip({1});
    return c.contiguous();
  };
  SampleRecord out{Frame(window(record.frame0.pixels()), record.frame0.time_tag()),
                   Frame(window(record.frame1.pixels()), record.frame1.time_tag()),
                   std::nullopt,
                   std::nullopt,
                   record.id,
                   std::nullopt};
  if (record.gt_flow) {
    auto uv = window(record.gt_flow->uv());
    if (flip) uv = torch::stack({-uv.select(2, 0), uv.select(2, 1)}, 2).contiguous();
    std::optional<Tensor> valid;
    if (record.gt_flow->valid()) valid = window(*record.gt_flow->valid());
    out.gt_flow = FlowField(uv, valid);
  }
  if (record.gt_occ) out.gt_occ = OcclusionMap(window(record.gt_occ->occ()));
  // The analytic motion no longer describes a cropped or mirrored pair.
  if (!flip && top == 0 && left == 0 && crop.height == h && crop.width == w) out.motion = record.motion;
  return out;
}

DatasetIterator::DatasetIterator(const std::vector<SampleRecord>& records, int64_t batch, RngSeed seed,
                                 CropSize crop, bool augment)
    : records_(&records), batch_(batch), crop_(crop), augment_(augment), rng_(make_engine(seed, 0xda7a)) {
  if (batch <= 0) throw ConfigError("batch must be positive");
  if (records.empty()) throw ConfigError("dataset is empty");
  if (static_cast<int64_t>(records.size()) < batch) throw ConfigError("batch larger than dataset");
  for (const auto& r : records) {
    if (crop.height > r.frame0.height() || crop.width > r.frame0.width())
      throw ConfigError("crop " + std::to_string(crop.height) + "x" + std::to_string(crop.width) +
                        " larger than frames of record '" + r.id + "'");
  }
  batches_per_epoch_ = static_cast<int64_t>(records.size()) / batch;
  reshuffle();
}

void DatasetIterator::reshuffle() {
  order_.resize(records_->size());
  std::iota(order_.begin(), order_.end(), 0);
  // Fisher-Yates with explicit draws so the order does not depend on the
  // standard library's shuffle implementation.
  for (int64_t i = static_cast<int64_t>(order_.size()) - 1; i > 0; --i) {
    const auto j = static_cast<int64_t>(rng_() % static_cast<uint64_t>(i + 1));
    std::swap(order_[i], order_[j]);
  }
  cursor_ = 0;
}

std::vector<SampleRecord> DatasetIterator::next() {
  if (cursor_ >= batches_per_epoch_) {
    ++epoch_;
    reshuffle();
  }
  std::vector<SampleRecord> out;
  out.reserve(batch_);
  for (int64_t k = 0; k < batch_; ++k) {
    const auto& r = (*records_)[order_[cursor_ * batch_ + k]];
    const int64_t h = r.frame0.height(), w = r.frame0.width();
    const int64_t ch = crop_.height > 0 ? crop_.height : h, cw = crop_.width > 0 ? crop_.width : w;
    const auto top = static_cast<int64_t>(rng_() % static_cast<uint64_t>(h - ch + 1));
    const auto left = static_cast<int64_t>(rng_() % static_cast<uint64_t>(w - cw + 1));
    const bool flip = augment_ && (rng_() & 1u);
    out.push_back(crop_record(r, top, left, {ch, cw}, flip));
  }
  ++cursor_;
  return out;
}

std::string DatasetIterator::state() const {
  std::ostringstream os;
  os << epoch_ << ' ' << cursor_ << ' ' << order_.size();
  for (auto i : order_) os << ' ' << i;
  os << ' ' << rng_;
  return os.str();
}

void DatasetIterator::restore(const std::string& state) {
  std::istringstream is(state);
  std::size_t n = 0;
  is >> epoch_ >> cursor_ >> n;
  if (!is || n != records_->size()) throw FormatError("iterator state does not match dataset");
  order_.assign(n, 0);
  for (auto& i : order_) is >> i;
  is >> rng_;
  if (!is) throw FormatError("corrupt iterator state");
}

}  // namespace kinflow::dataio
