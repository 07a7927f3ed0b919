#include "kinflow/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace kinflow::checkpoint {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'K', 'F', 'C', 'K'};
enum class SectionKind : uint8_t { tensor = 0, bytes = 1, u64 = 2 };

uint8_t dtype_code(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return 0;
    case torch::kFloat64: return 1;
    case torch::kInt64: return 2;
    case torch::kBool: return 3;
    default: throw FormatError(std::string("checkpoint: unsupported dtype ") + c10::toString(t));
  }
}

torch::ScalarType dtype_from(uint8_t c) {
  switch (c) {
    case 0: return torch::kFloat32;
    case 1: return torch::kFloat64;
    case 2: return torch::kInt64;
    case 3: return torch::kBool;
    default: throw FormatError("checkpoint: unknown dtype code " + std::to_string(c));
  }
}

class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) {}
  template <typename T>
  void pod(T v) {
    os_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void bytes(const std::string& s) {
    pod<uint64_t>(s.size());
    os_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void name(const std::string& n, SectionKind k) {
    pod<uint32_t>(static_cast<uint32_t>(n.size()));
    os_.write(n.data(), static_cast<std::streamsize>(n.size()));
    pod<uint8_t>(static_cast<uint8_t>(k));
  }
  void tensor(const Tensor& t) {
    auto c = t.detach().cpu().contiguous();
    pod<uint8_t>(dtype_code(c.scalar_type()));
    pod<uint32_t>(static_cast<uint32_t>(c.dim()));
    for (auto s : c.sizes()) pod<int64_t>(s);
    const auto nbytes = static_cast<uint64_t>(c.numel() * c.element_size());
    pod<uint64_t>(nbytes);
    os_.write(static_cast<const char*>(c.data_ptr()), static_cast<std::streamsize>(nbytes));
  }

 private:
  std::ostream& os_;
};

class Reader {
 public:
  explicit Reader(std::istream& is) : is_(is) {}
  template <typename T>
  T pod() {
    T v{};
    read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
  }
  std::string raw(uint64_t n) {
    if (n > (uint64_t{1} << 34)) throw FormatError("checkpoint: implausible section length");
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }
  std::string bytes() { return raw(pod<uint64_t>()); }
  Tensor tensor() {
    const auto dtype = dtype_from(pod<uint8_t>());
    const auto ndim = pod<uint32_t>();
    if (ndim > 8) throw FormatError("checkpoint: implausible tensor rank");
    std::vector<int64_t> sizes(ndim);
    for (auto& s : sizes) {
      s = pod<int64_t>();
      if (s < 0) throw FormatError("checkpoint: negative tensor dimension");
    }
    auto t = torch::empty(sizes, torch::TensorOptions(dtype));
    const auto nbytes = pod<uint64_t>();
    if (nbytes != static_cast<uint64_t>(t.numel() * t.element_size()))
      throw FormatError("checkpoint: tensor payload size mismatch");
    read(static_cast<char*>(t.data_ptr()), nbytes);
    return t;
  }

 private:
  void read(char* dst, uint64_t n) {
    is_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<uint64_t>(is_.gcount()) != n) throw FormatError("checkpoint: truncated file");
  }
  std::istream& is_;
};

}  // namespace

void save(const Checkpoint& c, const std::filesystem::path& path) {
  std::ostringstream buf(std::ios::binary);
  Writer w(buf);
  buf.write(kMagic, 4);
  w.pod<uint32_t>(kVersion);
  w.pod<uint32_t>(static_cast<uint32_t>(8 + c.params.size()));
  auto text = [&](const char* n, const std::string& v) {
    w.name(n, SectionKind::bytes);
    w.bytes(v);
  };
  auto u64 = [&](const char* n, uint64_t v) {
    w.name(n, SectionKind::u64);
    w.pod<uint64_t>(v);
  };
  text("architecture", c.architecture);
  text("config", c.config_json);
  text("phase", c.phase);
  u64("step", static_cast<uint64_t>(c.step));
  u64("seed", c.seed);
  text("optimizer", c.optimizer);
  text("data_state", c.data_state);
  text("rng_state", c.rng_state);
  for (const auto& [name, t] : c.params) {
    w.name("param/" + name, SectionKind::tensor);
    w.tensor(t);
  }
  // Write to a sibling file first so an interrupted save never clobbers the
  // previous checkpoint.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write checkpoint " + path.string());
    const auto s = buf.str();
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
    if (!os) throw IoError("failed writing checkpoint " + path.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place: " + ec.message());
}

Checkpoint load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  Reader r(is);
  char magic[4];
  is.read(magic, 4);
  if (is.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0) throw FormatError("not a checkpoint (bad magic)");
  const auto version = r.pod<uint32_t>();
  if (version != kVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto count = r.pod<uint32_t>();
  Checkpoint c;
  for (uint32_t i = 0; i < count; ++i) {
    const auto name = r.raw(r.pod<uint32_t>());
    const auto kind = static_cast<SectionKind>(r.pod<uint8_t>());
    switch (kind) {
      case SectionKind::tensor:
        if (name.rfind("param/", 0) != 0) throw FormatError("checkpoint: unexpected tensor section " + name);
        c.params[name.substr(6)] = r.tensor();
        break;
      case SectionKind::bytes: {
        auto v = r.bytes();
        if (name == "architecture") c.architecture = std::move(v);
        else if (name == "config") c.config_json = std::move(v);
        else if (name == "phase") c.phase = std::move(v);
        else if (name == "optimizer") c.optimizer = std::move(v);
        else if (name == "data_state") c.data_state = std::move(v);
        else if (name == "rng_state") c.rng_state = std::move(v);
        break;  // unknown text sections are ignored for forward compatibility
      }
      case SectionKind::u64: {
        const auto v = r.pod<uint64_t>();
        if (name == "step") c.step = static_cast<int64_t>(v);
        else if (name == "seed") c.seed = v;
        break;
      }
      default:
        throw FormatError("checkpoint: unknown section kind in " + name);
    }
  }
  return c;
}

std::map<std::string, Tensor> snapshot(const torch::nn::Module& module) {
  std::map<std::string, Tensor> out;
  for (const auto& p : module.named_parameters()) out[p.key()] = p.value().detach().clone();
  for (const auto& b : module.named_buffers()) out[b.key()] = b.value().detach().clone();
  return out;
}

void copy_into(torch::nn::Module& module, const std::map<std::string, Tensor>& params) {
  torch::NoGradGuard g;
  auto assign = [&](const std::string& name, Tensor& dst) {
    auto it = params.find(name);
    if (it == params.end()) throw FormatError("checkpoint missing tensor " + name);
    if (it->second.sizes() != dst.sizes()) throw FormatError("checkpoint tensor " + name + " has the wrong shape");
    dst.copy_(it->second);
  };
  for (auto& p : module.named_parameters()) assign(p.key(), p.value());
  for (auto& b : module.named_buffers()) assign(b.key(), b.value());
}

}  // namespace kinflow::checkpoint
