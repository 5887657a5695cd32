#include "mmt/io/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace mmt::io {

static_assert(std::endian::native == std::endian::little, "payloads are written in host order");

namespace {

constexpr const char* kMagic = "CKPT1 ";
constexpr uint64_t kMaxEntries = 1u << 20;
constexpr uint32_t kMaxName = 4096;

size_t dtype_size(const std::string& dtype) {
  if (dtype == "f32") return 4;
  if (dtype == "f64" || dtype == "i64") return 8;
  if (dtype == "u8") return 1;
  throw std::invalid_argument("unknown dtype '" + dtype + "'");
}

template <typename T>
std::vector<uint8_t> to_bytes(const T* p, size_t n) {
  std::vector<uint8_t> out(n * sizeof(T));
  if (n) std::memcpy(out.data(), p, out.size());
  return out;
}

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

class Reader {
 public:
  Reader(const std::filesystem::path& path, std::string data) : path_(path), data_(std::move(data)) {}
  template <typename T>
  T pod(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str(size_t n, const char* what) {
    need(n, what);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  size_t pos() const { return pos_; }
  void seek(size_t p) { pos_ = p; }
  size_t size() const { return data_.size(); }
  const char* at(size_t p) const { return data_.data() + p; }
  [[noreturn]] void fail(const std::string& what) const { throw FormatError(path_, pos_, what); }

 private:
  void need(size_t n, const char* what) const {
    if (data_.size() - pos_ < n) fail(std::string("truncated ") + what);
  }
  std::filesystem::path path_;
  std::string data_;
  size_t pos_ = 0;
};

}  // namespace

void Checkpoint::put_tensor(const std::string& name, const Tensor& t) { put_reals(name, t.shape(), t.values()); }

void Checkpoint::put_reals(const std::string& name, const Shape& shape, const std::vector<Real>& values) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) throw std::invalid_argument("checkpoint: shape/value mismatch for " + name);
  entries_[name] = Entry{sizeof(Real) == 4 ? "f32" : "f64", shape, to_bytes(values.data(), values.size())};
}

void Checkpoint::put_i64(const std::string& name, const std::vector<int64_t>& values) {
  entries_[name] = Entry{"i64", {static_cast<int64_t>(values.size())}, to_bytes(values.data(), values.size())};
}

void Checkpoint::put_bytes(const std::string& name, const std::string& bytes) {
  entries_[name] = Entry{"u8", {static_cast<int64_t>(bytes.size())}, std::vector<uint8_t>(bytes.begin(), bytes.end())};
}

void Checkpoint::put_entry(const std::string& name, Entry e) {
  if (static_cast<uint64_t>(shape_numel(e.shape)) * dtype_size(e.dtype) != e.bytes.size())
    throw std::invalid_argument("checkpoint: byte count does not match shape of '" + name + "'");
  entries_[name] = std::move(e);
}

const Entry& Checkpoint::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("checkpoint: missing entry '" + name + "'");
  return it->second;
}

std::vector<Real> Checkpoint::get_reals(const std::string& name, const Shape& expected) const {
  const Entry& e = entry(name);
  if (e.shape != expected)
    throw std::invalid_argument("checkpoint: entry '" + name + "' has shape " + shape_str(e.shape) + ", expected " + shape_str(expected));
  const size_t n = static_cast<size_t>(shape_numel(e.shape));
  std::vector<Real> out(n);
  if (e.dtype == "f32") {
    std::vector<float> tmp(n);
    if (n) std::memcpy(tmp.data(), e.bytes.data(), n * 4);
    for (size_t i = 0; i < n; ++i) out[i] = static_cast<Real>(tmp[i]);
  } else if (e.dtype == "f64") {
    std::vector<double> tmp(n);
    if (n) std::memcpy(tmp.data(), e.bytes.data(), n * 8);
    for (size_t i = 0; i < n; ++i) out[i] = static_cast<Real>(tmp[i]);
  } else {
    throw std::invalid_argument("checkpoint: entry '" + name + "' is " + e.dtype + ", not floating point");
  }
  return out;
}

Tensor Checkpoint::get_tensor(const std::string& name, bool requires_grad) const {
  const Entry& e = entry(name);
  return Tensor::from(e.shape, get_reals(name, e.shape), requires_grad);
}

std::vector<int64_t> Checkpoint::get_i64(const std::string& name) const {
  const Entry& e = entry(name);
  if (e.dtype != "i64") throw std::invalid_argument("checkpoint: entry '" + name + "' is " + e.dtype + ", not i64");
  std::vector<int64_t> out(e.bytes.size() / 8);
  if (!out.empty()) std::memcpy(out.data(), e.bytes.data(), e.bytes.size());
  return out;
}

std::string Checkpoint::get_bytes(const std::string& name) const {
  const Entry& e = entry(name);
  if (e.dtype != "u8") throw std::invalid_argument("checkpoint: entry '" + name + "' is " + e.dtype + ", not u8");
  return std::string(e.bytes.begin(), e.bytes.end());
}

bool Checkpoint::operator==(const Checkpoint& o) const {
  if (header != o.header || entries_.size() != o.entries_.size()) return false;
  for (const auto& [name, e] : entries_) {
    auto it = o.entries_.find(name);
    if (it == o.entries_.end()) return false;
    if (it->second.dtype != e.dtype || it->second.shape != e.shape || it->second.bytes != e.bytes) return false;
  }
  return true;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error(tmp.string() + ": cannot open for writing");
    out << kMagic << ckpt.header.dump() << '\n';
    write_pod<uint64_t>(out, ckpt.entries().size());
    uint64_t offset = 0;
    for (const auto& [name, e] : ckpt.entries()) {
      write_pod<uint32_t>(out, static_cast<uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      write_pod<uint32_t>(out, static_cast<uint32_t>(e.dtype.size()));
      out.write(e.dtype.data(), static_cast<std::streamsize>(e.dtype.size()));
      write_pod<uint32_t>(out, static_cast<uint32_t>(e.shape.size()));
      for (int64_t d : e.shape) write_pod<int64_t>(out, d);
      write_pod<uint64_t>(out, offset);
      write_pod<uint64_t>(out, e.bytes.size());
      offset += e.bytes.size();
    }
    for (const auto& [name, e] : ckpt.entries())
      out.write(reinterpret_cast<const char*>(e.bytes.data()), static_cast<std::streamsize>(e.bytes.size()));
    if (!out) throw std::runtime_error(tmp.string() + ": write failed");
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path.string() + ": cannot open checkpoint");
  std::ostringstream buf;
  buf << in.rdbuf();
  Reader r(path, buf.str());

  if (r.size() < 6 || std::memcmp(r.at(0), kMagic, 6) != 0) r.fail("missing CKPT1 magic");
  const void* nl = std::memchr(r.at(6), '\n', r.size() - 6);
  if (!nl) {
    r.seek(6);
    r.fail("header line is not terminated");
  }
  const size_t header_end = static_cast<size_t>(static_cast<const char*>(nl) - r.at(0));
  Checkpoint ckpt;
  try {
    ckpt.header = nlohmann::json::parse(std::string(r.at(6), header_end - 6));
  } catch (const nlohmann::json::exception& e) {
    r.seek(6);
    r.fail(std::string("bad header JSON: ") + e.what());
  }
  r.seek(header_end + 1);

  struct Pending {
    std::string name;
    Entry entry;
    uint64_t offset, nbytes;
  };
  const uint64_t count = r.pod<uint64_t>("entry count");
  if (count > kMaxEntries) r.fail("implausible entry count " + std::to_string(count));
  std::vector<Pending> table;
  for (uint64_t i = 0; i < count; ++i) {
    Pending p;
    const uint32_t name_len = r.pod<uint32_t>("name length");
    if (name_len > kMaxName) r.fail("implausible name length");
    p.name = r.str(name_len, "name");
    const uint32_t dtype_len = r.pod<uint32_t>("dtype length");
    if (dtype_len > 8) r.fail("implausible dtype length");
    p.entry.dtype = r.str(dtype_len, "dtype");
    size_t width = 0;
    try {
      width = dtype_size(p.entry.dtype);
    } catch (const std::invalid_argument& e) {
      r.fail(e.what());
    }
    const uint32_t ndim = r.pod<uint32_t>("ndim");
    if (ndim > 8) r.fail("implausible rank");
    for (uint32_t d = 0; d < ndim; ++d) {
      const int64_t v = r.pod<int64_t>("dims");
      if (v < 0) r.fail("negative dimension");
      p.entry.shape.push_back(v);
    }
    p.offset = r.pod<uint64_t>("offset");
    p.nbytes = r.pod<uint64_t>("byte count");
    if (p.nbytes != static_cast<uint64_t>(shape_numel(p.entry.shape)) * width) r.fail("byte count does not match shape of '" + p.name + "'");
    table.push_back(std::move(p));
  }
  const size_t payload = r.pos();
  uint64_t expected = 0;
  for (auto& p : table) {
    if (p.offset != expected) r.fail("non-contiguous payload offset for '" + p.name + "'");
    if (r.size() - payload < p.offset + p.nbytes) {
      r.seek(r.size());
      r.fail("payload of '" + p.name + "' is truncated");
    }
    const auto* src = reinterpret_cast<const uint8_t*>(r.at(payload + p.offset));
    p.entry.bytes.assign(src, src + p.nbytes);
    expected += p.nbytes;
  }
  if (payload + expected != r.size()) {
    r.seek(payload + expected);
    r.fail("trailing bytes after payload");
  }
  for (auto& p : table) {
    if (ckpt.has(p.name)) r.fail("duplicate entry '" + p.name + "'");
    ckpt.put_entry(p.name, std::move(p.entry));
  }
  return ckpt;
}

std::string file_fingerprint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path.string() + ": cannot open");
  uint64_t h = 1469598103934665603ull;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<uint8_t>(buf[i]);
      h *= 1099511628211ull;
    }
  }
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << h;
  return s.str();
}

void put_params(Checkpoint& ckpt, const NamedParams& params, const std::string& prefix) {
  for (const auto& [name, t] : params) ckpt.put_tensor(prefix + name, t);
}

void load_params(const Checkpoint& ckpt, const NamedParams& params, const std::string& prefix) {
  for (const auto& [name, t] : params) {
    auto values = ckpt.get_reals(prefix + name, t.shape());
    Tensor dst = t;
    std::copy(values.begin(), values.end(), dst.mutable_data().begin());
  }
}

void put_optimizer(Checkpoint& ckpt, const AdamW& opt, const std::string& prefix) {
  ckpt.put_i64(prefix + "step", {opt.steps()});
  for (const auto& [name, m] : opt.moments()) {
    ckpt.put_reals(prefix + "m." + name, {static_cast<int64_t>(m.m.size())}, m.m);
    ckpt.put_reals(prefix + "v." + name, {static_cast<int64_t>(m.v.size())}, m.v);
  }
}

void load_optimizer(const Checkpoint& ckpt, AdamW& opt, const NamedParams& params, const std::string& prefix) {
  const auto step = ckpt.get_i64(prefix + "step");
  if (step.size() != 1) throw std::invalid_argument("checkpoint: bad optimizer step entry");
  std::map<std::string, AdamW::Moments> moments;
  for (const auto& [name, t] : params) {
    if (!ckpt.has(prefix + "m." + name)) continue;
    const Shape flat{t.numel()};
    moments[name] = {ckpt.get_reals(prefix + "m." + name, flat), ckpt.get_reals(prefix + "v." + name, flat)};
  }
  opt.restore(step[0], std::move(moments));
}

void put_rng(Checkpoint& ckpt, const std::string& name, const Rng& rng) { ckpt.put_bytes(name, rng.state()); }

void load_rng(const Checkpoint& ckpt, const std::string& name, Rng& rng) { rng.set_state(ckpt.get_bytes(name)); }

}  // namespace mmt::io
