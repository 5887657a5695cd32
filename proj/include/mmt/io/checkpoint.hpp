#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmt/io/error.hpp"
#include "mmt/optim.hpp"
#include "mmt/rng.hpp"
#include "mmt/tensor.hpp"

namespace mmt::io {

// CKPT1 layout:
//   "CKPT1 " + compact JSON header + "\n"
//   u64 entry count, then per entry:
//     u32 name length, name bytes, u32 dtype length, dtype bytes,
//     u32 ndim, i64 dims[ndim], u64 payload offset, u64 payload bytes
//   payload region (offsets relative to its start), little-endian values.
// dtypes: "f32", "f64", "i64", "u8".
struct Entry {
  std::string dtype;
  Shape shape;
  std::vector<uint8_t> bytes;
};

class Checkpoint {
 public:
  nlohmann::json header = nlohmann::json::object();

  void put_tensor(const std::string& name, const Tensor& t);
  void put_reals(const std::string& name, const Shape& shape, const std::vector<Real>& values);
  void put_i64(const std::string& name, const std::vector<int64_t>& values);
  void put_bytes(const std::string& name, const std::string& bytes);
  void put_entry(const std::string& name, Entry e);

  bool has(const std::string& name) const { return entries_.count(name) != 0; }
  const Entry& entry(const std::string& name) const;
  // Values must match the expected shape exactly; stored precision is
  // converted to the build's Real.
  std::vector<Real> get_reals(const std::string& name, const Shape& expected) const;
  Tensor get_tensor(const std::string& name, bool requires_grad = false) const;
  std::vector<int64_t> get_i64(const std::string& name) const;
  std::string get_bytes(const std::string& name) const;

  const std::map<std::string, Entry>& entries() const { return entries_; }
  bool operator==(const Checkpoint&) const;

 private:
  std::map<std::string, Entry> entries_;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// FNV-1a 64 hash of a file's bytes as 16 hex digits.
std::string file_fingerprint(const std::filesystem::path& path);

// Parameter values under "<prefix><name>".
void put_params(Checkpoint& ckpt, const NamedParams& params, const std::string& prefix = "param.");
// Copies stored values into existing parameters; shapes must match and
// every parameter must be present.
void load_params(const Checkpoint& ckpt, const NamedParams& params, const std::string& prefix = "param.");

void put_optimizer(Checkpoint& ckpt, const AdamW& opt, const std::string& prefix = "adam.");
void load_optimizer(const Checkpoint& ckpt, AdamW& opt, const NamedParams& params, const std::string& prefix = "adam.");

void put_rng(Checkpoint& ckpt, const std::string& name, const Rng& rng);
void load_rng(const Checkpoint& ckpt, const std::string& name, Rng& rng);

}  // namespace mmt::io
