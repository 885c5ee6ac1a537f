#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "model.hpp"

namespace shlab {

// Checkpoint file, all integers and floats little-endian regardless of host:
//   "SHLB" | u16 version | u32 json_len | config JSON
//   | u32 n_tensors | table (u16 name_len, name, u32 rows, u32 cols, u8 dtype)
//   | payload (row-major, table order = lexicographic names) | u64 checksum
//   | u8 has_optimizer | optimizer section (own payload + checksum)
// The optimizer section is separate so analysis loads can skip it.

inline constexpr uint16_t kCheckpointVersion = 1;
inline constexpr uint8_t kDtypeF32 = 0;
inline constexpr uint8_t kDtypeF64 = 1;

struct OptimizerSection {
  int64_t t = 0;
  Eigen::VectorXd m;
  Eigen::VectorXd v;
};

struct Checkpoint {
  ModelState state;
  uint8_t dtype = kDtypeF64;  // storage precision of the saved tensors
  std::optional<OptimizerSection> optimizer;
};

// Atomic (write-temp-then-rename). Values outside f32 range with dtype f32
// are a numeric error; training keeps parameters f32-exact so the narrowing
// is lossless there.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);

// Verifies magic, version, table-vs-config consistency, and checksums.
// `want_optimizer` skips the optimizer section entirely when false.
Checkpoint load_checkpoint(const std::string& path, bool want_optimizer = true);

// Canonical manifest form: nlohmann keeps object keys sorted, so a compact
// dump is already canonical; hashes of it are stable across runs.
std::string canonical_json(const json& j);
std::string json_sha256(const json& j);  // hex digest of the canonical form

void write_json_atomic(const json& j, const std::string& path);
json read_json_file(const std::string& path);

void write_text_atomic(const std::string& text, const std::string& path);

}  // namespace shlab
