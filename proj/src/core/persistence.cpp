#include "persistence.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <unistd.h>

#include "sha256.hpp"

namespace shlab {

namespace {

// Explicit little-endian byte packing so the format is host-independent.

void put_u16(std::string& out, uint16_t x) {
  out.push_back(char(x & 0xff));
  out.push_back(char((x >> 8) & 0xff));
}

void put_u32(std::string& out, uint32_t x) {
  for (int i = 0; i < 4; ++i) out.push_back(char((x >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, uint64_t x) {
  for (int i = 0; i < 8; ++i) out.push_back(char((x >> (8 * i)) & 0xff));
}

struct Reader {
  const std::string& buf;
  size_t pos = 0;

  void need(size_t n) const {
    if (pos + n > buf.size()) {
      throw IoError("checkpoint truncated: wanted " + std::to_string(n) +
                    " bytes at offset " + std::to_string(pos));
    }
  }
  uint8_t u8() {
    need(1);
    return uint8_t(buf[pos++]);
  }
  uint16_t u16() {
    need(2);
    uint16_t x = 0;
    for (int i = 0; i < 2; ++i) x |= uint16_t(uint8_t(buf[pos + i])) << (8 * i);
    pos += 2;
    return x;
  }
  uint32_t u32() {
    need(4);
    uint32_t x = 0;
    for (int i = 0; i < 4; ++i) x |= uint32_t(uint8_t(buf[pos + i])) << (8 * i);
    pos += 4;
    return x;
  }
  uint64_t u64() {
    need(8);
    uint64_t x = 0;
    for (int i = 0; i < 8; ++i) x |= uint64_t(uint8_t(buf[pos + i])) << (8 * i);
    pos += 8;
    return x;
  }
  std::string bytes(size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

// FNV-1a, 64-bit: cheap, dependency-free payload checksum.
uint64_t fnv1a(const char* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
  for (size_t i = 0; i < n; ++i) {
    h ^= uint8_t(data[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

void append_payload(std::string& out, const double* data, Eigen::Index n,
                    uint8_t dtype) {
  if (dtype == kDtypeF32) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const double d = data[i];
      const float f = float(d);
      if (std::isfinite(d) && !std::isfinite(double(f))) {
        throw NumericError("value does not fit f32 storage");
      }
      put_u32(out, std::bit_cast<uint32_t>(f));
    }
  } else {
    for (Eigen::Index i = 0; i < n; ++i) {
      put_u64(out, std::bit_cast<uint64_t>(data[i]));
    }
  }
}

void read_payload(Reader& r, double* data, Eigen::Index n, uint8_t dtype) {
  if (dtype == kDtypeF32) {
    for (Eigen::Index i = 0; i < n; ++i) {
      data[i] = double(std::bit_cast<float>(r.u32()));
    }
  } else {
    for (Eigen::Index i = 0; i < n; ++i) {
      data[i] = std::bit_cast<double>(r.u64());
    }
  }
}

void atomic_write_bytes(const std::string& bytes, const std::string& path) {
  const std::string tmp = path + ".tmp-" + std::to_string(getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + tmp);
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) throw IoError("short write: " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    throw IoError("cannot rename into place: " + path);
  }
}

uint8_t check_dtype(uint8_t dtype) {
  if (dtype != kDtypeF32 && dtype != kDtypeF64) {
    throw StructureError("unknown dtype tag " + std::to_string(dtype));
  }
  return dtype;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  check_dtype(ckpt.dtype);
  // enforce table order and uniqueness
  const auto& tensors = ckpt.state.tensors;
  for (size_t i = 1; i < tensors.size(); ++i) {
    if (!(tensors[i - 1].first < tensors[i].first)) {
      throw StructureError("tensor names must be strictly increasing");
    }
  }

  std::string out;
  out += "SHLB";
  put_u16(out, kCheckpointVersion);

  const std::string cfg = canonical_json(ckpt.state.config);
  put_u32(out, uint32_t(cfg.size()));
  out += cfg;

  put_u32(out, uint32_t(tensors.size()));
  for (const auto& [name, mat] : tensors) {
    put_u16(out, uint16_t(name.size()));
    out += name;
    put_u32(out, uint32_t(mat.rows()));
    put_u32(out, uint32_t(mat.cols()));
    out.push_back(char(ckpt.dtype));
  }

  std::string payload;
  for (const auto& [name, mat] : tensors) {
    append_payload(payload, mat.data(), mat.size(), ckpt.dtype);
  }
  out += payload;
  put_u64(out, fnv1a(payload.data(), payload.size()));

  if (ckpt.optimizer) {
    const auto& opt = *ckpt.optimizer;
    if (opt.m.size() != opt.v.size()) {
      throw StructureError("optimizer m and v lengths disagree");
    }
    out.push_back(char(1));
    put_u64(out, uint64_t(opt.t));
    put_u64(out, uint64_t(opt.m.size()));
    out.push_back(char(ckpt.dtype));
    std::string opay;
    append_payload(opay, opt.m.data(), opt.m.size(), ckpt.dtype);
    append_payload(opay, opt.v.data(), opt.v.size(), ckpt.dtype);
    out += opay;
    put_u64(out, fnv1a(opay.data(), opay.size()));
  } else {
    out.push_back(char(0));
  }

  atomic_write_bytes(out, path);
}

Checkpoint load_checkpoint(const std::string& path, bool want_optimizer) {
  std::string buf;
  {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    buf.assign(std::istreambuf_iterator<char>(in),
               std::istreambuf_iterator<char>());
  }
  Reader r{buf};
  if (r.bytes(4) != "SHLB") throw IoError("not a checkpoint file: " + path);
  const uint16_t version = r.u16();
  if (version != kCheckpointVersion) {
    throw StructureError("unsupported checkpoint version " +
                         std::to_string(version) + ", expected " +
                         std::to_string(kCheckpointVersion));
  }

  Checkpoint ckpt;
  const uint32_t cfg_len = r.u32();
  ckpt.state.config = json::parse(r.bytes(cfg_len), nullptr, false);
  if (ckpt.state.config.is_discarded()) {
    throw IoError("checkpoint config JSON does not parse");
  }

  // expected layout from the config: names and shapes must match the table
  auto expected = make_loss(ckpt.state.config)->param_layout();

  const uint32_t n_tensors = r.u32();
  if (n_tensors != expected.size()) {
    throw StructureError("checkpoint has " + std::to_string(n_tensors) +
                         " tensors, config expects " +
                         std::to_string(expected.size()));
  }
  struct Entry {
    std::string name;
    Eigen::Index rows, cols;
    uint8_t dtype;
  };
  std::vector<Entry> table;
  table.reserve(n_tensors);
  for (uint32_t i = 0; i < n_tensors; ++i) {
    Entry e;
    e.name = r.bytes(r.u16());
    e.rows = Eigen::Index(r.u32());
    e.cols = Eigen::Index(r.u32());
    e.dtype = check_dtype(r.u8());
    if (e.name != expected[i].name) {
      throw StructureError("tensor '" + e.name +
                           "' does not belong to this config (expected '" +
                           expected[i].name + "')");
    }
    if (e.rows != expected[i].rows || e.cols != expected[i].cols) {
      throw StructureError("tensor '" + e.name + "' has shape " +
                           std::to_string(e.rows) + "x" +
                           std::to_string(e.cols) + ", config expects " +
                           std::to_string(expected[i].rows) + "x" +
                           std::to_string(expected[i].cols));
    }
    table.push_back(std::move(e));
  }
  ckpt.dtype = table.empty() ? kDtypeF64 : table[0].dtype;

  const size_t payload_start = r.pos;
  ckpt.state.tensors.reserve(n_tensors);
  for (const auto& e : table) {
    Mat m(e.rows, e.cols);
    read_payload(r, m.data(), m.size(), e.dtype);
    ckpt.state.tensors.emplace_back(e.name, std::move(m));
  }
  const size_t payload_len = r.pos - payload_start;
  const uint64_t stored = r.u64();
  if (stored != fnv1a(buf.data() + payload_start, payload_len)) {
    throw IoError("checkpoint payload checksum mismatch: " + path);
  }

  const uint8_t has_opt = r.u8();
  if (has_opt != 0 && has_opt != 1) {
    throw StructureError("bad optimizer presence flag");
  }
  if (has_opt && want_optimizer) {
    OptimizerSection opt;
    opt.t = int64_t(r.u64());
    const uint64_t n = r.u64();
    const uint8_t dtype = check_dtype(r.u8());
    const size_t opay_start = r.pos;
    opt.m.resize(Eigen::Index(n));
    opt.v.resize(Eigen::Index(n));
    read_payload(r, opt.m.data(), opt.m.size(), dtype);
    read_payload(r, opt.v.data(), opt.v.size(), dtype);
    const size_t opay_len = r.pos - opay_start;
    const uint64_t ostored = r.u64();
    if (ostored != fnv1a(buf.data() + opay_start, opay_len)) {
      throw IoError("optimizer payload checksum mismatch: " + path);
    }
    ckpt.optimizer = std::move(opt);
  }
  return ckpt;
}

std::string canonical_json(const json& j) { return j.dump(); }

std::string json_sha256(const json& j) { return Sha256::hex(canonical_json(j)); }

void write_json_atomic(const json& j, const std::string& path) {
  atomic_write_bytes(j.dump(2) + "\n", path);
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open json file: " + path);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("json does not parse: " + path);
  return j;
}

void write_text_atomic(const std::string& text, const std::string& path) {
  atomic_write_bytes(text, path);
}

}  // namespace shlab
