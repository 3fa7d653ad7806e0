#include "fuseloc/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "binary_io.hpp"

namespace fuseloc {

namespace detail {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + tmp + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw std::runtime_error("cannot rename to '" + path + "'");
}

}  // namespace detail

namespace {
constexpr char kMagic[4] = {'F', 'L', 'C', '1'};
}

const CheckpointRecord* Checkpoint::find(const std::string& name) const {
  for (const auto& r : records)
    if (r.name == name) return &r;
  return nullptr;
}

Checkpoint make_checkpoint(const ParameterStore& params, std::map<std::string, std::string> header) {
  Checkpoint ckpt;
  ckpt.header = std::move(header);
  for (const Parameter& p : params) {
    CheckpointRecord r{p.name, p.shape, {}};
    r.values.reserve(p.value.size());
    for (double v : p.value) r.values.push_back(static_cast<float>(v));
    ckpt.records.push_back(std::move(r));
  }
  return ckpt;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  using detail::put_le;
  std::string header;
  for (const auto& [k, v] : ckpt.header) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos)
      throw std::invalid_argument("checkpoint header entries may not contain '=' in keys or newlines");
    header += k + "=" + v + "\n";
  }
  std::string out(kMagic, 4);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(header.size()));
  out += header;
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.records.size()));
  for (const auto& r : ckpt.records) {
    if (r.values.size() != numel(r.shape)) throw std::invalid_argument("checkpoint record '" + r.name + "' size mismatch");
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.name.size()));
    out += r.name;
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.shape.size()));
    for (auto d : r.shape) put_le<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    for (float v : r.values) put_le<float>(out, v);
  }
  return out;
}

Checkpoint parse_checkpoint(const std::string& bytes) {
  detail::Reader in(bytes, "checkpoint");
  if (in.bytes(4) != std::string_view(kMagic, 4)) throw std::runtime_error("checkpoint: bad magic (expected FLC1)");
  Checkpoint ckpt;
  const auto header_len = in.get_le<std::uint32_t>();
  std::istringstream hs{std::string(in.bytes(header_len))};
  for (std::string line; std::getline(hs, line);) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::runtime_error("checkpoint: malformed header line '" + line + "'");
    ckpt.header[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const auto count = in.get_le<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointRecord r;
    r.name = std::string(in.bytes(in.get_le<std::uint32_t>()));
    const auto rank = in.get_le<std::uint32_t>();
    for (std::uint32_t d = 0; d < rank; ++d) r.shape.push_back(static_cast<std::size_t>(in.get_le<std::uint64_t>()));
    const std::size_t n = numel(r.shape);
    if (n > in.remaining() / 4) throw std::runtime_error("checkpoint: truncated file");
    r.values.resize(n);
    for (auto& v : r.values) v = in.get_le<float>();
    ckpt.records.push_back(std::move(r));
  }
  if (!in.done()) throw std::runtime_error("checkpoint: trailing bytes");
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  detail::write_file_atomic(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::string& path) { return parse_checkpoint(detail::read_file(path)); }

void apply_checkpoint(const Checkpoint& ckpt, ParameterStore& params) {
  for (Parameter& p : params) {
    const CheckpointRecord* r = ckpt.find(p.name);
    if (!r) throw std::runtime_error("checkpoint has no record for parameter '" + p.name + "'");
    if (r->shape != p.shape)
      throw ShapeError("apply_checkpoint", p.name, "checkpoint " + to_string(r->shape) + " vs model " + to_string(p.shape));
    for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] = static_cast<double>(r->values[i]);
  }
}

std::uint64_t parameter_hash(const ParameterStore& params) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (const Parameter& p : params) {
    mix(p.name.data(), p.name.size());
    mix(p.value.data(), p.value.size() * sizeof(double));
  }
  return h;
}

}  // namespace fuseloc
