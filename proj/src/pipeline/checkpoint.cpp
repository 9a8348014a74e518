#include "lar/pipeline/checkpoint.hpp"

#include "lar/error.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

namespace lar::pipeline {

namespace {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <class U>
  void le(U value) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
  }
  void u32(std::uint32_t v) { le(v); }
  void u64(std::uint64_t v) { le(v); }
  void f32(float v) { le(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& in, std::string origin) : in_(in), origin_(std::move(origin)) {}
  const std::uint8_t* bytes(std::size_t n) {
    if (in_.size() - pos_ < n) throw DataError(origin_ + ": truncated checkpoint at byte " + std::to_string(pos_));
    const std::uint8_t* p = in_.data() + pos_;
    pos_ += n;
    return p;
  }
  template <class U>
  U le() {
    const std::uint8_t* p = bytes(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
    return v;
  }
  std::uint32_t u32() { return le<std::uint32_t>(); }
  std::uint64_t u64() { return le<std::uint64_t>(); }
  float f32() { return std::bit_cast<float>(le<std::uint32_t>()); }
  double f64() { return std::bit_cast<double>(le<std::uint64_t>()); }
  std::string str() {
    const std::uint32_t n = u32();
    const auto* p = bytes(n);
    return std::string(reinterpret_cast<const char*>(p), n);
  }
  bool done() const { return pos_ == in_.size(); }
  const std::string& origin() const { return origin_; }

 private:
  const std::vector<std::uint8_t>& in_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace

Checkpoint make_checkpoint(const ParamList& params, std::uint64_t digest, std::int64_t step, const AdamState* optimizer) {
  Checkpoint ckpt;
  ckpt.digest = digest;
  ckpt.step = step;
  for (const auto& [name, tensor] : params) {
    const auto data = tensor.data();
    ckpt.params.push_back({name, tensor.shape(), std::vector<float>(data.begin(), data.end())});
  }
  if (optimizer) ckpt.optimizer = *optimizer;
  return ckpt;
}

std::vector<std::uint8_t> serialize(const Checkpoint& ckpt) {
  Writer w;
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.u64(ckpt.digest);
  w.u64(static_cast<std::uint64_t>(ckpt.step));
  w.u32(static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& e : ckpt.params) {
    if (shape_numel(e.shape) != e.values.size()) throw DataError("checkpoint: entry " + e.name + " size mismatch");
    w.str(e.name);
    w.u32(static_cast<std::uint32_t>(e.shape.size()));
    for (int d : e.shape) w.u32(static_cast<std::uint32_t>(d));
    for (float v : e.values) w.f32(v);
  }
  w.u32(ckpt.optimizer ? 1 : 0);
  if (ckpt.optimizer) {
    const AdamState& s = *ckpt.optimizer;
    w.u64(static_cast<std::uint64_t>(s.step));
    w.u32(static_cast<std::uint32_t>(s.first_moment.size()));
    for (std::size_t i = 0; i < s.first_moment.size(); ++i) {
      w.u64(s.first_moment[i].size());
      for (double v : s.first_moment[i]) w.f64(v);
      for (double v : s.second_moment[i]) w.f64(v);
    }
  }
  return w.take();
}

Checkpoint deserialize(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
  Reader r(bytes, origin);
  if (std::memcmp(r.bytes(sizeof kCheckpointMagic), kCheckpointMagic, sizeof kCheckpointMagic) != 0) {
    throw DataError(origin + ": not a checkpoint (bad magic)");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) throw DataError(origin + ": unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  ckpt.digest = r.u64();
  ckpt.step = static_cast<std::int64_t>(r.u64());
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    e.name = r.str();
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw DataError(origin + ": implausible rank for " + e.name);
    for (std::uint32_t d = 0; d < rank; ++d) e.shape.push_back(static_cast<int>(r.u32()));
    const std::size_t n = shape_numel(e.shape);
    if (n > bytes.size()) throw DataError(origin + ": implausible shape for " + e.name);
    e.values.resize(n);
    for (float& v : e.values) v = r.f32();
    ckpt.params.push_back(std::move(e));
  }
  if (r.u32() != 0) {
    AdamState s;
    s.step = static_cast<std::int64_t>(r.u64());
    const std::uint32_t tensors = r.u32();
    for (std::uint32_t i = 0; i < tensors; ++i) {
      const std::uint64_t n = r.u64();
      if (n > bytes.size()) throw DataError(origin + ": implausible optimizer buffer");
      std::vector<double> m(n), v(n);
      for (double& x : m) x = r.f64();
      for (double& x : v) x = r.f64();
      s.first_moment.push_back(std::move(m));
      s.second_moment.push_back(std::move(v));
    }
    ckpt.optimizer = std::move(s);
  }
  if (!r.done()) throw DataError(origin + ": trailing bytes after checkpoint");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = serialize(ckpt);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return deserialize(bytes, path.string());
}

void apply_checkpoint(const Checkpoint& ckpt, const ParamList& params, std::uint64_t expected_digest) {
  if (ckpt.digest != expected_digest) {
    throw ConfigError("checkpoint geometry digest " + std::to_string(ckpt.digest) + " does not match config digest " +
                      std::to_string(expected_digest));
  }
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : ckpt.params) by_name[e.name] = &e;
  for (const auto& [name, tensor] : params) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw DataError("checkpoint lacks parameter " + name);
    if (it->second->shape != tensor.shape()) {
      throw DataError("checkpoint parameter " + name + " has shape " + shape_string(it->second->shape) + ", model " +
                      shape_string(tensor.shape()));
    }
  }
  for (const auto& [name, tensor] : params) {
    Tensor t = tensor;
    const auto& src = by_name.at(name)->values;
    std::copy(src.begin(), src.end(), t.data().begin());
  }
}

}  // namespace lar::pipeline
