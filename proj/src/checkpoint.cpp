#include "stairs/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>

namespace stairs {

namespace {

constexpr char kMagic[8] = {'S', 'T', 'A', 'I', 'R', 'S', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    out.insert(out.end(), c, c + n);
  }
  std::vector<unsigned char> out;

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
};

class Reader {
 public:
  explicit Reader(const std::vector<unsigned char>& in) : in_(in) {}
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  double f64() { return std::bit_cast<double>(get(8)); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > in_.size()) throw std::runtime_error("checkpoint: truncated archive");
  }
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  const std::vector<unsigned char>& in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<unsigned char> encode_checkpoint(const ParamSet& params, const std::string& metadata) {
  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(metadata.size()));
  w.bytes(metadata.data(), metadata.size());
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& e : params.entries()) {
    w.u32(static_cast<std::uint32_t>(e.name.size()));
    w.bytes(e.name.data(), e.name.size());
    w.u32(static_cast<std::uint32_t>(e.value.dim()));
    for (auto d : e.value.shape()) w.u64(d);
    for (double v : e.value.data()) w.f64(v);
  }
  return std::move(w.out);
}

Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes) {
  Reader r(bytes);
  if (r.str(8) != std::string(kMagic, 8)) throw std::runtime_error("checkpoint: bad magic");
  if (const auto v = r.u32(); v != kVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(v));
  Checkpoint ckpt;
  ckpt.metadata = r.str(r.u32());
  const auto count = r.u32();
  for (std::uint32_t k = 0; k < count; ++k) {
    CheckpointEntry e;
    e.name = r.str(r.u32());
    const auto ndim = r.u32();
    for (std::uint32_t i = 0; i < ndim; ++i) e.shape.push_back(static_cast<std::size_t>(r.u64()));
    const auto n = shape_numel(e.shape);
    e.values.resize(n);
    for (auto& v : e.values) v = r.f64();
    ckpt.entries.push_back(std::move(e));
  }
  if (!r.done()) throw std::runtime_error("checkpoint: trailing bytes");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const ParamSet& params, const std::string& metadata) {
  const auto bytes = encode_checkpoint(params, metadata);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

void restore_parameters(const Checkpoint& ckpt, ParamSet& params) {
  if (ckpt.entries.size() != params.size())
    throw std::runtime_error("checkpoint: archive holds " + std::to_string(ckpt.entries.size()) +
                             " tensors, model expects " + std::to_string(params.size()));
  for (const auto& e : ckpt.entries) {
    if (!params.contains(e.name)) throw std::runtime_error("checkpoint: unexpected tensor " + e.name);
    Tensor t = params.get(e.name);
    if (t.shape() != e.shape)
      throw std::runtime_error("checkpoint: shape mismatch for " + e.name + ": archive " + shape_string(e.shape) +
                               ", model " + shape_string(t.shape()));
    std::copy(e.values.begin(), e.values.end(), t.mutable_data().begin());
  }
}

}  // namespace stairs
