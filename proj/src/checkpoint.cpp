#include "shuffle_former/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

namespace shuffle_former {

namespace {

constexpr char kMagic[4] = {'S', 'F', 'T', 'C'};

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& in) : in_(in) {}
  std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::vector<std::uint8_t> bytes(std::size_t n) {
    need(n);
    std::vector<std::uint8_t> v(in_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                in_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return v;
  }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (n > in_.size() - pos_) throw CheckpointError("truncated container");
  }
  std::uint64_t le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  const std::vector<std::uint8_t>& in_;
  std::size_t pos_ = 0;
};

std::size_t dtype_size(DType d) { return d == DType::float32 ? 4 : 8; }

template <typename U, typename Bits>
void put_le(std::vector<std::uint8_t>& out, U value) {
  const auto bits = std::bit_cast<Bits>(value);
  for (std::size_t i = 0; i < sizeof(Bits); ++i) {
    out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
  }
}

template <typename U, typename Bits>
U get_le(const std::uint8_t* p) {
  Bits bits = 0;
  for (std::size_t i = 0; i < sizeof(Bits); ++i) bits |= static_cast<Bits>(p[i]) << (8 * i);
  return std::bit_cast<U>(bits);
}

}  // namespace

template <typename T>
CheckpointEntry CheckpointEntry::from_tensor(std::string name, const Tensor<T>& t, DType dtype) {
  CheckpointEntry e;
  e.name = std::move(name);
  e.dtype = dtype;
  e.shape = t.shape();
  e.bytes.reserve(static_cast<std::size_t>(t.numel()) * dtype_size(dtype));
  for (T v : t.data()) {
    if (dtype == DType::float32) {
      put_le<float, std::uint32_t>(e.bytes, static_cast<float>(v));
    } else {
      put_le<double, std::uint64_t>(e.bytes, static_cast<double>(v));
    }
  }
  return e;
}

template <typename T>
std::vector<T> CheckpointEntry::values() const {
  const std::size_t width = dtype_size(dtype);
  std::vector<T> out(bytes.size() / width);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::uint8_t* p = bytes.data() + i * width;
    out[i] = dtype == DType::float32 ? static_cast<T>(get_le<float, std::uint32_t>(p))
                                     : static_cast<T>(get_le<double, std::uint64_t>(p));
  }
  return out;
}

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.raw(kMagic, 4);
  w.u32(ckpt.version);
  w.u32(static_cast<std::uint32_t>(ckpt.config_echo.size()));
  w.raw(ckpt.config_echo.data(), ckpt.config_echo.size());
  w.u32(static_cast<std::uint32_t>(ckpt.entries.size()));
  std::uint64_t offset = 0;
  for (const auto& e : ckpt.entries) {
    if (e.name.size() > UINT16_MAX) throw CheckpointError("entry name too long: " + e.name);
    if (e.shape.size() > UINT8_MAX) throw CheckpointError("rank too large for " + e.name);
    const auto expected = static_cast<std::size_t>(shape_numel(e.shape)) * dtype_size(e.dtype);
    if (e.bytes.size() != expected) {
      throw CheckpointError("payload size does not match shape for '" + e.name + "'");
    }
    w.u16(static_cast<std::uint16_t>(e.name.size()));
    w.raw(e.name.data(), e.name.size());
    w.u8(static_cast<std::uint8_t>(e.dtype));
    w.u8(static_cast<std::uint8_t>(e.shape.size()));
    for (auto d : e.shape) w.u64(static_cast<std::uint64_t>(d));
    w.u64(offset);
    offset += e.bytes.size();
  }
  w.u64(offset);
  for (const auto& e : ckpt.entries) w.raw(e.bytes.data(), e.bytes.size());
  return w.take();
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (r.str(4) != std::string(kMagic, 4)) throw CheckpointError("bad magic, not a container file");
  Checkpoint ckpt;
  ckpt.version = r.u32();
  if (ckpt.version != kCheckpointVersion) {
    throw CheckpointError("unsupported version " + std::to_string(ckpt.version));
  }
  ckpt.config_echo = r.str(r.u32());
  const std::uint32_t count = r.u32();
  struct Pending {
    std::uint64_t offset;
    std::size_t size;
  };
  std::vector<Pending> pending;
  std::uint64_t expected_offset = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    e.name = r.str(r.u16());
    const auto dtype = r.u8();
    if (dtype != 1 && dtype != 2) throw CheckpointError("unknown dtype for '" + e.name + "'");
    e.dtype = static_cast<DType>(dtype);
    const auto rank = r.u8();
    std::uint64_t numel = 1;
    for (int d = 0; d < rank; ++d) {
      const std::uint64_t extent = r.u64();
      if (extent == 0 || extent > (1ULL << 40)) {
        throw CheckpointError("invalid extent for '" + e.name + "'");
      }
      e.shape.push_back(static_cast<std::int64_t>(extent));
      numel *= extent;
      if (numel > (1ULL << 40)) throw CheckpointError("tensor too large: '" + e.name + "'");
    }
    const std::uint64_t offset = r.u64();
    if (offset != expected_offset) throw CheckpointError("non-contiguous payload for '" + e.name + "'");
    const auto size = static_cast<std::size_t>(numel) * dtype_size(e.dtype);
    expected_offset += size;
    pending.push_back({offset, size});
    ckpt.entries.push_back(std::move(e));
  }
  const std::uint64_t payload_len = r.u64();
  if (payload_len != expected_offset || r.remaining() != payload_len) {
    throw CheckpointError("payload length mismatch");
  }
  for (std::size_t i = 0; i < ckpt.entries.size(); ++i) ckpt.entries[i].bytes = r.bytes(pending[i].size);
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

template <typename T>
Checkpoint make_checkpoint(const ShuffleTransformer<T>& model, const std::string& extra_echo) {
  Checkpoint ckpt;
  ckpt.config_echo = model.config().to_text() + extra_echo;
  const auto state = model.state();
  for (const auto* group : {&state.parameters, &state.buffers}) {
    for (const auto& nt : *group) {
      ckpt.entries.push_back(CheckpointEntry::from_tensor(nt.name, nt.tensor, DType::float32));
    }
  }
  return ckpt;
}

template <typename T>
void restore_checkpoint(ShuffleTransformer<T>& model, const Checkpoint& ckpt) {
  auto state = model.state();
  std::set<std::string> expected;
  std::set<std::string> seen;
  for (const auto& e : ckpt.entries) {
    if (!seen.insert(e.name).second) throw CheckpointError("parameter '" + e.name + "' stored twice");
  }
  for (auto* group : {&state.parameters, &state.buffers}) {
    for (auto& nt : *group) {
      expected.insert(nt.name);
      const auto* e = ckpt.find(nt.name);
      if (e == nullptr) throw CheckpointError("missing parameter '" + nt.name + "'");
      if (e->shape != nt.tensor.shape()) {
        throw CheckpointError("parameter '" + nt.name + "' has shape " + shape_str(e->shape) +
                              ", model expects " + shape_str(nt.tensor.shape()));
      }
    }
  }
  for (const auto& e : ckpt.entries) {
    if (!expected.count(e.name)) throw CheckpointError("unexpected parameter '" + e.name + "'");
  }
  for (auto* group : {&state.parameters, &state.buffers}) {
    for (auto& nt : *group) {
      const auto values = ckpt.find(nt.name)->template values<T>();
      auto dst = nt.tensor.mutable_data();
      std::copy(values.begin(), values.end(), dst.begin());
    }
  }
}

template <typename T>
ShuffleTransformer<T> model_from_checkpoint(const Checkpoint& ckpt) {
  ModelConfig config;
  try {
    config = ModelConfig::from_text(ckpt.config_echo);
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("config echo: ") + e.what());
  }
  ShuffleTransformer<T> model(config, 0);
  restore_checkpoint(model, ckpt);
  return model;
}

template <typename T>
void save_tensor_file(const std::filesystem::path& path, const std::string& name, const Tensor<T>& t,
                      const std::string& echo) {
  Checkpoint ckpt;
  ckpt.config_echo = echo;
  ckpt.entries.push_back(CheckpointEntry::from_tensor(
      name, t, std::is_same_v<T, double> ? DType::float64 : DType::float32));
  save_checkpoint(path, ckpt);
}

template <typename T>
Tensor<T> load_tensor_file(const std::filesystem::path& path, std::string* name, std::string* echo) {
  const auto ckpt = load_checkpoint(path);
  if (ckpt.entries.size() != 1) {
    throw CheckpointError("tensor file must hold exactly one tensor, found " +
                          std::to_string(ckpt.entries.size()));
  }
  const auto& e = ckpt.entries.front();
  if (name) *name = e.name;
  if (echo) *echo = ckpt.config_echo;
  return Tensor<T>::from_data(e.shape, e.values<T>());
}

#define SF_INSTANTIATE(T)                                                                       \
  template CheckpointEntry CheckpointEntry::from_tensor(std::string, const Tensor<T>&, DType);  \
  template std::vector<T> CheckpointEntry::values<T>() const;                                   \
  template Checkpoint make_checkpoint(const ShuffleTransformer<T>&, const std::string&);        \
  template void restore_checkpoint(ShuffleTransformer<T>&, const Checkpoint&);                  \
  template ShuffleTransformer<T> model_from_checkpoint(const Checkpoint&);                      \
  template void save_tensor_file(const std::filesystem::path&, const std::string&,              \
                                 const Tensor<T>&, const std::string&);                         \
  template Tensor<T> load_tensor_file(const std::filesystem::path&, std::string*, std::string*);

SF_INSTANTIATE(float)
SF_INSTANTIATE(double)

#undef SF_INSTANTIATE

}  // namespace shuffle_former
