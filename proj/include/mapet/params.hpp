#pragma once

#include <cstdint>
#include <cstring>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mapet/errors.hpp"
#include "mapet/matrix.hpp"
#include "mapet/patching.hpp"

namespace mapet {

template <typename S>
struct Parameter {
  std::string name;
  Matrix<S> value;
  bool decay = true;  // subject to weight decay
  int layer = 0;      // depth index used by layer-wise learning-rate decay
};

// Ordered, named parameter collection. Order is insertion order and is what
// gradient buffers and optimizer state index into.
template <typename S>
class ParameterSet {
 public:
  std::size_t add(std::string name, Matrix<S> value, bool decay, int layer) {
    detail::check(!index_.contains(name), "duplicate parameter name: " + name);
    index_[name] = params_.size();
    params_.push_back({std::move(name), std::move(value), decay, layer});
    return params_.size() - 1;
  }

  std::size_t size() const { return params_.size(); }
  Parameter<S>& operator[](std::size_t i) { return params_[i]; }
  const Parameter<S>& operator[](std::size_t i) const { return params_[i]; }

  std::optional<std::size_t> find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t index(const std::string& name) const {
    auto i = find(name);
    if (!i) throw std::out_of_range("no parameter named " + name);
    return *i;
  }

  Matrix<S>& value(const std::string& name) { return params_[index(name)].value; }
  const Matrix<S>& value(const std::string& name) const { return params_[index(name)].value; }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

 private:
  std::vector<Parameter<S>> params_;
  std::map<std::string, std::size_t> index_;
};

// One gradient matrix per parameter, aligned with a ParameterSet.
template <typename S>
struct Gradients {
  std::vector<Matrix<S>> grads;

  Gradients() = default;
  explicit Gradients(const ParameterSet<S>& params) {
    grads.reserve(params.size());
    for (const auto& p : params) grads.emplace_back(p.value.rows(), p.value.cols());
  }

  void set_zero() {
    for (auto& g : grads) g.set_zero();
  }

  void add(const Gradients& o, S scale = S(1)) {
    for (std::size_t i = 0; i < grads.size(); ++i)
      for (std::size_t k = 0; k < grads[i].size(); ++k) grads[i].data()[k] += scale * o.grads[i].data()[k];
  }

  void scale(S s) {
    for (auto& g : grads)
      for (auto& v : g.values()) v *= s;
  }
};

// FNV-1a over names, shapes and raw value bytes.
template <typename S>
std::uint64_t parameter_hash(const ParameterSet<S>& params) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 1099511628211ULL;
  };
  for (const auto& p : params) {
    mix(p.name.data(), p.name.size());
    const std::uint64_t dims[2] = {p.value.rows(), p.value.cols()};
    mix(dims, sizeof dims);
    mix(p.value.data(), p.value.size() * sizeof(S));
  }
  return h;
}

// ---------------------------------------------------------------------------
// Checkpoint container.
//
//   "MPCK" | version u32 | config length u32 | config JSON bytes
//   tensor count u32 | per tensor: name length u16, name bytes, rank u32,
//   dims u32 x rank, float32 payload (row-major)
//
// All integers little-endian. Pre-trained and fine-tuned models share the
// format; which tensors a consumer reads is decided at load time.

inline constexpr char kCheckpointMagic[5] = "MPCK";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Matrix<float> value;
};

struct Checkpoint {
  std::string config_json;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

template <typename S>
Checkpoint make_checkpoint(const ParameterSet<S>& params, std::string config_json) {
  Checkpoint ck{std::move(config_json), {}};
  for (const auto& p : params) ck.tensors.push_back({p.name, p.value.template cast<float>()});
  return ck;
}

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  io::write_magic(os, kCheckpointMagic);
  io::write_u32(os, kCheckpointVersion);
  io::write_u32(os, static_cast<std::uint32_t>(ck.config_json.size()));
  os.write(ck.config_json.data(), static_cast<std::streamsize>(ck.config_json.size()));
  io::write_u32(os, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& t : ck.tensors) {
    detail::check(t.name.size() < 65536, "tensor name too long");
    io::write_u16(os, static_cast<std::uint16_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    io::write_u32(os, 2);
    io::write_u32(os, static_cast<std::uint32_t>(t.value.rows()));
    io::write_u32(os, static_cast<std::uint32_t>(t.value.cols()));
    for (float v : t.value.values()) io::write_f32(os, v);
  }
}

inline Checkpoint read_checkpoint(std::istream& is) {
  const std::string what = "checkpoint";
  io::expect_magic(is, kCheckpointMagic, what);
  const auto version = io::read_u32(is, what);
  if (version != kCheckpointVersion) throw DataError(what + ": unsupported version " + std::to_string(version));
  Checkpoint ck;
  ck.config_json.resize(io::read_u32(is, what));
  if (!io::read_exact(is, ck.config_json.data(), ck.config_json.size())) throw DataError(what + ": truncated config");
  const auto count = io::read_u32(is, what);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name.resize(io::read_u16(is, what));
    if (!io::read_exact(is, t.name.data(), t.name.size())) throw DataError(what + ": truncated tensor name");
    const auto rank = io::read_u32(is, what);
    if (rank < 1 || rank > 2) throw DataError(what + ": tensor " + t.name + " has unsupported rank");
    std::size_t rows = io::read_u32(is, what), cols = 1;
    if (rank == 2) cols = io::read_u32(is, what);
    t.value = Matrix<float>(rows, cols);
    for (auto& v : t.value.values()) v = io::read_f32(is, what);
    ck.tensors.push_back(std::move(t));
  }
  io::expect_eof(is, what);
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  auto os = io::open_out(path, "checkpoint");
  write_checkpoint(os, ck);
  if (!os) throw DataError("checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  auto is = io::open_in(path, "checkpoint");
  return read_checkpoint(is);
}

class IncompatibleCheckpoint : public DataError {
 public:
  using DataError::DataError;
};

// Copies every tensor of `ck` whose name passes `keep` into `params`. Names
// that pass the filter must exist with identical shape.
template <typename S, typename Keep>
std::size_t load_parameters(ParameterSet<S>& params, const Checkpoint& ck, Keep&& keep) {
  std::size_t loaded = 0;
  for (const auto& t : ck.tensors) {
    if (!keep(t.name)) continue;
    auto idx = params.find(t.name);
    if (!idx) throw IncompatibleCheckpoint("checkpoint tensor " + t.name + " has no counterpart in the model");
    auto& dst = params[*idx].value;
    if (dst.rows() != t.value.rows() || dst.cols() != t.value.cols())
      throw IncompatibleCheckpoint("checkpoint tensor " + t.name + " is " + shape_string(t.value.rows(), t.value.cols()) +
                                   ", model expects " + shape_string(dst.rows(), dst.cols()));
    dst = t.value.template cast<S>();
    ++loaded;
  }
  return loaded;
}

}  // namespace mapet
