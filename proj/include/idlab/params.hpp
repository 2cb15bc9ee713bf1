#pragma once

// Named parameter tensors and the versioned binary checkpoint format.
//
// Layout (native little-endian):
//   "IDLABCKP" | u32 version | u32 scalar bytes | u64 meta length | meta (JSON)
//   | u64 tensor count | per tensor: u32 name length, name, u64 rows, u64 cols,
//   rows*cols scalars (row-major)

#include "idlab/diffcore.hpp"
#include "idlab/util.hpp"

#include <cstring>
#include <filesystem>
#include <map>
#include <random>
#include <string>

namespace idlab {

template <typename T>
class ParamStore {
 public:
  Tensor<T>& add(const std::string& name, Matrix<T> init) {
    auto [it, fresh] = tensors_.emplace(name, Tensor<T>(std::move(init)));
    if (!fresh) throw std::invalid_argument("duplicate parameter '" + name + "'");
    return it->second;
  }

  Tensor<T>& at(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return it->second;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

  std::map<std::string, Tensor<T>>& tensors() { return tensors_; }
  const std::map<std::string, Tensor<T>>& tensors() const { return tensors_; }

  void zero_grad() {
    for (auto& kv : tensors_) kv.second.zero_grad();
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& kv : tensors_) n += static_cast<std::size_t>(kv.second.value.size());
    return n;
  }

  /// Hash over names, shapes and raw value bytes.
  std::uint64_t hash() const {
    std::uint64_t h = fnv1a("params");
    for (const auto& [name, t] : tensors_) {
      h = fnv1a(name, h);
      const std::int64_t shape[2] = {t.value.rows(), t.value.cols()};
      h = fnv1a_bytes(shape, sizeof(shape), h);
      h = fnv1a_bytes(t.value.data(), sizeof(T) * static_cast<std::size_t>(t.value.size()), h);
    }
    return h;
  }

 private:
  std::map<std::string, Tensor<T>> tensors_;
};

template <typename T>
Matrix<T> xavier_uniform(Index rows, Index cols, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix<T> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(dist(rng));
  return m;
}

template <typename T>
Matrix<T> normal_init(Index rows, Index cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix<T> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(dist(rng));
  return m;
}

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'I', 'D', 'L', 'A', 'B', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
struct CheckpointData {
  std::string meta;
  std::map<std::string, Matrix<T>> tensors;
};

namespace detail {

template <typename V>
void put(std::string& out, const V& v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V take(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(V) > in.size()) throw CheckpointError("truncated checkpoint");
  V v;
  std::memcpy(&v, in.data() + pos, sizeof(V));
  pos += sizeof(V);
  return v;
}

}  // namespace detail

template <typename T>
std::string serialize_checkpoint(const CheckpointData<T>& data) {
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  detail::put<std::uint32_t>(out, sizeof(T));
  detail::put<std::uint64_t>(out, data.meta.size());
  out += data.meta;
  detail::put<std::uint64_t>(out, data.tensors.size());
  for (const auto& [name, m] : data.tensors) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
    detail::put<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
    out.append(reinterpret_cast<const char*>(m.data()), sizeof(T) * static_cast<std::size_t>(m.size()));
  }
  return out;
}

template <typename T>
CheckpointData<T> deserialize_checkpoint(const std::string& in) {
  if (in.size() < sizeof(kCheckpointMagic) ||
      std::memcmp(in.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw CheckpointError("not a checkpoint (bad magic)");
  }
  std::size_t pos = sizeof(kCheckpointMagic);
  const auto version = detail::take<std::uint32_t>(in, pos);
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto width = detail::take<std::uint32_t>(in, pos);
  if (width != sizeof(T)) {
    throw CheckpointError("checkpoint scalar width " + std::to_string(width) + " != " +
                          std::to_string(sizeof(T)));
  }
  CheckpointData<T> data;
  const auto meta_len = detail::take<std::uint64_t>(in, pos);
  if (pos + meta_len > in.size()) throw CheckpointError("truncated checkpoint");
  data.meta = in.substr(pos, meta_len);
  pos += meta_len;
  const auto count = detail::take<std::uint64_t>(in, pos);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = detail::take<std::uint32_t>(in, pos);
    if (pos + name_len > in.size()) throw CheckpointError("truncated checkpoint");
    std::string name = in.substr(pos, name_len);
    pos += name_len;
    const auto rows = detail::take<std::uint64_t>(in, pos);
    const auto cols = detail::take<std::uint64_t>(in, pos);
    const std::size_t bytes = sizeof(T) * rows * cols;
    if (pos + bytes > in.size()) throw CheckpointError("truncated tensor '" + name + "'");
    Matrix<T> m(static_cast<Index>(rows), static_cast<Index>(cols));
    std::memcpy(m.data(), in.data() + pos, bytes);
    pos += bytes;
    data.tensors.emplace(std::move(name), std::move(m));
  }
  if (pos != in.size()) throw CheckpointError("trailing bytes in checkpoint");
  return data;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const CheckpointData<T>& data) {
  write_file_atomic(path, serialize_checkpoint(data));
}

template <typename T>
CheckpointData<T> load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint<T>(read_file(path));
}

/// Copies tensors into a store whose names and shapes must match exactly.
template <typename T>
void restore_params(ParamStore<T>& store, const std::map<std::string, Matrix<T>>& tensors,
                    const std::string& prefix = "") {
  for (auto& [name, t] : store.tensors()) {
    auto it = tensors.find(prefix + name);
    if (it == tensors.end()) throw CheckpointError("checkpoint lacks parameter '" + name + "'");
    if (it->second.rows() != t.value.rows() || it->second.cols() != t.value.cols()) {
      throw CheckpointError("shape mismatch for '" + name + "': " +
                            shape_str(it->second.rows(), it->second.cols()) + " vs " +
                            shape_str(t.value.rows(), t.value.cols()));
    }
    t.value = it->second;
  }
}

}  // namespace idlab
