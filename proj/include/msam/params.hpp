#pragma once
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "msam/autograd.hpp"
#include "msam/rng.hpp"
#include "msam/volume_io.hpp"

namespace msam {

// Ordered collection of named tensors. Insertion order is the canonical
// order for checkpoints, so identical construction paths give identical
// files.
template <class S>
class ParamStore {
public:
  ag::Tensor<S>& add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    if (index_.count(name)) throw ConfigOutOfRangeError("duplicate tensor name " + name);
    auto t = std::make_unique<ag::Tensor<S>>();
    t->name = name;
    t->value = MatX<S>::Zero(rows, cols);
    index_[name] = tensors_.size();
    tensors_.push_back(std::move(t));
    return *tensors_.back();
  }

  ag::Tensor<S>& add_normal(const std::string& name, Eigen::Index rows, Eigen::Index cols,
                            Rng& rng, double stddev) {
    auto& t = add(name, rows, cols);
    for (Eigen::Index c = 0; c < cols; ++c)
      for (Eigen::Index r = 0; r < rows; ++r) t.value(r, c) = S(rng.normal(0.0, stddev));
    return t;
  }

  ag::Tensor<S>& add_constant(const std::string& name, Eigen::Index rows, Eigen::Index cols,
                              S fill) {
    auto& t = add(name, rows, cols);
    t.value.setConstant(fill);
    return t;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  ag::Tensor<S>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw UnknownTargetError("no tensor named " + name);
    return *tensors_[it->second];
  }
  const ag::Tensor<S>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw UnknownTargetError("no tensor named " + name);
    return *tensors_[it->second];
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(tensors_.size());
    for (const auto& t : tensors_) out.push_back(t->name);
    return out;
  }

  template <class Fn>
  void for_each(Fn&& fn) {
    for (auto& t : tensors_) fn(*t);
  }
  template <class Fn>
  void for_each(Fn&& fn) const {
    for (const auto& t : tensors_) fn(*t);
  }

  void zero_grads() {
    for (auto& t : tensors_) t->zero_grad();
  }

private:
  std::vector<std::unique_ptr<ag::Tensor<S>>> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct ParameterCounts {
  std::int64_t total = 0;
  std::int64_t tunable = 0;
  double fraction() const { return total == 0 ? 0.0 : double(tunable) / double(total); }
};

// Buffers (fixed encodings) are not parameters and do not count.
template <class S>
ParameterCounts count_parameters(const ParamStore<S>& store) {
  ParameterCounts c;
  store.for_each([&](const ag::Tensor<S>& t) {
    if (t.buffer) return;
    c.total += t.size();
    if (t.trainable) c.tunable += t.size();
  });
  return c;
}

// Checkpoint format: `<base>.manifest` text sidecar plus `<base>.bin` holding
// the raw little-endian scalar payloads concatenated in manifest order.
namespace ckpt_detail {

template <class S>
const char* dtype_tag();
template <>
inline const char* dtype_tag<float>() {
  return "f32";
}
template <>
inline const char* dtype_tag<double>() {
  return "f64";
}

template <class S>
void append_le(std::vector<std::uint8_t>& out, S v) {
  static_assert(sizeof(S) == 4 || sizeof(S) == 8);
  if constexpr (sizeof(S) == 4) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    for (int k = 0; k < 4; ++k) out.push_back(std::uint8_t(bits >> (8 * k)));
  } else {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int k = 0; k < 8; ++k) out.push_back(std::uint8_t(bits >> (8 * k)));
  }
}

template <class S>
S read_le(const std::uint8_t* p) {
  if constexpr (sizeof(S) == 4) {
    std::uint32_t bits = 0;
    for (int k = 0; k < 4; ++k) bits |= std::uint32_t(p[k]) << (8 * k);
    S v;
    std::memcpy(&v, &bits, 4);
    return v;
  } else {
    std::uint64_t bits = 0;
    for (int k = 0; k < 8; ++k) bits |= std::uint64_t(p[k]) << (8 * k);
    S v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
}

inline const char* flag_of(bool trainable, bool buffer) {
  return buffer ? "buffer" : (trainable ? "trainable" : "frozen");
}

}  // namespace ckpt_detail

template <class S>
void save_checkpoint(const ParamStore<S>& store, const std::string& base) {
  std::vector<std::uint8_t> payload;
  std::ostringstream manifest;
  manifest << "msam-checkpoint-v1\n";
  store.for_each([&](const ag::Tensor<S>& t) {
    manifest << "tensor " << t.name << " " << t.value.rows() << " " << t.value.cols() << " "
             << ckpt_detail::dtype_tag<S>() << " "
             << ckpt_detail::flag_of(t.trainable, t.buffer) << "\n";
    for (Eigen::Index c = 0; c < t.value.cols(); ++c)
      for (Eigen::Index r = 0; r < t.value.rows(); ++r)
        ckpt_detail::append_le<S>(payload, t.value(r, c));
  });
  char crcbuf[24];
  std::snprintf(crcbuf, sizeof crcbuf, "crc32 %08x\n", io_detail::payload_crc(payload));
  manifest << crcbuf;
  const std::string text = manifest.str();
  io_detail::write_file(base + ".manifest", text.data(), text.size());
  io_detail::write_file(base + ".bin", payload.data(), payload.size());
}

// Loads values into an already-constructed store; every tensor must be
// present in both the store and the file with matching shape.
template <class S>
void load_checkpoint(ParamStore<S>& store, const std::string& base) {
  std::ifstream in(base + ".manifest");
  if (!in) throw MissingFileError("cannot open " + base + ".manifest");
  std::string line;
  if (!std::getline(in, line) || line != "msam-checkpoint-v1")
    throw CorruptHeaderError("bad checkpoint magic in " + base + ".manifest");

  auto payload = io_detail::read_file(base + ".bin");
  std::size_t offset = 0;
  std::size_t seen = 0;
  bool got_crc = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string kind;
    ss >> kind;
    if (kind == "crc32") {
      std::string hex;
      ss >> hex;
      std::uint32_t crc = 0;
      try {
        crc = static_cast<std::uint32_t>(std::stoul(hex, nullptr, 16));
      } catch (const std::exception&) {
        throw CorruptHeaderError("malformed crc32 line in checkpoint manifest");
      }
      if (crc != io_detail::payload_crc(payload))
        throw ChecksumMismatchError("checkpoint payload crc mismatch for " + base);
      got_crc = true;
      continue;
    }
    if (kind != "tensor") throw CorruptHeaderError("unexpected manifest line: " + line);
    std::string name, dtype, flag;
    Eigen::Index rows = 0, cols = 0;
    if (!(ss >> name >> rows >> cols >> dtype >> flag))
      throw CorruptHeaderError("malformed manifest line: " + line);
    if (dtype != ckpt_detail::dtype_tag<S>())
      throw CorruptHeaderError("checkpoint dtype " + dtype + " does not match model scalar");
    if (!store.contains(name))
      throw ShapeMismatchError("checkpoint tensor " + name + " unknown to this model");
    auto& t = store.at(name);
    if (t.value.rows() != rows || t.value.cols() != cols)
      throw ShapeMismatchError("checkpoint tensor " + name + " has shape " +
                               std::to_string(rows) + "x" + std::to_string(cols) +
                               ", model expects " + std::to_string(t.value.rows()) + "x" +
                               std::to_string(t.value.cols()));
    const std::size_t nbytes = std::size_t(rows) * std::size_t(cols) * sizeof(S);
    if (offset + nbytes > payload.size())
      throw CorruptHeaderError("checkpoint payload truncated at tensor " + name);
    for (Eigen::Index c = 0; c < cols; ++c)
      for (Eigen::Index r = 0; r < rows; ++r) {
        t.value(r, c) = ckpt_detail::read_le<S>(payload.data() + offset);
        offset += sizeof(S);
      }
    ++seen;
  }
  if (!got_crc) throw CorruptHeaderError("checkpoint manifest missing crc32 line");
  if (offset != payload.size())
    throw CorruptHeaderError("checkpoint payload has trailing bytes");
  if (seen != store.names().size())
    throw ShapeMismatchError("checkpoint tensor set does not cover the model (" +
                             std::to_string(seen) + " of " +
                             std::to_string(store.names().size()) + ")");
}

}  // namespace msam
