// Copyright 2026 The distilprune Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Binary checkpoint container, all integers little-endian:
//
//   "DPGC"  u16 version  u32 tensor_count
//   per tensor:  u16 name_len  name  u8 rank  u64 dims[rank]  f32 values[]
//   u32 meta_count
//   per entry:   u16 key_len  key  u32 value_len  value
//
// Values are row-major. The metadata block carries config_hash, phase, step
// and the architecture as JSON, so pruned models load without a config.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "distilprune/encoder.hpp"
#include "distilprune/errors.hpp"
#include "distilprune/tensor.hpp"

namespace distilprune {

inline constexpr char kCheckpointMagic[4] = {'D', 'P', 'G', 'C'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
  std::map<std::string, std::string> metadata;

  const Tensor<float>* find(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
      if (n == name) return &t;
    }
    return nullptr;
  }

  std::string meta(const std::string& key) const {
    auto it = metadata.find(key);
    if (it == metadata.end()) {
      throw IoError("checkpoint: missing metadata key '" + key + "'");
    }
    return it->second;
  }

  bool operator==(const Checkpoint&) const = default;
};

namespace detail {

class ByteWriter {
 public:
  template <typename U>
  void put(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      out_.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
    }
  }
  void put_f32(float f) { put(std::bit_cast<std::uint32_t>(f)); }
  void bytes(const std::string& s) { out_ += s; }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& in) : in_(in) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in_[pos_ + i]))
           << (8 * i);
    }
    pos_ += sizeof(U);
    return static_cast<U>(v);
  }
  float get_f32() { return std::bit_cast<float>(get<std::uint32_t>()); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw IoError("checkpoint: truncated data");
  }

  const std::string& in_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ckpt) {
  detail::ByteWriter w;
  w.bytes(std::string(kCheckpointMagic, 4));
  w.put<std::uint16_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.size() > 0xffff) throw IoError("checkpoint: tensor name too long");
    if (t.rank() > 0xff) throw IoError("checkpoint: tensor rank too large");
    w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.bytes(name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape) w.put<std::uint64_t>(d);
    for (float v : t.data) w.put_f32(v);
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.metadata.size()));
  for (const auto& [k, v] : ckpt.metadata) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(k.size()));
    w.bytes(k);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(v.size()));
    w.bytes(v);
  }
  return w.take();
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  detail::ByteReader r(bytes);
  if (r.bytes(4) != std::string(kCheckpointMagic, 4)) {
    throw IoError("checkpoint: bad magic");
  }
  const auto version = r.get<std::uint16_t>();
  if (version != kCheckpointVersion) {
    throw IoError("checkpoint: unsupported version " + std::to_string(version));
  }
  Checkpoint ckpt;
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.bytes(r.get<std::uint16_t>());
    const auto rank = r.get<std::uint8_t>();
    Shape shape(rank);
    std::uint64_t n = 1;
    for (auto& d : shape) {
      d = static_cast<std::size_t>(r.get<std::uint64_t>());
      n *= d;
    }
    if (n > bytes.size()) throw IoError("checkpoint: tensor '" + name + "' too large");
    Tensor<float> t(shape);
    for (float& v : t.data) v = r.get_f32();
    ckpt.tensors.emplace_back(std::move(name), std::move(t));
  }
  const auto meta = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < meta; ++i) {
    std::string key = r.bytes(r.get<std::uint16_t>());
    ckpt.metadata[key] = r.bytes(r.get<std::uint32_t>());
  }
  if (!r.done()) throw IoError("checkpoint: trailing bytes");
  return ckpt;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  const std::string bytes = encode_checkpoint(ckpt);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write to '" + path + "' failed");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(bytes);
  } catch (const IoError& e) {
    throw IoError(path + ": " + e.what());
  }
}

/// Appends every parameter of `model` in canonical order.
template <typename T>
void add_parameters(Checkpoint& ckpt, const Encoder<T>& model) {
  model.visit([&](const Parameter<T>& p) {
    ckpt.tensors.emplace_back(p.name, p.value.template cast<float>());
  });
}

inline void add_parameter(Checkpoint& ckpt, const std::string& name,
                          const Tensor<float>& value) {
  ckpt.tensors.emplace_back(name, value);
}

/// Fills `p` from the tensor of the same name; shapes must agree.
template <typename T>
void load_parameter(const Checkpoint& ckpt, Parameter<T>& p) {
  const Tensor<float>* t = ckpt.find(p.name);
  if (!t) throw IoError("checkpoint: missing tensor '" + p.name + "'");
  if (t->shape != p.value.shape) {
    throw IoError("checkpoint: tensor '" + p.name + "' has shape " +
                  to_string(t->shape) + ", expected " + to_string(p.value.shape));
  }
  p.value = t->template cast<T>();
  p.zero_grad();
}

/// Rebuilds an encoder of architecture `arch` from its named tensors.
template <typename T>
Encoder<T> load_encoder(const Checkpoint& ckpt, const EncoderArch& arch) {
  Encoder<T> e(arch);
  e.visit([&](Parameter<T>& p) { load_parameter(ckpt, p); });
  return e;
}

}  // namespace distilprune
