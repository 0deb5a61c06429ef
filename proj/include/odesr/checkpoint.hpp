// Model checkpoints: a flat binary container of named parameter tensors
// (name, dims, raw float32 little-endian values) behind a magic/version pair
// and the generator config as a JSON header block. Values are stored as
// float32 regardless of the model's compute precision, so a float round-trip
// is bit-exact and a double one is float-rounded.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "odesr/errors.hpp"
#include "odesr/run_config.hpp"
#include "odesr/sr_model.hpp"

namespace odesr {

namespace detail {

inline constexpr char kCkptMagic[8] = {'O', 'D', 'E', 'S', 'R', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCkptVersion = 1;

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float v) {
  put_u32(out, std::bit_cast<std::uint32_t>(v));
}

class ByteReader {
 public:
  ByteReader(const std::string& buf, const std::string& path)
      : buf_(buf), path_(path) {}

  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(byte()) << (8 * i);
    return v;
  }

  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(byte()) << (8 * i);
    return v;
  }

  float f32() { return std::bit_cast<float>(u32()); }

  std::string bytes(std::uint64_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == buf_.size(); }

 private:
  unsigned char byte() {
    need(1);
    return static_cast<unsigned char>(buf_[pos_++]);
  }

  void need(std::uint64_t n) {
    if (pos_ + n > buf_.size()) {
      throw io_error("checkpoint '" + path_ + "' is truncated");
    }
  }

  const std::string& buf_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <typename Real>
void save_checkpoint(const std::string& path, Generator<Real>& gen) {
  std::string out;
  out.append(detail::kCkptMagic, sizeof(detail::kCkptMagic));
  detail::put_u32(out, detail::kCkptVersion);

  const std::string cfg = generator_to_json(gen.config()).dump();
  detail::put_u64(out, cfg.size());
  out += cfg;

  auto named = gen.named_parameters();
  detail::put_u64(out, named.size());
  for (const auto& [name, tensor] : named) {
    detail::put_u64(out, name.size());
    out += name;
    detail::put_u32(out, std::uint32_t(tensor->batch()));
    detail::put_u32(out, std::uint32_t(tensor->channels()));
    detail::put_u32(out, std::uint32_t(tensor->height()));
    detail::put_u32(out, std::uint32_t(tensor->width()));
    detail::put_u64(out, tensor->size());
    for (std::size_t i = 0; i < tensor->size(); ++i) {
      detail::put_f32(out, static_cast<float>(tensor->data()[i]));
    }
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw io_error("cannot open '" + path + "' for writing");
  f.write(out.data(), std::streamsize(out.size()));
  if (!f) throw io_error("short write to '" + path + "'");
}

template <typename Real>
std::unique_ptr<Generator<Real>> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open '" + path + "'");
  std::string buf((std::istreambuf_iterator<char>(f)),
                  std::istreambuf_iterator<char>());

  detail::ByteReader r(buf, path);
  const std::string magic = r.bytes(sizeof(detail::kCkptMagic));
  if (std::memcmp(magic.data(), detail::kCkptMagic, sizeof(detail::kCkptMagic)) !=
      0) {
    throw config_error("'" + path + "' is not a model checkpoint");
  }
  const std::uint32_t version = r.u32();
  if (version != detail::kCkptVersion) {
    throw config_error("checkpoint version " + std::to_string(version) +
                       " is not supported (expected " +
                       std::to_string(detail::kCkptVersion) + ")");
  }

  const std::string cfg_text = r.bytes(r.u64());
  json cfg_json = json::parse(cfg_text, nullptr, false);
  if (cfg_json.is_discarded()) {
    throw config_error("checkpoint '" + path + "' has a malformed config block");
  }
  auto gen = std::make_unique<Generator<Real>>(generator_from_json(cfg_json));

  std::unordered_map<std::string, Tensor<Real>*> by_name;
  for (auto& [name, tensor] : gen->named_parameters()) by_name[name] = tensor;

  const std::uint64_t count = r.u64();
  if (count != by_name.size()) {
    throw config_error("checkpoint holds " + std::to_string(count) +
                       " tensors, model expects " +
                       std::to_string(by_name.size()));
  }
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = r.bytes(r.u64());
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw config_error("checkpoint tensor '" + name +
                         "' has no match in the model");
    }
    Tensor<Real>* dst = it->second;
    const Shape dims{int(r.u32()), int(r.u32()), int(r.u32()), int(r.u32())};
    if (!(dims == dst->shape())) {
      throw config_error("checkpoint tensor '" + name + "' has shape " +
                         dims.str() + ", model expects " + dst->shape().str());
    }
    const std::uint64_t n = r.u64();
    if (n != dst->size()) {
      throw config_error("checkpoint tensor '" + name +
                         "' has an inconsistent element count");
    }
    for (std::uint64_t k = 0; k < n; ++k) {
      dst->data()[k] = static_cast<Real>(r.f32());
    }
  }
  if (!r.done()) {
    throw config_error("checkpoint '" + path + "' has trailing bytes");
  }
  return gen;
}

}  // namespace odesr
