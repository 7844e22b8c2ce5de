#pragma once

// Named-tensor container shared by model checkpoints, synthesized samples and
// correction sets. Layout (all integers little-endian):
//
//   "DFQV"  u32 version (=1)  u32 tensor_count
//   per tensor: u32 name_len, name bytes (UTF-8), u32 rank, u64 dims[rank],
//               float64 payload, row-major, little-endian
//
// Model checkpoints additionally carry "meta.config" (see save_checkpoint).

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dfqvit/tensor.hpp"
#include "dfqvit/vit.hpp"

namespace dfqvit {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class BadMagicError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class VersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class TruncatedError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CheckpointShapeError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

inline constexpr std::array<char, 4> kTensorFileMagic{'D', 'F', 'Q', 'V'};
inline constexpr std::uint32_t kTensorFileVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class ByteReader {
 public:
  explicit ByteReader(const std::string& bytes) : bytes_(bytes) {}

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw TruncatedError("tensor file truncated while reading " + std::string(what) + " at byte " +
                           std::to_string(pos_));
    }
  }

  std::uint64_t uint(std::size_t width, const char* what) {
    need(width, what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < width; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += width;
    return v;
  }

  std::string take(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

inline std::string hex_bytes(const std::string& s) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  for (unsigned char c : s) {
    if (!out.empty()) out += ' ';
    out += digits[c >> 4];
    out += digits[c & 0xF];
  }
  return out;
}

}  // namespace detail

inline std::string encode_tensors(const std::vector<NamedTensor>& tensors) {
  std::string out(kTensorFileMagic.begin(), kTensorFileMagic.end());
  detail::put_u32(out, kTensorFileVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) detail::put_u64(out, d);
    for (double v : t.data()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

inline std::vector<NamedTensor> decode_tensors(const std::string& bytes) {
  detail::ByteReader in(bytes);
  const std::string magic = in.take(std::min<std::size_t>(4, bytes.size()), "magic");
  if (magic != std::string(kTensorFileMagic.begin(), kTensorFileMagic.end())) {
    throw BadMagicError("bad tensor file magic: expected 44 46 51 56 (\"DFQV\"), found " +
                        (magic.empty() ? std::string("<empty>") : detail::hex_bytes(magic)));
  }
  const auto version = in.uint(4, "version");
  if (version != kTensorFileVersion) {
    throw VersionError("unsupported tensor file version " + std::to_string(version) + " (expected " +
                       std::to_string(kTensorFileVersion) + ")");
  }
  const auto count = in.uint(4, "tensor count");
  std::vector<NamedTensor> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = in.uint(4, "name length");
    std::string name = in.take(name_len, "name");
    const auto rank = in.uint(4, "rank");
    Shape shape;
    std::uint64_t elems = 1;
    for (std::uint64_t r = 0; r < rank; ++r) {
      const auto d = in.uint(8, "dims");
      if (d == 0) throw CheckpointShapeError("tensor '" + name + "' has a zero dimension");
      shape.push_back(d);
      elems *= d;
    }
    in.need(elems * 8, "payload");
    std::vector<double> data(elems);
    for (auto& v : data) v = std::bit_cast<double>(in.uint(8, "payload"));
    out.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
  }
  return out;
}

inline void write_tensor_file(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot open '" + path.string() + "' for writing");
  const std::string bytes = encode_tensors(tensors);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("write failed for '" + path.string() + "'");
}

inline std::vector<NamedTensor> read_tensor_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open '" + path.string() + "' for reading");
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_tensors(bytes);
}

inline const Tensor& find_tensor(const std::vector<NamedTensor>& tensors, const std::string& name) {
  for (const auto& nt : tensors) {
    if (nt.name == name) return nt.tensor;
  }
  throw CheckpointError("tensor '" + name + "' missing from file");
}

inline Tensor config_tensor(const ViTConfig& c) {
  return Tensor::vector({static_cast<double>(c.image_size), static_cast<double>(c.patch_size),
                         static_cast<double>(c.hidden_dim), static_cast<double>(c.num_layers),
                         static_cast<double>(c.num_heads), static_cast<double>(c.mlp_ratio),
                         static_cast<double>(c.num_classes), c.use_cls_token ? 1.0 : 0.0});
}

inline ViTConfig config_from_tensor(const Tensor& t) {
  if (t.size() != 8) throw CheckpointShapeError("meta.config must hold 8 values, found " + std::to_string(t.size()));
  auto u = [&](std::size_t i) { return static_cast<std::size_t>(t[i]); };
  ViTConfig c{u(0), u(1), u(2), u(3), u(4), u(5), u(6), t[7] != 0.0};
  c.validate();
  return c;
}

inline std::vector<NamedTensor> model_tensors(const ViTModel& model) {
  std::vector<NamedTensor> out{{"meta.config", config_tensor(model.config())}};
  visit_params(model.params(), [&](const std::string& name, const Tensor& t) { out.push_back({name, t}); });
  return out;
}

inline ViTModel model_from_tensors(const std::vector<NamedTensor>& tensors) {
  ViTModel model = ViTModel::zeros(config_from_tensor(find_tensor(tensors, "meta.config")));
  visit_params(model.params(), [&](const std::string& name, Tensor& dst) {
    const Tensor& src = find_tensor(tensors, name);
    if (src.shape() != dst.shape()) {
      throw CheckpointShapeError("tensor '" + name + "' has shape " + shape_str(src.shape()) +
                                 ", model expects " + shape_str(dst.shape()));
    }
    dst = src;
  });
  return model;
}

inline void save_checkpoint(const ViTModel& model, const std::filesystem::path& path) {
  write_tensor_file(path, model_tensors(model));
}

inline ViTModel load_checkpoint(const std::filesystem::path& path) {
  return model_from_tensors(read_tensor_file(path));
}

}  // namespace dfqvit
