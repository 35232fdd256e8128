#pragma once

// Binary checkpoint format (all integers little-endian):
//
//   "HYSN" | u16 version=1 | u32 meta_len | meta_len bytes UTF-8 JSON
//   u32 tensor_count, then per tensor:
//   u16 name_len | name | u8 dtype (1 = f32, 2 = f64) | u8 rank | rank x u32 dims | payload

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "json.hpp"

#include "hysense/errors.hpp"
#include "hysense/network.hpp"
#include "hysense/tensor.hpp"

namespace hysense {

inline constexpr char kCheckpointMagic[4] = {'H', 'Y', 'S', 'N'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

struct StoredTensor {
  std::string name;
  DType dtype = DType::f32;
  Shape dims;
  std::vector<std::uint8_t> payload;  // little-endian element bytes

  template <typename T>
  Tensor<T> to_tensor() const {
    const std::size_t n = element_count(dims);
    std::vector<T> out(n);
    if (dtype == DType::f32) {
      for (std::size_t i = 0; i < n; ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= std::uint32_t{payload[i * 4 + b]} << (8 * b);
        out[i] = static_cast<T>(std::bit_cast<float>(bits));
      }
    } else {
      for (std::size_t i = 0; i < n; ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) bits |= std::uint64_t{payload[i * 8 + b]} << (8 * b);
        out[i] = static_cast<T>(std::bit_cast<double>(bits));
      }
    }
    return Tensor<T>(dims, std::move(out));
  }

  template <typename T>
  static StoredTensor from_tensor(std::string name, const Tensor<T>& t) {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    StoredTensor s{std::move(name), std::is_same_v<T, float> ? DType::f32 : DType::f64, t.shape(), {}};
    s.payload.reserve(t.size() * sizeof(T));
    for (T v : t.data()) {
      if constexpr (std::is_same_v<T, float>) {
        const auto bits = std::bit_cast<std::uint32_t>(v);
        for (int b = 0; b < 4; ++b) s.payload.push_back(static_cast<std::uint8_t>(bits >> (8 * b)));
      } else {
        const auto bits = std::bit_cast<std::uint64_t>(v);
        for (int b = 0; b < 8; ++b) s.payload.push_back(static_cast<std::uint8_t>(bits >> (8 * b)));
      }
    }
    return s;
  }

  friend bool operator==(const StoredTensor&, const StoredTensor&) = default;
};

struct Checkpoint {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<StoredTensor> tensors;

  const StoredTensor* find(std::string_view name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

// FNV-1a over the canonical JSON dump of a model configuration.
inline std::string config_hash(const ModelConfig& c) {
  const std::string s = nlohmann::json(c).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

template <typename T>
Checkpoint make_checkpoint(const Model<T>& model, nlohmann::json extra = nlohmann::json::object()) {
  Checkpoint ck;
  ck.metadata = std::move(extra);
  ck.metadata["model"] = to_string(model.kind());
  ck.metadata["config"] = model.config();
  ck.metadata["config_hash"] = config_hash(model.config());
  for (const auto& e : model.parameters()) ck.tensors.push_back(StoredTensor::from_tensor(e.name, *e.value));
  return ck;
}

namespace detail {

inline void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v) { out.push_back(v); }
inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  for (int b = 0; b < 2; ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
}
inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
}

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}
  const std::uint8_t* take(std::size_t n) {
    if (n > bytes_.size() - pos_) throw FormatError("checkpoint truncated");
    const auto* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint8_t u8() { return *take(1); }
  std::uint16_t u16() {
    const auto* p = take(2);
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
  }
  std::uint32_t u32() {
    const auto* p = take(4);
    return std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) | (std::uint32_t{p[2]} << 16) |
           (std::uint32_t{p[3]} << 24);
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  detail::put_u16(out, kCheckpointVersion);
  const std::string meta = ck.metadata.dump();
  detail::put_u32(out, static_cast<std::uint32_t>(meta.size()));
  out.insert(out.end(), meta.begin(), meta.end());
  detail::put_u32(out, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& t : ck.tensors) {
    if (t.name.size() > 0xffff) throw FormatError("tensor name too long: " + t.name);
    detail::put_u16(out, static_cast<std::uint16_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    detail::put_u8(out, static_cast<std::uint8_t>(t.dtype));
    detail::put_u8(out, static_cast<std::uint8_t>(t.dims.size()));
    for (auto d : t.dims) detail::put_u32(out, static_cast<std::uint32_t>(d));
    out.insert(out.end(), t.payload.begin(), t.payload.end());
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader in(bytes);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw FormatError("not a checkpoint: bad magic bytes");
  in.take(4);
  if (const auto v = in.u16(); v != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(v));
  Checkpoint ck;
  const auto meta_len = in.u32();
  const auto* meta = in.take(meta_len);
  try {
    ck.metadata = nlohmann::json::parse(meta, meta + meta_len);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
  }
  const auto count = in.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    StoredTensor t;
    const auto name_len = in.u16();
    const auto* name = in.take(name_len);
    t.name.assign(reinterpret_cast<const char*>(name), name_len);
    const auto dtype = in.u8();
    if (dtype != 1 && dtype != 2) throw FormatError("unknown dtype code " + std::to_string(dtype));
    t.dtype = static_cast<DType>(dtype);
    const auto rank = in.u8();
    if (rank == 0) throw FormatError("tensor " + t.name + " has rank 0");
    for (int r = 0; r < rank; ++r) {
      const auto d = in.u32();
      if (d == 0) throw FormatError("tensor " + t.name + " has a zero extent");
      t.dims.push_back(d);
    }
    const std::size_t width = t.dtype == DType::f32 ? 4 : 8;
    const auto* payload = in.take(element_count(t.dims) * width);
    t.payload.assign(payload, payload + element_count(t.dims) * width);
    ck.tensors.push_back(std::move(t));
  }
  if (!in.done()) throw FormatError("trailing bytes after checkpoint tensors");
  return ck;
}

/// Writes to a sibling temporary file then renames it into place.
inline void write_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(ck);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename checkpoint into " + path.string() + ": " + ec.message());
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

template <typename T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& path,
                     nlohmann::json extra = nlohmann::json::object()) {
  write_checkpoint(make_checkpoint(model, std::move(extra)), path);
}

enum class LoadMode { strict, transfer };

struct LoadOptions {
  LoadMode mode = LoadMode::strict;
  // Parameter-name prefixes marked non-trainable after loading.
  std::vector<std::string> freeze;
  // Transfer mode only: prefixes left at their fresh initialisation even when
  // the checkpoint has a matching tensor (the classification head by default).
  std::vector<std::string> reinitialize{"classifier"};
};

struct LoadReport {
  std::vector<std::string> loaded;
  // Model tensors left untouched, with the reason.
  std::vector<std::pair<std::string, std::string>> skipped;
  // Checkpoint tensors that match no model tensor.
  std::vector<std::string> unused;
  std::vector<std::string> frozen;

  std::vector<std::string> skipped_names() const {
    std::vector<std::string> out;
    for (const auto& s : skipped) out.push_back(s.first);
    return out;
  }
};

/// Copies checkpoint tensors into the model.
///
/// Strict mode requires an exact one-to-one name and shape correspondence and
/// throws IncompatibleError listing every offender otherwise; nothing is
/// modified in that case. Transfer mode loads every name+shape match outside
/// `reinitialize` and reports the rest as skipped.
template <typename T>
LoadReport apply_checkpoint(const Checkpoint& ck, Model<T>& model, const LoadOptions& options = {}) {
  LoadReport report;
  if (options.mode == LoadMode::strict) {
    std::vector<std::string> offenders;
    for (const auto& e : model.parameters()) {
      const auto* t = ck.find(e.name);
      if (!t) offenders.push_back(e.name + " (missing from checkpoint)");
      else if (t->dims != e.value->shape())
        offenders.push_back(e.name + " (checkpoint " + to_string(t->dims) + ", model " +
                            to_string(e.value->shape()) + ")");
    }
    for (const auto& t : ck.tensors)
      if (!model.find(t.name)) offenders.push_back(t.name + " (not in model)");
    if (!offenders.empty()) {
      std::string msg = "checkpoint incompatible with model:";
      for (const auto& o : offenders) msg += "\n  " + o;
      throw IncompatibleError(msg, offenders);
    }
  }
  for (auto& e : model.parameters()) {
    const auto* t = ck.find(e.name);
    if (options.mode == LoadMode::transfer) {
      bool reinit = false;
      for (const auto& p : options.reinitialize) reinit = reinit || name_matches_prefix(e.name, p);
      if (reinit) {
        report.skipped.emplace_back(e.name, "reinitialized head");
        continue;
      }
      if (!t) {
        report.skipped.emplace_back(e.name, "missing from checkpoint");
        continue;
      }
      if (t->dims != e.value->shape()) {
        report.skipped.emplace_back(e.name, "shape mismatch");
        continue;
      }
    }
    *e.value = t->template to_tensor<T>();
    report.loaded.push_back(e.name);
  }
  for (const auto& t : ck.tensors)
    if (!model.find(t.name)) report.unused.push_back(t.name);
  report.frozen = model.freeze(options.freeze);
  return report;
}

template <typename T>
LoadReport load_checkpoint(const std::filesystem::path& path, Model<T>& model,
                           const LoadOptions& options = {}) {
  return apply_checkpoint(read_checkpoint(path), model, options);
}

}  // namespace hysense
