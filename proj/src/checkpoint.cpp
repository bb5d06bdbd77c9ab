#include "more/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "more/error.hpp"
#include "more/rng.hpp"

namespace more {

namespace {

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) {
    u8(std::uint8_t(v));
    u8(std::uint8_t(v >> 8));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(std::uint8_t(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(std::uint8_t(v >> (8 * i)));
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.insert(out_.end(), s.begin(), s.end());
  }
  std::vector<std::uint8_t>& bytes() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : in_(bytes) {}

  std::uint8_t u8() {
    need(1);
    return in_[pos_++];
  }
  std::uint16_t u16() {
    std::uint16_t v = u8();
    return static_cast<std::uint16_t>(v | (std::uint16_t(u8()) << 8));
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(u8()) << (8 * i);
    return v;
  }
  std::string str() {
    const std::size_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    require(n <= in_.size() - pos_, Errc::truncated_file, "checkpoint truncated");
  }
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

std::uint64_t fnv(std::span<const std::uint8_t> bytes) {
  Fnv1a h;
  h.update(bytes);
  return h.digest();
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  for (char c : std::string_view("MORE")) w.u8(static_cast<std::uint8_t>(c));
  w.u16(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(ckpt.metadata.size()));
  for (const auto& [k, v] : ckpt.metadata) {
    w.str(k);
    w.str(v);
  }
  w.u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    w.str(t.name);
    w.u8(0);
    w.u32(static_cast<std::uint32_t>(t.value.rank()));
    for (std::size_t d : t.value.shape()) w.u64(d);
    for (float v : t.value.data()) w.u32(std::bit_cast<std::uint32_t>(v));
  }
  w.u64(fnv(w.bytes()));
  return std::move(w.bytes());
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  require(bytes.size() >= 4 && std::memcmp(bytes.data(), "MORE", 4) == 0, Errc::bad_magic,
          "not a checkpoint (bad magic)");
  require(bytes.size() >= 6 + 8, Errc::truncated_file, "checkpoint truncated");
  const std::uint16_t version = static_cast<std::uint16_t>(bytes[4] | (bytes[5] << 8));
  require(version == kCheckpointVersion, Errc::version_mismatch,
          "checkpoint version " + std::to_string(version) + ", expected " + std::to_string(kCheckpointVersion));
  const auto body = bytes.first(bytes.size() - 8);
  Reader tail(bytes.last(8));
  require(tail.u64() == fnv(body), Errc::hash_mismatch, "checkpoint content hash mismatch");

  Reader r(body);
  r.u32();
  r.u16();
  Checkpoint ckpt;
  const std::uint32_t n_meta = r.u32();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = r.str();
    ckpt.metadata[k] = r.str();
  }
  const std::uint32_t n_tensors = r.u32();
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    NamedTensor t;
    t.name = r.str();
    require(r.u8() == 0, Errc::invalid_params, "unsupported tensor dtype in checkpoint");
    Shape shape(r.u32());
    for (auto& d : shape) d = static_cast<std::size_t>(r.u64());
    std::vector<float> data(shape_size(shape));
    require(data.size() * 4 <= r.remaining(), Errc::truncated_file, "checkpoint truncated");
    for (float& v : data) v = std::bit_cast<float>(r.u32());
    t.value = Tensor(std::move(shape), std::move(data));
    ckpt.tensors.push_back(std::move(t));
  }
  require(r.remaining() == 0, Errc::truncated_file, "trailing bytes before checkpoint hash");
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(ckpt);
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::io_error, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(Errc::io_error, "write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::io_error, "cannot open " + path.string());
  const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_checkpoint(bytes);
}

Checkpoint model_checkpoint(const Model& model, std::map<std::string, std::string> extra) {
  Checkpoint ckpt;
  ckpt.metadata = std::move(extra);
  ckpt.metadata["arch"] = model.arch().to_string();
  ckpt.metadata["seed"] = std::to_string(model.seed());
  ckpt.metadata["fingerprint"] = std::to_string(model.fingerprint());
  ckpt.tensors.assign(model.params().begin(), model.params().end());
  return ckpt;
}

Model model_from_checkpoint(const Checkpoint& ckpt) {
  const auto arch = ckpt.metadata.find("arch");
  require(arch != ckpt.metadata.end(), Errc::invalid_arch, "checkpoint has no arch metadata");
  const auto seed = ckpt.metadata.find("seed");
  Model model(ArchSpec::parse(arch->second), ckpt.tensors,
              seed == ckpt.metadata.end() ? 0 : std::stoull(seed->second));
  if (const auto fp = ckpt.metadata.find("fingerprint"); fp != ckpt.metadata.end())
    require(std::stoull(fp->second) == model.fingerprint(), Errc::hash_mismatch, "model fingerprint mismatch");
  return model;
}

void save_model(const Model& model, const std::filesystem::path& path, std::map<std::string, std::string> extra) {
  save_checkpoint(model_checkpoint(model, std::move(extra)), path);
}

Model load_model(const std::filesystem::path& path) { return model_from_checkpoint(load_checkpoint(path)); }

}  // namespace more
