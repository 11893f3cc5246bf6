#include "lmrc/checkpoint.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace lmrc {

namespace {

constexpr char kMagic[4] = {'L', 'M', 'R', 'C'};
constexpr std::uint32_t kVersion = 1;

std::uint32_t crc_table_entry(std::uint32_t i) {
  std::uint32_t c = i;
  for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : (c >> 1);
  return c;
}

const std::uint32_t* crc_table() {
  static std::uint32_t table[256];
  static bool init = [] {
    for (std::uint32_t i = 0; i < 256; ++i) table[i] = crc_table_entry(i);
    return true;
  }();
  (void)init;
  return table;
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

class Reader {
 public:
  Reader(const std::string& buf, std::size_t limit) : buf_(buf), limit_(limit) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(buf_[pos_++]);
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void floats(float* dst, std::size_t count) {
    need(count * 4);
    for (std::size_t i = 0; i < count; ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b)
        bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf_[pos_ + 4 * i + b]))
                << (8 * b);
      std::memcpy(&dst[i], &bits, 4);
    }
    pos_ += count * 4;
  }
  bool exhausted() const { return pos_ == limit_; }

 private:
  void need(std::size_t n) {
    if (pos_ + n > limit_)
      throw ArtifactError(ArtifactError::Kind::CrcMismatch, "checkpoint truncated or corrupt");
  }
  const std::string& buf_;
  std::size_t limit_;
  std::size_t pos_ = 0;
};

void append_tensors(std::string& out, const std::vector<std::pair<std::string, Tensor>>& tensors) {
  for (const auto& [name, t] : tensors) {
    for (float v : t.data())
      if (!std::isfinite(v))
        throw ArtifactError(ArtifactError::Kind::Io,
                            "refusing to persist non-finite values in tensor " + name);
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.append(name);
    out.push_back(0);  // dtype tag: float32
    out.push_back(static_cast<char>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) put_u32(out, static_cast<std::uint32_t>(t.dim(i)));
    for (float v : t.data()) put_f32(out, v);
  }
}

}  // namespace

std::uint32_t crc32(const void* data, std::size_t length, std::uint32_t seed) {
  const std::uint32_t* table = crc_table();
  std::uint32_t c = seed ^ 0xFFFFFFFFu;
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < length; ++i) c = table[(c ^ p[i]) & 0xFF] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

void save_checkpoint(const Classifier& model, const std::string& path) {
  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kVersion);
  const std::string desc = model.config().descriptor();
  put_u32(out, static_cast<std::uint32_t>(desc.size()));
  out.append(desc);
  put_u32(out,
          static_cast<std::uint32_t>(model.parameters().size() + model.buffers().size()));
  append_tensors(out, model.parameters());
  append_tensors(out, model.buffers());
  put_u32(out, crc32(out.data(), out.size()));

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ArtifactError(ArtifactError::Kind::Io, "cannot open " + path + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw ArtifactError(ArtifactError::Kind::Io, "short write to " + path);
}

namespace {

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ArtifactError(ArtifactError::Kind::Io, "cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return buf;
}

std::string verify_and_read_descriptor(const std::string& buf, Reader& r) {
  if (buf.size() < 12 + 4)
    throw ArtifactError(ArtifactError::Kind::CrcMismatch, "checkpoint truncated or corrupt");
  if (std::memcmp(buf.data(), kMagic, 4) != 0)
    throw ArtifactError(ArtifactError::Kind::BadMagic, "not a checkpoint file (bad magic)");
  const std::uint32_t stored_crc = crc32(buf.data(), buf.size() - 4);
  std::uint32_t file_crc = 0;
  for (int i = 0; i < 4; ++i)
    file_crc |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[buf.size() - 4 + i]))
                << (8 * i);
  if (stored_crc != file_crc)
    throw ArtifactError(ArtifactError::Kind::CrcMismatch, "checkpoint CRC mismatch");
  r.bytes(4);  // magic
  const std::uint32_t version = r.u32();
  if (version != kVersion)
    throw ArtifactError(ArtifactError::Kind::VersionMismatch,
                        "unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t desc_len = r.u32();
  return r.bytes(desc_len);
}

void read_tensors_into(Classifier& model, Reader& r) {
  const std::uint32_t count = r.u32();
  const std::size_t expected = model.parameters().size() + model.buffers().size();
  if (count != expected)
    throw ArtifactError(ArtifactError::Kind::CrcMismatch,
                        "checkpoint tensor count does not match architecture");
  auto read_into = [&](std::vector<std::pair<std::string, Tensor>>& registry) {
    for (auto& [name, t] : registry) {
      const std::uint32_t name_len = r.u32();
      const std::string stored = r.bytes(name_len);
      if (stored != name)
        throw ArtifactError(ArtifactError::Kind::CrcMismatch,
                            "checkpoint tensor name mismatch: expected " + name + ", found " +
                                stored);
      if (r.u8() != 0)
        throw ArtifactError(ArtifactError::Kind::CrcMismatch, "unknown dtype tag for " + name);
      const int rank = r.u8();
      if (rank != t.rank())
        throw ArtifactError(ArtifactError::Kind::CrcMismatch, "rank mismatch for " + name);
      for (int i = 0; i < rank; ++i)
        if (static_cast<int>(r.u32()) != t.dim(i))
          throw ArtifactError(ArtifactError::Kind::CrcMismatch, "extent mismatch for " + name);
      r.floats(t.raw_data().data(), t.raw_data().size());
    }
  };
  read_into(model.parameters());
  read_into(model.buffers());
  if (!r.exhausted())
    throw ArtifactError(ArtifactError::Kind::CrcMismatch, "trailing bytes in checkpoint");
}

}  // namespace

Classifier load_checkpoint(const std::string& path) {
  const std::string buf = read_file(path);
  Reader r(buf, buf.size() >= 4 ? buf.size() - 4 : 0);
  const std::string desc = verify_and_read_descriptor(buf, r);
  Classifier model = Classifier::build(ArchConfig::from_descriptor(desc), 0);
  read_tensors_into(model, r);
  return model;
}

void load_checkpoint_into(Classifier& model, const std::string& path) {
  const std::string buf = read_file(path);
  Reader r(buf, buf.size() >= 4 ? buf.size() - 4 : 0);
  const std::string desc = verify_and_read_descriptor(buf, r);
  if (desc != model.config().descriptor())
    throw ArtifactError(ArtifactError::Kind::DescriptorMismatch,
                        "checkpoint architecture " + desc + " does not match model " +
                            model.config().descriptor());
  read_tensors_into(model, r);
}

}  // namespace lmrc
