#include "crt/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "crt/error.hpp"
#include "crt/io.hpp"

namespace crt::nn {
namespace {

constexpr std::string_view kMagic = "CRTCKPT1";

class Writer {
 public:
  void raw(std::string_view s) { buf_.append(s); }
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s);
  }
  void shape(const Shape& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    for (std::size_t d : s) u64(d);
  }
  std::string& buffer() { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::string_view raw(std::size_t n, const char* field) {
    if (bytes_.size() - pos_ < n) throw FormatError(std::string("checkpoint truncated while reading ") + field);
    std::string_view s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint8_t u8(const char* field) { return static_cast<std::uint8_t>(raw(1, field)[0]); }
  std::uint32_t u32(const char* field) {
    const auto s = raw(4, field);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[i])) << (8 * i);
    return v;
  }
  std::uint64_t u64(const char* field) {
    const auto s = raw(8, field);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[i])) << (8 * i);
    return v;
  }
  double f64(const char* field) { return std::bit_cast<double>(u64(field)); }
  std::string str(const char* field) {
    const std::uint32_t n = u32(field);
    return std::string(raw(n, field));
  }
  Shape shape(const char* field) {
    const std::uint32_t rank = u32(field);
    if (rank > 8) throw FormatError(std::string("implausible rank in ") + field);
    Shape s(rank);
    for (auto& d : s) d = u64(field);
    return s;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  const Model& m = ckpt.model;
  Writer w;
  w.raw(kMagic);
  w.u32(kCheckpointVersion);
  w.str(m.arch_id());
  w.u32(static_cast<std::uint32_t>(m.num_classes()));
  w.shape(m.input_shape());
  w.f64(ckpt.meta.sigma);
  w.str(ckpt.meta.method);
  w.u8(ckpt.meta.parent_checksum ? 1 : 0);
  w.u64(ckpt.meta.parent_checksum.value_or(0));
  w.u8(ckpt.meta.teacher_sigma ? 1 : 0);
  w.f64(ckpt.meta.teacher_sigma.value_or(0.0));
  w.u32(ckpt.meta.chain_length);
  w.u32(static_cast<std::uint32_t>(m.params().size()));
  for (const auto& p : m.params()) {
    w.str(p.name);
    w.shape(p.value.shape());
    for (double v : p.value.data()) w.f64(v);
  }
  const std::uint64_t sum = io::fnv1a(w.buffer());
  w.u64(sum);
  return std::move(w.buffer());
}

Checkpoint deserialize_checkpoint(std::string_view bytes) {
  if (bytes.size() < kMagic.size() + 8) throw FormatError("checkpoint too short");
  const std::string_view body = bytes.substr(0, bytes.size() - 8);
  Reader trailer(bytes.substr(bytes.size() - 8));
  if (trailer.u64("checksum") != io::fnv1a(body)) throw FormatError("checkpoint checksum mismatch");

  Reader r(body);
  if (r.raw(kMagic.size(), "magic") != kMagic) throw FormatError("checkpoint magic mismatch");
  const std::uint32_t version = r.u32("format version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint format version " + std::to_string(version));
  }
  const std::string arch = r.str("arch_id");
  const std::uint32_t classes = r.u32("num_classes");
  const Shape input_shape = r.shape("input shape");

  CheckpointMeta meta;
  meta.sigma = r.f64("sigma");
  meta.method = r.str("method");
  const bool has_parent = r.u8("parent flag") != 0;
  const std::uint64_t parent = r.u64("parent checksum");
  if (has_parent) meta.parent_checksum = parent;
  const bool has_teacher_sigma = r.u8("teacher sigma flag") != 0;
  const double teacher_sigma = r.f64("teacher sigma");
  if (has_teacher_sigma) meta.teacher_sigma = teacher_sigma;
  meta.chain_length = r.u32("chain length");

  Model model = [&] {
    try {
      return make_preset(arch, input_shape, classes);
    } catch (const std::exception& e) {
      throw FormatError(std::string("checkpoint header does not describe a valid model: ") + e.what());
    }
  }();
  const std::uint32_t count = r.u32("tensor count");
  if (count != model.params().size()) {
    throw FormatError("checkpoint holds " + std::to_string(count) + " tensors, architecture '" + arch + "' has " +
                      std::to_string(model.params().size()));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str("tensor name");
    const Shape shape = r.shape("tensor shape");
    Tensor* target = find_param(model.params(), name);
    if (!target || target->shape() != shape) {
      throw FormatError("checkpoint tensor '" + name + "' " + shape_string(shape) + " does not match architecture");
    }
    for (double& v : target->data()) v = r.f64("tensor values");
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after checkpoint tensors");
  return {std::move(model), std::move(meta)};
}

std::uint64_t checkpoint_checksum(const Checkpoint& checkpoint) {
  const std::string bytes = serialize_checkpoint(checkpoint);
  Reader r(std::string_view(bytes).substr(bytes.size() - 8));
  return r.u64("checksum");
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  io::write_file_atomic(path, serialize_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(io::read_file(path));
}

}  // namespace crt::nn
