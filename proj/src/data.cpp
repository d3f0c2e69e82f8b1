#include "crt/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <sstream>

#include "crt/error.hpp"
#include "crt/io.hpp"
#include "crt/stats.hpp"

namespace crt::data {
namespace {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;
constexpr std::size_t kCifarRecord = 3073;
constexpr std::string_view kFixtureMagic = "CRTDATA1";

std::uint32_t read_be32(std::string_view bytes, std::size_t offset, const std::string& what) {
  if (bytes.size() < offset + 4) throw FormatError(what + ": truncated header");
  std::uint32_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(bytes[offset + i]);
  return v;
}

std::string hex32(std::uint32_t v) {
  std::ostringstream ss;
  ss << "0x" << std::hex;
  ss.width(8);
  ss.fill('0');
  ss << v;
  return ss.str();
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class LeReader {
 public:
  explicit LeReader(std::string_view bytes) : bytes_(bytes) {}
  std::uint64_t uint(int width, const char* field) {
    if (bytes_.size() - pos_ < static_cast<std::size_t>(width)) {
      throw FormatError(std::string("fixture truncated while reading ") + field);
    }
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }
  std::string_view raw(std::size_t n, const char* field) {
    if (bytes_.size() - pos_ < n) throw FormatError(std::string("fixture truncated while reading ") + field);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

Shape Dataset::sample_shape() const {
  if (inputs.rank() < 2) return {};
  return Shape(inputs.shape().begin() + 1, inputs.shape().end());
}

Tensor Dataset::sample(std::size_t index) const {
  if (index >= size()) throw InvalidParameter("sample index " + std::to_string(index) + " out of range");
  const auto row = inputs.row(index);
  return Tensor(sample_shape(), std::vector<double>(row.begin(), row.end()));
}

Tensor Dataset::gather(std::span<const std::size_t> indices) const {
  Shape shape = inputs.shape();
  shape[0] = indices.size();
  Tensor out(shape);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= size()) throw InvalidParameter("gather index out of range");
    const auto src = inputs.row(indices[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

void Dataset::validate() const {
  if (inputs.rank() < 2 || inputs.dim(0) != labels.size()) {
    throw FormatError("dataset '" + name + "': " + std::to_string(labels.size()) + " labels for inputs " +
                      shape_string(inputs.shape()));
  }
  if (num_classes < 2) throw FormatError("dataset '" + name + "': needs at least 2 classes");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes) {
      throw FormatError("dataset '" + name + "': label " + std::to_string(labels[i]) + " at index " +
                        std::to_string(i) + " outside [0," + std::to_string(num_classes) + ")");
    }
  }
  for (double v : inputs.data()) {
    if (!(v >= 0.0 && v <= 1.0)) throw FormatError("dataset '" + name + "': input value outside [0,1]");
  }
}

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 std::size_t num_classes) {
  const std::string images = io::read_file(images_path);
  const std::string labels = io::read_file(labels_path);

  const std::uint32_t img_magic = read_be32(images, 0, "idx images");
  if (img_magic != kIdxImagesMagic) {
    throw FormatError("idx images: magic number " + hex32(img_magic) + " (expected " + hex32(kIdxImagesMagic) + ")");
  }
  const std::uint32_t lbl_magic = read_be32(labels, 0, "idx labels");
  if (lbl_magic != kIdxLabelsMagic) {
    throw FormatError("idx labels: magic number " + hex32(lbl_magic) + " (expected " + hex32(kIdxLabelsMagic) + ")");
  }
  const std::size_t n = read_be32(images, 4, "idx images");
  const std::size_t rows = read_be32(images, 8, "idx images");
  const std::size_t cols = read_be32(images, 12, "idx images");
  const std::size_t n_labels = read_be32(labels, 4, "idx labels");
  if (n != n_labels) {
    throw FormatError("idx: image count " + std::to_string(n) + " does not match label count " +
                      std::to_string(n_labels));
  }
  const std::size_t pixels = rows * cols;
  if (images.size() != 16 + n * pixels) {
    throw FormatError("idx images: expected " + std::to_string(16 + n * pixels) + " bytes, file has " +
                      std::to_string(images.size()));
  }
  if (labels.size() != 8 + n) {
    throw FormatError("idx labels: expected " + std::to_string(8 + n) + " bytes, file has " +
                      std::to_string(labels.size()));
  }

  Dataset ds;
  ds.name = images_path.filename().string();
  ds.num_classes = num_classes;
  ds.inputs = Tensor({n, 1, rows, cols});
  auto dst = ds.inputs.data();
  for (std::size_t i = 0; i < n * pixels; ++i) dst[i] = static_cast<unsigned char>(images[16 + i]) / 255.0;
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) ds.labels[i] = static_cast<unsigned char>(labels[8 + i]);
  ds.validate();
  return ds;
}

Dataset load_cifar10_binary(std::span<const std::filesystem::path> batch_paths) {
  if (batch_paths.empty()) throw InvalidParameter("load_cifar10_binary: no batch files given");
  std::vector<std::string> blobs;
  std::size_t n = 0;
  for (const auto& p : batch_paths) {
    blobs.push_back(io::read_file(p));
    if (blobs.back().size() % kCifarRecord != 0 || blobs.back().empty()) {
      throw FormatError("cifar10: " + p.string() + " has " + std::to_string(blobs.back().size()) +
                        " bytes, not a positive multiple of the 3073-byte record size");
    }
    n += blobs.back().size() / kCifarRecord;
  }
  Dataset ds;
  ds.name = "cifar10";
  ds.num_classes = 10;
  ds.inputs = Tensor({n, 3, 32, 32});
  ds.labels.reserve(n);
  std::size_t i = 0;
  for (const auto& blob : blobs) {
    for (std::size_t off = 0; off < blob.size(); off += kCifarRecord, ++i) {
      ds.labels.push_back(static_cast<unsigned char>(blob[off]));
      auto row = ds.inputs.row(i);
      for (std::size_t j = 0; j < kCifarRecord - 1; ++j) row[j] = static_cast<unsigned char>(blob[off + 1 + j]) / 255.0;
    }
  }
  ds.validate();
  return ds;
}

std::vector<double> synth_blob_center(std::size_t num_classes, std::size_t dim, std::size_t k) {
  // Scale chosen so the largest vertex coordinate is 0.9.
  const double k_inv = 1.0 / static_cast<double>(num_classes);
  const double scale = 0.4 / (1.0 - k_inv);
  std::vector<double> c(dim, 0.5);
  for (std::size_t j = 0; j < num_classes; ++j) c[j] = 0.5 + scale * ((j == k ? 1.0 : 0.0) - k_inv);
  return c;
}

Dataset synth_blobs(std::size_t num_classes, std::size_t dim, std::size_t per_class, double spread,
                    std::uint64_t seed) {
  if (num_classes < 2) throw InvalidParameter("synth_blobs: num_classes must be >= 2");
  if (dim < 2) throw InvalidParameter("synth_blobs: dim must be >= 2");
  if (num_classes > dim) throw InvalidParameter("synth_blobs: num_classes must not exceed dim");
  if (per_class == 0) throw InvalidParameter("synth_blobs: per_class must be >= 1");
  if (!(spread > 0.0) || !std::isfinite(spread)) throw InvalidParameter("synth_blobs: spread must be > 0");

  std::vector<std::vector<double>> centers;
  for (std::size_t k = 0; k < num_classes; ++k) centers.push_back(synth_blob_center(num_classes, dim, k));

  const std::size_t n = num_classes * per_class;
  Dataset ds;
  ds.name = "synth-blobs";
  ds.num_classes = num_classes;
  ds.inputs = Tensor({n, dim});
  ds.labels.resize(n);
  stats::RngStream rng(seed, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = i % num_classes;
    ds.labels[i] = static_cast<std::uint32_t>(k);
    auto row = ds.inputs.row(i);
    for (std::size_t j = 0; j < dim; ++j) row[j] = std::clamp(centers[k][j] + spread * rng.normal(), 0.0, 1.0);
  }
  return ds;
}

Dataset subset(const Dataset& data, std::span<const std::size_t> indices) {
  Dataset out;
  out.name = data.name;
  out.num_classes = data.num_classes;
  out.inputs = data.gather(indices);
  out.labels.reserve(indices.size());
  for (std::size_t i : indices) out.labels.push_back(data.labels[i]);
  return out;
}

std::string serialize_fixture(const Dataset& data) {
  std::string out(kFixtureMagic);
  put_u32(out, static_cast<std::uint32_t>(data.num_classes));
  put_u32(out, static_cast<std::uint32_t>(data.name.size()));
  out += data.name;
  const Shape sample = data.sample_shape();
  put_u32(out, static_cast<std::uint32_t>(sample.size()));
  for (std::size_t d : sample) put_u64(out, d);
  put_u64(out, data.size());
  for (std::uint32_t l : data.labels) put_u32(out, l);
  for (double v : data.inputs.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

Dataset deserialize_fixture(std::string_view bytes) {
  LeReader r(bytes);
  if (r.raw(kFixtureMagic.size(), "magic") != kFixtureMagic) throw FormatError("fixture: magic mismatch");
  Dataset ds;
  ds.num_classes = r.uint(4, "num_classes");
  const std::size_t name_len = r.uint(4, "name length");
  ds.name = std::string(r.raw(name_len, "name"));
  const std::size_t rank = r.uint(4, "rank");
  if (rank == 0 || rank > 8) throw FormatError("fixture: implausible sample rank " + std::to_string(rank));
  Shape shape{0};
  for (std::size_t i = 0; i < rank; ++i) shape.push_back(r.uint(8, "sample shape"));
  const std::size_t n = r.uint(8, "sample count");
  shape[0] = n;
  const std::size_t values = shape_size(shape);
  if (r.remaining() != n * 4 + values * 8) {
    throw FormatError("fixture: payload size " + std::to_string(r.remaining()) + " does not match header");
  }
  ds.labels.resize(n);
  for (auto& l : ds.labels) l = static_cast<std::uint32_t>(r.uint(4, "labels"));
  std::vector<double> v(values);
  for (auto& x : v) x = std::bit_cast<double>(r.uint(8, "inputs"));
  ds.inputs = Tensor(shape, std::move(v));
  ds.validate();
  return ds;
}

void write_fixture(const std::filesystem::path& path, const Dataset& data) {
  io::write_file_atomic(path, serialize_fixture(data));
}

Dataset load_fixture(const std::filesystem::path& path) { return deserialize_fixture(io::read_file(path)); }

}  // namespace crt::data
