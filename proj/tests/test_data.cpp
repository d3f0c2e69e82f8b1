#include <doctest.h>

#include <cmath>
#include <cstring>
#include <functional>

#include "crt/data.hpp"
#include "crt/error.hpp"
#include "crt/io.hpp"
#include "tmpdir.hpp"

using namespace crt;
using namespace crt::data;
namespace fs = std::filesystem;

namespace {

void put_be32(std::string& s, std::uint32_t v) {
  for (int i = 3; i >= 0; --i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::string idx_images(std::uint32_t n, std::uint32_t rows, std::uint32_t cols, std::uint32_t magic = 0x803) {
  std::string s;
  put_be32(s, magic);
  put_be32(s, n);
  put_be32(s, rows);
  put_be32(s, cols);
  for (std::uint32_t i = 0; i < n * rows * cols; ++i) s.push_back(static_cast<char>((i * 37) % 256));
  return s;
}

std::string idx_labels(std::uint32_t n, std::uint32_t magic = 0x801) {
  std::string s;
  put_be32(s, magic);
  put_be32(s, n);
  for (std::uint32_t i = 0; i < n; ++i) s.push_back(static_cast<char>(i % 10));
  return s;
}

std::string cifar_records(std::size_t n) {
  std::string s;
  for (std::size_t r = 0; r < n; ++r) {
    s.push_back(static_cast<char>(r % 10));
    for (std::size_t i = 0; i < 3072; ++i) s.push_back(static_cast<char>((r + i) % 256));
  }
  return s;
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const FormatError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("idx loader") {
  const auto dir = testing_tmp::fresh_dir("data_idx");
  io::write_file_atomic(dir / "img", idx_images(10, 3, 2));
  io::write_file_atomic(dir / "lbl", idx_labels(10));
  const Dataset d = load_idx(dir / "img", dir / "lbl");
  CHECK(d.size() == 10);
  CHECK(d.inputs.shape() == Shape{10, 1, 3, 2});
  for (std::size_t i = 0; i < d.inputs.size(); ++i) CHECK(d.inputs[i] == static_cast<double>((i * 37) % 256) / 255.0);
  CHECK(d.labels[7] == 7);

  io::write_file_atomic(dir / "lbl9", idx_labels(9));
  CHECK(error_of([&] { load_idx(dir / "img", dir / "lbl9"); }).find("count") != std::string::npos);

  io::write_file_atomic(dir / "badimg", idx_images(10, 3, 2, 0x804));
  const std::string msg = error_of([&] { load_idx(dir / "badimg", dir / "lbl"); });
  CHECK(msg.find("magic") != std::string::npos);
  CHECK(msg.find("images") != std::string::npos);
  io::write_file_atomic(dir / "badlbl", idx_labels(10, 0x803));
  CHECK(error_of([&] { load_idx(dir / "img", dir / "badlbl"); }).find("labels") != std::string::npos);

  const std::string full = idx_images(10, 3, 2);
  io::write_file_atomic(dir / "short", full.substr(0, full.size() - 5));
  CHECK_THROWS_AS(load_idx(dir / "short", dir / "lbl"), FormatError);
  CHECK_THROWS_AS(load_idx(dir / "missing", dir / "lbl"), FormatError);
}

TEST_CASE("cifar-10 binary loader") {
  const auto dir = testing_tmp::fresh_dir("data_cifar");
  io::write_file_atomic(dir / "one.bin", cifar_records(1));
  const std::vector<fs::path> one = {dir / "one.bin"};
  const Dataset d1 = load_cifar10_binary(one);
  CHECK(d1.size() == 1);
  CHECK(d1.labels[0] == 0);
  CHECK(d1.inputs.shape() == Shape{1, 3, 32, 32});
  CHECK(d1.inputs[5] == 5.0 / 255.0);

  const std::string ten = cifar_records(10);
  CHECK(ten.size() == 30730);
  io::write_file_atomic(dir / "ten.bin", ten);
  const std::vector<fs::path> both = {dir / "one.bin", dir / "ten.bin"};
  const Dataset d = load_cifar10_binary(both);
  CHECK(d.size() == 11);
  CHECK(d.labels[10] == 9);

  io::write_file_atomic(dir / "bad.bin", cifar_records(1) + "x");
  const std::vector<fs::path> bad = {dir / "bad.bin"};
  CHECK_THROWS_AS(load_cifar10_binary(bad), FormatError);

  std::string wrong = cifar_records(1);
  wrong[0] = 12;
  io::write_file_atomic(dir / "label.bin", wrong);
  const std::vector<fs::path> lbl = {dir / "label.bin"};
  CHECK_THROWS_AS(load_cifar10_binary(lbl), FormatError);
}

TEST_CASE("synthetic blobs") {
  const Dataset a = synth_blobs(3, 16, 50, 0.1, 4);
  const Dataset b = synth_blobs(3, 16, 50, 0.1, 4);
  CHECK(a.inputs == b.inputs);
  CHECK(a.labels == b.labels);
  CHECK(a.size() == 150);
  CHECK(a.num_classes == 3);
  CHECK_NOTHROW(a.validate());
  CHECK_FALSE(synth_blobs(3, 16, 50, 0.1, 5).inputs == a.inputs);

  SUBCASE("tight clusters are separated by nearest centroid") {
    const Dataset d = synth_blobs(4, 6, 100, 1e-6, 1);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
      const Tensor x = d.sample(i);
      std::size_t best = 0;
      double best_dist = INFINITY;
      for (std::size_t k = 0; k < 4; ++k) {
        const auto c = synth_blob_center(4, 6, k);
        double dist = 0.0;
        for (std::size_t j = 0; j < 6; ++j) dist += (x[j] - c[j]) * (x[j] - c[j]);
        if (dist < best_dist) {
          best_dist = dist;
          best = k;
        }
      }
      hits += best == d.labels[i] ? 1 : 0;
    }
    CHECK(hits == d.size());
  }
  SUBCASE("invalid sizes") {
    CHECK_THROWS_AS(synth_blobs(1, 16, 10, 0.1, 0), InvalidParameter);
    CHECK_THROWS_AS(synth_blobs(3, 2, 10, 0.1, 0), InvalidParameter);
    CHECK_THROWS_AS(synth_blobs(3, 16, 10, 0.0, 0), InvalidParameter);
    CHECK_THROWS_AS(synth_blobs(3, 16, 0, 0.1, 0), InvalidParameter);
  }
}

TEST_CASE("fixture round trip") {
  const auto dir = testing_tmp::fresh_dir("data_fixture");
  const Dataset d = synth_blobs(3, 9, 7, 0.2, 8);
  write_fixture(dir / "f.bin", d);
  const Dataset back = load_fixture(dir / "f.bin");
  CHECK(back.inputs == d.inputs);
  CHECK(back.labels == d.labels);
  CHECK(back.num_classes == d.num_classes);
  CHECK(back.name == d.name);

  Dataset out_of_range = d;
  out_of_range.inputs[3] = 1.5;
  CHECK_THROWS_AS(deserialize_fixture(serialize_fixture(out_of_range)), FormatError);
  const std::string bytes = serialize_fixture(d);
  CHECK_THROWS_AS(deserialize_fixture(bytes.substr(0, bytes.size() - 1)), FormatError);
}

TEST_CASE("subset and gather") {
  const Dataset d = synth_blobs(2, 4, 5, 0.1, 3);
  const std::vector<std::size_t> idx = {9, 0, 4};
  const Dataset s = subset(d, idx);
  CHECK(s.size() == 3);
  CHECK(s.labels[0] == d.labels[9]);
  CHECK(s.sample(2) == d.sample(4));
  CHECK(d.gather(idx).row(1).size() == 4);
}
