#include <doctest.h>

#include <cstdlib>
#include <filesystem>

#include "crt/checkpoint.hpp"
#include "crt/cli.hpp"
#include "crt/config.hpp"
#include "crt/error.hpp"
#include "crt/io.hpp"
#include "crt/metrics.hpp"
#include "crt/smoothing.hpp"
#include "crt/train.hpp"
#include "tmpdir.hpp"

using namespace crt;
using namespace crt::cli;
namespace fs = std::filesystem;

namespace {

int crt_main(std::vector<std::string> args) {
  args.insert(args.begin(), "crt");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  argv.push_back(nullptr);
  return run(static_cast<int>(args.size()), argv.data());
}

std::vector<std::string> quick_train(const fs::path& out) {
  return {"--epochs", "2", "--batch-size", "32", "--train-per-class", "40", "--test-per-class", "10",
          "--output-dir", out.string(), "--deterministic"};
}

std::vector<std::string> cat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

ConfigFile manifest_of(const fs::path& p) { return ConfigFile::parse(io::read_file(p)); }

const std::string* manifest_value(const ConfigFile& f, std::string_view key) {
  const ConfigSection* s = f.find("manifest");
  return s ? s->find(key) : nullptr;
}

std::size_t parse_structured_size(const fs::path& p) { return metrics::parse_structured(io::read_file(p)).size(); }

std::size_t data_rows(const fs::path& csv) { return smoothing::parse_records_csv(io::read_file(csv)).size(); }

}  // namespace

TEST_CASE("config file parsing") {
  const auto f = ConfigFile::parse("# comment\n[dataset]\nname = synth\nclasses=4\n\n[link]\narch = small-cnn\n[link]\narch=large-mlp\nepochs = 3\n");
  const auto c = ExperimentConfig::from_file(f);
  CHECK(c.dataset.classes == 4);
  REQUIRE(c.links.size() == 2);
  CHECK(c.links[0].arch == "small-cnn");
  CHECK(c.links[1].config.epochs == 3);
  CHECK(c.links[0].config.epochs == c.train.epochs);
  CHECK_FALSE(c.sigma_explicit);

  const auto field_of = [](const std::string& text) {
    try {
      ExperimentConfig::from_file(ConfigFile::parse(text));
    } catch (const ConfigError& e) {
      return e.field;
    }
    return std::string();
  };
  CHECK(field_of("[train]\nlr = fast\n") == "train.lr");
  CHECK(field_of("[train]\nmomentum = 1.5\n") == "train.momentum");
  CHECK(field_of("[train]\nbogus = 1\n") == "train.bogus");
  CHECK(field_of("[nowhere]\n") == "nowhere");
  CHECK(field_of("[model]\narch = resnet\n") == "model.arch");
  CHECK(field_of("[dataset]\nname = imagenet\n") == "dataset.name");
  CHECK(field_of("[smoothing]\nn = 10\nn0 = 100\n") == "smoothing.n");
  CHECK(field_of("[link]\nepochs = 2\n") == "link[1].arch");
  CHECK(field_of("[run]\ndeterministic = maybe\n") == "run.deterministic");
  CHECK(field_of("lr = 1\n") == "config line 1");
}

TEST_CASE("canonical config round trip") {
  ExperimentConfig c;
  c.train.lr = 0.037;
  c.noise.sigma = 0.5;
  c.links.push_back({"small-cnn", c.train});
  const auto back = ExperimentConfig::from_file(ConfigFile::parse(c.to_file().to_text()));
  CHECK(back.to_file().to_text() == c.to_file().to_text());
  CHECK(back.hash() == c.hash());
  CHECK(back.train.lr == 0.037);
  c.train.seed = 1;
  CHECK(back.hash() != c.hash());
}

TEST_CASE("schema covers every key and documents it") {
  const std::string md = schema_markdown();
  for (const auto& k : config_schema()) CHECK(md.find(std::string(k.key)) != std::string::npos);
  const std::string docs = io::read_file(fs::path(CRT_SOURCE_DIR) / "docs" / "config.md");
  CHECK(docs.find(md) != std::string::npos);
}

TEST_CASE("dataset paths are validated up front") {
  DatasetSpec spec;
  spec.name = "idx";
  try {
    validate_dataset_paths(spec, Split::kTrain);
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    CHECK(e.field == "dataset.train_images");
  }
  spec.train_images = "/nonexistent/images";
  CHECK_THROWS_AS(validate_dataset_paths(spec, Split::kTrain), ConfigError);
  const auto dir = testing_tmp::fresh_dir("cli_paths");
  CHECK(crt_main({"train", "--dataset", "idx", "--output-dir", (dir / "out").string()}) == kExitInput);
  CHECK_FALSE(fs::exists(dir / "out"));
  CHECK(crt_main({"train", "--dataset", "cifar10", "--train-batches", (dir / "nope.bin").string()}) == kExitInput);
}

TEST_CASE("train writes checkpoint, timing and manifest") {
  const auto dir = testing_tmp::fresh_dir("cli_train");
  REQUIRE(crt_main(cat({"train", "--method", "gaussian-aug"}, quick_train(dir / "a"))) == kExitOk);
  for (const char* f : {"model.ckpt", "timing.csv", "manifest.txt"}) CHECK(fs::exists(dir / "a" / f));
  const auto ck = nn::load_checkpoint(dir / "a" / "model.ckpt");
  CHECK(ck.meta.method == "gaussian-aug");
  CHECK(ck.meta.sigma == 0.25);
  CHECK(train::read_timing_csv(dir / "a" / "timing.csv").size() == 2);
  const auto m = manifest_of(dir / "a" / "manifest.txt");
  CHECK(*manifest_value(m, "command") == "train");
  CHECK(*manifest_value(m, "checkpoint_checksum") == io::hex64(nn::checkpoint_checksum(ck)));
  CHECK(manifest_value(m, "config_hash") != nullptr);
  CHECK(manifest_value(m, "wall_seconds") != nullptr);

  SUBCASE("deterministic rerun reproduces the checkpoint") {
    REQUIRE(crt_main(cat({"train", "--method", "gaussian-aug"}, quick_train(dir / "b"))) == kExitOk);
    CHECK(io::read_file(dir / "a" / "model.ckpt") == io::read_file(dir / "b" / "model.ckpt"));
  }
  SUBCASE("the manifest is a runnable config") {
    REQUIRE(crt_main({"train", "--config", (dir / "a" / "manifest.txt").string(), "--output-dir", (dir / "c").string()}) == kExitOk);
    CHECK(io::read_file(dir / "a" / "model.ckpt") == io::read_file(dir / "c" / "model.ckpt"));
  }
  SUBCASE("periodic checkpoints") {
    REQUIRE(crt_main(cat({"train", "--method", "gaussian-aug", "--checkpoint-every", "1"}, quick_train(dir / "p"))) ==
            kExitOk);
    CHECK(fs::exists(dir / "p" / "checkpoints" / "epoch-0001.ckpt"));
    CHECK(io::read_file(dir / "p" / "checkpoints" / "epoch-0002.ckpt") == io::read_file(dir / "p" / "model.ckpt"));
    CHECK(io::read_file(dir / "p" / "model.ckpt") == io::read_file(dir / "a" / "model.ckpt"));
  }
  SUBCASE("standard checkpoints record sigma zero") {
    REQUIRE(crt_main(cat({"train"}, quick_train(dir / "s"))) == kExitOk);
    CHECK(nn::load_checkpoint(dir / "s" / "model.ckpt").meta.sigma == 0.0);
  }
  SUBCASE("crt is not a train method") {
    CHECK(crt_main(cat({"train", "--method", "crt"}, quick_train(dir / "x"))) == kExitInput);
  }
  SUBCASE("bad flags") {
    CHECK(crt_main({"train", "--epochs", "many"}) == kExitInput);
    CHECK(crt_main({"train", "--no-such-flag"}) == kExitInput);
    CHECK(crt_main({}) == kExitInput);
  }
}

TEST_CASE("output directory precedence") {
  const auto dir = testing_tmp::fresh_dir("cli_env");
  io::write_file_atomic(dir / "cfg.ini", "[train]\nepochs = 1\n[dataset]\ntrain_per_class = 20\n[run]\noutput_dir = " +
                                             (dir / "from_file").string() + "\n");
  REQUIRE(crt_main({"train", "--config", (dir / "cfg.ini").string()}) == kExitOk);
  CHECK(fs::exists(dir / "from_file" / "model.ckpt"));
  ::setenv("CRT_OUTPUT_DIR", (dir / "from_env").c_str(), 1);
  REQUIRE(crt_main({"train", "--config", (dir / "cfg.ini").string()}) == kExitOk);
  CHECK(fs::exists(dir / "from_env" / "model.ckpt"));
  REQUIRE(crt_main({"train", "--config", (dir / "cfg.ini").string(), "--output-dir", (dir / "from_flag").string()}) == kExitOk);
  ::unsetenv("CRT_OUTPUT_DIR");
  CHECK(fs::exists(dir / "from_flag" / "model.ckpt"));
  CHECK(crt_main({"train", "--config", (dir / "missing.ini").string()}) == kExitInput);
}

TEST_CASE("transfer") {
  const auto dir = testing_tmp::fresh_dir("cli_transfer");
  REQUIRE(crt_main(cat({"train", "--method", "gaussian-aug"}, quick_train(dir / "teacher"))) == kExitOk);
  const std::string teacher = (dir / "teacher" / "model.ckpt").string();

  REQUIRE(crt_main(cat({"transfer", "--teacher", teacher, "--arch", "large-mlp"}, quick_train(dir / "s1"))) == kExitOk);
  const auto m = manifest_of(dir / "s1" / "manifest.txt");
  CHECK(manifest_value(m, "warning") == nullptr);
  CHECK(*manifest_value(m, "teacher_checksum") ==
        io::hex64(nn::checkpoint_checksum(nn::load_checkpoint(teacher))));
  const auto ck = nn::load_checkpoint(dir / "s1" / "model.ckpt");
  CHECK(ck.meta.chain_length == 1);
  CHECK(ck.meta.method == "crt");

  REQUIRE(crt_main(cat({"transfer", "--teacher", teacher, "--sigma", "0.5"}, quick_train(dir / "s2"))) == kExitOk);
  CHECK(manifest_value(manifest_of(dir / "s2" / "manifest.txt"), "warning") != nullptr);
  CHECK(nn::load_checkpoint(dir / "s2" / "model.ckpt").meta.sigma_mismatch());

  CHECK(crt_main(cat({"transfer", "--teacher", teacher, "--classes", "10"}, quick_train(dir / "s3"))) == kExitInput);
  CHECK(crt_main(cat({"transfer"}, quick_train(dir / "s4"))) == kExitInput);
  CHECK(crt_main(cat({"transfer", "--teacher", (dir / "nope.ckpt").string()}, quick_train(dir / "s5"))) == kExitInput);
  io::write_file_atomic(dir / "junk.ckpt", "not a checkpoint");
  CHECK(crt_main(cat({"transfer", "--teacher", (dir / "junk.ckpt").string()}, quick_train(dir / "s6"))) == kExitInput);

  SUBCASE("a one-link chain matches transfer byte for byte") {
    REQUIRE(crt_main(cat({"chain", "--teacher", teacher, "--links", "large-mlp"}, quick_train(dir / "c1"))) == kExitOk);
    CHECK(io::read_file(dir / "c1" / "link-1" / "model.ckpt") == io::read_file(dir / "s1" / "model.ckpt"));
  }
}

TEST_CASE("chain") {
  const auto dir = testing_tmp::fresh_dir("cli_chain");
  REQUIRE(crt_main(cat({"train", "--method", "gaussian-aug"}, quick_train(dir / "teacher"))) == kExitOk);
  const std::string teacher = (dir / "teacher" / "model.ckpt").string();
  REQUIRE(crt_main(cat({"chain", "--teacher", teacher, "--links", "small-mlp,large-mlp,small-cnn"}, quick_train(dir / "c"))) ==
          kExitOk);
  std::uint64_t parent = nn::checkpoint_checksum(nn::load_checkpoint(teacher));
  for (int i = 1; i <= 3; ++i) {
    const fs::path link = dir / "c" / ("link-" + std::to_string(i));
    const auto ck = nn::load_checkpoint(link / "model.ckpt");
    CHECK(ck.meta.chain_length == static_cast<std::uint32_t>(i));
    CHECK(*ck.meta.parent_checksum == parent);
    CHECK(*manifest_value(manifest_of(link / "manifest.txt"), "chain_length") == std::to_string(i));
    parent = nn::checkpoint_checksum(ck);
  }

  SUBCASE("a failing link leaves earlier links intact") {
    io::write_file_atomic(dir / "bad.ini", "[link]\narch = small-mlp\n[link]\narch = large-mlp\nlr = 1e300\nmomentum = 0\n");
    const int rc = crt_main(cat({"chain", "--config", (dir / "bad.ini").string(), "--teacher", teacher}, quick_train(dir / "f")));
    CHECK(rc == kExitRuntime);
    CHECK(fs::exists(dir / "f" / "link-1" / "model.ckpt"));
    CHECK_NOTHROW(nn::load_checkpoint(dir / "f" / "link-1" / "model.ckpt"));
    CHECK_FALSE(fs::exists(dir / "f" / "link-2" / "model.ckpt"));
  }
  SUBCASE("periodic checkpoints per link") {
    REQUIRE(crt_main(cat({"chain", "--teacher", teacher, "--links", "small-mlp,large-mlp", "--checkpoint-every", "2"},
                         quick_train(dir / "p"))) == kExitOk);
    for (int i = 1; i <= 2; ++i) {
      const fs::path link = dir / "p" / ("link-" + std::to_string(i));
      CHECK(io::read_file(link / "checkpoints" / "epoch-0002.ckpt") == io::read_file(link / "model.ckpt"));
    }
  }
  SUBCASE("no links") {
    CHECK(crt_main(cat({"chain", "--teacher", teacher}, quick_train(dir / "n"))) == kExitInput);
  }
}

TEST_CASE("certify") {
  const auto dir = testing_tmp::fresh_dir("cli_certify");
  REQUIRE(crt_main(cat({"train", "--method", "gaussian-aug"}, quick_train(dir / "m"))) == kExitOk);
  const std::string ck = (dir / "m" / "model.ckpt").string();
  const std::vector<std::string> fast = {"--n0", "10", "--n", "200", "--eval-batch", "64", "--deterministic"};

  REQUIRE(crt_main(cat(cat({"certify", "--checkpoint", ck, "--out", (dir / "a.csv").string()}, fast),
                       quick_train(dir / "m"))) == kExitOk);
  const std::string a = io::read_file(dir / "a.csv");
  CHECK(a.rfind("idx,label,predict,radius,correct,time_s\n", 0) == 0);
  CHECK(data_rows(dir / "a.csv") == 30);
  CHECK_FALSE(fs::exists(dir / "a.csv.partial"));
  const auto m = manifest_of(dir / "a.csv.manifest");
  CHECK(*manifest_value(m, "sigma") == "0.250000");
  CHECK(*manifest_value(m, "method") == "gaussian-aug");

  SUBCASE("reruns and worker counts give identical files") {
    REQUIRE(crt_main(cat(cat({"certify", "--checkpoint", ck, "--out", (dir / "b.csv").string(), "--workers", "3"}, fast),
                         quick_train(dir / "m"))) == kExitOk);
    CHECK(io::read_file(dir / "b.csv") == a);
  }
  SUBCASE("resume after an interruption") {
    const auto cut = a.find('\n', a.size() / 2) + 5;  // partway through a row
    io::write_file_atomic(dir / "c.csv.partial", a.substr(0, cut));
    REQUIRE(crt_main(cat(cat({"certify", "--checkpoint", ck, "--out", (dir / "c.csv").string()}, fast),
                         quick_train(dir / "m"))) == kExitOk);
    CHECK(io::read_file(dir / "c.csv") == a);
    CHECK(*manifest_value(manifest_of(dir / "c.csv.manifest"), "resumed_rows") != "0");
  }
  SUBCASE("stride") {
    REQUIRE(crt_main(cat(cat({"certify", "--checkpoint", ck, "--out", (dir / "s.csv").string(), "--stride", "7"}, fast),
                         quick_train(dir / "m"))) == kExitOk);
    CHECK(data_rows(dir / "s.csv") == 5);
  }
  SUBCASE("explicit sigma overrides the checkpoint and is flagged") {
    REQUIRE(crt_main(cat(cat({"certify", "--checkpoint", ck, "--out", (dir / "x.csv").string(), "--sigma", "0.5"}, fast),
                         quick_train(dir / "m"))) == kExitOk);
    const auto mx = manifest_of(dir / "x.csv.manifest");
    CHECK(*manifest_value(mx, "sigma") == "0.500000");
    CHECK(*manifest_value(mx, "sigma_mismatch") == "1");
  }
  SUBCASE("corrupt checkpoint") {
    std::string bytes = io::read_file(ck);
    bytes[bytes.size() / 2] ^= 1;
    io::write_file_atomic(dir / "bad.ckpt", bytes);
    CHECK(crt_main(cat(cat({"certify", "--checkpoint", (dir / "bad.ckpt").string()}, fast), quick_train(dir / "m"))) ==
          kExitInput);
  }
  SUBCASE("mismatched dataset") {
    CHECK(crt_main(cat(cat({"certify", "--checkpoint", ck, "--dim", "20"}, fast), quick_train(dir / "m"))) == kExitInput);
  }
}

TEST_CASE("certify stride over a large test set") {
  const auto dir = testing_tmp::fresh_dir("cli_stride");
  REQUIRE(crt_main({"train", "--classes", "2", "--dim", "4", "--arch", "linear", "--epochs", "1", "--train-per-class", "20",
                    "--output-dir", (dir / "m").string()}) == kExitOk);
  REQUIRE(crt_main({"certify", "--checkpoint", (dir / "m" / "model.ckpt").string(), "--classes", "2", "--dim", "4",
                    "--test-per-class", "5000", "--stride", "20", "--n0", "5", "--n", "20", "--out",
                    (dir / "r.csv").string()}) == kExitOk);
  CHECK(data_rows(dir / "r.csv") == 500);
}

TEST_CASE("report") {
  const auto dir = testing_tmp::fresh_dir("cli_report");
  const std::string header = std::string(smoothing::kRecordsHeader) + "\n";
  io::write_file_atomic(dir / "base.csv", header + "0,0,0,0.500000,1,0.1\n1,1,1,0.250000,1,0.1\n2,0,0,0.000000,1,0.1\n3,1,-1,0.000000,0,0.1\n");
  io::write_file_atomic(dir / "cand.csv", header + "0,0,0,0.600000,1,0.1\n1,1,0,0.200000,0,0.1\n");
  train::write_timing_csv(dir / "base.timing", std::vector<train::EpochTiming>{{0, 45.21, "baseline"}});
  train::write_timing_csv(dir / "cand.timing", std::vector<train::EpochTiming>{{0, 4.80, "crt"}});

  SUBCASE("single model has no comparison") {
    REQUIRE(crt_main({"report", "--records", (dir / "base.csv").string(), "--out", (dir / "r1").string()}) == kExitOk);
    const std::string txt = io::read_file(dir / "r1" / "report.txt");
    CHECK(txt.find("comparison") == std::string::npos);
    const auto reps = metrics::parse_structured(io::read_file(dir / "r1" / "report.ini"));
    REQUIRE(reps.size() == 1);
    CHECK(reps[0].acr == 0.1875);
  }
  SUBCASE("two models are compared") {
    REQUIRE(crt_main({"report", "--records", (dir / "base.csv").string() + "," + (dir / "cand.csv").string(), "--timing",
                      (dir / "base.timing").string() + "," + (dir / "cand.timing").string(), "--name", "baseline,crt",
                      "--out", (dir / "r2").string()}) == kExitOk);
    const std::string txt = io::read_file(dir / "r2" / "report.txt");
    CHECK(txt.find("9.42x") != std::string::npos);
    CHECK(parse_structured_size(dir / "r2" / "report.ini") == 2);
  }
  SUBCASE("cumulative savings over paired roles") {
    const std::vector<std::pair<double, double>> hours = {{45.21, 4.80}, {35.60, 3.46}, {15.39, 3.44}};
    std::string records;
    std::string timings;
    std::string roles;
    for (std::size_t i = 0; i < hours.size(); ++i) {
      const auto b = dir / ("b" + std::to_string(i) + ".timing");
      const auto c = dir / ("c" + std::to_string(i) + ".timing");
      train::write_timing_csv(b, std::vector<train::EpochTiming>{{0, hours[i].first, "baseline"}});
      train::write_timing_csv(c, std::vector<train::EpochTiming>{{0, hours[i].second, "crt"}});
      const std::string sep = i ? "," : "";
      records += sep + (dir / "base.csv").string() + "," + (dir / "cand.csv").string();
      timings += sep + b.string() + "," + c.string();
      roles += sep + "baseline,candidate";
    }
    REQUIRE(crt_main({"report", "--records", records, "--timing", timings, "--role", roles, "--out",
                      (dir / "r3").string()}) == kExitOk);
    CHECK(io::read_file(dir / "r3" / "report.txt").find("cumulative savings: 87.84%") != std::string::npos);
  }
  SUBCASE("teacher plus student timing adds up") {
    REQUIRE(crt_main({"report", "--records", (dir / "cand.csv").string(), "--timing",
                      (dir / "base.timing").string() + "+" + (dir / "cand.timing").string(), "--out",
                      (dir / "r4").string()}) == kExitOk);
    const auto reps = metrics::parse_structured(io::read_file(dir / "r4" / "report.ini"));
    CHECK(reps[0].timing.total_seconds == 45.21 + 4.80);
  }
  SUBCASE("malformed rows") {
    io::write_file_atomic(dir / "bad.csv", header + "0,0,0,0.5,1,0.1\n1,1,one,0.2,0,0.1\n");
    CHECK(crt_main({"report", "--records", (dir / "bad.csv").string(), "--out", (dir / "r5").string()}) == kExitInput);
    CHECK_FALSE(fs::exists(dir / "r5" / "report.txt"));
    CHECK(crt_main({"report", "--records", (dir / "missing.csv").string()}) == kExitInput);
  }
}
