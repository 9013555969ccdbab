#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "exvt/audit.hpp"
#include "exvt/io.hpp"

using namespace exvt;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code = -1;
  std::string out;
};

// Runs the CLI with stderr folded into stdout.
CliResult exvt_cli(const std::string& args) {
  const std::string cmd = std::string("\"") + EXVT_CLI + "\" " + args + " 2>&1";
  CliResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("exvt_cli_" + std::to_string(::getpid()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  // 7x5 noise image; odd size exercises the resize path.
  std::string write_image() const {
    std::string s = "P6\n7 5\n255\n";
    std::uint32_t state = 12345;
    for (int i = 0; i < 105; ++i) {
      state = state * 1664525u + 1013904223u;
      s.push_back(static_cast<char>(state >> 24));
    }
    std::ofstream(path("img.ppm"), std::ios::binary) << s;
    return path("img.ppm");
  }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, BuildIsDeterministicPerSeed) {
  ASSERT_EQ(exvt_cli("build --variant exmvit-928 --seed 5 --out " + path("a.exvt")).code, 0);
  ASSERT_EQ(exvt_cli("build --variant exmvit-928 --seed 5 --out " + path("b.exvt")).code, 0);
  ASSERT_EQ(exvt_cli("build --variant exmvit-928 --seed 6 --out " + path("c.exvt")).code, 0);
  const std::string a = slurp(path("a.exvt"));
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, slurp(path("b.exvt")));
  EXPECT_NE(a, slurp(path("c.exvt")));
}

TEST_F(Cli, UnknownVariantFailsAndListsValidNames) {
  const CliResult r = exvt_cli("build --variant exmvit-1000 --out " + path("x.exvt"));
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.out.find("exmvit-1000"), std::string::npos) << r.out;
  for (const auto& name : registered_variants()) EXPECT_NE(r.out.find(name), std::string::npos);
  EXPECT_FALSE(fs::exists(path("x.exvt")));
}

TEST_F(Cli, AuditTableShowsWidthAndPercent) {
  const CliResult r = exvt_cli("audit --variant exmvit-576");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("576 (90% of baseline)"), std::string::npos) << r.out;
}

TEST_F(Cli, AuditJsonBaselineTotal) {
  const CliResult r = exvt_cli("audit --variant mobilevit-s --format json");
  ASSERT_EQ(r.code, 0) << r.out;
  const auto doc = nlohmann::json::parse(r.out);
  EXPECT_NEAR(doc.at("strict_total").get<double>() / 5.579e6, 1.0, 0.015);
}

TEST_F(Cli, AuditJsonMatchesGolden) {
  const CliResult a = exvt_cli("audit --variant exmvit-928-tiny --format json");
  const CliResult b = exvt_cli("audit --variant exmvit-928-tiny --format json");
  ASSERT_EQ(a.code, 0) << a.out;
  EXPECT_EQ(a.out, b.out);
  EXPECT_EQ(a.out, slurp(std::string(EXVT_GOLDEN_DIR) + "/exmvit-928-tiny.audit.json"));
}

TEST_F(Cli, AuditOfBuiltWeightsMatchesVariantAudit) {
  ASSERT_EQ(exvt_cli("build --variant exmvit-704 --seed 2 --out " + path("m.exvt")).code, 0);
  const auto from_file = nlohmann::json::parse(
      exvt_cli("audit --weights " + path("m.exvt") + " --format json").out);
  const auto from_name =
      nlohmann::json::parse(exvt_cli("audit --variant exmvit-704 --format json").out);
  for (const char* key : {"strict_total", "paper_convention_total", "baseline_total",
                          "classifier_width", "flops_estimate"})
    EXPECT_EQ(from_file.at(key), from_name.at(key)) << key;
}

TEST_F(Cli, TraceBlockSidesAt256) {
  const CliResult r = exvt_cli("trace --variant exmvit-928 --input-size 256");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("block sides: 128 64 32 16 8"), std::string::npos) << r.out;
  EXPECT_NE(exvt_cli("trace --variant exmvit-928 --input-size 250").code, 0);
}

TEST_F(Cli, ShortTrainWritesCheckpointAndHistory) {
  const std::string out = path("t.exvt");
  const CliResult r = exvt_cli(
      "train --variant exmvit-928-tiny --epochs 1 --samples-per-class 4 --batch-size 8 --seed 1 "
      "--out " + out);
  ASSERT_EQ(r.code, 0) << r.out;
  const WeightsFile w = load_weights(out);
  EXPECT_EQ(w.metadata.config.name, "exmvit-928-tiny");
  EXPECT_NO_THROW(instantiate(w));

  std::istringstream csv(slurp(out + ".csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "iter,loss,acc,lr");
  int rows = 0;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 4);  // 32 samples / batch 8
}

TEST_F(Cli, GradCheckPasses) {
  const CliResult r = exvt_cli("grad-check --variant exmvit-928-tiny --samples 40 --seed 3");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("PASS"), std::string::npos) << r.out;
}

TEST_F(Cli, InferProbabilitiesAndDeterminism) {
  ASSERT_EQ(exvt_cli("build --variant exmvit-640-tiny --seed 4 --out " + path("m.exvt")).code, 0);
  const std::string img = write_image();
  const std::string args = "infer --weights " + path("m.exvt") + " --image " + img;
  const CliResult a = exvt_cli(args + " --top 8");
  const CliResult b = exvt_cli(args + " --top 8");
  ASSERT_EQ(a.code, 0) << a.out;
  EXPECT_EQ(a.out, b.out);

  std::istringstream lines(a.out);
  std::string rank, word;
  int cls;
  double p, sum = 0;
  int count = 0;
  while (lines >> rank >> word >> cls >> p) {
    sum += p;
    ++count;
  }
  EXPECT_EQ(count, 8);
  EXPECT_NEAR(sum, 1.0, 1e-4);

  const CliResult top5 = exvt_cli(args);
  EXPECT_EQ(std::count(top5.out.begin(), top5.out.end(), '\n'), 5);
}

TEST_F(Cli, InferRejectsMalformedImage) {
  ASSERT_EQ(exvt_cli("build --variant exmvit-640-tiny --out " + path("m.exvt")).code, 0);
  std::ofstream(path("bad.ppm"), std::ios::binary) << "P6\n7 x\n255\n";
  const CliResult r =
      exvt_cli("infer --weights " + path("m.exvt") + " --image " + path("bad.ppm"));
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.out.find("at byte 5"), std::string::npos) << r.out;
}

TEST_F(Cli, ExportFeaturesBlock4) {
  ASSERT_EQ(exvt_cli("build --variant exmvit-928 --seed 8 --out " + path("m.exvt")).code, 0);
  const std::string img = write_image();
  const CliResult r = exvt_cli("export-features --weights " + path("m.exvt") + " --image " +
                               img + " --block 4 --out " + path("f.raw"));
  ASSERT_EQ(r.code, 0) << r.out;

  const auto side = nlohmann::json::parse(slurp(path("f.raw.json")));
  EXPECT_EQ(side.at("shape"), nlohmann::json::parse("[1, 128, 16, 16]"));
  EXPECT_EQ(side.at("block"), 4);
  EXPECT_EQ(side.at("variant"), "exmvit-928");

  const ExMobileViT<float> model = instantiate(load_weights(path("m.exvt")));
  const Tensor input = image_to_input(read_pnm(img), 256);
  const Tensor expected = model.forward_collect(input, Mode::eval).features[3];
  const Tensor got = read_raw_f32(path("f.raw"), Shape{1, 128, 16, 16});
  EXPECT_EQ(std::memcmp(got.data().data(), expected.data().data(),
                        expected.numel() * sizeof(float)),
            0);
}

TEST_F(Cli, ExportClassifierInputWidth) {
  ASSERT_EQ(exvt_cli("build --variant exmvit-576-tiny --out " + path("m.exvt")).code, 0);
  const CliResult r = exvt_cli("export-features --weights " + path("m.exvt") + " --image " +
                               write_image() + " --export-classifier-input --out " + path("c.raw"));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto side = nlohmann::json::parse(slurp(path("c.raw.json")));
  EXPECT_EQ(side.at("shape"), nlohmann::json::parse("[1, 72]"));
}

TEST_F(Cli, ExportRejectsBlockOutOfRange) {
  ASSERT_EQ(exvt_cli("build --variant exmvit-640-tiny --out " + path("m.exvt")).code, 0);
  const CliResult r = exvt_cli("export-features --weights " + path("m.exvt") + " --image " +
                               write_image() + " --block 6 --out " + path("f.raw"));
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.out.find("valid blocks are 1..5"), std::string::npos) << r.out;
  EXPECT_FALSE(fs::exists(path("f.raw")));
}
