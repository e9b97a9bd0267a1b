#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "revode/cli.hpp"
#include "support/synthetic_data.hpp"

namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

struct CaptureStdout {
  std::stringstream buffer;
  std::streambuf* saved = nullptr;
  CaptureStdout() { saved = std::cout.rdbuf(buffer.rdbuf()); }
  ~CaptureStdout() { std::cout.rdbuf(saved); }
  std::string str() const { return buffer.str(); }
};

int run(std::initializer_list<std::string> args) {
  return revode::cli::run(std::vector<std::string>(args));
}

std::size_t count_lines(const fs::path& p) {
  std::ifstream is(p);
  std::size_t n = 0;
  std::string line;
  while (std::getline(is, line)) ++n;
  return n;
}

}  // namespace

TEST_CASE("usage errors exit with code 2") {
  CHECK(run({}) == 2);
  CHECK(run({"frobnicate"}) == 2);
  CHECK(run({"verify", "--bogus-flag"}) == 2);
  CHECK(run({"train", "--arch", "wavelet"}) == 2);
}

TEST_CASE("verify subcommand passes and exits 0") {
  CaptureStdout cap;
  CHECK(run({"verify", "--suite", "spectrum", "--trials", "5"}) == 0);
  CHECK(cap.str().find("all within tolerance") != std::string::npos);
}

TEST_CASE("analyze writes the roots grid CSV and a manifest") {
  TempDir out("revode_cli_analyze");
  CaptureStdout cap;
  CHECK(run({"analyze", "--roots-grid", "-2:2:-2:2:41", "--out", out.path.string()}) == 0);
  const auto csv = out.path / "roots_grid.csv";
  REQUIRE(fs::exists(csv));
  CHECK(count_lines(csv) == 1682);  // header + 41*41 rows
  REQUIRE(fs::exists(out.path / "manifest.json"));
  nlohmann::json manifest;
  std::ifstream(out.path / "manifest.json") >> manifest;
  CHECK(manifest.at("command") == "analyze");
  CHECK(manifest.contains("config_hash"));
  CHECK(manifest.at("version") == revode::cli::kVersion);

  // max|xi| column: spot-check that the stable region is flagged
  std::ifstream is(csv);
  std::string line;
  std::getline(is, line);
  CHECK(line == "alpha,beta,a,max_abs_xi,stable");
}

TEST_CASE("analyze lyapunov and spectrum records") {
  CaptureStdout cap;
  CHECK(run({"analyze", "--lyapunov", "--spectrum-trials", "5", "--size", "8"}) == 0);
  const std::string text = cap.str();
  CHECK(text.find("lyapunov system=linear c=-0.5") != std::string::npos);
  CHECK(text.find("lyapunov system=hamiltonian-chain") != std::string::npos);
  CHECK(text.find("spectrum kind=hamiltonian") != std::string::npos);
  CHECK(text.find("spectrum kind=midpoint") != std::string::npos);
}

TEST_CASE("bench-mem reports both modes") {
  CaptureStdout cap;
  CHECK(run({"bench-mem", "--arch", "hamiltonian", "--units", "2,2,2", "--channels", "8,16,32",
             "--batch", "1"}) == 0);
  const std::string text = cap.str();
  CHECK(text.find("mode=reversible stored_tensors=4") != std::string::npos);
  CHECK(text.find("matches analytic") != std::string::npos);
  CHECK(text.find("scalar ratio") != std::string::npos);
}

TEST_CASE("inspect-data validates synthetic CIFAR layout") {
  TempDir data("revode_cli_inspect");
  synth::write_cifar10_dir(data.path.string(), 30, 10, 3);
  {
    CaptureStdout cap;
    CHECK(run({"inspect-data", "--data", data.path.string()}) == 0);
    CHECK(cap.str().find("split=train images=150 classes=10") != std::string::npos);
    CHECK(cap.str().find("split=test images=10") != std::string::npos);
  }
  TempDir empty("revode_cli_inspect_empty");
  CHECK(run({"inspect-data", "--data", empty.path.string()}) == 1);
}

TEST_CASE("train end to end on a synthetic dataset") {
  TempDir data("revode_cli_train_data");
  TempDir out("revode_cli_train_out");
  synth::write_cifar10_dir(data.path.string(), 20, 10, 7);

  CaptureStdout cap;
  CHECK(run({"train", "--arch", "hamiltonian", "--units", "1,1", "--channels", "4,8", "--h",
             "0.1", "--data", data.path.string(), "--out", out.path.string(), "--epochs", "2",
             "--batch", "25", "--lr", "0.01", "--seed", "3", "--eval-every", "1"}) == 0);
  const std::string text = cap.str();
  CHECK(text.find("revode train | arch: hamiltonian") != std::string::npos);
  CHECK(fs::exists(out.path / "model.revode"));
  CHECK(fs::exists(out.path / "history.csv"));
  CHECK(fs::exists(out.path / "manifest.json"));
  CHECK(count_lines(out.path / "history.csv") == 3);  // header + 2 epochs

  // reload the checkpoint
  auto net = revode::load_model<float>((out.path / "model.revode").string());
  CHECK(net.arch.units.size() == 2);
}

TEST_CASE("train banner reports the layer-count formula") {
  TempDir data("revode_cli_banner_data");
  TempDir out("revode_cli_banner_out");
  synth::write_cifar10_dir(data.path.string(), 10, 5, 9);
  CaptureStdout cap;
  CHECK(run({"train", "--arch", "hamiltonian", "--units", "6,6,6", "--channels", "32,64,112",
             "--data", data.path.string(), "--out", out.path.string(), "--epochs", "0"}) == 0);
  CHECK(cap.str().find("layers: 74") != std::string::npos);
}

TEST_CASE("train honors a JSON config file with flag overrides") {
  TempDir data("revode_cli_cfg_data");
  TempDir out("revode_cli_cfg_out");
  synth::write_cifar10_dir(data.path.string(), 20, 10, 11);
  const auto cfg_path = out.path / "run.json";
  {
    nlohmann::json cfg{
        {"arch",
         {{"kind", "midpoint"},
          {"units", nlohmann::json::array({{{"blocks", 1}, {"channels", 4}},
                                           {{"blocks", 1}, {"channels", 8}}})},
          {"h", 0.1}}},
        {"train", {{"epochs", 5}, {"batch", 25}, {"lr", 0.01}, {"seed", 4}}}};
    std::ofstream os(cfg_path);
    os << cfg.dump(2);
  }
  CaptureStdout cap;
  CHECK(run({"train", "--config", cfg_path.string(), "--data", data.path.string(), "--out",
             out.path.string(), "--epochs", "1"}) == 0);
  CHECK(cap.str().find("arch: midpoint") != std::string::npos);
  CHECK(count_lines(out.path / "history.csv") == 2);  // flag overrode epochs to 1
}
