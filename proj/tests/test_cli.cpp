#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <sys/wait.h>

#include "synthkd/data.hpp"
#include "synthkd/rng.hpp"

using namespace synthkd;
namespace fs = std::filesystem;

namespace {

std::string g_cli_path;

int run_cli(const std::string& args) {
  const std::string cmd = "\"" + g_cli_path + "\" " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  REQUIRE(status != -1);
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::pair<int, std::string> run_cli_capture(const std::string& args, const fs::path& dir) {
  const fs::path log = dir / "cli_capture.txt";
  const std::string cmd =
      "\"" + g_cli_path + "\" " + args + " >\"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  REQUIRE(status != -1);
  std::ifstream in(log);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, text};
}

std::string line_value(const std::string& text, const std::string& key) {
  const std::size_t at = text.find(key + " ");
  REQUIRE(at != std::string::npos);
  const std::size_t start = at + key.size() + 1;
  const std::size_t end = text.find('\n', start);
  return text.substr(start, end - start);
}

struct CliFixture {
  fs::path dir;
  std::string config_path;

  CliFixture() {
    static int counter = 0;
    dir = fs::temp_directory_path() / ("synthkd_cli_test_" + std::to_string(++counter));
    fs::remove_all(dir);
    fs::create_directories(dir);
    config_path = (dir / "config.json").string();
    std::ofstream cfg(config_path);
    cfg << R"({
      "toy": {"num_classes": 3, "per_class_train": 10, "per_class_test": 4, "seed": 5},
      "schedule": {"t_train": 8, "beta_min": 0.01, "beta_max": 0.1},
      "denoiser": {"base_width": 4, "emb_dim": 8, "epochs": 1, "batch": 8},
      "teacher": {"tier": "S", "epochs": 1},
      "gen": {"s": 2, "steps": 4, "per_class": 2, "batch": 4},
      "distill": {"epochs": 1, "batch": 8}
    })";
  }
};

}  // namespace

TEST_CASE("cli exit codes and artifact flow") {
  REQUIRE_FALSE(g_cli_path.empty());
  CliFixture fx;

  SUBCASE("no subcommand is a usage error (2)") { CHECK(run_cli("") == 2); }
  SUBCASE("unknown flag is a usage error (2)") {
    CHECK(run_cli("train-diffusion --bogus x") == 2);
  }
  SUBCASE("missing config file exits 2") {
    CHECK(run_cli("train-diffusion --config /nonexistent.json --out " +
                  (fx.dir / "d.ckpt").string()) == 2);
  }
  SUBCASE("missing checkpoint exits 3") {
    CHECK(run_cli("gen-data --config " + fx.config_path + " --checkpoint /nonexistent.ckpt" +
                  " --out " + (fx.dir / "x.skds").string()) == 3);
  }
  SUBCASE("bad sweep kind exits 2") {
    CHECK(run_cli("sweep --kind bogus --config " + fx.config_path +
                  " --denoiser /none.ckpt --out " + (fx.dir / "sw").string()) == 2);
  }
  SUBCASE("full artifact flow: train, generate, teach, distill, eval") {
    const std::string dn = (fx.dir / "denoiser.ckpt").string();
    const std::string skds = (fx.dir / "set.skds").string();
    const std::string teacher = (fx.dir / "teacher.ckpt").string();
    const std::string student = (fx.dir / "student.ckpt").string();

    CHECK(run_cli("train-diffusion --config " + fx.config_path + " --out " + dn) == 0);
    CHECK(fs::exists(dn));
    CHECK(fs::exists(dn + ".manifest.json"));
    CHECK(fs::exists(dn + ".loss.csv"));

    CHECK(run_cli("gen-data --config " + fx.config_path + " --checkpoint " + dn + " --out " +
                  skds) == 0);
    CHECK(fs::exists(skds));
    CHECK(fs::exists(skds + ".meta.json"));
    SyntheticDataset ds = load_skds(skds);
    CHECK(ds.count() == 6);  // 3 classes x 2 per class

    SUBCASE("repeated gen-data is byte-identical") {
      const std::string skds2 = (fx.dir / "set2.skds").string();
      CHECK(run_cli("gen-data --config " + fx.config_path + " --checkpoint " + dn + " --out " +
                    skds2) == 0);
      std::ifstream a(skds, std::ios::binary), b(skds2, std::ios::binary);
      std::string ba((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
      std::string bb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
      CHECK(ba == bb);
    }

    CHECK(run_cli("train-teacher --config " + fx.config_path + " --out " + teacher) == 0);
    CHECK(run_cli("distill --config " + fx.config_path + " --teacher " + teacher +
                  " --synthetic " + skds + " --out " + student) == 0);
    CHECK(fs::exists(student));

    SUBCASE("distill with both weights zero is rejected (2)") {
      CHECK(run_cli("distill --config " + fx.config_path + " --teacher " + teacher +
                    " --synthetic " + skds + " --soft 0 --hard 0 --out " +
                    (fx.dir / "s2.ckpt").string()) == 2);
    }
    SUBCASE("eval reproduces the recorded training-time accuracy exactly") {
      auto [code, text] = run_cli_capture(
          "eval --config " + fx.config_path + " --model " + teacher + " --dataset toy-test",
          fx.dir);
      CHECK(code == 0);
      // both numbers print at precision 17: equal strings means equal doubles
      CHECK(line_value(text, "accuracy") == line_value(text, "recorded_training_accuracy"));
      CHECK(run_cli("eval --config " + fx.config_path + " --model " + teacher +
                    " --dataset /nonexistent.skds") == 3);
    }
  }
}

int main(int argc, char** argv) {
  doctest::Context context;
  if (argc > 1 && argv[argc - 1][0] != '-') {
    g_cli_path = argv[argc - 1];
    --argc;
  }
  context.applyCommandLine(argc, argv);
  return context.run();
}
