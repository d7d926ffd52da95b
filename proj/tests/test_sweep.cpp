#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <string>

#include "synthkd/config.hpp"
#include "synthkd/rng.hpp"
#include "synthkd/sweep.hpp"

using namespace synthkd;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"({
  "toy": {"num_classes": 3, "per_class_train": 20, "per_class_test": 6, "seed": 5},
  "schedule": {"t_train": 8, "beta_min": 0.01, "beta_max": 0.1},
  "denoiser": {"base_width": 4, "emb_dim": 8},
  "teacher": {"tier": "S", "epochs": 1},
  "gen": {"s": 2, "steps": 4, "per_class": 2, "batch": 4},
  "distill": {"epochs": 1, "batch": 8},
  "sweep": {
    "seeds": [1],
    "per_class": 2,
    "steps": 4,
    "student_epochs": 1,
    "s_grid": [1, 2],
    "steps_grid": [4],
    "tau_grid": [10],
    "diversity_per_class": [1, 2],
    "diversity_epochs": [2, 1],
    "scale_per_class": [1, 2],
    "capacity_teacher_tiers": ["S"],
    "capacity_student_tiers": ["S"]
  }
})";

struct SweepFixture {
  fs::path dir;
  RunConfig cfg;
  std::string denoiser_path;
  std::string teacher_path;

  SweepFixture() : cfg(RunConfig::from_json_text(kTinyConfig)) {
    static int counter = 0;
    dir = fs::temp_directory_path() / ("synthkd_sweep_test_" + std::to_string(++counter));
    fs::remove_all(dir);  // stale state from earlier runs must not leak in
    fs::create_directories(dir);
    // a perturbed untrained denoiser is enough to exercise the machinery
    Denoiser model(3, 4, 8, 5);
    Rng rng(9);
    for (auto& [name, p] : model.parameters()) {
      auto d = p.data_mut();
      for (double& v : d) v += 0.05 * rng.normal();
    }
    model.set_t_max(8);
    round_params_to_f32(model.parameters());
    denoiser_path = (dir / "denoiser.ckpt").string();
    save_denoiser(model, denoiser_path);

    ToyPair toy = generate_toy(cfg.toy);
    Classifier teacher(Tier::S, 3, 7);
    TeacherTrainResult r = train_teacher(teacher, toy.train, toy.test, 1, 0.05, 7);
    teacher_path = (dir / "teacher.ckpt").string();
    save_classifier(teacher, teacher_path, r.final_accuracy);
  }
};

int count_csv_rows(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  int rows = 0;
  for (std::size_t at = 0; (at = text.find("\r\n", at)) != std::string::npos; at += 2) ++rows;
  return rows - 1;  // minus header
}

}  // namespace

TEST_CASE("default sweep grids match the documented shapes") {
  RunConfig cfg = RunConfig::from_json_text("{}");
  CHECK(cfg.sweep.s_grid.size() * cfg.sweep.steps_grid.size() == 9);
  bool has_default_tau = false;
  for (double tau : cfg.sweep.tau_grid) has_default_tau |= tau == 10.0;
  CHECK(has_default_tau);
  CHECK(cfg.sweep.seeds.size() == 3);
}

TEST_CASE("fidelity sweep: grid rows, resume, marker corruption") {
  SweepFixture fx;
  const std::string out = (fx.dir / "out").string();

  SweepReport first =
      run_sweep(fx.cfg, SweepKind::Fidelity, fx.denoiser_path, fx.teacher_path, out, 1);
  CHECK(first.cells_total == 2);  // 2 s-values x 1 step x 1 seed
  CHECK(first.cells_run == 2);
  CHECK(first.cells_skipped == 0);
  CHECK(count_csv_rows(first.summary_csv) == 2);

  const fs::path cell_csv = fs::path(out) / "fidelity" / "s1_T4_seed1" / "cell.csv";
  REQUIRE(fs::exists(cell_csv));
  const auto mtime_before = fs::last_write_time(cell_csv);

  SUBCASE("resume skips completed cells and keeps files untouched") {
    SweepReport second =
        run_sweep(fx.cfg, SweepKind::Fidelity, fx.denoiser_path, fx.teacher_path, out, 1);
    CHECK(second.cells_run == 0);
    CHECK(second.cells_skipped == 2);
    CHECK(fs::last_write_time(cell_csv) == mtime_before);
    CHECK(count_csv_rows(second.summary_csv) == 2);
  }
  SUBCASE("a corrupted marker forces exactly that cell to rerun") {
    std::ofstream bad(fs::path(out) / "fidelity" / "s1_T4_seed1" / "done.json",
                      std::ios::trunc);
    bad << "{corrupted";
    bad.close();
    SweepReport second =
        run_sweep(fx.cfg, SweepKind::Fidelity, fx.denoiser_path, fx.teacher_path, out, 1);
    CHECK(second.cells_run == 1);
    CHECK(second.cells_skipped == 1);
  }
  SUBCASE("a config change invalidates markers") {
    RunConfig changed = fx.cfg;
    changed.distill.tau = 5.0;
    SweepReport second =
        run_sweep(changed, SweepKind::Fidelity, fx.denoiser_path, fx.teacher_path, out, 1);
    CHECK(second.cells_run == 2);
  }
}

TEST_CASE("labels sweep runs exactly the three supervision modes") {
  SweepFixture fx;
  const std::string out = (fx.dir / "out").string();
  SweepReport r = run_sweep(fx.cfg, SweepKind::Labels, fx.denoiser_path, fx.teacher_path, out, 1);
  CHECK(count_csv_rows(r.summary_csv) == 3);
  std::ifstream in(r.summary_csv, std::ios::binary);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CHECK(text.find("soft") != std::string::npos);
  CHECK(text.find("hard") != std::string::npos);
  CHECK(text.find("both") != std::string::npos);
}

TEST_CASE("temperature sweep includes the default tau point") {
  SweepFixture fx;
  const std::string out = (fx.dir / "out").string();
  SweepReport r =
      run_sweep(fx.cfg, SweepKind::Temperature, fx.denoiser_path, fx.teacher_path, out, 1);
  CHECK(count_csv_rows(r.summary_csv) == 1);  // tiny grid: just tau = 10
  std::ifstream in(r.summary_csv, std::ios::binary);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CHECK(text.find("10") != std::string::npos);
}

TEST_CASE("diversity sweep holds total iterations fixed and capacity trains its ladder") {
  SweepFixture fx;
  const std::string out = (fx.dir / "out").string();
  SweepReport d =
      run_sweep(fx.cfg, SweepKind::Diversity, fx.denoiser_path, fx.teacher_path, out, 1);
  CHECK(count_csv_rows(d.summary_csv) == 2);

  SweepReport c = run_sweep(fx.cfg, SweepKind::Capacity, fx.denoiser_path, "", out, 1);
  CHECK(count_csv_rows(c.summary_csv) == 1);  // 1 teacher tier x 1 student tier
  CHECK(fs::exists(fs::path(out) / "capacity" / "teacher_S" / "teacher.ckpt"));
}

TEST_CASE("sweep without a teacher is rejected for teacher-dependent kinds") {
  SweepFixture fx;
  CHECK_THROWS_AS(run_sweep(fx.cfg, SweepKind::Fidelity, fx.denoiser_path, "",
                            (fx.dir / "o2").string(), 1),
                  ConfigError);
}

TEST_CASE("sweep kind parsing") {
  CHECK(sweep_kind_from_string("fidelity") == SweepKind::Fidelity);
  CHECK(sweep_kind_from_string("scale") == SweepKind::Scale);
  CHECK_THROWS_AS(sweep_kind_from_string("bogus"), ConfigError);
}
