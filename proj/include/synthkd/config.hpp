#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "synthkd/data.hpp"
#include "synthkd/diffusion.hpp"
#include "synthkd/distill.hpp"

namespace synthkd {

struct ScheduleConfig {
  int t_train = 400;
  double beta_min = 2.5e-4;
  double beta_max = 0.05;
};

struct DenoiserConfig {
  int base_width = 12;
  int emb_dim = 32;
  int epochs = 40;
  int batch = 64;
  double lr = 1e-3;
  double cond_dropout = 0.1;
  std::uint64_t seed = 11;
};

struct TeacherConfig {
  std::string tier = "M";
  int epochs = 24;
  double lr = 0.05;
  std::uint64_t seed = 21;
};

struct StudentConfig {
  std::string tier = "S";
};

struct GenSection {
  double s = 2.0;
  int steps = 100;
  int per_class = 1000;
  std::uint64_t seed = 41;
  int batch = 32;
};

struct SweepSection {
  std::vector<std::uint64_t> seeds{1, 2, 3};
  int per_class = 20;
  int steps = 50;          // generation steps for sweeps without a step grid
  int student_epochs = 8;
  std::vector<double> s_grid{1, 2, 4};
  std::vector<int> steps_grid{50, 100, 250};
  std::vector<double> tau_grid{1, 2, 5, 10, 20};
  std::vector<int> diversity_per_class{25, 50, 100, 200};
  std::vector<int> diversity_epochs{32, 16, 8, 4};
  std::vector<int> scale_per_class{10, 20, 40, 80, 160};
  std::vector<std::string> capacity_teacher_tiers{"S", "M", "L"};
  std::vector<std::string> capacity_student_tiers{"S", "M"};
};

// The JSON experiment configuration: every field optional, unknown keys
// rejected, digest stable under key reordering.
struct RunConfig {
  ToySpec toy;
  ScheduleConfig schedule;
  DenoiserConfig denoiser;
  TeacherConfig teacher;
  StudentConfig student;
  GenSection gen;
  DistillConfig distill;
  SweepSection sweep;

  static RunConfig from_json_text(const std::string& text);
  static RunConfig from_file(const std::string& path);

  void validate() const;
  std::string canonical_json() const;  // effective values, sorted keys
  std::string digest() const;

  NoiseSchedule make_noise_schedule() const {
    return make_schedule(schedule.t_train, schedule.beta_min, schedule.beta_max);
  }
};

}  // namespace synthkd
