#include "synthkd/config.hpp"

#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "synthkd/digest.hpp"

using json = nlohmann::json;

namespace synthkd {

namespace {

void check_keys(const json& obj, const std::string& where,
                std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ConfigError(where + " must be a JSON object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, value] : obj.items()) {
    if (!ok.count(key)) {
      throw ConfigError("unknown key '" + where + "." + key + "' in config");
    }
  }
}

template <typename T>
void read(const json& obj, const char* key, T& out) {
  if (obj.contains(key)) {
    try {
      out = obj.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(std::string("config field '") + key + "' has the wrong type");
    }
  }
}

}  // namespace

RunConfig RunConfig::from_json_text(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  check_keys(root, "config",
             {"toy", "schedule", "denoiser", "teacher", "student", "gen", "distill", "sweep"});
  RunConfig cfg;

  if (root.contains("toy")) {
    const json& j = root["toy"];
    check_keys(j, "toy",
               {"num_classes", "image_size", "per_class_train", "per_class_test", "seed"});
    read(j, "num_classes", cfg.toy.num_classes);
    read(j, "image_size", cfg.toy.image_size);
    read(j, "per_class_train", cfg.toy.per_class_train);
    read(j, "per_class_test", cfg.toy.per_class_test);
    read(j, "seed", cfg.toy.seed);
  }
  if (root.contains("schedule")) {
    const json& j = root["schedule"];
    check_keys(j, "schedule", {"t_train", "beta_min", "beta_max"});
    read(j, "t_train", cfg.schedule.t_train);
    read(j, "beta_min", cfg.schedule.beta_min);
    read(j, "beta_max", cfg.schedule.beta_max);
  }
  if (root.contains("denoiser")) {
    const json& j = root["denoiser"];
    check_keys(j, "denoiser",
               {"base_width", "emb_dim", "epochs", "batch", "lr", "cond_dropout", "seed"});
    read(j, "base_width", cfg.denoiser.base_width);
    read(j, "emb_dim", cfg.denoiser.emb_dim);
    read(j, "epochs", cfg.denoiser.epochs);
    read(j, "batch", cfg.denoiser.batch);
    read(j, "lr", cfg.denoiser.lr);
    read(j, "cond_dropout", cfg.denoiser.cond_dropout);
    read(j, "seed", cfg.denoiser.seed);
  }
  if (root.contains("teacher")) {
    const json& j = root["teacher"];
    check_keys(j, "teacher", {"tier", "epochs", "lr", "seed"});
    read(j, "tier", cfg.teacher.tier);
    read(j, "epochs", cfg.teacher.epochs);
    read(j, "lr", cfg.teacher.lr);
    read(j, "seed", cfg.teacher.seed);
  }
  if (root.contains("student")) {
    const json& j = root["student"];
    check_keys(j, "student", {"tier"});
    read(j, "tier", cfg.student.tier);
  }
  if (root.contains("gen")) {
    const json& j = root["gen"];
    check_keys(j, "gen", {"s", "steps", "per_class", "seed", "batch"});
    read(j, "s", cfg.gen.s);
    read(j, "steps", cfg.gen.steps);
    read(j, "per_class", cfg.gen.per_class);
    read(j, "seed", cfg.gen.seed);
    read(j, "batch", cfg.gen.batch);
  }
  if (root.contains("distill")) {
    const json& j = root["distill"];
    check_keys(j, "distill",
               {"tau", "soft_weight", "hard_weight", "epochs", "batch", "lr", "momentum",
                "weight_decay", "milestones", "seed"});
    read(j, "tau", cfg.distill.tau);
    read(j, "soft_weight", cfg.distill.soft_weight);
    read(j, "hard_weight", cfg.distill.hard_weight);
    read(j, "epochs", cfg.distill.epochs);
    read(j, "batch", cfg.distill.batch);
    read(j, "lr", cfg.distill.lr);
    read(j, "momentum", cfg.distill.momentum);
    read(j, "weight_decay", cfg.distill.weight_decay);
    read(j, "milestones", cfg.distill.milestones);
    read(j, "seed", cfg.distill.seed);
  }
  if (root.contains("sweep")) {
    const json& j = root["sweep"];
    check_keys(j, "sweep",
               {"seeds", "per_class", "steps", "student_epochs", "s_grid", "steps_grid",
                "tau_grid", "diversity_per_class", "diversity_epochs", "scale_per_class",
                "capacity_teacher_tiers", "capacity_student_tiers"});
    read(j, "seeds", cfg.sweep.seeds);
    read(j, "per_class", cfg.sweep.per_class);
    read(j, "steps", cfg.sweep.steps);
    read(j, "student_epochs", cfg.sweep.student_epochs);
    read(j, "s_grid", cfg.sweep.s_grid);
    read(j, "steps_grid", cfg.sweep.steps_grid);
    read(j, "tau_grid", cfg.sweep.tau_grid);
    read(j, "diversity_per_class", cfg.sweep.diversity_per_class);
    read(j, "diversity_epochs", cfg.sweep.diversity_epochs);
    read(j, "scale_per_class", cfg.sweep.scale_per_class);
    read(j, "capacity_teacher_tiers", cfg.sweep.capacity_teacher_tiers);
    read(j, "capacity_student_tiers", cfg.sweep.capacity_student_tiers);
  }
  cfg.validate();
  return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return from_json_text(text);
}

void RunConfig::validate() const {
  if (toy.num_classes < 2) throw ConfigError("toy.num_classes must be at least 2");
  if (toy.image_size != kImageSize) throw ConfigError("toy.image_size must be 16");
  if (toy.per_class_train < 1 || toy.per_class_test < 1) {
    throw ConfigError("toy per-class counts must be positive");
  }
  if (schedule.t_train < 2) throw ConfigError("schedule.t_train must be at least 2");
  if (!(0.0 < schedule.beta_min && schedule.beta_min < schedule.beta_max &&
        schedule.beta_max < 1.0)) {
    throw ConfigError("schedule requires 0 < beta_min < beta_max < 1");
  }
  if (denoiser.base_width < 2) throw ConfigError("denoiser.base_width must be at least 2");
  if (denoiser.emb_dim < 4 || denoiser.emb_dim % 2 != 0) {
    throw ConfigError("denoiser.emb_dim must be an even number >= 4");
  }
  if (denoiser.epochs < 0 || denoiser.batch < 1 || denoiser.lr <= 0.0) {
    throw ConfigError("denoiser training parameters out of range");
  }
  if (denoiser.cond_dropout < 0.0 || denoiser.cond_dropout >= 1.0) {
    throw ConfigError("denoiser.cond_dropout must be in [0,1)");
  }
  tier_from_string(teacher.tier);
  tier_from_string(student.tier);
  if (teacher.epochs < 0 || teacher.lr <= 0.0) {
    throw ConfigError("teacher training parameters out of range");
  }
  if (gen.s < 1.0) throw ConfigError("gen.s must be >= 1 (s=1 disables guidance)");
  if (gen.steps < 1 || gen.steps > schedule.t_train) {
    throw ConfigError("gen.steps must be in [1, schedule.t_train]");
  }
  if (gen.per_class < 1 || gen.batch < 1) throw ConfigError("gen counts must be positive");
  distill.validate();
  for (double m : distill.milestones) {
    if (!(m > 0.0 && m <= 1.0)) throw ConfigError("distill.milestones must lie in (0,1]");
  }
  if (sweep.seeds.empty()) throw ConfigError("sweep.seeds must not be empty");
  if (sweep.per_class < 1 || sweep.student_epochs < 1 || sweep.steps < 1) {
    throw ConfigError("sweep counts must be positive");
  }
  // steps-vs-schedule bounds are checked when a sweep actually runs, so a
  // short custom schedule does not invalidate the unused sweep defaults
  for (int st : sweep.steps_grid) {
    if (st < 1) throw ConfigError("sweep.steps_grid entries must be positive");
  }
  for (double s : sweep.s_grid) {
    if (s < 1.0) throw ConfigError("sweep.s_grid entries must be >= 1");
  }
  for (double tau : sweep.tau_grid) {
    if (!(tau > 0.0)) throw ConfigError("sweep.tau_grid entries must be positive");
  }
  if (sweep.diversity_per_class.size() != sweep.diversity_epochs.size() ||
      sweep.diversity_per_class.empty()) {
    throw ConfigError("sweep.diversity_per_class and diversity_epochs must pair up");
  }
  const long iters0 = static_cast<long>(sweep.diversity_per_class[0]) * sweep.diversity_epochs[0];
  for (std::size_t i = 0; i < sweep.diversity_per_class.size(); ++i) {
    const long iters =
        static_cast<long>(sweep.diversity_per_class[i]) * sweep.diversity_epochs[i];
    if (iters != iters0) {
      throw ConfigError("diversity sweep must hold per_class x epochs constant");
    }
  }
  for (const std::string& t : sweep.capacity_teacher_tiers) tier_from_string(t);
  for (const std::string& t : sweep.capacity_student_tiers) tier_from_string(t);
}

std::string RunConfig::canonical_json() const {
  json j;
  j["toy"] = {{"num_classes", toy.num_classes},
              {"image_size", toy.image_size},
              {"per_class_train", toy.per_class_train},
              {"per_class_test", toy.per_class_test},
              {"seed", toy.seed}};
  j["schedule"] = {{"t_train", schedule.t_train},
                   {"beta_min", schedule.beta_min},
                   {"beta_max", schedule.beta_max}};
  j["denoiser"] = {{"base_width", denoiser.base_width}, {"emb_dim", denoiser.emb_dim},
                   {"epochs", denoiser.epochs},         {"batch", denoiser.batch},
                   {"lr", denoiser.lr},                 {"cond_dropout", denoiser.cond_dropout},
                   {"seed", denoiser.seed}};
  j["teacher"] = {{"tier", teacher.tier},
                  {"epochs", teacher.epochs},
                  {"lr", teacher.lr},
                  {"seed", teacher.seed}};
  j["student"] = {{"tier", student.tier}};
  j["gen"] = {{"s", gen.s},
              {"steps", gen.steps},
              {"per_class", gen.per_class},
              {"seed", gen.seed},
              {"batch", gen.batch}};
  j["distill"] = {{"tau", distill.tau},
                  {"soft_weight", distill.soft_weight},
                  {"hard_weight", distill.hard_weight},
                  {"epochs", distill.epochs},
                  {"batch", distill.batch},
                  {"lr", distill.lr},
                  {"momentum", distill.momentum},
                  {"weight_decay", distill.weight_decay},
                  {"milestones", distill.milestones},
                  {"seed", distill.seed}};
  j["sweep"] = {{"seeds", sweep.seeds},
                {"per_class", sweep.per_class},
                {"steps", sweep.steps},
                {"student_epochs", sweep.student_epochs},
                {"s_grid", sweep.s_grid},
                {"steps_grid", sweep.steps_grid},
                {"tau_grid", sweep.tau_grid},
                {"diversity_per_class", sweep.diversity_per_class},
                {"diversity_epochs", sweep.diversity_epochs},
                {"scale_per_class", sweep.scale_per_class},
                {"capacity_teacher_tiers", sweep.capacity_teacher_tiers},
                {"capacity_student_tiers", sweep.capacity_student_tiers}};
  // nlohmann::json objects iterate in sorted key order, so dump() is already
  // canonical regardless of insertion or input order.
  return j.dump();
}

std::string RunConfig::digest() const { return sha256_hex(canonical_json()); }

}  // namespace synthkd
