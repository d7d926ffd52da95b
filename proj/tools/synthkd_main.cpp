#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "synthkd/config.hpp"
#include "synthkd/csv.hpp"
#include "synthkd/metrics.hpp"
#include "synthkd/sweep.hpp"

using namespace synthkd;

namespace {

int env_workers() {
  const char* v = std::getenv("SYNTHKD_THREADS");
  if (!v) return 1;
  const int n = std::atoi(v);
  return n >= 1 ? n : 1;
}

void write_trace_csv(const std::string& path, const std::vector<EpochRow>& trace,
                     std::uint64_t seed, const std::string& config_digest) {
  if (std::filesystem::exists(path)) std::filesystem::remove(path);
  CsvWriter csv(path, {"epoch", "split", "loss", "accuracy", "seed", "config_digest"});
  for (const EpochRow& row : trace) {
    csv.row({CsvWriter::field(static_cast<long long>(row.epoch)), row.split,
             CsvWriter::field(row.loss), CsvWriter::field(row.accuracy),
             CsvWriter::field(static_cast<long long>(seed)), config_digest});
  }
}

struct CommonArgs {
  std::string config_path;
};

RunConfig load_config(const CommonArgs& args) { return RunConfig::from_file(args.config_path); }

int run_train_diffusion(const CommonArgs& common, const std::string& out) {
  RunConfig cfg = load_config(common);
  const ToyPair toy = generate_toy(cfg.toy);
  const NoiseSchedule schedule = cfg.make_noise_schedule();
  Denoiser model(cfg.toy.num_classes, cfg.denoiser.base_width, cfg.denoiser.emb_dim,
                 cfg.denoiser.seed);
  DenoiserTrainConfig tc;
  tc.epochs = cfg.denoiser.epochs;
  tc.batch = cfg.denoiser.batch;
  tc.lr = cfg.denoiser.lr;
  tc.cond_dropout = cfg.denoiser.cond_dropout;
  tc.seed = cfg.denoiser.seed;
  std::cout << "training denoiser: " << tc.epochs << " epochs on " << toy.train.count()
            << " images\n";
  DenoiserTrainResult r = train_denoiser(model, toy.train, schedule, tc);
  save_denoiser(model, out);
  std::vector<EpochRow> trace;
  for (std::size_t e = 0; e < r.epoch_loss.size(); ++e) {
    trace.push_back({static_cast<int>(e), "train", r.epoch_loss[e],
                     std::numeric_limits<double>::quiet_NaN()});
  }
  write_trace_csv(out + ".loss.csv", trace, tc.seed, cfg.digest());
  std::cout << "probe loss " << r.initial_eval << " -> " << r.final_eval << "\n"
            << "checkpoint " << out << " (digest " << params_digest(model.parameters())
            << ")\n";
  return 0;
}

int run_gen_data(const CommonArgs& common, const std::string& checkpoint, double s, int steps,
                 int per_class, long long seed, const std::string& out) {
  RunConfig cfg = load_config(common);
  DenoiserCheckpoint ck = load_denoiser(checkpoint);
  const NoiseSchedule schedule = cfg.make_noise_schedule();
  GenConfig gc;
  gc.s = s >= 0 ? s : cfg.gen.s;
  gc.t_sample = steps > 0 ? steps : cfg.gen.steps;
  gc.per_class = per_class > 0 ? per_class : cfg.gen.per_class;
  gc.seed = seed >= 0 ? static_cast<std::uint64_t>(seed) : cfg.gen.seed;
  gc.batch = cfg.gen.batch;
  gc.workers = env_workers();
  if (gc.s < 1.0) throw ConfigError("--s must be >= 1");
  if (gc.t_sample > schedule.t_train) throw ConfigError("--steps exceeds schedule.t_train");
  SyntheticDataset ds = generate_dataset(ck.model, schedule, gc);
  save_skds(ds, out);
  std::cout << "wrote " << ds.count() << " images to " << out << " (digest " << ds.digest()
            << ")\n";
  return 0;
}

int run_train_teacher(const CommonArgs& common, const std::string& tier_flag,
                      const std::string& out) {
  RunConfig cfg = load_config(common);
  const std::string tier = tier_flag.empty() ? cfg.teacher.tier : tier_flag;
  const ToyPair toy = generate_toy(cfg.toy);
  Classifier model(tier_from_string(tier), cfg.toy.num_classes, cfg.teacher.seed);
  std::cout << "training tier-" << tier << " teacher: " << cfg.teacher.epochs << " epochs\n";
  TeacherTrainResult r =
      train_teacher(model, toy.train, toy.test, cfg.teacher.epochs, cfg.teacher.lr,
                    cfg.teacher.seed);
  save_classifier(model, out, r.final_accuracy);
  write_trace_csv(out + ".trace.csv", r.trace, cfg.teacher.seed, cfg.digest());
  std::cout << "final real-test accuracy " << r.final_accuracy << "\ncheckpoint " << out << "\n";
  return 0;
}

int run_distill(const CommonArgs& common, const std::string& teacher_path,
                const std::string& student_tier, const std::string& synthetic_path, double tau,
                double soft, double hard, const std::string& out) {
  RunConfig cfg = load_config(common);
  DistillConfig dc = cfg.distill;
  if (tau > 0) dc.tau = tau;
  if (soft >= 0) dc.soft_weight = soft;
  if (hard >= 0) dc.hard_weight = hard;
  dc.validate();
  ClassifierCheckpoint teacher = load_classifier(teacher_path);
  SyntheticDataset synthetic = load_skds(synthetic_path);
  const ToyPair toy = generate_toy(cfg.toy);
  const std::string tier = student_tier.empty() ? cfg.student.tier : student_tier;
  Classifier student(tier_from_string(tier), cfg.toy.num_classes, dc.seed);
  std::cout << "distilling tier-" << tier << " student from " << synthetic.count()
            << " synthetic images (tau " << dc.tau << ", soft " << dc.soft_weight << ", hard "
            << dc.hard_weight << ")\n";
  StudentTrainResult r = train_student(student, teacher.model, synthetic, toy.test, dc);
  save_classifier(student, out, r.final_accuracy);
  write_trace_csv(out + ".trace.csv", r.trace, dc.seed, cfg.digest());
  std::cout << "final real-test accuracy " << r.final_accuracy << " (best " << r.best_accuracy
            << ")\ncheckpoint " << out << "\n";
  return 0;
}

int run_eval(const CommonArgs& common, const std::string& model_path,
             const std::string& dataset, const std::string& csv_out) {
  RunConfig cfg = load_config(common);
  ClassifierCheckpoint ck = load_classifier(model_path);
  double acc, conf, var;
  std::string dataset_digest;
  if (dataset == "toy-train" || dataset == "toy-test") {
    const ToyPair toy = generate_toy(cfg.toy);
    const RealDataset& ds = dataset == "toy-train" ? toy.train : toy.test;
    acc = accuracy(ck.model, ds);
    conf = mean_confidence(ck.model, ds);
    var = dist_variance(ck.model, ds);
    dataset_digest = ds.digest();
  } else {
    SyntheticDataset ds = load_skds(dataset);
    acc = accuracy(ck.model, ds);
    conf = mean_confidence(ck.model, ds);
    var = dist_variance(ck.model, ds);
    dataset_digest = ds.digest();
  }
  std::cout.precision(17);
  std::cout << "accuracy " << acc << "\nconfidence " << conf << "\ndist_variance " << var
            << "\n";
  if (ck.final_test_accuracy >= 0) {
    std::cout << "recorded_training_accuracy " << ck.final_test_accuracy << "\n";
  }
  if (!csv_out.empty()) {
    std::vector<MetricsRecord> records;
    for (const auto& [name, value] :
         std::initializer_list<std::pair<const char*, double>>{
             {"accuracy", acc}, {"mean_confidence", conf}, {"dist_variance", var}}) {
      MetricsRecord rec;
      rec.name = name;
      rec.value = value;
      rec.dataset_digest = dataset_digest;
      rec.model_digest = ck.digest;
      records.push_back(rec);
    }
    write_metrics_csv(csv_out, records);
  }
  return 0;
}

int run_sweep_cmd(const CommonArgs& common, const std::string& kind,
                  const std::string& denoiser_path, const std::string& teacher_path,
                  const std::string& out_dir) {
  RunConfig cfg = load_config(common);
  SweepReport report = run_sweep(cfg, sweep_kind_from_string(kind), denoiser_path, teacher_path,
                                 out_dir, env_workers());
  std::cout << "sweep " << kind << ": " << report.cells_total << " cells, " << report.cells_run
            << " run, " << report.cells_skipped << " resumed\nsummary " << report.summary_csv
            << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"synthkd: conditional-diffusion synthetic data for knowledge distillation"};
  app.require_subcommand(1);

  CommonArgs common;
  std::string out, checkpoint, tier, teacher_path, student_tier, synthetic_path, model_path,
      dataset, csv_out, kind, denoiser_path, out_dir;
  double s = -1, tau = -1, soft = -1, hard = -1;
  int steps = 0, per_class = 0;
  long long seed = -1;

  auto* train_diffusion = app.add_subcommand("train-diffusion", "train the denoiser");
  train_diffusion->add_option("--config", common.config_path)->required();
  train_diffusion->add_option("--out", out)->required();

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  gen->add_option("--config", common.config_path)->required();
  gen->add_option("--checkpoint", checkpoint)->required();
  gen->add_option("--s", s, "guidance scale (>= 1)");
  gen->add_option("--steps", steps, "sampling steps");
  gen->add_option("--per-class", per_class);
  gen->add_option("--seed", seed);
  gen->add_option("--out", out)->required();

  auto* teach = app.add_subcommand("train-teacher", "train a classifier on the real split");
  teach->add_option("--config", common.config_path)->required();
  teach->add_option("--tier", tier, "capacity tier S|M|L");
  teach->add_option("--out", out)->required();

  auto* dist = app.add_subcommand("distill", "distill a teacher into a student");
  dist->add_option("--config", common.config_path)->required();
  dist->add_option("--teacher", teacher_path)->required();
  dist->add_option("--student-tier", student_tier);
  dist->add_option("--synthetic", synthetic_path)->required();
  dist->add_option("--tau", tau);
  dist->add_option("--soft", soft);
  dist->add_option("--hard", hard);
  dist->add_option("--out", out)->required();

  auto* eval = app.add_subcommand("eval", "evaluate a saved classifier");
  eval->add_option("--config", common.config_path)->required();
  eval->add_option("--model", model_path)->required();
  eval->add_option("--dataset", dataset, "path to .skds, or toy-train/toy-test")->required();
  eval->add_option("--csv", csv_out);

  auto* sweep = app.add_subcommand("sweep", "run an experiment grid");
  sweep->add_option("--kind", kind)->required();
  sweep->add_option("--config", common.config_path)->required();
  sweep->add_option("--denoiser", denoiser_path)->required();
  sweep->add_option("--teacher", teacher_path);
  sweep->add_option("--out", out_dir)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }

  try {
    if (*train_diffusion) return run_train_diffusion(common, out);
    if (*gen) return run_gen_data(common, checkpoint, s, steps, per_class, seed, out);
    if (*teach) return run_train_teacher(common, tier, out);
    if (*dist) {
      return run_distill(common, teacher_path, student_tier, synthetic_path, tau, soft, hard,
                         out);
    }
    if (*eval) return run_eval(common, model_path, dataset, csv_out);
    if (*sweep) return run_sweep_cmd(common, kind, denoiser_path, teacher_path, out_dir);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
