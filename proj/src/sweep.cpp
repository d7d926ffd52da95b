#include "synthkd/sweep.hpp"

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <thread>

#include <nlohmann/json.hpp>

#include "synthkd/csv.hpp"
#include "synthkd/digest.hpp"
#include "synthkd/metrics.hpp"
#include "synthkd/rng.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace synthkd {

SweepKind sweep_kind_from_string(const std::string& s) {
  if (s == "fidelity") return SweepKind::Fidelity;
  if (s == "capacity") return SweepKind::Capacity;
  if (s == "temperature") return SweepKind::Temperature;
  if (s == "labels") return SweepKind::Labels;
  if (s == "diversity") return SweepKind::Diversity;
  if (s == "scale") return SweepKind::Scale;
  throw ConfigError("unknown sweep kind '" + s +
                    "' (expected fidelity|capacity|temperature|labels|diversity|scale)");
}

std::string sweep_kind_to_string(SweepKind kind) {
  switch (kind) {
    case SweepKind::Fidelity: return "fidelity";
    case SweepKind::Capacity: return "capacity";
    case SweepKind::Temperature: return "temperature";
    case SweepKind::Labels: return "labels";
    case SweepKind::Diversity: return "diversity";
    case SweepKind::Scale: return "scale";
  }
  throw ContractError("unreachable sweep kind");
}

namespace {

// One unit of resumable work. run() produces the summary-row fields; they are
// cached in the completion marker so a resume can rebuild the summary without
// recomputing the cell.
struct Cell {
  std::string tag;
  std::string context_digest;
  std::function<json(const fs::path& dir)> run;
};

bool marker_valid(const fs::path& marker, const std::string& context_digest, json* row_out) {
  std::ifstream in(marker);
  if (!in) return false;
  json j;
  try {
    in >> j;
    if (j.at("cell_digest").get<std::string>() != context_digest) return false;
    *row_out = j.at("row");
  } catch (const json::exception&) {
    return false;  // corrupted marker: rerun the cell
  }
  return true;
}

void write_marker(const fs::path& marker, const std::string& context_digest, const json& row) {
  json j;
  j["cell_digest"] = context_digest;
  j["row"] = row;
  std::ofstream out(marker, std::ios::trunc);
  if (!out) throw DataError("cannot write marker " + marker.string());
  out << j.dump(2) << "\n";
}

struct CellOutcome {
  json row;
  bool skipped = false;
};

// Executes cells with a worker pool; each cell runs single-threaded.
std::vector<CellOutcome> run_cells(const fs::path& kind_dir, std::vector<Cell>& cells,
                                   int workers, int* run_count, int* skip_count) {
  std::vector<CellOutcome> outcomes(cells.size());
  std::atomic<std::size_t> next{0};
  std::atomic<int> ran{0}, skipped{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;

  auto work = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      try {
        Cell& cell = cells[i];
        const fs::path dir = kind_dir / cell.tag;
        const fs::path marker = dir / "done.json";
        json row;
        if (marker_valid(marker, cell.context_digest, &row)) {
          outcomes[i] = CellOutcome{std::move(row), true};
          skipped.fetch_add(1);
          continue;
        }
        fs::create_directories(dir);
        row = cell.run(dir);
        write_marker(marker, cell.context_digest, row);
        outcomes[i] = CellOutcome{std::move(row), false};
        ran.fetch_add(1);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
        next.store(cells.size());  // stop handing out work
        return;
      }
    }
  };

  if (workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
    for (std::thread& th : pool) th.join();
  }
  if (first_error) std::rethrow_exception(first_error);
  *run_count += ran.load();
  *skip_count += skipped.load();
  return outcomes;
}

std::string cell_digest_for(const RunConfig& config, SweepKind kind, const std::string& tag,
                            const json& params, const std::string& denoiser_digest,
                            const std::string& teacher_digest) {
  json j;
  j["config"] = config.digest();
  j["kind"] = sweep_kind_to_string(kind);
  j["tag"] = tag;
  j["params"] = params;
  j["denoiser"] = denoiser_digest;
  j["teacher"] = teacher_digest;
  return sha256_hex(j.dump());
}

// Per-cell synthetic generation; cached on disk inside the cell directory.
SyntheticDataset cell_generate(const Denoiser& model, const NoiseSchedule& schedule, double s,
                               int t_sample, int per_class, std::uint64_t seed,
                               const fs::path& dir) {
  GenConfig gc;
  gc.s = s;
  gc.t_sample = t_sample;
  gc.per_class = per_class;
  gc.seed = seed;
  SyntheticDataset ds = generate_dataset(model, schedule, gc);
  save_skds(ds, (dir / "synthetic.skds").string());
  return ds;
}

json student_metrics_row(const StudentTrainResult& result) {
  json row;
  row["student_final_acc"] = result.final_accuracy;
  row["student_best_acc"] = result.best_accuracy;
  return row;
}

// A synthetic set restricted to the first per_class images of every class;
// used by the diversity and scale grids so all sizes share one generation.
SyntheticDataset take_per_class(const SyntheticDataset& ds, int per_class) {
  SyntheticDataset out;
  out.num_classes = ds.num_classes;
  out.channels = ds.channels;
  out.height = ds.height;
  out.width = ds.width;
  out.prov = ds.prov;
  std::vector<int> kept(ds.num_classes, 0);
  const std::size_t rec = static_cast<std::size_t>(ds.channels) * ds.height * ds.width;
  for (std::size_t i = 0; i < ds.count(); ++i) {
    const int cls = ds.labels[i];
    if (kept[cls] >= per_class) continue;
    ++kept[cls];
    out.labels.push_back(ds.labels[i]);
    out.pixels.insert(out.pixels.end(), ds.pixels.begin() + i * rec,
                      ds.pixels.begin() + (i + 1) * rec);
  }
  for (int c = 0; c < ds.num_classes; ++c) {
    if (kept[c] != per_class) {
      throw ContractError("take_per_class: source set has only " + std::to_string(kept[c]) +
                          " images of class " + std::to_string(c));
    }
  }
  return out;
}

struct SummarySpec {
  std::vector<std::string> group_keys;   // grid point identity
  std::vector<std::string> metric_keys;  // seed-averaged metrics
};

SummarySpec summary_spec(SweepKind kind) {
  switch (kind) {
    case SweepKind::Fidelity:
      return {{"s", "t_sample"},
              {"teacher_acc_on_synth", "teacher_confidence", "dist_variance",
               "student_final_acc", "student_best_acc"}};
    case SweepKind::Capacity:
      return {{"teacher_tier", "student_tier"},
              {"teacher_real_acc", "student_final_acc", "student_best_acc"}};
    case SweepKind::Temperature:
      return {{"tau"}, {"student_final_acc", "student_best_acc"}};
    case SweepKind::Labels:
      return {{"mode"}, {"student_final_acc", "student_best_acc"}};
    case SweepKind::Diversity:
      return {{"per_class", "epochs"}, {"student_final_acc", "student_best_acc"}};
    case SweepKind::Scale:
      return {{"per_class"}, {"student_final_acc", "student_best_acc"}};
  }
  throw ContractError("unreachable sweep kind");
}

void write_summary(const fs::path& path, SweepKind kind, const RunConfig& config,
                   const std::vector<CellOutcome>& outcomes) {
  const SummarySpec spec = summary_spec(kind);
  std::vector<std::string> header{"kind"};
  header.insert(header.end(), spec.group_keys.begin(), spec.group_keys.end());
  header.push_back("n_seeds");
  header.insert(header.end(), spec.metric_keys.begin(), spec.metric_keys.end());
  header.push_back("config_digest");

  // Group result rows by grid point, preserving first-seen order.
  std::vector<std::string> order;
  std::map<std::string, std::vector<const json*>> groups;
  for (const CellOutcome& o : outcomes) {
    if (!o.row.value("is_result", false)) continue;
    std::string key;
    for (const std::string& g : spec.group_keys) key += o.row.at(g).dump() + "|";
    if (!groups.count(key)) order.push_back(key);
    groups[key].push_back(&o.row);
  }

  if (fs::exists(path)) fs::remove(path);
  CsvWriter csv(path.string(), header);
  for (const std::string& key : order) {
    const auto& rows = groups[key];
    std::vector<std::string> fields{sweep_kind_to_string(kind)};
    for (const std::string& g : spec.group_keys) {
      const json& v = rows.front()->at(g);
      fields.push_back(v.is_string() ? v.get<std::string>() : v.dump());
    }
    fields.push_back(std::to_string(rows.size()));
    for (const std::string& m : spec.metric_keys) {
      double mean = 0.0;
      for (const json* r : rows) mean += r->at(m).get<double>();
      fields.push_back(CsvWriter::field(mean / rows.size()));
    }
    fields.push_back(config.digest());
    csv.row(fields);
  }
}

void append_cell_csv(const fs::path& dir, const json& row) {
  std::vector<std::string> header, fields;
  for (const auto& [key, value] : row.items()) {
    if (key == "is_result") continue;
    header.push_back(key);
    fields.push_back(value.is_string() ? value.get<std::string>() : value.dump());
  }
  CsvWriter csv((dir / "cell.csv").string(), header);
  csv.row(fields);
}

}  // namespace

SweepReport run_sweep(const RunConfig& config, SweepKind kind, const std::string& denoiser_path,
                      const std::string& teacher_path, const std::string& out_dir, int workers) {
  const fs::path kind_dir = fs::path(out_dir) / sweep_kind_to_string(kind);
  fs::create_directories(kind_dir);

  DenoiserCheckpoint denoiser = load_denoiser(denoiser_path);
  const NoiseSchedule schedule = config.make_noise_schedule();
  const ToyPair toy = generate_toy(config.toy);
  const SweepSection& sw = config.sweep;
  if (sw.steps > schedule.t_train) {
    throw ConfigError("sweep.steps exceeds schedule.t_train");
  }
  if (kind == SweepKind::Fidelity) {
    for (int st : sw.steps_grid) {
      if (st > schedule.t_train) {
        throw ConfigError("sweep.steps_grid entry exceeds schedule.t_train");
      }
    }
  }

  // Teacher checkpoint for every kind except capacity, which trains its own.
  Classifier* teacher = nullptr;
  ClassifierCheckpoint teacher_ck{Classifier(Tier::S, config.toy.num_classes, 0), -1.0, ""};
  if (kind != SweepKind::Capacity) {
    if (teacher_path.empty()) {
      throw ConfigError("sweep '" + sweep_kind_to_string(kind) +
                        "' needs a pretrained teacher checkpoint (--teacher)");
    }
    teacher_ck = load_classifier(teacher_path);
    teacher = &teacher_ck.model;
    if (teacher->num_classes() != config.toy.num_classes) {
      throw ConfigError("teacher checkpoint classes do not match toy.num_classes");
    }
  }

  SweepReport report;
  report.summary_csv = (kind_dir / "summary.csv").string();

  auto make_digest = [&](const std::string& tag, const json& params) {
    return cell_digest_for(config, kind, tag, params, denoiser.digest, teacher_ck.digest);
  };

  auto base_row = [&](std::uint64_t seed) {
    json row;
    row["config_digest"] = config.digest();
    row["denoiser_digest"] = denoiser.digest;
    row["seed"] = seed;
    return row;
  };

  auto distill_on = [&](const SyntheticDataset& ds, Tier student_tier, double tau, double soft,
                        double hard, int epochs, std::uint64_t seed, const Classifier& tch) {
    DistillConfig dc = config.distill;
    dc.tau = tau;
    dc.soft_weight = soft;
    dc.hard_weight = hard;
    dc.epochs = epochs;
    dc.seed = seed;
    Classifier student(student_tier, config.toy.num_classes, Rng::mix({seed, 0x7374756431ull}));
    StudentTrainResult r = train_student(student, tch, ds, toy.test, dc);
    return r;
  };

  std::vector<CellOutcome> results;

  if (kind == SweepKind::Fidelity) {
    std::vector<Cell> cells;
    for (double s : sw.s_grid) {
      for (int steps : sw.steps_grid) {
        for (std::uint64_t seed : sw.seeds) {
          json params{{"s", s}, {"t_sample", steps}, {"seed", seed}, {"per_class", sw.per_class}};
          std::string tag = "s" + CsvWriter::field(s) + "_T" + std::to_string(steps) + "_seed" +
                            std::to_string(seed);
          cells.push_back(Cell{
              tag, make_digest(tag, params), [&, s, steps, seed, tag](const fs::path& dir) {
                SyntheticDataset ds = cell_generate(denoiser.model, schedule, s, steps,
                                                    sw.per_class, seed, dir);
                const TeacherEval te = teacher_eval_on_synthetic(*teacher, ds);
                StudentTrainResult sr = distill_on(ds, tier_from_string(config.student.tier),
                                                   config.distill.tau, 1.0, 0.0,
                                                   sw.student_epochs, seed, *teacher);
                json row = base_row(seed);
                row["is_result"] = true;
                row["s"] = s;
                row["t_sample"] = steps;
                row["teacher_acc_on_synth"] = te.accuracy;
                row["teacher_confidence"] = te.mean_confidence;
                row["dist_variance"] = te.dist_variance;
                row["dataset_digest"] = ds.digest();
                row["teacher_digest"] = teacher_ck.digest;
                row.update(student_metrics_row(sr));
                append_cell_csv(dir, row);
                return row;
              }});
        }
      }
    }
    report.cells_total += static_cast<int>(cells.size());
    results = run_cells(kind_dir, cells, workers, &report.cells_run, &report.cells_skipped);
  } else if (kind == SweepKind::Capacity) {
    // Phase 1: the teacher ladder (one training per tier).
    std::map<std::string, fs::path> teacher_files;
    {
      std::vector<Cell> cells;
      for (const std::string& tier : sw.capacity_teacher_tiers) {
        json params{{"tier", tier}, {"epochs", config.teacher.epochs}};
        std::string tag = "teacher_" + tier;
        teacher_files[tier] = kind_dir / tag / "teacher.ckpt";
        cells.push_back(Cell{tag, make_digest(tag, params), [&, tier](const fs::path& dir) {
                               Classifier model(tier_from_string(tier), config.toy.num_classes,
                                                config.teacher.seed);
                               TeacherTrainResult r =
                                   train_teacher(model, toy.train, toy.test,
                                                 config.teacher.epochs, config.teacher.lr,
                                                 config.teacher.seed);
                               save_classifier(model, (dir / "teacher.ckpt").string(),
                                               r.final_accuracy);
                               json row = base_row(config.teacher.seed);
                               row["is_result"] = false;
                               row["teacher_tier"] = tier;
                               row["teacher_real_acc"] = r.final_accuracy;
                               append_cell_csv(dir, row);
                               return row;
                             }});
      }
      report.cells_total += static_cast<int>(cells.size());
      run_cells(kind_dir, cells, workers, &report.cells_run, &report.cells_skipped);
    }
    // Phase 2: one synthetic set per seed, shared across pairs.
    std::map<std::uint64_t, fs::path> set_files;
    {
      std::vector<Cell> cells;
      for (std::uint64_t seed : sw.seeds) {
        json params{{"seed", seed}, {"per_class", sw.per_class}, {"t_sample", sw.steps}};
        std::string tag = "gen_seed" + std::to_string(seed);
        set_files[seed] = kind_dir / tag / "synthetic.skds";
        cells.push_back(Cell{tag, make_digest(tag, params), [&, seed](const fs::path& dir) {
                               SyntheticDataset ds =
                                   cell_generate(denoiser.model, schedule, config.gen.s,
                                                 sw.steps, sw.per_class, seed, dir);
                               json row = base_row(seed);
                               row["is_result"] = false;
                               row["dataset_digest"] = ds.digest();
                               append_cell_csv(dir, row);
                               return row;
                             }});
      }
      report.cells_total += static_cast<int>(cells.size());
      run_cells(kind_dir, cells, workers, &report.cells_run, &report.cells_skipped);
    }
    // Phase 3: the teacher-tier x student-tier grid.
    std::vector<Cell> cells;
    for (const std::string& t_tier : sw.capacity_teacher_tiers) {
      for (const std::string& s_tier : sw.capacity_student_tiers) {
        for (std::uint64_t seed : sw.seeds) {
          json params{{"teacher_tier", t_tier}, {"student_tier", s_tier}, {"seed", seed}};
          std::string tag = "T" + t_tier + "_S" + s_tier + "_seed" + std::to_string(seed);
          cells.push_back(Cell{
              tag, make_digest(tag, params), [&, t_tier, s_tier, seed](const fs::path& dir) {
                ClassifierCheckpoint tch = load_classifier(teacher_files.at(t_tier).string());
                SyntheticDataset ds = load_skds(set_files.at(seed).string());
                StudentTrainResult sr =
                    distill_on(ds, tier_from_string(s_tier), config.distill.tau, 1.0, 0.0,
                               sw.student_epochs, seed, tch.model);
                json row = base_row(seed);
                row["is_result"] = true;
                row["teacher_tier"] = t_tier;
                row["student_tier"] = s_tier;
                row["teacher_real_acc"] = tch.final_test_accuracy;
                row["teacher_digest"] = tch.digest;
                row["dataset_digest"] = ds.digest();
                row.update(student_metrics_row(sr));
                append_cell_csv(dir, row);
                return row;
              }});
        }
      }
    }
    report.cells_total += static_cast<int>(cells.size());
    results = run_cells(kind_dir, cells, workers, &report.cells_run, &report.cells_skipped);
  } else {
    // temperature / labels / diversity / scale share one synthetic set per
    // seed; diversity and scale take prefixes of the largest size.
    int gen_per_class = sw.per_class;
    if (kind == SweepKind::Diversity) {
      gen_per_class = *std::max_element(sw.diversity_per_class.begin(),
                                        sw.diversity_per_class.end());
    } else if (kind == SweepKind::Scale) {
      gen_per_class = *std::max_element(sw.scale_per_class.begin(), sw.scale_per_class.end());
    }
    std::map<std::uint64_t, fs::path> set_files;
    {
      std::vector<Cell> cells;
      for (std::uint64_t seed : sw.seeds) {
        json params{{"seed", seed}, {"per_class", gen_per_class}, {"t_sample", sw.steps}};
        std::string tag = "gen_seed" + std::to_string(seed);
        set_files[seed] = kind_dir / tag / "synthetic.skds";
        cells.push_back(
            Cell{tag, make_digest(tag, params), [&, seed, gen_per_class](const fs::path& dir) {
                   SyntheticDataset ds =
                       cell_generate(denoiser.model, schedule, config.gen.s, sw.steps,
                                     gen_per_class, seed, dir);
                   json row = base_row(seed);
                   row["is_result"] = false;
                   row["dataset_digest"] = ds.digest();
                   append_cell_csv(dir, row);
                   return row;
                 }});
      }
      report.cells_total += static_cast<int>(cells.size());
      run_cells(kind_dir, cells, workers, &report.cells_run, &report.cells_skipped);
    }

    std::vector<Cell> cells;
    auto add_distill_cell = [&](const std::string& tag, json params, std::uint64_t seed,
                                double tau, double soft, double hard, int per_class, int epochs,
                                json extra) {
      cells.push_back(Cell{
          tag, make_digest(tag, params),
          [&, seed, tau, soft, hard, per_class, epochs, extra](const fs::path& dir) {
            SyntheticDataset full = load_skds(set_files.at(seed).string());
            SyntheticDataset ds =
                (per_class > 0) ? take_per_class(full, per_class) : std::move(full);
            StudentTrainResult sr = distill_on(ds, tier_from_string(config.student.tier), tau,
                                               soft, hard, epochs, seed, *teacher);
            json row = base_row(seed);
            row["is_result"] = true;
            row["tau"] = tau;
            row["soft_weight"] = soft;
            row["hard_weight"] = hard;
            row["epochs"] = epochs;
            row["dataset_digest"] = ds.digest();
            row["teacher_digest"] = teacher_ck.digest;
            row.update(extra);
            row.update(student_metrics_row(sr));
            append_cell_csv(dir, row);
            return row;
          }});
    };

    if (kind == SweepKind::Temperature) {
      for (double tau : sw.tau_grid) {
        for (std::uint64_t seed : sw.seeds) {
          json params{{"tau", tau}, {"seed", seed}};
          std::string tag = "tau" + CsvWriter::field(tau) + "_seed" + std::to_string(seed);
          add_distill_cell(tag, params, seed, tau, 1.0, 0.0, 0, sw.student_epochs,
                           json{{"tau", tau}});
        }
      }
    } else if (kind == SweepKind::Labels) {
      // Exactly the three supervision modes: soft, hard, both at 1:1.
      const std::vector<std::pair<std::string, std::pair<double, double>>> modes{
          {"soft", {1.0, 0.0}}, {"hard", {0.0, 1.0}}, {"both", {1.0, 1.0}}};
      for (const auto& [mode, weights] : modes) {
        for (std::uint64_t seed : sw.seeds) {
          json params{{"mode", mode}, {"seed", seed}};
          std::string tag = mode + "_seed" + std::to_string(seed);
          add_distill_cell(tag, params, seed, config.distill.tau, weights.first, weights.second,
                           0, sw.student_epochs, json{{"mode", mode}});
        }
      }
    } else if (kind == SweepKind::Diversity) {
      for (std::size_t i = 0; i < sw.diversity_per_class.size(); ++i) {
        const int per_class = sw.diversity_per_class[i];
        const int epochs = sw.diversity_epochs[i];
        for (std::uint64_t seed : sw.seeds) {
          json params{{"per_class", per_class}, {"epochs", epochs}, {"seed", seed}};
          std::string tag =
              "n" + std::to_string(per_class) + "_e" + std::to_string(epochs) + "_seed" +
              std::to_string(seed);
          add_distill_cell(tag, params, seed, config.distill.tau, 1.0, 0.0, per_class, epochs,
                           json{{"per_class", per_class}, {"epochs", epochs}});
        }
      }
    } else {  // Scale
      for (int per_class : sw.scale_per_class) {
        for (std::uint64_t seed : sw.seeds) {
          json params{{"per_class", per_class}, {"seed", seed}};
          std::string tag = "n" + std::to_string(per_class) + "_seed" + std::to_string(seed);
          add_distill_cell(tag, params, seed, config.distill.tau, 1.0, 0.0, per_class,
                           sw.student_epochs, json{{"per_class", per_class}});
        }
      }
    }
    report.cells_total += static_cast<int>(cells.size());
    results = run_cells(kind_dir, cells, workers, &report.cells_run, &report.cells_skipped);
  }

  write_summary(kind_dir / "summary.csv", kind, config, results);
  return report;
}

}  // namespace synthkd
