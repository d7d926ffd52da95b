#pragma once

#include <string>

#include "synthkd/config.hpp"

namespace synthkd {

enum class SweepKind { Fidelity, Capacity, Temperature, Labels, Diversity, Scale };

SweepKind sweep_kind_from_string(const std::string& s);
std::string sweep_kind_to_string(SweepKind kind);

struct SweepReport {
  int cells_total = 0;
  int cells_run = 0;
  int cells_skipped = 0;  // valid completion marker found
  std::string summary_csv;
};

// Runs one experiment grid. Every execution cell owns a directory under
// out_dir/<kind>/ with its artifacts, a per-cell CSV and a completion marker;
// valid markers are never recomputed. The summary CSV holds one row per grid
// point, seed-averaged. teacher_path may be empty for the capacity sweep,
// which trains its own teacher ladder.
SweepReport run_sweep(const RunConfig& config, SweepKind kind, const std::string& denoiser_path,
                      const std::string& teacher_path, const std::string& out_dir, int workers);

}  // namespace synthkd
