#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "synthkd/data.hpp"
#include "synthkd/nets.hpp"

namespace synthkd {

// Top-1 accuracy; argmax ties break toward the lowest class index.
double accuracy(const Classifier& model, const RealDataset& data);
double accuracy(const Classifier& model, const SyntheticDataset& data);

// Mean over samples of the population variance of the K softmax entries;
// smaller means smoother output distributions. Bounded by (K-1)/K^2, attained
// exactly on one-hot outputs.
double dist_variance(const Classifier& model, const RealDataset& data);
double dist_variance(const Classifier& model, const SyntheticDataset& data);

// Mean over samples of the top-1 softmax probability.
double mean_confidence(const Classifier& model, const RealDataset& data);
double mean_confidence(const Classifier& model, const SyntheticDataset& data);

struct TeacherEval {
  double accuracy = 0.0;         // vs. the generating labels
  double mean_confidence = 0.0;  // mean top-1 probability
  double dist_variance = 0.0;
};

// The three behavior scalars of a pretrained teacher on a synthetic set.
TeacherEval teacher_eval_on_synthetic(const Classifier& teacher, const SyntheticDataset& data);

// One evaluation quantity plus enough context to regenerate it.
struct MetricsRecord {
  std::string name;
  double value = 0.0;
  std::string dataset_digest;
  std::string model_digest;
  double s = 0.0;
  int t_sample = 0;
  double tau = 0.0;
  std::uint64_t seed = 0;
};

// Fixed-header CSV, RFC-4180 quoting; appends when the file already exists.
void write_metrics_csv(const std::string& path, std::span<const MetricsRecord> records);

}  // namespace synthkd
