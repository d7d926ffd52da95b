#include "synthkd/metrics.hpp"

#include <cmath>
#include <cstring>

#include "synthkd/csv.hpp"

namespace synthkd {

namespace {

// Streams a dataset through the model in fixed batches and feeds per-sample
// softmax rows to a visitor. Results are independent of the batch size
// because every per-sample computation is batch-composition invariant.
template <typename GetImage, typename Visit>
void for_each_softmax(const Classifier& model, std::size_t count, int num_classes,
                      GetImage&& get_image, Visit&& visit) {
  if (count == 0) throw ContractError("metrics: empty dataset");
  if (num_classes != model.num_classes()) {
    throw ContractError("metrics: dataset has " + std::to_string(num_classes) +
                        " classes, model expects " + std::to_string(model.num_classes()));
  }
  const std::size_t batch = 256;
  const int k = model.num_classes();
  std::vector<double> probs;
  for (std::size_t at = 0; at < count; at += batch) {
    const std::size_t b = std::min(batch, count - at);
    std::vector<double> flat(b * kImagePixels);
    for (std::size_t j = 0; j < b; ++j) get_image(at + j, flat.data() + j * kImagePixels);
    Array logits = model.forward(
        Array::from_data(Shape{static_cast<int>(b), 1, kImageSize, kImageSize},
                         std::move(flat)));
    Array sm = softmax(logits);
    const auto pv = sm.data();
    for (std::size_t j = 0; j < b; ++j) visit(at + j, pv.data() + j * k);
  }
}

struct SoftmaxStats {
  double correct = 0.0;
  double confidence_sum = 0.0;
  double variance_sum = 0.0;
};

template <typename GetImage, typename GetLabel>
SoftmaxStats gather_stats(const Classifier& model, std::size_t count, int num_classes,
                          GetImage&& get_image, GetLabel&& get_label) {
  SoftmaxStats stats;
  const int k = model.num_classes();
  for_each_softmax(model, count, num_classes, get_image, [&](std::size_t i, const double* p) {
    int arg = 0;
    for (int j = 1; j < k; ++j) {
      if (p[j] > p[arg]) arg = j;  // ties stay with the lowest index
    }
    if (arg == get_label(i)) stats.correct += 1.0;
    stats.confidence_sum += p[arg];
    double mean = 0.0;
    for (int j = 0; j < k; ++j) mean += p[j];
    mean /= k;
    double var = 0.0;
    for (int j = 0; j < k; ++j) var += (p[j] - mean) * (p[j] - mean);
    stats.variance_sum += var / k;
  });
  return stats;
}

SoftmaxStats stats_real(const Classifier& model, const RealDataset& data) {
  return gather_stats(
      model, data.count(), data.num_classes,
      [&](std::size_t i, double* out) {
        std::memcpy(out, data.image(i), sizeof(double) * kImagePixels);
      },
      [&](std::size_t i) { return data.labels[i]; });
}

SoftmaxStats stats_synth(const Classifier& model, const SyntheticDataset& data) {
  return gather_stats(
      model, data.count(), data.num_classes,
      [&](std::size_t i, double* out) { data.decode_image(i, out); },
      [&](std::size_t i) { return static_cast<int>(data.labels[i]); });
}

}  // namespace

double accuracy(const Classifier& model, const RealDataset& data) {
  return stats_real(model, data).correct / static_cast<double>(data.count());
}

double accuracy(const Classifier& model, const SyntheticDataset& data) {
  return stats_synth(model, data).correct / static_cast<double>(data.count());
}

double dist_variance(const Classifier& model, const RealDataset& data) {
  return stats_real(model, data).variance_sum / static_cast<double>(data.count());
}

double dist_variance(const Classifier& model, const SyntheticDataset& data) {
  return stats_synth(model, data).variance_sum / static_cast<double>(data.count());
}

double mean_confidence(const Classifier& model, const RealDataset& data) {
  return stats_real(model, data).confidence_sum / static_cast<double>(data.count());
}

double mean_confidence(const Classifier& model, const SyntheticDataset& data) {
  return stats_synth(model, data).confidence_sum / static_cast<double>(data.count());
}

TeacherEval teacher_eval_on_synthetic(const Classifier& teacher, const SyntheticDataset& data) {
  const SoftmaxStats stats = stats_synth(teacher, data);
  const double n = static_cast<double>(data.count());
  return TeacherEval{stats.correct / n, stats.confidence_sum / n, stats.variance_sum / n};
}

void write_metrics_csv(const std::string& path, std::span<const MetricsRecord> records) {
  CsvWriter csv(path, {"name", "value", "dataset_digest", "model_digest", "s", "t_sample", "tau",
                       "seed"});
  for (const MetricsRecord& r : records) {
    csv.row({CsvWriter::field(r.name), CsvWriter::field(r.value),
             CsvWriter::field(r.dataset_digest), CsvWriter::field(r.model_digest),
             CsvWriter::field(r.s), CsvWriter::field(static_cast<long long>(r.t_sample)),
             CsvWriter::field(r.tau), CsvWriter::field(static_cast<long long>(r.seed))});
  }
}

}  // namespace synthkd
