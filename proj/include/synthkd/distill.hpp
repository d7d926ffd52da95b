#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "synthkd/array.hpp"
#include "synthkd/data.hpp"
#include "synthkd/nets.hpp"

namespace synthkd {

struct DistillConfig {
  double tau = 10.0;
  double soft_weight = 1.0;
  double hard_weight = 0.0;
  int epochs = 30;
  int batch = 64;
  double lr = 0.02;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::vector<double> milestones{0.625, 0.75, 0.875};  // fractions of total epochs
  std::uint64_t seed = 51;

  void validate() const;
};

// Temperature-scaled distillation loss,
//   tau^2 * KL( softmax(q_t/tau) || softmax(q_s/tau) ),
// averaged over the batch. Teacher logits are constants: gradients flow to
// the student logits only.
Array kd_loss(const Array& q_t, const Array& q_s, double tau);

// Cross-entropy of softmax(q_s) against the one-hot generating label.
Array hard_label_loss(const Array& q_s, std::span<const int> labels);

struct EpochRow {
  int epoch;
  std::string split;
  double loss;      // NaN when not applicable to the split
  double accuracy;  // NaN when not applicable to the split
};

struct StudentTrainResult {
  std::vector<EpochRow> trace;
  double final_accuracy = 0.0;
  double best_accuracy = 0.0;
};

// Distills a frozen teacher into the student on synthetic data with shuffle
// and horizontal-flip augmentation; real-test accuracy is recorded per epoch.
StudentTrainResult train_student(Classifier& student, const Classifier& teacher,
                                 const SyntheticDataset& synthetic, const RealDataset& real_test,
                                 const DistillConfig& config);

struct TeacherTrainResult {
  std::vector<EpochRow> trace;
  double final_accuracy = 0.0;
};

// Standard cross-entropy SGD training on the real split.
TeacherTrainResult train_teacher(Classifier& model, const RealDataset& train,
                                 const RealDataset& test, int epochs, double lr,
                                 std::uint64_t seed);

}  // namespace synthkd
