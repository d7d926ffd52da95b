#include "synthkd/distill.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "synthkd/metrics.hpp"
#include "synthkd/optim.hpp"
#include "synthkd/rng.hpp"

namespace synthkd {

void DistillConfig::validate() const {
  if (!(tau > 0.0)) throw ConfigError("distill: temperature must be positive");
  if (soft_weight < 0.0 || hard_weight < 0.0) {
    throw ConfigError("distill: loss weights must be nonnegative");
  }
  if (soft_weight == 0.0 && hard_weight == 0.0) {
    throw ConfigError("distill: soft and hard loss weights cannot both be zero");
  }
  if (epochs < 0 || batch < 1) throw ConfigError("distill: bad epochs/batch");
  if (lr <= 0.0) throw ConfigError("distill: learning rate must be positive");
}

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

struct LogitsView {
  int rows;
  int cols;
};

LogitsView logits_view(const Array& q, const char* op) {
  if (q.ndim() == 1) return LogitsView{1, q.dim(0)};
  if (q.ndim() == 2) return LogitsView{q.dim(0), q.dim(1)};
  throw ContractError(std::string(op) + ": logits must be 1-d or 2-d, got " +
                      shape_str(q.shape()));
}

void check_finite_logits(const Array& q, const char* who) {
  for (double v : q.data()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("kd_loss: non-finite ") + who + " logits");
    }
  }
}

}  // namespace

Array kd_loss(const Array& q_t, const Array& q_s, double tau) {
  if (!(tau > 0.0)) throw ContractError("kd_loss: temperature must be positive");
  const LogitsView tv = logits_view(q_t, "kd_loss");
  const LogitsView sv = logits_view(q_s, "kd_loss");
  if (tv.rows != sv.rows || tv.cols != sv.cols) {
    throw ContractError("kd_loss: logit shape mismatch " + shape_str(q_t.shape()) + " vs " +
                        shape_str(q_s.shape()));
  }
  check_finite_logits(q_t, "teacher");
  check_finite_logits(q_s, "student");

  // Teacher side is a constant: softened probabilities and their logs are
  // computed outside the graph, so no gradient can reach q_t.
  const int rows = tv.rows, k = tv.cols;
  std::vector<double> p_t(q_t.size());
  std::vector<double> log_p_t(q_t.size());
  const auto qtv = q_t.data();
  for (int r = 0; r < rows; ++r) {
    const double* in = qtv.data() + static_cast<std::size_t>(r) * k;
    double mx = in[0] / tau;
    for (int j = 1; j < k; ++j) mx = std::max(mx, in[j] / tau);
    double denom = 0.0;
    for (int j = 0; j < k; ++j) denom += std::exp(in[j] / tau - mx);
    const double lse = mx + std::log(denom);
    for (int j = 0; j < k; ++j) {
      const std::size_t at = static_cast<std::size_t>(r) * k + j;
      log_p_t[at] = in[j] / tau - lse;
      p_t[at] = std::exp(log_p_t[at]);
    }
  }
  const Shape row_shape = (q_s.ndim() == 1) ? Shape{k} : Shape{rows, k};
  Array p_t_arr = Array::from_data(row_shape, std::move(p_t));
  Array log_p_t_arr = Array::from_data(row_shape, std::move(log_p_t));

  Array log_p_s = log_softmax(scale(q_s, 1.0 / tau));
  Array kl_terms = mul(p_t_arr, sub(log_p_t_arr, log_p_s));
  return scale(sum(kl_terms), tau * tau / rows);
}

Array hard_label_loss(const Array& q_s, std::span<const int> labels) {
  const LogitsView sv = logits_view(q_s, "hard_label_loss");
  if (static_cast<int>(labels.size()) != sv.rows) {
    throw ContractError("hard_label_loss: " + std::to_string(labels.size()) + " labels for " +
                        std::to_string(sv.rows) + " rows");
  }
  Array rows = (q_s.ndim() == 1) ? reshape(q_s, Shape{1, sv.cols}) : q_s;
  return scale(mean(pick_class(log_softmax(rows), labels)), -1.0);
}

// ---- training loops ---------------------------------------------------------

namespace {

void flip_horizontal(double* img) {
  for (int y = 0; y < kImageSize; ++y) {
    double* row = img + y * kImageSize;
    for (int x = 0; x < kImageSize / 2; ++x) std::swap(row[x], row[kImageSize - 1 - x]);
  }
}

void shuffle_indices(std::vector<std::size_t>& order, Rng& rng) {
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[rng.uniform_int(0, static_cast<int>(i) - 1)]);
  }
}

}  // namespace

TeacherTrainResult train_teacher(Classifier& model, const RealDataset& train,
                                 const RealDataset& test, int epochs, double lr,
                                 std::uint64_t seed) {
  if (epochs < 0) throw ContractError("train_teacher: negative epochs");
  if (train.num_classes != model.num_classes()) {
    throw ContractError("train_teacher: dataset has " + std::to_string(train.num_classes) +
                        " classes, model expects " + std::to_string(model.num_classes()));
  }
  TeacherTrainResult result;
  if (epochs == 0) {
    result.final_accuracy = accuracy(model, test);
    return result;
  }
  const std::vector<double> milestones{0.625, 0.75, 0.875};
  SgdOptimizer opt(model.parameters(), 0.9, 5e-4);
  Rng rng(Rng::mix({seed, 0x746561636865ull}));
  std::vector<std::size_t> order(train.count());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const int batch = 64;

  for (int epoch = 0; epoch < epochs; ++epoch) {
    const double lr_now = step_decay_lr(lr, epoch, epochs, milestones);
    shuffle_indices(order, rng);
    double epoch_loss = 0.0;
    long batches = 0;
    for (std::size_t at = 0; at < order.size(); at += batch) {
      const std::size_t b = std::min<std::size_t>(batch, order.size() - at);
      std::vector<double> flat(b * kImagePixels);
      std::vector<int> labels(b);
      for (std::size_t j = 0; j < b; ++j) {
        std::memcpy(flat.data() + j * kImagePixels, train.image(order[at + j]),
                    sizeof(double) * kImagePixels);
        if (rng.uniform() < 0.5) flip_horizontal(flat.data() + j * kImagePixels);
        labels[j] = train.labels[order[at + j]];
      }
      Array xb = Array::from_data(Shape{static_cast<int>(b), 1, kImageSize, kImageSize},
                                  std::move(flat));
      double loss_value;
      {
        Tape tape;
        Array loss = hard_label_loss(model.forward(xb), labels);
        loss_value = loss.item();
        if (!std::isfinite(loss_value)) {
          throw NumericError("train_teacher: non-finite loss in epoch " + std::to_string(epoch));
        }
        tape.backward(loss);
      }
      opt.step(lr_now);
      opt.zero_grad();
      epoch_loss += loss_value;
      ++batches;
    }
    const double test_acc = accuracy(model, test);
    result.trace.push_back({epoch, "train", epoch_loss / batches, kNan});
    result.trace.push_back({epoch, "test", kNan, test_acc});
  }
  round_params_to_f32(model.parameters());
  result.final_accuracy = accuracy(model, test);
  return result;
}

StudentTrainResult train_student(Classifier& student, const Classifier& teacher,
                                 const SyntheticDataset& synthetic, const RealDataset& real_test,
                                 const DistillConfig& config) {
  config.validate();
  if (teacher.num_classes() != student.num_classes()) {
    throw ContractError("train_student: teacher has " + std::to_string(teacher.num_classes()) +
                        " classes, student " + std::to_string(student.num_classes()));
  }
  if (synthetic.num_classes != student.num_classes()) {
    throw ContractError("train_student: synthetic dataset has " +
                        std::to_string(synthetic.num_classes) + " classes, student expects " +
                        std::to_string(student.num_classes()));
  }
  if (synthetic.count() == 0) throw ContractError("train_student: empty synthetic dataset");

  StudentTrainResult result;
  SgdOptimizer opt(student.parameters(), config.momentum, config.weight_decay);
  Rng rng(Rng::mix({config.seed, 0x73747564656e74ull}));
  std::vector<std::size_t> order(synthetic.count());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  const bool use_soft = config.soft_weight > 0.0;
  const bool use_hard = config.hard_weight > 0.0;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr_now = step_decay_lr(config.lr, epoch, config.epochs, config.milestones);
    shuffle_indices(order, rng);
    double epoch_loss = 0.0;
    long batches = 0;
    for (std::size_t at = 0; at < order.size(); at += config.batch) {
      const std::size_t b = std::min<std::size_t>(config.batch, order.size() - at);
      std::vector<double> flat(b * kImagePixels);
      std::vector<int> labels(b);
      for (std::size_t j = 0; j < b; ++j) {
        synthetic.decode_image(order[at + j], flat.data() + j * kImagePixels);
        if (rng.uniform() < 0.5) flip_horizontal(flat.data() + j * kImagePixels);
        labels[j] = static_cast<int>(synthetic.labels[order[at + j]]);
      }
      Array xb = Array::from_data(Shape{static_cast<int>(b), 1, kImageSize, kImageSize},
                                  std::move(flat));
      // The teacher is frozen; its pass runs outside any tape.
      Array teacher_logits;
      if (use_soft) teacher_logits = teacher.forward(xb);

      double loss_value;
      {
        Tape tape;
        Array student_logits = student.forward(xb);
        Array loss;
        if (use_soft) {
          loss = scale(kd_loss(teacher_logits, student_logits, config.tau), config.soft_weight);
        }
        if (use_hard) {
          Array hl = scale(hard_label_loss(student_logits, labels), config.hard_weight);
          loss = use_soft ? add(loss, hl) : hl;
        }
        loss_value = loss.item();
        if (!std::isfinite(loss_value)) {
          throw NumericError("train_student: non-finite loss in epoch " + std::to_string(epoch));
        }
        tape.backward(loss);
      }
      opt.step(lr_now);
      opt.zero_grad();
      epoch_loss += loss_value;
      ++batches;
    }
    const double test_acc = accuracy(student, real_test);
    result.best_accuracy = std::max(result.best_accuracy, test_acc);
    result.trace.push_back({epoch, "train", epoch_loss / batches, kNan});
    result.trace.push_back({epoch, "test", kNan, test_acc});
  }
  round_params_to_f32(student.parameters());
  result.final_accuracy = accuracy(student, real_test);
  result.best_accuracy = std::max(result.best_accuracy, result.final_accuracy);
  return result;
}

}  // namespace synthkd
