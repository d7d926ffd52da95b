#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "synthkd/common.hpp"

namespace synthkd {

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct ArrayNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until backward touches this node
  bool requires_grad = false;
  std::uint64_t id = 0;

  std::size_t numel() const { return data.size(); }
  void accumulate_grad_alloc() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

// Dense row-major array of 64-bit reals with optional reverse-mode gradient
// tracking. Value-semantic handle: copies share the underlying node, so
// tracked parameters can be held by both a model and an optimizer.
class Array {
 public:
  Array() = default;
  Array(Shape shape, double fill = 0.0, bool requires_grad = false);
  static Array from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Array scalar(double value);

  bool valid() const { return node_ != nullptr; }
  const Shape& shape() const { return node()->shape; }
  int dim(int i) const { return node()->shape.at(static_cast<std::size_t>(i)); }
  int ndim() const { return static_cast<int>(node()->shape.size()); }
  std::size_t size() const { return node()->data.size(); }
  bool is_scalar() const { return size() == 1; }

  std::span<const double> data() const { return node()->data; }
  // Mutation is forbidden while a tape is recording; tracked arrays on a live
  // tape must stay frozen for the backward rules to be valid.
  std::span<double> data_mut();

  double item() const;
  double at(std::size_t i) const { return node()->data.at(i); }

  bool requires_grad() const { return node()->requires_grad; }
  void set_requires_grad(bool v) { node()->requires_grad = v; }

  bool has_grad() const { return !node()->grad.empty(); }
  std::span<const double> grad() const;
  std::span<double> grad_mut();
  void zero_grad() { node()->grad.clear(); }

  std::uint64_t node_id() const { return node()->id; }
  bool same_node(const Array& other) const { return node_ == other.node_; }

  // Deep copy of values; never shares storage, never tracked.
  Array clone_detached() const;

  std::shared_ptr<detail::ArrayNode> node_ptr() const { return node_; }

 private:
  detail::ArrayNode* node() const {
    if (!node_) throw ContractError("Array: used before initialization");
    return node_.get();
  }
  std::shared_ptr<detail::ArrayNode> node_;
};

// Ordered record of primitive operations. Single-owner, one per thread at a
// time; ops record onto the active tape whenever a tracked input is involved.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Reverse traversal from a scalar loss; fills `grad` on every tracked node
  // on the path. Calling twice without reset() is an error.
  void backward(const Array& loss);
  void reset();

  std::size_t num_ops() const { return entries_.size(); }

  struct OpInfo {
    std::string name;
    std::vector<std::uint64_t> input_ids;
    std::uint64_t output_id;
  };
  std::vector<OpInfo> ops() const;

  static Tape* active();
  static bool recording() { return active() != nullptr; }

  // Used by op implementations.
  void record(std::string name, std::vector<std::shared_ptr<detail::ArrayNode>> inputs,
              std::shared_ptr<detail::ArrayNode> output, std::function<void()> backward_fn);

 private:
  struct Entry {
    std::string name;
    std::vector<std::shared_ptr<detail::ArrayNode>> inputs;
    std::shared_ptr<detail::ArrayNode> output;
    std::function<void()> backward_fn;
  };
  std::vector<Entry> entries_;
  bool consumed_ = false;
};

// ---- primitive operations ------------------------------------------------
// Elementwise ops accept equal shapes, or a scalar (numel 1) second operand;
// there is no general broadcasting.

Array add(const Array& a, const Array& b);
Array sub(const Array& a, const Array& b);
Array mul(const Array& a, const Array& b);
Array scale(const Array& a, double factor);
Array add_scalar(const Array& a, double constant);

Array matmul(const Array& a, const Array& b);                      // (m,k)x(k,n)
Array affine(const Array& x, const Array& w, const Array& bias);   // (n,d)x(d,e)+(e)
Array conv2d(const Array& x, const Array& w, const Array& bias, int pad);  // stride 1

Array relu(const Array& a);
Array silu(const Array& a);

Array mean(const Array& a);  // scalar
Array sum(const Array& a);   // scalar
Array mse(const Array& a, const Array& b);

Array softmax(const Array& a);      // over the last dimension
Array log_softmax(const Array& a);  // over the last dimension

Array embedding_lookup(const Array& table, std::span<const int> indices);
Array pick_class(const Array& rows, std::span<const int> labels);  // (n,k)->(n,)

Array avg_pool2(const Array& x);          // 2x2, stride 2, NCHW
Array upsample_nearest2(const Array& x);  // x2, NCHW
Array concat_channels(const Array& a, const Array& b);
Array add_channel_bias(const Array& x, const Array& bias);  // (n,c,h,w)+(n,c)

Array reshape(const Array& a, Shape new_shape);
Array detach(const Array& a);

// ---- raw kernels (shared by forward and backward paths) -------------------
namespace kernels {
// c(m,n) += a(m,k) * b(k,n); caller zeroes c when accumulation is unwanted.
void matmul_acc(const double* a, const double* b, double* c, int m, int k, int n);
}  // namespace kernels

// ---- verification harness --------------------------------------------------
// Central finite differences per parameter coordinate against the analytic
// gradients produced by one backward pass; returns the worst relative error
// (|a-n| / max(1, |a|, |n|)). Throws NumericError, naming the coordinate, if
// a non-finite value is encountered.
double grad_check(const std::function<Array()>& f, std::vector<Array> params, double epsilon);

bool all_finite(const Array& a);

}  // namespace synthkd
