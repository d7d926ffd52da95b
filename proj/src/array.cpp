#include "synthkd/array.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>

namespace synthkd {

namespace {

thread_local Tape* g_active_tape = nullptr;
std::atomic<std::uint64_t> g_next_node_id{1};

using detail::ArrayNode;
using NodePtr = std::shared_ptr<ArrayNode>;

NodePtr make_node(Shape shape, std::vector<double> data, bool requires_grad) {
  auto node = std::make_shared<ArrayNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  node->id = g_next_node_id.fetch_add(1, std::memory_order_relaxed);
  return node;
}

}  // namespace

// ---- Array -----------------------------------------------------------------

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ContractError("shape has non-positive dimension " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

Array::Array(Shape shape, double fill, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  node_ = make_node(std::move(shape), std::vector<double>(n, fill), requires_grad);
}

Array Array::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw ContractError("from_data: shape " + shape_str(shape) + " does not match data length " +
                        std::to_string(data.size()));
  }
  Array a;
  a.node_ = make_node(std::move(shape), std::move(data), requires_grad);
  return a;
}

Array Array::scalar(double value) { return from_data(Shape{1}, {value}); }

std::span<double> Array::data_mut() {
  if (Tape::recording()) {
    throw ContractError("in-place mutation is forbidden while a tape is recording");
  }
  return node()->data;
}

double Array::item() const {
  if (!is_scalar()) throw ContractError("item() on non-scalar array " + shape_str(shape()));
  return node()->data[0];
}

std::span<const double> Array::grad() const {
  if (node()->grad.empty()) throw ContractError("grad() requested but no gradient present");
  return node()->grad;
}

std::span<double> Array::grad_mut() {
  node()->accumulate_grad_alloc();
  return node()->grad;
}

Array Array::clone_detached() const {
  return from_data(node()->shape, node()->data, false);
}

// ---- Tape ------------------------------------------------------------------

Tape::Tape() {
  if (g_active_tape != nullptr) {
    throw ContractError("a tape is already active on this thread; tapes are single-owner");
  }
  g_active_tape = this;
}

Tape::~Tape() {
  if (g_active_tape == this) g_active_tape = nullptr;
}

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::string name, std::vector<NodePtr> inputs, NodePtr output,
                  std::function<void()> backward_fn) {
  entries_.push_back(Entry{std::move(name), std::move(inputs), std::move(output),
                           std::move(backward_fn)});
}

std::vector<Tape::OpInfo> Tape::ops() const {
  std::vector<OpInfo> out;
  out.reserve(entries_.size());
  for (const Entry& e : entries_) {
    OpInfo info;
    info.name = e.name;
    for (const NodePtr& in : e.inputs) info.input_ids.push_back(in->id);
    info.output_id = e.output->id;
    out.push_back(std::move(info));
  }
  return out;
}

void Tape::backward(const Array& loss) {
  if (consumed_) {
    throw ContractError("backward already ran on this tape; call reset() first");
  }
  if (!loss.is_scalar()) {
    throw ContractError("backward requires a scalar loss, got " + shape_str(loss.shape()));
  }
  if (entries_.empty()) {
    throw ContractError("backward on an empty tape");
  }
  const std::uint64_t loss_id = loss.node_id();
  bool found = false;
  for (const Entry& e : entries_) {
    if (e.output->id == loss_id) {
      found = true;
      break;
    }
  }
  if (!found) {
    throw ContractError("loss is detached from this tape; no operation produced it");
  }
  loss.node_ptr()->grad.assign(1, 1.0);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // not on the path to the loss
    it->backward_fn();
  }
  consumed_ = true;
}

void Tape::reset() {
  entries_.clear();
  consumed_ = false;
}

// ---- kernels -----------------------------------------------------------------

namespace kernels {

void matmul_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  // Four rows of C per pass so each streamed row of B is reused; the
  // per-element accumulation order over kk is unchanged by the blocking.
  int i = 0;
  for (; i + 4 <= m; i += 4) {
    const double* a0 = a + static_cast<std::size_t>(i) * k;
    const double* a1 = a0 + k;
    const double* a2 = a1 + k;
    const double* a3 = a2 + k;
    double* c0 = c + static_cast<std::size_t>(i) * n;
    double* c1 = c0 + n;
    double* c2 = c1 + n;
    double* c3 = c2 + n;
    for (int kk = 0; kk < k; ++kk) {
      const double* brow = b + static_cast<std::size_t>(kk) * n;
      const double v0 = a0[kk], v1 = a1[kk], v2 = a2[kk], v3 = a3[kk];
      for (int j = 0; j < n; ++j) {
        const double bj = brow[j];
        c0[j] += v0 * bj;
        c1[j] += v1 * bj;
        c2[j] += v2 * bj;
        c3[j] += v3 * bj;
      }
    }
  }
  for (; i < m; ++i) {
    const double* arow = a + static_cast<std::size_t>(i) * k;
    double* crow = c + static_cast<std::size_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      const double* brow = b + static_cast<std::size_t>(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c(ca,cb) += a^T b where a is (r,ca) and b is (r,cb).
void matmul_tn_acc(const double* a, const double* b, double* c, int r, int ca, int cb) {
  for (int rr = 0; rr < r; ++rr) {
    const double* arow = a + static_cast<std::size_t>(rr) * ca;
    const double* brow = b + static_cast<std::size_t>(rr) * cb;
    for (int i = 0; i < ca; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c + static_cast<std::size_t>(i) * cb;
      for (int j = 0; j < cb; ++j) crow[j] += av * brow[j];
    }
  }
}

void transpose(const double* a, double* at, int rows, int cols) {
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) {
      at[static_cast<std::size_t>(j) * rows + i] = a[static_cast<std::size_t>(i) * cols + j];
    }
  }
}

}  // namespace kernels

// ---- op plumbing ---------------------------------------------------------

namespace {

bool wants_grad(std::initializer_list<const Array*> inputs) {
  if (!Tape::recording()) return false;
  for (const Array* a : inputs) {
    if (a->requires_grad()) return true;
  }
  return false;
}

Array make_output(Shape shape, std::vector<double> data, bool tracked) {
  Array out = Array::from_data(std::move(shape), std::move(data), tracked);
  return out;
}

void require_same_shape(const char* op, const Array& a, const Array& b) {
  if (a.shape() != b.shape()) {
    throw ContractError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
  }
}

void acc(std::span<double> dst, std::span<const double> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

// ---- elementwise ops -------------------------------------------------------

Array add(const Array& a, const Array& b) {
  const bool b_scalar = b.is_scalar() && !a.is_scalar();
  const bool a_scalar = a.is_scalar() && !b.is_scalar();
  if (!a_scalar && !b_scalar) require_same_shape("add", a, b);
  const Array& big = a_scalar ? b : a;
  std::vector<double> out(big.size());
  const auto av = a.data();
  const auto bv = b.data();
  if (b_scalar) {
    const double s = bv[0];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + s;
  } else if (a_scalar) {
    const double s = av[0];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = s + bv[i];
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  }
  const bool tracked = wants_grad({&a, &b});
  Array y = make_output(big.shape(), std::move(out), tracked);
  if (tracked) {
    auto an = a.node_ptr(), bn = b.node_ptr(), yn = y.node_ptr();
    Tape::active()->record("add", {an, bn}, yn, [an, bn, yn] {
      const auto& dy = yn->grad;
      if (an->requires_grad) {
        an->accumulate_grad_alloc();
        if (an->data.size() == 1 && dy.size() > 1) {
          double s = 0;
          for (double g : dy) s += g;
          an->grad[0] += s;
        } else {
          acc(an->grad, dy);
        }
      }
      if (bn->requires_grad) {
        bn->accumulate_grad_alloc();
        if (bn->data.size() == 1 && dy.size() > 1) {
          double s = 0;
          for (double g : dy) s += g;
          bn->grad[0] += s;
        } else {
          acc(bn->grad, dy);
        }
      }
    });
  }
  return y;
}

Array sub(const Array& a, const Array& b) {
  const bool b_scalar = b.is_scalar() && !a.is_scalar();
  const bool a_scalar = a.is_scalar() && !b.is_scalar();
  if (!a_scalar && !b_scalar) require_same_shape("sub", a, b);
  const Array& big = a_scalar ? b : a;
  std::vector<double> out(big.size());
  const auto av = a.data();
  const auto bv = b.data();
  if (b_scalar) {
    const double s = bv[0];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - s;
  } else if (a_scalar) {
    const double s = av[0];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = s - bv[i];
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  }
  const bool tracked = wants_grad({&a, &b});
  Array y = make_output(big.shape(), std::move(out), tracked);
  if (tracked) {
    auto an = a.node_ptr(), bn = b.node_ptr(), yn = y.node_ptr();
    Tape::active()->record("sub", {an, bn}, yn, [an, bn, yn] {
      const auto& dy = yn->grad;
      if (an->requires_grad) {
        an->accumulate_grad_alloc();
        if (an->data.size() == 1 && dy.size() > 1) {
          double s = 0;
          for (double g : dy) s += g;
          an->grad[0] += s;
        } else {
          acc(an->grad, dy);
        }
      }
      if (bn->requires_grad) {
        bn->accumulate_grad_alloc();
        if (bn->data.size() == 1 && dy.size() > 1) {
          double s = 0;
          for (double g : dy) s += g;
          bn->grad[0] -= s;
        } else {
          for (std::size_t i = 0; i < dy.size(); ++i) bn->grad[i] -= dy[i];
        }
      }
    });
  }
  return y;
}

Array mul(const Array& a, const Array& b) {
  const bool b_scalar = b.is_scalar() && !a.is_scalar();
  const bool a_scalar = a.is_scalar() && !b.is_scalar();
  if (!a_scalar && !b_scalar) require_same_shape("mul", a, b);
  const Array& big = a_scalar ? b : a;
  std::vector<double> out(big.size());
  const auto av = a.data();
  const auto bv = b.data();
  if (b_scalar) {
    const double s = bv[0];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
  } else if (a_scalar) {
    const double s = av[0];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * bv[i];
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  }
  const bool tracked = wants_grad({&a, &b});
  Array y = make_output(big.shape(), std::move(out), tracked);
  if (tracked) {
    auto an = a.node_ptr(), bn = b.node_ptr(), yn = y.node_ptr();
    Tape::active()->record("mul", {an, bn}, yn, [an, bn, yn] {
      const auto& dy = yn->grad;
      const bool bs = bn->data.size() == 1 && dy.size() > 1;
      const bool as = an->data.size() == 1 && dy.size() > 1;
      if (an->requires_grad) {
        an->accumulate_grad_alloc();
        if (as) {
          double s = 0;
          for (std::size_t i = 0; i < dy.size(); ++i) s += dy[i] * bn->data[i];
          an->grad[0] += s;
        } else if (bs) {
          const double bvv = bn->data[0];
          for (std::size_t i = 0; i < dy.size(); ++i) an->grad[i] += dy[i] * bvv;
        } else {
          for (std::size_t i = 0; i < dy.size(); ++i) an->grad[i] += dy[i] * bn->data[i];
        }
      }
      if (bn->requires_grad) {
        bn->accumulate_grad_alloc();
        if (bs) {
          double s = 0;
          for (std::size_t i = 0; i < dy.size(); ++i) s += dy[i] * an->data[i];
          bn->grad[0] += s;
        } else if (as) {
          const double avv = an->data[0];
          for (std::size_t i = 0; i < dy.size(); ++i) bn->grad[i] += dy[i] * avv;
        } else {
          for (std::size_t i = 0; i < dy.size(); ++i) bn->grad[i] += dy[i] * an->data[i];
        }
      }
    });
  }
  return y;
}

Array scale(const Array& a, double factor) {
  std::vector<double> out(a.size());
  const auto av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
  const bool tracked = wants_grad({&a});
  Array y = make_output(a.shape(), std::move(out), tracked);
  if (tracked) {
    auto an = a.node_ptr(), yn = y.node_ptr();
    Tape::active()->record("scale", {an}, yn, [an, yn, factor] {
      an->accumulate_grad_alloc();
      const auto& dy = yn->grad;
      for (std::size_t i = 0; i < dy.size(); ++i) an->grad[i] += dy[i] * factor;
    });
  }
  return y;
}

Array add_scalar(const Array& a, double constant) {
  std::vector<double> out(a.size());
  const auto av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + constant;
  const bool tracked = wants_grad({&a});
  Array y = make_output(a.shape(), std::move(out), tracked);
  if (tracked) {
    auto an = a.node_ptr(), yn = y.node_ptr();
    Tape::active()->record("add_scalar", {an}, yn, [an, yn] {
      an->accumulate_grad_alloc();
      acc(an->grad, yn->grad);
    });
  }
  return y;
}

// ---- linear algebra ----------------------------------------------------------

Array matmul(const Array& a, const Array& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
    throw ContractError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                        shape_str(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
  kernels::matmul_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  const bool tracked = wants_grad({&a, &b});
  Array y = make_output(Shape{m, n}, std::move(out), tracked);
  if (tracked) {
    auto an = a.node_ptr(), bn = b.node_ptr(), yn = y.node_ptr();
    Tape::active()->record("matmul", {an, bn}, yn, [an, bn, yn, m, k, n] {
      const double* dy = yn->grad.data();
      if (an->requires_grad) {
        an->accumulate_grad_alloc();
        // da(m,k) += dy(m,n) * b^T(n,k)
        std::vector<double> bt(static_cast<std::size_t>(n) * k);
        kernels::transpose(bn->data.data(), bt.data(), k, n);
        kernels::matmul_acc(dy, bt.data(), an->grad.data(), m, n, k);
      }
      if (bn->requires_grad) {
        bn->accumulate_grad_alloc();
        // db(k,n) += a^T(k,m) * dy(m,n)
        kernels::matmul_tn_acc(an->data.data(), dy, bn->grad.data(), m, k, n);
      }
    });
  }
  return y;
}

Array affine(const Array& x, const Array& w, const Array& bias) {
  if (x.ndim() != 2 || w.ndim() != 2 || x.dim(1) != w.dim(0)) {
    throw ContractError("affine: incompatible shapes " + shape_str(x.shape()) + " x " +
                        shape_str(w.shape()));
  }
  if (bias.ndim() != 1 || bias.dim(0) != w.dim(1)) {
    throw ContractError("affine: bias shape " + shape_str(bias.shape()) + " does not match " +
                        shape_str(w.shape()));
  }
  const int n = x.dim(0), d = x.dim(1), e = w.dim(1);
  std::vector<double> out(static_cast<std::size_t>(n) * e);
  const auto bv = bias.data();
  for (int i = 0; i < n; ++i) {
    std::memcpy(out.data() + static_cast<std::size_t>(i) * e, bv.data(), sizeof(double) * e);
  }
  kernels::matmul_acc(x.data().data(), w.data().data(), out.data(), n, d, e);
  const bool tracked = wants_grad({&x, &w, &bias});
  Array y = make_output(Shape{n, e}, std::move(out), tracked);
  if (tracked) {
    auto xn = x.node_ptr(), wn = w.node_ptr(), bn = bias.node_ptr(), yn = y.node_ptr();
    Tape::active()->record("affine", {xn, wn, bn}, yn, [xn, wn, bn, yn, n, d, e] {
      const double* dy = yn->grad.data();
      if (xn->requires_grad) {
        xn->accumulate_grad_alloc();
        std::vector<double> wt(static_cast<std::size_t>(e) * d);
        kernels::transpose(wn->data.data(), wt.data(), d, e);
        kernels::matmul_acc(dy, wt.data(), xn->grad.data(), n, e, d);
      }
      if (wn->requires_grad) {
        wn->accumulate_grad_alloc();
        kernels::matmul_tn_acc(xn->data.data(), dy, wn->grad.data(), n, d, e);
      }
      if (bn->requires_grad) {
        bn->accumulate_grad_alloc();
        for (int i = 0; i < n; ++i) {
          const double* row = dy + static_cast<std::size_t>(i) * e;
          for (int j = 0; j < e; ++j) bn->grad[j] += row[j];
        }
      }
    });
  }
  return y;
}

// ---- conv2d ------------------------------------------------------------------

namespace {

struct ConvDims {
  int n, c, h, w;      // input
  int o, kh, kw, pad;  // filter
  int oh, ow;          // output
};

ConvDims conv_dims(const Array& x, const Array& w, const Array& bias, int pad) {
  if (x.ndim() != 4 || w.ndim() != 4) {
    throw ContractError("conv2d: expected 4-d input and filter, got " + shape_str(x.shape()) +
                        " and " + shape_str(w.shape()));
  }
  if (x.dim(1) != w.dim(1)) {
    throw ContractError("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " +
                        shape_str(w.shape()));
  }
  if (bias.ndim() != 1 || bias.dim(0) != w.dim(0)) {
    throw ContractError("conv2d: bias shape " + shape_str(bias.shape()) +
                        " does not match filter " + shape_str(w.shape()));
  }
  if (pad < 0) throw ContractError("conv2d: negative padding");
  ConvDims d;
  d.n = x.dim(0);
  d.c = x.dim(1);
  d.h = x.dim(2);
  d.w = x.dim(3);
  d.o = w.dim(0);
  d.kh = w.dim(2);
  d.kw = w.dim(3);
  d.pad = pad;
  d.oh = d.h + 2 * pad - d.kh + 1;
  d.ow = d.w + 2 * pad - d.kw + 1;
  if (d.oh <= 0 || d.ow <= 0) {
    throw ContractError("conv2d: filter larger than padded input");
  }
  return d;
}

// X_col layout: (c*kh*kw, oh*ow), one sample.
void im2col(const double* x, const ConvDims& d, double* col) {
  const int hw = d.oh * d.ow;
  for (int c = 0; c < d.c; ++c) {
    const double* xc = x + static_cast<std::size_t>(c) * d.h * d.w;
    for (int ki = 0; ki < d.kh; ++ki) {
      for (int kj = 0; kj < d.kw; ++kj) {
        double* row = col + static_cast<std::size_t>((c * d.kh + ki) * d.kw + kj) * hw;
        for (int oy = 0; oy < d.oh; ++oy) {
          const int iy = oy + ki - d.pad;
          double* dst = row + static_cast<std::size_t>(oy) * d.ow;
          if (iy < 0 || iy >= d.h) {
            std::memset(dst, 0, sizeof(double) * d.ow);
            continue;
          }
          const double* src_row = xc + static_cast<std::size_t>(iy) * d.w;
          for (int ox = 0; ox < d.ow; ++ox) {
            const int ix = ox + kj - d.pad;
            dst[ox] = (ix >= 0 && ix < d.w) ? src_row[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_acc(const double* col, const ConvDims& d, double* dx) {
  const int hw = d.oh * d.ow;
  for (int c = 0; c < d.c; ++c) {
    double* xc = dx + static_cast<std::size_t>(c) * d.h * d.w;
    for (int ki = 0; ki < d.kh; ++ki) {
      for (int kj = 0; kj < d.kw; ++kj) {
        const double* row = col + static_cast<std::size_t>((c * d.kh + ki) * d.kw + kj) * hw;
        for (int oy = 0; oy < d.oh; ++oy) {
          const int iy = oy + ki - d.pad;
          if (iy < 0 || iy >= d.h) continue;
          const double* src = row + static_cast<std::size_t>(oy) * d.ow;
          double* dst = xc + static_cast<std::size_t>(iy) * d.w;
          for (int ox = 0; ox < d.ow; ++ox) {
            const int ix = ox + kj - d.pad;
            if (ix >= 0 && ix < d.w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Array conv2d(const Array& x, const Array& w, const Array& bias, int pad) {
  const ConvDims d = conv_dims(x, w, bias, pad);
  const int hw = d.oh * d.ow;
  const int ckk = d.c * d.kh * d.kw;
  std::vector<double> out(static_cast<std::size_t>(d.n) * d.o * hw);
  const auto bv = bias.data();
  // im2col writes every element, so the scratch is resized, never cleared.
  thread_local std::vector<double> col;
  col.resize(static_cast<std::size_t>(ckk) * hw);
  for (int s = 0; s < d.n; ++s) {
    const double* xs = x.data().data() + static_cast<std::size_t>(s) * d.c * d.h * d.w;
    double* os = out.data() + static_cast<std::size_t>(s) * d.o * hw;
    im2col(xs, d, col.data());
    for (int o = 0; o < d.o; ++o) {
      double* orow = os + static_cast<std::size_t>(o) * hw;
      const double b = bv[o];
      for (int i = 0; i < hw; ++i) orow[i] = b;
    }
    kernels::matmul_acc(w.data().data(), col.data(), os, d.o, ckk, hw);
  }
  const bool tracked = wants_grad({&x, &w, &bias});
  Array y = make_output(Shape{d.n, d.o, d.oh, d.ow}, std::move(out), tracked);
  if (tracked) {
    auto xn = x.node_ptr(), wn = w.node_ptr(), bn = bias.node_ptr(), yn = y.node_ptr();
    Tape::active()->record("conv2d", {xn, wn, bn}, yn, [xn, wn, bn, yn, d, hw, ckk] {
      const double* dy = yn->grad.data();
      const bool need_dx = xn->requires_grad;
      const bool need_dw = wn->requires_grad;
      const bool need_db = bn->requires_grad;
      if (need_dx) xn->accumulate_grad_alloc();
      if (need_dw) wn->accumulate_grad_alloc();
      if (need_db) bn->accumulate_grad_alloc();
      std::vector<double> bcol(static_cast<std::size_t>(ckk) * hw);
      std::vector<double> colt;
      std::vector<double> dcol;
      if (need_dw) colt.resize(static_cast<std::size_t>(hw) * ckk);
      if (need_dx) dcol.resize(static_cast<std::size_t>(ckk) * hw);
      for (int s = 0; s < d.n; ++s) {
        const double* dys = dy + static_cast<std::size_t>(s) * d.o * hw;
        if (need_dw || need_dx) {
          // X_col is recomputed from the stored input; it is cheaper than
          // caching one copy per recorded op.
          im2col(xn->data.data() + static_cast<std::size_t>(s) * d.c * d.h * d.w, d, bcol.data());
        }
        if (need_dw) {
          kernels::transpose(bcol.data(), colt.data(), ckk, hw);
          kernels::matmul_acc(dys, colt.data(), wn->grad.data(), d.o, hw, ckk);
        }
        if (need_dx) {
          std::fill(dcol.begin(), dcol.end(), 0.0);
          kernels::matmul_tn_acc(wn->data.data(), dys, dcol.data(), d.o, ckk, hw);
          col2im_acc(dcol.data(), d, xn->grad.data() + static_cast<std::size_t>(s) * d.c * d.h * d.w);
        }
        if (need_db) {
          for (int o = 0; o < d.o; ++o) {
            const double* row = dys + static_cast<std::size_t>(o) * hw;
            double acc_v = 0;
            for (int i = 0; i < hw; ++i) acc_v += row[i];
            bn->grad[o] += acc_v;
          }
        }
      }
    });
  }
  return y;
}

// ---- nonlinearities ------------------------------------------------------------

Array relu(const Array& a) {
  std::vector<double> out(a.size());
  const auto av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
  const bool tracked = wants_grad({&a});
  Array y = make_output(a.shape(), std::move(out), tracked);
  if (tracked) {
    auto an = a.node_ptr(), yn = y.node_ptr();
    Tape::active()->record("relu", {an}, yn, [an, yn] {
      an->accumulate_grad_alloc();
      const auto& dy = yn->grad;
      for (std::size_t i = 0; i < dy.size(); ++i) {
        if (an->data[i] > 0.0) an->grad[i] += dy[i];
      }
    });
  }
  return y;
}

Array silu(const Array& a) {
  std::vector<double> out(a.size());
  const auto av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double sg = 1.0 / (1.0 + std::exp(-av[i]));
    out[i] = av[i] * sg;
  }
  const bool tracked = wants_grad({&a});
  Array y = make_output(a.shape(), std::move(out), tracked);
  if (tracked) {
    auto an = a.node_ptr(), yn = y.node_ptr();
    Tape::active()->record("silu", {an}, yn, [an, yn] {
      an->accumulate_grad_alloc();
      const auto& dy = yn->grad;
      for (std::size_t i = 0; i < dy.size(); ++i) {
        const double xv = an->data[i];
        const double sg = 1.0 / (1.0 + std::exp(-xv));
        an->grad[i] += dy[i] * sg * (1.0 + xv * (1.0 - sg));
      }
    });
  }
  return y;
}

// ---- reductions ------------------------------------------------------------------

Array mean(const Array& a) {
  const std::size_t n = a.size();
  double s = 0;
  for (double v : a.data()) s += v;
  const bool tracked = wants_grad({&a});
  Array y = make_output(Shape{1}, {s / static_cast<double>(n)}, tracked);
  if (tracked) {
    auto an = a.node_ptr(), yn = y.node_ptr();
    Tape::active()->record("mean", {an}, yn, [an, yn, n] {
      an->accumulate_grad_alloc();
      const double g = yn->grad[0] / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) an->grad[i] += g;
    });
  }
  return y;
}

Array sum(const Array& a) {
  double s = 0;
  for (double v : a.data()) s += v;
  const bool tracked = wants_grad({&a});
  Array y = make_output(Shape{1}, {s}, tracked);
  if (tracked) {
    auto an = a.node_ptr(), yn = y.node_ptr();
    Tape::active()->record("sum", {an}, yn, [an, yn] {
      an->accumulate_grad_alloc();
      const double g = yn->grad[0];
      for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g;
    });
  }
  return y;
}

Array mse(const Array& a, const Array& b) {
  require_same_shape("mse", a, b);
  const std::size_t n = a.size();
  const auto av = a.data();
  const auto bv = b.data();
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double diff = av[i] - bv[i];
    s += diff * diff;
  }
  const bool tracked = wants_grad({&a, &b});
  Array y = make_output(Shape{1}, {s / static_cast<double>(n)}, tracked);
  if (tracked) {
    auto an = a.node_ptr(), bn = b.node_ptr(), yn = y.node_ptr();
    Tape::active()->record("mse", {an, bn}, yn, [an, bn, yn, n] {
      const double g = yn->grad[0] * 2.0 / static_cast<double>(n);
      if (an->requires_grad) {
        an->accumulate_grad_alloc();
        for (std::size_t i = 0; i < n; ++i) an->grad[i] += g * (an->data[i] - bn->data[i]);
      }
      if (bn->requires_grad) {
        bn->accumulate_grad_alloc();
        for (std::size_t i = 0; i < n; ++i) bn->grad[i] -= g * (an->data[i] - bn->data[i]);
      }
    });
  }
  return y;
}

// ---- softmax family ---------------------------------------------------------------

namespace {

struct RowView {
  std::size_t rows;
  std::size_t cols;
};

RowView last_dim_rows(const Array& a, const char* op) {
  if (a.ndim() < 1) throw ContractError(std::string(op) + ": needs at least one dimension");
  const std::size_t cols = static_cast<std::size_t>(a.dim(a.ndim() - 1));
  return RowView{a.size() / cols, cols};
}

}  // namespace

Array softmax(const Array& a) {
  const RowView rv = last_dim_rows(a, "softmax");
  std::vector<double> out(a.size());
  const auto av = a.data();
  for (std::size_t r = 0; r < rv.rows; ++r) {
    const double* in = av.data() + r * rv.cols;
    double* y = out.data() + r * rv.cols;
    double mx = in[0];
    for (std::size_t j = 1; j < rv.cols; ++j) mx = std::max(mx, in[j]);
    double denom = 0;
    for (std::size_t j = 0; j < rv.cols; ++j) {
      y[j] = std::exp(in[j] - mx);
      denom += y[j];
    }
    const double inv = 1.0 / denom;
    for (std::size_t j = 0; j < rv.cols; ++j) y[j] *= inv;
  }
  const bool tracked = wants_grad({&a});
  Array y = make_output(a.shape(), std::move(out), tracked);
  if (tracked) {
    auto an = a.node_ptr(), yn = y.node_ptr();
    Tape::active()->record("softmax", {an}, yn, [an, yn, rv] {
      an->accumulate_grad_alloc();
      const auto& dy = yn->grad;
      for (std::size_t r = 0; r < rv.rows; ++r) {
        const double* yv = yn->data.data() + r * rv.cols;
        const double* g = dy.data() + r * rv.cols;
        double dot = 0;
        for (std::size_t j = 0; j < rv.cols; ++j) dot += g[j] * yv[j];
        double* dst = an->grad.data() + r * rv.cols;
        for (std::size_t j = 0; j < rv.cols; ++j) dst[j] += yv[j] * (g[j] - dot);
      }
    });
  }
  return y;
}

Array log_softmax(const Array& a) {
  const RowView rv = last_dim_rows(a, "log_softmax");
  std::vector<double> out(a.size());
  const auto av = a.data();
  for (std::size_t r = 0; r < rv.rows; ++r) {
    const double* in = av.data() + r * rv.cols;
    double* y = out.data() + r * rv.cols;
    double mx = in[0];
    for (std::size_t j = 1; j < rv.cols; ++j) mx = std::max(mx, in[j]);
    double denom = 0;
    for (std::size_t j = 0; j < rv.cols; ++j) denom += std::exp(in[j] - mx);
    const double lse = mx + std::log(denom);
    for (std::size_t j = 0; j < rv.cols; ++j) y[j] = in[j] - lse;
  }
  const bool tracked = wants_grad({&a});
  Array y = make_output(a.shape(), std::move(out), tracked);
  if (tracked) {
    auto an = a.node_ptr(), yn = y.node_ptr();
    Tape::active()->record("log_softmax", {an}, yn, [an, yn, rv] {
      an->accumulate_grad_alloc();
      const auto& dy = yn->grad;
      for (std::size_t r = 0; r < rv.rows; ++r) {
        const double* lp = yn->data.data() + r * rv.cols;
        const double* g = dy.data() + r * rv.cols;
        double gsum = 0;
        for (std::size_t j = 0; j < rv.cols; ++j) gsum += g[j];
        double* dst = an->grad.data() + r * rv.cols;
        for (std::size_t j = 0; j < rv.cols; ++j) dst[j] += g[j] - std::exp(lp[j]) * gsum;
      }
    });
  }
  return y;
}

// ---- lookup / gather -------------------------------------------------------------

Array embedding_lookup(const Array& table, std::span<const int> indices) {
  if (table.ndim() != 2) {
    throw ContractError("embedding_lookup: table must be 2-d, got " + shape_str(table.shape()));
  }
  const int rows = table.dim(0), dim = table.dim(1);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= rows) {
      throw ContractError("embedding_lookup: index " + std::to_string(indices[i]) +
                          " out of range [0," + std::to_string(rows) + ") at position " +
                          std::to_string(i));
    }
  }
  const int n = static_cast<int>(indices.size());
  std::vector<double> out(static_cast<std::size_t>(n) * dim);
  const auto tv = table.data();
  for (int i = 0; i < n; ++i) {
    std::memcpy(out.data() + static_cast<std::size_t>(i) * dim,
                tv.data() + static_cast<std::size_t>(indices[i]) * dim, sizeof(double) * dim);
  }
  const bool tracked = wants_grad({&table});
  Array y = make_output(Shape{n, dim}, std::move(out), tracked);
  if (tracked) {
    auto tn = table.node_ptr(), yn = y.node_ptr();
    std::vector<int> idx(indices.begin(), indices.end());
    Tape::active()->record("embedding_lookup", {tn}, yn, [tn, yn, idx, dim] {
      tn->accumulate_grad_alloc();
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const double* g = yn->grad.data() + i * dim;
        double* dst = tn->grad.data() + static_cast<std::size_t>(idx[i]) * dim;
        for (int j = 0; j < dim; ++j) dst[j] += g[j];
      }
    });
  }
  return y;
}

Array pick_class(const Array& rows, std::span<const int> labels) {
  if (rows.ndim() != 2) {
    throw ContractError("pick_class: expected 2-d rows, got " + shape_str(rows.shape()));
  }
  const int n = rows.dim(0), k = rows.dim(1);
  if (static_cast<int>(labels.size()) != n) {
    throw ContractError("pick_class: " + std::to_string(labels.size()) + " labels for " +
                        std::to_string(n) + " rows");
  }
  for (int i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= k) {
      throw ContractError("pick_class: label " + std::to_string(labels[i]) +
                          " out of range [0," + std::to_string(k) + ")");
    }
  }
  std::vector<double> out(static_cast<std::size_t>(n));
  const auto rvd = rows.data();
  for (int i = 0; i < n; ++i) out[i] = rvd[static_cast<std::size_t>(i) * k + labels[i]];
  const bool tracked = wants_grad({&rows});
  Array y = make_output(Shape{n}, std::move(out), tracked);
  if (tracked) {
    auto rn = rows.node_ptr(), yn = y.node_ptr();
    std::vector<int> lab(labels.begin(), labels.end());
    Tape::active()->record("pick_class", {rn}, yn, [rn, yn, lab, k] {
      rn->accumulate_grad_alloc();
      for (std::size_t i = 0; i < lab.size(); ++i) {
        rn->grad[i * k + lab[i]] += yn->grad[i];
      }
    });
  }
  return y;
}

// ---- spatial helpers ----------------------------------------------------------------

namespace {

void require_nchw(const Array& x, const char* op) {
  if (x.ndim() != 4) {
    throw ContractError(std::string(op) + ": expected 4-d NCHW, got " + shape_str(x.shape()));
  }
}

}  // namespace

Array avg_pool2(const Array& x) {
  require_nchw(x, "avg_pool2");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0) {
    throw ContractError("avg_pool2: spatial dims must be even, got " + shape_str(x.shape()));
  }
  const int oh = h / 2, ow = w / 2;
  std::vector<double> out(static_cast<std::size_t>(n) * c * oh * ow);
  const auto xv = x.data();
  for (int img = 0; img < n * c; ++img) {
    const double* src = xv.data() + static_cast<std::size_t>(img) * h * w;
    double* dst = out.data() + static_cast<std::size_t>(img) * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const double* p = src + static_cast<std::size_t>(2 * oy) * w + 2 * ox;
        dst[static_cast<std::size_t>(oy) * ow + ox] = 0.25 * (p[0] + p[1] + p[w] + p[w + 1]);
      }
    }
  }
  const bool tracked = wants_grad({&x});
  Array y = make_output(Shape{n, c, oh, ow}, std::move(out), tracked);
  if (tracked) {
    auto xn = x.node_ptr(), yn = y.node_ptr();
    Tape::active()->record("avg_pool2", {xn, }, yn, [xn, yn, n, c, h, w, oh, ow] {
      xn->accumulate_grad_alloc();
      for (int img = 0; img < n * c; ++img) {
        const double* g = yn->grad.data() + static_cast<std::size_t>(img) * oh * ow;
        double* dst = xn->grad.data() + static_cast<std::size_t>(img) * h * w;
        for (int oy = 0; oy < oh; ++oy) {
          for (int ox = 0; ox < ow; ++ox) {
            const double gv = 0.25 * g[static_cast<std::size_t>(oy) * ow + ox];
            double* p = dst + static_cast<std::size_t>(2 * oy) * w + 2 * ox;
            p[0] += gv;
            p[1] += gv;
            p[w] += gv;
            p[w + 1] += gv;
          }
        }
      }
    });
  }
  return y;
}

Array upsample_nearest2(const Array& x) {
  require_nchw(x, "upsample_nearest2");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int oh = h * 2, ow = w * 2;
  std::vector<double> out(static_cast<std::size_t>(n) * c * oh * ow);
  const auto xv = x.data();
  for (int img = 0; img < n * c; ++img) {
    const double* src = xv.data() + static_cast<std::size_t>(img) * h * w;
    double* dst = out.data() + static_cast<std::size_t>(img) * oh * ow;
    for (int y0 = 0; y0 < h; ++y0) {
      for (int x0 = 0; x0 < w; ++x0) {
        const double v = src[static_cast<std::size_t>(y0) * w + x0];
        double* p = dst + static_cast<std::size_t>(2 * y0) * ow + 2 * x0;
        p[0] = v;
        p[1] = v;
        p[ow] = v;
        p[ow + 1] = v;
      }
    }
  }
  const bool tracked = wants_grad({&x});
  Array y = make_output(Shape{n, c, oh, ow}, std::move(out), tracked);
  if (tracked) {
    auto xn = x.node_ptr(), yn = y.node_ptr();
    Tape::active()->record("upsample_nearest2", {xn}, yn, [xn, yn, n, c, h, w, oh, ow] {
      xn->accumulate_grad_alloc();
      for (int img = 0; img < n * c; ++img) {
        const double* g = yn->grad.data() + static_cast<std::size_t>(img) * oh * ow;
        double* dst = xn->grad.data() + static_cast<std::size_t>(img) * h * w;
        for (int y0 = 0; y0 < h; ++y0) {
          for (int x0 = 0; x0 < w; ++x0) {
            const double* p = g + static_cast<std::size_t>(2 * y0) * ow + 2 * x0;
            dst[static_cast<std::size_t>(y0) * w + x0] += p[0] + p[1] + p[ow] + p[ow + 1];
          }
        }
      }
    });
  }
  return y;
}

Array concat_channels(const Array& a, const Array& b) {
  require_nchw(a, "concat_channels");
  require_nchw(b, "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw ContractError("concat_channels: incompatible shapes " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
  }
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1), h = a.dim(2), w = a.dim(3);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<double> out(static_cast<std::size_t>(n) * (ca + cb) * plane);
  const auto av = a.data();
  const auto bv = b.data();
  for (int s = 0; s < n; ++s) {
    std::memcpy(out.data() + static_cast<std::size_t>(s) * (ca + cb) * plane,
                av.data() + static_cast<std::size_t>(s) * ca * plane, sizeof(double) * ca * plane);
    std::memcpy(out.data() + (static_cast<std::size_t>(s) * (ca + cb) + ca) * plane,
                bv.data() + static_cast<std::size_t>(s) * cb * plane, sizeof(double) * cb * plane);
  }
  const bool tracked = wants_grad({&a, &b});
  Array y = make_output(Shape{n, ca + cb, h, w}, std::move(out), tracked);
  if (tracked) {
    auto an = a.node_ptr(), bn = b.node_ptr(), yn = y.node_ptr();
    Tape::active()->record("concat_channels", {an, bn}, yn, [an, bn, yn, n, ca, cb, plane] {
      for (int s = 0; s < n; ++s) {
        const double* g = yn->grad.data() + static_cast<std::size_t>(s) * (ca + cb) * plane;
        if (an->requires_grad) {
          an->accumulate_grad_alloc();
          double* dst = an->grad.data() + static_cast<std::size_t>(s) * ca * plane;
          for (std::size_t i = 0; i < ca * plane; ++i) dst[i] += g[i];
        }
        if (bn->requires_grad) {
          bn->accumulate_grad_alloc();
          double* dst = bn->grad.data() + static_cast<std::size_t>(s) * cb * plane;
          const double* gb = g + static_cast<std::size_t>(ca) * plane;
          for (std::size_t i = 0; i < cb * plane; ++i) dst[i] += gb[i];
        }
      }
    });
  }
  return y;
}

Array add_channel_bias(const Array& x, const Array& bias) {
  require_nchw(x, "add_channel_bias");
  if (bias.ndim() != 2 || bias.dim(0) != x.dim(0) || bias.dim(1) != x.dim(1)) {
    throw ContractError("add_channel_bias: bias " + shape_str(bias.shape()) +
                        " does not match input " + shape_str(x.shape()));
  }
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<double> out(x.size());
  const auto xv = x.data();
  const auto bv = bias.data();
  for (int s = 0; s < n; ++s) {
    for (int ch = 0; ch < c; ++ch) {
      const double bvv = bv[static_cast<std::size_t>(s) * c + ch];
      const double* src = xv.data() + (static_cast<std::size_t>(s) * c + ch) * plane;
      double* dst = out.data() + (static_cast<std::size_t>(s) * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) dst[i] = src[i] + bvv;
    }
  }
  const bool tracked = wants_grad({&x, &bias});
  Array y = make_output(x.shape(), std::move(out), tracked);
  if (tracked) {
    auto xn = x.node_ptr(), bn = bias.node_ptr(), yn = y.node_ptr();
    Tape::active()->record("add_channel_bias", {xn, bn}, yn, [xn, bn, yn, n, c, plane] {
      if (xn->requires_grad) {
        xn->accumulate_grad_alloc();
        acc(xn->grad, yn->grad);
      }
      if (bn->requires_grad) {
        bn->accumulate_grad_alloc();
        for (int s = 0; s < n; ++s) {
          for (int ch = 0; ch < c; ++ch) {
            const double* g = yn->grad.data() + (static_cast<std::size_t>(s) * c + ch) * plane;
            double acc_v = 0;
            for (std::size_t i = 0; i < plane; ++i) acc_v += g[i];
            bn->grad[static_cast<std::size_t>(s) * c + ch] += acc_v;
          }
        }
      }
    });
  }
  return y;
}

Array reshape(const Array& a, Shape new_shape) {
  if (shape_numel(new_shape) != a.size()) {
    throw ContractError("reshape: " + shape_str(a.shape()) + " cannot become " +
                        shape_str(new_shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  const bool tracked = wants_grad({&a});
  Array y = make_output(std::move(new_shape), std::move(out), tracked);
  if (tracked) {
    auto an = a.node_ptr(), yn = y.node_ptr();
    Tape::active()->record("reshape", {an}, yn, [an, yn] {
      an->accumulate_grad_alloc();
      acc(an->grad, yn->grad);
    });
  }
  return y;
}

Array detach(const Array& a) { return a.clone_detached(); }

// ---- verification harness --------------------------------------------------------

bool all_finite(const Array& a) {
  for (double v : a.data()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

double grad_check(const std::function<Array()>& f, std::vector<Array> params, double epsilon) {
  if (epsilon <= 0) throw ContractError("grad_check: epsilon must be positive");
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Array loss = f();
    if (!loss.is_scalar()) {
      throw ContractError("grad_check: function must return a scalar, got " +
                          shape_str(loss.shape()));
    }
    tape.backward(loss);
    for (Array& p : params) {
      if (p.has_grad()) {
        auto g = p.grad();
        analytic.emplace_back(g.begin(), g.end());
      } else {
        analytic.emplace_back(p.size(), 0.0);
      }
      p.zero_grad();
    }
  }
  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto data = params[pi].data_mut();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + epsilon;
      const double fp = f().item();
      data[i] = orig - epsilon;
      const double fm = f().item();
      data[i] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw NumericError("grad_check: non-finite value at parameter " + std::to_string(pi) +
                           " coordinate " + std::to_string(i));
      }
      const double numeric = (fp - fm) / (2.0 * epsilon);
      const double a = analytic[pi][i];
      if (!std::isfinite(a)) {
        throw NumericError("grad_check: non-finite analytic gradient at parameter " +
                           std::to_string(pi) + " coordinate " + std::to_string(i));
      }
      const double rel =
          std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace synthkd
