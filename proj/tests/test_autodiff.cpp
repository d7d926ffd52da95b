#include <doctest.h>

#include <cmath>
#include <limits>
#include <set>
#include <vector>

#include "fd_support.hpp"
#include "synthkd/array.hpp"
#include "synthkd/rng.hpp"

using namespace synthkd;

namespace {

// Independent forward oracles.
std::vector<double> naive_matmul(const Array& a, const Array& b) {
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> c(static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double acc = 0;
      for (int kk = 0; kk < k; ++kk) acc += a.at(i * k + kk) * b.at(kk * n + j);
      c[static_cast<std::size_t>(i) * n + j] = acc;
    }
  }
  return c;
}

std::vector<double> naive_conv2d(const Array& x, const Array& w, const Array& bias, int pad) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int o = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int oh = h + 2 * pad - kh + 1, ow = wd + 2 * pad - kw + 1;
  std::vector<double> out(static_cast<std::size_t>(n) * o * oh * ow, 0.0);
  for (int s = 0; s < n; ++s) {
    for (int oc = 0; oc < o; ++oc) {
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          double acc = bias.at(oc);
          for (int ic = 0; ic < c; ++ic) {
            for (int ky = 0; ky < kh; ++ky) {
              for (int kx = 0; kx < kw; ++kx) {
                const int iy = oy + ky - pad, ix = ox + kx - pad;
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                acc += w.at(((static_cast<std::size_t>(oc) * c + ic) * kh + ky) * kw + kx) *
                       x.at(((static_cast<std::size_t>(s) * c + ic) * h + iy) * wd + ix);
              }
            }
          }
          out[((static_cast<std::size_t>(s) * o + oc) * oh + oy) * ow + ox] = acc;
        }
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("softmax trivial values and properties") {
  Array y = softmax(Array::from_data({3}, {0.0, 0.0, 0.0}));
  for (int i = 0; i < 3; ++i) CHECK(y.at(i) == doctest::Approx(1.0 / 3.0).epsilon(1e-14));

  Rng rng(101);
  for (int trial = 0; trial < 50; ++trial) {
    const int k = rng.uniform_int(2, 12);
    Array x = fd::random_array({k}, rng, false, 3.0);
    Array s = softmax(x);
    double total = 0;
    for (int i = 0; i < k; ++i) {
      CHECK(s.at(i) > 0.0);
      CHECK(s.at(i) < 1.0);
      total += s.at(i);
    }
    CHECK(std::abs(total - 1.0) < 1e-12);
  }
}

TEST_CASE("mse identity and mean/sum-of-squares gradients") {
  Rng rng(7);
  Array x = fd::random_array({5}, rng, false);
  CHECK(mse(x, x).item() == 0.0);

  {
    Array v = Array::from_data({4}, {1.0, -2.0, 0.5, 3.0}, true);
    Tape tape;
    Array loss = mean(v);
    tape.backward(loss);
    for (int i = 0; i < 4; ++i) CHECK(v.grad()[i] == doctest::Approx(0.25));
  }
  {
    Array v = Array::from_data({2}, {1.0, 2.0}, true);
    Tape tape;
    Array loss = sum(mul(v, v));
    tape.backward(loss);
    CHECK(v.grad()[0] == doctest::Approx(2.0));
    CHECK(v.grad()[1] == doctest::Approx(4.0));
  }
}

TEST_CASE("matmul forward oracle and finite-difference gradient") {
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    Array a = fd::random_array({2, 3}, rng);
    Array b = fd::random_array({3, 2}, rng);
    const std::vector<double> want = naive_matmul(a, b);
    Array c = matmul(a, b);
    for (std::size_t i = 0; i < want.size(); ++i) {
      CHECK(c.at(i) == doctest::Approx(want[i]).epsilon(1e-12));
    }
    Rng probe_rng(rng.next_u64());
    std::vector<double> pr(4);
    for (double& v : pr) v = probe_rng.normal();
    Array r = Array::from_data({2, 2}, std::move(pr));
    const double err = fd::check([&] { return sum(mul(matmul(a, b), r)); }, {a, b});
    CHECK(err < 1e-6);
  }
}

TEST_CASE("conv2d matches a brute-force oracle") {
  Rng rng(13);
  for (int pad : {0, 1, 2}) {
    Array x = fd::random_array({2, 3, 5, 6}, rng);
    Array w = fd::random_array({4, 3, 3, 3}, rng);
    Array b = fd::random_array({4}, rng);
    const std::vector<double> want = naive_conv2d(x, w, b, pad);
    Array y = conv2d(x, w, b, pad);
    REQUIRE(y.size() == want.size());
    for (std::size_t i = 0; i < want.size(); ++i) {
      CHECK(y.at(i) == doctest::Approx(want[i]).epsilon(1e-11));
    }
  }
}

TEST_CASE("per-primitive finite-difference spot checks") {
  Rng rng(17);
  auto run = [&](const char* name, auto&& build, std::vector<Array> params, double tol = 1e-5) {
    CAPTURE(name);
    // One fixed probe per check; grad_check re-evaluates f many times and the
    // reduction must stay the same function throughout.
    Rng probe_rng(rng.next_u64());
    Array shape_probe = build();
    std::vector<double> r(shape_probe.size());
    for (double& v : r) v = probe_rng.normal();
    Array fixed = Array::from_data(shape_probe.shape(), std::move(r));
    const double err =
        fd::check([&] { return sum(mul(build(), fixed)); }, params, 1e-5);
    CHECK(err < tol);
  };

  for (int trial = 0; trial < 5; ++trial) {
    {
      Array a = fd::random_array({3, 4}, rng), b = fd::random_array({3, 4}, rng);
      run("add", [&] { return add(a, b); }, {a, b});
      run("sub", [&] { return sub(a, b); }, {a, b});
      run("mul", [&] { return mul(a, b); }, {a, b});
    }
    {
      Array a = fd::random_array({6}, rng);
      Array s = fd::random_array({1}, rng);
      run("add scalar-array", [&] { return add(a, s); }, {a, s});
      run("mul scalar-array", [&] { return mul(a, s); }, {a, s});
      run("scale", [&] { return scale(a, 1.7); }, {a});
      run("add_scalar", [&] { return add_scalar(a, -0.3); }, {a});
    }
    {
      Array x = fd::random_array({3, 4}, rng);
      Array w = fd::random_array({4, 5}, rng);
      Array b = fd::random_array({5}, rng);
      run("affine", [&] { return affine(x, w, b); }, {x, w, b});
    }
    {
      Array x = fd::random_array({2, 2, 4, 4}, rng);
      Array w = fd::random_array({3, 2, 3, 3}, rng);
      Array b = fd::random_array({3}, rng);
      run("conv2d", [&] { return conv2d(x, w, b, 1); }, {x, w, b});
    }
    {
      Array x = fd::random_array_off_kink({3, 5}, rng);
      run("relu", [&] { return relu(x); }, {x});
      Array y = fd::random_array({3, 5}, rng);
      run("silu", [&] { return silu(y); }, {y});
    }
    {
      Array x = fd::random_array({7}, rng);
      run("mean", [&] { return mean(x); }, {x});
      run("sum", [&] { return sum(x); }, {x});
      Array y = fd::random_array({7}, rng);
      run("mse", [&] { return mse(x, y); }, {x, y});
      run("softmax", [&] { return softmax(x); }, {x});
      run("log_softmax", [&] { return log_softmax(x); }, {x});
    }
    {
      Array table = fd::random_array({6, 3}, rng);
      const std::vector<int> idx{1, 4, 1, 0};  // duplicate row accumulates
      run("embedding_lookup", [&] { return embedding_lookup(table, idx); }, {table});
      Array rows = fd::random_array({4, 5}, rng);
      const std::vector<int> labels{0, 4, 2, 2};
      run("pick_class", [&] { return pick_class(rows, labels); }, {rows});
    }
    {
      Array x = fd::random_array({2, 3, 4, 4}, rng);
      run("avg_pool2", [&] { return avg_pool2(x); }, {x});
      run("upsample_nearest2", [&] { return upsample_nearest2(x); }, {x});
      Array y = fd::random_array({2, 2, 4, 4}, rng);
      run("concat_channels", [&] { return concat_channels(x, y); }, {x, y});
      Array bias = fd::random_array({2, 3}, rng);
      run("add_channel_bias", [&] { return add_channel_bias(x, bias); }, {x, bias});
      run("reshape", [&] { return reshape(x, {2, 48}); }, {x});
    }
  }
}

TEST_CASE("three-layer perceptron gradients pass finite differences") {
  Rng rng(23);
  Array x = fd::random_array({4, 6}, rng, false);
  Array w1 = fd::random_array({6, 8}, rng), b1 = fd::random_array({8}, rng);
  Array w2 = fd::random_array({8, 8}, rng), b2 = fd::random_array({8}, rng);
  Array w3 = fd::random_array({8, 3}, rng), b3 = fd::random_array({3}, rng);
  Array target = fd::random_array({4, 3}, rng, false);
  auto f = [&] {
    Array h1 = silu(affine(x, w1, b1));
    Array h2 = silu(affine(h1, w2, b2));
    return mse(affine(h2, w3, b3), target);
  };
  const double err = fd::check(f, {w1, b1, w2, b2, w3, b3});
  CHECK(err < 1e-5);
}

TEST_CASE("grad_check on x squared is exact to rounding") {
  Array x = Array::from_data({1}, {3.0}, true);
  const double err = grad_check([&] { return mul(x, x); }, std::vector<Array>{x}, 1e-6);
  CHECK(err < 1e-8);
}

TEST_CASE("shared subexpressions accumulate gradients") {
  // loss = sum(h) + sum(h*h) with h shared must equal the gradient of the
  // duplicated-subgraph version where h is built twice.
  Rng rng(29);
  Array x = fd::random_array({5}, rng);
  Array w = fd::random_array({5}, rng);

  std::vector<double> shared_grad, duplicated_grad;
  {
    Tape tape;
    Array h = mul(x, w);
    Array loss = add(sum(h), sum(mul(h, h)));
    tape.backward(loss);
    auto g = w.grad();
    shared_grad.assign(g.begin(), g.end());
    w.zero_grad();
    x.zero_grad();
  }
  {
    Tape tape;
    Array h1 = mul(x, w);
    Array h2 = mul(x, w);
    Array loss = add(sum(h1), sum(mul(h2, h2)));
    tape.backward(loss);
    auto g = w.grad();
    duplicated_grad.assign(g.begin(), g.end());
  }
  for (std::size_t i = 0; i < shared_grad.size(); ++i) {
    CHECK(shared_grad[i] == doctest::Approx(duplicated_grad[i]).epsilon(1e-12));
  }
}

TEST_CASE("tape records in topological order") {
  Rng rng(31);
  Array x = fd::random_array({3}, rng);
  Array w = fd::random_array({3}, rng);
  Tape tape;
  Array h = mul(x, w);
  Array loss = sum(add(h, relu(h)));
  tape.backward(loss);
  std::set<std::uint64_t> produced;
  for (const Tape::OpInfo& op : tape.ops()) {
    for (std::uint64_t in : op.input_ids) {
      // every input is either a leaf (never an output) or already produced
      const bool is_leaf = in == x.node_id() || in == w.node_id();
      CHECK((is_leaf || produced.count(in) > 0));
    }
    produced.insert(op.output_id);
  }
}

TEST_CASE("error contracts") {
  Rng rng(37);
  Array a = fd::random_array({2, 3}, rng);
  Array b = fd::random_array({3, 3}, rng);

  SUBCASE("shape mismatch names both shapes") {
    try {
      add(a, b);
      FAIL("expected ContractError");
    } catch (const ContractError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("(2,3)") != std::string::npos);
      CHECK(msg.find("(3,3)") != std::string::npos);
    }
  }
  SUBCASE("matmul mismatch") { CHECK_THROWS_AS(matmul(a, a), ContractError); }
  SUBCASE("non-scalar loss") {
    Tape tape;
    Array y = mul(a, a);
    CHECK_THROWS_AS(tape.backward(y), ContractError);
  }
  SUBCASE("repeated backward without reset") {
    Tape tape;
    Array loss = sum(mul(a, a));
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), ContractError);
    tape.reset();  // after reset the tape is empty, so backward still refuses
    CHECK_THROWS_AS(tape.backward(loss), ContractError);
  }
  SUBCASE("detached loss") {
    Array loss_outside = sum(mul(a, a));  // built with no active tape
    Tape tape;
    Array y = sum(mul(a, a));
    (void)y;
    CHECK_THROWS_AS(tape.backward(loss_outside), ContractError);
  }
  SUBCASE("empty tape") {
    Tape tape;
    CHECK_THROWS_AS(tape.backward(Array::scalar(1.0)), ContractError);
  }
  SUBCASE("mutation while recording") {
    Tape tape;
    Array y = sum(mul(a, a));
    (void)y;
    CHECK_THROWS_AS(a.data_mut(), ContractError);
  }
  SUBCASE("nested tapes") {
    Tape tape;
    CHECK_THROWS_AS(Tape{}, ContractError);
  }
  SUBCASE("embedding index out of range") {
    Array table = fd::random_array({4, 2}, rng);
    const std::vector<int> idx{5};
    CHECK_THROWS_AS(embedding_lookup(table, idx), ContractError);
  }
  SUBCASE("grad_check rejects non-finite") {
    Array x = Array::from_data({1}, {1.0}, true);
    CHECK_THROWS_AS(
        grad_check([&] { return scale(x, std::numeric_limits<double>::infinity()); },
                   std::vector<Array>{x}, 1e-6),
        NumericError);
  }
}

TEST_CASE("inference without a tape records nothing and allows reuse") {
  Rng rng(41);
  Array w = fd::random_array({3, 3}, rng);
  Array x = fd::random_array({2, 3}, rng, false);
  Array y = matmul(x, w);  // no active tape
  CHECK_FALSE(y.requires_grad());
  {
    Tape tape;
    Array loss = sum(matmul(x, w));
    CHECK(tape.num_ops() == 2);
    tape.backward(loss);
    CHECK(w.has_grad());
  }
}
