#include <doctest.h>

#include <cmath>
#include <vector>

#include "fd_support.hpp"
#include "synthkd/nets.hpp"
#include "synthkd/rng.hpp"

using namespace synthkd;

namespace {

Array random_image_batch(int n, Rng& rng) {
  std::vector<double> data(static_cast<std::size_t>(n) * kImagePixels);
  for (double& v : data) v = rng.normal();
  return Array::from_data({n, 1, kImageSize, kImageSize}, std::move(data));
}

void perturb_all(const NamedParams& params, Rng& rng, double scale) {
  for (const auto& [name, p] : params) {
    Array handle = p;
    auto d = handle.data_mut();
    for (double& v : d) v += scale * rng.normal();
  }
}

}  // namespace

TEST_CASE("zero-initialized output layer predicts zero noise") {
  Rng rng(1);
  Denoiser model(10, 8, 16, 42);
  Array x = random_image_batch(3, rng);
  const std::vector<int> ts{1, 17, 400};
  const std::vector<Condition> cs{Condition::cls(0), Condition::null(), Condition::cls(9)};
  Array y = model.forward(x, ts, cs);
  REQUIRE(y.shape() == x.shape());
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(y.at(i) == 0.0);
}

TEST_CASE("denoiser forward is deterministic and shape-invariant across (t,c)") {
  Rng rng(2);
  Denoiser model(6, 8, 16, 7);
  perturb_all(model.parameters(), rng, 0.05);
  Array x = random_image_batch(2, rng);
  for (int t : {1, 50, 200}) {
    for (int c = -1; c < 6; c += 3) {
      const Condition cond = c < 0 ? Condition::null() : Condition::cls(c);
      Array a = model.forward(x, t, cond);
      Array b = model.forward(x, t, cond);
      REQUIRE(a.shape() == x.shape());
      for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.at(i) == b.at(i));
    }
  }
}

TEST_CASE("conditioning is non-degenerate after perturbation") {
  Rng rng(3);
  Denoiser model(6, 8, 16, 7);
  perturb_all(model.parameters(), rng, 0.05);
  Array x = random_image_batch(1, rng);
  Array with_class = model.forward(x, 25, Condition::cls(2));
  Array with_null = model.forward(x, 25, Condition::null());
  double diff = 0;
  for (std::size_t i = 0; i < with_class.size(); ++i) {
    diff = std::max(diff, std::abs(with_class.at(i) - with_null.at(i)));
  }
  CHECK(diff > 1e-9);
}

TEST_CASE("denoiser rejects out-of-range timesteps and classes") {
  Denoiser model(4, 8, 16, 5);
  model.set_t_max(100);
  Rng rng(4);
  Array x = random_image_batch(1, rng);
  CHECK_THROWS_AS(model.forward(x, 0, Condition::cls(0)), ContractError);
  CHECK_THROWS_AS(model.forward(x, 101, Condition::cls(0)), ContractError);
  CHECK_THROWS_AS(model.forward(x, 10, Condition::cls(4)), ContractError);
  CHECK_NOTHROW(model.forward(x, 10, Condition::null()));
}

TEST_CASE("class embedding table has num_classes + 1 rows") {
  Denoiser model(7, 8, 16, 5);
  for (const auto& [name, p] : model.parameters()) {
    if (name == "class_table") {
      CHECK(p.dim(0) == 8);
      CHECK(p.dim(1) == 16);
    }
  }
}

TEST_CASE("gradient of mean denoiser output passes grad_check") {
  Rng rng(5);
  Denoiser model(3, 4, 8, 9);
  perturb_all(model.parameters(), rng, 0.05);
  Array x = random_image_batch(1, rng);
  std::vector<Array> params;
  for (auto& [name, p] : model.parameters()) params.push_back(p);
  const double err = grad_check(
      [&] { return mean(model.forward(x, 13, Condition::cls(1))); }, params, 1e-5);
  CHECK(err < 1e-4);
}

TEST_CASE("classifier logits shape and zero-weight behavior") {
  Classifier model(Tier::S, 10, 3);
  // zero out every parameter: logits must be all zero -> softmax uniform
  for (auto& [name, p] : model.parameters()) {
    auto d = p.data_mut();
    for (double& v : d) v = 0.0;
  }
  Rng rng(6);
  Array x = random_image_batch(4, rng);
  Array logits = model.forward(x);
  REQUIRE(logits.shape() == Shape{4, 10});
  for (std::size_t i = 0; i < logits.size(); ++i) CHECK(logits.at(i) == 0.0);
  Array sm = softmax(logits);
  for (std::size_t i = 0; i < sm.size(); ++i) CHECK(sm.at(i) == doctest::Approx(0.1));
}

TEST_CASE("capacity tiers are strictly ordered by parameter count") {
  Classifier s(Tier::S, 10, 1), m(Tier::M, 10, 1), l(Tier::L, 10, 1);
  CHECK(s.parameter_count() < m.parameter_count());
  CHECK(m.parameter_count() < l.parameter_count());
}

TEST_CASE("classifier forward is independent of batch composition") {
  // The sampler and the determinism contract rely on per-sample results not
  // changing with the surrounding batch.
  Rng rng(8);
  Classifier model(Tier::S, 5, 11);
  Array batch = random_image_batch(6, rng);
  Array alone = Array::from_data({1, 1, kImageSize, kImageSize},
                                 {batch.data().begin() + 2 * kImagePixels,
                                  batch.data().begin() + 3 * kImagePixels});
  Array all_logits = model.forward(batch);
  Array one_logits = model.forward(alone);
  for (int j = 0; j < 5; ++j) {
    CHECK(one_logits.at(j) == all_logits.at(2 * 5 + j));
  }
}

TEST_CASE("f32 rounding makes parameters round-trip stable") {
  Classifier model(Tier::S, 4, 13);
  round_params_to_f32(model.parameters());
  for (const auto& [name, p] : model.parameters()) {
    for (double v : p.data()) {
      CHECK(static_cast<double>(static_cast<float>(v)) == v);
    }
  }
}
