#include <doctest.h>

#include <cmath>
#include <vector>

#include "fd_support.hpp"
#include "synthkd/data.hpp"
#include "synthkd/diffusion.hpp"
#include "synthkd/rng.hpp"

using namespace synthkd;

namespace {

Denoiser perturbed_denoiser(int num_classes, std::uint64_t seed) {
  Denoiser model(num_classes, 6, 16, seed);
  Rng rng(Rng::mix({seed, 0xabcdefull}));
  for (auto& [name, p] : model.parameters()) {
    auto d = p.data_mut();
    for (double& v : d) v += 0.05 * rng.normal();
  }
  return model;
}

}  // namespace

TEST_CASE("make_schedule: two-step product example") {
  // beta linear from 0.1 to 0.2 over 2 steps -> alpha_bar = {0.9, 0.72}
  NoiseSchedule s = make_schedule(2, 0.1, 0.2);
  CHECK(s.beta[0] == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(s.beta[1] == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(s.alpha_bar[0] == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(s.alpha_bar[1] == doctest::Approx(0.72).epsilon(1e-15));
  CHECK(s.sigma[0] == doctest::Approx(std::sqrt(0.1)));
}

TEST_CASE("make_schedule: defaults are monotone with tiny terminal alpha_bar") {
  NoiseSchedule s = make_schedule(400, 2.5e-4, 0.05);
  for (int t = 1; t < 400; ++t) {
    CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
    CHECK(s.alpha_bar[t] > 0.0);
    CHECK(s.alpha_bar[t] < 1.0);
    CHECK(s.beta[t] > 0.0);
    CHECK(s.beta[t] < 1.0);
    CHECK(s.sigma[t] > 0.0);
  }
  CHECK(s.alpha_bar[399] < 0.01);
}

TEST_CASE("make_schedule: parameter bounds") {
  CHECK_THROWS_AS(make_schedule(1, 0.1, 0.2), ContractError);
  CHECK_THROWS_AS(make_schedule(10, 0.0, 0.2), ContractError);
  CHECK_THROWS_AS(make_schedule(10, 0.3, 0.2), ContractError);
  CHECK_THROWS_AS(make_schedule(10, 0.3, 1.0), ContractError);
}

TEST_CASE("forward_noise: limits and plug-in values") {
  SUBCASE("alpha_bar near 1 returns x0") {
    NoiseSchedule s = make_schedule(2, 1e-14, 2e-14);
    Rng rng(5);
    Array x0 = fd::random_array({2, 2}, rng, false);
    Array eps = fd::random_array({2, 2}, rng, false);
    Array xt = forward_noise(x0, 1, eps, s);
    for (std::size_t i = 0; i < xt.size(); ++i) {
      CHECK(xt.at(i) == doctest::Approx(x0.at(i)).epsilon(1e-6));
    }
  }
  SUBCASE("alpha_bar 0.25 with ones and zero noise gives 0.5") {
    // beta = {0.5, 0.5} -> alpha_bar_2 = 0.25
    NoiseSchedule s = make_schedule(2, 0.5, 0.5000000001);
    Array x0({4}, 1.0);
    Array eps({4}, 0.0);
    Array xt = forward_noise(x0, 2, eps, s);
    for (int i = 0; i < 4; ++i) CHECK(xt.at(i) == doctest::Approx(0.5).epsilon(1e-9));
  }
  SUBCASE("out-of-range timestep") {
    NoiseSchedule s = make_schedule(4, 0.1, 0.2);
    Array x0({2}, 0.0);
    CHECK_THROWS_AS(forward_noise(x0, 0, x0, s), ContractError);
    CHECK_THROWS_AS(forward_noise(x0, 5, x0, s), ContractError);
  }
}

TEST_CASE("forward_noise: Monte-Carlo marginal statistics (small)") {
  NoiseSchedule s = make_schedule(100, 1e-3, 0.05);
  Rng rng(77);
  const int t = 60;
  const double ab = s.alpha_bar[t - 1];
  const int draws = 20000;
  Array x0 = Array::from_data({4}, {0.5, -0.25, 0.8, -1.0});
  double sum_c = 0, sumsq_c = 0;
  for (int d = 0; d < draws; ++d) {
    std::vector<double> ev(4);
    for (double& v : ev) v = rng.normal();
    Array xt = forward_noise(x0, t, Array::from_data({4}, std::move(ev)), s);
    for (int i = 0; i < 4; ++i) {
      const double centered = xt.at(i) - std::sqrt(ab) * x0.at(i);
      sum_c += centered;
      sumsq_c += centered * centered;
    }
  }
  const double n = 4.0 * draws;
  const double mean_c = sum_c / n;
  const double var_c = sumsq_c / n - mean_c * mean_c;
  const double want_var = 1.0 - ab;
  CHECK(std::abs(mean_c) < 3.0 * std::sqrt(want_var / n));
  CHECK(std::abs(var_c - want_var) < 3.0 * want_var * std::sqrt(2.0 / n));
}

TEST_CASE("guided_noise identities") {
  Rng rng(9);
  Array c = fd::random_array({2, 3}, rng, false);
  Array u = fd::random_array({2, 3}, rng, false);

  SUBCASE("s = 1 is bitwise the conditional prediction") {
    Array g = guided_noise(c, u, 1.0);
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(g.at(i) == c.at(i));
  }
  SUBCASE("equal predictions collapse for any s") {
    for (double s : {1.0, 2.0, 4.0, 8.0}) {
      Array g = guided_noise(c, c, s);
      for (std::size_t i = 0; i < g.size(); ++i) CHECK(g.at(i) == c.at(i));
    }
  }
  SUBCASE("plug-in: uncond 0, cond 1, s=2 gives 2") {
    Array zero({3}, 0.0);
    Array one({3}, 1.0);
    Array g = guided_noise(one, zero, 2.0);
    for (int i = 0; i < 3; ++i) CHECK(g.at(i) == doctest::Approx(2.0));
  }
  SUBCASE("linearity in both arguments") {
    Rng r2(10);
    for (int trial = 0; trial < 20; ++trial) {
      Array a = fd::random_array({5}, r2, false);
      Array b = fd::random_array({5}, r2, false);
      Array cc = fd::random_array({5}, r2, false);
      Array dd = fd::random_array({5}, r2, false);
      const double lam = r2.uniform() * 3 - 1.5;
      const double s = 1.0 + r2.uniform() * 6;
      Array lhs = guided_noise(add(a, scale(cc, lam)), add(b, scale(dd, lam)), s);
      Array rhs = add(guided_noise(a, b, s), scale(guided_noise(cc, dd, s), lam));
      for (int i = 0; i < 5; ++i) {
        CHECK(std::abs(lhs.at(i) - rhs.at(i)) < 1e-12);
      }
    }
  }
  SUBCASE("contracts") {
    CHECK_THROWS_AS(guided_noise(c, fd::random_array({3}, rng, false), 2.0), ContractError);
    CHECK_THROWS_AS(guided_noise(c, u, 0.5), ContractError);
  }
}

TEST_CASE("respace_schedule: identity respacing is bit-exact") {
  NoiseSchedule s = make_schedule(50, 1e-3, 0.04);
  SamplingSchedule full = respace_schedule(s, 50);
  REQUIRE(full.steps() == 50);
  for (int i = 0; i < 50; ++i) {
    CHECK(full.timesteps[i] == i + 1);
    CHECK(full.beta[i] == s.beta[i]);
    CHECK(full.alpha_bar[i] == s.alpha_bar[i]);
    CHECK(full.sigma[i] == s.sigma[i]);
  }
}

TEST_CASE("respace_schedule: subsequence structure") {
  NoiseSchedule s = make_schedule(400, 2.5e-4, 0.05);
  SamplingSchedule sub = respace_schedule(s, 100);
  REQUIRE(sub.steps() == 100);
  CHECK(sub.timesteps.front() == 4);
  CHECK(sub.timesteps.back() == 400);
  for (int i = 1; i < 100; ++i) CHECK(sub.timesteps[i] > sub.timesteps[i - 1]);
  // respaced beta telescope: product of (1-beta') equals terminal alpha_bar
  double prod = 1.0;
  for (double b : sub.beta) prod *= 1.0 - b;
  CHECK(prod == doctest::Approx(s.alpha_bar.back()).epsilon(1e-12));
}

TEST_CASE("respaced sampling at t_sample == t_train equals unrespaced sampling") {
  NoiseSchedule s = make_schedule(12, 0.01, 0.2);
  Denoiser model = perturbed_denoiser(3, 21);
  model.set_t_max(12);

  // Respaced path through the sampler.
  SamplingSchedule sch = respace_schedule(s, 12);
  Rng rng_a(999);
  std::vector<double> init(kImagePixels);
  for (double& v : init) v = rng_a.normal();
  Array xa = Array::from_data({1, 1, kImageSize, kImageSize}, init);
  for (int i = sch.steps(); i >= 1; --i) {
    xa = denoise_step(model, xa, i, Condition::cls(1), 2.0, sch, rng_a);
  }

  // Unrespaced reference: the published update rule evaluated directly from
  // the original schedule arrays, same rng stream and draw order.
  Rng rng_b(999);
  std::vector<double> x(kImagePixels);
  for (double& v : x) v = rng_b.normal();
  for (int t = 12; t >= 1; --t) {
    Array xb = Array::from_data({1, 1, kImageSize, kImageSize}, x);
    Array eps_c = model.forward(xb, t, Condition::cls(1));
    Array eps_u = model.forward(xb, t, Condition::null());
    const double beta = s.beta[t - 1];
    const double ab = s.alpha_bar[t - 1];
    const double inv_sqrt_alpha = 1.0 / std::sqrt(1.0 - beta);
    const double eps_coef = beta / std::sqrt(1.0 - ab);
    for (int p = 0; p < kImagePixels; ++p) {
      const double eh = eps_u.at(p) + 2.0 * (eps_c.at(p) - eps_u.at(p));
      x[p] = (x[p] - eps_coef * eh) * inv_sqrt_alpha;
      if (t > 1) x[p] += s.sigma[t - 1] * rng_b.normal();
    }
  }
  for (int p = 0; p < kImagePixels; ++p) CHECK(xa.at(p) == x[p]);
}

TEST_CASE("denoise_step: final step adds no noise") {
  NoiseSchedule s = make_schedule(8, 0.01, 0.1);
  SamplingSchedule sch = respace_schedule(s, 8);
  Rng ra(1), rb(987654);  // different rng streams
  Denoiser model = perturbed_denoiser(2, 33);
  model.set_t_max(8);
  Rng init(5);
  std::vector<double> data(kImagePixels);
  for (double& v : data) v = init.normal();
  Array x = Array::from_data({1, 1, kImageSize, kImageSize}, std::move(data));
  Array a = denoise_step(model, x, 1, Condition::cls(0), 1.0, sch, ra);
  Array b = denoise_step(model, x, 1, Condition::cls(0), 1.0, sch, rb);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.at(i) == b.at(i));
}

TEST_CASE("denoise_step: fixed seed gives identical output") {
  NoiseSchedule s = make_schedule(8, 0.01, 0.1);
  SamplingSchedule sch = respace_schedule(s, 8);
  Denoiser model = perturbed_denoiser(2, 34);
  model.set_t_max(8);
  Rng init(6);
  std::vector<double> data(kImagePixels);
  for (double& v : data) v = init.normal();
  Array x = Array::from_data({1, 1, kImageSize, kImageSize}, std::move(data));
  Rng r1(42), r2(42);
  Array a = denoise_step(model, x, 5, Condition::cls(1), 3.0, sch, r1);
  Array b = denoise_step(model, x, 5, Condition::cls(1), 3.0, sch, r2);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.at(i) == b.at(i));
}

namespace {

// Linear fake model for the hand-evaluated chain: eps(x) = a*x + b.
struct LinearEps {
  double a, b;
  std::vector<double> eval(const std::vector<double>& x) const {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = a * x[i] + b;
    return out;
  }
};

}  // namespace

TEST_CASE("two-step chain matches a hand-evaluated closed form") {
  // Schedule: T=2, beta = {0.1, 0.2}; linear "denoiser" eps = a*x + b with
  // cond == uncond so guidance is the identity. The chain is evaluated by
  // hand from the update rule and compared against denoise_step.
  NoiseSchedule s = make_schedule(2, 0.1, 0.2);
  SamplingSchedule sch = respace_schedule(s, 2);
  const LinearEps fake{0.3, -0.05};

  // capture the z draws the sampler will see by replaying the same stream
  Rng peek(4242);
  std::vector<double> z2(4);
  for (double& v : z2) v = peek.normal();

  const std::vector<double> x2{1.0, -0.5, 0.25, 2.0};

  // hand evaluation, step i=2 (t=2): alpha = 0.8, ab = 0.72, sigma = sqrt(0.2)
  std::vector<double> x1(4), x0(4);
  for (int i = 0; i < 4; ++i) {
    const double eps2 = fake.a * x2[i] + fake.b;
    x1[i] = (x2[i] - 0.2 / std::sqrt(1.0 - 0.72) * eps2) / std::sqrt(0.8) +
            std::sqrt(0.2) * z2[i];
  }
  // step i=1 (t=1): alpha = 0.9, ab = 0.9, final step so no noise
  for (int i = 0; i < 4; ++i) {
    const double eps1 = fake.a * x1[i] + fake.b;
    x0[i] = (x1[i] - 0.1 / std::sqrt(1.0 - 0.9) * eps1) / std::sqrt(0.9);
  }

  // sampler path via denoise_step's math entry point
  Rng rng(4242);
  std::vector<double> x = x2;
  for (int i = 2; i >= 1; --i) {
    Array eps_hat = Array::from_data({4}, fake.eval(x));
    Array next = denoise_step(Array::from_data({4}, x), i, sch, eps_hat, rng);
    x.assign(next.data().begin(), next.data().end());
  }
  for (int i = 0; i < 4; ++i) {
    CHECK(std::abs(x[i] - x0[i]) < 1e-10);
  }
}

TEST_CASE("generate_dataset: counts, determinism, worker independence") {
  NoiseSchedule s = make_schedule(20, 0.01, 0.15);
  Denoiser model = perturbed_denoiser(4, 55);
  model.set_t_max(20);

  GenConfig gc;
  gc.s = 2.0;
  gc.t_sample = 6;
  gc.per_class = 3;
  gc.seed = 77;

  SyntheticDataset a = generate_dataset(model, s, gc);
  CHECK(a.count() == 12);
  std::vector<int> per_label(4, 0);
  for (std::uint16_t l : a.labels) per_label[l]++;
  for (int c = 0; c < 4; ++c) CHECK(per_label[c] == 3);
  CHECK(a.prov.denoiser_digest == params_digest(model.parameters()));
  CHECK(a.prov.schedule_digest == s.digest());

  SUBCASE("same config twice is byte-identical") {
    SyntheticDataset b = generate_dataset(model, s, gc);
    CHECK(encode_skds(a) == encode_skds(b));
  }
  SUBCASE("worker count does not change bytes") {
    GenConfig gc4 = gc;
    gc4.workers = 4;
    gc4.batch = 5;  // odd batch to shift compositions
    SyntheticDataset b = generate_dataset(model, s, gc4);
    CHECK(encode_skds(a) == encode_skds(b));
  }
  SUBCASE("s = 1 equals conditional-only sampling") {
    GenConfig g1 = gc;
    g1.s = 1.0;
    SyntheticDataset b = generate_dataset(model, s, g1);
    // reference: single chains with guidance identity
    // (covered by the s==1 shortcut; just check determinism here)
    SyntheticDataset c = generate_dataset(model, s, g1);
    CHECK(encode_skds(b) == encode_skds(c));
  }
  SUBCASE("config contracts") {
    GenConfig bad = gc;
    bad.s = 0.5;
    CHECK_THROWS_AS(generate_dataset(model, s, bad), ContractError);
    bad = gc;
    bad.t_sample = 21;
    CHECK_THROWS_AS(generate_dataset(model, s, bad), ContractError);
  }
}

TEST_CASE("schedule properties hold for random constructible parameters") {
  Rng rng(4242);
  for (int trial = 0; trial < 50; ++trial) {
    const int t_train = rng.uniform_int(2, 300);
    const double bmin = 1e-5 + rng.uniform() * 0.01;
    const double bmax = bmin + 1e-4 + rng.uniform() * 0.3;
    NoiseSchedule s = make_schedule(t_train, bmin, bmax);
    for (int t = 0; t < t_train; ++t) {
      CHECK(s.sigma[t] > 0.0);
      CHECK(s.alpha_bar[t] > 0.0);
      CHECK(s.alpha_bar[t] < 1.0);
      if (t > 0) CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
    }
  }
}

TEST_CASE("generate_dataset aborts after three failed sampling attempts") {
  // a model with exploded weights drives every chain non-finite
  NoiseSchedule s = make_schedule(6, 0.01, 0.1);
  Denoiser model(2, 4, 8, 1);
  for (auto& [name, p] : model.parameters()) {
    auto d = p.data_mut();
    for (double& v : d) v = 1e250;
  }
  model.set_t_max(6);
  GenConfig gc;
  gc.s = 2.0;
  gc.t_sample = 3;
  gc.per_class = 1;
  gc.seed = 3;
  CHECK_THROWS_AS(generate_dataset(model, s, gc), NumericError);
}

TEST_CASE("train_denoiser: initial loss is about 1 and conditioning gradients behave") {
  ToySpec spec;
  spec.num_classes = 3;
  spec.per_class_train = 40;
  spec.per_class_test = 5;
  ToyPair toy = generate_toy(spec);
  NoiseSchedule s = make_schedule(50, 1e-3, 0.05);

  Denoiser model(3, 6, 16, 3);
  const double initial = eval_denoiser_loss(model, toy.train, s, 123, 256);
  // zero-init head predicts 0 against unit-variance noise
  CHECK(initial == doctest::Approx(1.0).epsilon(0.05));

  DenoiserTrainConfig tc;
  tc.epochs = 2;
  tc.batch = 32;
  tc.lr = 2e-3;
  tc.cond_dropout = 0.1;
  tc.seed = 9;
  DenoiserTrainResult r = train_denoiser(model, toy.train, s, tc);
  CHECK(r.initial_eval == doctest::Approx(1.0).epsilon(0.05));
  CHECK(r.epoch_loss.size() == 2);
  CHECK(r.final_eval < r.initial_eval);
}

TEST_CASE("cond_dropout 0 leaves the null embedding row untouched") {
  ToySpec spec;
  spec.num_classes = 3;
  spec.per_class_train = 16;
  spec.per_class_test = 4;
  ToyPair toy = generate_toy(spec);
  NoiseSchedule s = make_schedule(20, 1e-3, 0.05);
  Denoiser model(3, 6, 16, 3);

  std::vector<double> null_row_before;
  for (const auto& [name, p] : model.parameters()) {
    if (name == "class_table") {
      auto d = p.data();
      null_row_before.assign(d.begin() + 3 * 16, d.begin() + 4 * 16);
    }
  }
  DenoiserTrainConfig tc;
  tc.epochs = 1;
  tc.batch = 16;
  tc.cond_dropout = 0.0;
  tc.seed = 4;
  train_denoiser(model, toy.train, s, tc);
  for (const auto& [name, p] : model.parameters()) {
    if (name == "class_table") {
      auto d = p.data();
      for (int i = 0; i < 16; ++i) {
        // row K only moves through f32 rounding at save time
        CHECK(d[3 * 16 + i] ==
              doctest::Approx(null_row_before[i]).epsilon(1e-7));
      }
    }
  }
}
