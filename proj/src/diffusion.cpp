#include "synthkd/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <thread>

#include <nlohmann/json.hpp>

#include "synthkd/digest.hpp"
#include "synthkd/optim.hpp"

namespace synthkd {

// ---- schedule -------------------------------------------------------------

std::string NoiseSchedule::digest() const {
  nlohmann::json j;
  j["t_train"] = t_train;
  j["beta_min"] = beta_min;
  j["beta_max"] = beta_max;
  return sha256_hex(j.dump());
}

NoiseSchedule make_schedule(int t_train, double beta_min, double beta_max) {
  if (t_train < 2) throw ContractError("make_schedule: t_train must be at least 2");
  if (!(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0)) {
    throw ContractError("make_schedule: need 0 < beta_min < beta_max < 1");
  }
  NoiseSchedule s;
  s.t_train = t_train;
  s.beta_min = beta_min;
  s.beta_max = beta_max;
  s.beta.resize(t_train);
  s.alpha_bar.resize(t_train);
  s.sigma.resize(t_train);
  double prod = 1.0;
  for (int t = 1; t <= t_train; ++t) {
    const double beta = beta_min + (beta_max - beta_min) * (t - 1) / (t_train - 1);
    prod *= 1.0 - beta;
    s.beta[t - 1] = beta;
    s.alpha_bar[t - 1] = prod;
    s.sigma[t - 1] = std::sqrt(beta);
  }
  return s;
}

namespace {

void check_timestep(int t, const NoiseSchedule& schedule, const char* op) {
  if (t < 1 || t > schedule.t_train) {
    throw ContractError(std::string(op) + ": timestep " + std::to_string(t) + " outside [1," +
                        std::to_string(schedule.t_train) + "]");
  }
}

}  // namespace

Array forward_noise(const Array& x0, int t, const Array& eps, const NoiseSchedule& schedule) {
  check_timestep(t, schedule, "forward_noise");
  if (x0.shape() != eps.shape()) {
    throw ContractError("forward_noise: shape mismatch " + shape_str(x0.shape()) + " vs " +
                        shape_str(eps.shape()));
  }
  const double ab = schedule.alpha_bar[t - 1];
  return add(scale(x0, std::sqrt(ab)), scale(eps, std::sqrt(1.0 - ab)));
}

Array guided_noise(const Array& eps_cond, const Array& eps_uncond, double s) {
  if (eps_cond.shape() != eps_uncond.shape()) {
    throw ContractError("guided_noise: shape mismatch " + shape_str(eps_cond.shape()) + " vs " +
                        shape_str(eps_uncond.shape()));
  }
  if (s < 1.0) throw ContractError("guided_noise: guidance scale must be >= 1");
  if (s == 1.0) return eps_cond.clone_detached();  // no guidance, exact identity
  std::vector<double> out(eps_cond.size());
  const auto c = eps_cond.data();
  const auto u = eps_uncond.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = u[i] + s * (c[i] - u[i]);
  return Array::from_data(eps_cond.shape(), std::move(out));
}

SamplingSchedule respace_schedule(const NoiseSchedule& schedule, int t_sample) {
  if (t_sample < 1 || t_sample > schedule.t_train) {
    throw ContractError("respace_schedule: t_sample " + std::to_string(t_sample) +
                        " outside [1," + std::to_string(schedule.t_train) + "]");
  }
  SamplingSchedule out;
  out.timesteps.resize(t_sample);
  out.alpha_bar.resize(t_sample);
  out.beta.resize(t_sample);
  out.sigma.resize(t_sample);
  for (int i = 1; i <= t_sample; ++i) {
    const int t = static_cast<int>(
        std::lround(static_cast<double>(i) * schedule.t_train / t_sample));
    out.timesteps[i - 1] = t;
  }
  for (int i = 1; i < t_sample; ++i) {
    if (out.timesteps[i] <= out.timesteps[i - 1]) {
      throw ContractError("respace_schedule: non-ascending subsequence");
    }
  }
  for (int i = 1; i <= t_sample; ++i) {
    const int t = out.timesteps[i - 1];
    const int prev_t = (i == 1) ? 0 : out.timesteps[i - 2];
    out.alpha_bar[i - 1] = schedule.alpha_bar[t - 1];
    if (t == prev_t + 1) {
      // No compression at this position: keep the original coefficient so the
      // identity respacing is bit-exact.
      out.beta[i - 1] = schedule.beta[t - 1];
    } else {
      const double prev_ab = (i == 1) ? 1.0 : out.alpha_bar[i - 2];
      out.beta[i - 1] = 1.0 - schedule.alpha_bar[t - 1] / prev_ab;
    }
    out.sigma[i - 1] = std::sqrt(out.beta[i - 1]);
  }
  return out;
}

namespace {

struct StepCoeffs {
  double inv_sqrt_alpha;
  double eps_coef;
  double sigma;
};

StepCoeffs step_coeffs(const SamplingSchedule& sampling, int i) {
  if (i < 1 || i > sampling.steps()) {
    throw ContractError("denoise_step: position " + std::to_string(i) + " outside [1," +
                        std::to_string(sampling.steps()) + "]");
  }
  StepCoeffs c;
  const double beta = sampling.beta[i - 1];
  const double ab = sampling.alpha_bar[i - 1];
  c.inv_sqrt_alpha = 1.0 / std::sqrt(1.0 - beta);
  c.eps_coef = beta / std::sqrt(1.0 - ab);
  c.sigma = sampling.sigma[i - 1];
  return c;
}

// Shared by the public op and the batched sampler; rng may be null only when
// i == 1 (the final step adds no noise).
void ancestral_step_inplace(double* x, const double* eps_hat, std::size_t n,
                            const StepCoeffs& c, bool final_step, Rng* rng) {
  if (final_step) {
    for (std::size_t p = 0; p < n; ++p) {
      x[p] = (x[p] - c.eps_coef * eps_hat[p]) * c.inv_sqrt_alpha;
    }
  } else {
    for (std::size_t p = 0; p < n; ++p) {
      x[p] = (x[p] - c.eps_coef * eps_hat[p]) * c.inv_sqrt_alpha + c.sigma * rng->normal();
    }
  }
}

}  // namespace

Array denoise_step(const Array& x, int i, const SamplingSchedule& sampling, const Array& eps_hat,
                   Rng& rng) {
  if (x.shape() != eps_hat.shape()) {
    throw ContractError("denoise_step: shape mismatch " + shape_str(x.shape()) + " vs " +
                        shape_str(eps_hat.shape()));
  }
  const StepCoeffs c = step_coeffs(sampling, i);
  std::vector<double> out(x.data().begin(), x.data().end());
  ancestral_step_inplace(out.data(), eps_hat.data().data(), out.size(), c, i == 1, &rng);
  for (double v : out) {
    if (!std::isfinite(v)) {
      throw NumericError("denoise_step: non-finite value at chain position " + std::to_string(i) +
                         " (timestep " + std::to_string(sampling.timesteps[i - 1]) + ")");
    }
  }
  return Array::from_data(x.shape(), std::move(out));
}

Array denoise_step(const Denoiser& model, const Array& x_t, int i, Condition c, double s,
                   const SamplingSchedule& sampling, Rng& rng) {
  const int t = sampling.timesteps[i - 1];
  Array eps_cond = model.forward(x_t, t, c);
  Array eps_uncond = model.forward(x_t, t, Condition::null());
  Array eps_hat = guided_noise(eps_cond, eps_uncond, s);
  return denoise_step(x_t, i, sampling, eps_hat, rng);
}

// ---- training ----------------------------------------------------------------

double eval_denoiser_loss(const Denoiser& model, const RealDataset& data,
                          const NoiseSchedule& schedule, std::uint64_t seed, int num_samples) {
  if (data.count() == 0) throw ContractError("eval_denoiser_loss: empty dataset");
  Rng rng(Rng::mix({seed, 0x6576616cull}));
  const int batch = 64;
  double total = 0.0;
  std::size_t total_elems = 0;
  for (int done = 0; done < num_samples;) {
    const int b = std::min(batch, num_samples - done);
    std::vector<double> xt(static_cast<std::size_t>(b) * kImagePixels);
    std::vector<double> eps(static_cast<std::size_t>(b) * kImagePixels);
    std::vector<int> ts(b);
    std::vector<Condition> cs(b);
    for (int j = 0; j < b; ++j) {
      const std::size_t idx = static_cast<std::size_t>(done + j) % data.count();
      const double* x0 = data.image(idx);
      const int t = rng.uniform_int(1, schedule.t_train);
      const double a = std::sqrt(schedule.alpha_bar[t - 1]);
      const double bcoef = std::sqrt(1.0 - schedule.alpha_bar[t - 1]);
      double* xrow = xt.data() + static_cast<std::size_t>(j) * kImagePixels;
      double* erow = eps.data() + static_cast<std::size_t>(j) * kImagePixels;
      for (int p = 0; p < kImagePixels; ++p) {
        erow[p] = rng.normal();
        xrow[p] = a * x0[p] + bcoef * erow[p];
      }
      ts[j] = t;
      cs[j] = Condition::cls(data.labels[idx]);
    }
    Array pred = model.forward(
        Array::from_data(Shape{b, 1, kImageSize, kImageSize}, std::move(xt)), ts, cs);
    const auto pv = pred.data();
    for (std::size_t p = 0; p < pv.size(); ++p) {
      const double diff = pv[p] - eps[p];
      total += diff * diff;
    }
    total_elems += pv.size();
    done += b;
  }
  return total / static_cast<double>(total_elems);
}

DenoiserTrainResult train_denoiser(Denoiser& model, const RealDataset& train,
                                   const NoiseSchedule& schedule,
                                   const DenoiserTrainConfig& config) {
  if (config.cond_dropout < 0.0 || config.cond_dropout >= 1.0) {
    throw ContractError("train_denoiser: cond_dropout must be in [0,1)");
  }
  if (train.count() == 0) throw ContractError("train_denoiser: empty dataset");
  if (train.num_classes != model.num_classes()) {
    throw ContractError("train_denoiser: dataset has " + std::to_string(train.num_classes) +
                        " classes, model expects " + std::to_string(model.num_classes()));
  }
  model.set_t_max(schedule.t_train);

  DenoiserTrainResult result;
  const std::uint64_t probe_seed = Rng::mix({config.seed, 0x70726f6265ull});
  const int probe_n = static_cast<int>(std::min<std::size_t>(train.count(), 512));
  result.initial_eval = eval_denoiser_loss(model, train, schedule, probe_seed, probe_n);

  AdamOptimizer opt(model.parameters());
  Rng rng(Rng::mix({config.seed, 0x747261696eull}));
  std::vector<std::size_t> order(train.count());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  long step_index = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[rng.uniform_int(0, static_cast<int>(i) - 1)]);
    }
    double epoch_loss = 0.0;
    long epoch_batches = 0;
    for (std::size_t at = 0; at < order.size(); at += config.batch) {
      const int b = static_cast<int>(std::min<std::size_t>(config.batch, order.size() - at));
      std::vector<double> xt(static_cast<std::size_t>(b) * kImagePixels);
      std::vector<double> eps(static_cast<std::size_t>(b) * kImagePixels);
      std::vector<int> ts(b);
      std::vector<Condition> cs(b);
      for (int j = 0; j < b; ++j) {
        const double* x0 = train.image(order[at + j]);
        const int t = rng.uniform_int(1, schedule.t_train);
        const bool drop = rng.uniform() < config.cond_dropout;
        const double a = std::sqrt(schedule.alpha_bar[t - 1]);
        const double bcoef = std::sqrt(1.0 - schedule.alpha_bar[t - 1]);
        double* xrow = xt.data() + static_cast<std::size_t>(j) * kImagePixels;
        double* erow = eps.data() + static_cast<std::size_t>(j) * kImagePixels;
        for (int p = 0; p < kImagePixels; ++p) {
          erow[p] = rng.normal();
          xrow[p] = a * x0[p] + bcoef * erow[p];
        }
        ts[j] = t;
        cs[j] = drop ? Condition::null() : Condition::cls(train.labels[order[at + j]]);
      }
      Array xb = Array::from_data(Shape{b, 1, kImageSize, kImageSize}, std::move(xt));
      Array target = Array::from_data(Shape{b, 1, kImageSize, kImageSize}, std::move(eps));
      double loss_value;
      {
        Tape tape;
        Array loss = mse(model.forward(xb, ts, cs), target);
        loss_value = loss.item();
        if (!std::isfinite(loss_value)) {
          throw NumericError("train_denoiser: non-finite loss at step " +
                             std::to_string(step_index));
        }
        tape.backward(loss);
      }
      opt.step(config.lr);
      opt.zero_grad();
      epoch_loss += loss_value;
      ++epoch_batches;
      ++step_index;
    }
    result.epoch_loss.push_back(epoch_loss / static_cast<double>(epoch_batches));
  }
  result.final_eval = eval_denoiser_loss(model, train, schedule, probe_seed, probe_n);
  round_params_to_f32(model.parameters());
  return result;
}

// ---- generation --------------------------------------------------------------

namespace {

struct ChainResult {
  bool ok = false;
  std::vector<double> image;
};

// One complete chain for a single image; used for retries, and as the
// reference semantics the batched path must reproduce.
ChainResult run_single_chain(const Denoiser& model, const SamplingSchedule& sampling,
                             double s, int cls, std::uint64_t chain_seed) {
  Rng rng(chain_seed);
  std::vector<double> x(kImagePixels);
  for (double& v : x) v = rng.normal();
  for (int i = sampling.steps(); i >= 1; --i) {
    Array xb = Array::from_data(Shape{1, 1, kImageSize, kImageSize}, x);
    const int t = sampling.timesteps[i - 1];
    Array eps_c = model.forward(xb, t, Condition::cls(cls));
    Array eps_u = model.forward(xb, t, Condition::null());
    const StepCoeffs coeffs = step_coeffs(sampling, i);
    const auto cv = eps_c.data();
    const auto uv = eps_u.data();
    std::vector<double> eps_hat(kImagePixels);
    if (s == 1.0) {
      std::copy(cv.begin(), cv.end(), eps_hat.begin());
    } else {
      for (int p = 0; p < kImagePixels; ++p) eps_hat[p] = uv[p] + s * (cv[p] - uv[p]);
    }
    ancestral_step_inplace(x.data(), eps_hat.data(), x.size(), coeffs, i == 1, &rng);
    for (double v : x) {
      if (!std::isfinite(v)) return ChainResult{};
    }
  }
  for (double& v : x) v = std::clamp(v, -1.0, 1.0);
  return ChainResult{true, std::move(x)};
}

struct PendingImage {
  std::size_t global_index;
  int cls;
  int within_class_index;
};

}  // namespace

SyntheticDataset generate_dataset(const Denoiser& model, const NoiseSchedule& schedule,
                                  const GenConfig& config) {
  if (config.s < 1.0) throw ContractError("generate_dataset: guidance scale must be >= 1");
  if (config.per_class < 1) throw ContractError("generate_dataset: per_class must be positive");
  if (config.batch < 1 || config.workers < 1) {
    throw ContractError("generate_dataset: batch and workers must be positive");
  }
  std::vector<int> classes = config.classes;
  if (classes.empty()) {
    classes.resize(model.num_classes());
    for (int i = 0; i < model.num_classes(); ++i) classes[i] = i;
  }
  for (int c : classes) {
    if (c < 0 || c >= model.num_classes()) {
      throw ContractError("generate_dataset: class " + std::to_string(c) + " outside [0," +
                          std::to_string(model.num_classes()) + ")");
    }
  }
  const SamplingSchedule sampling = respace_schedule(schedule, config.t_sample);

  SyntheticDataset ds;
  ds.num_classes = model.num_classes();
  const std::size_t total = classes.size() * static_cast<std::size_t>(config.per_class);
  ds.pixels.assign(total * kImagePixels, 0);
  ds.labels.resize(total);
  ds.prov.s = config.s;
  ds.prov.t_sample = config.t_sample;
  ds.prov.seed = config.seed;
  ds.prov.denoiser_digest = params_digest(model.parameters());
  ds.prov.schedule_digest = schedule.digest();

  std::vector<PendingImage> images(total);
  {
    std::size_t g = 0;
    for (int cls : classes) {
      for (int j = 0; j < config.per_class; ++j) {
        images[g] = PendingImage{g, cls, j};
        ds.labels[g] = static_cast<std::uint16_t>(cls);
        ++g;
      }
    }
  }

  const int workers = std::min<int>(config.workers, static_cast<int>(total));
  std::vector<std::vector<std::size_t>> failed_per_worker(workers);

  auto worker_fn = [&](int w, std::size_t begin, std::size_t end) {
    std::vector<Rng> rngs;
    std::vector<std::vector<double>> xs;
    for (std::size_t at = begin; at < end; at += config.batch) {
      const std::size_t b = std::min<std::size_t>(config.batch, end - at);
      rngs.clear();
      xs.assign(b, std::vector<double>(kImagePixels));
      std::vector<Condition> conds(b);
      std::vector<Condition> nulls(b, Condition::null());
      std::vector<bool> bad(b, false);
      for (std::size_t j = 0; j < b; ++j) {
        const PendingImage& im = images[at + j];
        rngs.emplace_back(Rng::mix({config.seed, static_cast<std::uint64_t>(im.cls),
                                    static_cast<std::uint64_t>(im.within_class_index)}));
        for (double& v : xs[j]) v = rngs[j].normal();
        conds[j] = Condition::cls(im.cls);
      }
      for (int i = sampling.steps(); i >= 1; --i) {
        std::vector<double> flat(b * static_cast<std::size_t>(kImagePixels));
        for (std::size_t j = 0; j < b; ++j) {
          std::memcpy(flat.data() + j * kImagePixels, xs[j].data(),
                      sizeof(double) * kImagePixels);
        }
        Array xb = Array::from_data(
            Shape{static_cast<int>(b), 1, kImageSize, kImageSize}, std::move(flat));
        const int t = sampling.timesteps[i - 1];
        std::vector<int> ts(b, t);
        Array eps_c = model.forward(xb, ts, conds);
        Array eps_u = model.forward(xb, ts, nulls);
        const StepCoeffs coeffs = step_coeffs(sampling, i);
        const auto cv = eps_c.data();
        const auto uv = eps_u.data();
        std::vector<double> eps_hat(kImagePixels);
        for (std::size_t j = 0; j < b; ++j) {
          if (bad[j]) continue;
          const double* crow = cv.data() + j * kImagePixels;
          const double* urow = uv.data() + j * kImagePixels;
          if (config.s == 1.0) {
            std::memcpy(eps_hat.data(), crow, sizeof(double) * kImagePixels);
          } else {
            for (int p = 0; p < kImagePixels; ++p) {
              eps_hat[p] = urow[p] + config.s * (crow[p] - urow[p]);
            }
          }
          ancestral_step_inplace(xs[j].data(), eps_hat.data(), kImagePixels, coeffs, i == 1,
                                 &rngs[j]);
          for (double v : xs[j]) {
            if (!std::isfinite(v)) {
              bad[j] = true;
              break;
            }
          }
        }
      }
      for (std::size_t j = 0; j < b; ++j) {
        if (bad[j]) {
          failed_per_worker[w].push_back(at + j);
          continue;
        }
        std::uint8_t* dst = ds.pixels.data() + (at + j) * kImagePixels;
        for (int p = 0; p < kImagePixels; ++p) {
          dst[p] = quantize_pixel(std::clamp(xs[j][p], -1.0, 1.0));
        }
      }
    }
  };

  if (workers <= 1) {
    worker_fn(0, 0, total);
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (total + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
      const std::size_t begin = std::min(total, static_cast<std::size_t>(w) * chunk);
      const std::size_t end = std::min(total, begin + chunk);
      pool.emplace_back(worker_fn, w, begin, end);
    }
    for (std::thread& th : pool) th.join();
  }

  // Failed chains are regenerated one by one from derived fallback seeds;
  // the result does not depend on which worker saw the failure.
  std::vector<std::size_t> failed;
  for (const auto& fw : failed_per_worker) failed.insert(failed.end(), fw.begin(), fw.end());
  std::sort(failed.begin(), failed.end());
  for (std::size_t g : failed) {
    const PendingImage& im = images[g];
    bool done = false;
    for (std::uint64_t attempt = 1; attempt < 3; ++attempt) {
      const std::uint64_t seed =
          Rng::mix({config.seed, static_cast<std::uint64_t>(im.cls),
                    static_cast<std::uint64_t>(im.within_class_index), attempt});
      ChainResult r = run_single_chain(model, sampling, config.s, im.cls, seed);
      if (r.ok) {
        std::uint8_t* dst = ds.pixels.data() + g * kImagePixels;
        for (int p = 0; p < kImagePixels; ++p) dst[p] = quantize_pixel(r.image[p]);
        done = true;
        break;
      }
    }
    if (!done) {
      throw NumericError("generate_dataset: image " + std::to_string(g) + " (class " +
                         std::to_string(im.cls) + ") failed 3 sampling attempts");
    }
    ds.prov.regenerated.push_back(static_cast<std::uint32_t>(g));
  }
  return ds;
}

}  // namespace synthkd
