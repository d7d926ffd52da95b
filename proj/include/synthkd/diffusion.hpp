#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "synthkd/array.hpp"
#include "synthkd/data.hpp"
#include "synthkd/nets.hpp"
#include "synthkd/rng.hpp"

namespace synthkd {

// Per-timestep noising coefficients; index t-1 holds the values for timestep
// t in [1, t_train].
struct NoiseSchedule {
  int t_train = 0;
  double beta_min = 0.0;
  double beta_max = 0.0;
  std::vector<double> beta;
  std::vector<double> alpha_bar;
  std::vector<double> sigma;

  std::string digest() const;
};

// Linear beta interpolation; alpha_bar is the running product of (1-beta),
// sigma_t = sqrt(beta_t).
NoiseSchedule make_schedule(int t_train, double beta_min, double beta_max);

// Closed-form marginal of the forward process:
// x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps.
Array forward_noise(const Array& x0, int t, const Array& eps, const NoiseSchedule& schedule);

// Classifier-free guidance combination:
// eps_hat = eps_uncond + s * (eps_cond - eps_uncond); s = 1 is the identity.
Array guided_noise(const Array& eps_cond, const Array& eps_uncond, double s);

// Evenly spaced subsequence of the training timesteps with per-step
// coefficients rebuilt from the retained alpha_bar values. Consecutive
// retained steps reuse the original beta verbatim, so t_sample == t_train
// reproduces unrespaced sampling exactly.
struct SamplingSchedule {
  std::vector<int> timesteps;  // ascending, values in [1, t_train]
  std::vector<double> alpha_bar;
  std::vector<double> beta;
  std::vector<double> sigma;

  int steps() const { return static_cast<int>(timesteps.size()); }
};

SamplingSchedule respace_schedule(const NoiseSchedule& schedule, int t_sample);

// One ancestral step at respaced position i (1-based; i == 1 is the final
// step and adds no noise):
// x_{i-1} = (x_i - beta_i/sqrt(1-alpha_bar_i) * eps_hat) / sqrt(alpha_i) + sigma_i * z.
Array denoise_step(const Array& x, int i, const SamplingSchedule& sampling,
                   const Array& eps_hat, Rng& rng);

// Model-driven step: conditional and unconditional passes combined by
// guided_noise, then the ancestral update above.
Array denoise_step(const Denoiser& model, const Array& x_t, int i, Condition c, double s,
                   const SamplingSchedule& sampling, Rng& rng);

// ---- training -------------------------------------------------------------

struct DenoiserTrainConfig {
  int epochs = 40;
  int batch = 64;
  double lr = 1e-3;
  double cond_dropout = 0.1;
  std::uint64_t seed = 11;
};

struct DenoiserTrainResult {
  std::vector<double> epoch_loss;  // mean training loss per epoch
  double initial_eval = 0.0;       // probe loss before the first step
  double final_eval = 0.0;         // probe loss after the last epoch
};

// Noise-prediction MSE training with condition dropout to the null class.
DenoiserTrainResult train_denoiser(Denoiser& model, const RealDataset& train,
                                   const NoiseSchedule& schedule,
                                   const DenoiserTrainConfig& config);

// Deterministic probe loss on fixed (t, eps) draws; shared by training and
// the acceptance gate.
double eval_denoiser_loss(const Denoiser& model, const RealDataset& data,
                          const NoiseSchedule& schedule, std::uint64_t seed, int num_samples);

// ---- generation ------------------------------------------------------------

struct GenConfig {
  double s = 2.0;
  int t_sample = 100;
  int per_class = 100;
  std::uint64_t seed = 41;
  std::vector<int> classes;  // empty: all classes of the model

  // Execution knobs; they never change the generated bytes.
  int workers = 1;
  int batch = 32;
};

// Guided ancestral sampling over the respaced schedule. Every image owns an
// RNG stream keyed by (seed, class, index), so the output is byte-identical
// for any worker count or batch size. A chain that goes non-finite is
// retried with a derived fallback seed, at most 3 attempts per image.
SyntheticDataset generate_dataset(const Denoiser& model, const NoiseSchedule& schedule,
                                  const GenConfig& config);

}  // namespace synthkd
