#include "synthkd/nets.hpp"

#include <cmath>

#include "synthkd/rng.hpp"

namespace synthkd {

namespace {

Array normal_init(Shape shape, double stddev, Rng& rng) {
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = stddev * rng.normal();
  return Array::from_data(std::move(shape), std::move(data), true);
}

Array he_conv(int out_c, int in_c, int k, Rng& rng) {
  const double stddev = std::sqrt(2.0 / (in_c * k * k));
  return normal_init(Shape{out_c, in_c, k, k}, stddev, rng);
}

Array zeros(Shape shape, bool requires_grad = true) {
  return Array(std::move(shape), 0.0, requires_grad);
}

// Sinusoidal position features for a batch of timesteps: first half sines,
// second half cosines, geometric frequency ladder down from 1 to 1/10000.
Array sinusoid_embedding(std::span<const int> t, int dim) {
  const int half = dim / 2;
  std::vector<double> data(t.size() * static_cast<std::size_t>(dim));
  for (std::size_t s = 0; s < t.size(); ++s) {
    double* row = data.data() + s * dim;
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / std::max(1, half - 1));
      row[i] = std::sin(t[s] * freq);
      row[half + i] = std::cos(t[s] * freq);
    }
  }
  return Array::from_data(Shape{static_cast<int>(t.size()), dim}, std::move(data));
}

}  // namespace

Denoiser::Denoiser(int num_classes, int base_width, int emb_dim, std::uint64_t seed)
    : num_classes_(num_classes), base_width_(base_width), emb_dim_(emb_dim) {
  if (num_classes < 1) throw ContractError("Denoiser: need at least one class");
  if (base_width < 2 || emb_dim < 4 || emb_dim % 2 != 0) {
    throw ContractError("Denoiser: base_width >= 2 and even emb_dim >= 4 required");
  }
  Rng rng(Rng::mix({seed, 0x64656e6f69736ull}));
  const int w = base_width;
  const double emb_std = std::sqrt(1.0 / emb_dim);

  time_w_ = normal_init(Shape{emb_dim, emb_dim}, emb_std, rng);
  time_b_ = zeros(Shape{emb_dim});
  class_table_ = normal_init(Shape{num_classes + 1, emb_dim}, 0.1, rng);
  cond_enc_w_ = normal_init(Shape{emb_dim, w}, emb_std, rng);
  cond_enc_b_ = zeros(Shape{w});
  cond_mid_w_ = normal_init(Shape{emb_dim, 2 * w}, emb_std, rng);
  cond_mid_b_ = zeros(Shape{2 * w});
  cond_dec_w_ = normal_init(Shape{emb_dim, w}, emb_std, rng);
  cond_dec_b_ = zeros(Shape{w});

  in_w_ = he_conv(w, kImageChannels, 3, rng);
  in_b_ = zeros(Shape{w});
  enc_w_ = he_conv(w, w, 3, rng);
  enc_b_ = zeros(Shape{w});
  down_w_ = he_conv(2 * w, w, 3, rng);
  down_b_ = zeros(Shape{2 * w});
  mid_w_ = he_conv(2 * w, 2 * w, 3, rng);
  mid_b_ = zeros(Shape{2 * w});
  up_w_ = he_conv(w, 2 * w, 3, rng);
  up_b_ = zeros(Shape{w});
  skip_w_ = he_conv(w, 2 * w, 3, rng);
  skip_b_ = zeros(Shape{w});
  // Zero-initialized output projection: the untrained model predicts zero
  // noise, which anchors the initial-loss contract in training.
  out_w_ = zeros(Shape{kImageChannels, w, 3, 3});
  out_b_ = zeros(Shape{kImageChannels});
}

Array Denoiser::forward(const Array& x, std::span<const int> t,
                        std::span<const Condition> c) const {
  if (x.ndim() != 4 || x.dim(1) != kImageChannels || x.dim(2) != kImageSize ||
      x.dim(3) != kImageSize) {
    throw ContractError("Denoiser: expected (n,1,16,16) input, got " + shape_str(x.shape()));
  }
  const int n = x.dim(0);
  if (static_cast<int>(t.size()) != n || static_cast<int>(c.size()) != n) {
    throw ContractError("Denoiser: batch size mismatch between x, t and c");
  }
  std::vector<int> cond_idx(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (t[i] < 1 || t[i] > t_max_) {
      throw ContractError("Denoiser: timestep " + std::to_string(t[i]) + " outside [1," +
                          std::to_string(t_max_) + "]");
    }
    if (!c[i].is_null() && (c[i].value < 0 || c[i].value >= num_classes_)) {
      throw ContractError("Denoiser: class index " + std::to_string(c[i].value) +
                          " outside [0," + std::to_string(num_classes_) + ")");
    }
    cond_idx[i] = c[i].is_null() ? num_classes_ : c[i].value;
  }

  // silu throughout: the noise-prediction loss is finite-difference checked
  // end to end, which a kinked activation cannot satisfy.
  Array emb = silu(add(affine(sinusoid_embedding(t, emb_dim_), time_w_, time_b_),
                       embedding_lookup(class_table_, cond_idx)));

  Array h0 = silu(conv2d(x, in_w_, in_b_, 1));
  Array h1 = silu(add_channel_bias(conv2d(h0, enc_w_, enc_b_, 1),
                                   affine(emb, cond_enc_w_, cond_enc_b_)));
  Array d = avg_pool2(h1);
  Array h2 = silu(conv2d(d, down_w_, down_b_, 1));
  Array h3 = silu(add_channel_bias(conv2d(h2, mid_w_, mid_b_, 1),
                                   affine(emb, cond_mid_w_, cond_mid_b_)));
  Array u = upsample_nearest2(silu(conv2d(h3, up_w_, up_b_, 1)));
  Array cat = concat_channels(u, h1);
  Array h4 = silu(add_channel_bias(conv2d(cat, skip_w_, skip_b_, 1),
                                   affine(emb, cond_dec_w_, cond_dec_b_)));
  return conv2d(h4, out_w_, out_b_, 1);
}

Array Denoiser::forward(const Array& x, int t, Condition c) const {
  const int n = x.dim(0);
  std::vector<int> ts(static_cast<std::size_t>(n), t);
  std::vector<Condition> cs(static_cast<std::size_t>(n), c);
  return forward(x, ts, cs);
}

NamedParams Denoiser::parameters() const {
  return {
      {"time.w", time_w_},       {"time.b", time_b_},
      {"class_table", class_table_},
      {"cond_enc.w", cond_enc_w_}, {"cond_enc.b", cond_enc_b_},
      {"cond_mid.w", cond_mid_w_}, {"cond_mid.b", cond_mid_b_},
      {"cond_dec.w", cond_dec_w_}, {"cond_dec.b", cond_dec_b_},
      {"in.w", in_w_},           {"in.b", in_b_},
      {"enc.w", enc_w_},         {"enc.b", enc_b_},
      {"down.w", down_w_},       {"down.b", down_b_},
      {"mid.w", mid_w_},         {"mid.b", mid_b_},
      {"up.w", up_w_},           {"up.b", up_b_},
      {"skip.w", skip_w_},       {"skip.b", skip_b_},
      {"out.w", out_w_},         {"out.b", out_b_},
  };
}

std::size_t Denoiser::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, p] : parameters()) n += p.size();
  return n;
}

// ---- Classifier ------------------------------------------------------------

Tier tier_from_string(const std::string& s) {
  if (s == "S" || s == "s") return Tier::S;
  if (s == "M" || s == "m") return Tier::M;
  if (s == "L" || s == "l") return Tier::L;
  throw ConfigError("unknown capacity tier '" + s + "' (expected S, M or L)");
}

std::string tier_to_string(Tier tier) {
  switch (tier) {
    case Tier::S: return "S";
    case Tier::M: return "M";
    case Tier::L: return "L";
  }
  throw ContractError("unreachable tier");
}

namespace {

struct TierSpec {
  int blocks;
  int base_width;
};

TierSpec tier_spec(Tier tier) {
  switch (tier) {
    case Tier::S: return {2, 8};
    case Tier::M: return {3, 16};
    case Tier::L: return {4, 32};
  }
  throw ContractError("unreachable tier");
}

}  // namespace

Classifier::Classifier(Tier tier, int num_classes, std::uint64_t seed)
    : tier_(tier), num_classes_(num_classes) {
  if (num_classes < 2) throw ContractError("Classifier: need at least two classes");
  Rng rng(Rng::mix({seed, 0x636c7366ull, static_cast<std::uint64_t>(tier)}));
  const TierSpec spec = tier_spec(tier);
  int in_c = kImageChannels;
  int spatial = kImageSize;
  for (int b = 0; b < spec.blocks; ++b) {
    const int out_c = spec.base_width << b;
    conv_w_.push_back(he_conv(out_c, in_c, 3, rng));
    conv_b_.push_back(zeros(Shape{out_c}));
    in_c = out_c;
    spatial /= 2;
  }
  const int flat = in_c * spatial * spatial;
  head_w_ = normal_init(Shape{flat, num_classes}, std::sqrt(2.0 / flat), rng);
  head_b_ = zeros(Shape{num_classes});

  // The tiers stand in for a capacity ladder; assert the ordering at
  // construction so an edit cannot silently invert it.
  auto count = [num_classes](Tier t) {
    const TierSpec s = tier_spec(t);
    std::size_t total = 0;
    int c_in = kImageChannels;
    int sp = kImageSize;
    for (int b = 0; b < s.blocks; ++b) {
      const int c_out = s.base_width << b;
      total += static_cast<std::size_t>(c_out) * c_in * 9 + c_out;
      c_in = c_out;
      sp /= 2;
    }
    total += static_cast<std::size_t>(c_in) * sp * sp * num_classes + num_classes;
    return total;
  };
  if (!(count(Tier::S) < count(Tier::M) && count(Tier::M) < count(Tier::L))) {
    throw ContractError("Classifier: capacity tiers are not strictly ordered");
  }
}

Array Classifier::forward(const Array& x) const {
  if (x.ndim() != 4 || x.dim(1) != kImageChannels || x.dim(2) != kImageSize ||
      x.dim(3) != kImageSize) {
    throw ContractError("Classifier: expected (n,1,16,16) input, got " + shape_str(x.shape()));
  }
  Array h = x;
  for (std::size_t b = 0; b < conv_w_.size(); ++b) {
    h = avg_pool2(relu(conv2d(h, conv_w_[b], conv_b_[b], 1)));
  }
  const int n = h.dim(0);
  const int flat = static_cast<int>(h.size()) / n;
  return affine(reshape(h, Shape{n, flat}), head_w_, head_b_);
}

NamedParams Classifier::parameters() const {
  NamedParams out;
  for (std::size_t b = 0; b < conv_w_.size(); ++b) {
    out.emplace_back("block" + std::to_string(b) + ".w", conv_w_[b]);
    out.emplace_back("block" + std::to_string(b) + ".b", conv_b_[b]);
  }
  out.emplace_back("head.w", head_w_);
  out.emplace_back("head.b", head_b_);
  return out;
}

std::size_t Classifier::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, p] : parameters()) n += p.size();
  return n;
}

void round_params_to_f32(NamedParams params) {
  for (auto& [name, p] : params) {
    auto data = p.data_mut();
    for (double& v : data) v = static_cast<double>(static_cast<float>(v));
  }
}

}  // namespace synthkd
