#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "synthkd/array.hpp"

namespace synthkd {

// Class index in [0, K) or the trainable null condition used for
// classifier-free guidance.
struct Condition {
  static constexpr int kNull = -1;
  int value = kNull;

  static Condition null() { return Condition{}; }
  static Condition cls(int index) { return Condition{index}; }
  bool is_null() const { return value == kNull; }
};

using NamedParams = std::vector<std::pair<std::string, Array>>;

// Toy images are fixed 1x16x16.
inline constexpr int kImageSize = 16;
inline constexpr int kImageChannels = 1;
inline constexpr int kImagePixels = kImageSize * kImageSize;

// Conditional noise-prediction network: a two-level convolutional
// encoder-decoder over 16x16 inputs. Timestep enters through a sinusoidal
// embedding mapped by an affine layer; the condition through a learned table
// of num_classes+1 rows whose last row is the null condition. The final
// convolution is zero-initialized so an untrained model predicts zero noise.
class Denoiser {
 public:
  Denoiser(int num_classes, int base_width, int emb_dim, std::uint64_t seed);

  // t per sample, 1-based over the training schedule.
  Array forward(const Array& x, std::span<const int> t, std::span<const Condition> c) const;
  // Single-timestep convenience used by the sampler and tests.
  Array forward(const Array& x, int t, Condition c) const;

  int num_classes() const { return num_classes_; }
  int base_width() const { return base_width_; }
  int emb_dim() const { return emb_dim_; }
  int t_max() const { return t_max_; }
  void set_t_max(int t) { t_max_ = t; }

  NamedParams parameters() const;
  std::size_t parameter_count() const;

 private:
  int num_classes_;
  int base_width_;
  int emb_dim_;
  mutable int t_max_ = 1 << 20;  // validated upper bound for t; set by training

  // conditioning
  Array time_w_, time_b_;    // emb_dim -> emb_dim
  Array class_table_;        // (num_classes+1, emb_dim)
  Array cond_enc_w_, cond_enc_b_;  // emb_dim -> W
  Array cond_mid_w_, cond_mid_b_;  // emb_dim -> 2W
  Array cond_dec_w_, cond_dec_b_;  // emb_dim -> W

  // convolutional trunk
  Array in_w_, in_b_;    // 1 -> W
  Array enc_w_, enc_b_;  // W -> W      @16
  Array down_w_, down_b_;  // W -> 2W   @8
  Array mid_w_, mid_b_;    // 2W -> 2W  @8
  Array up_w_, up_b_;      // 2W -> W   @8 then upsample
  Array skip_w_, skip_b_;  // 2W -> W   @16 after concat
  Array out_w_, out_b_;    // W -> 1, zero-initialized
};

enum class Tier { S, M, L };

Tier tier_from_string(const std::string& s);
std::string tier_to_string(Tier tier);

// Capacity-laddered image classifier: conv/relu/pool blocks followed by a
// linear head. The three tiers differ in depth and width and are strictly
// ordered by parameter count (asserted at construction).
class Classifier {
 public:
  Classifier(Tier tier, int num_classes, std::uint64_t seed);

  Array forward(const Array& x) const;  // (n,1,16,16) -> (n,K) logits

  Tier tier() const { return tier_; }
  int num_classes() const { return num_classes_; }
  std::size_t parameter_count() const;

  NamedParams parameters() const;

 private:
  Tier tier_;
  int num_classes_;
  std::vector<Array> conv_w_, conv_b_;
  Array head_w_, head_b_;
};

// Freezes trained values to checkpoint precision so saved and in-memory
// models evaluate identically.
void round_params_to_f32(NamedParams params);

}  // namespace synthkd
