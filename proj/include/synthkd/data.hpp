#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "synthkd/array.hpp"
#include "synthkd/nets.hpp"

namespace synthkd {

// ---- datasets ---------------------------------------------------------------

struct RealDataset {
  int num_classes = 0;
  std::string split;
  std::vector<double> images;  // count * 256, row-major, values in [-1,1]
  std::vector<int> labels;

  std::size_t count() const { return labels.size(); }
  const double* image(std::size_t i) const { return images.data() + i * kImagePixels; }
  Array batch(std::span<const std::size_t> idx) const;
  std::string digest() const;
};

struct ToySpec {
  int num_classes = 10;
  int image_size = 16;
  int per_class_train = 500;
  int per_class_test = 100;
  std::uint64_t seed = 1234;
};

struct ToyPair {
  RealDataset train;
  RealDataset test;
};

// Procedural shape-family renders; deterministic from the seed, train and
// test drawn from disjoint RNG substreams.
ToyPair generate_toy(const ToySpec& spec);

// MNIST-style IDX ingestion: big-endian headers, u8 pixels rescaled to
// [-1,1], resampled to 16x16 by exact box-overlap area averaging.
RealDataset load_idx(const std::string& images_path, const std::string& labels_path);

// ---- synthetic dataset ------------------------------------------------------

struct SyntheticProvenance {
  double s = 0.0;
  int t_sample = 0;
  std::uint64_t seed = 0;
  std::string denoiser_digest;
  std::string schedule_digest;
  std::vector<std::uint32_t> regenerated;  // indices rebuilt from fallback seeds
};

// Quantized pixels are the canonical in-memory form; generation quantizes
// immediately so files and memory agree byte for byte.
struct SyntheticDataset {
  int num_classes = 0;
  int channels = kImageChannels;
  int height = kImageSize;
  int width = kImageSize;
  std::vector<std::uint8_t> pixels;  // count * channels*height*width
  std::vector<std::uint16_t> labels;
  SyntheticProvenance prov;

  std::size_t count() const { return labels.size(); }
  void decode_image(std::size_t i, double* out) const;  // dequantized pixels
  std::string digest() const;                           // sha256 of the binary encoding
};

std::uint8_t quantize_pixel(double v);    // [-1,1] -> [0,255]
double dequantize_pixel(std::uint8_t q);  // [0,255] -> [-1,1]

// Binary SKDS container plus a `<file>.meta.json` provenance sidecar.
std::vector<std::uint8_t> encode_skds(const SyntheticDataset& ds);
void save_skds(const SyntheticDataset& ds, const std::string& path);
SyntheticDataset load_skds(const std::string& path);

// ---- checkpoints --------------------------------------------------------------

// Length-prefixed named parameter records, little-endian IEEE-754 32-bit,
// with a `<file>.manifest.json` of names, shapes and digests.
std::vector<std::uint8_t> encode_params(const NamedParams& params);
std::string params_digest(const NamedParams& params);

struct ClassifierCheckpoint {
  Classifier model;
  double final_test_accuracy = -1.0;
  std::string digest;
};

struct DenoiserCheckpoint {
  Denoiser model;
  std::string digest;
};

void save_classifier(const Classifier& model, const std::string& path,
                     double final_test_accuracy);
ClassifierCheckpoint load_classifier(const std::string& path);

void save_denoiser(const Denoiser& model, const std::string& path);
DenoiserCheckpoint load_denoiser(const std::string& path);

}  // namespace synthkd
