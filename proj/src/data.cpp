#include "synthkd/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "synthkd/digest.hpp"
#include "synthkd/rng.hpp"

using json = nlohmann::json;

namespace synthkd {

// ---- RealDataset -----------------------------------------------------------

Array RealDataset::batch(std::span<const std::size_t> idx) const {
  std::vector<double> data(idx.size() * kImagePixels);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::memcpy(data.data() + i * kImagePixels, image(idx[i]), sizeof(double) * kImagePixels);
  }
  return Array::from_data(Shape{static_cast<int>(idx.size()), 1, kImageSize, kImageSize},
                          std::move(data));
}

std::string RealDataset::digest() const {
  Sha256 h;
  h.update("real-dataset/v1", 15);
  const std::uint32_t k = static_cast<std::uint32_t>(num_classes);
  const std::uint64_t n = count();
  h.update(&k, sizeof(k));
  h.update(&n, sizeof(n));
  h.update(images.data(), images.size() * sizeof(double));
  for (int label : labels) {
    const std::int32_t v = label;
    h.update(&v, sizeof(v));
  }
  return h.finish_hex();
}

// ---- toy shape renders --------------------------------------------------------

namespace {

// Soft 1-pixel edge from a signed distance (positive inside).
double coverage(double d) { return std::clamp(d + 0.5, 0.0, 1.0); }

double dist2d(double dx, double dy) { return std::sqrt(dx * dx + dy * dy); }

// Signed distance of an axis-aligned bar through (cx,cy).
double bar_sdf(double dx, double dy, double half_len, double half_w) {
  return std::min(half_len - std::abs(dx), half_w - std::abs(dy));
}

double stripes_sdf(double coord, double period, double phase, double thickness) {
  double m = std::fmod(coord + phase, period);
  if (m < 0) m += period;
  return thickness / 2.0 - std::abs(m - thickness / 2.0);
}

// Ten horizontal-flip-closed shape families. Flip closure matters: the
// trainers use horizontal-flip augmentation, so a mirrored instance must stay
// a valid member of its own class.
void render_class(int cls, Rng& rng, double* img) {
  const double bg = -1.0;
  const double cx = 7.5 + (rng.uniform() * 4.4 - 2.2);
  const double cy = 7.5 + (rng.uniform() * 4.4 - 2.2);
  const double amp = 0.35 + rng.uniform() * 0.55;

  auto paint_sdf = [&](auto&& sdf) {
    for (int y = 0; y < kImageSize; ++y) {
      for (int x = 0; x < kImageSize; ++x) {
        const double cov = coverage(sdf(x - cx, y - cy));
        img[y * kImageSize + x] = bg + (amp - bg) * cov;
      }
    }
  };

  switch (cls) {
    case 0: {  // filled disk
      const double r = 3.5 + rng.uniform() * 1.5;
      paint_sdf([&](double dx, double dy) { return r - dist2d(dx, dy); });
      break;
    }
    case 1: {  // ring
      const double ro = 4.2 + rng.uniform() * 1.3;
      const double ri = ro - (1.8 + rng.uniform() * 0.6);
      paint_sdf([&](double dx, double dy) {
        const double d = dist2d(dx, dy);
        return std::min(ro - d, d - ri);
      });
      break;
    }
    case 2: {  // plus
      const double hw = 0.8 + rng.uniform() * 0.5;
      const double hl = 4.5 + rng.uniform() * 1.5;
      paint_sdf([&](double dx, double dy) {
        return std::max(bar_sdf(dx, dy, hl, hw), bar_sdf(dy, dx, hl, hw));
      });
      break;
    }
    case 3: {  // diagonal cross
      const double hw = 0.9 + rng.uniform() * 0.5;
      const double hl = 5.0 + rng.uniform() * 1.8;
      const double inv_sqrt2 = 0.7071067811865476;
      paint_sdf([&](double dx, double dy) {
        const double u = (dx + dy) * inv_sqrt2;
        const double v = (dx - dy) * inv_sqrt2;
        return std::max(bar_sdf(u, v, hl, hw), bar_sdf(v, u, hl, hw));
      });
      break;
    }
    case 4: {  // horizontal stripes
      const double period = 3.8 + rng.uniform() * 1.4;
      const double phase = rng.uniform() * period;
      const double th = 1.4 + rng.uniform() * 0.6;
      paint_sdf([&](double, double dy) { return stripes_sdf(dy + cy, period, phase, th); });
      break;
    }
    case 5: {  // vertical stripes
      const double period = 3.8 + rng.uniform() * 1.4;
      const double phase = rng.uniform() * period;
      const double th = 1.4 + rng.uniform() * 0.6;
      paint_sdf([&](double dx, double) { return stripes_sdf(dx + cx, period, phase, th); });
      break;
    }
    case 6: {  // checkerboard
      const double px = rng.uniform() * 8.0;
      const double py = rng.uniform() * 8.0;
      for (int y = 0; y < kImageSize; ++y) {
        for (int x = 0; x < kImageSize; ++x) {
          const int sx = static_cast<int>(std::floor((x + px) / 4.0));
          const int sy = static_cast<int>(std::floor((y + py) / 4.0));
          img[y * kImageSize + x] = ((sx + sy) & 1) ? amp : bg;
        }
      }
      break;
    }
    case 7: {  // square frame
      const double half = 4.2 + rng.uniform() * 1.6;
      const double th = 1.4 + rng.uniform() * 0.6;
      paint_sdf([&](double dx, double dy) {
        const double m = std::max(std::abs(dx), std::abs(dy));
        return std::min(half - m, m - (half - th));
      });
      break;
    }
    case 8: {  // four corner dots
      const double off = 3.2 + rng.uniform() * 1.4;
      const double r = 1.4 + rng.uniform() * 0.5;
      paint_sdf([&](double dx, double dy) {
        double best = -1e9;
        for (int sy = -1; sy <= 1; sy += 2) {
          for (int sx = -1; sx <= 1; sx += 2) {
            best = std::max(best, r - dist2d(dx - sx * off, dy - sy * off));
          }
        }
        return best;
      });
      break;
    }
    case 9: {  // vertical intensity ramp
      const double lo = -0.95 + rng.uniform() * 0.25;
      const double hi = 0.5 + rng.uniform() * 0.45;
      for (int y = 0; y < kImageSize; ++y) {
        const double v = lo + (hi - lo) * (y / 15.0);
        for (int x = 0; x < kImageSize; ++x) img[y * kImageSize + x] = v;
      }
      break;
    }
    default:
      throw ContractError("toy dataset: no shape family for class " + std::to_string(cls));
  }

  for (int i = 0; i < kImagePixels; ++i) {
    img[i] = std::clamp(img[i] + 0.10 * rng.normal(), -1.0, 1.0);
  }
}

constexpr int kShapeFamilies = 10;

RealDataset render_split(const ToySpec& spec, int per_class, std::uint64_t split_tag,
                         const char* split_name) {
  RealDataset ds;
  ds.num_classes = spec.num_classes;
  ds.split = split_name;
  ds.images.resize(static_cast<std::size_t>(spec.num_classes) * per_class * kImagePixels);
  ds.labels.reserve(static_cast<std::size_t>(spec.num_classes) * per_class);
  std::size_t at = 0;
  for (int cls = 0; cls < spec.num_classes; ++cls) {
    for (int k = 0; k < per_class; ++k) {
      Rng rng(Rng::mix({spec.seed, split_tag, static_cast<std::uint64_t>(cls),
                        static_cast<std::uint64_t>(k)}));
      render_class(cls, rng, ds.images.data() + at * kImagePixels);
      ds.labels.push_back(cls);
      ++at;
    }
  }
  return ds;
}

}  // namespace

ToyPair generate_toy(const ToySpec& spec) {
  if (spec.num_classes < 2 || spec.num_classes > kShapeFamilies) {
    throw ContractError("toy dataset: num_classes " + std::to_string(spec.num_classes) +
                        " exceeds the " + std::to_string(kShapeFamilies) +
                        " available shape families");
  }
  if (spec.image_size != kImageSize) {
    throw ContractError("toy dataset: image size is fixed at 16");
  }
  if (spec.per_class_train < 1 || spec.per_class_test < 1) {
    throw ContractError("toy dataset: per-class counts must be positive");
  }
  ToyPair pair;
  pair.train = render_split(spec, spec.per_class_train, 0x747261696eull, "train");
  pair.test = render_split(spec, spec.per_class_test, 0x74657374ull, "test");
  return pair;
}

// ---- IDX ------------------------------------------------------------------------

namespace {

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return bytes;
}

std::uint32_t read_u32_be(const std::vector<std::uint8_t>& b, std::size_t at) {
  if (at + 4 > b.size()) throw DataError("IDX header truncated");
  return (std::uint32_t(b[at]) << 24) | (std::uint32_t(b[at + 1]) << 16) |
         (std::uint32_t(b[at + 2]) << 8) | std::uint32_t(b[at + 3]);
}

std::string hex_u32(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "0x%08x", v);
  return buf;
}

// Exact box-overlap area averaging; preserves mean intensity.
void area_resample(const double* src, int sh, int sw, double* dst) {
  const double sy = static_cast<double>(sh) / kImageSize;
  const double sx = static_cast<double>(sw) / kImageSize;
  for (int ty = 0; ty < kImageSize; ++ty) {
    const double y0 = ty * sy, y1 = (ty + 1) * sy;
    for (int tx = 0; tx < kImageSize; ++tx) {
      const double x0 = tx * sx, x1 = (tx + 1) * sx;
      double acc = 0.0;
      for (int iy = static_cast<int>(std::floor(y0)); iy < sh && iy < y1; ++iy) {
        const double wy = std::min<double>(iy + 1, y1) - std::max<double>(iy, y0);
        if (wy <= 0) continue;
        for (int ix = static_cast<int>(std::floor(x0)); ix < sw && ix < x1; ++ix) {
          const double wx = std::min<double>(ix + 1, x1) - std::max<double>(ix, x0);
          if (wx <= 0) continue;
          acc += wy * wx * src[iy * sw + ix];
        }
      }
      dst[ty * kImageSize + tx] = acc / (sy * sx);
    }
  }
}

}  // namespace

RealDataset load_idx(const std::string& images_path, const std::string& labels_path) {
  const std::vector<std::uint8_t> img_bytes = read_file(images_path);
  const std::vector<std::uint8_t> lab_bytes = read_file(labels_path);

  const std::uint32_t img_magic = read_u32_be(img_bytes, 0);
  if (img_magic != 0x00000803u) {
    throw DataError("IDX image file magic mismatch: observed " + hex_u32(img_magic) +
                    ", expected 0x00000803");
  }
  const std::uint32_t lab_magic = read_u32_be(lab_bytes, 0);
  if (lab_magic != 0x00000801u) {
    throw DataError("IDX label file magic mismatch: observed " + hex_u32(lab_magic) +
                    ", expected 0x00000801");
  }
  const std::uint32_t n = read_u32_be(img_bytes, 4);
  const std::uint32_t rows = read_u32_be(img_bytes, 8);
  const std::uint32_t cols = read_u32_be(img_bytes, 12);
  const std::uint32_t n_lab = read_u32_be(lab_bytes, 4);
  if (n != n_lab) {
    throw DataError("IDX count mismatch: " + std::to_string(n) + " images vs " +
                    std::to_string(n_lab) + " labels");
  }
  if (rows == 0 || cols == 0) throw DataError("IDX image file declares zero-sized images");
  const std::size_t expect_img = 16 + static_cast<std::size_t>(n) * rows * cols;
  if (img_bytes.size() != expect_img) {
    throw DataError("IDX image payload truncated: " + std::to_string(img_bytes.size()) +
                    " bytes, expected " + std::to_string(expect_img));
  }
  const std::size_t expect_lab = 8 + static_cast<std::size_t>(n);
  if (lab_bytes.size() != expect_lab) {
    throw DataError("IDX label payload truncated: " + std::to_string(lab_bytes.size()) +
                    " bytes, expected " + std::to_string(expect_lab));
  }

  RealDataset ds;
  ds.split = "idx";
  ds.images.resize(static_cast<std::size_t>(n) * kImagePixels);
  ds.labels.resize(n);
  std::vector<double> scratch(static_cast<std::size_t>(rows) * cols);
  int max_label = 0;
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::uint8_t* px = img_bytes.data() + 16 + static_cast<std::size_t>(i) * rows * cols;
    for (std::size_t p = 0; p < scratch.size(); ++p) {
      scratch[p] = px[p] / 255.0 * 2.0 - 1.0;
    }
    double* out = ds.images.data() + static_cast<std::size_t>(i) * kImagePixels;
    if (rows == kImageSize && cols == kImageSize) {
      std::memcpy(out, scratch.data(), sizeof(double) * kImagePixels);
    } else {
      area_resample(scratch.data(), static_cast<int>(rows), static_cast<int>(cols), out);
    }
    ds.labels[i] = lab_bytes[8 + i];
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.num_classes = max_label + 1;
  return ds;
}

// ---- quantization -----------------------------------------------------------------

std::uint8_t quantize_pixel(double v) {
  const double q = std::round((std::clamp(v, -1.0, 1.0) + 1.0) * 0.5 * 255.0);
  return static_cast<std::uint8_t>(std::clamp(q, 0.0, 255.0));
}

double dequantize_pixel(std::uint8_t q) { return q / 255.0 * 2.0 - 1.0; }

void SyntheticDataset::decode_image(std::size_t i, double* out) const {
  const std::size_t stride = static_cast<std::size_t>(channels) * height * width;
  const std::uint8_t* src = pixels.data() + i * stride;
  for (std::size_t p = 0; p < stride; ++p) out[p] = dequantize_pixel(src[p]);
}

// ---- SKDS container ------------------------------------------------------------

namespace {

constexpr std::uint32_t kSkdsVersion = 1;

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xFF));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint16_t get_u16(const std::vector<std::uint8_t>& b, std::size_t& at) {
  if (at + 2 > b.size()) throw DataError("SKDS payload truncated");
  const std::uint16_t v = static_cast<std::uint16_t>(b[at] | (b[at + 1] << 8));
  at += 2;
  return v;
}

std::uint32_t get_u32(const std::vector<std::uint8_t>& b, std::size_t& at) {
  if (at + 4 > b.size()) throw DataError("SKDS payload truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[at + i]) << (8 * i);
  at += 4;
  return v;
}

json provenance_to_json(const SyntheticProvenance& prov) {
  json j;
  j["s"] = prov.s;
  j["t_sample"] = prov.t_sample;
  j["seed"] = prov.seed;
  j["denoiser_digest"] = prov.denoiser_digest;
  j["schedule_digest"] = prov.schedule_digest;
  j["regenerated"] = prov.regenerated;
  return j;
}

SyntheticProvenance provenance_from_json(const json& j) {
  SyntheticProvenance prov;
  prov.s = j.at("s").get<double>();
  prov.t_sample = j.at("t_sample").get<int>();
  prov.seed = j.at("seed").get<std::uint64_t>();
  prov.denoiser_digest = j.at("denoiser_digest").get<std::string>();
  prov.schedule_digest = j.at("schedule_digest").get<std::string>();
  prov.regenerated = j.at("regenerated").get<std::vector<std::uint32_t>>();
  return prov;
}

}  // namespace

std::vector<std::uint8_t> encode_skds(const SyntheticDataset& ds) {
  std::vector<std::uint8_t> out;
  const std::size_t rec = static_cast<std::size_t>(ds.channels) * ds.height * ds.width;
  out.reserve(17 + ds.count() * (rec + 2));
  out.insert(out.end(), {'S', 'K', 'D', 'S'});
  put_u32(out, kSkdsVersion);
  put_u32(out, static_cast<std::uint32_t>(ds.count()));
  out.push_back(static_cast<std::uint8_t>(ds.channels));
  put_u16(out, static_cast<std::uint16_t>(ds.height));
  put_u16(out, static_cast<std::uint16_t>(ds.width));
  put_u16(out, static_cast<std::uint16_t>(ds.num_classes));
  for (std::size_t i = 0; i < ds.count(); ++i) {
    put_u16(out, ds.labels[i]);
    out.insert(out.end(), ds.pixels.begin() + i * rec, ds.pixels.begin() + (i + 1) * rec);
  }
  return out;
}

std::string SyntheticDataset::digest() const {
  const std::vector<std::uint8_t> bytes = encode_skds(*this);
  return sha256_hex(bytes);
}

void save_skds(const SyntheticDataset& ds, const std::string& path) {
  const std::vector<std::uint8_t> bytes = encode_skds(ds);
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
  }
  json meta;
  meta["format"] = "skds";
  meta["version"] = kSkdsVersion;
  meta["count"] = ds.count();
  meta["num_classes"] = ds.num_classes;
  meta["channels"] = ds.channels;
  meta["height"] = ds.height;
  meta["width"] = ds.width;
  meta["provenance"] = provenance_to_json(ds.prov);
  meta["payload_digest"] = sha256_hex(bytes);
  std::ofstream side(path + ".meta.json", std::ios::trunc);
  if (!side) throw DataError("cannot write " + path + ".meta.json");
  side << meta.dump(2) << "\n";
}

SyntheticDataset load_skds(const std::string& path) {
  const std::vector<std::uint8_t> bytes = read_file(path);
  json meta;
  {
    std::ifstream side(path + ".meta.json");
    if (!side) {
      throw DataError("missing sidecar " + path +
                      ".meta.json; the dataset cannot be verified without its provenance");
    }
    try {
      side >> meta;
    } catch (const json::exception& e) {
      throw DataError("unreadable sidecar for " + path + ": " + e.what());
    }
  }
  const std::string payload_digest = sha256_hex(bytes);
  const std::string declared = meta.at("payload_digest").get<std::string>();
  if (payload_digest != declared) {
    throw DataError("SKDS digest mismatch for " + path + ": payload " + payload_digest +
                    " vs sidecar " + declared +
                    "; the file was modified or truncated — regenerate the dataset");
  }

  if (bytes.size() < 4 || std::memcmp(bytes.data(), "SKDS", 4) != 0) {
    throw DataError("SKDS magic mismatch in " + path);
  }
  std::size_t at = 4;
  const std::uint32_t version = get_u32(bytes, at);
  if (version != kSkdsVersion) {
    throw DataError("unsupported SKDS version " + std::to_string(version) + " in " + path +
                    "; this build reads version " + std::to_string(kSkdsVersion) +
                    " — regenerate the dataset with this tool");
  }
  SyntheticDataset ds;
  const std::uint32_t count = get_u32(bytes, at);
  if (at >= bytes.size()) throw DataError("SKDS payload truncated");
  ds.channels = bytes[at++];
  ds.height = get_u16(bytes, at);
  ds.width = get_u16(bytes, at);
  ds.num_classes = get_u16(bytes, at);
  if (ds.channels != kImageChannels || ds.height != kImageSize || ds.width != kImageSize) {
    throw DataError("SKDS geometry unsupported in " + path);
  }
  const std::size_t rec = static_cast<std::size_t>(ds.channels) * ds.height * ds.width;
  ds.labels.resize(count);
  ds.pixels.resize(static_cast<std::size_t>(count) * rec);
  for (std::uint32_t i = 0; i < count; ++i) {
    ds.labels[i] = get_u16(bytes, at);
    if (ds.labels[i] >= ds.num_classes) {
      throw DataError("SKDS label out of range in " + path);
    }
    if (at + rec > bytes.size()) throw DataError("SKDS payload truncated");
    std::memcpy(ds.pixels.data() + static_cast<std::size_t>(i) * rec, bytes.data() + at, rec);
    at += rec;
  }
  if (at != bytes.size()) throw DataError("SKDS trailing bytes in " + path);
  ds.prov = provenance_from_json(meta.at("provenance"));
  return ds;
}

// ---- checkpoints ----------------------------------------------------------------

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_record(const std::string& name, const Array& p) {
  std::vector<std::uint8_t> out;
  put_u32(out, static_cast<std::uint32_t>(name.size()));
  out.insert(out.end(), name.begin(), name.end());
  put_u32(out, static_cast<std::uint32_t>(p.size()));
  const auto data = p.data();
  out.resize(out.size() + data.size() * 4);
  std::uint8_t* dst = out.data() + out.size() - data.size() * 4;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const float f = static_cast<float>(data[i]);
    std::memcpy(dst + i * 4, &f, 4);
  }
  return out;
}

}  // namespace

std::vector<std::uint8_t> encode_params(const NamedParams& params) {
  std::vector<std::uint8_t> out;
  for (const auto& [name, p] : params) {
    const std::vector<std::uint8_t> rec = encode_record(name, p);
    out.insert(out.end(), rec.begin(), rec.end());
  }
  return out;
}

std::string params_digest(const NamedParams& params) {
  return sha256_hex(encode_params(params));
}

namespace {

void save_checkpoint(const std::string& path, const NamedParams& params, json model_meta) {
  json manifest;
  manifest["format"] = "synthkd-checkpoint";
  manifest["version"] = kCheckpointVersion;
  manifest["model"] = std::move(model_meta);
  json param_list = json::array();
  std::vector<std::uint8_t> payload;
  for (const auto& [name, p] : params) {
    const std::vector<std::uint8_t> rec = encode_record(name, p);
    json entry;
    entry["name"] = name;
    entry["shape"] = p.shape();
    entry["digest"] = sha256_hex(rec);
    param_list.push_back(std::move(entry));
    payload.insert(payload.end(), rec.begin(), rec.end());
  }
  manifest["params"] = std::move(param_list);
  manifest["payload_digest"] = sha256_hex(payload);
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path);
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size()));
  }
  std::ofstream mf(path + ".manifest.json", std::ios::trunc);
  if (!mf) throw DataError("cannot write " + path + ".manifest.json");
  mf << manifest.dump(2) << "\n";
}

struct RawCheckpoint {
  std::vector<std::pair<std::string, std::vector<double>>> records;
  std::vector<Shape> shapes;
  json model;
  std::string payload_digest;
};

RawCheckpoint load_checkpoint(const std::string& path) {
  const std::vector<std::uint8_t> payload = read_file(path);
  json manifest;
  {
    std::ifstream mf(path + ".manifest.json");
    if (!mf) throw DataError("missing manifest " + path + ".manifest.json");
    try {
      mf >> manifest;
    } catch (const json::exception& e) {
      throw DataError("unreadable manifest for " + path + ": " + e.what());
    }
  }
  if (manifest.value("format", "") != "synthkd-checkpoint") {
    throw DataError(path + " is not a synthkd checkpoint");
  }
  const std::uint32_t version = manifest.at("version").get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version) + " in " + path +
                    "; this build reads version " + std::to_string(kCheckpointVersion) +
                    " — re-train or convert the checkpoint");
  }
  RawCheckpoint ck;
  ck.payload_digest = sha256_hex(payload);
  if (ck.payload_digest != manifest.at("payload_digest").get<std::string>()) {
    throw DataError("checkpoint digest mismatch for " + path +
                    "; the payload was modified — re-train or restore from backup");
  }
  ck.model = manifest.at("model");

  std::size_t at = 0;
  for (const json& entry : manifest.at("params")) {
    const std::size_t rec_start = at;
    const std::uint32_t name_len = get_u32(payload, at);
    if (at + name_len > payload.size()) throw DataError("checkpoint record truncated in " + path);
    std::string name(reinterpret_cast<const char*>(payload.data() + at), name_len);
    at += name_len;
    const std::uint32_t count = get_u32(payload, at);
    if (at + static_cast<std::size_t>(count) * 4 > payload.size()) {
      throw DataError("checkpoint record truncated in " + path);
    }
    std::vector<double> values(count);
    for (std::uint32_t i = 0; i < count; ++i) {
      float f;
      std::memcpy(&f, payload.data() + at + static_cast<std::size_t>(i) * 4, 4);
      values[i] = static_cast<double>(f);
    }
    at += static_cast<std::size_t>(count) * 4;
    if (entry.at("name").get<std::string>() != name) {
      throw DataError("checkpoint record order does not match manifest in " + path);
    }
    const std::string rec_digest =
        sha256_hex(payload.data() + rec_start, at - rec_start);
    if (rec_digest != entry.at("digest").get<std::string>()) {
      throw DataError("checkpoint record '" + name + "' digest mismatch in " + path);
    }
    ck.records.emplace_back(std::move(name), std::move(values));
    ck.shapes.push_back(entry.at("shape").get<Shape>());
  }
  if (at != payload.size()) throw DataError("checkpoint trailing bytes in " + path);
  return ck;
}

void apply_records(NamedParams params, const RawCheckpoint& ck, const std::string& path) {
  if (params.size() != ck.records.size()) {
    throw DataError("checkpoint " + path + " carries " + std::to_string(ck.records.size()) +
                    " records but the model has " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, p] = params[i];
    const auto& [rec_name, values] = ck.records[i];
    if (name != rec_name) {
      throw DataError("checkpoint " + path + " record '" + rec_name + "' where '" + name +
                      "' was expected");
    }
    if (p.shape() != ck.shapes[i] || p.size() != values.size()) {
      throw DataError("checkpoint " + path + " record '" + rec_name + "' has shape " +
                      shape_str(ck.shapes[i]) + ", model expects " + shape_str(p.shape()));
    }
    auto dst = p.data_mut();
    std::copy(values.begin(), values.end(), dst.begin());
  }
}

}  // namespace

void save_classifier(const Classifier& model, const std::string& path,
                     double final_test_accuracy) {
  json meta;
  meta["kind"] = "classifier";
  meta["tier"] = tier_to_string(model.tier());
  meta["num_classes"] = model.num_classes();
  meta["final_test_accuracy"] = final_test_accuracy;
  save_checkpoint(path, model.parameters(), std::move(meta));
}

ClassifierCheckpoint load_classifier(const std::string& path) {
  RawCheckpoint ck = load_checkpoint(path);
  if (ck.model.value("kind", "") != "classifier") {
    throw DataError(path + " is not a classifier checkpoint");
  }
  Classifier model(tier_from_string(ck.model.at("tier").get<std::string>()),
                   ck.model.at("num_classes").get<int>(), 0);
  apply_records(model.parameters(), ck, path);
  return ClassifierCheckpoint{std::move(model),
                              ck.model.value("final_test_accuracy", -1.0),
                              ck.payload_digest};
}

void save_denoiser(const Denoiser& model, const std::string& path) {
  json meta;
  meta["kind"] = "denoiser";
  meta["num_classes"] = model.num_classes();
  meta["base_width"] = model.base_width();
  meta["emb_dim"] = model.emb_dim();
  meta["t_max"] = model.t_max();
  save_checkpoint(path, model.parameters(), std::move(meta));
}

DenoiserCheckpoint load_denoiser(const std::string& path) {
  RawCheckpoint ck = load_checkpoint(path);
  if (ck.model.value("kind", "") != "denoiser") {
    throw DataError(path + " is not a denoiser checkpoint");
  }
  Denoiser model(ck.model.at("num_classes").get<int>(), ck.model.at("base_width").get<int>(),
                 ck.model.at("emb_dim").get<int>(), 0);
  model.set_t_max(ck.model.at("t_max").get<int>());
  apply_records(model.parameters(), ck, path);
  return DenoiserCheckpoint{std::move(model), ck.payload_digest};
}

}  // namespace synthkd
