#include "irmkit/env.hpp"

#include <cstdint>
#include <fstream>
#include <vector>

namespace irm::envgen {

namespace {

constexpr uint32_t kImagesMagic = 0x00000803;
constexpr uint32_t kLabelsMagic = 0x00000801;

uint32_t read_be32(std::istream& f) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) |
         uint32_t(b[3]);
}

}  // namespace

EnvDataset load_idx_colorized(const std::string& images_path,
                              const std::string& labels_path,
                              const EnvironmentSpec& spec, bool grayscale,
                              const ImbalanceWeights& weights) {
  std::ifstream fi(images_path, std::ios::binary);
  if (!fi) throw FormatError("cannot open " + images_path);
  std::ifstream fl(labels_path, std::ios::binary);
  if (!fl) throw FormatError("cannot open " + labels_path);

  if (read_be32(fi) != kImagesMagic) throw FormatError("bad magic in " + images_path);
  const uint32_t n_images = read_be32(fi);
  const uint32_t rows = read_be32(fi);
  const uint32_t cols = read_be32(fi);
  if (read_be32(fl) != kLabelsMagic) throw FormatError("bad magic in " + labels_path);
  const uint32_t n_labels = read_be32(fl);
  if (n_images != n_labels) {
    throw LengthMismatch("image/label count mismatch: " + std::to_string(n_images) +
                         " vs " + std::to_string(n_labels));
  }
  if (spec.n_samples > static_cast<long>(n_images)) {
    throw LengthMismatch("requested " + std::to_string(spec.n_samples) +
                         " samples but file holds " + std::to_string(n_images));
  }

  const long pixels = static_cast<long>(rows) * cols;
  std::vector<unsigned char> image(pixels);

  EnvDataset ds;
  ds.spec = spec;
  ds.spec.source = SourceKind::ColorizedIdx;
  ds.spec.images_path = images_path;
  ds.spec.labels_path = labels_path;
  ds.features.resize(spec.n_samples, 2 * pixels);
  ds.labels.resize(spec.n_samples, 1);
  ds.invariant_bits.resize(spec.n_samples);
  ds.spurious_bits.resize(spec.n_samples);

  Rng rng(spec.seed);
  const bool resample = !weights.uniform();
  double max_w = 0.0;
  if (resample) {
    for (int g = 0; g < 2; ++g)
      for (int c = 0; c < 2; ++c)
        for (int d = 0; d < 10; ++d)
          max_w = std::max(max_w, weights.group[g] * weights.color[c] * weights.digit[d]);
  }

  long i = 0;
  long consumed = 0;
  while (i < spec.n_samples) {
    if (consumed >= static_cast<long>(n_images)) {
      throw LengthMismatch("file exhausted before filling the requested sample count");
    }
    fi.read(reinterpret_cast<char*>(image.data()), pixels);
    char digit_raw;
    fl.read(&digit_raw, 1);
    if (!fi || !fl) throw FormatError("truncated IDX file");
    ++consumed;
    const int digit = static_cast<unsigned char>(digit_raw);

    // Digits 0-4 form group 0, digits 5-9 group 1.
    const int g = digit < 5 ? 0 : 1;
    const int y = g ^ (rng.bernoulli(spec.alpha) ? 1 : 0);
    const int c = y ^ (rng.bernoulli(spec.beta) ? 1 : 0);
    if (resample) {
      const double w = weights.group[g] * weights.color[c] * weights.digit[digit];
      if (!rng.bernoulli(w / max_w)) continue;
    }

    for (long p = 0; p < pixels; ++p) {
      const double v = image[p] / 255.0;
      if (grayscale) {
        ds.features(i, p) = v;
        ds.features(i, pixels + p) = v;
      } else {
        ds.features(i, p) = c == 0 ? v : 0.0;
        ds.features(i, pixels + p) = c == 1 ? v : 0.0;
      }
    }
    ds.labels(i, 0) = static_cast<double>(y);
    ds.invariant_bits[i] = static_cast<uint8_t>(g);
    ds.spurious_bits[i] = static_cast<uint8_t>(c);
    ++i;
  }
  return ds;
}

}  // namespace irm::envgen
