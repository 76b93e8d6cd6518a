#include <algorithm>
#include <array>
#include <cmath>

#include "internal/rng.hpp"
#include "segloo/data.hpp"
#include "segloo/error.hpp"

namespace segloo::data {

namespace fs = std::filesystem;

namespace {

constexpr int kSide = 32;
constexpr double kPi = 3.14159265358979323846;

using Rgb = std::array<double, 3>;

Rgb hsv(double h, double s, double v) {
  h = h - std::floor(h);
  const double c = v * s, x = c * (1 - std::fabs(std::fmod(h * 6, 2.0) - 1)), m = v - c;
  const int sector = static_cast<int>(h * 6) % 6;
  static constexpr int perm[6][3] = {{0, 1, 2}, {1, 0, 2}, {2, 0, 1}, {2, 1, 0}, {1, 2, 0}, {0, 2, 1}};
  const double parts[3] = {c, x, 0.0};
  Rgb out{};
  for (int k = 0; k < 3; ++k) out[k] = parts[perm[sector][k]] + m;
  return out;
}

// Coverage of shape `kind` at local coordinates (u, v), radius 1 units.
bool inside(int kind, double u, double v, double phase) {
  const double r = std::hypot(u, v);
  switch (kind) {
    case 0: return r <= 1.0;                                              // disk
    case 1: return std::fabs(u) <= 0.85 && std::fabs(v) <= 0.85;          // square
    case 2: return v <= 0.8 && v >= -0.9 + 1.7 * std::fabs(u) / 0.95;     // triangle
    case 3: return r <= 1.0 && r >= 0.55;                                 // ring
    case 4: return (std::fabs(u) <= 0.3 && std::fabs(v) <= 1.0) || (std::fabs(v) <= 0.3 && std::fabs(u) <= 1.0);  // plus
    case 5: return std::fabs(u) <= 1.1 && std::fabs(v) <= 1.1 && std::sin(v * 2.6 * kPi + phase) > 0;  // horizontal bars
    case 6: return std::fabs(u) <= 1.1 && std::fabs(v) <= 1.1 && std::sin(u * 2.6 * kPi + phase) > 0;  // vertical bars
    case 7: return std::hypot(u - 0.55, v) <= 0.45 || std::hypot(u + 0.55, v) <= 0.45;                  // twin disks
    case 8: return std::fabs(u) <= 1.0 && std::fabs(v) <= 1.0 &&
                   ((static_cast<int>(std::floor((u + 1) * 2)) + static_cast<int>(std::floor((v + 1) * 2))) % 2 == 0);  // checker
    case 9: return (std::fabs(u - v) <= 0.35 || std::fabs(u + v) <= 0.35) && std::fabs(u) <= 1.0 && std::fabs(v) <= 1.0;  // X
    default: return false;
  }
}

void draw_shape(std::vector<double>& img, int kind, const Rgb& colour, double cx, double cy, double radius,
                double angle, double phase, double alpha) {
  const double ca = std::cos(angle), sa = std::sin(angle);
  constexpr int ss = 2;  // supersampling per axis for soft edges
  for (int y = 0; y < kSide; ++y) {
    for (int x = 0; x < kSide; ++x) {
      int hits = 0;
      for (int sy = 0; sy < ss; ++sy) {
        for (int sx = 0; sx < ss; ++sx) {
          const double px = x + (sx + 0.5) / ss - cx, py = y + (sy + 0.5) / ss - cy;
          const double u = (ca * px + sa * py) / radius, v = (-sa * px + ca * py) / radius;
          hits += inside(kind, u, v, phase);
        }
      }
      if (hits == 0) continue;
      const double a = alpha * hits / (ss * ss);
      for (int c = 0; c < 3; ++c) {
        double& p = img[(c * kSide + y) * kSide + x];
        p = (1 - a) * p + a * colour[c];
      }
    }
  }
}

void render(std::vector<double>& img, int label, detail::Rng& rng) {
  // Background: two-colour gradient plus a few soft blobs.
  const double bg_hue = rng.uniform();
  const Rgb c0 = hsv(bg_hue, rng.uniform(0.05, 0.45), rng.uniform(0.25, 0.8));
  const Rgb c1 = hsv(bg_hue + rng.uniform(-0.2, 0.2), rng.uniform(0.05, 0.45), rng.uniform(0.25, 0.8));
  const double gang = rng.uniform(0, 2 * kPi);
  const double gx = std::cos(gang), gy = std::sin(gang);
  for (int y = 0; y < kSide; ++y) {
    for (int x = 0; x < kSide; ++x) {
      const double t = std::clamp(0.5 + ((x - 15.5) * gx + (y - 15.5) * gy) / 32.0, 0.0, 1.0);
      for (int c = 0; c < 3; ++c) img[(c * kSide + y) * kSide + x] = (1 - t) * c0[c] + t * c1[c];
    }
  }
  const int blobs = static_cast<int>(rng.below(4));
  for (int b = 0; b < blobs; ++b) {
    const Rgb col = hsv(rng.uniform(), rng.uniform(0.1, 0.6), rng.uniform(0.2, 0.9));
    draw_shape(img, 0, col, rng.uniform(0, 32), rng.uniform(0, 32), rng.uniform(3, 9), 0, 0, rng.uniform(0.15, 0.4));
  }
  // Clutter: a small object of another class.
  if (rng.uniform() < 0.5) {
    const int other = static_cast<int>((label + 1 + rng.below(9)) % 10);
    const Rgb col = hsv(rng.uniform(), rng.uniform(0.3, 0.9), rng.uniform(0.3, 0.95));
    draw_shape(img, other, col, rng.uniform(2, 30), rng.uniform(2, 30), rng.uniform(3, 5), rng.uniform(-0.3, 0.3),
               rng.uniform(0, 2 * kPi), rng.uniform(0.3, 0.6));
  }
  // The object: class shape, mostly in the class hue.
  const double hue = rng.uniform() < 0.7 ? label / 10.0 + 0.04 * rng.normal() : rng.uniform();
  const Rgb col = hsv(hue, rng.uniform(0.35, 0.95), rng.uniform(0.35, 0.95));
  draw_shape(img, label, col, 16 + rng.uniform(-6, 6), 16 + rng.uniform(-6, 6), rng.uniform(6.5, 11),
             rng.uniform(-0.3, 0.3), rng.uniform(0, 2 * kPi), rng.uniform(0.45, 0.85));
  // Sensor noise.
  const double sigma = rng.uniform(0.02, 0.07);
  for (double& p : img) p += sigma * rng.normal();
}

}  // namespace

ImageBatch synth_batch(std::size_t count, std::uint64_t seed, const std::string& id_prefix) {
  ImageBatch b;
  b.images = Tensor({static_cast<int>(count), 3, kSide, kSide});
  b.labels.resize(count);
  b.ids.resize(count);
  std::vector<double> img(kCifarImageBytes);
  for (std::size_t i = 0; i < count; ++i) {
    detail::Rng rng(detail::mix_seed(seed, i));
    const int label = static_cast<int>(rng.below(10));
    render(img, label, rng);
    b.labels[i] = label;
    b.ids[i] = id_prefix + ":" + std::to_string(i);
    float* dst = b.images.item(i).data();
    // Quantize like the byte format so files reproduce the batch exactly.
    for (std::size_t p = 0; p < kCifarImageBytes; ++p) dst[p] = std::lround(std::clamp(img[p], 0.0, 1.0) * 255.0) / 255.0f;
  }
  return b;
}

CifarFiles write_synthetic_cifar(const fs::path& dir, const SynthParams& params) {
  require(params.train_files >= 1 && params.train_per_file >= 1 && params.test_records >= 1, ErrorKind::kConfig,
          "synthetic data needs at least one record per file");
  CifarFiles files;
  for (int f = 1; f <= params.train_files; ++f) {
    const auto path = dir / ("data_batch_" + std::to_string(f) + ".bin");
    write_cifar_file(path, synth_batch(params.train_per_file, detail::mix_seed(params.seed, f), "train" + std::to_string(f)));
    files.train.push_back(path);
  }
  files.test = dir / "test_batch.bin";
  write_cifar_file(files.test, synth_batch(params.test_records, detail::mix_seed(params.seed, 1000), "test"));
  return files;
}

}  // namespace segloo::data
