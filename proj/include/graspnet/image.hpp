#pragma once

// Interleaved H x W x C images and the corruption operators used for
// noise-robust training and evaluation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace graspnet {

template <typename T>
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<T> data;

  Image() = default;
  Image(int h, int w, int c, T fill = T{}) : height(h), width(w), channels(c), data(std::size_t(h) * w * c, fill) {
    if (h < 0 || w < 0 || c <= 0) throw std::invalid_argument("invalid image shape");
  }

  T& at(int y, int x, int c = 0) { return data[(std::size_t(y) * width + x) * channels + c]; }
  const T& at(int y, int x, int c = 0) const { return data[(std::size_t(y) * width + x) * channels + c]; }
  std::size_t pixel_count() const { return std::size_t(height) * width; }
  bool empty() const { return data.empty(); }

  friend bool operator==(const Image&, const Image&) = default;
};

using Image8 = Image<std::uint8_t>;
using ImageF = Image<float>;

/// Per-corruption parameters on the 8-bit intensity scale.
struct NoiseConfig {
  double gaussian_sigma = 10.0;
  double sp_density = 0.02;
  double blur_sigma = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (gaussian_sigma < 0.0 || sp_density < 0.0 || blur_sigma < 0.0) {
      throw std::invalid_argument("noise parameters must be non-negative");
    }
    if (sp_density > 1.0) throw std::invalid_argument("salt-and-pepper density must be <= 1");
  }
};

enum class CorruptionMode { kNone, kGaussian, kSaltPepper, kBlur };

inline CorruptionMode parse_corruption_mode(const std::string& s) {
  if (s == "gaussian") return CorruptionMode::kGaussian;
  if (s == "sp") return CorruptionMode::kSaltPepper;
  if (s == "blur") return CorruptionMode::kBlur;
  if (s == "none") return CorruptionMode::kNone;
  throw std::invalid_argument("unknown corruption mode '" + s + "' (expected gaussian, sp or blur)");
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seed for sample `index` in `epoch`, independent of worker scheduling.
inline std::uint64_t augmentation_seed(std::uint64_t global_seed, std::uint64_t epoch, std::uint64_t index) {
  return splitmix64(splitmix64(splitmix64(global_seed) ^ epoch) ^ index);
}

namespace detail {

template <typename T>
T saturate(double v) {
  if constexpr (std::is_integral_v<T>) {
    return static_cast<T>(std::clamp(std::round(v), double(std::numeric_limits<T>::min()),
                                     double(std::numeric_limits<T>::max())));
  } else {
    return static_cast<T>(v);
  }
}

}  // namespace detail

inline Image8 add_gaussian_noise(const Image8& image, double sigma, std::uint64_t seed) {
  if (sigma < 0.0) throw std::invalid_argument("gaussian sigma must be non-negative");
  Image8 out = image;
  if (sigma == 0.0) return out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, sigma);
  for (auto& v : out.data) v = detail::saturate<std::uint8_t>(double(v) + noise(rng));
  return out;
}

/// Each pixel flips to black or white (all channels) with probability `density`.
inline Image8 add_salt_pepper(const Image8& image, double density, std::uint64_t seed) {
  if (density < 0.0 || density > 1.0) throw std::invalid_argument("salt-and-pepper density must be in [0, 1]");
  Image8 out = image;
  if (density == 0.0) return out;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      const bool hit = u(rng) < density;
      const bool salt = u(rng) < 0.5;
      if (!hit) continue;
      for (int c = 0; c < out.channels; ++c) out.at(y, x, c) = salt ? 255 : 0;
    }
  }
  return out;
}

inline std::vector<double> gaussian_kernel(double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    sum += k[i + radius];
  }
  for (auto& v : k) v /= sum;
  return k;
}

/// Separable Gaussian blur with radius ceil(3 sigma) and edge replication.
template <typename T>
Image<T> blur(const Image<T>& image, double sigma) {
  if (sigma < 0.0) throw std::invalid_argument("blur sigma must be non-negative");
  if (sigma == 0.0 || image.empty()) return image;
  const auto k = gaussian_kernel(sigma);
  const int r = static_cast<int>(k.size() / 2);
  const int h = image.height, w = image.width, ch = image.channels;
  std::vector<double> tmp(image.data.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < ch; ++c) {
        double acc = 0.0;
        for (int i = -r; i <= r; ++i) {
          const int xx = std::clamp(x + i, 0, w - 1);
          acc += k[i + r] * double(image.at(y, xx, c));
        }
        tmp[(std::size_t(y) * w + x) * ch + c] = acc;
      }
    }
  }
  Image<T> out(h, w, ch);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < ch; ++c) {
        double acc = 0.0;
        for (int i = -r; i <= r; ++i) {
          const int yy = std::clamp(y + i, 0, h - 1);
          acc += k[i + r] * tmp[(std::size_t(yy) * w + x) * ch + c];
        }
        out.at(y, x, c) = detail::saturate<T>(acc);
      }
    }
  }
  return out;
}

inline Image8 corrupt(const Image8& image, CorruptionMode mode, double level, std::uint64_t seed) {
  switch (mode) {
    case CorruptionMode::kGaussian:
      return add_gaussian_noise(image, level, seed);
    case CorruptionMode::kSaltPepper:
      return add_salt_pepper(image, level, seed);
    case CorruptionMode::kBlur:
      return blur(image, level);
    case CorruptionMode::kNone:
      break;
  }
  return image;
}

/// Training-time augmentation: with probability `apply_prob` pick one of the
/// three corruptions uniformly and apply it at the configured level.
inline Image8 random_corruption(const Image8& image, const NoiseConfig& cfg, double apply_prob, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  if (u(rng) >= apply_prob) return image;
  const int which = std::uniform_int_distribution<int>(0, 2)(rng);
  const std::uint64_t op_seed = rng();
  switch (which) {
    case 0:
      return add_gaussian_noise(image, cfg.gaussian_sigma, op_seed);
    case 1:
      return add_salt_pepper(image, cfg.sp_density, op_seed);
    default:
      return blur(image, cfg.blur_sigma);
  }
}

/// Pads bottom/right by edge replication so both dims are multiples of `multiple`.
template <typename T>
Image<T> pad_to_multiple(const Image<T>& image, int multiple) {
  const int h = (image.height + multiple - 1) / multiple * multiple;
  const int w = (image.width + multiple - 1) / multiple * multiple;
  if (h == image.height && w == image.width) return image;
  Image<T> out(h, w, image.channels);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int sy = std::min(y, image.height - 1);
      const int sx = std::min(x, image.width - 1);
      for (int c = 0; c < image.channels; ++c) out.at(y, x, c) = image.at(sy, sx, c);
    }
  }
  return out;
}

}  // namespace graspnet
