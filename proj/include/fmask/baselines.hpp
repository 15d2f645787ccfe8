#pragma once

// Solid-color masking and the FGSM attack family used as comparison points.
// Every variant maximizes the same joint objective as the faced-mask attacks
// and is confined to the mask region and the epsilon L-inf ball.

#include <algorithm>
#include <array>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "fmask/attacks.hpp"
#include "fmask/error.hpp"
#include "fmask/geometry.hpp"
#include "fmask/image.hpp"

namespace fmask {

enum class BaselineKind { FGSM, I_FGSM, MI_FGSM, TI_FGSM, TI_MI_FGSM, DI2_FGSM, M_DI2_FGSM };

inline constexpr std::array<BaselineKind, 7> kAllBaselines = {
    BaselineKind::FGSM,    BaselineKind::I_FGSM,     BaselineKind::MI_FGSM,   BaselineKind::TI_FGSM,
    BaselineKind::TI_MI_FGSM, BaselineKind::DI2_FGSM, BaselineKind::M_DI2_FGSM};

inline std::string to_string(BaselineKind kind) {
  switch (kind) {
    case BaselineKind::FGSM: return "FGSM";
    case BaselineKind::I_FGSM: return "I_FGSM";
    case BaselineKind::MI_FGSM: return "MI_FGSM";
    case BaselineKind::TI_FGSM: return "TI_FGSM";
    case BaselineKind::TI_MI_FGSM: return "TI_MI_FGSM";
    case BaselineKind::DI2_FGSM: return "DI2_FGSM";
    case BaselineKind::M_DI2_FGSM: return "M_DI2_FGSM";
  }
  return "?";
}

/// Accepts the canonical names and their hyphenated spellings (I-FGSM, ...).
inline BaselineKind parse_baseline_kind(std::string name) {
  std::replace(name.begin(), name.end(), '-', '_');
  std::transform(name.begin(), name.end(), name.begin(), [](unsigned char c) { return std::toupper(c); });
  for (auto kind : kAllBaselines)
    if (to_string(kind) == name) return kind;
  throw Error(ErrorCode::ConfigInvalid, "unknown baseline variant '" + name + "'");
}

struct BaselineVariant {
  BaselineKind kind = BaselineKind::I_FGSM;
  double momentum_mu = 1.0;
  int ti_kernel_size = 7;
  double di_probability = 0.5;
  double di_min_scale = 0.9;

  bool iterative() const noexcept { return kind != BaselineKind::FGSM && kind != BaselineKind::TI_FGSM; }
  bool momentum() const noexcept {
    return kind == BaselineKind::MI_FGSM || kind == BaselineKind::TI_MI_FGSM || kind == BaselineKind::M_DI2_FGSM;
  }
  bool translation_invariant() const noexcept {
    return kind == BaselineKind::TI_FGSM || kind == BaselineKind::TI_MI_FGSM;
  }
  bool diverse_inputs() const noexcept {
    return kind == BaselineKind::DI2_FGSM || kind == BaselineKind::M_DI2_FGSM;
  }

  void validate() const {
    if (!(momentum_mu >= 0.0)) throw Error(ErrorCode::ConfigInvalid, "momentum mu must be >= 0");
    if (ti_kernel_size < 1 || ti_kernel_size % 2 == 0)
      throw Error(ErrorCode::ConfigInvalid, "ti_kernel_size must be odd");
    if (!(di_probability >= 0.0 && di_probability <= 1.0))
      throw Error(ErrorCode::ConfigInvalid, "di_probability must be in [0,1]");
    if (!(di_min_scale > 0.0 && di_min_scale <= 1.0))
      throw Error(ErrorCode::ConfigInvalid, "di_min_scale must be in (0,1]");
  }
};

inline constexpr Rgb kMedicalBlue{0.45, 0.62, 0.78};

struct MaskedImage {
  Image image;
  RegionMask region;
};

/// Fills the lower-face region with a constant color.
inline MaskedImage solid_color_mask(const Image& original, const LandmarkSet& landmarks, Rgb color = kMedicalBlue,
                                    const LandmarkScheme& scheme = LandmarkScheme::ibug68()) {
  MaskedImage out;
  out.region = lower_face_region(landmarks, original.height(), original.width(), scheme);
  Image fill(original.height(), original.width());
  for (int y = 0; y < fill.height(); ++y)
    for (int x = 0; x < fill.width(); ++x) {
      fill.at(y, x, 0) = color.r;
      fill.at(y, x, 1) = color.g;
      fill.at(y, x, 2) = color.b;
    }
  out.image = composite(original, fill, out.region);
  return out;
}

/// L1-normalized separable Gaussian, sigma = size / 3.
inline std::vector<double> ti_gaussian_kernel(int size) {
  if (size < 1 || size % 2 == 0) throw Error(ErrorCode::ConfigInvalid, "TI kernel size must be odd");
  const int r = size / 2;
  const double sigma = size / 3.0;
  std::vector<double> k1(size);
  for (int i = 0; i < size; ++i) k1[i] = std::exp(-0.5 * (i - r) * (i - r) / (sigma * sigma));
  std::vector<double> k2(static_cast<std::size_t>(size) * size);
  double total = 0.0;
  for (int i = 0; i < size; ++i)
    for (int j = 0; j < size; ++j) total += k2[i * size + j] = k1[i] * k1[j];
  for (double& v : k2) v /= total;
  return k2;
}

/// Per-channel 2-D convolution with zero padding.
inline GradientImage smooth_gradient(const GradientImage& g, const std::vector<double>& kernel, int size) {
  const int r = size / 2, h = g.height(), w = g.width();
  GradientImage out(h, w, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int i = 0; i < size; ++i) {
          const int sy = y + i - r;
          if (sy < 0 || sy >= h) continue;
          for (int j = 0; j < size; ++j) {
            const int sx = x + j - r;
            if (sx < 0 || sx >= w) continue;
            acc += kernel[i * size + j] * g.at(sy, sx, c);
          }
        }
        out.at(y, x, c) = acc;
      }
  return out;
}

/// Random resize-and-pad used by the diverse-inputs variants: nearest-neighbor
/// downscale to rows x cols, placed at (top, left) on a zero canvas.
struct DiverseInputTransform {
  int rows = 0;
  int cols = 0;
  int top = 0;
  int left = 0;

  Image apply(const Image& in) const {
    Image out(in.height(), in.width(), 0.0);
    for (int y = 0; y < rows; ++y) {
      const int sy = source_row(y, in.height());
      for (int x = 0; x < cols; ++x) {
        const int sx = source_col(x, in.width());
        for (int c = 0; c < 3; ++c) out.at(top + y, left + x, c) = in.at(sy, sx, c);
      }
    }
    return out;
  }

  /// Adjoint of apply(): scatters the transformed-image gradient back.
  GradientImage pull_back(const GradientImage& g) const {
    GradientImage out(g.height(), g.width(), 0.0);
    for (int y = 0; y < rows; ++y) {
      const int sy = source_row(y, g.height());
      for (int x = 0; x < cols; ++x) {
        const int sx = source_col(x, g.width());
        for (int c = 0; c < 3; ++c) out.at(sy, sx, c) += g.at(top + y, left + x, c);
      }
    }
    return out;
  }

  int source_row(int y, int height) const { return std::min(height - 1, static_cast<int>((static_cast<long>(y) * height) / rows)); }
  int source_col(int x, int width) const { return std::min(width - 1, static_cast<int>((static_cast<long>(x) * width) / cols)); }
};

namespace detail {
// Portable draws from mt19937_64 (the standard distributions are not
// specified bit-exactly across library implementations).
inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }
inline int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
}
}  // namespace detail

inline DiverseInputTransform draw_diverse_input(std::mt19937_64& rng, int height, int width, double min_scale) {
  DiverseInputTransform t;
  const int lo = std::min(height, static_cast<int>(std::ceil(min_scale * height - 1e-9)));
  t.rows = detail::uniform_int(rng, lo, height);
  t.cols = std::clamp(static_cast<int>(std::lround(static_cast<double>(t.rows) * width / height)), 1, width);
  t.top = detail::uniform_int(rng, 0, height - t.rows);
  t.left = detail::uniform_int(rng, 0, width - t.cols);
  return t;
}

/// Runs one FGSM-family variant from `start`. The seed is required for the
/// diverse-input variants.
inline AttackResult fgsm_family_attack(const Image& start, const JointObjective& objective,
                                       const BaselineVariant& variant, const NoiseAttackConfig& config,
                                       const RegionMask& region, std::optional<std::uint64_t> seed = std::nullopt) {
  variant.validate();
  config.validate();
  require_same_extent(start, region, "baseline region");
  if (variant.diverse_inputs() && !seed)
    throw Error(ErrorCode::MissingSeed, to_string(variant.kind) + " needs a seed");
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(seed.value_or(0));

  const int iterations = variant.iterative() ? config.iterations : 1;
  const double step = variant.iterative() ? config.step_size : config.epsilon;
  const auto ti_kernel = variant.translation_invariant() ? ti_gaussian_kernel(variant.ti_kernel_size)
                                                         : std::vector<double>{};
  AttackReport report;
  Image x = start;
  GradientImage momentum(start.height(), start.width(), 0.0);
  for (int it = 0; it < iterations; ++it) {
    GradientImage grad;
    if (variant.diverse_inputs()) {
      const bool transform = detail::uniform01(rng) < variant.di_probability;
      const auto t = draw_diverse_input(rng, x.height(), x.width(), variant.di_min_scale);
      if (transform) {
        report.loss_trace.push_back(objective.value(x).loss);
        grad = t.pull_back(objective.value_and_gradient(t.apply(x)).gradient);
      } else {
        auto g = objective.value_and_gradient(x);
        report.loss_trace.push_back(g.value.loss);
        grad = std::move(g.gradient);
      }
    } else {
      auto g = objective.value_and_gradient(x);
      report.loss_trace.push_back(g.value.loss);
      grad = std::move(g.gradient);
    }
    if (variant.translation_invariant()) grad = smooth_gradient(grad, ti_kernel, variant.ti_kernel_size);
    if (variant.momentum()) {
      double l1 = 0.0;
      for (double v : grad.values()) l1 += std::abs(v);
      for (std::size_t i = 0; i < grad.size(); ++i)
        momentum[i] = variant.momentum_mu * momentum[i] + (l1 > 0.0 ? grad[i] / l1 : 0.0);
      grad = momentum;
    }
    for (int y = 0; y < x.height(); ++y) {
      for (int px = 0; px < x.width(); ++px) {
        const double w = region.at(y, px);
        if (w <= 0.0) continue;
        for (int c = 0; c < 3; ++c) {
          const std::size_t i = x.index(y, px, c);
          double v = x[i] + step * w * detail::sign(grad[i]);
          v = std::clamp(v, start[i] - config.epsilon, start[i] + config.epsilon);
          x[i] = std::clamp(v, 0.0, 1.0);
        }
      }
    }
    ++report.iterations_completed;
  }
  report.initial_loss = report.loss_trace.empty() ? objective.value(start).loss : report.loss_trace.front();
  detail::finish_report(report, objective, x, start, region, t0);
  return {std::move(x), std::move(report)};
}

inline AttackResult fgsm_family_attack(const Image& image, const Image& reference, const DifferentiableModel& fr,
                                       const DifferentiableModel& md, const BaselineVariant& variant,
                                       const NoiseAttackConfig& config, const RegionMask& region,
                                       std::optional<std::uint64_t> seed = std::nullopt) {
  config.validate();
  return fgsm_family_attack(image, JointObjective::against(reference, fr, md, config.ratio_alpha, config.target_label),
                            variant, config, region, seed);
}

}  // namespace fmask
