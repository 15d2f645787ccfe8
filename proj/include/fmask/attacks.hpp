#pragma once

// Adversarial masking: the joint recognition/detection objective, the
// region-restricted PGD noise attack and the pixel-wise adversarial filtering
// attack (noise stage followed by per-pixel kernel optimization).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "fmask/error.hpp"
#include "fmask/geometry.hpp"
#include "fmask/image.hpp"
#include "fmask/models.hpp"

namespace fmask {

struct NoiseAttackConfig {
  double epsilon = 0.04;
  double step_size = 0.001;
  int iterations = 40;
  double ratio_alpha = 1.0;
  int target_label = 0;

  void validate() const {
    if (!(epsilon > 0.0)) throw Error(ErrorCode::ConfigInvalid, "noise epsilon must be > 0");
    if (!(step_size > 0.0)) throw Error(ErrorCode::ConfigInvalid, "noise step_size must be > 0");
    if (iterations < 0) throw Error(ErrorCode::ConfigInvalid, "noise iterations must be >= 0");
    if (target_label != 0 && target_label != 1)
      throw Error(ErrorCode::ConfigInvalid, "target label must be 0 or 1");
  }
};

struct FilterAttackConfig {
  double noise_epsilon = 0.01;
  int kernel_size = 5;
  double kernel_step = 0.1;
  int kernel_iterations = 160;
  double ratio_beta = 1.0;
  bool ablation_filter_only = false;
  // Evaluate the loss on the [0,1]-clamped filtered image (straight-through
  // backward). Off only for first-order consistency checks.
  bool clamp_iterates = true;

  void validate() const {
    if (kernel_size < 1 || kernel_size % 2 == 0)
      throw Error(ErrorCode::EvenKernel, "kernel size must be odd and >= 1, got " + std::to_string(kernel_size));
    if (!(noise_epsilon > 0.0)) throw Error(ErrorCode::ConfigInvalid, "noise_epsilon must be > 0");
    if (!(kernel_step > 0.0)) throw Error(ErrorCode::ConfigInvalid, "kernel step must be > 0");
    if (kernel_iterations < 0) throw Error(ErrorCode::ConfigInvalid, "kernel iterations must be >= 0");
  }
};

struct AttackReport {
  std::vector<double> loss_trace;        // loss before each update of the main stage
  std::vector<double> noise_loss_trace;  // noise stage of the filtering attack
  int iterations_completed = 0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double final_distance = 0.0;
  MaskProbabilities final_probabilities;
  double perturbation_linf = 0.0;
  std::size_t region_pixels = 0;
  double wall_clock_seconds = 0.0;
};

inline nlohmann::json to_json(const AttackReport& r, bool include_timing = true) {
  nlohmann::json j = {{"loss_trace", r.loss_trace},
                      {"iterations_completed", r.iterations_completed},
                      {"initial_loss", r.initial_loss},
                      {"final_loss", r.final_loss},
                      {"final_distance", r.final_distance},
                      {"final_mask_probabilities",
                       {{"not_masked", r.final_probabilities.p_not_masked},
                        {"masked", r.final_probabilities.p_masked}}},
                      {"perturbation_linf", r.perturbation_linf},
                      {"region_pixels", r.region_pixels}};
  if (!r.noise_loss_trace.empty()) j["noise_loss_trace"] = r.noise_loss_trace;
  if (include_timing) j["wall_clock_seconds"] = r.wall_clock_seconds;
  return j;
}

// ---------------------------------------------------------------------------
// Joint objective

struct ObjectiveValue {
  double loss = 0.0;
  double distance = 0.0;
  double cross_entropy = 0.0;
  MaskProbabilities probabilities;
};

struct ObjectiveGradient {
  ObjectiveValue value;
  GradientImage gradient;
};

/// D(FR(x), FR(I)) - ratio * CE(MD(x), y); larger is better for the attacker.
class JointObjective {
 public:
  JointObjective(const DifferentiableModel& fr, const DifferentiableModel& md,
                 std::vector<double> reference_embedding, double ratio, int label)
      : fr_(&fr), md_(&md), reference_(std::move(reference_embedding)), ratio_(ratio), label_(label) {
    if (fr.kind() != ModelKind::Embedder) throw Error(ErrorCode::UnsupportedLoss, "FR must be an embedder");
    if (md.kind() != ModelKind::Detector) throw Error(ErrorCode::UnsupportedLoss, "MD must be a detector");
    if (label != 0 && label != 1) throw Error(ErrorCode::UnsupportedLoss, "label must be 0 or 1");
  }

  static JointObjective against(const Image& reference, const DifferentiableModel& fr,
                                const DifferentiableModel& md, double ratio, int label) {
    return JointObjective(fr, md, embed(fr, reference).values, ratio, label);
  }

  JointObjective with_ratio(double ratio) const {
    return JointObjective(*fr_, *md_, reference_, ratio, label_);
  }

  double ratio() const noexcept { return ratio_; }
  int label() const noexcept { return label_; }
  const std::vector<double>& reference() const noexcept { return reference_; }
  const DifferentiableModel& fr() const noexcept { return *fr_; }
  const DifferentiableModel& md() const noexcept { return *md_; }

  ObjectiveValue value(const Image& image) const {
    ObjectiveValue v;
    v.distance = euclidean_distance(fr_->forward(image), reference_);
    const auto logits = md_->forward(image);
    v.probabilities = softmax_pair(logits[0], logits[1]);
    v.cross_entropy = cross_entropy(v.probabilities, label_);
    v.loss = v.distance - ratio_ * v.cross_entropy;
    return v;
  }

  ObjectiveGradient value_and_gradient(const Image& image) const {
    const LossSpec distance_loss = EmbeddingDistanceLoss{reference_};
    const LossSpec ce_loss = CrossEntropyLoss{label_};
    auto fr_eval = fr_->forward_backward(
        image, [&](std::span<const double> out) { return detail::loss_output_gradient(distance_loss, out); });
    auto md_eval = md_->forward_backward(
        image, [&](std::span<const double> out) { return detail::loss_output_gradient(ce_loss, out); });
    ObjectiveGradient g;
    g.value.distance = euclidean_distance(fr_eval.output, reference_);
    g.value.probabilities = softmax_pair(md_eval.output[0], md_eval.output[1]);
    g.value.cross_entropy = cross_entropy(g.value.probabilities, label_);
    g.value.loss = g.value.distance - ratio_ * g.value.cross_entropy;
    g.gradient = std::move(fr_eval.gradient);
    for (std::size_t i = 0; i < g.gradient.size(); ++i) g.gradient[i] -= ratio_ * md_eval.gradient[i];
    return g;
  }

 private:
  const DifferentiableModel* fr_;
  const DifferentiableModel* md_;
  std::vector<double> reference_;
  double ratio_;
  int label_;
};

/// Joint objective of `image` against the embedding of `reference`.
inline double joint_loss(const Image& image, const Image& reference, const DifferentiableModel& fr,
                         const DifferentiableModel& md, double ratio, int label) {
  return JointObjective::against(reference, fr, md, ratio, label).value(image).loss;
}

namespace detail {
inline double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

inline double linf_distance(const Image& a, const Image& b) { return max_abs_diff(a, b); }

inline void finish_report(AttackReport& report, const JointObjective& objective, const Image& out,
                          const Image& start, const RegionMask& region,
                          std::chrono::steady_clock::time_point t0) {
  const auto v = objective.value(out);
  report.final_loss = v.loss;
  report.final_distance = v.distance;
  report.final_probabilities = v.probabilities;
  report.perturbation_linf = linf_distance(out, start);
  report.region_pixels = region_pixel_count(region);
  report.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}
}  // namespace detail

struct AttackResult {
  Image image;
  AttackReport report;
};

/// Sign-gradient ascent on the joint objective. The perturbation is confined
/// to the region, projected onto the epsilon L-inf ball around `start` and the
/// image is kept inside [0,1].
inline AttackResult pgd_noise_attack(const Image& start, const JointObjective& objective,
                                     const NoiseAttackConfig& config, const RegionMask& region) {
  config.validate();
  require_same_extent(start, region, "pgd region");
  const auto t0 = std::chrono::steady_clock::now();
  AttackReport report;
  Image x = start;
  for (int it = 0; it < config.iterations; ++it) {
    const auto g = objective.value_and_gradient(x);
    report.loss_trace.push_back(g.value.loss);
    for (int y = 0; y < x.height(); ++y) {
      for (int px = 0; px < x.width(); ++px) {
        const double w = region.at(y, px);
        if (w <= 0.0) continue;
        for (int c = 0; c < 3; ++c) {
          const std::size_t i = x.index(y, px, c);
          double v = x[i] + config.step_size * w * detail::sign(g.gradient[i]);
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

/// Convenience overload: objective against FR(reference) with the config's
/// ratio and label.
inline AttackResult pgd_noise_attack(const Image& image_dm, const Image& reference,
                                     const DifferentiableModel& fr, const DifferentiableModel& md,
                                     const NoiseAttackConfig& config, const RegionMask& region) {
  config.validate();
  return pgd_noise_attack(image_dm, JointObjective::against(reference, fr, md, config.ratio_alpha, config.target_label),
                          config, region);
}

// ---------------------------------------------------------------------------
// Pixel-wise filtering

/// One K x K kernel per pixel, row-major inside each kernel.
class PixelwiseKernels {
 public:
  PixelwiseKernels() = default;
  PixelwiseKernels(int height, int width, int kernel_size, double fill = 0.0)
      : height_(height), width_(width), k_(kernel_size) {
    if (height <= 0 || width <= 0) throw Error(ErrorCode::InvalidArgument, "kernel grid must be non-empty");
    if (kernel_size < 1 || kernel_size % 2 == 0)
      throw Error(ErrorCode::EvenKernel, "kernel size must be odd, got " + std::to_string(kernel_size));
    data_.assign(static_cast<std::size_t>(height) * width * kernel_size * kernel_size, fill);
  }

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  int kernel_size() const noexcept { return k_; }
  int radius() const noexcept { return k_ / 2; }
  std::size_t size() const noexcept { return data_.size(); }

  double& at(int y, int x, int i, int j) { return data_[index(y, x, i, j)]; }
  double at(int y, int x, int i, int j) const { return data_[index(y, x, i, j)]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  std::size_t index(int y, int x, int i, int j) const noexcept {
    return ((static_cast<std::size_t>(y) * width_ + x) * k_ + i) * k_ + j;
  }

  friend bool operator==(const PixelwiseKernels&, const PixelwiseKernels&) = default;

 private:
  int height_ = 0;
  int width_ = 0;
  int k_ = 1;
  std::vector<double> data_;
};

/// Identity kernels: center weight 1, all others 0.
inline PixelwiseKernels init_delta_kernels(int height, int width, int kernel_size) {
  PixelwiseKernels k(height, width, kernel_size, 0.0);
  const int r = kernel_size / 2;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) k.at(y, x, r, r) = 1.0;
  return k;
}

/// out(p, c) = sum_{i,j} K_p[i,j] * in(p + (i - r, j - r), c) with replicate
/// padding. The result is clamped to [0,1] only when `clamp_output` is set.
inline Image pixelwise_filter(const Image& image, const PixelwiseKernels& kernels, bool clamp_output = false) {
  if (image.height() != kernels.height() || image.width() != kernels.width())
    throw Error(ErrorCode::DimensionMismatch, "kernel grid does not match image");
  const int r = kernels.radius(), k = kernels.kernel_size();
  const int h = image.height(), w = image.width();
  Image out(h, w, 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc[3] = {0.0, 0.0, 0.0};
      for (int i = 0; i < k; ++i) {
        const int sy = std::clamp(y + i - r, 0, h - 1);
        for (int j = 0; j < k; ++j) {
          const double kv = kernels.at(y, x, i, j);
          if (kv == 0.0) continue;
          const int sx = std::clamp(x + j - r, 0, w - 1);
          for (int c = 0; c < 3; ++c) acc[c] += kv * image.at(sy, sx, c);
        }
      }
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = clamp_output ? std::clamp(acc[c], 0.0, 1.0) : acc[c];
    }
  }
  return out;
}

/// d(loss)/d(K_p[i,j]) = sum_c loss_grad(p, c) * in(p + (i - r, j - r), c).
inline PixelwiseKernels kernel_gradient(const GradientImage& loss_grad, const Image& filter_input, int kernel_size) {
  require_same_extent(loss_grad, filter_input, "kernel_gradient");
  PixelwiseKernels g(filter_input.height(), filter_input.width(), kernel_size, 0.0);
  const int r = kernel_size / 2, h = filter_input.height(), w = filter_input.width();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double g0 = loss_grad.at(y, x, 0), g1 = loss_grad.at(y, x, 1), g2 = loss_grad.at(y, x, 2);
      if (g0 == 0.0 && g1 == 0.0 && g2 == 0.0) continue;
      for (int i = 0; i < kernel_size; ++i) {
        const int sy = std::clamp(y + i - r, 0, h - 1);
        for (int j = 0; j < kernel_size; ++j) {
          const int sx = std::clamp(x + j - r, 0, w - 1);
          g.at(y, x, i, j) = g0 * filter_input.at(sy, sx, 0) + g1 * filter_input.at(sy, sx, 1) +
                             g2 * filter_input.at(sy, sx, 2);
        }
      }
    }
  }
  return g;
}

struct FilterAttackResult {
  Image image;               // clamp(K * start)
  PixelwiseKernels kernels;  // optimized kernels
  AttackReport report;
};

/// Raw-gradient ascent on per-pixel kernels applied to a fixed input. Kernel
/// updates outside the region are zeroed, so those pixels keep delta kernels.
inline FilterAttackResult filter_attack(const Image& start, const JointObjective& objective,
                                        const FilterAttackConfig& config, const RegionMask& region) {
  config.validate();
  require_same_extent(start, region, "filter region");
  const auto t0 = std::chrono::steady_clock::now();
  FilterAttackResult result;
  PixelwiseKernels kernels = init_delta_kernels(start.height(), start.width(), config.kernel_size);
  const int kk = config.kernel_size * config.kernel_size;
  for (int it = 0; it < config.kernel_iterations; ++it) {
    Image filtered = pixelwise_filter(start, kernels, config.clamp_iterates);
    const auto g = objective.value_and_gradient(filtered);
    result.report.loss_trace.push_back(g.value.loss);
    const PixelwiseKernels grad = kernel_gradient(g.gradient, start, config.kernel_size);
    for (int y = 0; y < start.height(); ++y) {
      for (int x = 0; x < start.width(); ++x) {
        const double w = region.at(y, x);
        if (w <= 0.0) continue;
        const std::size_t base = kernels.index(y, x, 0, 0);
        for (int t = 0; t < kk; ++t) kernels[base + t] += config.kernel_step * w * grad[base + t];
      }
    }
    ++result.report.iterations_completed;
  }
  result.image = pixelwise_filter(start, kernels, true);
  result.kernels = std::move(kernels);
  result.report.initial_loss =
      result.report.loss_trace.empty() ? objective.value(start).loss : result.report.loss_trace.front();
  detail::finish_report(result.report, objective, result.image, start, region, t0);
  return result;
}

struct Mf2mResult {
  Image image;     // final filtered output
  Image dm;        // Delaunay-masked image
  Image noised;    // dm plus the small adversarial noise (== dm when filter-only)
  RegionMask region;
  PixelwiseKernels kernels;
  AttackReport report;
};

/// Noise stage then kernel stage, starting from an already masked image. The
/// recognition reference is the embedding held by `objective`.
inline Mf2mResult mf2m_from_masked(const Image& dm, const RegionMask& region, const JointObjective& objective,
                                   const NoiseAttackConfig& noise_cfg, const FilterAttackConfig& filter_cfg) {
  noise_cfg.validate();
  filter_cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  Mf2mResult out;
  out.dm = dm;
  out.region = region;
  AttackReport noise_report;
  if (filter_cfg.ablation_filter_only) {
    out.noised = dm;
  } else {
    NoiseAttackConfig small = noise_cfg;
    small.epsilon = filter_cfg.noise_epsilon;
    auto noised = pgd_noise_attack(dm, objective.with_ratio(noise_cfg.ratio_alpha), small, region);
    out.noised = std::move(noised.image);
    noise_report = std::move(noised.report);
  }
  const JointObjective kernel_objective = objective.with_ratio(filter_cfg.ratio_beta);
  auto filtered = filter_attack(out.noised, kernel_objective, filter_cfg, region);
  out.image = std::move(filtered.image);
  out.kernels = std::move(filtered.kernels);
  out.report = std::move(filtered.report);
  out.report.noise_loss_trace = std::move(noise_report.loss_trace);
  out.report.initial_loss = kernel_objective.value(dm).loss;
  detail::finish_report(out.report, kernel_objective, out.image, dm, region, t0);
  return out;
}

/// Full pipeline: Delaunay masking with the template, noise stage, kernel
/// stage. The recognition reference is FR(original).
inline Mf2mResult mf2m_attack(const Image& original, const LandmarkSet& original_landmarks, const Image& templ,
                              const LandmarkSet& template_landmarks, const DifferentiableModel& fr,
                              const DifferentiableModel& md, const NoiseAttackConfig& noise_cfg,
                              const FilterAttackConfig& filter_cfg,
                              const LandmarkScheme& scheme = LandmarkScheme::ibug68()) {
  noise_cfg.validate();
  filter_cfg.validate();
  RegionMask region;
  const Image dm = delaunay_mask(original, original_landmarks, templ, template_landmarks, scheme, &region);
  const auto objective = JointObjective::against(original, fr, md, filter_cfg.ratio_beta, noise_cfg.target_label);
  return mf2m_from_masked(dm, region, objective, noise_cfg, filter_cfg);
}

}  // namespace fmask
