#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "fmask/error.hpp"

namespace fmask {

/// Dense H x W x C array of doubles, interleaved per pixel (row-major, channel
/// fastest). The tag keeps pixel images, gradients and region weights apart at
/// the type level while sharing storage code.
template <class Tag, int Channels>
class Grid {
 public:
  static constexpr int kChannels = Channels;

  Grid() = default;
  Grid(int height, int width, double fill = 0.0) : height_(height), width_(width) {
    if (height <= 0 || width <= 0) {
      throw Error(ErrorCode::InvalidArgument,
                  "grid dimensions must be positive, got " + std::to_string(height) + "x" +
                      std::to_string(width));
    }
    data_.assign(static_cast<std::size_t>(height) * width * Channels, fill);
  }

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  int channels() const noexcept { return Channels; }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t pixel_count() const noexcept { return static_cast<std::size_t>(height_) * width_; }
  bool empty() const noexcept { return data_.empty(); }

  double& at(int y, int x, int c = 0) { return data_[index(y, x, c)]; }
  double at(int y, int x, int c = 0) const { return data_[index(y, x, c)]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::size_t index(int y, int x, int c = 0) const noexcept {
    return (static_cast<std::size_t>(y) * width_ + x) * Channels + c;
  }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  template <class OtherTag>
  bool same_shape(const Grid<OtherTag, Channels>& other) const noexcept {
    return height_ == other.height() && width_ == other.width();
  }
  template <class OtherTag, int OtherChannels>
  bool same_extent(const Grid<OtherTag, OtherChannels>& other) const noexcept {
    return height_ == other.height() && width_ == other.width();
  }

  friend bool operator==(const Grid& a, const Grid& b) {
    return a.height_ == b.height_ && a.width_ == b.width_ && a.data_ == b.data_;
  }

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<double> data_;
};

struct ImageTag {};
struct GradientTag {};
struct RegionTag {};

/// RGB image with intensities in [0,1].
using Image = Grid<ImageTag, 3>;
/// d(loss)/d(pixel), same layout as Image, unbounded.
using GradientImage = Grid<GradientTag, 3>;
/// Per-pixel weight in [0,1]; binary unless feathered.
using RegionMask = Grid<RegionTag, 1>;

struct Rgb {
  double r = 0.0;
  double g = 0.0;
  double b = 0.0;
};

template <class A, class B>
void require_same_extent(const A& a, const B& b, const char* what) {
  if (a.height() != b.height() || a.width() != b.width()) {
    throw Error(ErrorCode::DimensionMismatch,
                std::string(what) + ": " + std::to_string(a.height()) + "x" +
                    std::to_string(a.width()) + " vs " + std::to_string(b.height()) + "x" +
                    std::to_string(b.width()));
  }
}

inline void clamp_unit(Image& image) {
  for (double& v : image.values()) v = std::clamp(v, 0.0, 1.0);
}

inline Image clamped(Image image) {
  clamp_unit(image);
  return image;
}

/// True when every value is finite and inside [0,1].
inline bool is_valid_image(const Image& image) {
  return std::all_of(image.values().begin(), image.values().end(),
                     [](double v) { return std::isfinite(v) && v >= 0.0 && v <= 1.0; });
}

inline double max_abs_diff(const Image& a, const Image& b) {
  require_same_extent(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline std::size_t region_pixel_count(const RegionMask& region) {
  return static_cast<std::size_t>(std::count_if(
      region.values().begin(), region.values().end(), [](double w) { return w > 0.0; }));
}

}  // namespace fmask
