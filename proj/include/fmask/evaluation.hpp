#pragma once

// Identification, verification, mask-detection and image-similarity metrics.
// Verification scores are Euclidean embedding distances: lower means more
// similar, and a pair is accepted when its distance is <= the threshold.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fmask/error.hpp"
#include "fmask/image.hpp"
#include "fmask/models.hpp"

namespace fmask {

// ---------------------------------------------------------------------------
// Identification

struct CmcCurve {
  std::vector<double> rates;  // rates[k - 1] = rank-k identification rate

  double rank(std::size_t k) const {
    if (k == 0 || rates.empty()) return 0.0;
    return rates[std::min(k, rates.size()) - 1];
  }
};

/// 1-based rank of the first same-identity gallery entry for one probe
/// (distance ascending, ties broken by gallery index).
template <class Label>
std::size_t mate_rank(std::span<const double> probe, const std::vector<std::vector<double>>& gallery,
                      const std::vector<Label>& gallery_labels, const Label& probe_label) {
  std::optional<double> best_mate;
  std::size_t best_index = 0;
  for (std::size_t g = 0; g < gallery.size(); ++g) {
    if (!(gallery_labels[g] == probe_label)) continue;
    const double d = euclidean_distance(probe, gallery[g]);
    if (!best_mate || d < *best_mate) {
      best_mate = d;
      best_index = g;
    }
  }
  if (!best_mate) throw Error(ErrorCode::NoMateInGallery, "probe identity has no gallery mate");
  // Rank = 1 + entries strictly ahead of the nearest mate in (distance, index) order.
  std::size_t ahead = 0;
  for (std::size_t g = 0; g < gallery.size(); ++g) {
    const double d = euclidean_distance(probe, gallery[g]);
    if (d < *best_mate || (d == *best_mate && g < best_index)) ++ahead;
  }
  return ahead + 1;
}

template <class Label>
CmcCurve cmc_curve(const std::vector<std::vector<double>>& probes, const std::vector<std::vector<double>>& gallery,
                   const std::vector<Label>& gallery_labels, const std::vector<Label>& probe_labels,
                   std::size_t max_rank) {
  if (probes.size() != probe_labels.size() || gallery.size() != gallery_labels.size())
    throw Error(ErrorCode::InvalidArgument, "embedding and label counts differ");
  if (probes.empty()) throw Error(ErrorCode::EmptySet, "no probes");
  if (max_rank == 0) throw Error(ErrorCode::InvalidArgument, "max_rank must be >= 1");
  std::vector<std::size_t> hits(max_rank, 0);
  for (std::size_t p = 0; p < probes.size(); ++p) {
    const std::size_t r = mate_rank(std::span<const double>(probes[p]), gallery, gallery_labels, probe_labels[p]);
    if (r <= max_rank) ++hits[r - 1];
  }
  CmcCurve curve;
  std::size_t cumulative = 0;
  for (std::size_t k = 0; k < max_rank; ++k) {
    cumulative += hits[k];
    curve.rates.push_back(static_cast<double>(cumulative) / static_cast<double>(probes.size()));
  }
  return curve;
}

// ---------------------------------------------------------------------------
// Verification

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
};

struct TarAtFar {
  double far_target = 0.0;
  double tar = 0.0;
  double achieved_far = 0.0;
  bool unreachable = false;  // target below 1 / |negatives|
};

struct VerificationResult {
  std::vector<TarAtFar> tar_at_far;
  double auc = 0.0;
  std::vector<RocPoint> roc;
  std::size_t positives = 0;
  std::size_t negatives = 0;
};

/// Pull-based source of negative-pair scores.
class ScoreSource {
 public:
  virtual ~ScoreSource() = default;
  virtual std::optional<double> next() = 0;
};

class SpanScoreSource final : public ScoreSource {
 public:
  explicit SpanScoreSource(std::span<const double> scores) : scores_(scores) {}
  std::optional<double> next() override {
    if (pos_ >= scores_.size()) return std::nullopt;
    return scores_[pos_++];
  }

 private:
  std::span<const double> scores_;
  std::size_t pos_ = 0;
};

/// Exact streaming ROC: positives are held sorted; each negative is counted
/// into the bucket of distinct positive values it falls before or on.
/// Accumulators over the same positives merge by adding counts.
class VerificationAccumulator {
 public:
  explicit VerificationAccumulator(std::span<const double> positives) {
    if (positives.empty()) throw Error(ErrorCode::EmptyScores, "no positive scores");
    std::vector<double> sorted(positives.begin(), positives.end());
    for (double s : sorted)
      if (!std::isfinite(s)) throw Error(ErrorCode::InvalidArgument, "non-finite positive score");
    std::sort(sorted.begin(), sorted.end());
    for (double s : sorted) {
      if (values_.empty() || values_.back() != s) {
        values_.push_back(s);
        pos_counts_.push_back(0);
      }
      ++pos_counts_.back();
    }
    less_.assign(values_.size() + 1, 0);
    equal_.assign(values_.size(), 0);
    positives_ = sorted.size();
  }

  void add_negative(double s) {
    if (!std::isfinite(s)) throw Error(ErrorCode::InvalidArgument, "non-finite negative score");
    const auto it = std::lower_bound(values_.begin(), values_.end(), s);
    const std::size_t j = static_cast<std::size_t>(it - values_.begin());
    if (j < values_.size() && values_[j] == s)
      ++equal_[j];
    else
      ++less_[j];
    ++negatives_;
  }

  void add_negatives(ScoreSource& source) {
    while (auto s = source.next()) add_negative(*s);
  }

  void merge(const VerificationAccumulator& other) {
    if (other.values_ != values_ || other.pos_counts_ != pos_counts_)
      throw Error(ErrorCode::InvalidArgument, "cannot merge accumulators over different positives");
    for (std::size_t j = 0; j < less_.size(); ++j) less_[j] += other.less_[j];
    for (std::size_t j = 0; j < equal_.size(); ++j) equal_[j] += other.equal_[j];
    negatives_ += other.negatives_;
  }

  std::size_t negatives() const noexcept { return negatives_; }

  VerificationResult finalize(std::span<const double> far_targets) const {
    if (negatives_ == 0) throw Error(ErrorCode::EmptyScores, "no negative scores");
    for (double t : far_targets)
      if (!(t > 0.0 && t <= 1.0)) throw Error(ErrorCode::InvalidArgument, "FAR target must be in (0,1]");
    const double P = static_cast<double>(positives_), N = static_cast<double>(negatives_);
    VerificationResult r;
    r.positives = positives_;
    r.negatives = negatives_;

    // Cumulative counts at each distinct positive value v_j (threshold t = v_j).
    std::vector<std::size_t> neg_at(values_.size()), pos_at(values_.size());
    std::size_t cum_neg = 0, cum_pos = 0;
    unsigned __int128 twice_area = 0;  // in units of 1/(P*N)
    r.roc.push_back({0.0, 0.0});
    for (std::size_t j = 0; j < values_.size(); ++j) {
      // Thresholds in (v_{j-1}, v_j): only negatives move.
      twice_area += static_cast<unsigned __int128>(less_[j]) * (2 * cum_pos);
      cum_neg += less_[j];
      if (less_[j] > 0) r.roc.push_back({cum_neg / N, cum_pos / P});
      // Threshold v_j: positives and tied negatives move together.
      twice_area += static_cast<unsigned __int128>(equal_[j]) * (2 * cum_pos + pos_counts_[j]);
      cum_neg += equal_[j];
      cum_pos += pos_counts_[j];
      r.roc.push_back({cum_neg / N, cum_pos / P});
      neg_at[j] = cum_neg;
      pos_at[j] = cum_pos;
    }
    twice_area += static_cast<unsigned __int128>(less_.back()) * (2 * cum_pos);
    if (less_.back() > 0) r.roc.push_back({1.0, 1.0});
    r.auc = static_cast<double>(static_cast<long double>(twice_area) /
                                (2.0L * static_cast<long double>(positives_) * static_cast<long double>(negatives_)));

    for (double target : far_targets) {
      TarAtFar t;
      t.far_target = target;
      t.unreachable = target * N < 1.0 - 1e-9;
      // Allowed false accepts; the epsilon absorbs representation error in target * N.
      const auto allowed = static_cast<std::size_t>(std::floor(target * N + 1e-9));
      std::size_t best_pos = 0, best_neg = 0;
      for (std::size_t j = 0; j < values_.size(); ++j) {
        if (neg_at[j] > allowed) break;
        best_pos = pos_at[j];
        best_neg = neg_at[j];
      }
      t.tar = best_pos / P;
      t.achieved_far = best_neg / N;
      r.tar_at_far.push_back(t);
    }
    return r;
  }

 private:
  std::vector<double> values_;
  std::vector<std::size_t> pos_counts_;
  std::vector<std::size_t> less_;   // negatives in (v_{j-1}, v_j); last entry: above max
  std::vector<std::size_t> equal_;  // negatives == v_j
  std::size_t positives_ = 0;
  std::size_t negatives_ = 0;
};

inline VerificationResult verification_metrics(std::span<const double> positives, ScoreSource& negatives,
                                               std::span<const double> far_targets) {
  VerificationAccumulator acc(positives);
  acc.add_negatives(negatives);
  return acc.finalize(far_targets);
}

struct ScoreSet {
  std::vector<double> positive_scores;
  std::vector<double> negative_scores;
};

inline VerificationResult verification_metrics(const ScoreSet& scores, std::span<const double> far_targets) {
  SpanScoreSource source(scores.negative_scores);
  return verification_metrics(scores.positive_scores, source, far_targets);
}

// ---------------------------------------------------------------------------
// Image similarity

/// 10 log10(1 / MSE) over every pixel and channel; +inf for identical images.
inline double psnr(const Image& a, const Image& b) {
  require_same_extent(a, b, "psnr");
  double sse = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    sse += d * d;
  }
  const double mse = sse / static_cast<double>(a.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

struct SsimParams {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;
};

inline std::vector<double> luminance(const Image& image) {
  std::vector<double> y(image.pixel_count());
  for (int r = 0; r < image.height(); ++r)
    for (int c = 0; c < image.width(); ++c)
      y[static_cast<std::size_t>(r) * image.width() + c] =
          0.299 * image.at(r, c, 0) + 0.587 * image.at(r, c, 1) + 0.114 * image.at(r, c, 2);
  return y;
}

inline std::vector<double> gaussian_window_1d(int size, double sigma) {
  std::vector<double> w(size);
  const double r = (size - 1) / 2.0;
  double total = 0.0;
  for (int i = 0; i < size; ++i) total += w[i] = std::exp(-0.5 * (i - r) * (i - r) / (sigma * sigma));
  for (double& v : w) v /= total;
  return w;
}

/// Mean SSIM over all fully contained Gaussian windows of the luminance.
inline double ssim(const Image& a, const Image& b, const SsimParams& params = {}) {
  require_same_extent(a, b, "ssim");
  const int h = a.height(), w = a.width(), n = params.window;
  if (std::min(h, w) < n) throw Error(ErrorCode::TooSmall, "image smaller than the SSIM window");
  const auto la = luminance(a), lb = luminance(b);
  const auto win = gaussian_window_1d(n, params.sigma);
  const int oh = h - n + 1, ow = w - n + 1;

  // Separable valid-mode filtering of x, y, x^2, y^2, xy.
  auto filter = [&](auto&& value) {
    std::vector<double> rows(static_cast<std::size_t>(h) * ow);
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < ow; ++c) {
        double acc = 0.0;
        for (int k = 0; k < n; ++k) acc += win[k] * value(static_cast<std::size_t>(r) * w + c + k);
        rows[static_cast<std::size_t>(r) * ow + c] = acc;
      }
    std::vector<double> out(static_cast<std::size_t>(oh) * ow);
    for (int r = 0; r < oh; ++r)
      for (int c = 0; c < ow; ++c) {
        double acc = 0.0;
        for (int k = 0; k < n; ++k) acc += win[k] * rows[static_cast<std::size_t>(r + k) * ow + c];
        out[static_cast<std::size_t>(r) * ow + c] = acc;
      }
    return out;
  };
  const auto mu_a = filter([&](std::size_t i) { return la[i]; });
  const auto mu_b = filter([&](std::size_t i) { return lb[i]; });
  const auto e_aa = filter([&](std::size_t i) { return la[i] * la[i]; });
  const auto e_bb = filter([&](std::size_t i) { return lb[i] * lb[i]; });
  const auto e_ab = filter([&](std::size_t i) { return la[i] * lb[i]; });

  const double c1 = (params.k1 * params.dynamic_range) * (params.k1 * params.dynamic_range);
  const double c2 = (params.k2 * params.dynamic_range) * (params.k2 * params.dynamic_range);
  double total = 0.0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double ma = mu_a[i], mb = mu_b[i];
    const double va = e_aa[i] - ma * ma, vb = e_bb[i] - mb * mb, cov = e_ab[i] - ma * mb;
    total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
  }
  return total / static_cast<double>(mu_a.size());
}

// ---------------------------------------------------------------------------
// Mask detection and template selection

inline double mask_detection_rate(std::span<const Image> images, const DifferentiableModel& detector) {
  if (images.empty()) throw Error(ErrorCode::EmptySet, "no images");
  std::size_t masked = 0;
  for (const auto& img : images) masked += detect_mask(detector, img).masked() ? 1 : 0;
  return static_cast<double>(masked) / static_cast<double>(images.size());
}

using DistanceFn = std::function<double(std::span<const double>, std::span<const double>)>;

/// Index of the embedding nearest to `original` (lowest index on ties).
inline std::size_t select_template(std::span<const double> original,
                                   const std::vector<std::vector<double>>& templates,
                                   const DistanceFn& distance = euclidean_distance) {
  if (templates.empty()) throw Error(ErrorCode::EmptyTemplates, "no templates");
  std::size_t best = 0;
  double best_d = distance(original, templates[0]);
  for (std::size_t i = 1; i < templates.size(); ++i) {
    const double d = distance(original, templates[i]);
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

inline std::size_t select_template(const Image& original, std::span<const Image> templates,
                                   const DifferentiableModel& fr) {
  if (templates.empty()) throw Error(ErrorCode::EmptyTemplates, "no templates");
  std::vector<std::vector<double>> embs;
  for (const auto& t : templates) embs.push_back(embed(fr, t).values);
  return select_template(embed(fr, original).values, embs);
}

// ---------------------------------------------------------------------------
// Reports

struct MetricReport {
  std::optional<CmcCurve> cmc;
  std::optional<VerificationResult> verification;
  std::optional<double> mask_detection_rate;
  std::optional<double> psnr_db;  // mean over images
  std::optional<double> ssim;     // mean over images
  std::size_t image_count = 0;
};

namespace detail {
inline nlohmann::json number_or_inf(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return nullptr;
  return v;
}
}  // namespace detail

inline nlohmann::json to_json(const MetricReport& r) {
  nlohmann::json j = nlohmann::json::object();
  j["image_count"] = r.image_count;
  if (r.cmc) {
    nlohmann::json cmc = nlohmann::json::object();
    for (std::size_t k = 0; k < r.cmc->rates.size(); ++k) cmc[std::to_string(k + 1)] = r.cmc->rates[k];
    j["cmc"] = cmc;
    j["rank1"] = r.cmc->rank(1);
  }
  if (r.verification) {
    nlohmann::json tars = nlohmann::json::array();
    for (const auto& t : r.verification->tar_at_far)
      tars.push_back({{"far", t.far_target}, {"tar", t.tar}, {"achieved_far", t.achieved_far},
                      {"far_unreachable", t.unreachable}});
    j["tar_at_far"] = tars;
    j["auc"] = r.verification->auc;
    j["positive_pairs"] = r.verification->positives;
    j["negative_pairs"] = r.verification->negatives;
  }
  if (r.mask_detection_rate) j["mask_detection_rate"] = *r.mask_detection_rate;
  if (r.psnr_db) j["psnr_db"] = detail::number_or_inf(*r.psnr_db);
  if (r.ssim) j["ssim"] = *r.ssim;
  return j;
}

inline void write_cmc_csv(std::ostream& out, const CmcCurve& cmc) {
  out << "rank,rate\n";
  char buf[64];
  for (std::size_t k = 0; k < cmc.rates.size(); ++k) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g\n", k + 1, cmc.rates[k]);
    out << buf;
  }
}

inline void write_roc_csv(std::ostream& out, const std::vector<RocPoint>& roc) {
  out << "fpr,tpr\n";
  char buf[80];
  for (const auto& p : roc) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", p.fpr, p.tpr);
    out << buf;
  }
}

}  // namespace fmask
