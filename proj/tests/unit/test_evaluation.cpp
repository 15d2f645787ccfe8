#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "fmask/baselines.hpp"
#include "fmask/evaluation.hpp"
#include "../support/fixtures.hpp"
#include "../support/golden.hpp"
#include "../support/oracles.hpp"

using namespace fmask;

namespace {

class FixedLogits final : public DifferentiableModel {
 public:
  FixedLogits(double not_masked, double masked) : logits_{not_masked, masked} {}
  ModelKind kind() const override { return ModelKind::Detector; }
  int input_height() const override { return 4; }
  int input_width() const override { return 4; }
  std::vector<double> forward(const Image&) const override { return logits_; }
  ModelEvaluation forward_backward(const Image& image, const OutputGradientFn&) const override {
    return {logits_, GradientImage(image.height(), image.width(), 0.0)};
  }

 private:
  std::vector<double> logits_;
};

std::vector<double> random_vec(std::mt19937_64& rng, int n) {
  std::vector<double> v(n);
  for (double& x : v) x = fx::uniform(rng, -1, 1);
  return v;
}

std::vector<double> random_scores(std::mt19937_64& rng, int n, double lo, double hi, int levels) {
  // Quantized so that ties between and within lists actually occur.
  std::vector<double> v(n);
  std::uniform_int_distribution<int> q(0, levels);
  for (double& x : v) x = lo + (hi - lo) * q(rng) / levels;
  return v;
}

const std::vector<double> kFars{1e-3, 1e-2, 1e-1};

}  // namespace

// --- CMC --------------------------------------------------------------------------

TEST(Cmc, ProbeDuplicatedInGalleryIsRankOne) {
  std::mt19937_64 rng(1);
  std::vector<std::vector<double>> gallery;
  for (int i = 0; i < 10; ++i) gallery.push_back(random_vec(rng, 8));
  std::vector<int> labels(10);
  std::iota(labels.begin(), labels.end(), 0);
  const auto c = cmc_curve(gallery, gallery, labels, labels, 5);
  for (double r : c.rates) EXPECT_EQ(r, 1.0);
}

TEST(Cmc, ThirdNearestMateCountsFromRankThree) {
  const std::vector<std::vector<double>> gallery{{1.0, 0.0}, {2.0, 0.0}, {3.0, 0.0}, {4.0, 0.0}};
  const std::vector<std::string> glabels{"a", "b", "me", "c"};
  const auto c = cmc_curve<std::string>({{0.0, 0.0}}, gallery, glabels, {"me"}, 4);
  EXPECT_EQ(c.rates, (std::vector<double>{0.0, 0.0, 1.0, 1.0}));
  EXPECT_EQ(c.rank(1), 0.0);
  EXPECT_EQ(c.rank(99), 1.0);
  EXPECT_EQ(c.rank(0), 0.0);
}

TEST(Cmc, TiesBrokenByGalleryIndex) {
  // Mate and impostor at the same distance: the lower index is ranked first.
  const std::vector<std::vector<double>> gallery{{1.0, 0.0}, {0.0, 1.0}};
  EXPECT_EQ(mate_rank<int>(std::vector<double>{0.0, 0.0}, gallery, {7, 3}, 3), 2u);
  EXPECT_EQ(mate_rank<int>(std::vector<double>{0.0, 0.0}, gallery, {3, 7}, 3), 1u);
}

TEST(Cmc, MatchesSortingOracle) {
  std::mt19937_64 rng(2);
  std::vector<std::vector<double>> gallery, probes;
  std::vector<int> glabels, plabels;
  for (int i = 0; i < 100; ++i) {
    gallery.push_back(random_vec(rng, 6));
    glabels.push_back(i % 40);
  }
  for (int i = 0; i < 20; ++i) {
    probes.push_back(random_vec(rng, 6));
    plabels.push_back(static_cast<int>(rng() % 40));
  }
  const auto c = cmc_curve(probes, gallery, glabels, plabels, 100);
  EXPECT_EQ(c.rates, oracle::cmc(probes, gallery, glabels, plabels, 100));
  for (std::size_t k = 1; k < c.rates.size(); ++k) EXPECT_GE(c.rates[k], c.rates[k - 1]);
  EXPECT_EQ(c.rates.back(), 1.0);
}

TEST(Cmc, Errors) {
  const std::vector<std::vector<double>> g{{0.0}};
  EXPECT_FMASK_ERROR(cmc_curve<int>({{0.0}}, g, {1}, {2}, 1), ErrorCode::NoMateInGallery);
  EXPECT_FMASK_ERROR(cmc_curve<int>({}, g, {1}, {}, 1), ErrorCode::EmptySet);
  EXPECT_FMASK_ERROR(cmc_curve<int>({{0.0}}, g, {1}, {1}, 0), ErrorCode::InvalidArgument);
  EXPECT_FMASK_ERROR(cmc_curve<int>({{0.0}}, g, {1, 2}, {1}, 1), ErrorCode::InvalidArgument);
}

// --- verification -----------------------------------------------------------------

TEST(Verification, PerfectSeparation) {
  const auto r = verification_metrics(ScoreSet{{0.1, 0.2, 0.3}, {0.5, 0.6}}, kFars);
  EXPECT_EQ(r.auc, 1.0);
  EXPECT_EQ(r.positives, 3u);
  EXPECT_EQ(r.negatives, 2u);
  for (const auto& t : r.tar_at_far) {
    EXPECT_EQ(t.tar, 1.0);
    EXPECT_EQ(t.achieved_far, 0.0);
  }
}

TEST(Verification, IdenticalListsGiveHalf) {
  std::mt19937_64 rng(3);
  const auto s = random_scores(rng, 200, 0.0, 2.0, 30);
  EXPECT_EQ(verification_metrics(ScoreSet{s, s}, kFars).auc, 0.5);
  EXPECT_EQ(verification_metrics(ScoreSet{{0.4}, {0.4}}, kFars).auc, 0.5);
}

TEST(Verification, AucEqualsMannWhitney) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    const auto pos = random_scores(rng, 1000, 0.0, 1.5, 200);
    const auto neg = random_scores(rng, 1000, 0.5, 2.0, 200);
    const auto r = verification_metrics(ScoreSet{pos, neg}, kFars);
    EXPECT_NEAR(r.auc, oracle::mann_whitney_auc(pos, neg), 1e-12);

    // Trapezoid area under the emitted ROC polyline is the same number.
    double area = 0.0;
    for (std::size_t i = 1; i < r.roc.size(); ++i) {
      EXPECT_GE(r.roc[i].fpr, r.roc[i - 1].fpr);
      EXPECT_GE(r.roc[i].tpr, r.roc[i - 1].tpr);
      area += (r.roc[i].fpr - r.roc[i - 1].fpr) * (r.roc[i].tpr + r.roc[i - 1].tpr) / 2;
    }
    EXPECT_NEAR(area, r.auc, 1e-12);
    EXPECT_EQ(r.roc.front().fpr, 0.0);
    EXPECT_EQ(r.roc.back().fpr, 1.0);
    EXPECT_EQ(r.roc.back().tpr, 1.0);
  }
}

TEST(Verification, TarAtFarByThresholdScan) {
  std::mt19937_64 rng(5);
  const auto pos = random_scores(rng, 300, 0.0, 1.5, 100);
  const auto neg = random_scores(rng, 500, 0.5, 2.0, 100);
  const auto r = verification_metrics(ScoreSet{pos, neg}, kFars);
  for (const auto& t : r.tar_at_far) {
    // Largest TAR over thresholds t with FAR(t) <= target.
    double best = 0.0;
    for (double th : pos) {
      double fa = 0, ta = 0;
      for (double n : neg) fa += n <= th;
      for (double p : pos) ta += p <= th;
      if (fa / neg.size() <= t.far_target + 1e-12) best = std::max(best, ta / pos.size());
    }
    EXPECT_EQ(t.tar, best) << t.far_target;
    EXPECT_LE(t.achieved_far, t.far_target + 1e-12);
    EXPECT_EQ(t.unreachable, t.far_target * 500 < 1.0);
  }
}

TEST(Verification, UnreachableFarIsFlagged) {
  const auto r = verification_metrics(ScoreSet{{0.1, 0.9}, {0.2, 0.3, 0.4}}, std::vector<double>{0.01, 0.5});
  EXPECT_TRUE(r.tar_at_far[0].unreachable);
  EXPECT_EQ(r.tar_at_far[0].tar, 0.5);  // threshold 0.1 still has zero false accepts
  EXPECT_FALSE(r.tar_at_far[1].unreachable);
}

TEST(Verification, StreamedAndMergedMatchBatch) {
  std::mt19937_64 rng(6);
  const auto pos = random_scores(rng, 100, 0.0, 1.0, 50);
  const auto neg = random_scores(rng, 400, 0.2, 1.2, 50);
  const auto batch = verification_metrics(ScoreSet{pos, neg}, kFars);
  VerificationAccumulator a(pos), b(pos);
  for (std::size_t i = 0; i < neg.size(); ++i) (i % 3 == 0 ? a : b).add_negative(neg[i]);
  a.merge(b);
  const auto merged = a.finalize(kFars);
  EXPECT_EQ(merged.auc, batch.auc);
  EXPECT_EQ(merged.roc.size(), batch.roc.size());
  for (std::size_t i = 0; i < kFars.size(); ++i) EXPECT_EQ(merged.tar_at_far[i].tar, batch.tar_at_far[i].tar);
  VerificationAccumulator other(std::vector<double>{0.5});
  EXPECT_FMASK_ERROR(a.merge(other), ErrorCode::InvalidArgument);
}

TEST(Verification, Errors) {
  EXPECT_FMASK_ERROR(verification_metrics(ScoreSet{{}, {1.0}}, kFars), ErrorCode::EmptyScores);
  EXPECT_FMASK_ERROR(verification_metrics(ScoreSet{{1.0}, {}}, kFars), ErrorCode::EmptyScores);
  EXPECT_FMASK_ERROR(verification_metrics(ScoreSet{{1.0}, {2.0}}, std::vector<double>{0.0}),
                     ErrorCode::InvalidArgument);
  EXPECT_FMASK_ERROR(verification_metrics(ScoreSet{{NAN}, {2.0}}, kFars), ErrorCode::InvalidArgument);
}

// --- image similarity -------------------------------------------------------------

TEST(Psnr, KnownValues) {
  std::mt19937_64 rng(7);
  const Image a = fx::random_image(rng, 12, 10, 0.0, 0.9);
  EXPECT_TRUE(std::isinf(psnr(a, a)));
  Image b = a;
  for (double& v : b.values()) v += 0.1;
  EXPECT_NEAR(psnr(a, b), 20.0, 1e-12);
  const Image c = fx::random_image(rng, 12, 10);
  EXPECT_EQ(psnr(a, c), psnr(c, a));
  EXPECT_FMASK_ERROR(psnr(a, Image(12, 11)), ErrorCode::DimensionMismatch);
}

TEST(Psnr, DecreasesWithNoise) {
  std::mt19937_64 rng(8);
  const Image a = fx::random_image(rng, 16, 16);
  std::normal_distribution<double> n(0.0, 1.0);
  Image noise(16, 16);
  for (double& v : noise.values()) v = n(rng);
  double last = std::numeric_limits<double>::infinity();
  for (double s : {0.001, 0.01, 0.05, 0.2}) {
    Image b = a;
    for (std::size_t i = 0; i < b.size(); ++i) b[i] += s * noise[i];
    const double p = psnr(a, b);
    EXPECT_LT(p, last);
    last = p;
  }
}

TEST(Ssim, MatchesNaiveWindowOracle) {
  std::mt19937_64 rng(9);
  const Image a = fx::random_image(rng, 24, 20);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
  Image inv = a;
  for (double& v : inv.values()) v = 1.0 - v;
  EXPECT_NEAR(ssim(a, inv), oracle::ssim(a, inv), 1e-10);
  const Image b = fx::random_image(rng, 24, 20);
  EXPECT_NEAR(ssim(a, b), oracle::ssim(a, b), 1e-10);
  EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-15);
  EXPECT_LT(ssim(a, inv), 0.0);

  const auto f = fx::face("probes", fx::probe_name(3)).image;
  Image g = f;
  for (double& v : g.values()) v = std::clamp(v + 0.05, 0.0, 1.0);
  EXPECT_NEAR(ssim(f, g), oracle::ssim(f, g), 1e-10);
  EXPECT_GT(ssim(f, g), 0.9);
}

TEST(Ssim, Errors) {
  EXPECT_FMASK_ERROR(ssim(Image(10, 40), Image(10, 40)), ErrorCode::TooSmall);
  EXPECT_FMASK_ERROR(ssim(Image(20, 20), Image(20, 21)), ErrorCode::DimensionMismatch);
}

// --- mask detection rate ----------------------------------------------------------

TEST(MaskDetectionRate, ConstantDetectors) {
  const std::vector<Image> imgs(5, Image(4, 4, 0.5));
  EXPECT_EQ(mask_detection_rate(imgs, FixedLogits(0.0, 1.0)), 1.0);
  EXPECT_EQ(mask_detection_rate(imgs, FixedLogits(1.0, 0.0)), 0.0);
  // Exactly 0.5 is not "masked".
  EXPECT_EQ(mask_detection_rate(imgs, FixedLogits(0.3, 0.3)), 0.0);
  EXPECT_FMASK_ERROR(mask_detection_rate({}, FixedLogits(0, 1)), ErrorCode::EmptySet);
}

TEST(MaskDetectionRate, FixtureGolden) {
  std::vector<Image> clean, solid;
  for (int i = 0; i < 20; ++i) {
    const auto f = fx::face("probes", fx::probe_name(i));
    clean.push_back(f.image);
    solid.push_back(solid_color_mask(f.image, f.landmarks).image);
  }
  const double rc = mask_detection_rate(clean, fx::detector());
  const double rs = mask_detection_rate(solid, fx::detector());
  EXPECT_LT(rc, rs);
  EXPECT_EQ(rs, 1.0);
  golden::expect_values("mask_rate.probes", {rc, rs}, 0.0);
}

// --- template selection -----------------------------------------------------------

TEST(SelectTemplate, NearestWithLowestIndexOnTies) {
  const std::vector<std::vector<double>> t{{3.0, 0.0}, {1.0, 0.0}, {0.0, 1.0}, {1.0, 0.0}};
  EXPECT_EQ(select_template(std::vector<double>{0.0, 0.0}, t), 1u);
  EXPECT_EQ(select_template(std::vector<double>{3.0, 0.0}, t), 0u);
  EXPECT_FMASK_ERROR(select_template(std::vector<double>{0.0}, {}), ErrorCode::EmptyTemplates);
}

TEST(SelectTemplate, MatchesLinearScanAndIsMonotoneInvariant) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<std::vector<double>> t;
    for (int i = 0; i < 30; ++i) t.push_back(random_vec(rng, 5));
    const auto q = random_vec(rng, 5);
    std::size_t best = 0;
    for (std::size_t i = 1; i < t.size(); ++i)
      if (oracle::l2(q, t[i]) < oracle::l2(q, t[best])) best = i;
    EXPECT_EQ(select_template(q, t), best);
    const DistanceFn squared = [](std::span<const double> a, std::span<const double> b) {
      const double d = euclidean_distance(a, b);
      return d * d;
    };
    EXPECT_EQ(select_template(q, t, squared), best);
  }
}

TEST(SelectTemplate, OwnImageSelectsItself) {
  std::vector<Image> templates;
  for (int i = 0; i < 6; ++i) templates.push_back(fx::face("templates", fx::template_name(i)).image);
  for (int i = 0; i < 6; ++i) EXPECT_EQ(select_template(templates[i], templates, fx::embedder()), std::size_t(i));
}

// --- reports ----------------------------------------------------------------------

TEST(MetricReport, JsonAndCsv) {
  MetricReport r;
  r.image_count = 3;
  r.cmc = CmcCurve{{0.5, 1.0}};
  r.verification = verification_metrics(ScoreSet{{0.1}, {0.2, 0.05}}, std::vector<double>{0.5, 0.1});
  r.mask_detection_rate = 0.25;
  r.psnr_db = std::numeric_limits<double>::infinity();
  r.ssim = 0.75;
  const auto j = to_json(r);
  EXPECT_EQ(j["image_count"], 3);
  EXPECT_EQ(j["rank1"], 0.5);
  EXPECT_EQ(j["cmc"]["2"], 1.0);
  EXPECT_EQ(j["auc"], 0.5);
  EXPECT_EQ(j["psnr_db"], "inf");
  EXPECT_EQ(j["tar_at_far"][0]["tar"], 1.0);
  EXPECT_EQ(j["tar_at_far"][1]["far_unreachable"], true);
  EXPECT_EQ(j["negative_pairs"], 2);
  EXPECT_FALSE(to_json(MetricReport{}).contains("auc"));

  std::ostringstream cmc, roc;
  write_cmc_csv(cmc, *r.cmc);
  EXPECT_EQ(cmc.str(), "rank,rate\n1,0.5\n2,1\n");
  write_roc_csv(roc, {{0.0, 0.0}, {0.5, 1.0}});
  EXPECT_EQ(roc.str(), "fpr,tpr\n0,0\n0.5,1\n");
}
