#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "fmask/geometry.hpp"
#include "../support/fixtures.hpp"
#include "../support/golden.hpp"
#include "../support/oracles.hpp"

using namespace fmask;

namespace {

struct CaptureWarnings {
  std::vector<std::string> messages;
  WarningSink previous;
  CaptureWarnings() {
    previous = set_warning_sink([this](std::string_view m) { messages.emplace_back(m); });
  }
  ~CaptureWarnings() { set_warning_sink(std::move(previous)); }
};

std::vector<Point2> random_points(std::mt19937_64& rng, int n, double extent) {
  std::vector<Point2> pts;
  for (int i = 0; i < n; ++i) pts.push_back({fx::uniform(rng, 0, extent), fx::uniform(rng, 0, extent)});
  return pts;
}

double mesh_area(const std::vector<Point2>& pts, const TriangleMesh& mesh) {
  double a = 0.0;
  for (const auto& t : mesh.triangles) a += std::abs(oracle::signed_area(pts[t[0]], pts[t[1]], pts[t[2]]));
  return a;
}

Image gradient_image(int h, int w) {
  Image img(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      img.at(y, x, 0) = static_cast<double>(x) / w;
      img.at(y, x, 1) = static_cast<double>(y) / h;
      img.at(y, x, 2) = 0.5 + 0.4 * std::sin(0.3 * x + 0.2 * y);
    }
  return img;
}

LandmarkSet as_set(std::vector<Point2> pts, std::string scheme = "test") {
  LandmarkSet s;
  s.points = std::move(pts);
  s.scheme_id = std::move(scheme);
  return s;
}

LandmarkScheme quad_scheme() {
  LandmarkScheme s;
  s.id = "test";
  s.point_count = 4;
  s.contour = {0, 1, 2};
  s.nose = 3;
  return s;
}

}  // namespace

// --- triangulation ----------------------------------------------------------

TEST(Delaunay, UnitSquareGivesTwoTrianglesCoveringIt) {
  const std::vector<Point2> pts{{0, 0}, {1, 0}, {0, 1}, {1, 1}};
  const auto mesh = delaunay_triangulate(pts);
  ASSERT_EQ(mesh.triangles.size(), 2u);
  EXPECT_NEAR(mesh_area(pts, mesh), 1.0, 1e-12);
}

TEST(Delaunay, ThreePointsGiveOneTriangle) {
  const auto mesh = delaunay_triangulate(std::vector<Point2>{{0, 0}, {4, 1}, {1, 3}});
  ASSERT_EQ(mesh.triangles.size(), 1u);
  EXPECT_EQ(mesh.triangles[0][0], 0u);
}

TEST(Delaunay, SeededRandomSetsHaveEmptyCircumcircles) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const auto pts = random_points(rng, 50, 100.0);
    const auto mesh = delaunay_triangulate(pts);
    EXPECT_EQ(oracle::circumcircle_violations(pts, mesh), 0u) << "trial " << trial;
    // Triangulation of n points in general position: 2n - 2 - hull triangles.
    EXPECT_GE(mesh.triangles.size(), 50u);
  }
}

TEST(Delaunay, CoversTheConvexHullWithoutOverlap) {
  // Points on a 5x5 lattice: hull area 16, lots of cocircular ties.
  std::vector<Point2> pts;
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 5; ++x) pts.push_back({double(x), double(y)});
  const auto mesh = delaunay_triangulate(pts);
  EXPECT_EQ(mesh.triangles.size(), 32u);
  EXPECT_NEAR(mesh_area(pts, mesh), 16.0, 1e-9);
  EXPECT_EQ(oracle::circumcircle_violations(pts, mesh), 0u);
}

TEST(Delaunay, InCircleDeterminantSign) {
  const Point2 a{0, 0}, b{2, 0}, c{0, 2};
  EXPECT_GT(in_circle_determinant(a, b, c, {0.5, 0.5}), 0.0);
  EXPECT_LT(in_circle_determinant(a, b, c, {5, 5}), 0.0);
  EXPECT_NEAR(in_circle_determinant(a, b, c, {2, 2}), 0.0, 1e-12);
  // Orientation of the triangle does not matter.
  EXPECT_GT(in_circle_determinant(a, c, b, {0.5, 0.5}), 0.0);
}

TEST(Delaunay, FixtureLandmarksTriangulate) {
  const auto f = fx::face("probes", fx::probe_name(0));
  const auto mesh = delaunay_triangulate(f.landmarks);
  EXPECT_EQ(oracle::circumcircle_violations(f.landmarks.points, mesh), 0u);
  EXPECT_GT(mesh.triangles.size(), 100u);
}

TEST(Delaunay, DeterministicAndIndexSorted) {
  std::mt19937_64 rng(11);
  const auto pts = random_points(rng, 30, 10.0);
  const auto a = delaunay_triangulate(pts), b = delaunay_triangulate(pts);
  EXPECT_EQ(a.triangles, b.triangles);
  for (const auto& t : a.triangles) EXPECT_LT(t[0], std::min(t[1], t[2]));
}

TEST(Delaunay, RejectsDegenerateInput) {
  EXPECT_FMASK_ERROR(delaunay_triangulate(std::vector<Point2>{{0, 0}, {1, 1}}), ErrorCode::DegenerateInput);
  EXPECT_FMASK_ERROR(delaunay_triangulate(std::vector<Point2>{{0, 0}, {1, 1}, {2, 2}, {3, 3}}),
                     ErrorCode::DegenerateInput);
  EXPECT_FMASK_ERROR(delaunay_triangulate(std::vector<Point2>{{1, 1}, {1, 1}, {1, 1}}), ErrorCode::DegenerateInput);
  EXPECT_FMASK_ERROR(delaunay_triangulate(std::vector<Point2>{{0, 0}, {1, 0}, {NAN, 1}}), ErrorCode::DegenerateInput);
}

TEST(Delaunay, DuplicatePointsAreTolerated) {
  const std::vector<Point2> pts{{0, 0}, {4, 0}, {0, 4}, {4, 4}, {4, 4}, {2, 1}};
  const auto mesh = delaunay_triangulate(pts);
  EXPECT_NEAR(mesh_area(pts, mesh), 16.0, 1e-9);
}

// --- affine -----------------------------------------------------------------

TEST(Affine, IdenticalTrianglesGiveIdentity) {
  const std::array<Point2, 3> t{{{1, 2}, {5, 3}, {2, 7}}};
  const auto a = fit_affine(t, t);
  const std::array<double, 6> id{1, 0, 0, 0, 1, 0};
  for (int i = 0; i < 6; ++i) EXPECT_NEAR(a.m[i], id[i], 1e-12);
}

TEST(Affine, PureScaling) {
  const std::array<Point2, 3> src{{{0, 0}, {1, 0}, {0, 1}}};
  const std::array<Point2, 3> dst{{{0, 0}, {2, 0}, {0, 2}}};
  const auto a = fit_affine(src, dst);
  EXPECT_NEAR(a.m[0], 2.0, 1e-12);
  EXPECT_NEAR(a.m[4], 2.0, 1e-12);
  EXPECT_NEAR(a.m[1], 0.0, 1e-12);
  EXPECT_NEAR(a.m[2], 0.0, 1e-12);
  EXPECT_NEAR(a.m[3], 0.0, 1e-12);
  EXPECT_NEAR(a.m[5], 0.0, 1e-12);
}

TEST(Affine, MatchesFullLinearSolve) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::array<Point2, 3> src, dst;
    for (auto& p : src) p = {fx::uniform(rng, 0, 112), fx::uniform(rng, 0, 112)};
    for (auto& p : dst) p = {fx::uniform(rng, 0, 112), fx::uniform(rng, 0, 112)};
    if (std::abs(oracle::signed_area(src[0], src[1], src[2])) < 1.0) continue;
    if (std::abs(oracle::signed_area(dst[0], dst[1], dst[2])) < 1.0) continue;
    const auto a = fit_affine(src, dst);
    const auto ref = oracle::affine_6x6(src, dst);
    for (int i = 0; i < 6; ++i) EXPECT_NEAR(a.m[i], ref[i], 1e-7 * (1.0 + std::abs(ref[i])));
    for (int v = 0; v < 3; ++v) {
      const Point2 q = a.apply(src[v]);
      EXPECT_NEAR(q.x, dst[v].x, 1e-9);
      EXPECT_NEAR(q.y, dst[v].y, 1e-9);
    }
  }
}

TEST(Affine, DegenerateTriangleRejected) {
  const std::array<Point2, 3> ok{{{0, 0}, {1, 0}, {0, 1}}};
  const std::array<Point2, 3> flat{{{0, 0}, {1, 1}, {2, 2}}};
  EXPECT_FMASK_ERROR(fit_affine(flat, ok), ErrorCode::DegenerateTriangle);
  EXPECT_FMASK_ERROR(fit_affine(ok, flat), ErrorCode::DegenerateTriangle);
}

// --- warping ----------------------------------------------------------------

TEST(Warp, BilinearSamplesPixelCentersExactly) {
  const Image img = gradient_image(6, 7);
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 7; ++x)
      for (int c = 0; c < 3; ++c) EXPECT_EQ(sample_bilinear(img, x + 0.5, y + 0.5, c), img.at(y, x, c));
  // Midway between two centers is their mean; outside clamps to the edge.
  EXPECT_NEAR(sample_bilinear(img, 1.0, 0.5, 0), 0.5 * (img.at(0, 0, 0) + img.at(0, 1, 0)), 1e-15);
  EXPECT_EQ(sample_bilinear(img, -3.0, -3.0, 2), img.at(0, 0, 2));
  EXPECT_EQ(sample_bilinear(img, 50.0, 50.0, 1), img.at(5, 6, 1));
}

TEST(Warp, EqualLandmarksReproduceTemplateInsideHull) {
  const auto f = fx::face("templates", fx::template_name(0));
  const auto mesh = delaunay_triangulate(f.landmarks);
  const Image out = warp_mesh(f.image, f.landmarks, f.landmarks, mesh, f.image.height(), f.image.width());
  double worst = 0.0;
  for (int y = 0; y < out.height(); ++y)
    for (int x = 0; x < out.width(); ++x) {
      if (!oracle::center_inside_mesh(f.landmarks, mesh, x, y, 1e-6)) continue;
      for (int c = 0; c < 3; ++c) worst = std::max(worst, std::abs(out.at(y, x, c) - f.image.at(y, x, c)));
    }
  EXPECT_LE(worst, 1e-6);
}

TEST(Warp, TranslatedLandmarksShiftTheTemplate) {
  const Image tmpl = gradient_image(40, 40);
  std::mt19937_64 rng(5);
  auto pts = random_points(rng, 12, 28.0);
  for (auto& p : pts) p = {p.x + 3.0, p.y + 3.0};
  const LandmarkSet src = as_set(pts);
  LandmarkSet dst = src;
  for (auto& p : dst.points) p = {p.x + 5.0, p.y + 5.0};
  const auto mesh = delaunay_triangulate(dst);
  const Image out = warp_mesh(tmpl, src, dst, mesh, 40, 40);
  const Image expected = oracle::shift(tmpl, 5, 5);
  std::size_t checked = 0;
  for (int y = 0; y < 40; ++y)
    for (int x = 0; x < 40; ++x) {
      if (!oracle::center_inside_mesh(dst, mesh, x, y, 1e-6)) continue;
      ++checked;
      for (int c = 0; c < 3; ++c) EXPECT_NEAR(out.at(y, x, c), expected.at(y, x, c), 1e-9);
    }
  EXPECT_GT(checked, 100u);
}

TEST(Warp, SingleTriangleConstantColor) {
  Image tmpl(20, 20);
  for (int y = 0; y < 20; ++y)
    for (int x = 0; x < 20; ++x) {
      tmpl.at(y, x, 0) = 0.2;
      tmpl.at(y, x, 1) = 0.4;
      tmpl.at(y, x, 2) = 0.6;
    }
  const LandmarkSet src = as_set({{1, 1}, {18, 2}, {4, 17}});
  const LandmarkSet dst = as_set({{2, 3}, {17, 5}, {6, 18}});
  const TriangleMesh mesh{{{0, 1, 2}}};
  const Image out = warp_mesh(tmpl, src, dst, mesh, 20, 20);
  for (int y = 0; y < 20; ++y)
    for (int x = 0; x < 20; ++x) {
      const bool inside = oracle::center_inside_mesh(dst, mesh, x, y, 1e-9);
      const bool outside = !oracle::center_inside_mesh(dst, mesh, x, y, -1e-9);
      if (inside) {
        EXPECT_NEAR(out.at(y, x, 0), 0.2, 1e-12);
        EXPECT_NEAR(out.at(y, x, 2), 0.6, 1e-12);
      } else if (outside) {
        EXPECT_EQ(out.at(y, x, 1), 0.0);
      }
    }
}

TEST(Warp, MismatchedLandmarkCounts) {
  const Image img(10, 10, 0.5);
  const LandmarkSet a = as_set({{1, 1}, {8, 1}, {1, 8}});
  const LandmarkSet b = as_set({{1, 1}, {8, 1}, {1, 8}, {8, 8}});
  EXPECT_FMASK_ERROR(warp_mesh(img, a, b, TriangleMesh{{{0, 1, 2}}}, 10, 10), ErrorCode::MeshMismatch);
  EXPECT_FMASK_ERROR(warp_mesh(img, a, a, TriangleMesh{{{0, 1, 5}}}, 10, 10), ErrorCode::MeshMismatch);
}

TEST(Warp, DegenerateTriangleSkippedWithWarning) {
  CaptureWarnings cap;
  const Image img(10, 10, 0.5);
  const LandmarkSet src = as_set({{1, 1}, {8, 1}, {1, 8}, {8, 8}});
  LandmarkSet dst = src;
  dst.points[3] = {4.5, 4.5};  // on the hypotenuse: triangle (1, 2, 3) collapses
  const TriangleMesh mesh{{{0, 1, 2}, {1, 2, 3}}};
  const Image out = warp_mesh(img, src, dst, mesh, 10, 10);
  ASSERT_EQ(cap.messages.size(), 1u);
  EXPECT_NE(cap.messages[0].find("degenerate"), std::string::npos);
  EXPECT_EQ(out.at(2, 2, 0), 0.5);
}

// --- lower-face region --------------------------------------------------------

TEST(Region, AxisAlignedRectangleFillsExactly) {
  const LandmarkSet lms = as_set({{2, 2}, {10, 2}, {10, 8}, {2, 8}});
  const auto region = lower_face_region(lms, 12, 12, quad_scheme());
  EXPECT_EQ(region_pixel_count(region), 48u);
  for (int y = 0; y < 12; ++y)
    for (int x = 0; x < 12; ++x) EXPECT_EQ(region.at(y, x), (x >= 2 && x < 10 && y >= 2 && y < 8) ? 1.0 : 0.0);
}

TEST(Region, TriangleCountWithinPerimeterOfArea) {
  std::mt19937_64 rng(17);
  LandmarkScheme s;
  s.id = "test";
  s.contour = {0, 1};
  s.nose = 2;
  for (int trial = 0; trial < 30; ++trial) {
    const auto pts = random_points(rng, 3, 60.0);
    const double area = std::abs(oracle::signed_area(pts[0], pts[1], pts[2]));
    const double perim = std::hypot(pts[1].x - pts[0].x, pts[1].y - pts[0].y) +
                         std::hypot(pts[2].x - pts[1].x, pts[2].y - pts[1].y) +
                         std::hypot(pts[0].x - pts[2].x, pts[0].y - pts[2].y);
    const auto region = lower_face_region(as_set(pts), 64, 64, s);
    EXPECT_NEAR(static_cast<double>(region_pixel_count(region)), area, perim);
    EXPECT_NEAR(polygon_area(lower_face_polygon(as_set(pts), s)), area, 1e-9);
  }
}

TEST(Region, CollinearContourIsEmptyWithWarning) {
  CaptureWarnings cap;
  const auto region = lower_face_region(as_set({{1, 1}, {3, 3}, {5, 5}, {7, 7}}), 10, 10, quad_scheme());
  EXPECT_EQ(region_pixel_count(region), 0u);
  EXPECT_EQ(cap.messages.size(), 1u);
}

TEST(Region, MissingSchemeIndices) {
  const LandmarkSet few = as_set({{1, 1}, {5, 1}, {5, 5}});
  EXPECT_FMASK_ERROR(lower_face_region(few, 10, 10), ErrorCode::SchemeMissingIndices);
  LandmarkScheme empty;
  empty.id = "none";
  EXPECT_FMASK_ERROR(lower_face_region(few, 10, 10, empty), ErrorCode::SchemeMissingIndices);
}

TEST(Region, EvenOddAgreesWithPolygonContains) {
  const auto f = fx::face("probes", fx::probe_name(3));
  const auto poly = lower_face_polygon(f.landmarks, LandmarkScheme::ibug68());
  ASSERT_EQ(poly.size(), 14u);
  const auto region = lower_face_region(f.landmarks, 112, 112);
  for (int y = 0; y < 112; ++y)
    for (int x = 0; x < 112; ++x) EXPECT_EQ(region.at(y, x) > 0, polygon_contains(poly, {x + 0.5, y + 0.5}));
  EXPECT_NEAR(static_cast<double>(region_pixel_count(region)), polygon_area(poly), 0.05 * polygon_area(poly));
}

TEST(Region, FeatherRampsInward) {
  const LandmarkSet lms = as_set({{0, 0}, {20, 0}, {20, 20}, {0, 20}});
  const auto hard = lower_face_region(lms, 20, 20, quad_scheme());
  const auto soft = lower_face_region(lms, 20, 20, quad_scheme(), 4.0);
  EXPECT_EQ(hard.at(0, 0), 1.0);
  EXPECT_NEAR(soft.at(0, 10), 0.5 / 4.0, 1e-12);
  EXPECT_EQ(soft.at(10, 10), 1.0);
}

// --- compositing --------------------------------------------------------------

TEST(Composite, ZeroAndFullRegions) {
  std::mt19937_64 rng(1);
  const Image a = fx::random_image(rng, 9, 11), b = fx::random_image(rng, 9, 11);
  EXPECT_EQ(composite(a, b, RegionMask(9, 11, 0.0)), a);
  EXPECT_EQ(composite(a, b, RegionMask(9, 11, 1.0)), b);
}

TEST(Composite, CheckerboardMatchesDirectLoop) {
  std::mt19937_64 rng(2);
  const Image a = fx::random_image(rng, 8, 8), b = fx::random_image(rng, 8, 8);
  RegionMask r(8, 8);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) r.at(y, x) = (x + y) % 2;
  const Image out = composite(a, b, r);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x)
      for (int c = 0; c < 3; ++c) EXPECT_EQ(out.at(y, x, c), (x + y) % 2 ? b.at(y, x, c) : a.at(y, x, c));
}

TEST(Composite, PartitionOfBlending) {
  std::mt19937_64 rng(4);
  const Image a = fx::random_image(rng, 7, 6), b = fx::random_image(rng, 7, 6);
  RegionMask r(7, 6);
  for (double& w : r.values()) w = fx::uniform(rng);
  const Image ab = composite(a, b, r), ba = composite(b, a, r);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(ab[i] + ba[i], a[i] + b[i], 1e-14);
}

TEST(Composite, DimensionMismatch) {
  EXPECT_FMASK_ERROR(composite(Image(4, 4), Image(4, 5), RegionMask(4, 4)), ErrorCode::DimensionMismatch);
  EXPECT_FMASK_ERROR(composite(Image(4, 4), Image(4, 4), RegionMask(3, 4)), ErrorCode::DimensionMismatch);
}

// --- faced mask ---------------------------------------------------------------

TEST(FacedMask, SelfMaskIsIdentityInsideRegion) {
  const auto f = fx::face("probes", fx::probe_name(1));
  RegionMask region;
  const Image out = delaunay_mask(f.image, f.landmarks, f.image, f.landmarks, LandmarkScheme::ibug68(), &region);
  ASSERT_GT(region_pixel_count(region), 500u);
  EXPECT_LE(max_abs_diff(out, f.image), 1e-6);
}

TEST(FacedMask, RegionEqualsLowerFaceRegion) {
  const auto f = fx::face("probes", fx::probe_name(2));
  const auto t = fx::face("templates", fx::template_name(1));
  const auto faced = build_faced_mask(f.image, f.landmarks, t.image, t.landmarks);
  EXPECT_EQ(faced.region, lower_face_region(f.landmarks, 112, 112));
}

TEST(FacedMask, OnlyRegionPixelsChange) {
  const auto f = fx::face("probes", fx::probe_name(4));
  const auto t = fx::face("templates", fx::template_name(2));
  RegionMask region;
  const Image out = delaunay_mask(f.image, f.landmarks, t.image, t.landmarks, LandmarkScheme::ibug68(), &region);
  std::size_t changed = 0;
  for (int y = 0; y < 112; ++y)
    for (int x = 0; x < 112; ++x)
      for (int c = 0; c < 3; ++c) {
        if (region.at(y, x) == 0.0) EXPECT_EQ(out.at(y, x, c), f.image.at(y, x, c));
        else changed += out.at(y, x, c) != f.image.at(y, x, c);
      }
  EXPECT_GT(changed, 100u);
  EXPECT_TRUE(is_valid_image(out));
}

TEST(FacedMask, DeterministicAndGolden) {
  const auto f = fx::face("probes", fx::probe_name(0));
  const auto t = fx::face("templates", fx::template_name(3));
  const Image a = delaunay_mask(f.image, f.landmarks, t.image, t.landmarks);
  const Image b = delaunay_mask(f.image, f.landmarks, t.image, t.landmarks);
  EXPECT_EQ(a, b);
  golden::expect_string("faced_mask.id00_1.dx03_1", golden::digest(a));
  const auto faced = build_faced_mask(f.image, f.landmarks, t.image, t.landmarks);
  golden::expect_string("faced_mask_region.id00_1", golden::digest(faced.region));
}

TEST(FacedMask, IncompatibleLandmarkSets) {
  const auto f = fx::face("probes", fx::probe_name(0));
  LandmarkSet short_set = f.landmarks;
  short_set.points.pop_back();
  EXPECT_FMASK_ERROR(build_faced_mask(f.image, f.landmarks, f.image, short_set), ErrorCode::MeshMismatch);
  LandmarkSet other_scheme = f.landmarks;
  other_scheme.scheme_id = "dlib5";
  EXPECT_FMASK_ERROR(delaunay_mask(f.image, f.landmarks, f.image, other_scheme), ErrorCode::MeshMismatch);
}
