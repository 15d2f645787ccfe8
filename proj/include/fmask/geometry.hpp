#pragma once

// Landmark-driven faced-mask construction: Delaunay meshing, per-triangle
// affine warping, lower-face region rasterization and compositing.
//
// Coordinates are continuous pixel coordinates with the origin at the top-left
// corner of the image; pixel (x, y) covers [x, x+1) x [y, y+1) and its center
// sits at (x + 0.5, y + 0.5).

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fmask/error.hpp"
#include "fmask/image.hpp"

namespace fmask {

struct Point2 {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Point2&, const Point2&) = default;
};

/// Which landmark indices outline the lower face for a given numbering scheme.
struct LandmarkScheme {
  std::string id;
  std::size_t point_count = 0;
  std::vector<std::size_t> contour;  // traversed in order
  std::size_t nose = 0;

  /// 68-point convention: jawline 2..14, nose tip 30.
  static LandmarkScheme ibug68() {
    LandmarkScheme s;
    s.id = "ibug68";
    s.point_count = 68;
    for (std::size_t i = 2; i <= 14; ++i) s.contour.push_back(i);
    s.nose = 30;
    return s;
  }
};

struct LandmarkSet {
  std::vector<Point2> points;
  std::string scheme_id = "ibug68";

  std::size_t size() const noexcept { return points.size(); }
  const Point2& operator[](std::size_t i) const { return points[i]; }
};

using Triangle = std::array<std::size_t, 3>;

struct TriangleMesh {
  std::vector<Triangle> triangles;
};

/// 2x3 affine map: [x', y'] = [[a, b, c], [d, e, f]] * [x, y, 1].
struct AffineTransform {
  std::array<double, 6> m{1.0, 0.0, 0.0, 0.0, 1.0, 0.0};

  Point2 apply(Point2 p) const noexcept {
    return {m[0] * p.x + m[1] * p.y + m[2], m[3] * p.x + m[4] * p.y + m[5]};
  }
};

inline constexpr double kDegenerateArea = 1e-8;

namespace detail {

inline double orient(const Point2& a, const Point2& b, const Point2& c) {
  return (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
}

/// Positive when d lies strictly inside the circumcircle of the
/// counter-clockwise (orient > 0) triangle a, b, c.
inline double in_circle(const Point2& a, const Point2& b, const Point2& c, const Point2& d) {
  const long double adx = a.x - d.x, ady = a.y - d.y;
  const long double bdx = b.x - d.x, bdy = b.y - d.y;
  const long double cdx = c.x - d.x, cdy = c.y - d.y;
  const long double ad = adx * adx + ady * ady;
  const long double bd = bdx * bdx + bdy * bdy;
  const long double cd = cdx * cdx + cdy * cdy;
  return static_cast<double>(adx * (bdy * cd - bd * cdy) - ady * (bdx * cd - bd * cdx) +
                             ad * (bdx * cdy - bdy * cdx));
}

inline double triangle_area(const Point2& a, const Point2& b, const Point2& c) {
  return 0.5 * std::abs(orient(a, b, c));
}

}  // namespace detail

/// Signed in-circle determinant, exposed for validation.
inline double in_circle_determinant(const Point2& a, const Point2& b, const Point2& c,
                                    const Point2& d) {
  return detail::orient(a, b, c) > 0 ? detail::in_circle(a, b, c, d)
                                     : detail::in_circle(a, c, b, d);
}

/// Delaunay triangulation by lexicographic sweep insertion followed by Lawson
/// edge flips. Triangles are returned counter-clockwise (in x-right/y-up
/// orientation terms) with the smallest index first, sorted.
inline TriangleMesh delaunay_triangulate(const std::vector<Point2>& points) {
  const std::size_t n = points.size();
  if (n < 3) throw Error(ErrorCode::DegenerateInput, "need at least 3 points");

  double min_x = points[0].x, max_x = min_x, min_y = points[0].y, max_y = min_y;
  for (const auto& p : points) {
    if (!std::isfinite(p.x) || !std::isfinite(p.y))
      throw Error(ErrorCode::DegenerateInput, "non-finite landmark coordinate");
    min_x = std::min(min_x, p.x);
    max_x = std::max(max_x, p.x);
    min_y = std::min(min_y, p.y);
    max_y = std::max(max_y, p.y);
  }
  const double scale = std::max(max_x - min_x, max_y - min_y);
  if (scale <= 0.0) throw Error(ErrorCode::DegenerateInput, "all points coincide");
  const double orient_eps = 1e-12 * scale * scale;
  const double circle_eps = 1e-12 * scale * scale * scale * scale;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (points[a].x != points[b].x) return points[a].x < points[b].x;
    if (points[a].y != points[b].y) return points[a].y < points[b].y;
    return a < b;
  });
  std::vector<std::size_t> unique_order;
  for (std::size_t idx : order) {
    if (!unique_order.empty() && points[unique_order.back()] == points[idx]) {
      warn("delaunay: duplicate point " + std::to_string(idx) + " ignored");
      continue;
    }
    unique_order.push_back(idx);
  }

  auto orient = [&](std::size_t a, std::size_t b, std::size_t c) {
    return detail::orient(points[a], points[b], points[c]);
  };

  // Leading collinear run, then the first point off that line.
  std::size_t first_off = 2;
  while (first_off < unique_order.size() &&
         std::abs(orient(unique_order[0], unique_order[1], unique_order[first_off])) <=
             orient_eps) {
    ++first_off;
  }
  if (first_off >= unique_order.size())
    throw Error(ErrorCode::DegenerateInput, "all points are collinear");

  std::vector<Triangle> tris;
  std::vector<std::size_t> hull;  // counter-clockwise
  {
    const std::size_t apex = unique_order[first_off];
    const bool apex_left = orient(unique_order[0], unique_order[1], apex) > 0;
    for (std::size_t i = 0; i + 1 < first_off; ++i) {
      std::size_t a = unique_order[i], b = unique_order[i + 1];
      if (apex_left)
        tris.push_back({a, b, apex});
      else
        tris.push_back({b, a, apex});
    }
    if (apex_left) {
      for (std::size_t i = 0; i < first_off; ++i) hull.push_back(unique_order[i]);
      hull.push_back(apex);
    } else {
      hull.push_back(apex);
      for (std::size_t i = first_off; i-- > 0;) hull.push_back(unique_order[i]);
      std::rotate(hull.begin(), hull.begin() + 1, hull.end());
    }
  }

  for (std::size_t k = first_off + 1; k < unique_order.size(); ++k) {
    const std::size_t p = unique_order[k];
    const std::size_t h = hull.size();
    std::vector<bool> visible(h);
    bool any = false;
    for (std::size_t i = 0; i < h; ++i) {
      visible[i] = orient(hull[i], hull[(i + 1) % h], p) < -orient_eps;
      any = any || visible[i];
    }
    if (!any) {
      warn("delaunay: point " + std::to_string(p) + " could not be inserted");
      continue;
    }
    // Visible edges are contiguous; find the first one after a hidden edge.
    std::size_t start = 0;
    while (!(visible[start] && !visible[(start + h - 1) % h])) start = (start + 1) % h;
    std::size_t count = 0;
    while (visible[(start + count) % h]) {
      const std::size_t i = (start + count) % h;
      tris.push_back({hull[(i + 1) % h], hull[i], p});
      ++count;
    }
    // Vertices strictly inside the visible chain leave the hull.
    std::vector<std::size_t> next;
    next.reserve(h + 1);
    const std::size_t first_kept = (start + count) % h;
    for (std::size_t j = 0; j + count <= h; ++j) {
      next.push_back(hull[(first_kept + j) % h]);
    }
    next.push_back(p);
    hull = std::move(next);
  }

  // Lawson flips until every interior edge is locally Delaunay.
  for (int pass = 0; pass < 10000; ++pass) {
    std::map<std::pair<std::size_t, std::size_t>, std::pair<std::size_t, int>> edge_owner;
    for (std::size_t t = 0; t < tris.size(); ++t) {
      for (int e = 0; e < 3; ++e) edge_owner[{tris[t][e], tris[t][(e + 1) % 3]}] = {t, e};
    }
    bool flipped = false;
    std::vector<bool> touched(tris.size(), false);
    for (std::size_t t = 0; t < tris.size(); ++t) {
      if (touched[t]) continue;
      for (int e = 0; e < 3 && !touched[t]; ++e) {
        const std::size_t a = tris[t][e], b = tris[t][(e + 1) % 3], c = tris[t][(e + 2) % 3];
        auto it = edge_owner.find({b, a});
        if (it == edge_owner.end()) continue;
        const std::size_t u = it->second.first;
        if (touched[u]) continue;
        const std::size_t d = tris[u][(it->second.second + 2) % 3];
        if (detail::in_circle(points[a], points[b], points[c], points[d]) <= circle_eps) continue;
        // Flip only if the quadrilateral a, d, b, c is convex.
        if (orient(a, d, c) <= orient_eps || orient(d, b, c) <= orient_eps) continue;
        tris[t] = {a, d, c};
        tris[u] = {d, b, c};
        touched[t] = touched[u] = true;
        flipped = true;
      }
    }
    if (!flipped) break;
  }

  TriangleMesh mesh;
  for (auto tri : tris) {
    std::rotate(tri.begin(), std::min_element(tri.begin(), tri.end()), tri.end());
    mesh.triangles.push_back(tri);
  }
  std::sort(mesh.triangles.begin(), mesh.triangles.end());
  return mesh;
}

inline TriangleMesh delaunay_triangulate(const LandmarkSet& landmarks) {
  return delaunay_triangulate(landmarks.points);
}

/// Exact affine map taking src[i] to dst[i] for i = 0, 1, 2.
inline AffineTransform fit_affine(const std::array<Point2, 3>& src,
                                  const std::array<Point2, 3>& dst) {
  const double src_area = detail::triangle_area(src[0], src[1], src[2]);
  const double dst_area = detail::triangle_area(dst[0], dst[1], dst[2]);
  if (src_area < kDegenerateArea || dst_area < kDegenerateArea) {
    throw Error(ErrorCode::DegenerateTriangle, "triangle area below " +
                                                   std::to_string(kDegenerateArea));
  }
  // Translate to src[0] so the 2x2 system is well conditioned.
  const double ux = src[1].x - src[0].x, uy = src[1].y - src[0].y;
  const double vx = src[2].x - src[0].x, vy = src[2].y - src[0].y;
  const double det = ux * vy - uy * vx;
  const double i00 = vy / det, i01 = -vx / det, i10 = -uy / det, i11 = ux / det;

  const double px = dst[1].x - dst[0].x, qx = dst[2].x - dst[0].x;
  const double py = dst[1].y - dst[0].y, qy = dst[2].y - dst[0].y;
  // Linear part L solves L * [u v] = [p q].
  const double a = px * i00 + qx * i10;
  const double b = px * i01 + qx * i11;
  const double d = py * i00 + qy * i10;
  const double e = py * i01 + qy * i11;
  AffineTransform t;
  t.m = {a, b, dst[0].x - a * src[0].x - b * src[0].y,
         d, e, dst[0].y - d * src[0].x - e * src[0].y};
  return t;
}

/// Bilinear sample at a continuous position; out-of-range reads clamp to the
/// nearest edge pixel.
inline double sample_bilinear(const Image& image, double x, double y, int c) {
  const double gx = x - 0.5, gy = y - 0.5;
  const double fx0 = std::floor(gx), fy0 = std::floor(gy);
  const double fx = gx - fx0, fy = gy - fy0;
  auto clamp_x = [&](double v) { return static_cast<int>(std::clamp(v, 0.0, image.width() - 1.0)); };
  auto clamp_y = [&](double v) { return static_cast<int>(std::clamp(v, 0.0, image.height() - 1.0)); };
  const int x0 = clamp_x(fx0), x1 = clamp_x(fx0 + 1.0);
  const int y0 = clamp_y(fy0), y1 = clamp_y(fy0 + 1.0);
  const double top = image.at(y0, x0, c) + fx * (image.at(y0, x1, c) - image.at(y0, x0, c));
  const double bottom = image.at(y1, x0, c) + fx * (image.at(y1, x1, c) - image.at(y1, x0, c));
  return top + fy * (bottom - top);
}

/// Piecewise-affine warp of `source` onto an image of the given size: every
/// triangle of `mesh` is taken from its position in `source_landmarks` to its
/// position in `target_landmarks`. Pixels outside all triangles are 0.
inline Image warp_mesh(const Image& source, const LandmarkSet& source_landmarks,
                       const LandmarkSet& target_landmarks, const TriangleMesh& mesh,
                       int height, int width) {
  if (source.empty()) throw Error(ErrorCode::InvalidArgument, "warp_mesh: empty source image");
  if (source_landmarks.size() != target_landmarks.size()) {
    throw Error(ErrorCode::MeshMismatch,
                "landmark counts differ: " + std::to_string(source_landmarks.size()) + " vs " +
                    std::to_string(target_landmarks.size()));
  }
  Image out(height, width, 0.0);
  for (const auto& tri : mesh.triangles) {
    for (std::size_t idx : tri) {
      if (idx >= source_landmarks.size())
        throw Error(ErrorCode::MeshMismatch, "mesh index " + std::to_string(idx) + " out of range");
    }
    const std::array<Point2, 3> dst{target_landmarks[tri[0]], target_landmarks[tri[1]],
                                    target_landmarks[tri[2]]};
    const std::array<Point2, 3> src{source_landmarks[tri[0]], source_landmarks[tri[1]],
                                    source_landmarks[tri[2]]};
    AffineTransform inverse;
    try {
      inverse = fit_affine(dst, src);
    } catch (const Error& err) {
      if (err.code() != ErrorCode::DegenerateTriangle) throw;
      warn("warp_mesh: skipping degenerate triangle (" + std::to_string(tri[0]) + ", " +
           std::to_string(tri[1]) + ", " + std::to_string(tri[2]) + ")");
      continue;
    }
    const double area2 = detail::orient(dst[0], dst[1], dst[2]);
    const double sign = area2 > 0 ? 1.0 : -1.0;
    const double tol = 1e-9 * std::abs(area2);
    const int x_lo = std::max(0, static_cast<int>(std::floor(std::min({dst[0].x, dst[1].x, dst[2].x}) - 0.5)));
    const int x_hi = std::min(width - 1, static_cast<int>(std::ceil(std::max({dst[0].x, dst[1].x, dst[2].x}))));
    const int y_lo = std::max(0, static_cast<int>(std::floor(std::min({dst[0].y, dst[1].y, dst[2].y}) - 0.5)));
    const int y_hi = std::min(height - 1, static_cast<int>(std::ceil(std::max({dst[0].y, dst[1].y, dst[2].y}))));
    for (int y = y_lo; y <= y_hi; ++y) {
      for (int x = x_lo; x <= x_hi; ++x) {
        const Point2 p{x + 0.5, y + 0.5};
        const double w0 = sign * detail::orient(dst[1], dst[2], p);
        const double w1 = sign * detail::orient(dst[2], dst[0], p);
        const double w2 = sign * detail::orient(dst[0], dst[1], p);
        if (w0 < -tol || w1 < -tol || w2 < -tol) continue;
        const Point2 s = inverse.apply(p);
        for (int c = 0; c < 3; ++c) out.at(y, x, c) = sample_bilinear(source, s.x, s.y, c);
      }
    }
  }
  return out;
}

/// Even-odd containment of a point in a closed polygon.
inline bool polygon_contains(const std::vector<Point2>& poly, Point2 p) {
  bool inside = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const Point2& a = poly[i];
    const Point2& b = poly[j];
    if ((a.y > p.y) != (b.y > p.y)) {
      const double x_cross = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
      if (p.x < x_cross) inside = !inside;
    }
  }
  return inside;
}

inline double polygon_area(const std::vector<Point2>& poly) {
  double twice = 0.0;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    twice += poly[j].x * poly[i].y - poly[i].x * poly[j].y;
  }
  return 0.5 * std::abs(twice);
}

namespace detail {
inline double distance_to_segment(Point2 p, Point2 a, Point2 b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(p.x - (a.x + t * dx), p.y - (a.y + t * dy));
}
}  // namespace detail

/// Polygon through the scheme's lower-face contour points followed by the
/// nose point.
inline std::vector<Point2> lower_face_polygon(const LandmarkSet& landmarks,
                                              const LandmarkScheme& scheme) {
  std::vector<Point2> poly;
  auto fetch = [&](std::size_t idx) {
    if (idx >= landmarks.size()) {
      throw Error(ErrorCode::SchemeMissingIndices,
                  "scheme '" + scheme.id + "' needs landmark " + std::to_string(idx) +
                      " but the set has " + std::to_string(landmarks.size()));
    }
    poly.push_back(landmarks[idx]);
  };
  if (scheme.contour.empty())
    throw Error(ErrorCode::SchemeMissingIndices, "scheme '" + scheme.id + "' has no contour");
  for (std::size_t idx : scheme.contour) fetch(idx);
  fetch(scheme.nose);
  return poly;
}

/// Rasterized lower-face region (pixel centers, even-odd fill). A positive
/// `feather_radius` ramps weights linearly from 0 at the boundary to 1 at that
/// distance inside.
inline RegionMask lower_face_region(const LandmarkSet& landmarks, int height, int width,
                                    const LandmarkScheme& scheme = LandmarkScheme::ibug68(),
                                    double feather_radius = 0.0) {
  const auto poly = lower_face_polygon(landmarks, scheme);
  RegionMask mask(height, width, 0.0);
  if (polygon_area(poly) <= 0.0) {
    warn("lower_face_region: zero-area polygon, region is empty");
    return mask;
  }
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const Point2 p{x + 0.5, y + 0.5};
      if (!polygon_contains(poly, p)) continue;
      double w = 1.0;
      if (feather_radius > 0.0) {
        double d = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++)
          d = std::min(d, detail::distance_to_segment(p, poly[j], poly[i]));
        w = std::min(1.0, d / feather_radius);
      }
      mask.at(y, x) = w;
    }
  }
  return mask;
}

/// out = region * overlay + (1 - region) * base, per channel.
inline Image composite(const Image& base, const Image& overlay, const RegionMask& region) {
  require_same_extent(base, overlay, "composite overlay");
  require_same_extent(base, region, "composite region");
  Image out = base;
  for (int y = 0; y < base.height(); ++y) {
    for (int x = 0; x < base.width(); ++x) {
      const double w = region.at(y, x);
      if (w == 0.0) continue;
      for (int c = 0; c < 3; ++c) {
        out.at(y, x, c) = w == 1.0 ? overlay.at(y, x, c)
                                   : w * overlay.at(y, x, c) + (1.0 - w) * base.at(y, x, c);
      }
    }
  }
  return out;
}

struct FacedMask {
  Image mask_image;  // full-face warp of the template onto the original geometry
  RegionMask region;
};

inline void require_compatible(const LandmarkSet& a, const LandmarkSet& b) {
  if (a.size() != b.size() || a.scheme_id != b.scheme_id) {
    throw Error(ErrorCode::MeshMismatch, "landmark sets differ: " + std::to_string(a.size()) +
                                             " '" + a.scheme_id + "' vs " +
                                             std::to_string(b.size()) + " '" + b.scheme_id + "'");
  }
}

/// Warps the template face onto the original's landmark geometry (connectivity
/// from the original's triangulation) and extracts the lower-face region.
inline FacedMask build_faced_mask(const Image& original, const LandmarkSet& original_landmarks,
                                  const Image& templ, const LandmarkSet& template_landmarks,
                                  const LandmarkScheme& scheme = LandmarkScheme::ibug68()) {
  require_compatible(original_landmarks, template_landmarks);
  const TriangleMesh mesh = delaunay_triangulate(original_landmarks);
  FacedMask out;
  out.mask_image = warp_mesh(templ, template_landmarks, original_landmarks, mesh,
                             original.height(), original.width());
  out.region = lower_face_region(original_landmarks, original.height(), original.width(), scheme);
  return out;
}

/// Original image wearing the faced mask built from the template.
inline Image delaunay_mask(const Image& original, const LandmarkSet& original_landmarks,
                           const Image& templ, const LandmarkSet& template_landmarks,
                           const LandmarkScheme& scheme = LandmarkScheme::ibug68(),
                           RegionMask* region_out = nullptr) {
  auto faced = build_faced_mask(original, original_landmarks, templ, template_landmarks, scheme);
  Image out = composite(original, faced.mask_image, faced.region);
  if (region_out) *region_out = std::move(faced.region);
  return out;
}

}  // namespace fmask
