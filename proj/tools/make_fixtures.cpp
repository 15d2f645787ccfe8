// Generates the synthetic fixture dataset: cartoon faces with 68-point
// landmarks, split into probes/gallery/templates, plus the two toy models.
// Output is a pure function of the seed; the checked-in tests/fixtures tree
// was produced with the defaults.
//
//   make_fixtures [--output DIR] [--seed N] [--identities N] [--distractors N]

#include <CLI11.hpp>
#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "fmask/baselines.hpp"
#include "fmask/geometry.hpp"
#include "fmask/image.hpp"
#include "fmask/io.hpp"
#include "fmask/models.hpp"

namespace fs = std::filesystem;
using namespace fmask;

namespace {

constexpr int kSize = 112;
constexpr double kPi = std::numbers::pi;

struct Rng {
  std::mt19937_64 engine;
  explicit Rng(std::uint64_t seed) : engine(seed) {}
  double uniform(double lo, double hi) { return lo + (hi - lo) * fmask::detail::uniform01(engine); }
  double normal() {
    // Box-Muller over the portable uniform; std::normal_distribution is not
    // reproducible across standard libraries.
    const double u1 = std::max(fmask::detail::uniform01(engine), 1e-300);
    const double u2 = fmask::detail::uniform01(engine);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }
};

struct FaceParams {
  Rgb skin, hair, iris, lips, brow;
  double half_width, half_height;
  double eye_dx, eye_y, eye_r;
  double mouth_w, mouth_y, lip_h;
  double nose_len;
  double hair_line;
  Rgb beard;
  double beard_strength;  // blend of beard colour over the chin area
};

FaceParams random_identity(Rng& r) {
  FaceParams p;
  const double tone = r.uniform(0.35, 0.95);
  p.skin = {tone, tone * r.uniform(0.68, 0.85), tone * r.uniform(0.50, 0.70)};
  const double h = r.uniform(0.05, 0.7);
  p.hair = {h, h * r.uniform(0.55, 0.9), h * r.uniform(0.3, 0.7)};
  p.iris = {r.uniform(0.1, 0.5), r.uniform(0.2, 0.6), r.uniform(0.1, 0.5)};
  p.lips = {r.uniform(0.45, 0.95), r.uniform(0.1, 0.45), r.uniform(0.1, 0.45)};
  const double b = r.uniform(0.05, 0.35);
  p.brow = {b, b * 0.8, b * 0.6};
  p.half_width = r.uniform(29.0, 37.0);
  p.half_height = r.uniform(38.0, 45.0);
  p.eye_dx = r.uniform(11.0, 15.0);
  p.eye_y = r.uniform(-12.0, -7.0);
  p.eye_r = r.uniform(3.5, 5.0);
  p.mouth_w = r.uniform(9.0, 14.0);
  p.mouth_y = r.uniform(18.0, 23.0);
  p.lip_h = r.uniform(2.5, 4.5);
  p.nose_len = r.uniform(13.0, 17.0);
  p.hair_line = r.uniform(0.55, 0.8);
  const double bd = r.uniform(0.05, 0.7);
  p.beard = {bd, bd * r.uniform(0.5, 0.95), bd * r.uniform(0.3, 0.8)};
  p.beard_strength = r.uniform(0.0, 0.9);
  return p;
}

struct Pose {
  double cx, cy, scale, brightness;
  Rgb background;
};

// ibug-68 layout generated from the face parameters.
LandmarkSet face_landmarks(const FaceParams& p, const Pose& pose) {
  std::vector<Point2> pts(68);
  const double s = pose.scale;
  auto at = [&](double dx, double dy) { return Point2{pose.cx + s * dx, pose.cy + s * dy}; };
  for (int k = 0; k < 17; ++k) {
    const double phi = kPi - k * kPi / 16.0;
    pts[k] = at(p.half_width * std::cos(phi), p.half_height * std::sin(phi));
  }
  const double brow_y = p.eye_y - 8.0;
  for (int k = 0; k < 5; ++k) {
    const double t = k / 4.0;
    pts[17 + k] = at(-p.eye_dx - 7.0 + 12.0 * t, brow_y - 2.5 * std::sin(kPi * t));
    pts[22 + k] = at(p.eye_dx - 5.0 + 12.0 * t, brow_y - 2.5 * std::sin(kPi * t));
  }
  for (int k = 0; k < 4; ++k) pts[27 + k] = at(0.0, p.eye_y + k * (p.nose_len - p.eye_y) / 3.0 * 0.75 + 2.0);
  pts[30] = at(0.0, p.eye_y + p.nose_len);
  for (int k = 0; k < 5; ++k) pts[31 + k] = at(-5.0 + 2.5 * k, p.eye_y + p.nose_len + 2.5 - (k == 2 ? 0.8 : 0.0));
  for (int side = 0; side < 2; ++side) {
    const double ex = side == 0 ? -p.eye_dx : p.eye_dx;
    const int base = side == 0 ? 36 : 42;
    const double angles[6] = {kPi, 2.0 * kPi / 3.0, kPi / 3.0, 0.0, -kPi / 3.0, -2.0 * kPi / 3.0};
    for (int k = 0; k < 6; ++k)
      pts[base + k] = at(ex + 1.6 * p.eye_r * std::cos(angles[k]), p.eye_y - 0.8 * p.eye_r * std::sin(angles[k]));
  }
  for (int k = 0; k < 12; ++k) {
    const double phi = kPi - k * 2.0 * kPi / 12.0;
    pts[48 + k] = at(p.mouth_w * std::cos(phi), p.mouth_y - p.lip_h * std::sin(phi));
  }
  for (int k = 0; k < 8; ++k) {
    const double phi = kPi - k * 2.0 * kPi / 8.0;
    pts[60 + k] = at(0.7 * p.mouth_w * std::cos(phi), p.mouth_y - 0.3 * p.lip_h * std::sin(phi));
  }
  return {pts, "ibug68"};
}

Image render_face(const FaceParams& p, const Pose& pose, Rng& noise) {
  constexpr int ss = 3;  // supersampling per axis
  Image out(kSize, kSize);
  const double s = pose.scale;
  auto in_ellipse = [](double x, double y, double cx, double cy, double a, double b) {
    const double dx = (x - cx) / a, dy = (y - cy) / b;
    return dx * dx + dy * dy <= 1.0;
  };
  const auto lms = face_landmarks(p, pose);
  std::vector<Point2> mouth(lms.points.begin() + 48, lms.points.begin() + 60);
  for (int y = 0; y < kSize; ++y)
    for (int x = 0; x < kSize; ++x) {
      double acc[3] = {0, 0, 0};
      for (int sy = 0; sy < ss; ++sy)
        for (int sx = 0; sx < ss; ++sx) {
          const double px = x + (sx + 0.5) / ss, py = y + (sy + 0.5) / ss;
          const double fx = (px - pose.cx) / s, fy = (py - pose.cy) / s;
          Rgb c = pose.background;
          if (in_ellipse(fx, fy, 0.0, -6.0, p.half_width + 5.0, p.half_height + 2.0) && fy < 5.0) c = p.hair;
          if (in_ellipse(fx, fy, 0.0, 0.0, p.half_width, p.half_height) &&
              fy > -p.half_height * p.hair_line) {
            const double shade = 1.0 - 0.12 * std::abs(fx) / p.half_width;
            c = {p.skin.r * shade, p.skin.g * shade, p.skin.b * shade};
            if (fy > p.mouth_y - 7.0) {
              const double a = p.beard_strength;
              c = {(1 - a) * c.r + a * p.beard.r, (1 - a) * c.g + a * p.beard.g, (1 - a) * c.b + a * p.beard.b};
            }
            // Brows.
            const double brow_y = p.eye_y - 8.0 - 2.5 * std::sin(kPi * std::clamp((std::abs(fx) - p.eye_dx + 7.0) / 12.0, 0.0, 1.0));
            if (std::abs(std::abs(fx) - p.eye_dx + 1.0) < 6.0 && std::abs(fy - brow_y) < 1.3) c = p.brow;
            // Eyes.
            for (double ex : {-p.eye_dx, p.eye_dx}) {
              if (in_ellipse(fx, fy, ex, p.eye_y, 1.6 * p.eye_r, 0.8 * p.eye_r)) {
                c = {0.93, 0.93, 0.9};
                if (in_ellipse(fx, fy, ex, p.eye_y, 0.75 * p.eye_r, 0.75 * p.eye_r)) c = p.iris;
                if (in_ellipse(fx, fy, ex, p.eye_y, 0.3 * p.eye_r, 0.3 * p.eye_r)) c = {0.05, 0.05, 0.05};
              }
            }
            // Nose shadow.
            if (std::abs(fx - 1.5) < 1.0 && fy > p.eye_y + 2.0 && fy < p.eye_y + p.nose_len)
              c = {c.r * 0.8, c.g * 0.8, c.b * 0.8};
            if (in_ellipse(fx, fy, 0.0, p.eye_y + p.nose_len + 1.5, 5.0, 1.8)) c = {c.r * 0.75, c.g * 0.72, c.b * 0.72};
            if (polygon_contains(mouth, Point2{px, py})) c = p.lips;
            if (std::abs(fy - p.mouth_y) < 0.5 && std::abs(fx) < 0.7 * p.mouth_w) c = {p.lips.r * 0.4, p.lips.g * 0.3, p.lips.b * 0.3};
          }
          acc[0] += c.r;
          acc[1] += c.g;
          acc[2] += c.b;
        }
      for (int c = 0; c < 3; ++c)
        out.at(y, x, c) = std::clamp(acc[c] / (ss * ss) * pose.brightness + 0.01 * noise.normal(), 0.0, 1.0);
    }
  return out;
}

Pose random_pose(Rng& r) {
  Pose p{56.0 + r.uniform(-1.5, 1.5), 56.0 + r.uniform(-1.5, 1.5), r.uniform(0.97, 1.03), r.uniform(0.97, 1.03), {}};
  // Near-neutral studio grey, drawn per shot.
  const double bg = r.uniform(0.45, 0.75);
  p.background = {bg + r.uniform(-0.02, 0.02), bg + r.uniform(-0.02, 0.02), bg + r.uniform(-0.02, 0.02)};
  return p;
}

// Toy models -----------------------------------------------------------------

Tensor tensor(std::vector<std::size_t> shape, std::vector<double> data) { return {std::move(shape), std::move(data)}; }

/// First-layer filter: a colour weighting spread over the 3x3 window, or a
/// luminance Sobel when `sobel` is set.
void fill_color_filter(std::vector<double>& w, int out, Rgb coeff, int sobel = 0) {
  constexpr int kIn = 3, k = 3;
  const double lum[3] = {0.299, 0.587, 0.114};
  const double sx[9] = {-1, 0, 1, -2, 0, 2, -1, 0, 1};
  const double sy[9] = {-1, -2, -1, 0, 0, 0, 1, 2, 1};
  const double color[3] = {coeff.r, coeff.g, coeff.b};
  for (int i = 0; i < kIn; ++i)
    for (int t = 0; t < k * k; ++t) {
      double v = color[i] / 9.0;
      if (sobel == 1) v = lum[i] * sx[t] / 4.0;
      if (sobel == 2) v = lum[i] * sy[t] / 4.0;
      w[(static_cast<std::size_t>(out) * kIn + i) * k * k + t] = v;
    }
}

ToyModelSpec make_embedder(Rng& r) {
  constexpr int c1 = 8, c2 = 12, emb = 8;
  ToyModelSpec spec;
  spec.kind = ModelKind::Embedder;
  // Rectified tone detectors (redness, warmth, lip red, brightness, darkness, eye
  // white, yellowness) and luminance edges. Each colour channel sits below
  // threshold for cool, desaturated cloth colours.
  std::vector<double> w1(c1 * 3 * 9), b1 = {-0.05, -0.10, -0.25, 0.45, -2.40, 0.0, 0.0, -0.05};
  fill_color_filter(w1, 0, {1.0, -1.0, 0.0});
  fill_color_filter(w1, 1, {1.0, 0.0, -1.0});
  fill_color_filter(w1, 2, {1.0, -1.0, 0.0});
  fill_color_filter(w1, 3, {-0.299, -0.587, -0.114});
  fill_color_filter(w1, 4, {1.0, 1.0, 1.0});
  fill_color_filter(w1, 5, {}, 1);
  fill_color_filter(w1, 6, {}, 2);
  fill_color_filter(w1, 7, {0.0, 1.0, -1.0});
  // conv2: centre-tap pass-through of the first-layer maps plus random mixtures.
  std::vector<double> w2(c2 * c1 * 9, 0.0), b2(c2, 0.0);
  for (int o = 0; o < c2; ++o) {
    if (o < c1) {
      w2[(static_cast<std::size_t>(o) * c1 + o) * 9 + 4] = 1.0;
      continue;
    }
    for (int t = 0; t < c1 * 9; ++t) w2[static_cast<std::size_t>(o) * c1 * 9 + t] = 0.35 * r.normal();
    b2[o] = 0.05 * r.normal();
  }
  // Placeholder identity head; fit_embedder_head() replaces it.
  std::vector<double> w3(c2 * c2, 0.0), b3(c2, 0.0);
  for (int i = 0; i < c2; ++i) w3[i * c2 + i] = 1.0;
  spec.layers = {layers::Conv2d{"conv1.w", "conv1.b", 3, c1, 3, 2, 1}, layers::LeakyRelu{0.1},
                 layers::Conv2d{"conv2.w", "conv2.b", c1, c2, 3, 2, 1}, layers::LeakyRelu{0.1},
                 layers::GlobalAvgPool{},
                 layers::Dense{"fc.w", "fc.b", c2, c2}};
  spec.weights = {{"conv1.w", tensor({c1, 3, 3, 3}, w1)}, {"conv1.b", tensor({c1}, b1)},
                  {"conv2.w", tensor({c2, c1, 3, 3}, w2)}, {"conv2.b", tensor({c2}, b2)},
                  {"fc.w", tensor({c2, c2}, w3)}, {"fc.b", tensor({c2}, b3)}};
  (void)emb;
  return spec;
}

struct CalibrationFace {
  Image a, b;       // two clean shots
  Image occluded;   // shot b under a random-colour cloth
};

/// Fits the dense head by LDA on pooled trunk features: directions that
/// maximize between-identity over within-identity variance, centered on the
/// calibration mean. Occluded shots enter the within-identity scatter with
/// weight `occlusion_weight`, which buys some robustness to plain cloth.
ToyModelSpec fit_embedder_head(ToyModelSpec spec, const std::vector<CalibrationFace>& faces, int emb,
                               double occlusion_weight) {
  const ToyModel trunk(spec);
  const int f = static_cast<int>(spec.weights.at("fc.b").data.size());
  auto features = [&](const Image& img) {
    const auto v = trunk.forward(img);
    return Eigen::Map<const Eigen::RowVectorXd>(v.data(), f).eval();
  };
  std::vector<Eigen::RowVectorXd> fa, fb, fo;
  Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(f);
  for (const auto& face : faces) {
    fa.push_back(features(face.a));
    fb.push_back(features(face.b));
    fo.push_back(features(face.occluded));
    mean += 0.5 * (fa.back() + fb.back());
  }
  mean /= static_cast<double>(faces.size());
  Eigen::MatrixXd sw = Eigen::MatrixXd::Zero(f, f), sb = Eigen::MatrixXd::Zero(f, f);
  for (std::size_t i = 0; i < faces.size(); ++i) {
    const Eigen::RowVectorXd mid = 0.5 * (fa[i] + fb[i]) - mean;
    const Eigen::RowVectorXd d = fa[i] - fb[i];
    const Eigen::RowVectorXd o = fa[i] - fo[i];
    sw += 0.5 * d.transpose() * d + occlusion_weight * o.transpose() * o;
    sb += mid.transpose() * mid;
  }
  sw += 1e-6 * sw.trace() / f * Eigen::MatrixXd::Identity(f, f);
  Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::MatrixXd> solver(sb, sw);
  // Eigenvalues ascend; keep the last `emb` directions.
  const Eigen::MatrixXd dirs = solver.eigenvectors().rightCols(emb);
  std::vector<double> w(static_cast<std::size_t>(emb) * f), b(emb);
  for (int o = 0; o < emb; ++o) {
    const Eigen::VectorXd d = dirs.col(emb - 1 - o);
    for (int k = 0; k < f; ++k) w[static_cast<std::size_t>(o) * f + k] = d(k);
    b[o] = -mean.dot(d.transpose());
  }
  spec.weights["fc.w"] = tensor({static_cast<std::size_t>(emb), static_cast<std::size_t>(f)}, w);
  spec.weights["fc.b"] = tensor({static_cast<std::size_t>(emb)}, b);
  spec.layers.back() = layers::Dense{"fc.w", "fc.b", f, emb};
  spec.layers.push_back(layers::L2Normalize{});
  return spec;
}

// Mask detector: responds to saturated blue/cyan and to strong luminance
// edges (cloth boundaries, seams).
ToyModelSpec make_detector() {
  constexpr int c1 = 5, c2 = 3;
  ToyModelSpec spec;
  spec.kind = ModelKind::Detector;
  std::vector<double> w1(c1 * 3 * 9), b1 = {-0.08, -0.06, -0.06, -0.06, -0.06};
  fill_color_filter(w1, 0, {-0.5, -0.5, 1.0});
  fill_color_filter(w1, 1, {}, 1);
  fill_color_filter(w1, 2, {}, 2);
  for (int t = 0; t < 27; ++t) {
    w1[3 * 27 + t] = -w1[1 * 27 + t];
    w1[4 * 27 + t] = -w1[2 * 27 + t];
  }
  // conv2: centre tap only. Channel 0 passes blue, 1 sums the edge maps, 2 is
  // a bias unit.
  std::vector<double> w2(c2 * c1 * 9, 0.0), b2 = {0.0, 0.0, 0.0};
  auto center = [&](int o, int i, double v) { w2[(static_cast<std::size_t>(o) * c1 + i) * 9 + 4] = v; };
  center(0, 0, 1.0);
  for (int i = 1; i < 5; ++i) center(1, i, 1.0);
  b2[2] = 1.0;
  std::vector<double> w3 = {0.0, 0.0, 0.0, 60.0, 25.0, -1.6}, b3 = {0.0, 0.0};
  spec.layers = {layers::Conv2d{"conv1.w", "conv1.b", 3, c1, 3, 2, 1}, layers::LeakyRelu{0.1},
                 layers::Conv2d{"conv2.w", "conv2.b", c1, c2, 3, 2, 1}, layers::LeakyRelu{0.1},
                 layers::GlobalAvgPool{},
                 layers::Dense{"fc.w", "fc.b", c2, 2}};
  spec.weights = {{"conv1.w", tensor({c1, 3, 3, 3}, w1)}, {"conv1.b", tensor({c1}, b1)},
                  {"conv2.w", tensor({c2, c1, 3, 3}, w2)}, {"conv2.b", tensor({c2}, b2)},
                  {"fc.w", tensor({2, c2}, w3)}, {"fc.b", tensor({2}, b3)}};
  return spec;
}

void write_sample(const fs::path& dir, const std::string& name, const Image& img, const LandmarkSet& lms) {
  io::write_png(img, dir / (name + ".png"));
  io::write_landmarks(lms, dir / (name + ".landmarks.json"));
}

std::string numbered(const std::string& prefix, int i) {
  return prefix + (i < 10 ? "0" : "") + std::to_string(i);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Generate the synthetic fixture dataset and toy models"};
  fs::path output = "tests/fixtures";
  std::uint64_t seed = 20240611;
  int identities = 20, distractors = 20, templates = 6;
  double occlusion_weight = 0.0;
  app.add_option("--output", output, "output directory");
  app.add_option("--seed", seed, "generator seed");
  app.add_option("--identities", identities, "identities with a probe and a gallery image");
  app.add_option("--distractors", distractors, "gallery-only identities");
  app.add_option("--templates", templates, "template faces");
  app.add_option("--occlusion-weight", occlusion_weight, "weight of occluded shots when fitting the embedder head");
  CLI11_PARSE(app, argc, argv);

  try {
    for (const char* sub : {"models", "probes", "gallery", "templates"}) fs::create_directories(output / sub);
    Rng rng(seed);
    Rng noise(seed ^ 0x5DEECE66DULL);

    {
      // Calibration faces come from their own stream and are not written out.
      Rng calib(seed ^ 0xC0FFEEULL);
      std::vector<CalibrationFace> faces;
      for (int i = 0; i < 160; ++i) {
        const auto face = random_identity(calib);
        const Pose a = random_pose(calib), b = random_pose(calib);
        CalibrationFace cf{render_face(face, a, calib), render_face(face, b, calib), {}};
        const Rgb cloth{calib.uniform(0, 1), calib.uniform(0, 1), calib.uniform(0, 1)};
        cf.occluded = solid_color_mask(cf.b, face_landmarks(face, b), cloth).image;
        faces.push_back(std::move(cf));
      }
      save_toy_model_spec(fit_embedder_head(make_embedder(rng), faces, 8, occlusion_weight), output / "models" / "embedder.json");
    }
    save_toy_model_spec(make_detector(), output / "models" / "detector.json");

    for (int i = 0; i < identities; ++i) {
      const auto face = random_identity(rng);
      const std::string id = numbered("id", i);
      for (int shot = 0; shot < 2; ++shot) {
        const Pose pose = random_pose(rng);
        const auto img = render_face(face, pose, noise);
        write_sample(output / (shot == 0 ? "gallery" : "probes"), id + "_" + std::to_string(shot), img,
                     face_landmarks(face, pose));
      }
    }
    // Template faces belong to enrolled distractors (a different shot), so a
    // faced mask carries another gallery identity's lower face.
    for (int i = 0; i < distractors; ++i) {
      const auto face = random_identity(rng);
      const Pose pose = random_pose(rng);
      write_sample(output / "gallery", numbered("dx", i) + "_0", render_face(face, pose, noise),
                   face_landmarks(face, pose));
      if (i < templates) {
        const Pose shot = random_pose(rng);
        write_sample(output / "templates", numbered("dx", i) + "_1", render_face(face, shot, noise),
                     face_landmarks(face, shot));
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "make_fixtures: " << e.what() << '\n';
    return 1;
  }
  std::cout << "wrote fixtures to " << output << '\n';
  return 0;
}
