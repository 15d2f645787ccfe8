#pragma once

// Experiment orchestration: strict config parsing, dataset ingestion,
// per-probe masking/attacks, metric evaluation and the run manifest.
//
// Output directory layout:
//   manifest.json            config snapshot, entries, digests
//   metrics.json             MetricReport
//   cmc.csv, roc.csv         plot data
//   images/<name>.png|.f32   adversarial / masked output
//   reference/<name>.f32     masked image before any attack
//   reports/<name>.json      per-image AttackReport
//   timings.json             wall-clock data (not covered by digests)

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "fmask/attacks.hpp"
#include "fmask/baselines.hpp"
#include "fmask/error.hpp"
#include "fmask/evaluation.hpp"
#include "fmask/geometry.hpp"
#include "fmask/image.hpp"
#include "fmask/io.hpp"
#include "fmask/models.hpp"

namespace fmask {

inline constexpr const char* kToolVersion = "fmask 0.1.0";

namespace fs = std::filesystem;
using nlohmann::json;

enum class Method { Solid, Dm, AdvNoiseDm, Mf2m, Baseline };

struct ExperimentConfig {
  Method method = Method::Dm;
  BaselineVariant baseline;  // kind used when method == Baseline
  fs::path fr_model;
  fs::path md_model;
  fs::path probes_dir;
  fs::path templates_dir;
  fs::path gallery_dir;  // empty: skip identification/verification
  fs::path output_dir;
  fs::path cache_dir;  // empty: <output>/cache
  NoiseAttackConfig noise;
  FilterAttackConfig filter;
  Rgb solid_color = kMedicalBlue;
  LandmarkScheme scheme = LandmarkScheme::ibug68();
  std::vector<double> far_targets{0.01};
  std::size_t max_rank = 10;
  std::optional<std::uint64_t> seed;
  int workers = 1;

  bool needs_templates() const noexcept {
    return method == Method::Dm || method == Method::AdvNoiseDm || method == Method::Mf2m;
  }
  bool stochastic() const noexcept { return method == Method::Baseline && baseline.diverse_inputs(); }
};

inline std::string method_name(const ExperimentConfig& c) {
  switch (c.method) {
    case Method::Solid: return "solid";
    case Method::Dm: return "dm";
    case Method::AdvNoiseDm: return "advnoise_dm";
    case Method::Mf2m: return "mf2m";
    case Method::Baseline: return "baseline:" + to_string(c.baseline.kind);
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Config parsing

namespace detail {

/// Walks a JSON object, rejecting keys that were not consumed.
class StrictObject {
 public:
  StrictObject(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw Error(ErrorCode::TypeError, where() + ": expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  const json* get(const std::string& key) {
    seen_.push_back(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  template <class T>
  void read(const std::string& key, T& out) {
    const json* v = get(key);
    if (!v) return;
    out = convert<T>(*v, child(key));
  }

  template <class T>
  static T convert(const json& v, const std::string& path) {
    auto type_error = [&](const char* expected) {
      return Error(ErrorCode::TypeError, path + ": expected " + expected + ", got " + v.type_name());
    };
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw type_error("a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw type_error("an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.get<long long>() < 0 && !v.is_number_unsigned()) throw type_error("a non-negative integer");
      }
      return v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw type_error("a number");
      return v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw type_error("a string");
      return v.get<std::string>();
    } else {
      // std::vector<E>
      if (!v.is_array()) throw type_error("an array");
      T out;
      for (std::size_t i = 0; i < v.size(); ++i)
        out.push_back(convert<typename T::value_type>(v[i], path + "[" + std::to_string(i) + "]"));
      return out;
    }
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (std::find(seen_.begin(), seen_.end(), key) == seen_.end())
        throw Error(ErrorCode::UnknownKey, "unknown config key '" + child(key) + "'");
    }
  }

 private:
  std::string where() const { return path_.empty() ? "<root>" : path_; }
  const json& j_;
  std::string path_;
  std::vector<std::string> seen_;
};

inline fs::path resolve(const fs::path& base, const std::string& p) {
  if (p.empty()) return {};
  fs::path path(p);
  return path.is_absolute() ? path : (base / path).lexically_normal();
}

}  // namespace detail

/// Parses an in-memory config. Relative paths resolve against `base_dir`.
/// Omitted attack settings keep their defaults (noise 0.04 / 0.001 / 40 /
/// alpha 1; filtering noise 0.01, K = 5, step 0.1, 160 iterations, beta 1).
inline ExperimentConfig parse_config_json(const json& j, const fs::path& base_dir = ".") {
  ExperimentConfig c;
  detail::StrictObject root(j, "");

  std::string method;
  root.read("method", method);
  if (method.empty()) throw Error(ErrorCode::ConfigInvalid, "method is required");
  if (method == "solid") {
    c.method = Method::Solid;
  } else if (method == "dm") {
    c.method = Method::Dm;
  } else if (method == "advnoise_dm" || method == "advnoise") {
    c.method = Method::AdvNoiseDm;
  } else if (method == "mf2m") {
    c.method = Method::Mf2m;
  } else if (method.rfind("baseline:", 0) == 0) {
    c.method = Method::Baseline;
    c.baseline.kind = parse_baseline_kind(method.substr(9));
  } else {
    throw Error(ErrorCode::ConfigInvalid, "method: unknown value '" + method + "'");
  }

  if (const json* models = root.get("models")) {
    detail::StrictObject m(*models, "models");
    std::string fr, md;
    m.read("fr", fr);
    m.read("md", md);
    m.finish();
    c.fr_model = detail::resolve(base_dir, fr);
    c.md_model = detail::resolve(base_dir, md);
  }
  if (const json* data = root.get("data")) {
    detail::StrictObject d(*data, "data");
    std::string probes, templates, gallery;
    d.read("probes", probes);
    d.read("templates", templates);
    d.read("gallery", gallery);
    d.finish();
    c.probes_dir = detail::resolve(base_dir, probes);
    c.templates_dir = detail::resolve(base_dir, templates);
    c.gallery_dir = detail::resolve(base_dir, gallery);
  }
  if (const json* attack = root.get("attack")) {
    detail::StrictObject a(*attack, "attack");
    if (const json* noise = a.get("noise")) {
      detail::StrictObject n(*noise, "attack.noise");
      n.read("epsilon", c.noise.epsilon);
      n.read("step_size", c.noise.step_size);
      n.read("iterations", c.noise.iterations);
      n.read("ratio_alpha", c.noise.ratio_alpha);
      n.read("target_label", c.noise.target_label);
      n.finish();
    }
    if (const json* filter = a.get("filter")) {
      detail::StrictObject f(*filter, "attack.filter");
      f.read("noise_epsilon", c.filter.noise_epsilon);
      f.read("kernel_size", c.filter.kernel_size);
      f.read("kernel_step", c.filter.kernel_step);
      f.read("kernel_iterations", c.filter.kernel_iterations);
      f.read("ratio_beta", c.filter.ratio_beta);
      f.read("ablation_filter_only", c.filter.ablation_filter_only);
      f.finish();
    }
    if (const json* baseline = a.get("baseline")) {
      detail::StrictObject b(*baseline, "attack.baseline");
      b.read("momentum_mu", c.baseline.momentum_mu);
      b.read("ti_kernel_size", c.baseline.ti_kernel_size);
      b.read("di_probability", c.baseline.di_probability);
      b.read("di_min_scale", c.baseline.di_min_scale);
      b.finish();
    }
    a.finish();
  }
  if (const json* mask = root.get("mask")) {
    detail::StrictObject m(*mask, "mask");
    std::vector<double> color;
    m.read("solid_color", color);
    if (!color.empty()) {
      if (color.size() != 3) throw Error(ErrorCode::TypeError, "mask.solid_color: expected [r, g, b]");
      c.solid_color = {color[0], color[1], color[2]};
    }
    if (const json* scheme = m.get("landmark_scheme")) {
      detail::StrictObject s(*scheme, "mask.landmark_scheme");
      LandmarkScheme ls;
      s.read("id", ls.id);
      s.read("point_count", ls.point_count);
      s.read("contour", ls.contour);
      s.read("nose", ls.nose);
      s.finish();
      if (ls.id.empty()) throw Error(ErrorCode::ConfigInvalid, "mask.landmark_scheme.id is required");
      c.scheme = ls;
    }
    m.finish();
  }
  if (const json* eval = root.get("evaluation")) {
    detail::StrictObject e(*eval, "evaluation");
    e.read("far_targets", c.far_targets);
    e.read("max_rank", c.max_rank);
    e.finish();
  }
  if (root.has("seed")) {
    std::uint64_t seed = 0;
    root.read("seed", seed);
    c.seed = seed;
  } else {
    root.get("seed");
  }
  root.read("workers", c.workers);
  std::string output, cache;
  root.read("output", output);
  root.read("cache_dir", cache);
  c.output_dir = detail::resolve(base_dir, output);
  c.cache_dir = detail::resolve(base_dir, cache);
  root.finish();

  c.noise.validate();
  c.filter.validate();
  c.baseline.validate();
  if (c.workers < 1) throw Error(ErrorCode::ConfigInvalid, "workers must be >= 1");
  if (c.max_rank < 1) throw Error(ErrorCode::ConfigInvalid, "evaluation.max_rank must be >= 1");
  for (double t : c.far_targets)
    if (!(t > 0.0 && t <= 1.0)) throw Error(ErrorCode::ConfigInvalid, "evaluation.far_targets must be in (0,1]");
  if (c.stochastic() && !c.seed) throw Error(ErrorCode::MissingSeed, method + " needs a seed");
  return c;
}

inline ExperimentConfig parse_config(const fs::path& file) {
  json j;
  try {
    j = json::parse(io::read_text(file));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigInvalid, file.string() + ": " + e.what());
  }
  return parse_config_json(j, file.parent_path().empty() ? fs::path(".") : file.parent_path());
}

/// Result-affecting settings only; worker count and output location are
/// left out so identical experiments produce identical manifests.
inline json config_snapshot(const ExperimentConfig& c) {
  auto rel = [](const fs::path& p) { return p.empty() ? std::string() : p.filename().string(); };
  json j = {{"method", method_name(c)},
            {"models", {{"fr", rel(c.fr_model)}, {"md", rel(c.md_model)}}},
            {"attack",
             {{"noise",
               {{"epsilon", c.noise.epsilon},
                {"step_size", c.noise.step_size},
                {"iterations", c.noise.iterations},
                {"ratio_alpha", c.noise.ratio_alpha},
                {"target_label", c.noise.target_label}}},
              {"filter",
               {{"noise_epsilon", c.filter.noise_epsilon},
                {"kernel_size", c.filter.kernel_size},
                {"kernel_step", c.filter.kernel_step},
                {"kernel_iterations", c.filter.kernel_iterations},
                {"ratio_beta", c.filter.ratio_beta},
                {"ablation_filter_only", c.filter.ablation_filter_only}}},
              {"baseline",
               {{"momentum_mu", c.baseline.momentum_mu},
                {"ti_kernel_size", c.baseline.ti_kernel_size},
                {"di_probability", c.baseline.di_probability},
                {"di_min_scale", c.baseline.di_min_scale}}}}},
            {"mask",
             {{"solid_color", {c.solid_color.r, c.solid_color.g, c.solid_color.b}},
              {"landmark_scheme",
               {{"id", c.scheme.id}, {"point_count", c.scheme.point_count}, {"contour", c.scheme.contour},
                {"nose", c.scheme.nose}}}}},
            {"evaluation", {{"far_targets", c.far_targets}, {"max_rank", c.max_rank}}}};
  if (c.seed) j["seed"] = *c.seed;
  return j;
}

/// Checks that every referenced input exists; called before any image is read.
inline void validate_paths(const ExperimentConfig& c) {
  auto need_file = [](const fs::path& p, const char* what) {
    if (p.empty()) throw Error(ErrorCode::ConfigInvalid, std::string(what) + " is required");
    if (!fs::is_regular_file(p)) throw Error(ErrorCode::ConfigInvalid, std::string(what) + " not found: " + p.string());
  };
  auto need_dir = [](const fs::path& p, const char* what) {
    if (p.empty()) throw Error(ErrorCode::ConfigInvalid, std::string(what) + " is required");
    if (!fs::is_directory(p)) throw Error(ErrorCode::ConfigInvalid, std::string(what) + " not found: " + p.string());
  };
  need_file(c.fr_model, "models.fr");
  need_file(c.md_model, "models.md");
  need_dir(c.probes_dir, "data.probes");
  if (c.needs_templates()) need_dir(c.templates_dir, "data.templates");
  if (!c.gallery_dir.empty()) need_dir(c.gallery_dir, "data.gallery");
  if (c.output_dir.empty()) throw Error(ErrorCode::ConfigInvalid, "output is required");
}

// ---------------------------------------------------------------------------
// Dataset

struct Sample {
  std::string name;
  std::string identity;
  fs::path image_path;
  std::optional<fs::path> landmarks_path;
};

/// Identity label: the file stem up to the first '_' (whole stem otherwise).
inline std::string identity_of(const std::string& name) { return name.substr(0, name.find('_')); }

/// Lists `<name>.png` files with their optional `<name>.landmarks.json`.
inline std::vector<Sample> list_samples(const fs::path& dir) {
  std::vector<Sample> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".png") continue;
    Sample s;
    s.name = entry.path().stem().string();
    s.identity = identity_of(s.name);
    s.image_path = entry.path();
    const fs::path lm = dir / (s.name + ".landmarks.json");
    if (fs::is_regular_file(lm)) s.landmarks_path = lm;
    out.push_back(std::move(s));
  }
  std::sort(out.begin(), out.end(), [](const Sample& a, const Sample& b) { return a.name < b.name; });
  return out;
}

inline std::unique_ptr<DifferentiableModel> load_model(const fs::path& path, ModelKind expected) {
  // Only the toy JSON format ships; adapters for other models plug in here.
  auto model = std::make_unique<ToyModel>(ToyModel::load(path));
  if (model->kind() != expected)
    throw Error(ErrorCode::ConfigInvalid, path.string() + " is a " + to_string(model->kind()) + ", expected a " +
                                              to_string(expected));
  return model;
}

/// Embeddings cached on disk keyed by (model digest, image digest).
class EmbeddingCache {
 public:
  EmbeddingCache(fs::path dir, std::string model_digest) : dir_(std::move(dir)), model_(std::move(model_digest)) {}

  std::vector<double> get(const DifferentiableModel& fr, const fs::path& image_path) {
    const std::string bytes = io::read_text(image_path);
    const fs::path file = dir_ / model_.substr(0, 16) / (io::sha256_hex(bytes) + ".emb");
    if (fs::is_regular_file(file)) {
      const std::string raw = io::read_text(file);
      if (raw.size() % 8 == 0 && !raw.empty()) {
        std::vector<double> v(raw.size() / 8);
        for (std::size_t i = 0; i < v.size(); ++i) {
          std::uint64_t bits = 0;
          for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(raw[i * 8 + b])) << (8 * b);
          v[i] = std::bit_cast<double>(bits);
        }
        ++hits_;
        return v;
      }
    }
    auto v = embed(fr, io::read_png(image_path)).values;
    fs::create_directories(file.parent_path());
    std::string raw(v.size() * 8, '\0');
    for (std::size_t i = 0; i < v.size(); ++i) {
      const auto bits = std::bit_cast<std::uint64_t>(v[i]);
      for (int b = 0; b < 8; ++b) raw[i * 8 + b] = static_cast<char>((bits >> (8 * b)) & 0xFF);
    }
    io::write_text(file, raw);
    ++misses_;
    return v;
  }

  std::size_t hits() const noexcept { return hits_; }
  std::size_t misses() const noexcept { return misses_; }

 private:
  fs::path dir_;
  std::string model_;
  std::size_t hits_ = 0;
  std::size_t misses_ = 0;
};

struct Gallery {
  std::vector<std::vector<double>> embeddings;
  std::vector<std::string> labels;
};

// ---------------------------------------------------------------------------
// Metrics over a set of output images

struct EvaluationInput {
  std::vector<Image> images;                     // images presented to FR / MD
  std::vector<std::string> labels;               // identity per image
  std::vector<std::optional<Image>> references;  // similarity reference per image
};

inline MetricReport compute_metrics(const EvaluationInput& in, const Gallery* gallery, const DifferentiableModel& fr,
                                    const DifferentiableModel& md, std::span<const double> far_targets,
                                    std::size_t max_rank, VerificationResult* full_verification = nullptr) {
  MetricReport r;
  r.image_count = in.images.size();
  if (in.images.empty()) return r;
  r.mask_detection_rate = mask_detection_rate(in.images, md);

  std::vector<double> psnrs, ssims;
  for (std::size_t i = 0; i < in.images.size(); ++i) {
    if (i < in.references.size() && in.references[i]) {
      psnrs.push_back(psnr(in.images[i], *in.references[i]));
      ssims.push_back(ssim(in.images[i], *in.references[i]));
    }
  }
  if (!psnrs.empty()) {
    r.psnr_db = std::accumulate(psnrs.begin(), psnrs.end(), 0.0) / static_cast<double>(psnrs.size());
    r.ssim = std::accumulate(ssims.begin(), ssims.end(), 0.0) / static_cast<double>(ssims.size());
  }

  if (gallery && !gallery->embeddings.empty()) {
    std::vector<std::vector<double>> probe_embs;
    for (const auto& img : in.images) probe_embs.push_back(embed(fr, img).values);
    r.cmc = cmc_curve(probe_embs, gallery->embeddings, gallery->labels, in.labels,
                      std::min(max_rank, gallery->embeddings.size()));
    ScoreSet scores;
    for (std::size_t p = 0; p < probe_embs.size(); ++p)
      for (std::size_t g = 0; g < gallery->embeddings.size(); ++g) {
        const double d = euclidean_distance(probe_embs[p], gallery->embeddings[g]);
        (gallery->labels[g] == in.labels[p] ? scores.positive_scores : scores.negative_scores).push_back(d);
      }
    if (!scores.positive_scores.empty() && !scores.negative_scores.empty()) {
      auto v = verification_metrics(scores, far_targets);
      if (full_verification) *full_verification = v;
      v.roc.clear();
      r.verification = std::move(v);
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Running an experiment

struct ManifestEntry {
  std::string name;
  std::string identity;
  std::string status = "ok";
  std::string error;
  std::optional<std::string> template_name;
  int height = 0;
  int width = 0;
  std::map<std::string, std::string> files;  // role -> path relative to the output dir
  std::map<std::string, std::string> digests;
  std::string input_digest;
  double seconds = 0.0;
};

struct RunManifest {
  json config;
  std::vector<ManifestEntry> entries;
  std::map<std::string, std::string> files;  // aggregate outputs
  std::map<std::string, std::string> digests;
  std::string tool_version = kToolVersion;

  std::size_t failures() const {
    return static_cast<std::size_t>(
        std::count_if(entries.begin(), entries.end(), [](const ManifestEntry& e) { return e.status != "ok"; }));
  }
};

inline json to_json(const RunManifest& m) {
  json entries = json::array();
  for (const auto& e : m.entries) {
    json je = {{"name", e.name}, {"identity", e.identity}, {"status", e.status},
               {"size", {e.height, e.width}}, {"files", e.files}, {"sha256", e.digests},
               {"input_sha256", e.input_digest}};
    if (!e.error.empty()) je["error"] = e.error;
    if (e.template_name) je["template"] = *e.template_name;
    entries.push_back(je);
  }
  return {{"tool_version", m.tool_version}, {"config", m.config}, {"entries", entries},
          {"files", m.files}, {"sha256", m.digests}};
}

inline RunManifest manifest_from_json(const json& j) {
  RunManifest m;
  try {
    m.tool_version = j.at("tool_version").get<std::string>();
    m.config = j.at("config");
    for (const auto& je : j.at("entries")) {
      ManifestEntry e;
      e.name = je.at("name").get<std::string>();
      e.identity = je.at("identity").get<std::string>();
      e.status = je.at("status").get<std::string>();
      e.height = je.at("size").at(0).get<int>();
      e.width = je.at("size").at(1).get<int>();
      e.files = je.at("files").get<std::map<std::string, std::string>>();
      e.digests = je.at("sha256").get<std::map<std::string, std::string>>();
      e.input_digest = je.at("input_sha256").get<std::string>();
      if (je.contains("error")) e.error = je.at("error").get<std::string>();
      if (je.contains("template")) e.template_name = je.at("template").get<std::string>();
      m.entries.push_back(std::move(e));
    }
    m.files = j.at("files").get<std::map<std::string, std::string>>();
    m.digests = j.at("sha256").get<std::map<std::string, std::string>>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("manifest: ") + e.what());
  }
  return m;
}

/// Lists files that are missing or whose digest differs from the record.
inline std::vector<std::string> verify_manifest(const RunManifest& m, const fs::path& output_dir) {
  std::vector<std::string> problems;
  auto check = [&](const std::map<std::string, std::string>& files, const std::map<std::string, std::string>& digests) {
    for (const auto& [role, rel] : files) {
      const fs::path p = output_dir / rel;
      if (!fs::is_regular_file(p)) {
        problems.push_back("missing " + rel);
        continue;
      }
      auto it = digests.find(role);
      if (it == digests.end() || it->second != io::sha256_file(p)) problems.push_back("digest mismatch " + rel);
    }
  };
  for (const auto& e : m.entries) check(e.files, e.digests);
  check(m.files, m.digests);
  return problems;
}

struct LoadedModels {
  std::unique_ptr<DifferentiableModel> fr;
  std::unique_ptr<DifferentiableModel> md;
  std::string fr_digest;
};

inline LoadedModels load_models(const ExperimentConfig& c) {
  LoadedModels m;
  m.fr = load_model(c.fr_model, ModelKind::Embedder);
  m.md = load_model(c.md_model, ModelKind::Detector);
  m.fr_digest = io::sha256_file(c.fr_model);
  return m;
}

inline Gallery load_gallery(const ExperimentConfig& c, const LoadedModels& models) {
  Gallery g;
  if (c.gallery_dir.empty()) return g;
  EmbeddingCache cache(c.cache_dir.empty() ? c.output_dir / "cache" : c.cache_dir, models.fr_digest);
  for (const auto& s : list_samples(c.gallery_dir)) {
    g.embeddings.push_back(cache.get(*models.fr, s.image_path));
    g.labels.push_back(s.identity);
  }
  return g;
}

/// Splitmix64 finalizer; decorrelates per-probe seeds.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

struct TemplateSet {
  std::vector<Sample> samples;
  std::vector<Image> images;
  std::vector<LandmarkSet> landmarks;
  std::vector<std::vector<double>> embeddings;
};

namespace detail {

inline LandmarkSet load_sample_landmarks(const Sample& s, const LandmarkScheme& scheme) {
  if (!s.landmarks_path) throw Error(ErrorCode::Io, "missing landmarks for " + s.name);
  auto lm = io::read_landmarks(*s.landmarks_path);
  if (lm.scheme_id != scheme.id)
    throw Error(ErrorCode::SchemeMissingIndices,
                s.name + ": landmark scheme '" + lm.scheme_id + "' does not match configured '" + scheme.id + "'");
  return lm;
}

struct ProbeWork {
  Image output;
  Image reference;  // masked image before any attack
  json report;
  std::optional<std::string> template_name;
};

inline ProbeWork process_probe(const ExperimentConfig& c, const LoadedModels& models, const TemplateSet& templates,
                               const Image& original, const LandmarkSet& landmarks, std::size_t index) {
  ProbeWork w;
  const auto& fr = *models.fr;
  const auto& md = *models.md;
  if (c.method == Method::Solid || c.method == Method::Baseline) {
    auto solid = solid_color_mask(original, landmarks, c.solid_color, c.scheme);
    w.reference = solid.image;
    if (c.method == Method::Solid) {
      w.output = solid.image;
      w.report = {{"region_pixels", region_pixel_count(solid.region)}};
      return w;
    }
    const auto objective = JointObjective::against(original, fr, md, c.noise.ratio_alpha, c.noise.target_label);
    std::optional<std::uint64_t> seed;
    if (c.seed) seed = mix_seed(*c.seed, index);
    auto res = fgsm_family_attack(solid.image, objective, c.baseline, c.noise, solid.region, seed);
    w.output = std::move(res.image);
    w.report = to_json(res.report, false);
    return w;
  }

  const auto probe_emb = embed(fr, original).values;
  const std::size_t t = select_template(probe_emb, templates.embeddings);
  w.template_name = templates.samples[t].name;
  require_compatible(landmarks, templates.landmarks[t]);
  RegionMask region;
  const Image dm = delaunay_mask(original, landmarks, templates.images[t], templates.landmarks[t], c.scheme, &region);
  w.reference = dm;
  if (c.method == Method::Dm) {
    w.output = dm;
    w.report = {{"region_pixels", region_pixel_count(region)}};
    return w;
  }
  const JointObjective objective(fr, md, probe_emb, c.noise.ratio_alpha, c.noise.target_label);
  if (c.method == Method::AdvNoiseDm) {
    auto res = pgd_noise_attack(dm, objective, c.noise, region);
    w.output = std::move(res.image);
    w.report = to_json(res.report, false);
    return w;
  }
  auto res = mf2m_from_masked(dm, region, objective, c.noise, c.filter);
  w.output = std::move(res.image);
  w.report = to_json(res.report, false);
  return w;
}

inline std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  return buf;
}

}  // namespace detail

/// Recomputes the MetricReport for a finished run from its float sidecars and
/// writes metrics.json, cmc.csv and roc.csv next to the manifest.
inline MetricReport evaluate_run(const ExperimentConfig& c, const LoadedModels& models, RunManifest& manifest,
                                 const fs::path& output_dir) {
  EvaluationInput in;
  for (const auto& e : manifest.entries) {
    if (e.status != "ok") continue;
    in.images.push_back(io::read_raw_f32(output_dir / e.files.at("raw"), e.height, e.width));
    in.labels.push_back(e.identity);
    in.references.emplace_back(io::read_raw_f32(output_dir / e.files.at("reference_raw"), e.height, e.width));
  }
  const Gallery gallery = load_gallery(c, models);
  VerificationResult full;
  MetricReport report = compute_metrics(in, gallery.embeddings.empty() ? nullptr : &gallery, *models.fr, *models.md,
                                        c.far_targets, c.max_rank, &full);

  io::write_text(output_dir / "metrics.json", to_json(report).dump(2) + "\n");
  manifest.files["metrics"] = "metrics.json";
  if (report.cmc) {
    std::ostringstream cmc;
    write_cmc_csv(cmc, *report.cmc);
    io::write_text(output_dir / "cmc.csv", cmc.str());
    manifest.files["cmc_csv"] = "cmc.csv";
  }
  if (report.verification) {
    std::ostringstream roc;
    write_roc_csv(roc, full.roc);
    io::write_text(output_dir / "roc.csv", roc.str());
    manifest.files["roc_csv"] = "roc.csv";
  }
  for (const auto& [role, rel] : manifest.files) manifest.digests[role] = io::sha256_file(output_dir / rel);
  return report;
}

struct RunResult {
  RunManifest manifest;
  MetricReport metrics;
  int exit_code = 0;  // 0 ok, 3 partial failures
};

/// Masks/attacks every probe, writes outputs, evaluates, writes the manifest.
/// Config problems throw before any image is read.
inline RunResult run_experiment(const ExperimentConfig& c) {
  validate_paths(c);
  LoadedModels models = load_models(c);
  const auto probes = list_samples(c.probes_dir);
  if (probes.empty()) throw Error(ErrorCode::ConfigInvalid, "no probe images in " + c.probes_dir.string());

  TemplateSet templates;
  if (c.needs_templates()) {
    templates.samples = list_samples(c.templates_dir);
    if (templates.samples.empty()) throw Error(ErrorCode::EmptyTemplates, "no templates in " + c.templates_dir.string());
    for (const auto& s : templates.samples) {
      templates.images.push_back(io::read_png(s.image_path));
      templates.landmarks.push_back(detail::load_sample_landmarks(s, c.scheme));
      templates.embeddings.push_back(embed(*models.fr, templates.images.back()).values);
    }
  }

  const fs::path out = c.output_dir;
  fs::create_directories(out / "images");
  fs::create_directories(out / "reference");
  fs::create_directories(out / "reports");
  const std::string started = detail::utc_timestamp();

  RunResult result;
  result.manifest.config = config_snapshot(c);
  result.manifest.entries.resize(probes.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < probes.size(); i = next++) {
      const Sample& s = probes[i];
      ManifestEntry& e = result.manifest.entries[i];
      e.name = s.name;
      e.identity = s.identity;
      const auto t0 = std::chrono::steady_clock::now();
      try {
        e.input_digest = io::sha256_file(s.image_path);
        const Image original = io::read_png(s.image_path);
        e.height = original.height();
        e.width = original.width();
        const LandmarkSet lm = detail::load_sample_landmarks(s, c.scheme);
        auto work = detail::process_probe(c, models, templates, original, lm, i);
        e.template_name = work.template_name;
        e.files = {{"png", "images/" + s.name + ".png"},
                   {"raw", "images/" + s.name + ".f32"},
                   {"reference_raw", "reference/" + s.name + ".f32"},
                   {"report", "reports/" + s.name + ".json"}};
        io::write_png(work.output, out / e.files["png"]);
        io::write_raw_f32(work.output, out / e.files["raw"]);
        io::write_raw_f32(work.reference, out / e.files["reference_raw"]);
        io::write_text(out / e.files["report"], work.report.dump(2) + "\n");
        for (const auto& [role, rel] : e.files) e.digests[role] = io::sha256_file(out / rel);
      } catch (const std::exception& ex) {
        e.status = "failed";
        e.error = ex.what();
        e.files.clear();
        e.digests.clear();
      }
      e.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
  };
  const int workers = std::max(1, std::min<int>(c.workers, static_cast<int>(probes.size())));
  std::vector<std::thread> pool;
  for (int w = 1; w < workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  result.metrics = evaluate_run(c, models, result.manifest, out);
  io::write_text(out / "manifest.json", to_json(result.manifest).dump(2) + "\n");

  json timings = {{"started", started}, {"finished", detail::utc_timestamp()}, {"workers", workers}};
  for (const auto& e : result.manifest.entries) timings["seconds"][e.name] = e.seconds;
  io::write_text(out / "timings.json", timings.dump(2) + "\n");

  result.exit_code = result.manifest.failures() > 0 ? 3 : 0;
  return result;
}

/// Reconstructs the evaluation-relevant config from a manifest snapshot plus
/// the model and gallery locations, which the snapshot stores by name only.
inline ExperimentConfig config_from_snapshot(const json& snapshot, const fs::path& fr_model, const fs::path& md_model,
                                             const fs::path& gallery_dir, const fs::path& output_dir) {
  json j = snapshot;
  j["models"] = {{"fr", fr_model.string()}, {"md", md_model.string()}};
  j["data"] = {{"probes", ""}, {"gallery", gallery_dir.string()}};
  j["output"] = output_dir.string();
  return parse_config_json(j, ".");
}

}  // namespace fmask
