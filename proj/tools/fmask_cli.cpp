// fmask command-line front end.
//
//   fmask mask     --config run.json [--method dm|solid]
//   fmask attack   --config run.json [--method advnoise_dm|mf2m|baseline] [--variant MI_FGSM]
//   fmask evaluate --config run.json          (recomputes metrics for an existing output dir)
//   fmask report   --output DIR               (plot data from metrics.json / cmc.csv / roc.csv)
//
// Flags mirror config keys and override the file. Exit codes: 0 ok,
// 2 config error, 3 some images failed (see manifest).

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "fmask/pipeline.hpp"

namespace fs = std::filesystem;
using fmask::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

struct Overrides {
  std::string config;
  std::string method;
  std::string variant;
  std::string fr, md, probes, templates, gallery, output, cache_dir;
  std::optional<double> epsilon, step_size, alpha, noise_epsilon, kernel_step, beta, momentum_mu, di_probability;
  std::optional<int> iterations, kernel_size, kernel_iterations, ti_kernel_size, target_label, workers;
  std::optional<std::size_t> max_rank;
  std::optional<std::uint64_t> seed;
  std::vector<double> far_targets;
  bool filter_only = false;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "experiment config (JSON)");
  cmd->add_option("--fr", o.fr, "models.fr");
  cmd->add_option("--md", o.md, "models.md");
  cmd->add_option("--probes", o.probes, "data.probes");
  cmd->add_option("--templates", o.templates, "data.templates");
  cmd->add_option("--gallery", o.gallery, "data.gallery");
  cmd->add_option("--output", o.output, "output directory");
  cmd->add_option("--cache-dir", o.cache_dir, "gallery embedding cache");
  cmd->add_option("--seed", o.seed, "seed for stochastic variants");
  cmd->add_option("--workers", o.workers, "worker threads");
  cmd->add_option("--far", o.far_targets, "evaluation.far_targets");
  cmd->add_option("--max-rank", o.max_rank, "evaluation.max_rank");
}

void add_attack(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--variant", o.variant, "baseline variant (FGSM, I_FGSM, MI_FGSM, TI_FGSM, ...)");
  cmd->add_option("--epsilon", o.epsilon, "attack.noise.epsilon");
  cmd->add_option("--step-size", o.step_size, "attack.noise.step_size");
  cmd->add_option("--iterations", o.iterations, "attack.noise.iterations");
  cmd->add_option("--alpha", o.alpha, "attack.noise.ratio_alpha");
  cmd->add_option("--target-label", o.target_label, "attack.noise.target_label");
  cmd->add_option("--noise-epsilon", o.noise_epsilon, "attack.filter.noise_epsilon");
  cmd->add_option("--kernel-size", o.kernel_size, "attack.filter.kernel_size");
  cmd->add_option("--kernel-step", o.kernel_step, "attack.filter.kernel_step");
  cmd->add_option("--kernel-iterations", o.kernel_iterations, "attack.filter.kernel_iterations");
  cmd->add_option("--beta", o.beta, "attack.filter.ratio_beta");
  cmd->add_flag("--filter-only", o.filter_only, "attack.filter.ablation_filter_only");
  cmd->add_option("--momentum", o.momentum_mu, "attack.baseline.momentum_mu");
  cmd->add_option("--ti-kernel-size", o.ti_kernel_size, "attack.baseline.ti_kernel_size");
  cmd->add_option("--di-probability", o.di_probability, "attack.baseline.di_probability");
}

template <class T>
void set_if(json& j, const json::json_pointer& ptr, const std::optional<T>& v) {
  if (v) j[ptr] = *v;
}

void set_path(json& j, const json::json_pointer& ptr, const std::string& v) {
  // Command-line paths are relative to the working directory, not the config.
  if (!v.empty()) j[ptr] = fs::absolute(v).lexically_normal().string();
}

fmask::ExperimentConfig build_config(const Overrides& o, const std::string& default_method) {
  json j = json::object();
  fs::path base = ".";
  if (!o.config.empty()) {
    try {
      j = json::parse(fmask::io::read_text(o.config));
    } catch (const json::exception& e) {
      throw fmask::Error(fmask::ErrorCode::ConfigInvalid, o.config + ": " + e.what());
    }
    base = fs::path(o.config).parent_path();
    if (base.empty()) base = ".";
  }
  std::string method = o.method;
  if (method == "baseline" || (!o.variant.empty() && method.empty())) method = "baseline:" + (o.variant.empty() ? "I_FGSM" : o.variant);
  if (!method.empty()) j["method"] = method;
  if (!j.contains("method") && !default_method.empty()) j["method"] = default_method;

  set_path(j, "/models/fr"_json_pointer, o.fr);
  set_path(j, "/models/md"_json_pointer, o.md);
  set_path(j, "/data/probes"_json_pointer, o.probes);
  set_path(j, "/data/templates"_json_pointer, o.templates);
  set_path(j, "/data/gallery"_json_pointer, o.gallery);
  set_path(j, "/output"_json_pointer, o.output);
  set_path(j, "/cache_dir"_json_pointer, o.cache_dir);
  set_if(j, "/seed"_json_pointer, o.seed);
  set_if(j, "/workers"_json_pointer, o.workers);
  set_if(j, "/evaluation/max_rank"_json_pointer, o.max_rank);
  if (!o.far_targets.empty()) j["evaluation"]["far_targets"] = o.far_targets;
  set_if(j, "/attack/noise/epsilon"_json_pointer, o.epsilon);
  set_if(j, "/attack/noise/step_size"_json_pointer, o.step_size);
  set_if(j, "/attack/noise/iterations"_json_pointer, o.iterations);
  set_if(j, "/attack/noise/ratio_alpha"_json_pointer, o.alpha);
  set_if(j, "/attack/noise/target_label"_json_pointer, o.target_label);
  set_if(j, "/attack/filter/noise_epsilon"_json_pointer, o.noise_epsilon);
  set_if(j, "/attack/filter/kernel_size"_json_pointer, o.kernel_size);
  set_if(j, "/attack/filter/kernel_step"_json_pointer, o.kernel_step);
  set_if(j, "/attack/filter/kernel_iterations"_json_pointer, o.kernel_iterations);
  set_if(j, "/attack/filter/ratio_beta"_json_pointer, o.beta);
  if (o.filter_only) j["attack"]["filter"]["ablation_filter_only"] = true;
  set_if(j, "/attack/baseline/momentum_mu"_json_pointer, o.momentum_mu);
  set_if(j, "/attack/baseline/ti_kernel_size"_json_pointer, o.ti_kernel_size);
  set_if(j, "/attack/baseline/di_probability"_json_pointer, o.di_probability);
  return fmask::parse_config_json(j, base);
}

bool is_config_error(const fmask::Error& e) {
  using fmask::ErrorCode;
  switch (e.code()) {
    case ErrorCode::ConfigInvalid:
    case ErrorCode::UnknownKey:
    case ErrorCode::TypeError:
    case ErrorCode::EvenKernel:
    case ErrorCode::MissingSeed:
    case ErrorCode::InvalidArgument:
      return true;
    default:
      return false;
  }
}

int run(const fmask::ExperimentConfig& config) {
  auto result = fmask::run_experiment(config);
  std::cout << fmask::to_json(result.metrics).dump(2) << '\n';
  if (result.exit_code != 0)
    std::cerr << result.manifest.failures() << " image(s) failed; see " << (config.output_dir / "manifest.json")
              << '\n';
  return result.exit_code;
}

int evaluate(const fmask::ExperimentConfig& config) {
  fmask::validate_paths(config);
  const fs::path manifest_path = config.output_dir / "manifest.json";
  auto manifest = fmask::manifest_from_json(json::parse(fmask::io::read_text(manifest_path)));
  if (auto problems = fmask::verify_manifest(manifest, config.output_dir); !problems.empty()) {
    for (const auto& p : problems) std::cerr << "manifest: " << p << '\n';
    return kExitRuntime;
  }
  const auto models = fmask::load_models(config);
  const auto metrics = fmask::evaluate_run(config, models, manifest, config.output_dir);
  fmask::io::write_text(manifest_path, fmask::to_json(manifest).dump(2) + "\n");
  std::cout << fmask::to_json(metrics).dump(2) << '\n';
  return kExitOk;
}

std::vector<std::vector<double>> read_csv(const fs::path& path) {
  std::vector<std::vector<double>> rows;
  std::istringstream in(fmask::io::read_text(path));
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    std::vector<double> row;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) row.push_back(std::strtod(cell.c_str(), nullptr));
    if (!row.empty()) rows.push_back(std::move(row));
  }
  return rows;
}

int report(const fs::path& dir) {
  json plot;
  plot["metrics"] = json::parse(fmask::io::read_text(dir / "metrics.json"));
  if (fs::exists(dir / "cmc.csv")) plot["cmc"] = read_csv(dir / "cmc.csv");
  if (fs::exists(dir / "roc.csv")) plot["roc"] = read_csv(dir / "roc.csv");
  if (fs::exists(dir / "manifest.json")) {
    const auto manifest = json::parse(fmask::io::read_text(dir / "manifest.json"));
    plot["method"] = manifest.at("config").at("method");
  }
  fmask::io::write_text(dir / "plot.json", plot.dump(1) + "\n");
  std::cout << "wrote " << (dir / "plot.json").string() << '\n';
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Faced-mask generation, adversarial attacks and evaluation"};
  app.require_subcommand(1);
  Overrides o;
  fs::path report_dir;

  auto* mask = app.add_subcommand("mask", "generate solid or Delaunay masks");
  add_common(mask, o);
  mask->add_option("--method", o.method, "dm | solid")->check(CLI::IsMember({"dm", "solid"}));

  auto* attack = app.add_subcommand("attack", "run an adversarial attack");
  add_common(attack, o);
  add_attack(attack, o);
  attack->add_option("--method", o.method, "advnoise_dm | mf2m | baseline");

  auto* eval = app.add_subcommand("evaluate", "recompute metrics for a finished run");
  add_common(eval, o);

  auto* rep = app.add_subcommand("report", "write plot data (plot.json)");
  rep->add_option("--output", report_dir, "run output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*rep) return report(report_dir);
    if (*mask) return run(build_config(o, "dm"));
    if (*attack) return run(build_config(o, "mf2m"));
    // evaluate needs no method; any valid one keeps the parser happy.
    return evaluate(build_config(o, "dm"));
  } catch (const fmask::Error& e) {
    std::cerr << "fmask: " << e.what() << '\n';
    return is_config_error(e) ? kExitConfig : kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "fmask: " << e.what() << '\n';
    return kExitRuntime;
  }
}
