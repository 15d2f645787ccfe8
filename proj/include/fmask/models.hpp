#pragma once

// Differentiable model contract for the face recognizer and the mask
// detector, plus the small convolutional stack used as test fixture.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "fmask/error.hpp"
#include "fmask/image.hpp"

namespace fmask {

enum class ModelKind { Embedder, Detector };

inline std::string to_string(ModelKind kind) {
  return kind == ModelKind::Embedder ? "embedder" : "detector";
}

struct EmbeddingVector {
  std::vector<double> values;
  std::size_t dimension() const noexcept { return values.size(); }
};

struct MaskProbabilities {
  double p_not_masked = 0.5;
  double p_masked = 0.5;
  bool masked() const noexcept { return p_masked > p_not_masked; }
};

/// Two-class softmax, numerically stable.
inline MaskProbabilities softmax_pair(double logit_not_masked, double logit_masked) {
  const double m = std::max(logit_not_masked, logit_masked);
  const double a = std::exp(logit_not_masked - m);
  const double b = std::exp(logit_masked - m);
  return {a / (a + b), b / (a + b)};
}

/// Maps d(loss)/d(model output) given the model output.
using OutputGradientFn = std::function<std::vector<double>(std::span<const double> output)>;

struct ModelEvaluation {
  std::vector<double> output;  // embedding (embedder) or two logits (detector)
  GradientImage gradient;      // d(loss)/d(input)
};

/// FR(.) / MD(.) contract. Embedders output the final embedding, detectors
/// output the (not-masked, masked) logits. Implementations must be
/// deterministic and safe for concurrent const use.
class DifferentiableModel {
 public:
  virtual ~DifferentiableModel() = default;
  virtual ModelKind kind() const = 0;
  virtual int input_height() const = 0;
  virtual int input_width() const = 0;
  virtual std::vector<double> forward(const Image& image) const = 0;
  /// Forward pass followed by the vector-Jacobian product with the upstream
  /// gradient produced from the forward output.
  virtual ModelEvaluation forward_backward(const Image& image,
                                           const OutputGradientFn& upstream) const = 0;

  void require_input(const Image& image) const {
    if (image.height() != input_height() || image.width() != input_width()) {
      throw Error(ErrorCode::ShapeMismatch,
                  "model expects " + std::to_string(input_height()) + "x" +
                      std::to_string(input_width()) + ", got " + std::to_string(image.height()) +
                      "x" + std::to_string(image.width()));
    }
  }
};

// ---------------------------------------------------------------------------
// Toy model specification

struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  std::size_t element_count() const {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    return n;
  }
};

namespace layers {
struct Conv2d {
  std::string weight;  // [out, in, k, k]
  std::string bias;    // [out]
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 3;
  int stride = 1;
  int padding = 0;
};
struct LeakyRelu {
  double slope = 0.1;
};
struct GlobalAvgPool {};
struct Dense {
  std::string weight;  // [out, in]
  std::string bias;    // [out]
  int in_features = 0;
  int out_features = 0;
};
struct L2Normalize {};
}  // namespace layers

using LayerSpec =
    std::variant<layers::Conv2d, layers::LeakyRelu, layers::GlobalAvgPool, layers::Dense,
                 layers::L2Normalize>;

struct ToyModelSpec {
  ModelKind kind = ModelKind::Embedder;
  int input_height = 112;
  int input_width = 112;
  std::vector<LayerSpec> layers;
  std::map<std::string, Tensor> weights;
};

inline nlohmann::json to_json(const ToyModelSpec& spec) {
  using nlohmann::json;
  json layers_json = json::array();
  for (const auto& layer : spec.layers) {
    std::visit(
        [&](const auto& l) {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, layers::Conv2d>) {
            layers_json.push_back({{"type", "conv2d"}, {"weight", l.weight}, {"bias", l.bias},
                                   {"in_channels", l.in_channels}, {"out_channels", l.out_channels},
                                   {"kernel", l.kernel}, {"stride", l.stride},
                                   {"padding", l.padding}});
          } else if constexpr (std::is_same_v<T, layers::LeakyRelu>) {
            layers_json.push_back({{"type", "leaky_relu"}, {"slope", l.slope}});
          } else if constexpr (std::is_same_v<T, layers::GlobalAvgPool>) {
            layers_json.push_back({{"type", "global_avg_pool"}});
          } else if constexpr (std::is_same_v<T, layers::Dense>) {
            layers_json.push_back({{"type", "dense"}, {"weight", l.weight}, {"bias", l.bias},
                                   {"in_features", l.in_features},
                                   {"out_features", l.out_features}});
          } else {
            layers_json.push_back({{"type", "l2_normalize"}});
          }
        },
        layer);
  }
  json weights_json = json::object();
  for (const auto& [name, t] : spec.weights) {
    weights_json[name] = {{"shape", t.shape}, {"data", t.data}};
  }
  return {{"kind", to_string(spec.kind)},
          {"input_size", {spec.input_height, spec.input_width}},
          {"layers", layers_json},
          {"weights", weights_json}};
}

inline ToyModelSpec toy_model_from_json(const nlohmann::json& j) {
  auto fail = [](const std::string& msg) -> Error { return Error(ErrorCode::InvalidArgument, "model file: " + msg); };
  try {
    ToyModelSpec spec;
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "embedder")
      spec.kind = ModelKind::Embedder;
    else if (kind == "detector")
      spec.kind = ModelKind::Detector;
    else
      throw fail("unknown kind '" + kind + "'");
    const auto& size = j.at("input_size");
    spec.input_height = size.at(0).get<int>();
    spec.input_width = size.at(1).get<int>();
    for (const auto& l : j.at("layers")) {
      const std::string type = l.at("type").get<std::string>();
      if (type == "conv2d") {
        layers::Conv2d c;
        c.weight = l.at("weight").get<std::string>();
        c.bias = l.at("bias").get<std::string>();
        c.in_channels = l.at("in_channels").get<int>();
        c.out_channels = l.at("out_channels").get<int>();
        c.kernel = l.at("kernel").get<int>();
        c.stride = l.at("stride").get<int>();
        c.padding = l.at("padding").get<int>();
        spec.layers.emplace_back(c);
      } else if (type == "leaky_relu") {
        spec.layers.emplace_back(layers::LeakyRelu{l.at("slope").get<double>()});
      } else if (type == "global_avg_pool") {
        spec.layers.emplace_back(layers::GlobalAvgPool{});
      } else if (type == "dense") {
        layers::Dense d;
        d.weight = l.at("weight").get<std::string>();
        d.bias = l.at("bias").get<std::string>();
        d.in_features = l.at("in_features").get<int>();
        d.out_features = l.at("out_features").get<int>();
        spec.layers.emplace_back(d);
      } else if (type == "l2_normalize") {
        spec.layers.emplace_back(layers::L2Normalize{});
      } else {
        throw fail("unknown layer type '" + type + "'");
      }
    }
    for (const auto& [name, t] : j.at("weights").items()) {
      Tensor tensor;
      tensor.shape = t.at("shape").get<std::vector<std::size_t>>();
      tensor.data = t.at("data").get<std::vector<double>>();
      if (tensor.data.size() != tensor.element_count())
        throw fail("weight '" + name + "' data does not match its shape");
      spec.weights.emplace(name, std::move(tensor));
    }
    return spec;
  } catch (const nlohmann::json::exception& e) {
    throw fail(e.what());
  }
}

inline ToyModelSpec load_toy_model_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open model file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, "model file " + path.string() + ": " + e.what());
  }
  return toy_model_from_json(j);
}

inline void save_toy_model_spec(const ToyModelSpec& spec, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write model file " + path.string());
  out << to_json(spec).dump() << '\n';
}

// ---------------------------------------------------------------------------
// Toy model evaluation

/// Channel-first activation volume.
struct Activation {
  int channels = 0;
  int height = 1;
  int width = 1;
  std::vector<double> data;

  double& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  double at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
};

class ToyModel final : public DifferentiableModel {
 public:
  explicit ToyModel(ToyModelSpec spec) : spec_(std::move(spec)) { validate(); }

  static ToyModel load(const std::filesystem::path& path) {
    return ToyModel(load_toy_model_spec(path));
  }

  const ToyModelSpec& spec() const noexcept { return spec_; }
  ModelKind kind() const override { return spec_.kind; }
  int input_height() const override { return spec_.input_height; }
  int input_width() const override { return spec_.input_width; }

  std::vector<double> forward(const Image& image) const override {
    return run_forward(image).back().data;
  }

  ModelEvaluation forward_backward(const Image& image,
                                   const OutputGradientFn& upstream) const override {
    auto acts = run_forward(image);
    ModelEvaluation eval;
    eval.output = acts.back().data;
    std::vector<double> grad = upstream(eval.output);
    if (grad.size() != eval.output.size())
      throw Error(ErrorCode::ShapeMismatch, "upstream gradient size mismatch");
    for (std::size_t li = spec_.layers.size(); li-- > 0;) {
      grad = backward_layer(spec_.layers[li], acts[li], acts[li + 1], grad);
    }
    eval.gradient = GradientImage(image.height(), image.width());
    const Activation& in = acts.front();
    for (int y = 0; y < image.height(); ++y)
      for (int x = 0; x < image.width(); ++x)
        for (int c = 0; c < 3; ++c)
          eval.gradient.at(y, x, c) = grad[(static_cast<std::size_t>(c) * in.height + y) * in.width + x];
    return eval;
  }

  /// Sign pattern of every leaky-rectifier input; differing patterns between
  /// two inputs mean a kink lies between them.
  std::vector<bool> activation_signature(const Image& image) const {
    auto acts = run_forward(image);
    std::vector<bool> signs;
    for (std::size_t li = 0; li < spec_.layers.size(); ++li) {
      if (std::holds_alternative<layers::LeakyRelu>(spec_.layers[li])) {
        for (double v : acts[li].data) signs.push_back(v >= 0.0);
      }
    }
    return signs;
  }

 private:
  const Tensor& weight(const std::string& name) const {
    auto it = spec_.weights.find(name);
    if (it == spec_.weights.end()) throw Error(ErrorCode::InvalidArgument, "missing weight '" + name + "'");
    return it->second;
  }

  void validate() const {
    int channels = 3, h = spec_.input_height, w = spec_.input_width;
    bool flat = false;
    int features = 0;
    auto bad = [](const std::string& msg) { return Error(ErrorCode::InvalidArgument, "toy model: " + msg); };
    if (h <= 0 || w <= 0) throw bad("input size must be positive");
    for (const auto& layer : spec_.layers) {
      if (auto* c = std::get_if<layers::Conv2d>(&layer)) {
        if (flat) throw bad("conv2d after pooling");
        if (c->in_channels != channels) throw bad("conv2d input channels do not chain");
        if (c->kernel <= 0 || c->stride <= 0 || c->padding < 0) throw bad("conv2d geometry");
        const auto& wt = weight(c->weight);
        if (wt.shape != std::vector<std::size_t>{std::size_t(c->out_channels), std::size_t(c->in_channels),
                                                 std::size_t(c->kernel), std::size_t(c->kernel)})
          throw bad("conv2d weight shape for '" + c->weight + "'");
        if (weight(c->bias).element_count() != std::size_t(c->out_channels)) throw bad("conv2d bias shape");
        h = (h + 2 * c->padding - c->kernel) / c->stride + 1;
        w = (w + 2 * c->padding - c->kernel) / c->stride + 1;
        if (h <= 0 || w <= 0) throw bad("conv2d output is empty");
        channels = c->out_channels;
      } else if (std::holds_alternative<layers::GlobalAvgPool>(layer)) {
        if (flat) throw bad("double pooling");
        flat = true;
        features = channels;
      } else if (auto* d = std::get_if<layers::Dense>(&layer)) {
        if (!flat) throw bad("dense before pooling");
        if (d->in_features != features) throw bad("dense input features do not chain");
        if (weight(d->weight).shape != std::vector<std::size_t>{std::size_t(d->out_features), std::size_t(d->in_features)})
          throw bad("dense weight shape for '" + d->weight + "'");
        if (weight(d->bias).element_count() != std::size_t(d->out_features)) throw bad("dense bias shape");
        features = d->out_features;
      }
    }
    if (!flat) throw bad("model must pool to a vector");
    if (spec_.kind == ModelKind::Detector && features != 2) throw bad("detector must output 2 logits");
  }

  std::vector<Activation> run_forward(const Image& image) const {
    require_input(image);
    std::vector<Activation> acts;
    acts.reserve(spec_.layers.size() + 1);
    Activation in{3, image.height(), image.width(), {}};
    in.data.resize(static_cast<std::size_t>(3) * image.height() * image.width());
    for (int y = 0; y < image.height(); ++y)
      for (int x = 0; x < image.width(); ++x)
        for (int c = 0; c < 3; ++c) in.at(c, y, x) = image.at(y, x, c);
    acts.push_back(std::move(in));
    for (const auto& layer : spec_.layers) acts.push_back(forward_layer(layer, acts.back()));
    return acts;
  }

  Activation forward_layer(const LayerSpec& layer, const Activation& in) const {
    return std::visit(
        [&](const auto& l) -> Activation {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, layers::Conv2d>) {
            const auto& wt = weight(l.weight).data;
            const auto& bs = weight(l.bias).data;
            Activation out{l.out_channels, (in.height + 2 * l.padding - l.kernel) / l.stride + 1,
                           (in.width + 2 * l.padding - l.kernel) / l.stride + 1, {}};
            out.data.assign(static_cast<std::size_t>(out.channels) * out.height * out.width, 0.0);
            for (int o = 0; o < out.channels; ++o) {
              for (int y = 0; y < out.height; ++y) {
                for (int x = 0; x < out.width; ++x) {
                  double acc = bs[o];
                  for (int i = 0; i < l.in_channels; ++i) {
                    const double* wk = &wt[((static_cast<std::size_t>(o) * l.in_channels + i) * l.kernel) * l.kernel];
                    for (int ky = 0; ky < l.kernel; ++ky) {
                      const int sy = y * l.stride + ky - l.padding;
                      if (sy < 0 || sy >= in.height) continue;
                      for (int kx = 0; kx < l.kernel; ++kx) {
                        const int sx = x * l.stride + kx - l.padding;
                        if (sx < 0 || sx >= in.width) continue;
                        acc += wk[ky * l.kernel + kx] * in.at(i, sy, sx);
                      }
                    }
                  }
                  out.at(o, y, x) = acc;
                }
              }
            }
            return out;
          } else if constexpr (std::is_same_v<T, layers::LeakyRelu>) {
            Activation out = in;
            for (double& v : out.data) v = v >= 0.0 ? v : l.slope * v;
            return out;
          } else if constexpr (std::is_same_v<T, layers::GlobalAvgPool>) {
            Activation out{in.channels, 1, 1, std::vector<double>(in.channels, 0.0)};
            const std::size_t plane = static_cast<std::size_t>(in.height) * in.width;
            for (int c = 0; c < in.channels; ++c) {
              double acc = 0.0;
              for (std::size_t k = 0; k < plane; ++k) acc += in.data[c * plane + k];
              out.data[c] = acc / static_cast<double>(plane);
            }
            return out;
          } else if constexpr (std::is_same_v<T, layers::Dense>) {
            const auto& wt = weight(l.weight).data;
            const auto& bs = weight(l.bias).data;
            Activation out{l.out_features, 1, 1, std::vector<double>(l.out_features, 0.0)};
            for (int o = 0; o < l.out_features; ++o) {
              double acc = bs[o];
              for (int i = 0; i < l.in_features; ++i) acc += wt[static_cast<std::size_t>(o) * l.in_features + i] * in.data[i];
              out.data[o] = acc;
            }
            return out;
          } else {
            Activation out = in;
            double norm = 0.0;
            for (double v : in.data) norm += v * v;
            norm = std::sqrt(norm);
            if (norm > 0.0)
              for (double& v : out.data) v /= norm;
            return out;
          }
        },
        layer);
  }

  std::vector<double> backward_layer(const LayerSpec& layer, const Activation& in,
                                     const Activation& out, const std::vector<double>& grad_out) const {
    return std::visit(
        [&](const auto& l) -> std::vector<double> {
          using T = std::decay_t<decltype(l)>;
          std::vector<double> grad_in(in.data.size(), 0.0);
          if constexpr (std::is_same_v<T, layers::Conv2d>) {
            const auto& wt = weight(l.weight).data;
            for (int o = 0; o < out.channels; ++o) {
              for (int y = 0; y < out.height; ++y) {
                for (int x = 0; x < out.width; ++x) {
                  const double g = grad_out[(static_cast<std::size_t>(o) * out.height + y) * out.width + x];
                  if (g == 0.0) continue;
                  for (int i = 0; i < l.in_channels; ++i) {
                    const double* wk = &wt[((static_cast<std::size_t>(o) * l.in_channels + i) * l.kernel) * l.kernel];
                    for (int ky = 0; ky < l.kernel; ++ky) {
                      const int sy = y * l.stride + ky - l.padding;
                      if (sy < 0 || sy >= in.height) continue;
                      for (int kx = 0; kx < l.kernel; ++kx) {
                        const int sx = x * l.stride + kx - l.padding;
                        if (sx < 0 || sx >= in.width) continue;
                        grad_in[(static_cast<std::size_t>(i) * in.height + sy) * in.width + sx] += g * wk[ky * l.kernel + kx];
                      }
                    }
                  }
                }
              }
            }
          } else if constexpr (std::is_same_v<T, layers::LeakyRelu>) {
            for (std::size_t k = 0; k < grad_in.size(); ++k)
              grad_in[k] = in.data[k] >= 0.0 ? grad_out[k] : l.slope * grad_out[k];
          } else if constexpr (std::is_same_v<T, layers::GlobalAvgPool>) {
            const std::size_t plane = static_cast<std::size_t>(in.height) * in.width;
            for (int c = 0; c < in.channels; ++c)
              for (std::size_t k = 0; k < plane; ++k) grad_in[c * plane + k] = grad_out[c] / static_cast<double>(plane);
          } else if constexpr (std::is_same_v<T, layers::Dense>) {
            const auto& wt = weight(l.weight).data;
            for (int o = 0; o < l.out_features; ++o)
              for (int i = 0; i < l.in_features; ++i)
                grad_in[i] += wt[static_cast<std::size_t>(o) * l.in_features + i] * grad_out[o];
          } else {
            // d(z/|z|)/dz = (I - e e^T) / |z|
            double norm = 0.0;
            for (double v : in.data) norm += v * v;
            norm = std::sqrt(norm);
            if (norm == 0.0) return grad_in;
            double dot = 0.0;
            for (std::size_t k = 0; k < grad_out.size(); ++k) dot += out.data[k] * grad_out[k];
            for (std::size_t k = 0; k < grad_in.size(); ++k) grad_in[k] = (grad_out[k] - out.data[k] * dot) / norm;
          }
          return grad_in;
        },
        layer);
  }

  ToyModelSpec spec_;
};

// ---------------------------------------------------------------------------
// Operations

inline EmbeddingVector embed(const DifferentiableModel& model, const Image& image) {
  if (model.kind() != ModelKind::Embedder)
    throw Error(ErrorCode::UnsupportedLoss, "embed() needs an embedder model");
  return {model.forward(image)};
}

inline MaskProbabilities detect_mask(const DifferentiableModel& model, const Image& image) {
  if (model.kind() != ModelKind::Detector)
    throw Error(ErrorCode::UnsupportedLoss, "detect_mask() needs a detector model");
  const auto logits = model.forward(image);
  return softmax_pair(logits[0], logits[1]);
}

inline double euclidean_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error(ErrorCode::ShapeMismatch, "embedding dimensions differ");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(acc);
}

inline constexpr double kProbabilityFloor = 1e-12;

/// -ln(max(p_label, floor)).
inline double cross_entropy(const MaskProbabilities& p, int label) {
  const double py = label == 0 ? p.p_not_masked : p.p_masked;
  return -std::log(std::max(py, kProbabilityFloor));
}

/// Euclidean distance of the model's embedding to a fixed reference.
struct EmbeddingDistanceLoss {
  std::vector<double> reference;
};
/// Cross-entropy of the detector's softmax against a label (0 = not masked).
struct CrossEntropyLoss {
  int label = 0;
};
using LossSpec = std::variant<EmbeddingDistanceLoss, CrossEntropyLoss>;

namespace detail {
inline void check_loss(const DifferentiableModel& model, const LossSpec& loss) {
  const bool ok = std::holds_alternative<EmbeddingDistanceLoss>(loss)
                      ? model.kind() == ModelKind::Embedder
                      : model.kind() == ModelKind::Detector;
  if (!ok) throw Error(ErrorCode::UnsupportedLoss, "loss does not fit a " + to_string(model.kind()));
  if (auto* ce = std::get_if<CrossEntropyLoss>(&loss); ce && ce->label != 0 && ce->label != 1)
    throw Error(ErrorCode::UnsupportedLoss, "cross-entropy label must be 0 or 1");
}

inline double loss_from_output(const LossSpec& loss, std::span<const double> output) {
  if (auto* d = std::get_if<EmbeddingDistanceLoss>(&loss)) return euclidean_distance(output, d->reference);
  const auto& ce = std::get<CrossEntropyLoss>(loss);
  return cross_entropy(softmax_pair(output[0], output[1]), ce.label);
}

inline std::vector<double> loss_output_gradient(const LossSpec& loss, std::span<const double> output) {
  std::vector<double> g(output.size(), 0.0);
  if (auto* d = std::get_if<EmbeddingDistanceLoss>(&loss)) {
    const double dist = euclidean_distance(output, d->reference);
    if (dist < 1e-12) return g;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = (output[i] - d->reference[i]) / dist;
    return g;
  }
  const int label = std::get<CrossEntropyLoss>(loss).label;
  const auto p = softmax_pair(output[0], output[1]);
  const double py = label == 0 ? p.p_not_masked : p.p_masked;
  if (py < kProbabilityFloor) return g;
  g[0] = p.p_not_masked - (label == 0 ? 1.0 : 0.0);
  g[1] = p.p_masked - (label == 1 ? 1.0 : 0.0);
  return g;
}
}  // namespace detail

inline double loss_value(const DifferentiableModel& model, const LossSpec& loss, const Image& image) {
  detail::check_loss(model, loss);
  return detail::loss_from_output(loss, model.forward(image));
}

/// Analytic d(loss)/d(image) via the model's backward pass.
inline GradientImage input_gradient(const DifferentiableModel& model, const LossSpec& loss,
                                    const Image& image) {
  detail::check_loss(model, loss);
  return model
      .forward_backward(image, [&](std::span<const double> out) { return detail::loss_output_gradient(loss, out); })
      .gradient;
}

/// One central-difference estimate.
struct FiniteDifferenceSample {
  std::size_t index = 0;  // flat index into the image
  double value = 0.0;
  bool crosses_kink = false;
};

/// Central differences of an arbitrary scalar function of the image at the
/// given flat coordinates (all coordinates when `coords` is empty). When
/// `signature` is provided, samples whose +/- evaluations differ in it are
/// flagged as crossing a kink.
inline std::vector<FiniteDifferenceSample> finite_difference_gradient(
    const std::function<double(const Image&)>& f, const Image& image, double step,
    std::span<const std::size_t> coords = {},
    const std::function<std::vector<bool>(const Image&)>& signature = {}) {
  if (!(step > 0.0)) throw Error(ErrorCode::InvalidArgument, "finite-difference step must be > 0");
  std::vector<std::size_t> all;
  if (coords.empty()) {
    all.resize(image.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    coords = all;
  }
  std::vector<FiniteDifferenceSample> out;
  out.reserve(coords.size());
  Image probe = image;
  for (std::size_t idx : coords) {
    if (idx >= image.size()) throw Error(ErrorCode::InvalidArgument, "coordinate out of range");
    probe[idx] = image[idx] + step;
    const double plus = f(probe);
    auto sig_plus = signature ? signature(probe) : std::vector<bool>{};
    probe[idx] = image[idx] - step;
    const double minus = f(probe);
    auto sig_minus = signature ? signature(probe) : std::vector<bool>{};
    probe[idx] = image[idx];
    out.push_back({idx, (plus - minus) / (2.0 * step), sig_plus != sig_minus});
  }
  return out;
}

/// Central differences of a model loss; kinks of toy models are flagged.
inline std::vector<FiniteDifferenceSample> finite_difference_gradient(
    const DifferentiableModel& model, const LossSpec& loss, const Image& image, double step,
    std::span<const std::size_t> coords = {}) {
  detail::check_loss(model, loss);
  std::function<std::vector<bool>(const Image&)> signature;
  if (auto* toy = dynamic_cast<const ToyModel*>(&model)) {
    signature = [toy](const Image& img) { return toy->activation_signature(img); };
  }
  return finite_difference_gradient([&](const Image& img) { return loss_value(model, loss, img); },
                                    image, step, coords, signature);
}

}  // namespace fmask
