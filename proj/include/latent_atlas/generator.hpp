#pragma once

// Miniature style-based generator.
//
//   z --mapping (L dense layers, leaky-relu)--> p --leaky-relu--> w
//   s_i = A_i(w)                                  (per-layer style affine)
//   x_0 = learned constant (C_0, base, base)
//   layer i: [upsample when a new block starts] -> modulate(x, s_i)
//            -> conv3x3 -> leaky-relu
//   image = sigmoid(conv1x1(x))                   (3 channels)
//
// The input of layer M (1-based) is the tappable feature map f.

#include <cstdint>
#include <cstring>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/QR>
#include <json.hpp>

#include "latent_atlas/autodiff.hpp"
#include "latent_atlas/image.hpp"
#include "latent_atlas/random.hpp"
#include "latent_atlas/tensor.hpp"

namespace latent_atlas {

inline constexpr double kLeakySlope = 0.2;

struct GeneratorConfig {
  std::size_t latent_dim = 64;
  std::size_t mapping_layers = 4;
  std::size_t synthesis_layers = 8;  // N, number of style inputs
  std::size_t split_layer = 4;       // M, 1-based, 1 < M <= N
  std::size_t base_resolution = 4;
  std::size_t output_resolution = 32;
  std::vector<std::size_t> channels = {32, 32, 16, 8};  // one entry per block
  std::uint64_t seed = 0;

  std::size_t blocks() const { return channels.size(); }

  std::vector<std::string> violations() const {
    std::vector<std::string> v;
    if (latent_dim < 2) v.push_back("latent_dim must be >= 2");
    if (mapping_layers < 1) v.push_back("mapping_layers must be >= 1");
    if (channels.empty()) v.push_back("channel schedule must be non-empty");
    for (std::size_t c : channels) {
      if (c == 0) v.push_back("channel counts must be positive");
    }
    if (synthesis_layers < channels.size()) {
      v.push_back("synthesis_layers must be >= number of blocks (" +
                  std::to_string(channels.size()) + ")");
    }
    if (!(split_layer > 1 && split_layer <= synthesis_layers)) {
      v.push_back("split_layer M must satisfy 1 < M <= N (M=" + std::to_string(split_layer) +
                  ", N=" + std::to_string(synthesis_layers) + ")");
    }
    if (base_resolution == 0) v.push_back("base_resolution must be positive");
    if (!channels.empty() && base_resolution > 0 &&
        output_resolution != (base_resolution << (channels.size() - 1))) {
      v.push_back("output_resolution must equal base_resolution * 2^(blocks-1) (" +
                  std::to_string(base_resolution << (channels.size() - 1)) + ")");
    }
    if (output_resolution > 128) v.push_back("output_resolution must be <= 128");
    return v;
  }

  void validate() const {
    const auto v = violations();
    if (v.empty()) return;
    std::string msg = "invalid generator config:";
    for (const auto& s : v) msg += "\n  - " + s;
    throw ConfigError(msg);
  }

  /// Block index of 0-based synthesis layer i.
  std::size_t block_of(std::size_t i) const { return i * blocks() / synthesis_layers; }
  bool starts_block(std::size_t i) const { return i > 0 && block_of(i) != block_of(i - 1); }
  std::size_t in_channels(std::size_t i) const {
    const std::size_t b = block_of(i);
    return (i > 0 && starts_block(i)) ? channels[b - 1] : channels[b];
  }
  std::size_t out_channels(std::size_t i) const { return channels[block_of(i)]; }
  std::size_t resolution(std::size_t i) const { return base_resolution << block_of(i); }
  std::size_t style_dim(std::size_t i) const { return 2 * in_channels(i); }

  /// 0-based index of the first detail layer (layer M).
  std::size_t split_index() const { return split_layer - 1; }
  std::size_t detail_layers() const { return synthesis_layers - split_layer + 1; }
  Shape feature_shape() const {
    const std::size_t i = split_index();
    return {in_channels(i), resolution(i), resolution(i)};
  }
  Shape image_shape() const { return {3, output_resolution, output_resolution}; }

  bool operator==(const GeneratorConfig&) const = default;
};

inline nlohmann::json config_to_json(const GeneratorConfig& c) {
  return {{"latent_dim", c.latent_dim},
          {"mapping_layers", c.mapping_layers},
          {"synthesis_layers", c.synthesis_layers},
          {"split_layer", c.split_layer},
          {"base_resolution", c.base_resolution},
          {"output_resolution", c.output_resolution},
          {"channels", c.channels},
          {"seed", c.seed}};
}

inline GeneratorConfig config_from_json(const nlohmann::json& j) {
  GeneratorConfig c;
  c.latent_dim = j.at("latent_dim").get<std::size_t>();
  c.mapping_layers = j.at("mapping_layers").get<std::size_t>();
  c.synthesis_layers = j.at("synthesis_layers").get<std::size_t>();
  c.split_layer = j.at("split_layer").get<std::size_t>();
  c.base_resolution = j.at("base_resolution").get<std::size_t>();
  c.output_resolution = j.at("output_resolution").get<std::size_t>();
  c.channels = j.at("channels").get<std::vector<std::size_t>>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

/// Ordered parameter declaration (name, shape) for a config.
inline std::vector<std::pair<std::string, Shape>> parameter_layout(const GeneratorConfig& c) {
  std::vector<std::pair<std::string, Shape>> out;
  const std::size_t d = c.latent_dim;
  out.emplace_back("const", Shape{c.channels[0], c.base_resolution, c.base_resolution});
  for (std::size_t l = 0; l < c.mapping_layers; ++l) {
    out.emplace_back("map." + std::to_string(l) + ".weight", Shape{d, d});
    out.emplace_back("map." + std::to_string(l) + ".bias", Shape{d});
  }
  for (std::size_t i = 0; i < c.synthesis_layers; ++i) {
    const std::string p = std::to_string(i);
    out.emplace_back("style." + p + ".weight", Shape{c.style_dim(i), d});
    out.emplace_back("style." + p + ".bias", Shape{c.style_dim(i)});
    out.emplace_back("conv." + p + ".weight", Shape{c.out_channels(i), c.in_channels(i), 3, 3});
    out.emplace_back("conv." + p + ".bias", Shape{c.out_channels(i)});
  }
  out.emplace_back("rgb.weight", Shape{3, c.channels.back(), 1, 1});
  out.emplace_back("rgb.bias", Shape{3});
  return out;
}

/// Mapping network, style affines and synthesis weights. Parameter tensors
/// are immutable and shared between copies; replacing one never touches
/// another bundle.
class GeneratorBundle {
 public:
  GeneratorBundle() = default;

  GeneratorBundle(GeneratorConfig config, std::vector<Tensor> params) : config_(std::move(config)) {
    config_.validate();
    const auto layout = parameter_layout(config_);
    if (layout.size() != params.size()) {
      throw ShapeError("generator: expected " + std::to_string(layout.size()) + " parameters, got " +
                       std::to_string(params.size()));
    }
    for (std::size_t k = 0; k < layout.size(); ++k) {
      if (params[k].shape() != layout[k].second) {
        throw ShapeError("generator: parameter " + layout[k].first + " expected " +
                         shape_str(layout[k].second) + ", got " + shape_str(params[k].shape()));
      }
      index_[layout[k].first] = k;
      names_.push_back(layout[k].first);
      params_.push_back(std::make_shared<const Tensor>(std::move(params[k])));
    }
  }

  const GeneratorConfig& config() const { return config_; }
  std::size_t parameter_count() const { return params_.size(); }
  const std::vector<std::string>& parameter_names() const { return names_; }
  const std::shared_ptr<const Tensor>& parameter(std::size_t k) const { return params_.at(k); }
  const std::shared_ptr<const Tensor>& parameter(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("generator: unknown parameter " + name);
    return params_[it->second];
  }

  void set_parameter(const std::string& name, Tensor value) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("generator: unknown parameter " + name);
    if (value.shape() != params_[it->second]->shape()) {
      throw ShapeError("generator: parameter " + name + " shape mismatch");
    }
    params_[it->second] = std::make_shared<const Tensor>(std::move(value));
  }

  bool same_values(const GeneratorBundle& other) const {
    if (!(config_ == other.config_) || params_.size() != other.params_.size()) return false;
    for (std::size_t k = 0; k < params_.size(); ++k) {
      if (!(*params_[k] == *other.params_[k])) return false;
    }
    return true;
  }

 private:
  GeneratorConfig config_;
  std::vector<std::string> names_;
  std::vector<std::shared_ptr<const Tensor>> params_;
  std::map<std::string, std::size_t> index_;
};

namespace detail {

inline double to_float_precision(double v) { return static_cast<double>(static_cast<float>(v)); }

inline Tensor float_gaussian(Rng& rng, Shape shape, double stddev, double offset = 0.0) {
  Tensor t = gaussian_tensor(rng, std::move(shape), stddev);
  for (double& v : t.data()) v = to_float_precision(v + offset);
  return t;
}

/// gain * Q for the orthogonal factor Q of a Gaussian matrix, with the sign
/// of each column fixed by the diagonal of R.
inline Tensor float_orthogonal(Rng& rng, std::size_t d, double gain) {
  const Tensor g = gaussian_tensor(rng, {d, d});
  const auto n = static_cast<Eigen::Index>(d);
  const Eigen::MatrixXd m = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      g.data().data(), n, n);
  const Eigen::HouseholderQR<Eigen::MatrixXd> qr(m);
  const Eigen::MatrixXd q = qr.householderQ();
  const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  Tensor t(Shape{d, d});
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      const double sign = r(j, j) < 0 ? -1.0 : 1.0;
      t[static_cast<std::size_t>(i * n + j)] = to_float_precision(gain * sign * q(i, j));
    }
  return t;
}

}  // namespace detail

/// Seeded random initialization. Every weight is representable as a 32-bit
/// float, so files round-trip exactly.
inline GeneratorBundle init_generator(const GeneratorConfig& config) {
  config.validate();
  Rng rng(derive_seed(config.seed, 0x5e57));
  const double d = static_cast<double>(config.latent_dim);
  const double leaky_gain = std::sqrt(2.0 / (1.0 + kLeakySlope * kLeakySlope));
  std::vector<Tensor> params;
  for (const auto& [name, shape] : parameter_layout(config)) {
    if (name == "const") {
      params.push_back(detail::float_gaussian(rng, shape, 1.0));
    } else if (name.rfind("map.", 0) == 0) {
      const bool last = name == "map." + std::to_string(config.mapping_layers - 1) + ".weight" ||
                        name == "map." + std::to_string(config.mapping_layers - 1) + ".bias";
      // Orthogonal weights keep the pre-activation covariance well conditioned.
      // The final layer is damped and biased so W concentrates around its mean.
      if (name.ends_with(".weight")) {
        params.push_back(detail::float_orthogonal(rng, config.latent_dim, last ? 0.35 : leaky_gain));
      } else {
        params.push_back(detail::float_gaussian(rng, shape, last ? 0.5 : 0.1));
      }
    } else if (name.rfind("style.", 0) == 0) {
      if (name.ends_with(".weight")) {
        params.push_back(detail::float_gaussian(rng, shape, 1.0 / std::sqrt(d)));
      } else {
        // Scale half starts at 1, bias half at 0.
        Tensor b(shape);
        const std::size_t c = shape[0] / 2;
        for (std::size_t k = 0; k < c; ++k) b[k] = 1.0;
        params.push_back(std::move(b));
      }
    } else if (name.rfind("conv.", 0) == 0) {
      if (name.ends_with(".weight")) {
        const double fan_in = static_cast<double>(shape[1] * shape[2] * shape[3]);
        params.push_back(detail::float_gaussian(rng, shape, leaky_gain / std::sqrt(fan_in)));
      } else {
        params.push_back(detail::float_gaussian(rng, shape, 0.05));
      }
    } else if (name == "rgb.weight") {
      params.push_back(detail::float_gaussian(rng, shape, 1.0 / std::sqrt(static_cast<double>(shape[1]))));
    } else {
      params.push_back(Tensor(shape));
    }
  }
  return GeneratorBundle(config, std::move(params));
}

/// Inserts the generator into a graph. With trainable weights every parameter
/// becomes a named trainable input ("gen.<name>"); otherwise parameters are
/// shared constants.
class GeneratorGraph {
 public:
  GeneratorGraph(ad::Graph& graph, const GeneratorBundle& bundle, bool trainable_weights = false)
      : graph_(&graph), config_(bundle.config()) {
    for (std::size_t k = 0; k < bundle.parameter_count(); ++k) {
      const std::string& name = bundle.parameter_names()[k];
      if (trainable_weights) {
        ad::Var v = graph.input("gen." + name, bundle.parameter(k)->shape(), true);
        graph.bind("gen." + name, bundle.parameter(k));
        vars_[name] = v;
      } else {
        vars_[name] = graph.constant(bundle.parameter(k));
      }
    }
  }

  const GeneratorConfig& config() const { return config_; }
  ad::Graph& graph() { return *graph_; }

  struct MappingNodes {
    ad::Var p;
    ad::Var w;
  };

  MappingNodes mapping(ad::Var z) {
    ad::Graph& g = *graph_;
    if (g.shape(z) != Shape{config_.latent_dim}) {
      throw ShapeError("map: expected z of shape (" + std::to_string(config_.latent_dim) + "), got " +
                       shape_str(g.shape(z)));
    }
    ad::Var h = z;
    for (std::size_t l = 0; l < config_.mapping_layers; ++l) {
      const std::string p = "map." + std::to_string(l);
      h = g.add(g.matmul(var(p + ".weight"), h), var(p + ".bias"));
      if (l + 1 < config_.mapping_layers) h = g.leaky_relu(h, kLeakySlope);
    }
    return {h, g.leaky_relu(h, kLeakySlope)};
  }

  ad::Var style(std::size_t layer, ad::Var w) {
    ad::Graph& g = *graph_;
    const std::string p = "style." + std::to_string(layer);
    return g.add(g.matmul(var(p + ".weight"), w), var(p + ".bias"));
  }

  /// Synthesis from the constant (styles for all N layers) or from a feature
  /// override (styles for layers M..N).
  ad::Var synthesis(std::span<const ad::Var> styles, std::optional<ad::Var> feature = std::nullopt) {
    ad::Graph& g = *graph_;
    const std::size_t start = feature ? config_.split_index() : 0;
    const std::size_t expected = config_.synthesis_layers - start;
    if (styles.size() != expected) {
      throw ShapeError("synthesize: expected " + std::to_string(expected) + " style vectors, got " +
                       std::to_string(styles.size()));
    }
    ad::Var x;
    if (feature) {
      if (g.shape(*feature) != config_.feature_shape()) {
        throw ShapeError("synthesize: feature override shape " + shape_str(g.shape(*feature)) +
                         " vs expected " + shape_str(config_.feature_shape()));
      }
      x = *feature;
    } else {
      x = var("const");
    }
    for (std::size_t i = start; i < config_.synthesis_layers; ++i) {
      const bool skip_upsample = feature && i == start;
      x = layer(i, x, styles[i - start], skip_upsample);
    }
    ad::Var rgb = g.conv2d(x, var("rgb.weight"), var("rgb.bias"));
    return g.sigmoid(rgb);
  }

  /// Feature map entering layer M, computed from styles of layers 1..M-1
  /// (extra trailing styles are ignored).
  ad::Var tap(std::span<const ad::Var> styles) {
    const std::size_t m = config_.split_index();
    if (styles.size() < m) {
      throw ShapeError("tap_feature: need " + std::to_string(m) + " style vectors, got " +
                       std::to_string(styles.size()));
    }
    ad::Var x = var("const");
    for (std::size_t i = 0; i < m; ++i) x = layer(i, x, styles[i], false);
    if (config_.starts_block(m)) x = graph_->upsample2x(x);
    return x;
  }

  ad::Var var(const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw ConfigError("generator graph: unknown parameter " + name);
    return it->second;
  }

 private:
  ad::Var layer(std::size_t i, ad::Var x, ad::Var s, bool skip_upsample) {
    ad::Graph& g = *graph_;
    if (g.shape(s) != Shape{config_.style_dim(i)}) {
      throw ShapeError("synthesize: style " + std::to_string(i + 1) + " expected (" +
                       std::to_string(config_.style_dim(i)) + "), got " + shape_str(g.shape(s)));
    }
    if (config_.starts_block(i) && !skip_upsample) x = g.upsample2x(x);
    const std::string p = "conv." + std::to_string(i);
    x = g.modulate(x, s);
    x = g.conv2d(x, var(p + ".weight"), var(p + ".bias"));
    return g.leaky_relu(x, kLeakySlope);
  }

  ad::Graph* graph_;
  GeneratorConfig config_;
  std::map<std::string, ad::Var> vars_;
};

// ---------------------------------------------------------------------------
// Eager helpers.

struct MapResult {
  Tensor p;
  Tensor w;
};

inline MapResult map_latent(const GeneratorBundle& bundle, const Tensor& z) {
  if (z.shape() != Shape{bundle.config().latent_dim}) {
    throw ShapeError("map: expected z of shape (" + std::to_string(bundle.config().latent_dim) +
                     "), got " + shape_str(z.shape()));
  }
  ad::Graph g;
  GeneratorGraph gen(g, bundle);
  auto nodes = gen.mapping(g.constant(z));
  g.forward();
  return {g.value(nodes.p), g.value(nodes.w)};
}

inline Tensor style_of(const GeneratorBundle& bundle, std::size_t layer, const Tensor& w) {
  ad::Graph g;
  GeneratorGraph gen(g, bundle);
  ad::Var s = gen.style(layer, g.constant(w));
  g.forward();
  return g.value(s);
}

/// Styles of every layer for a single z.
inline std::vector<Tensor> styles_of(const GeneratorBundle& bundle, const Tensor& z) {
  const Tensor w = map_latent(bundle, z).w;
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < bundle.config().synthesis_layers; ++i) out.push_back(style_of(bundle, i, w));
  return out;
}

inline Image synthesize(const GeneratorBundle& bundle, const std::vector<Tensor>& styles,
                        const std::optional<Tensor>& feature_override = std::nullopt) {
  ad::Graph g;
  GeneratorGraph gen(g, bundle);
  std::vector<ad::Var> sv;
  for (const Tensor& s : styles) sv.push_back(g.constant(s));
  std::optional<ad::Var> f;
  if (feature_override) f = g.constant(*feature_override);
  ad::Var img = gen.synthesis(sv, f);
  g.forward();
  return Image(g.value(img));
}

inline Tensor tap_feature(const GeneratorBundle& bundle, const std::vector<Tensor>& styles) {
  ad::Graph g;
  GeneratorGraph gen(g, bundle);
  std::vector<ad::Var> sv;
  for (const Tensor& s : styles) sv.push_back(g.constant(s));
  ad::Var f = gen.tap(sv);
  g.forward();
  return g.value(f);
}

inline Tensor tap_feature(const GeneratorBundle& bundle, const Tensor& z) {
  return tap_feature(bundle, styles_of(bundle, z));
}

/// Plain forward pass G(z).
inline Image generate(const GeneratorBundle& bundle, const Tensor& z) {
  ad::Graph g;
  GeneratorGraph gen(g, bundle);
  auto m = gen.mapping(g.constant(z));
  std::vector<ad::Var> sv;
  for (std::size_t i = 0; i < bundle.config().synthesis_layers; ++i) sv.push_back(gen.style(i, m.w));
  ad::Var img = gen.synthesis(sv);
  g.forward();
  return Image(g.value(img));
}

// ---------------------------------------------------------------------------
// Weights file: "SGZ1", little-endian u32 config fields, u64 seed, u32 array
// count, then float32 arrays in parameter_layout order.

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((v >> (8 * k)) & 0xFF));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int k = 0; k < 8; ++k) out.push_back(static_cast<char>((v >> (8 * k)) & 0xFF));
}
inline void put_f32(std::string& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

class ByteReader {
 public:
  explicit ByteReader(const std::string& bytes) : bytes_(bytes) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + k])) << (8 * k);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    const std::uint64_t lo = u32();
    const std::uint64_t hi = u32();
    return lo | (hi << 32);
  }
  float f32() {
    const std::uint32_t bits = u32();
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }
  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw ConfigError("weights: truncated file");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_weights(const GeneratorBundle& bundle) {
  const GeneratorConfig& c = bundle.config();
  std::string out = "SGZ1";
  detail::put_u32(out, static_cast<std::uint32_t>(c.latent_dim));
  detail::put_u32(out, static_cast<std::uint32_t>(c.mapping_layers));
  detail::put_u32(out, static_cast<std::uint32_t>(c.synthesis_layers));
  detail::put_u32(out, static_cast<std::uint32_t>(c.split_layer));
  detail::put_u32(out, static_cast<std::uint32_t>(c.base_resolution));
  detail::put_u32(out, static_cast<std::uint32_t>(c.output_resolution));
  detail::put_u32(out, static_cast<std::uint32_t>(c.channels.size()));
  for (std::size_t ch : c.channels) detail::put_u32(out, static_cast<std::uint32_t>(ch));
  detail::put_u64(out, c.seed);
  detail::put_u32(out, static_cast<std::uint32_t>(bundle.parameter_count()));
  for (std::size_t k = 0; k < bundle.parameter_count(); ++k) {
    for (double v : bundle.parameter(k)->data()) detail::put_f32(out, static_cast<float>(v));
  }
  return out;
}

inline GeneratorBundle deserialize_weights(const std::string& bytes) {
  detail::ByteReader r(bytes);
  if (r.take(4) != "SGZ1") throw ConfigError("weights: bad magic (expected SGZ1)");
  GeneratorConfig c;
  c.latent_dim = r.u32();
  c.mapping_layers = r.u32();
  c.synthesis_layers = r.u32();
  c.split_layer = r.u32();
  c.base_resolution = r.u32();
  c.output_resolution = r.u32();
  const std::uint32_t blocks = r.u32();
  if (blocks > 16) throw ConfigError("weights: implausible block count");
  c.channels.clear();
  for (std::uint32_t b = 0; b < blocks; ++b) c.channels.push_back(r.u32());
  c.seed = r.u64();
  c.validate();
  const auto layout = parameter_layout(c);
  if (r.u32() != layout.size()) throw ConfigError("weights: parameter count does not match config");
  std::vector<Tensor> params;
  for (const auto& [name, shape] : layout) {
    Tensor t(shape);
    for (double& v : t.data()) v = static_cast<double>(r.f32());
    if (!t.all_finite()) throw NumericalError("weights: non-finite value in " + name);
    params.push_back(std::move(t));
  }
  if (!r.done()) throw ConfigError("weights: trailing bytes");
  return GeneratorBundle(c, std::move(params));
}

inline void save_weights(const std::string& path, const GeneratorBundle& bundle) {
  write_file(path, serialize_weights(bundle));
  write_file(path + ".json", config_to_json(bundle.config()).dump(2) + "\n");
}

inline GeneratorBundle load_weights(const std::string& path) { return deserialize_weights(read_file(path)); }

}  // namespace latent_atlas
