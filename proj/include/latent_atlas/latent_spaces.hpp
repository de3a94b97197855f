#pragma once

// Latent spaces of the generator and the sphere retraction.
//
// Sphere-constrained vectors (Z, Z+ and the detail codes of F/Z+) live on the
// hypersphere of radius sqrt(d).

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "latent_atlas/generator.hpp"
#include "latent_atlas/random.hpp"

namespace latent_atlas {

/// Shape of a code: which vectors it carries and how they feed the generator.
enum class CodeKind { kZ, kZPlus, kW, kWPlus, kS, kFW, kFS, kFZ };

/// Spaces an inversion can run in. kPN is W+ with the P_N regularizer on.
enum class SpaceTag { kZ, kZPlus, kW, kWPlus, kS, kPN, kFW, kFS, kFZ };

inline constexpr std::array<SpaceTag, 9> kAllSpaces = {SpaceTag::kZ,  SpaceTag::kZPlus, SpaceTag::kW,
                                                       SpaceTag::kWPlus, SpaceTag::kS, SpaceTag::kPN,
                                                       SpaceTag::kFW, SpaceTag::kFS, SpaceTag::kFZ};

inline CodeKind code_kind(SpaceTag t) {
  switch (t) {
    case SpaceTag::kZ: return CodeKind::kZ;
    case SpaceTag::kZPlus: return CodeKind::kZPlus;
    case SpaceTag::kW: return CodeKind::kW;
    case SpaceTag::kWPlus: return CodeKind::kWPlus;
    case SpaceTag::kS: return CodeKind::kS;
    case SpaceTag::kPN: return CodeKind::kWPlus;
    case SpaceTag::kFW: return CodeKind::kFW;
    case SpaceTag::kFS: return CodeKind::kFS;
    case SpaceTag::kFZ: return CodeKind::kFZ;
  }
  return CodeKind::kZ;
}

/// Human-readable names, also used in CSV output.
inline std::string display_name(SpaceTag t) {
  switch (t) {
    case SpaceTag::kZ: return "Z";
    case SpaceTag::kZPlus: return "Z+";
    case SpaceTag::kW: return "W";
    case SpaceTag::kWPlus: return "W+";
    case SpaceTag::kS: return "S";
    case SpaceTag::kPN: return "W+(P_N)";
    case SpaceTag::kFW: return "F/W+";
    case SpaceTag::kFS: return "F/S";
    case SpaceTag::kFZ: return "F/Z+";
  }
  return "?";
}

/// Short tokens used on the command line and in JSON.
inline std::string space_token(SpaceTag t) {
  switch (t) {
    case SpaceTag::kZ: return "z";
    case SpaceTag::kZPlus: return "zplus";
    case SpaceTag::kW: return "w";
    case SpaceTag::kWPlus: return "wplus";
    case SpaceTag::kS: return "s";
    case SpaceTag::kPN: return "pn";
    case SpaceTag::kFW: return "fw";
    case SpaceTag::kFS: return "fs";
    case SpaceTag::kFZ: return "fz";
  }
  return "?";
}

inline SpaceTag parse_space(const std::string& s) {
  for (SpaceTag t : kAllSpaces) {
    if (s == space_token(t) || s == display_name(t)) return t;
  }
  throw ConfigError("unknown space '" + s + "' (expected z, zplus, w, wplus, s, pn, fw, fs, fz)");
}

inline std::string kind_token(CodeKind k) {
  switch (k) {
    case CodeKind::kZ: return "z";
    case CodeKind::kZPlus: return "zplus";
    case CodeKind::kW: return "w";
    case CodeKind::kWPlus: return "wplus";
    case CodeKind::kS: return "s";
    case CodeKind::kFW: return "fw";
    case CodeKind::kFS: return "fs";
    case CodeKind::kFZ: return "fz";
  }
  return "?";
}

inline CodeKind parse_kind(const std::string& s) {
  for (CodeKind k : {CodeKind::kZ, CodeKind::kZPlus, CodeKind::kW, CodeKind::kWPlus, CodeKind::kS, CodeKind::kFW,
                     CodeKind::kFS, CodeKind::kFZ}) {
    if (s == kind_token(k)) return k;
  }
  throw ConfigError("unknown code kind '" + s + "'");
}

inline bool is_sphere_kind(CodeKind k) { return k == CodeKind::kZ || k == CodeKind::kZPlus || k == CodeKind::kFZ; }
inline bool is_w_kind(CodeKind k) { return k == CodeKind::kW || k == CodeKind::kWPlus || k == CodeKind::kFW; }
inline bool is_s_kind(CodeKind k) { return k == CodeKind::kS || k == CodeKind::kFS; }
inline bool has_feature(CodeKind k) { return k == CodeKind::kFW || k == CodeKind::kFS || k == CodeKind::kFZ; }
inline bool is_single_vector(CodeKind k) { return k == CodeKind::kZ || k == CodeKind::kW; }

/// Dimensions of the generator a code belongs to.
struct CodeDims {
  std::size_t latent_dim = 0;
  std::size_t layers = 0;       // N
  std::size_t split_layer = 0;  // M (1-based)
  Shape feature_shape;
  std::vector<std::size_t> style_dims;  // per layer, all N

  static CodeDims of(const GeneratorConfig& c) {
    CodeDims d;
    d.latent_dim = c.latent_dim;
    d.layers = c.synthesis_layers;
    d.split_layer = c.split_layer;
    d.feature_shape = c.feature_shape();
    for (std::size_t i = 0; i < c.synthesis_layers; ++i) d.style_dims.push_back(c.style_dim(i));
    return d;
  }

  bool operator==(const CodeDims&) const = default;
};

/// First synthesis layer (0-based) fed by the code's vectors.
inline std::size_t first_layer(CodeKind k, const CodeDims& d) { return has_feature(k) ? d.split_layer - 1 : 0; }

inline std::size_t vector_count(CodeKind k, const CodeDims& d) {
  if (is_single_vector(k)) return 1;
  return d.layers - first_layer(k, d);
}

/// Synthesis layer (0-based) that vector j feeds; single-vector codes feed all.
inline std::size_t layer_of_vector(CodeKind k, const CodeDims& d, std::size_t j) { return first_layer(k, d) + j; }

inline std::size_t vector_dim(CodeKind k, const CodeDims& d, std::size_t j) {
  return is_s_kind(k) ? d.style_dims.at(layer_of_vector(k, d, j)) : d.latent_dim;
}

/// Tagged latent code. `vectors` holds the per-layer vectors (one for Z/W),
/// `feature` the base code f for F variants.
struct LatentCode {
  CodeKind kind = CodeKind::kZ;
  CodeDims dims;
  std::optional<Tensor> feature;
  std::vector<Tensor> vectors;

  void validate() const {
    const std::size_t n = vector_count(kind, dims);
    if (vectors.size() != n) {
      throw ShapeError("latent code " + kind_token(kind) + ": expected " + std::to_string(n) + " vectors, got " +
                       std::to_string(vectors.size()));
    }
    for (std::size_t j = 0; j < n; ++j) {
      if (vectors[j].shape() != Shape{vector_dim(kind, dims, j)}) {
        throw ShapeError("latent code " + kind_token(kind) + ": vector " + std::to_string(j) + " has shape " +
                         shape_str(vectors[j].shape()));
      }
    }
    if (has_feature(kind) != feature.has_value()) {
      throw ShapeError("latent code " + kind_token(kind) + ": feature presence mismatch");
    }
    if (feature && feature->shape() != dims.feature_shape) {
      throw ShapeError("latent code: feature shape " + shape_str(feature->shape()) + " vs " +
                       shape_str(dims.feature_shape));
    }
  }

  bool operator==(const LatentCode&) const = default;
};

// ---------------------------------------------------------------------------
// Retraction onto the sphere of radius sqrt(d).

inline Tensor retract(const Tensor& v) {
  const double n = v.norm();
  if (n == 0.0) throw NumericalError("retraction undefined at origin");
  if (!std::isfinite(n)) throw NumericalError("retraction: non-finite vector");
  const double r = std::sqrt(static_cast<double>(v.size()));
  Tensor out = v;
  for (double& x : out.data()) x = r * (x / n);
  return out;
}

inline void retract_code(LatentCode& code) {
  if (!is_sphere_kind(code.kind)) return;
  for (Tensor& v : code.vectors) v = retract(v);
}

/// Largest | |v| - sqrt(d) | over the sphere-constrained vectors.
inline double sphere_deviation(const LatentCode& code) {
  if (!is_sphere_kind(code.kind)) return 0.0;
  double m = 0.0;
  for (const Tensor& v : code.vectors) m = std::max(m, std::abs(v.norm() - std::sqrt(static_cast<double>(v.size()))));
  return m;
}

inline Tensor sample_sphere(Rng& rng, std::size_t d) { return retract(gaussian_tensor(rng, {d})); }

// ---------------------------------------------------------------------------
// Graph construction for codes.

/// Code vectors as graph nodes.
struct CodeNodes {
  std::optional<ad::Var> feature;
  std::vector<ad::Var> vectors;
};

/// Builds the image node of a code; optionally collects the mapping
/// pre-activations p (Z-type) and the W vectors (W-type) per code vector.
inline ad::Var build_code_image(GeneratorGraph& gen, CodeKind kind, const CodeDims& dims, const CodeNodes& nodes,
                                std::vector<ad::Var>* w_out = nullptr) {
  const std::size_t first = first_layer(kind, dims);
  std::vector<ad::Var> styles;
  auto w_to_styles = [&](const std::vector<ad::Var>& ws) {
    if (is_single_vector(kind)) {
      for (std::size_t i = first; i < dims.layers; ++i) styles.push_back(gen.style(i, ws[0]));
    } else {
      for (std::size_t j = 0; j < ws.size(); ++j) styles.push_back(gen.style(first + j, ws[j]));
    }
  };
  std::vector<ad::Var> ws;
  switch (kind) {
    case CodeKind::kZ:
    case CodeKind::kZPlus:
    case CodeKind::kFZ:
      for (ad::Var z : nodes.vectors) ws.push_back(gen.mapping(z).w);
      w_to_styles(ws);
      break;
    case CodeKind::kW:
    case CodeKind::kWPlus:
    case CodeKind::kFW:
      ws = nodes.vectors;
      w_to_styles(ws);
      break;
    case CodeKind::kS:
    case CodeKind::kFS:
      styles = nodes.vectors;
      break;
  }
  if (w_out) *w_out = ws;
  return gen.synthesis(styles, has_feature(kind) ? nodes.feature : std::nullopt);
}

/// Constant nodes for every tensor of a code.
inline CodeNodes constant_nodes(ad::Graph& g, const LatentCode& code) {
  CodeNodes n;
  if (code.feature) n.feature = g.constant(*code.feature);
  for (const Tensor& v : code.vectors) n.vectors.push_back(g.constant(v));
  return n;
}

inline Image render(const GeneratorBundle& bundle, const LatentCode& code) {
  code.validate();
  if (!(code.dims == CodeDims::of(bundle.config()))) throw ShapeError("render: code dims do not match generator");
  ad::Graph g;
  GeneratorGraph gen(g, bundle);
  ad::Var img = build_code_image(gen, code.kind, code.dims, constant_nodes(g, code));
  g.forward();
  return Image(g.value(img));
}

// ---------------------------------------------------------------------------
// Sampling.

/// Z-type: normalized Gaussians. W+: independent z per layer. S: affines of a
/// single mapped z. F variants cannot be sampled.
inline std::vector<LatentCode> sample_codes(const GeneratorBundle& bundle, SpaceTag space, std::size_t count,
                                            std::uint64_t seed) {
  const CodeKind kind = code_kind(space);
  if (has_feature(kind)) throw ConfigError("sample: F-space codes are not sampled (f comes from targets)");
  const GeneratorConfig& cfg = bundle.config();
  const CodeDims dims = CodeDims::of(cfg);
  Rng rng(derive_seed(seed, 0x5a3b));
  std::vector<LatentCode> out;
  for (std::size_t k = 0; k < count; ++k) {
    LatentCode c;
    c.kind = kind;
    c.dims = dims;
    const std::size_t n = vector_count(kind, dims);
    switch (kind) {
      case CodeKind::kZ:
      case CodeKind::kZPlus:
        for (std::size_t j = 0; j < n; ++j) c.vectors.push_back(sample_sphere(rng, cfg.latent_dim));
        break;
      case CodeKind::kW:
      case CodeKind::kWPlus:
        for (std::size_t j = 0; j < n; ++j) c.vectors.push_back(map_latent(bundle, sample_sphere(rng, cfg.latent_dim)).w);
        break;
      case CodeKind::kS: {
        const Tensor w = map_latent(bundle, sample_sphere(rng, cfg.latent_dim)).w;
        for (std::size_t i = 0; i < cfg.synthesis_layers; ++i) c.vectors.push_back(style_of(bundle, i, w));
        break;
      }
      default:
        break;
    }
    out.push_back(std::move(c));
  }
  return out;
}

inline LatentCode make_z_code(const GeneratorConfig& cfg, Tensor z) {
  LatentCode c;
  c.kind = CodeKind::kZ;
  c.dims = CodeDims::of(cfg);
  c.vectors.push_back(retract(z));
  c.validate();
  return c;
}

inline LatentCode make_w_code(const GeneratorConfig& cfg, Tensor w) {
  LatentCode c;
  c.kind = CodeKind::kW;
  c.dims = CodeDims::of(cfg);
  c.vectors.push_back(std::move(w));
  c.validate();
  return c;
}

/// Mean of n mapped sphere samples.
inline Tensor mean_w(const GeneratorBundle& bundle, std::size_t n, std::uint64_t seed) {
  const std::size_t d = bundle.config().latent_dim;
  Rng rng(derive_seed(seed, 0x3ea9));
  ad::Graph g;
  GeneratorGraph gen(g, bundle);
  g.input("z", {d});
  auto m = gen.mapping(g.input_var("z"));
  g.set_output(m.w);
  std::vector<double> acc(d, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    g.bind("z", sample_sphere(rng, d));
    const Tensor& w = g.forward();
    for (std::size_t j = 0; j < d; ++j) acc[j] += w[j];
  }
  for (double& v : acc) v /= static_cast<double>(n);
  return Tensor::vector(std::move(acc));
}

// ---------------------------------------------------------------------------
// Lifting along Z -> Z+ -> F/Z+, W -> W+ -> F/W+, W+ -> S -> F/S.

inline bool can_lift(CodeKind from, CodeKind to) {
  if (from == to) return true;
  switch (from) {
    case CodeKind::kZ: return to == CodeKind::kZPlus || to == CodeKind::kFZ;
    case CodeKind::kZPlus: return to == CodeKind::kFZ;
    case CodeKind::kW: return to == CodeKind::kWPlus || to == CodeKind::kFW || to == CodeKind::kS || to == CodeKind::kFS;
    case CodeKind::kWPlus: return to == CodeKind::kFW || to == CodeKind::kS || to == CodeKind::kFS;
    case CodeKind::kS: return to == CodeKind::kFS;
    default: return false;
  }
}

/// Image-preserving embedding of a code into a larger space.
inline LatentCode lift(const LatentCode& code, CodeKind target, const GeneratorBundle& bundle) {
  code.validate();
  if (!can_lift(code.kind, target)) {
    throw ConfigError("lift " + kind_token(code.kind) + " -> " + kind_token(target) + ": no inverse mapping");
  }
  if (code.kind == target) return code;
  const GeneratorConfig& cfg = bundle.config();
  const std::size_t n = cfg.synthesis_layers;
  const std::size_t m = cfg.split_index();

  // Per-layer vectors in the target's family (z, w or s), all N layers.
  std::vector<Tensor> per_layer;
  auto replicate = [&](const Tensor& v) { per_layer.assign(n, v); };
  if (code.kind == CodeKind::kZ || code.kind == CodeKind::kW) {
    replicate(code.vectors[0]);
  } else {
    per_layer = code.vectors;
  }
  const bool to_s = is_s_kind(target) && !is_s_kind(code.kind);
  if (to_s) {
    for (std::size_t i = 0; i < n; ++i) per_layer[i] = style_of(bundle, i, per_layer[i]);
  }

  LatentCode out;
  out.kind = target;
  out.dims = code.dims;
  if (has_feature(target)) {
    // f is the tap of the code's own forward pass.
    std::vector<Tensor> styles;
    for (std::size_t i = 0; i < m; ++i) {
      if (is_s_kind(target)) {
        styles.push_back(per_layer[i]);
      } else if (is_w_kind(target)) {
        styles.push_back(style_of(bundle, i, per_layer[i]));
      } else {
        styles.push_back(style_of(bundle, i, map_latent(bundle, per_layer[i]).w));
      }
    }
    out.feature = tap_feature(bundle, styles);
    out.vectors.assign(per_layer.begin() + static_cast<std::ptrdiff_t>(m), per_layer.end());
  } else {
    out.vectors = per_layer;
  }
  out.validate();
  return out;
}

// ---------------------------------------------------------------------------
// P_N: whitened view of the mapping network's final pre-activation.

struct PnModel {
  Tensor mean;       // (d)
  Tensor whitening;  // (d, d), rows are scaled eigenvectors
  std::size_t samples = 0;
  double eigen_floor = 1e-6;

  bool operator==(const PnModel&) const = default;
};

inline PnModel fit_pn(const GeneratorBundle& bundle, std::size_t n_samples, std::uint64_t seed) {
  const std::size_t d = bundle.config().latent_dim;
  if (n_samples < 10 * d) {
    throw ConfigError("fit_pn: need at least 10*d = " + std::to_string(10 * d) + " samples, got " +
                      std::to_string(n_samples));
  }
  Rng rng(derive_seed(seed, 0x9e11));
  ad::Graph g;
  GeneratorGraph gen(g, bundle);
  g.input("z", {d});
  auto m = gen.mapping(g.input_var("z"));
  g.set_output(m.p);
  Eigen::MatrixXd samples(static_cast<Eigen::Index>(n_samples), static_cast<Eigen::Index>(d));
  for (std::size_t k = 0; k < n_samples; ++k) {
    g.bind("z", sample_sphere(rng, d));
    const Tensor& p = g.forward();
    for (std::size_t j = 0; j < d; ++j) samples(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) = p[j];
  }
  const Eigen::VectorXd mu = samples.colwise().mean();
  const Eigen::MatrixXd centered = samples.rowwise() - mu.transpose();
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n_samples - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  PnModel model;
  model.samples = n_samples;
  model.mean = Tensor(Shape{d});
  model.whitening = Tensor(Shape{d, d});
  for (std::size_t j = 0; j < d; ++j) model.mean[j] = mu(static_cast<Eigen::Index>(j));
  for (std::size_t r = 0; r < d; ++r) {
    const auto ri = static_cast<Eigen::Index>(r);
    const double scale = 1.0 / std::sqrt(std::max(eig.eigenvalues()(ri), model.eigen_floor));
    for (std::size_t c = 0; c < d; ++c) {
      model.whitening[r * d + c] = scale * eig.eigenvectors()(static_cast<Eigen::Index>(c), ri);
    }
  }
  return model;
}

/// ||Lambda (p - mu)||_2.
inline double pn_distance(const PnModel& model, const Tensor& p) {
  const std::size_t d = model.mean.size();
  if (p.size() != d) throw ShapeError("pn_distance: expected (" + std::to_string(d) + "), got " + shape_str(p.shape()));
  double s = 0.0;
  for (std::size_t r = 0; r < d; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < d; ++c) acc += model.whitening[r * d + c] * (p[c] - model.mean[c]);
    s += acc * acc;
  }
  return std::sqrt(s);
}

/// Pre-activation recovered from a W vector (leaky-relu is invertible).
inline Tensor deactivate(const Tensor& w) {
  Tensor p = w;
  for (double& v : p.data()) v = v >= 0.0 ? v : v / kLeakySlope;
  return p;
}

/// Squared P_N distance of a W node, built in a graph.
inline ad::Var pn_squared_distance(ad::Graph& g, const PnModel& model, ad::Var w) {
  ad::Var p = g.leaky_relu(w, 1.0 / kLeakySlope);
  ad::Var centered = g.sub(p, g.constant(model.mean));
  ad::Var white = g.matmul(g.constant(model.whitening), centered);
  return g.sum(g.mul(white, white));
}

/// Sum of per-layer P_N distances for W-type codes; the P_N+ score.
inline double pn_score(const PnModel& model, const LatentCode& code) {
  if (!is_w_kind(code.kind)) throw ConfigError("pn_score: code is not W-type");
  double s = 0.0;
  for (const Tensor& w : code.vectors) s += pn_distance(model, deactivate(w));
  return s;
}

// ---------------------------------------------------------------------------
// Serialization: little-endian float32 payloads in base64.

namespace detail {

inline constexpr char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

inline std::string base64_encode(const std::string& in) {
  std::string out;
  std::size_t i = 0;
  for (; i + 2 < in.size(); i += 3) {
    const std::uint32_t v = (static_cast<unsigned char>(in[i]) << 16) | (static_cast<unsigned char>(in[i + 1]) << 8) |
                            static_cast<unsigned char>(in[i + 2]);
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += kB64[(v >> 6) & 63];
    out += kB64[v & 63];
  }
  if (i + 1 == in.size()) {
    const std::uint32_t v = static_cast<unsigned char>(in[i]) << 16;
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += "==";
  } else if (i + 2 == in.size()) {
    const std::uint32_t v = (static_cast<unsigned char>(in[i]) << 16) | (static_cast<unsigned char>(in[i + 1]) << 8);
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += kB64[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

inline std::string base64_decode(const std::string& in) {
  auto val = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  if (in.size() % 4) throw ConfigError("base64: length not a multiple of 4");
  std::string out;
  for (std::size_t i = 0; i < in.size(); i += 4) {
    int v[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      if (in[i + k] == '=') {
        v[k] = 0;
        ++pad;
      } else {
        v[k] = val(in[i + k]);
        if (v[k] < 0 || pad) throw ConfigError("base64: invalid character");
      }
    }
    const std::uint32_t x = (v[0] << 18) | (v[1] << 12) | (v[2] << 6) | v[3];
    out += static_cast<char>((x >> 16) & 0xFF);
    if (pad < 2) out += static_cast<char>((x >> 8) & 0xFF);
    if (pad < 1) out += static_cast<char>(x & 0xFF);
  }
  return out;
}

}  // namespace detail

inline std::string encode_f32(const Tensor& t) {
  std::string raw;
  raw.reserve(4 * t.size());
  for (double v : t.data()) detail::put_f32(raw, static_cast<float>(v));
  return detail::base64_encode(raw);
}

inline Tensor decode_f32(const std::string& b64, Shape shape) {
  const std::string raw = detail::base64_decode(b64);
  const std::size_t n = shape_size(shape);
  if (raw.size() != 4 * n) throw ConfigError("payload: expected " + std::to_string(n) + " float32 values");
  detail::ByteReader r(raw);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = static_cast<double>(r.f32());
  if (!t.all_finite()) throw NumericalError("payload: non-finite value");
  return t;
}

inline nlohmann::json dims_to_json(const CodeDims& d) {
  return {{"latent_dim", d.latent_dim},
          {"layers", d.layers},
          {"split_layer", d.split_layer},
          {"feature_shape", d.feature_shape},
          {"style_dims", d.style_dims}};
}

inline CodeDims dims_from_json(const nlohmann::json& j) {
  CodeDims d;
  d.latent_dim = j.at("latent_dim").get<std::size_t>();
  d.layers = j.at("layers").get<std::size_t>();
  d.split_layer = j.at("split_layer").get<std::size_t>();
  d.feature_shape = j.at("feature_shape").get<Shape>();
  d.style_dims = j.at("style_dims").get<std::vector<std::size_t>>();
  return d;
}

inline nlohmann::json code_to_json(const LatentCode& code) {
  nlohmann::json j;
  j["space"] = kind_token(code.kind);
  j["dims"] = dims_to_json(code.dims);
  j["feature"] = code.feature ? nlohmann::json(encode_f32(*code.feature)) : nlohmann::json(nullptr);
  nlohmann::json vs = nlohmann::json::array();
  for (const Tensor& v : code.vectors) vs.push_back(encode_f32(v));
  j["vectors"] = vs;
  return j;
}

/// Loads exactly the stored float32 values (no retraction on load).
inline LatentCode code_from_json(const nlohmann::json& j) {
  LatentCode c;
  c.kind = parse_kind(j.at("space").get<std::string>());
  c.dims = dims_from_json(j.at("dims"));
  if (!j.at("feature").is_null()) c.feature = decode_f32(j.at("feature").get<std::string>(), c.dims.feature_shape);
  const auto& vs = j.at("vectors");
  for (std::size_t k = 0; k < vs.size(); ++k) {
    c.vectors.push_back(decode_f32(vs[k].get<std::string>(), Shape{vector_dim(c.kind, c.dims, k)}));
  }
  c.validate();
  return c;
}

/// Rounds every value to float32, the precision of the serialized form.
inline LatentCode round_to_f32(LatentCode c) {
  auto r = [](Tensor& t) {
    for (double& v : t.data()) v = static_cast<double>(static_cast<float>(v));
  };
  if (c.feature) r(*c.feature);
  for (Tensor& v : c.vectors) r(v);
  return c;
}

}  // namespace latent_atlas
