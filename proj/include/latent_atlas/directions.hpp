#pragma once

// Editing directions (principal components, attribute boundaries, random
// baselines) and edits along them.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "latent_atlas/latent_spaces.hpp"
#include "latent_atlas/parallel.hpp"

namespace latent_atlas {

enum class DirectionSource { kPca, kBoundary, kRandom };

inline std::string source_token(DirectionSource s) {
  switch (s) {
    case DirectionSource::kPca: return "pca";
    case DirectionSource::kBoundary: return "boundary";
    case DirectionSource::kRandom: return "random";
  }
  return "?";
}

inline DirectionSource parse_source(const std::string& s) {
  for (DirectionSource d : {DirectionSource::kPca, DirectionSource::kBoundary, DirectionSource::kRandom}) {
    if (source_token(d) == s) return d;
  }
  throw ConfigError("unknown direction source '" + s + "'");
}

/// Half-open range [first, last) of 0-based synthesis layers.
struct LayerRange {
  std::size_t first = 0;
  std::size_t last = 0;
  bool contains(std::size_t i) const { return i >= first && i < last; }
  bool operator==(const LayerRange&) const = default;
};

/// Layers M..N (1-based), the detail layers exposed by F-space codes.
inline LayerRange default_edit_range(const CodeDims& dims) { return {dims.split_layer - 1, dims.layers}; }

struct Direction {
  SpaceTag space = SpaceTag::kW;  // kZ or kW
  Tensor vector;                  // unit norm
  std::optional<LayerRange> layers;  // unset: default_edit_range
  DirectionSource source = DirectionSource::kRandom;
  std::map<std::string, double> metadata;

  void validate() const {
    if (space != SpaceTag::kZ && space != SpaceTag::kW) throw ConfigError("direction: space must be Z or W");
    if (vector.rank() != 1) throw ShapeError("direction: vector must be rank 1");
    if (std::abs(vector.norm() - 1.0) > 1e-9) throw NumericalError("direction: vector is not unit norm");
    if (layers && layers->first >= layers->last) throw ConfigError("direction: empty layer range");
  }
};

inline Tensor unit(Tensor v) {
  const double n = v.norm();
  if (n == 0.0 || !std::isfinite(n)) throw NumericalError("direction: cannot normalize a zero vector");
  for (double& x : v.data()) x /= n;
  return v;
}

/// Flips sign so the largest-magnitude entry is positive (first one on ties).
inline void canonical_sign(Tensor& v) {
  std::size_t arg = 0;
  for (std::size_t j = 1; j < v.size(); ++j) {
    if (std::abs(v[j]) > std::abs(v[arg])) arg = j;
  }
  if (v[arg] < 0.0) {
    for (double& x : v.data()) x = -x;
  }
}

inline Direction random_direction(SpaceTag space, std::size_t dim, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0xd1e0));
  Direction d{space, unit(gaussian_tensor(rng, {dim})), std::nullopt, DirectionSource::kRandom, {}};
  d.validate();
  return d;
}

// ---------------------------------------------------------------------------
// Principal components.

/// n mapped sphere samples as rows.
inline Eigen::MatrixXd sample_w_matrix(const GeneratorBundle& bundle, std::size_t n, std::uint64_t seed) {
  const std::size_t d = bundle.config().latent_dim;
  Rng rng(derive_seed(seed, 0x9ca0));
  ad::Graph g;
  GeneratorGraph gen(g, bundle);
  g.input("z", {d});
  g.set_output(gen.mapping(g.input_var("z")).w);
  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (std::size_t k = 0; k < n; ++k) {
    g.bind("z", sample_sphere(rng, d));
    const Tensor& w = g.forward();
    for (std::size_t j = 0; j < d; ++j) x(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) = w[j];
  }
  return x;
}

/// Sample covariance (divisor n - 1).
inline Eigen::MatrixXd sample_covariance(const Eigen::MatrixXd& rows) {
  const Eigen::RowVectorXd mu = rows.colwise().mean();
  const Eigen::MatrixXd c = rows.rowwise() - mu;
  return c.transpose() * c / static_cast<double>(rows.rows() - 1);
}

/// Top-k components of the rows' covariance, by descending variance.
inline std::vector<Direction> pca_of_samples(const Eigen::MatrixXd& rows, std::size_t k, SpaceTag space = SpaceTag::kW) {
  const auto d = static_cast<std::size_t>(rows.cols());
  if (k > d) throw ConfigError("pca: k = " + std::to_string(k) + " exceeds dimension " + std::to_string(d));
  if (rows.rows() < 2) throw ConfigError("pca: need at least two samples");
  const Eigen::MatrixXd cov = sample_covariance(rows);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw NumericalError("pca: eigendecomposition failed");
  const double total = cov.trace();
  std::vector<Direction> out;
  for (std::size_t r = 0; r < k; ++r) {
    const auto col = static_cast<Eigen::Index>(d - 1 - r);
    Tensor v(Shape{d});
    for (std::size_t j = 0; j < d; ++j) v[j] = eig.eigenvectors()(static_cast<Eigen::Index>(j), col);
    v = unit(std::move(v));
    canonical_sign(v);
    const double lambda = eig.eigenvalues()(col);
    out.push_back({space, std::move(v), std::nullopt, DirectionSource::kPca,
                   {{"explained_variance", lambda}, {"explained_ratio", total > 0 ? lambda / total : 0.0}}});
  }
  return out;
}

inline std::vector<Direction> pca_directions(const GeneratorBundle& bundle, std::size_t n_samples, std::size_t k,
                                             std::uint64_t seed) {
  const std::size_t d = bundle.config().latent_dim;
  if (k > d) throw ConfigError("pca: k = " + std::to_string(k) + " exceeds dimension " + std::to_string(d));
  if (n_samples < 10 * d) throw ConfigError("pca: need at least 10*d samples");
  return pca_of_samples(sample_w_matrix(bundle, n_samples, seed), k);
}

// ---------------------------------------------------------------------------
// Attribute boundaries.

/// Deterministic image labeler: +1 iff statistic(image) > threshold.
struct AttributeOracle {
  std::string name;
  std::function<double(const Image&)> statistic;
  double threshold = 0.0;

  int operator()(const Image& img) const { return statistic(img) > threshold ? 1 : -1; }
};

namespace oracle_stats {

inline double region_mean(const Image& img, std::size_t y0, std::size_t y1, std::size_t x0, std::size_t x1,
                          std::size_t c0 = 0, std::size_t c1 = 3) {
  double s = 0.0;
  for (std::size_t c = c0; c < c1; ++c) {
    for (std::size_t y = y0; y < y1; ++y) {
      for (std::size_t x = x0; x < x1; ++x) s += img.at(c, y, x);
    }
  }
  return s / static_cast<double>((c1 - c0) * (y1 - y0) * (x1 - x0));
}

inline double top_brightness(const Image& img) { return region_mean(img, 0, img.height() / 2, 0, img.width()); }

inline double left_right_asymmetry(const Image& img) {
  const std::size_t h = img.height(), w = img.width();
  return region_mean(img, 0, h, 0, w / 2) - region_mean(img, 0, h, w - w / 2, w);
}

inline double red_dominance(const Image& img) {
  const std::size_t h = img.height(), w = img.width();
  return region_mean(img, 0, h, 0, w, 0, 1) - 0.5 * (region_mean(img, 0, h, 0, w, 1, 2) + region_mean(img, 0, h, 0, w, 2, 3));
}

}  // namespace oracle_stats

inline std::vector<std::string> oracle_names() { return {"brightness", "asymmetry", "redness"}; }

/// Builds a named oracle whose threshold is the median statistic of
/// `calibration` seeded generator samples.
inline AttributeOracle make_oracle(const std::string& name, const GeneratorBundle& bundle,
                                   std::size_t calibration = 201, std::uint64_t seed = 0) {
  AttributeOracle o;
  o.name = name;
  if (name == "brightness") {
    o.statistic = oracle_stats::top_brightness;
  } else if (name == "asymmetry") {
    o.statistic = oracle_stats::left_right_asymmetry;
  } else if (name == "redness") {
    o.statistic = oracle_stats::red_dominance;
  } else {
    throw ConfigError("unknown attribute oracle '" + name + "'");
  }
  if (calibration == 0) throw ConfigError("oracle: calibration sample count must be positive");
  Rng rng(derive_seed(seed, 0x0ac1));
  std::vector<double> stats;
  for (std::size_t k = 0; k < calibration; ++k) {
    stats.push_back(o.statistic(generate(bundle, sample_sphere(rng, bundle.config().latent_dim))));
  }
  std::nth_element(stats.begin(), stats.begin() + static_cast<std::ptrdiff_t>(stats.size() / 2), stats.end());
  o.threshold = stats[stats.size() / 2];
  return o;
}

struct BoundaryFit {
  Tensor normal;  // unit
  double bias = 0.0;  // of the unnormalized hyperplane
  double train_accuracy = 0.0;
  double holdout_accuracy = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
};

/// L2-regularized logistic regression by Newton's method on the first 80% of
/// a seeded shuffle; accuracy measured on the remaining 20%.
inline BoundaryFit fit_boundary(const Eigen::MatrixXd& x, const std::vector<int>& labels, std::uint64_t seed,
                                double l2 = 1e-3, std::size_t max_iterations = 100) {
  const auto n = static_cast<std::size_t>(x.rows());
  const auto d = static_cast<Eigen::Index>(x.cols());
  if (labels.size() != n) throw ShapeError("boundary: label count does not match samples");
  const std::size_t pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  if (pos + static_cast<std::size_t>(std::count(labels.begin(), labels.end(), -1)) != n) {
    throw ConfigError("boundary: labels must be +1 or -1");
  }
  if (10 * pos < n || 10 * (n - pos) < n) throw ConfigError("degenerate attribute");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, 0xb0d7));
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t n_train = std::max<std::size_t>(1, n * 4 / 5);

  // Augmented parameters theta = (w, b); the intercept is not penalized.
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(d + 1);
  BoundaryFit fit;
  for (; fit.iterations < max_iterations; ++fit.iterations) {
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(d + 1);
    Eigen::MatrixXd hess = Eigen::MatrixXd::Zero(d + 1, d + 1);
    Eigen::VectorXd xi(d + 1);
    for (std::size_t t = 0; t < n_train; ++t) {
      const std::size_t i = order[t];
      xi.head(d) = x.row(static_cast<Eigen::Index>(i)).transpose();
      xi(d) = 1.0;
      const double y = labels[i];
      const double m = y * theta.dot(xi);
      const double sig = 1.0 / (1.0 + std::exp(m));  // sigmoid(-m)
      grad -= (y * sig) * xi;
      hess.selfadjointView<Eigen::Lower>().rankUpdate(xi, sig * (1.0 - sig));
    }
    hess = hess.selfadjointView<Eigen::Lower>();
    grad /= static_cast<double>(n_train);
    hess /= static_cast<double>(n_train);
    grad.head(d) += l2 * theta.head(d);
    hess.diagonal().head(d).array() += l2;
    const Eigen::VectorXd step = hess.ldlt().solve(grad);
    theta -= step;
    if (step.lpNorm<Eigen::Infinity>() < 1e-10 || grad.lpNorm<Eigen::Infinity>() < 1e-12) {
      fit.converged = true;
      ++fit.iterations;
      break;
    }
  }
  auto accuracy = [&](std::size_t lo, std::size_t hi) {
    if (hi <= lo) return 0.0;
    std::size_t ok = 0;
    for (std::size_t t = lo; t < hi; ++t) {
      const std::size_t i = order[t];
      const double s = x.row(static_cast<Eigen::Index>(i)).dot(theta.head(d)) + theta(d);
      ok += (s > 0.0 ? 1 : -1) == labels[i];
    }
    return static_cast<double>(ok) / static_cast<double>(hi - lo);
  };
  fit.train_accuracy = accuracy(0, n_train);
  fit.holdout_accuracy = accuracy(n_train, n);
  Tensor w(Shape{static_cast<std::size_t>(d)});
  for (Eigen::Index j = 0; j < d; ++j) w[static_cast<std::size_t>(j)] = theta(j);
  fit.normal = unit(std::move(w));
  fit.bias = theta(d);
  return fit;
}

inline Direction direction_from_fit(SpaceTag space, const BoundaryFit& fit) {
  Direction dir{space, fit.normal, std::nullopt, DirectionSource::kBoundary,
                {{"holdout_accuracy", fit.holdout_accuracy},
                 {"train_accuracy", fit.train_accuracy},
                 {"converged", fit.converged ? 1.0 : 0.0},
                 {"iterations", static_cast<double>(fit.iterations)}}};
  dir.validate();
  return dir;
}

/// Boundary from a labeler of the code vector itself (z or w).
inline Direction boundary_direction(SpaceTag space, const GeneratorBundle& bundle,
                                    const std::function<int(const Tensor&)>& code_labeler, std::size_t n_samples,
                                    std::uint64_t seed) {
  if (space != SpaceTag::kZ && space != SpaceTag::kW) throw ConfigError("boundary: space must be Z or W");
  const std::size_t d = bundle.config().latent_dim;
  Rng rng(derive_seed(seed, 0xb5a1));
  Eigen::MatrixXd x(static_cast<Eigen::Index>(n_samples), static_cast<Eigen::Index>(d));
  std::vector<int> labels(n_samples);
  for (std::size_t k = 0; k < n_samples; ++k) {
    Tensor v = sample_sphere(rng, d);
    if (space == SpaceTag::kW) v = map_latent(bundle, v).w;
    for (std::size_t j = 0; j < d; ++j) x(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) = v[j];
    labels[k] = code_labeler(v);
  }
  return direction_from_fit(space, fit_boundary(x, labels, seed));
}

/// Boundary from an image oracle applied to generated samples.
inline Direction boundary_direction(SpaceTag space, const GeneratorBundle& bundle, const AttributeOracle& oracle,
                                    std::size_t n_samples, std::uint64_t seed) {
  if (space != SpaceTag::kZ && space != SpaceTag::kW) throw ConfigError("boundary: space must be Z or W");
  const std::size_t d = bundle.config().latent_dim;
  Rng rng(derive_seed(seed, 0xb5a1));
  std::vector<Tensor> zs;
  for (std::size_t k = 0; k < n_samples; ++k) zs.push_back(sample_sphere(rng, d));
  Eigen::MatrixXd x(static_cast<Eigen::Index>(n_samples), static_cast<Eigen::Index>(d));
  std::vector<int> labels(n_samples);
  parallel_for(n_samples, [&](std::size_t k) {
    const MapResult m = map_latent(bundle, zs[k]);
    const Tensor& v = space == SpaceTag::kW ? m.w : zs[k];
    for (std::size_t j = 0; j < d; ++j) x(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) = v[j];
    labels[k] = oracle(generate(bundle, zs[k]));
  });
  Direction dir = direction_from_fit(space, fit_boundary(x, labels, seed));
  return dir;
}

// ---------------------------------------------------------------------------
// Edits.

inline bool compatible(const Direction& dir, CodeKind kind) {
  if (dir.space == SpaceTag::kZ) return is_sphere_kind(kind);
  return is_w_kind(kind) || is_s_kind(kind);
}

/// Per-layer S-space direction A_i * dir, the linear part of each style affine.
inline std::vector<Tensor> lift_direction_to_s(const Direction& dir, const GeneratorBundle& bundle) {
  if (dir.space != SpaceTag::kW) throw ConfigError("lift_direction_to_s: direction must be W-space");
  const GeneratorConfig& cfg = bundle.config();
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < cfg.synthesis_layers; ++i) {
    const Tensor& a = *bundle.parameter("style." + std::to_string(i) + ".weight");
    const std::size_t rows = a.dim(0), d = a.dim(1);
    Tensor s(Shape{rows});
    for (std::size_t r = 0; r < rows; ++r) {
      double acc = 0.0;
      for (std::size_t c = 0; c < d; ++c) acc += a[r * d + c] * dir.vector[c];
      s[r] = acc;
    }
    out.push_back(std::move(s));
  }
  return out;
}

namespace detail {

/// v + alpha * dir with the step rounded to 32-bit precision, so an edit
/// followed by its negation restores 32-bit-valued codes exactly.
inline void add_step(Tensor& v, const Tensor& dir, double alpha) {
  auto p = v.data();
  for (std::size_t j = 0; j < p.size(); ++j) p[j] += static_cast<double>(static_cast<float>(alpha * dir[j]));
}

}  // namespace detail

/// Moves every code vector whose layer lies in `range` by alpha along `dir`,
/// then retracts it if the code is sphere-constrained. Single-vector codes
/// (Z, W) have their one vector edited. f is never touched.
inline LatentCode apply_edit(const LatentCode& code, const Direction& dir, double alpha,
                             std::optional<LayerRange> range = std::nullopt,
                             const GeneratorBundle* bundle = nullptr) {
  code.validate();
  dir.validate();
  if (!compatible(dir, code.kind)) {
    throw ConfigError("incompatible spaces: " + space_token(dir.space) + " direction on " + kind_token(code.kind) +
                      " code");
  }
  if (dir.vector.size() != code.dims.latent_dim) throw ShapeError("apply_edit: direction dimension mismatch");
  if (alpha == 0.0) return code;
  const LayerRange r = range ? *range : dir.layers ? *dir.layers : default_edit_range(code.dims);
  std::vector<Tensor> s_dirs;
  if (is_s_kind(code.kind)) {
    if (!bundle) throw ConfigError("apply_edit: S-space edits need the generator's style affines");
    s_dirs = lift_direction_to_s(dir, *bundle);
  }
  LatentCode out = code;
  for (std::size_t j = 0; j < out.vectors.size(); ++j) {
    const std::size_t layer = layer_of_vector(code.kind, code.dims, j);
    if (!is_single_vector(code.kind) && !r.contains(layer)) continue;
    detail::add_step(out.vectors[j], is_s_kind(code.kind) ? s_dirs[layer] : dir.vector, alpha);
    if (is_sphere_kind(code.kind)) out.vectors[j] = retract(out.vectors[j]);
  }
  return out;
}

/// In-distribution score: summed |‖v‖ - sqrt(d)| for Z-type codes (terms
/// below 1e-9 sqrt(d) are reported as 0), summed P_N distance for W-type,
/// unset for S-type.
inline std::optional<double> in_distribution_score(const LatentCode& code, const PnModel* pn) {
  if (is_sphere_kind(code.kind)) {
    double s = 0.0;
    for (const Tensor& v : code.vectors) {
      const double r = std::sqrt(static_cast<double>(v.size()));
      const double dev = std::abs(v.norm() - r);
      if (dev > 1e-9 * r) s += dev;
    }
    return s;
  }
  if (is_w_kind(code.kind)) {
    if (!pn) throw ConfigError("in_distribution_score: W-type codes need a P_N model");
    return pn_score(*pn, code);
  }
  return std::nullopt;
}

struct SweepPoint {
  double alpha = 0.0;
  LatentCode code;
  Image image;
  std::optional<double> score;
};

/// Eleven evenly spaced intensities in [-2, 2].
inline std::vector<double> default_alpha_grid() {
  std::vector<double> a;
  for (int k = -5; k <= 5; ++k) a.push_back(0.4 * k);
  return a;
}

/// Each alpha is applied to the original code independently.
inline std::vector<SweepPoint> edit_sweep(const GeneratorBundle& bundle, const LatentCode& code, const Direction& dir,
                                          const std::vector<double>& alphas, const PnModel* pn = nullptr,
                                          std::optional<LayerRange> range = std::nullopt) {
  if (is_w_kind(code.kind) && !pn) throw ConfigError("edit_sweep: W-type codes need a P_N model");
  std::vector<SweepPoint> out(alphas.size());
  parallel_for(alphas.size(), [&](std::size_t k) {
    SweepPoint& p = out[k];
    p.alpha = alphas[k];
    p.code = apply_edit(code, dir, alphas[k], range, &bundle);
    p.image = render(bundle, p.code);
    p.score = in_distribution_score(p.code, pn);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Serialization: float64 payloads keep the unit-norm invariant exact.

inline std::string encode_f64(const Tensor& t) {
  std::string raw;
  for (double v : t.data()) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    detail::put_u64(raw, bits);
  }
  return detail::base64_encode(raw);
}

inline Tensor decode_f64(const std::string& b64) {
  const std::string raw = detail::base64_decode(b64);
  if (raw.size() % 8 != 0) throw ConfigError("payload: length is not a multiple of 8 bytes");
  detail::ByteReader r(raw);
  std::vector<double> vals(raw.size() / 8);
  for (double& v : vals) {
    const std::uint64_t bits = r.u64();
    std::memcpy(&v, &bits, sizeof v);
  }
  const std::size_t n = vals.size();
  return Tensor(Shape{n}, std::move(vals));
}

inline nlohmann::json direction_to_json(const Direction& d) {
  nlohmann::json j;
  j["space"] = space_token(d.space);
  j["source"] = source_token(d.source);
  j["vector"] = encode_f64(d.vector);
  j["layers"] = d.layers ? nlohmann::json::array({d.layers->first, d.layers->last}) : nlohmann::json(nullptr);
  j["metadata"] = d.metadata;
  return j;
}

inline Direction direction_from_json(const nlohmann::json& j) {
  Direction d;
  d.space = parse_space(j.at("space").get<std::string>());
  d.source = parse_source(j.at("source").get<std::string>());
  d.vector = decode_f64(j.at("vector").get<std::string>());
  if (!j.at("layers").is_null()) d.layers = LayerRange{j.at("layers").at(0).get<std::size_t>(), j.at("layers").at(1).get<std::size_t>()};
  d.metadata = j.at("metadata").get<std::map<std::string, double>>();
  d.validate();
  return d;
}

}  // namespace latent_atlas
