#pragma once

// Optimization-based inversion and pivotal tuning.

#include <chrono>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "latent_atlas/latent_spaces.hpp"
#include "latent_atlas/metrics.hpp"

namespace latent_atlas {

enum class OptimizerKind { kAdam, kSgd };
enum class InitPolicy { kDefault, kRandom };

struct InversionConfig {
  SpaceTag space = SpaceTag::kFZ;
  std::size_t steps = 500;
  double lr = 0.01;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double lambda_pix = 1.0;
  double lambda_perc = 1.0;
  /// Unset: 1e-3 for the P_N space, 0 elsewhere.
  std::optional<double> lambda_reg;
  InitPolicy init = InitPolicy::kDefault;
  std::optional<LatentCode> initial_code;
  std::uint64_t seed = 0;
  /// Throws if a sphere-constrained vector leaves the sphere after any step.
  bool check_sphere_every_step = false;

  double effective_lambda_reg() const {
    if (lambda_reg) return *lambda_reg;
    return space == SpaceTag::kPN ? 1e-3 : 0.0;
  }

  void validate() const {
    if (steps < 1) throw ConfigError("inversion: steps must be >= 1");
    if (lambda_pix < 0 || lambda_perc < 0 || effective_lambda_reg() < 0) {
      throw ConfigError("inversion: loss weights must be >= 0");
    }
    if (!(lr >= 0.0)) throw ConfigError("inversion: learning rate must be >= 0");
  }
};

struct LossTerms {
  double total = 0.0;
  double pixel = 0.0;
  double perceptual = 0.0;
  double regularizer = 0.0;
};

struct InversionResult {
  SpaceTag space = SpaceTag::kFZ;
  LatentCode code;
  std::vector<LossTerms> trajectory;  // loss of the code entering each step
  Image image;
  double wall_seconds = 0.0;
  double max_sphere_deviation = 0.0;  // over every step
};

/// Sample statistics shared by many inversions against one generator.
struct InversionPriors {
  Tensor mean_w;
  std::optional<PnModel> pn;
  FeatureExtractor extractor;

  static InversionPriors compute(const GeneratorBundle& bundle, std::uint64_t seed = 0, bool with_pn = true,
                                 std::size_t n_samples = 10000, std::uint64_t extractor_seed = 101) {
    InversionPriors p{latent_atlas::mean_w(bundle, n_samples, seed), std::nullopt, FeatureExtractor(extractor_seed)};
    if (with_pn) p.pn = fit_pn(bundle, std::max(n_samples, 10 * bundle.config().latent_dim), seed);
    return p;
  }
};

/// Initial code: Z-type from one sphere sample (replicated per layer), W-type
/// from the mean w, S-type from affines of the mean w; F variants tap f from
/// the forward pass of the matching non-F code.
inline LatentCode init_code(SpaceTag space, const GeneratorBundle& bundle, InitPolicy policy, std::uint64_t seed,
                            const Tensor& mean_w_value) {
  const GeneratorConfig& cfg = bundle.config();
  const CodeKind kind = code_kind(space);
  Rng rng(derive_seed(seed, 0x1417));
  LatentCode base;
  if (is_sphere_kind(kind)) {
    base = make_z_code(cfg, sample_sphere(rng, cfg.latent_dim));
  } else if (policy == InitPolicy::kRandom) {
    base = make_w_code(cfg, map_latent(bundle, sample_sphere(rng, cfg.latent_dim)).w);
  } else {
    base = make_w_code(cfg, mean_w_value);
  }
  return lift(base, kind, bundle);
}

namespace detail {

struct AdamState {
  std::vector<Tensor> m, v;
  std::size_t t = 0;
};

inline void optimizer_step(std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads, AdamState& st,
                           OptimizerKind kind, double lr, double beta1, double beta2, double eps) {
  if (kind == OptimizerKind::kSgd) {
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto p = params[k]->data();
      const auto g = grads[k]->data();
      for (std::size_t j = 0; j < p.size(); ++j) p[j] -= lr * g[j];
    }
    return;
  }
  if (st.m.empty()) {
    for (Tensor* p : params) {
      st.m.emplace_back(p->shape());
      st.v.emplace_back(p->shape());
    }
  }
  ++st.t;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(st.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k]->data();
    const auto g = grads[k]->data();
    auto m = st.m[k].data();
    auto v = st.v[k].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
      v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
      p[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps);
    }
  }
}

inline std::string vector_input_name(std::size_t j) { return "code.v" + std::to_string(j); }

}  // namespace detail

/// Loss graph of a code against a target. Trainable inputs are "code.f" and
/// "code.v<j>".
struct InversionGraph {
  ad::Graph graph;
  ad::Var image, pixel, perceptual, regularizer, total;
  bool has_perceptual = false, has_regularizer = false;

  InversionGraph(const GeneratorBundle& bundle, CodeKind kind, const Image& target, double lambda_pix,
                 double lambda_perc, double lambda_reg, const FeatureExtractor& extractor, const PnModel* pn) {
    const CodeDims dims = CodeDims::of(bundle.config());
    ad::Graph& g = graph;
    GeneratorGraph gen(g, bundle);
    CodeNodes nodes;
    if (has_feature(kind)) nodes.feature = g.input("code.f", dims.feature_shape, true);
    for (std::size_t j = 0; j < vector_count(kind, dims); ++j) {
      nodes.vectors.push_back(g.input(detail::vector_input_name(j), {vector_dim(kind, dims, j)}, true));
    }
    std::vector<ad::Var> ws;
    image = build_code_image(gen, kind, dims, nodes, &ws);
    pixel = g.mse(image, g.constant(target.tensor()));
    total = g.scale(pixel, lambda_pix);
    if (lambda_perc > 0.0) {
      has_perceptual = true;
      perceptual = extractor.perceptual_loss(g, image, extractor.normalized_features(target));
      total = g.add(total, g.scale(perceptual, lambda_perc));
    }
    if (lambda_reg > 0.0 && is_w_kind(kind)) {
      if (!pn) throw ConfigError("inversion: P_N regularizer requested without a fitted P_N model");
      has_regularizer = true;
      std::optional<ad::Var> acc;
      for (ad::Var w : ws) {
        ad::Var term = pn_squared_distance(g, *pn, w);
        acc = acc ? g.add(*acc, term) : term;
      }
      regularizer = *acc;
      total = g.add(total, g.scale(regularizer, lambda_reg));
    }
    g.set_output(total);
  }

  void bind(const LatentCode& code) {
    if (code.feature) graph.bind("code.f", *code.feature);
    for (std::size_t j = 0; j < code.vectors.size(); ++j) graph.bind(detail::vector_input_name(j), code.vectors[j]);
  }

  LossTerms terms() const {
    LossTerms t;
    t.total = graph.value(total).item();
    t.pixel = graph.value(pixel).item();
    if (has_perceptual) t.perceptual = graph.value(perceptual).item();
    if (has_regularizer) t.regularizer = graph.value(regularizer).item();
    return t;
  }
};

inline InversionResult invert(const GeneratorBundle& bundle, const Image& target, const InversionConfig& cfg,
                              const InversionPriors& priors) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  if (target.tensor().shape() != bundle.config().image_shape()) {
    throw ShapeError("invert: target shape " + shape_str(target.tensor().shape()) + " vs generator output " +
                     shape_str(bundle.config().image_shape()));
  }
  const CodeKind kind = code_kind(cfg.space);
  LatentCode code = cfg.initial_code ? *cfg.initial_code : init_code(cfg.space, bundle, cfg.init, cfg.seed, priors.mean_w);
  code.validate();
  if (code.kind != kind) throw ConfigError("invert: initial code kind does not match space");
  retract_code(code);

  const double lambda_reg = cfg.effective_lambda_reg();
  InversionGraph ig(bundle, kind, target, cfg.lambda_pix, cfg.lambda_perc, lambda_reg, priors.extractor,
                    priors.pn ? &*priors.pn : nullptr);

  InversionResult result;
  result.space = cfg.space;
  result.trajectory.reserve(cfg.steps);
  detail::AdamState adam;
  result.max_sphere_deviation = sphere_deviation(code);

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    ig.bind(code);
    ig.graph.forward();
    const LossTerms terms = ig.terms();
    if (!std::isfinite(terms.total)) {
      throw NumericalError("invert: non-finite loss at step " + std::to_string(step));
    }
    result.trajectory.push_back(terms);
    const auto grads = ig.graph.backward();

    std::vector<Tensor*> params;
    std::vector<const Tensor*> gs;
    if (code.feature) {
      params.push_back(&*code.feature);
      gs.push_back(&grads.at("code.f"));
    }
    for (std::size_t j = 0; j < code.vectors.size(); ++j) {
      params.push_back(&code.vectors[j]);
      gs.push_back(&grads.at(detail::vector_input_name(j)));
    }
    detail::optimizer_step(params, gs, adam, cfg.optimizer, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    retract_code(code);

    const double dev = sphere_deviation(code);
    result.max_sphere_deviation = std::max(result.max_sphere_deviation, dev);
    if (cfg.check_sphere_every_step && dev > 1e-9) {
      throw NumericalError("invert: sphere invariant violated at step " + std::to_string(step));
    }
  }
  result.code = std::move(code);
  result.image = render(bundle, result.code);
  result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

inline InversionResult invert(const GeneratorBundle& bundle, const Image& target, const InversionConfig& cfg) {
  const bool need_pn = cfg.effective_lambda_reg() > 0.0 && is_w_kind(code_kind(cfg.space));
  return invert(bundle, target, cfg, InversionPriors::compute(bundle, cfg.seed, need_pn));
}

/// Reconstruction loss lambda_pix * MSE + lambda_perc * perceptual of a code.
inline double reconstruction_loss(const GeneratorBundle& bundle, const LatentCode& code, const Image& target,
                                  double lambda_pix, double lambda_perc, const FeatureExtractor& extractor) {
  const Image img = render(bundle, code);
  double loss = lambda_pix * mse(img, target);
  if (lambda_perc > 0.0) loss += lambda_perc * perceptual(extractor, img, target);
  return loss;
}

// ---------------------------------------------------------------------------
// Pivotal tuning.

struct PtiConfig {
  std::size_t steps = 200;
  double lr = 1e-3;
  double lambda_loc = 0.1;
  std::size_t locality_samples = 8;
  double lambda_pix = 1.0;
  double lambda_perc = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (steps < 1) throw ConfigError("pti: steps must be >= 1");
    if (lambda_loc < 0 || lambda_pix < 0 || lambda_perc < 0) throw ConfigError("pti: weights must be >= 0");
    if (!(lr >= 0.0)) throw ConfigError("pti: learning rate must be >= 0");
  }
};

struct PtiReport {
  double pre_loss = 0.0;   // reconstruction loss at the pivot, original weights
  double post_loss = 0.0;  // same with tuned weights
  double locality_drift = 0.0;  // mean MSE(G_tuned, G_original) on held-out codes
  std::vector<double> trajectory;  // total objective per step
};

/// PTI objective: reconstruction of the target from the frozen pivot plus the
/// locality term over R codes, with every generator weight a trainable input
/// named "gen.<param>". Locality inputs are "loc.z<r>" and "loc.ref<r>".
struct PtiGraph {
  ad::Graph graph;
  ad::Var reconstruction, total;
  std::size_t locality_count = 0;

  PtiGraph(const GeneratorBundle& bundle, const LatentCode& pivot, const Image& target, const PtiConfig& cfg,
           const FeatureExtractor& extractor) {
    const GeneratorConfig& gc = bundle.config();
    locality_count = cfg.lambda_loc > 0.0 ? cfg.locality_samples : 0;
    ad::Graph& g = graph;
    GeneratorGraph gen(g, bundle, /*trainable_weights=*/true);
    ad::Var img = build_code_image(gen, pivot.kind, pivot.dims, constant_nodes(g, pivot));
    reconstruction = g.scale(g.mse(img, g.constant(target.tensor())), cfg.lambda_pix);
    if (cfg.lambda_perc > 0.0) {
      reconstruction = g.add(reconstruction, g.scale(extractor.perceptual_loss(g, img, extractor.normalized_features(target)),
                                                     cfg.lambda_perc));
    }
    total = reconstruction;
    if (locality_count > 0) {
      std::optional<ad::Var> loc;
      const CodeDims dims = CodeDims::of(gc);
      for (std::size_t r = 0; r < locality_count; ++r) {
        const std::string k = std::to_string(r);
        CodeNodes zn;
        zn.vectors.push_back(g.input("loc.z" + k, {gc.latent_dim}));
        ad::Var ref = g.input("loc.ref" + k, gc.image_shape());
        ad::Var term = g.mse(build_code_image(gen, CodeKind::kZ, dims, zn), ref);
        loc = loc ? g.add(*loc, term) : term;
      }
      total = g.add(total, g.scale(*loc, cfg.lambda_loc / static_cast<double>(locality_count)));
    }
    g.set_output(total);
  }

  /// Fresh sphere codes and their images under the original generator.
  void bind_locality(const GeneratorBundle& original, Rng& rng) {
    for (std::size_t r = 0; r < locality_count; ++r) {
      const Tensor z = sample_sphere(rng, original.config().latent_dim);
      graph.bind("loc.z" + std::to_string(r), z);
      graph.bind("loc.ref" + std::to_string(r), generate(original, z).tensor());
    }
  }
};

/// Tunes a private copy of the generator around a frozen pivot code. The
/// caller's bundle is never modified.
inline std::pair<GeneratorBundle, PtiReport> pivotal_tune(const GeneratorBundle& bundle, const InversionResult& pivot,
                                                          const Image& target, const PtiConfig& cfg,
                                                          const FeatureExtractor& extractor) {
  cfg.validate();
  pivot.code.validate();
  if (!(pivot.code.dims == CodeDims::of(bundle.config()))) throw ConfigError("pti: pivot does not match generator");
  const std::size_t d = bundle.config().latent_dim;

  PtiGraph pg(bundle, pivot.code, target, cfg, extractor);
  ad::Graph& g = pg.graph;
  Rng rng(derive_seed(cfg.seed, 0x9171));

  PtiReport report;
  const auto& names = bundle.parameter_names();
  std::vector<Tensor> params;
  for (std::size_t k = 0; k < bundle.parameter_count(); ++k) params.push_back(*bundle.parameter(k));
  detail::AdamState adam;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    pg.bind_locality(bundle, rng);
    for (std::size_t k = 0; k < params.size(); ++k) g.bind("gen." + names[k], params[k]);
    g.forward();
    const double loss = g.value(pg.total).item();
    if (!std::isfinite(loss)) throw NumericalError("pti: non-finite loss at step " + std::to_string(step));
    if (step == 0) report.pre_loss = g.value(pg.reconstruction).item();
    report.trajectory.push_back(loss);
    const auto grads = g.backward();
    std::vector<Tensor*> ps;
    std::vector<const Tensor*> gs;
    for (std::size_t k = 0; k < params.size(); ++k) {
      ps.push_back(&params[k]);
      gs.push_back(&grads.at("gen." + names[k]));
    }
    detail::optimizer_step(ps, gs, adam, OptimizerKind::kAdam, cfg.lr, 0.9, 0.999, 1e-8);
  }
  GeneratorBundle tuned = bundle;
  for (std::size_t k = 0; k < params.size(); ++k) {
    tuned.set_parameter(names[k], params[k]);
    g.bind("gen." + names[k], params[k]);
  }
  // Same graph as pre_loss so that an unchanged generator reports equal losses.
  g.forward();
  report.post_loss = g.value(pg.reconstruction).item();

  Rng held_out(derive_seed(cfg.seed, 0x4e1d));
  const std::size_t n_held = std::max<std::size_t>(cfg.locality_samples, 1);
  double drift = 0.0;
  for (std::size_t r = 0; r < n_held; ++r) {
    const Tensor z = sample_sphere(held_out, d);
    drift += mse(generate(tuned, z), generate(bundle, z));
  }
  report.locality_drift = drift / static_cast<double>(n_held);
  return {std::move(tuned), report};
}

// ---------------------------------------------------------------------------
// Serialization.

inline nlohmann::json result_to_json(const InversionResult& r) {
  nlohmann::json traj = nlohmann::json::array();
  for (const LossTerms& t : r.trajectory) {
    traj.push_back({{"total", t.total}, {"pixel", t.pixel}, {"perceptual", t.perceptual}, {"regularizer", t.regularizer}});
  }
  return {{"space", space_token(r.space)},
          {"code", code_to_json(r.code)},
          {"trajectory", traj},
          {"max_sphere_deviation", r.max_sphere_deviation}};
}

/// Restores code and trajectory; the image is re-rendered by the caller.
inline InversionResult result_from_json(const nlohmann::json& j) {
  InversionResult r;
  r.space = parse_space(j.at("space").get<std::string>());
  r.code = code_from_json(j.at("code"));
  for (const auto& t : j.at("trajectory")) {
    r.trajectory.push_back({t.at("total").get<double>(), t.at("pixel").get<double>(), t.at("perceptual").get<double>(),
                            t.at("regularizer").get<double>()});
  }
  r.max_sphere_deviation = j.value("max_sphere_deviation", 0.0);
  return r;
}

}  // namespace latent_atlas
