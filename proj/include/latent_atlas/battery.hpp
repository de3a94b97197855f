#pragma once

// Gradient-check battery: every primitive on seeded random inputs, and every
// end-to-end loss graph on a small generator.

#include <chrono>
#include <functional>
#include <string>
#include <vector>

#include "latent_atlas/inversion.hpp"

namespace latent_atlas {

struct BatteryLine {
  std::string graph;
  std::uint64_t seed = 0;
  ad::GradcheckReport report;
};

struct BatteryReport {
  std::vector<BatteryLine> lines;
  bool passed = true;
  double seconds = 0.0;

  double max_rel_error() const {
    double m = 0.0;
    for (const auto& l : lines) m = std::max(m, l.report.max_rel_error());
    return m;
  }
};

struct BatteryOptions {
  std::size_t seeds = 20;
  double tolerance = 1e-4;
  double step = 1e-5;
  bool primitives = true;
  bool end_to_end = true;
  bool pti = true;
  /// Adds a custom op whose hand-coded derivative is wrong; the battery must fail.
  bool inject_fault = false;
};

/// Generator used by the end-to-end checks: 8x8 output, 4 layers, split at 2.
inline GeneratorConfig battery_generator_config(std::uint64_t seed) {
  GeneratorConfig c;
  c.latent_dim = 4;
  c.mapping_layers = 2;
  c.synthesis_layers = 4;
  c.split_layer = 2;
  c.base_resolution = 4;
  c.output_resolution = 8;
  c.channels = {4, 4};
  c.seed = seed;
  return c;
}

namespace detail {

/// y = x^3 with derivative 3x^2, or 2x^2 when `faulty`.
inline std::shared_ptr<const ad::CustomOp> cube_op(const Shape& shape, bool faulty) {
  auto op = std::make_shared<ad::CustomOp>();
  op->name = faulty ? "cube_faulty" : "cube";
  op->output_shape = shape;
  op->forward = [](const std::vector<const Tensor*>& in) {
    Tensor y = *in[0];
    for (double& v : y.data()) v = v * v * v;
    return y;
  };
  const double k = faulty ? 2.0 : 3.0;
  op->backward = [k](const std::vector<const Tensor*>& in, const Tensor&, const Tensor& gy) {
    Tensor gx = *in[0];
    for (std::size_t j = 0; j < gx.size(); ++j) gx[j] = k * gx[j] * gx[j] * gy[j];
    return std::vector<Tensor>{gx};
  };
  return op;
}

/// Uniform values in [lo, hi] with magnitude at least `min_abs`.
inline Tensor away_from_zero(Rng& rng, Shape shape, double lo, double hi, double min_abs) {
  Tensor t = uniform_tensor(rng, std::move(shape), lo, hi);
  for (double& v : t.data()) {
    if (std::abs(v) < min_abs) v = v < 0 ? -min_abs : min_abs;
  }
  return t;
}

struct PrimitiveCase {
  std::string name;
  std::function<void(ad::Graph&, Rng&)> build;  // leaves the op node as the last node
};

inline std::vector<PrimitiveCase> primitive_cases(bool inject_fault) {
  auto in = [](ad::Graph& g, const std::string& n, Tensor t) {
    ad::Var v = g.input(n, t.shape(), true);
    g.bind(n, std::move(t));
    return v;
  };
  std::vector<PrimitiveCase> cases = {
      {"add", [in](ad::Graph& g, Rng& r) { g.add(in(g, "a", gaussian_tensor(r, {5})), in(g, "b", gaussian_tensor(r, {5}))); }},
      {"sub", [in](ad::Graph& g, Rng& r) { g.sub(in(g, "a", gaussian_tensor(r, {5})), in(g, "b", gaussian_tensor(r, {5}))); }},
      {"mul", [in](ad::Graph& g, Rng& r) { g.mul(in(g, "a", gaussian_tensor(r, {5})), in(g, "b", gaussian_tensor(r, {5}))); }},
      {"mul_scalar", [in](ad::Graph& g, Rng& r) { g.mul(in(g, "a", gaussian_tensor(r, {5})), in(g, "s", gaussian_tensor(r, {}))); }},
      {"scale", [in](ad::Graph& g, Rng& r) { g.scale(in(g, "a", gaussian_tensor(r, {5})), -1.7); }},
      {"matmul", [in](ad::Graph& g, Rng& r) { g.matmul(in(g, "a", gaussian_tensor(r, {3, 5})), in(g, "b", gaussian_tensor(r, {5, 2}))); }},
      {"matvec", [in](ad::Graph& g, Rng& r) { g.matmul(in(g, "a", gaussian_tensor(r, {4, 5})), in(g, "x", gaussian_tensor(r, {5}))); }},
      {"conv2d", [in](ad::Graph& g, Rng& r) {
         g.conv2d(in(g, "x", gaussian_tensor(r, {2, 5, 5})), in(g, "w", gaussian_tensor(r, {3, 2, 3, 3})),
                  in(g, "b", gaussian_tensor(r, {3})));
       }},
      {"conv2d_1x1", [in](ad::Graph& g, Rng& r) {
         g.conv2d(in(g, "x", gaussian_tensor(r, {3, 2, 3})), in(g, "w", gaussian_tensor(r, {2, 3, 1, 1})));
       }},
      {"upsample2x", [in](ad::Graph& g, Rng& r) { g.upsample2x(in(g, "x", gaussian_tensor(r, {2, 2, 3}))); }},
      {"avgpool2x", [in](ad::Graph& g, Rng& r) { g.avgpool2x(in(g, "x", gaussian_tensor(r, {2, 4, 4}))); }},
      {"leaky_relu", [in](ad::Graph& g, Rng& r) { g.leaky_relu(in(g, "x", away_from_zero(r, {5}, -2, 2, 1e-2))); }},
      {"sigmoid", [in](ad::Graph& g, Rng& r) { g.sigmoid(in(g, "x", gaussian_tensor(r, {5}, 2.0))); }},
      {"modulate", [in](ad::Graph& g, Rng& r) { g.modulate(in(g, "x", gaussian_tensor(r, {2, 2, 2})), in(g, "s", gaussian_tensor(r, {4}))); }},
      {"l2_norm", [in](ad::Graph& g, Rng& r) { g.l2_norm(in(g, "x", gaussian_tensor(r, {5}))); }},
      {"sum", [in](ad::Graph& g, Rng& r) { g.sum(in(g, "x", gaussian_tensor(r, {5}))); }},
      {"mean", [in](ad::Graph& g, Rng& r) { g.mean(in(g, "x", gaussian_tensor(r, {5}))); }},
      {"mse", [in](ad::Graph& g, Rng& r) { g.mse(in(g, "a", gaussian_tensor(r, {5})), in(g, "b", gaussian_tensor(r, {5}))); }},
      {"pow_inverse", [in](ad::Graph& g, Rng& r) { g.pow(in(g, "x", uniform_tensor(r, {5}, 0.5, 2.0)), -1.0); }},
      {"pow_cube", [in](ad::Graph& g, Rng& r) { g.pow(in(g, "x", gaussian_tensor(r, {5})), 3.0); }},
      {"reshape", [in](ad::Graph& g, Rng& r) { g.reshape(in(g, "x", gaussian_tensor(r, {2, 3})), {3, 2}); }},
      {"custom", [in](ad::Graph& g, Rng& r) { g.custom(cube_op({5}, false), {in(g, "x", gaussian_tensor(r, {5}))}); }},
  };
  if (inject_fault) {
    cases.push_back({"custom_faulty", [in](ad::Graph& g, Rng& r) {
                       g.custom(cube_op({5}, true), {in(g, "x", uniform_tensor(r, {5}, 0.5, 1.5))});
                     }});
  }
  return cases;
}

/// Makes the scalar objective sum(op * C) with a random constant C, so the
/// check exercises arbitrary output adjoints.
inline void weight_output(ad::Graph& g, Rng& rng) {
  ad::Var op{g.size() - 1};
  ad::Var c = g.constant(gaussian_tensor(rng, g.shape(op)));
  g.set_output(g.sum(g.mul(op, c)));
}

/// A code of the requested kind near typical values, perturbed so F codes
/// are not exactly on the generator's range.
inline LatentCode battery_code(const GeneratorBundle& bundle, CodeKind kind, Rng& rng) {
  const GeneratorConfig& cfg = bundle.config();
  LatentCode base = is_sphere_kind(kind) ? make_z_code(cfg, sample_sphere(rng, cfg.latent_dim))
                                         : make_w_code(cfg, map_latent(bundle, sample_sphere(rng, cfg.latent_dim)).w);
  LatentCode c = lift(base, kind, bundle);
  for (Tensor& v : c.vectors) {
    for (double& x : v.data()) x += 0.1 * std::normal_distribution<double>(0.0, 1.0)(rng);
  }
  if (c.feature) {
    for (double& x : c.feature->data()) x += 0.1 * std::normal_distribution<double>(0.0, 1.0)(rng);
  }
  return c;
}

}  // namespace detail

/// Runs the battery; each (graph, seed) pair is one report line.
inline BatteryReport run_gradcheck_battery(const BatteryOptions& opt) {
  const auto start = std::chrono::steady_clock::now();
  BatteryReport out;
  auto record = [&](std::string name, std::uint64_t seed, ad::Graph& g) {
    ad::GradcheckReport r = ad::gradcheck(g, opt.tolerance, opt.step);
    out.passed = out.passed && r.passed;
    out.lines.push_back({std::move(name), seed, std::move(r)});
  };

  for (std::uint64_t seed = 0; seed < opt.seeds; ++seed) {
    if (opt.primitives) {
      for (const auto& pc : detail::primitive_cases(opt.inject_fault)) {
        Rng rng(derive_seed(seed, hash_name(pc.name)));
        ad::Graph g;
        pc.build(g, rng);
        detail::weight_output(g, rng);
        record("primitive/" + pc.name, seed, g);
      }
    }
    if (!opt.end_to_end && !opt.pti) continue;

    const GeneratorBundle bundle = init_generator(battery_generator_config(seed));
    Rng rng(derive_seed(seed, 0xba77));
    const Image target = Image::clamped([&] {
      Tensor t = generate(bundle, sample_sphere(rng, bundle.config().latent_dim)).tensor();
      for (double& v : t.data()) v += 0.05 * std::normal_distribution<double>(0.0, 1.0)(rng);
      return t;
    }());
    const FeatureExtractor fx(101 + seed);

    if (opt.end_to_end) {
      const PnModel pn = fit_pn(bundle, 400, seed);
      for (SpaceTag space : kAllSpaces) {
        const CodeKind kind = code_kind(space);
        std::vector<double> regs = {space == SpaceTag::kPN ? 1e-3 : 0.0};
        if (is_w_kind(kind) && space != SpaceTag::kPN) regs.push_back(0.1);
        for (double reg : regs) {
          InversionGraph ig(bundle, kind, target, 1.0, 1.0, reg, fx, &pn);
          ig.bind(detail::battery_code(bundle, kind, rng));
          record("loss/" + space_token(space) + (reg > 0 && space != SpaceTag::kPN ? "+pn" : ""), seed, ig.graph);
        }
      }
    }
    if (opt.pti) {
      PtiConfig pc;
      pc.locality_samples = 2;
      const LatentCode pivot = detail::battery_code(bundle, CodeKind::kZPlus, rng);
      PtiGraph pg(bundle, pivot, target, pc, fx);
      pg.bind_locality(bundle, rng);
      record("loss/pti", seed, pg.graph);
    }
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

}  // namespace latent_atlas
