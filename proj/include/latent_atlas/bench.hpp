#pragma once

// Experiment runners behind the command-line tool. Each runner reads its
// inputs, writes every artifact under the output directory and reports a
// short deterministic summary on `out`.

#include <filesystem>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "latent_atlas/battery.hpp"
#include "latent_atlas/directions.hpp"
#include "latent_atlas/inversion.hpp"
#include "latent_atlas/metrics.hpp"
#include "latent_atlas/parallel.hpp"

namespace latent_atlas::bench {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitNumerical = 2;

/// Seeds of the perceptual and identity feature extractors.
inline constexpr std::uint64_t kPerceptualSeed = 101;
inline constexpr std::uint64_t kIdentitySeed = 202;

// ---------------------------------------------------------------------------
// Paths and small parsers.

/// Relative paths are taken under the output directory.
inline fs::path resolve(const fs::path& out_dir, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : out_dir / path;
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_file(path.string(), text);
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline std::vector<SpaceTag> parse_space_list(const std::string& s) {
  if (trim(s) == "all") return {kAllSpaces.begin(), kAllSpaces.end()};
  std::vector<SpaceTag> out;
  for (const auto& t : split_list(s)) {
    const SpaceTag tag = parse_space(t);
    if (std::find(out.begin(), out.end(), tag) != out.end()) throw ConfigError("space '" + t + "' listed twice");
    out.push_back(tag);
  }
  if (out.empty()) throw ConfigError("space list is empty");
  return out;
}

inline double parse_real(const std::string& s, const std::string& what) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty() || !std::isfinite(v)) throw ConfigError(what + ": not a finite number: '" + s + "'");
  return v;
}

inline std::vector<double> parse_alpha_grid(const std::string& s) {
  if (trim(s).empty()) return default_alpha_grid();
  std::vector<double> out;
  for (const auto& t : split_list(s)) out.push_back(parse_real(t, "alpha grid"));
  if (out.empty()) throw ConfigError("alpha grid is empty");
  return out;
}

inline std::vector<std::size_t> parse_size_list(const std::string& s, const std::string& what) {
  std::vector<std::size_t> out;
  for (const auto& t : split_list(s)) {
    const double v = parse_real(t, what);
    if (v < 1 || v != std::floor(v)) throw ConfigError(what + ": expected positive integers");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

inline std::string csv_line(const std::vector<std::string>& fields) {
  std::string s;
  for (std::size_t i = 0; i < fields.size(); ++i) s += (i ? "," : "") + csv_quote(fields[i]);
  return s + "\r\n";
}

/// Six significant digits, for console summaries.
inline std::string brief(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Targets.

struct TargetSpec {
  std::size_t count = 20;
  std::size_t first = 0;
  std::uint64_t seed = 1;
  double noise = 0.0;
  std::vector<std::string> files;  // when set, replaces generated targets
};

struct Target {
  std::string id;
  Image image;
};

inline std::string target_id(std::size_t k) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "t%03zu", k);
  return buf;
}

/// Generated targets are G(z_k) for seeded sphere samples, optionally with
/// seeded Gaussian pixel noise (then clamped to [0, 1]).
inline std::vector<Target> make_targets(const GeneratorBundle& bundle, const TargetSpec& wanted, const fs::path& base) {
  if (!(wanted.noise >= 0.0)) throw ConfigError("targets: noise must be >= 0");
  std::vector<Target> out;
  const Shape want = bundle.config().image_shape();
  auto add_noise = [&](Tensor t, std::size_t k) {
    if (wanted.noise == 0.0) return Image(std::move(t));
    Rng rng(derive_seed(wanted.seed, 0x7a11 + 2 * k + 1));
    std::normal_distribution<double> n(0.0, wanted.noise);
    for (double& v : t.data()) v += n(rng);
    return Image::clamped(std::move(t));
  };
  if (!wanted.files.empty()) {
    for (std::size_t k = 0; k < wanted.files.size(); ++k) {
      const fs::path p = resolve(base, wanted.files[k]);
      if (!fs::exists(p)) throw ConfigError("target file not found: " + p.string());
      Image img = read_ppm(p.string());
      if (img.tensor().shape() != want) {
        throw ShapeError("target " + p.string() + ": shape " + shape_str(img.tensor().shape()) + " vs generator " +
                         shape_str(want));
      }
      out.push_back({p.stem().string(), add_noise(img.tensor(), k)});
    }
    return out;
  }
  for (std::size_t k = wanted.first; k < wanted.first + wanted.count; ++k) {
    Rng rng(derive_seed(wanted.seed, 0x7a11 + 2 * k));
    const Image clean = generate(bundle, sample_sphere(rng, bundle.config().latent_dim));
    out.push_back({target_id(k), add_noise(clean.tensor(), k)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Inversion jobs.

struct InversionOptions {
  InversionConfig base;  // space and seed are set per job
  std::size_t prior_samples = 10000;
  std::uint64_t prior_seed = 0;
};

inline InversionPriors make_priors(const GeneratorBundle& bundle, const InversionOptions& opt,
                                   const std::vector<SpaceTag>& spaces) {
  bool need_pn = false;
  for (SpaceTag s : spaces) {
    InversionConfig c = opt.base;
    c.space = s;
    need_pn = need_pn || (is_w_kind(code_kind(s)) && c.effective_lambda_reg() > 0.0);
  }
  return InversionPriors::compute(bundle, opt.prior_seed, need_pn, opt.prior_samples, kPerceptualSeed);
}

inline std::uint64_t job_seed(std::uint64_t seed, const std::string& target, SpaceTag space) {
  return derive_seed(seed, hash_name(target + "/" + space_token(space)));
}

using JobOutcome = std::variant<InversionResult, std::string>;  // result or error message

struct InversionGrid {
  std::vector<Target> targets;
  std::vector<SpaceTag> spaces;
  std::vector<JobOutcome> outcomes;  // row-major [target][space]

  const JobOutcome& at(std::size_t t, std::size_t s) const { return outcomes[t * spaces.size() + s]; }
};

/// Inverts every (target, space) pair on the worker pool. Numerical failures
/// are captured per job; other errors propagate.
inline InversionGrid run_inversions(const GeneratorBundle& bundle, std::vector<Target> targets,
                                    const std::vector<SpaceTag>& spaces, const InversionOptions& opt,
                                    const InversionPriors& priors, std::uint64_t seed) {
  InversionGrid grid{std::move(targets), spaces, {}};
  grid.outcomes.resize(grid.targets.size() * spaces.size(), std::string("not run"));
  parallel_for(grid.outcomes.size(), [&](std::size_t j) {
    const Target& t = grid.targets[j / spaces.size()];
    InversionConfig cfg = opt.base;
    cfg.space = spaces[j % spaces.size()];
    cfg.seed = job_seed(seed, t.id, cfg.space);
    try {
      grid.outcomes[j] = invert(bundle, t.image, cfg, priors);
    } catch (const NumericalError& e) {
      grid.outcomes[j] = std::string(e.what());
    }
  });
  return grid;
}

inline MetricsRow reconstruction_row(const std::string& target, const std::string& space, const Image& recon,
                                     const Image& reference, const FeatureExtractor& perceptual_fx,
                                     const FeatureExtractor& identity_fx) {
  MetricsRow r;
  r.target = target;
  r.space = space;
  r.mse = mse(recon, reference);
  r.ssim = ssim(recon, reference);
  r.perceptual = perceptual(perceptual_fx, recon, reference);
  r.identity = identity_similarity(identity_fx, recon, reference);
  return r;
}

inline MetricsRow failed_row(const std::string& target, const std::string& space) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  return {target, space, nan, nan, nan, std::nullopt, std::nullopt, std::nullopt};
}

// ---------------------------------------------------------------------------
// init-gen

struct InitGenOptions {
  GeneratorConfig config;
  std::string weights = "generator.sgz";
};

inline int run_init_gen(const InitGenOptions& opt, const fs::path& out_dir, std::ostream& out) {
  const GeneratorBundle bundle = init_generator(opt.config);
  const fs::path p = resolve(out_dir, opt.weights);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  save_weights(p.string(), bundle);
  std::size_t scalars = 0;
  for (std::size_t k = 0; k < bundle.parameter_count(); ++k) scalars += bundle.parameter(k)->size();
  out << "wrote " << p.filename().string() << " (" << bundle.parameter_count() << " arrays, " << scalars
      << " scalars)\n";
  return kExitOk;
}

inline GeneratorBundle load_bundle(const fs::path& out_dir, const std::string& weights) {
  const fs::path p = resolve(out_dir, weights);
  if (!fs::exists(p)) throw ConfigError("weights file not found: " + p.string());
  return load_weights(p.string());
}

// ---------------------------------------------------------------------------
// sample

struct SampleOptions {
  std::string weights = "generator.sgz";
  SpaceTag space = SpaceTag::kZ;
  std::size_t count = 8;
  std::string codes = "codes.json";
  std::uint64_t seed = 0;
};

inline int run_sample(const SampleOptions& opt, const fs::path& out_dir, std::ostream& out) {
  const GeneratorBundle bundle = load_bundle(out_dir, opt.weights);
  const auto codes = sample_codes(bundle, opt.space, opt.count, opt.seed);
  nlohmann::json j = nlohmann::json::array();
  std::vector<Image> images;
  for (std::size_t k = 0; k < codes.size(); ++k) {
    const LatentCode c = round_to_f32(codes[k]);
    j.push_back(code_to_json(c));
    images.push_back(render(bundle, c));
    write_ppm(resolve(out_dir, "sample_" + target_id(k).substr(1) + ".ppm").string(), images.back());
  }
  write_text(resolve(out_dir, opt.codes), nlohmann::json{{"codes", j}}.dump(1) + "\n");
  if (!images.empty()) write_ppm(resolve(out_dir, "samples.ppm").string(), make_grid({images}));
  out << "sampled " << codes.size() << " " << display_name(opt.space) << " codes\n";
  return kExitOk;
}

inline std::vector<LatentCode> load_codes(const fs::path& path) {
  const auto j = nlohmann::json::parse(read_file(path.string()));
  std::vector<LatentCode> out;
  for (const auto& c : j.at("codes")) out.push_back(code_from_json(c));
  return out;
}

// ---------------------------------------------------------------------------
// invert

struct InvertOptions {
  std::string weights = "generator.sgz";
  std::vector<SpaceTag> spaces = {SpaceTag::kFZ};
  TargetSpec target{1, 0, 1, 0.0, {}};
  InversionOptions inversion;
  std::uint64_t seed = 0;
};

inline std::string curve_csv(const InversionResult& r) {
  std::string s = csv_line({"step", "total", "pixel", "perceptual", "regularizer"});
  for (std::size_t t = 0; t < r.trajectory.size(); ++t) {
    const LossTerms& l = r.trajectory[t];
    s += csv_line({std::to_string(t), format_real(l.total), format_real(l.pixel), format_real(l.perceptual),
                   format_real(l.regularizer)});
  }
  return s;
}

inline int run_invert(const InvertOptions& opt, const fs::path& out_dir, std::ostream& out) {
  const GeneratorBundle bundle = load_bundle(out_dir, opt.weights);
  auto targets = make_targets(bundle, opt.target, out_dir);
  if (targets.size() != 1) throw ConfigError("invert: expected exactly one target");
  const InversionPriors priors = make_priors(bundle, opt.inversion, opt.spaces);
  const InversionGrid grid = run_inversions(bundle, targets, opt.spaces, opt.inversion, priors, opt.seed);
  const Target& t = grid.targets[0];
  write_ppm(resolve(out_dir, "target.ppm").string(), t.image);
  const FeatureExtractor id_fx(kIdentitySeed);
  int code = kExitOk;
  for (std::size_t s = 0; s < opt.spaces.size(); ++s) {
    const std::string tok = space_token(opt.spaces[s]);
    if (const auto* err = std::get_if<std::string>(&grid.at(0, s))) {
      out << display_name(opt.spaces[s]) << ": failed: " << *err << "\n";
      code = kExitNumerical;
      continue;
    }
    const InversionResult& r = std::get<InversionResult>(grid.at(0, s));
    write_text(resolve(out_dir, "invert_" + tok + ".json"), result_to_json(r).dump(1) + "\n");
    write_ppm(resolve(out_dir, "invert_" + tok + ".ppm").string(), r.image);
    write_text(resolve(out_dir, "curve_" + tok + ".csv"), curve_csv(r));
    const MetricsRow row = reconstruction_row(t.id, tok, r.image, t.image, priors.extractor, id_fx);
    out << display_name(opt.spaces[s]) << ": mse " << brief(row.mse) << " ssim " << brief(row.ssim)
        << " perceptual " << brief(row.perceptual) << "\n";
  }
  return code;
}

// ---------------------------------------------------------------------------
// pti

struct PtiOptions {
  std::string weights = "generator.sgz";
  std::string pivot;  // invert JSON; empty: invert first
  SpaceTag space = SpaceTag::kFZ;
  TargetSpec target{1, 0, 1, 0.0, {}};
  InversionOptions inversion;
  PtiConfig pti;
  std::string tuned_weights = "pti_generator.sgz";
  std::uint64_t seed = 0;
};

inline nlohmann::json pti_report_json(const PtiReport& r) {
  return {{"pre_loss", r.pre_loss},
          {"post_loss", r.post_loss},
          {"locality_drift", r.locality_drift},
          {"trajectory", r.trajectory}};
}

inline int run_pti(const PtiOptions& opt, const fs::path& out_dir, std::ostream& out) {
  const GeneratorBundle bundle = load_bundle(out_dir, opt.weights);
  auto targets = make_targets(bundle, opt.target, out_dir);
  if (targets.size() != 1) throw ConfigError("pti: expected exactly one target");
  const Target& t = targets[0];
  const FeatureExtractor fx(kPerceptualSeed);
  InversionResult pivot;
  if (!opt.pivot.empty()) {
    const fs::path p = resolve(out_dir, opt.pivot);
    if (!fs::exists(p)) throw ConfigError("pivot file not found: " + p.string());
    pivot = result_from_json(nlohmann::json::parse(read_file(p.string())));
    pivot.image = render(bundle, pivot.code);
  } else {
    InversionConfig cfg = opt.inversion.base;
    cfg.space = opt.space;
    cfg.seed = job_seed(opt.seed, t.id, opt.space);
    pivot = invert(bundle, t.image, cfg, make_priors(bundle, opt.inversion, {opt.space}));
  }
  PtiConfig pc = opt.pti;
  pc.seed = derive_seed(opt.seed, hash_name("pti/" + t.id));
  const auto [tuned, report] = pivotal_tune(bundle, pivot, t.image, pc, fx);
  const fs::path wp = resolve(out_dir, opt.tuned_weights);
  if (wp.has_parent_path()) fs::create_directories(wp.parent_path());
  save_weights(wp.string(), tuned);
  write_text(resolve(out_dir, "pti_report.json"), pti_report_json(report).dump(1) + "\n");
  write_ppm(resolve(out_dir, "pti_target.ppm").string(), t.image);
  write_ppm(resolve(out_dir, "pti_before.ppm").string(), render(bundle, pivot.code));
  write_ppm(resolve(out_dir, "pti_after.ppm").string(), render(tuned, pivot.code));
  out << "pti " << kind_token(pivot.code.kind) << ": loss " << brief(report.pre_loss) << " -> "
      << brief(report.post_loss) << ", locality drift " << brief(report.locality_drift) << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// directions

struct DirectionsOptions {
  std::string weights = "generator.sgz";
  std::string method = "pca";  // pca | boundary | random
  SpaceTag space = SpaceTag::kW;
  std::size_t k = 5;
  std::size_t samples = 10000;
  std::string oracles = "brightness,asymmetry,redness";
  std::string output = "directions.json";
  std::uint64_t seed = 0;
};

inline std::vector<Direction> compute_directions(const GeneratorBundle& bundle, const DirectionsOptions& opt) {
  if (opt.space != SpaceTag::kZ && opt.space != SpaceTag::kW) throw ConfigError("directions: space must be z or w");
  const std::size_t d = bundle.config().latent_dim;
  std::vector<Direction> dirs;
  if (opt.method == "pca") {
    if (opt.space != SpaceTag::kW) throw ConfigError("directions: pca directions live in W");
    dirs = pca_directions(bundle, opt.samples, opt.k, opt.seed);
  } else if (opt.method == "boundary") {
    for (const auto& name : split_list(opt.oracles)) {
      const AttributeOracle o = make_oracle(name, bundle, 201, opt.seed);
      Direction dir = boundary_direction(opt.space, bundle, o, opt.samples, derive_seed(opt.seed, hash_name(name)));
      dir.metadata["threshold"] = o.threshold;
      dirs.push_back(std::move(dir));
    }
  } else if (opt.method == "random") {
    for (std::size_t k = 0; k < opt.k; ++k) dirs.push_back(random_direction(opt.space, d, derive_seed(opt.seed, k)));
  } else {
    throw ConfigError("directions: unknown method '" + opt.method + "' (pca, boundary, random)");
  }
  return dirs;
}

inline nlohmann::json directions_json(const std::vector<Direction>& dirs) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& d : dirs) arr.push_back(direction_to_json(d));
  return {{"directions", arr}};
}

inline std::vector<Direction> load_directions(const fs::path& p) {
  if (!fs::exists(p)) throw ConfigError("directions file not found: " + p.string());
  std::vector<Direction> out;
  const nlohmann::json j = nlohmann::json::parse(read_file(p.string()));
  for (const auto& d : j.at("directions")) out.push_back(direction_from_json(d));
  return out;
}

inline int run_directions(const DirectionsOptions& opt, const fs::path& out_dir, std::ostream& out) {
  const GeneratorBundle bundle = load_bundle(out_dir, opt.weights);
  const auto dirs = compute_directions(bundle, opt);
  write_text(resolve(out_dir, opt.output), directions_json(dirs).dump(1) + "\n");
  for (std::size_t k = 0; k < dirs.size(); ++k) {
    out << "d" << k << " " << source_token(dirs[k].source) << " " << space_token(dirs[k].space);
    for (const auto& [key, v] : dirs[k].metadata) out << " " << key << "=" << brief(v);
    out << "\n";
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// recon-table

struct ReconTableOptions {
  std::string weights = "generator.sgz";
  std::vector<SpaceTag> spaces = {SpaceTag::kZ, SpaceTag::kZPlus, SpaceTag::kWPlus, SpaceTag::kFW, SpaceTag::kFZ};
  TargetSpec targets;
  InversionOptions inversion;
  bool pti = false;
  PtiConfig pti_config;
  double margin_mse = 1e-3;
  double margin_ssim = 0.02;
  std::uint64_t seed = 0;
};

struct SpaceSummary {
  std::string space;
  std::size_t count = 0;
  std::size_t failures = 0;
  double mean_mse = 0.0, mean_ssim = 0.0, mean_perceptual = 0.0, mean_identity = 0.0;
};

/// Per-space means over non-failed rows, in first-appearance order.
inline std::vector<SpaceSummary> summarize(const std::vector<MetricsRow>& rows) {
  std::vector<SpaceSummary> out;
  for (const MetricsRow& r : rows) {
    auto it = std::find_if(out.begin(), out.end(), [&](const SpaceSummary& s) { return s.space == r.space; });
    if (it == out.end()) {
      out.push_back({r.space});
      it = out.end() - 1;
    }
    if (std::isnan(r.mse)) {
      ++it->failures;
      continue;
    }
    ++it->count;
    it->mean_mse += r.mse;
    it->mean_ssim += r.ssim;
    it->mean_perceptual += r.perceptual;
    it->mean_identity += r.identity.value_or(0.0);
  }
  for (SpaceSummary& s : out) {
    if (s.count == 0) continue;
    const double n = static_cast<double>(s.count);
    s.mean_mse /= n;
    s.mean_ssim /= n;
    s.mean_perceptual /= n;
    s.mean_identity /= n;
  }
  return out;
}

inline nlohmann::json noninferiority_json(const NonInferiorityResult& r) {
  return {{"n", r.n},          {"margin", r.margin},           {"mean_difference", r.mean},
          {"stddev", r.stddev}, {"t_statistic", r.t_statistic}, {"p_value", r.p_value},
          {"degenerate", r.degenerate}};
}

/// Paired differences new - baseline over targets where both rows succeeded.
inline std::vector<double> paired_differences(const std::vector<MetricsRow>& rows, const std::string& fresh,
                                              const std::string& baseline, double MetricsRow::*field) {
  std::map<std::string, double> a, b;
  for (const auto& r : rows) {
    if (std::isnan(r.mse)) continue;
    if (r.space == fresh) a[r.target] = r.*field;
    if (r.space == baseline) b[r.target] = r.*field;
  }
  std::vector<double> d;
  for (const auto& [t, v] : a) {
    if (b.count(t)) d.push_back(v - b.at(t));
  }
  return d;
}

inline nlohmann::json recon_summary_json(const std::vector<MetricsRow>& rows, std::size_t n_targets, double margin_mse,
                                         double margin_ssim) {
  nlohmann::json spaces = nlohmann::json::array();
  for (const SpaceSummary& s : summarize(rows)) {
    auto mean = [&](double v) { return s.count ? nlohmann::json(v) : nlohmann::json(nullptr); };
    spaces.push_back({{"space", s.space},
                      {"count", s.count},
                      {"failures", s.failures},
                      {"mean_mse", mean(s.mean_mse)},
                      {"mean_ssim", mean(s.mean_ssim)},
                      {"mean_perceptual", mean(s.mean_perceptual)},
                      {"mean_identity", mean(s.mean_identity)}});
  }
  nlohmann::json ni = nullptr;
  const std::string fz = space_token(SpaceTag::kFZ), fw = space_token(SpaceTag::kFW);
  const auto dm = paired_differences(rows, fz, fw, &MetricsRow::mse);
  const auto ds = paired_differences(rows, fz, fw, &MetricsRow::ssim);
  if (dm.size() >= 3) {
    ni = {{"new", fz},
          {"baseline", fw},
          {"mse", noninferiority_json(noninferiority_test(dm, margin_mse, MetricSense::kLowerIsBetter))},
          {"ssim", noninferiority_json(noninferiority_test(ds, margin_ssim, MetricSense::kHigherIsBetter))}};
  }
  return {{"targets", n_targets}, {"spaces", spaces}, {"noninferiority", ni}, {"notice", kSurrogateNotice}};
}

inline int run_recon_table(const ReconTableOptions& opt, const fs::path& out_dir, std::ostream& out) {
  const GeneratorBundle bundle = load_bundle(out_dir, opt.weights);
  auto targets = make_targets(bundle, opt.targets, out_dir);
  std::sort(targets.begin(), targets.end(), [](const Target& a, const Target& b) { return a.id < b.id; });
  const InversionPriors priors = make_priors(bundle, opt.inversion, opt.spaces);
  const InversionGrid grid = run_inversions(bundle, std::move(targets), opt.spaces, opt.inversion, priors, opt.seed);
  const FeatureExtractor id_fx(kIdentitySeed);

  // PTI rows reuse each successful pivot.
  std::vector<std::optional<Image>> tuned(grid.outcomes.size());
  if (opt.pti) {
    parallel_for(grid.outcomes.size(), [&](std::size_t j) {
      const auto* r = std::get_if<InversionResult>(&grid.outcomes[j]);
      if (!r) return;
      const Target& t = grid.targets[j / opt.spaces.size()];
      PtiConfig pc = opt.pti_config;
      pc.seed = derive_seed(opt.seed, hash_name("pti/" + t.id + "/" + space_token(r->space)));
      try {
        const auto result = pivotal_tune(bundle, *r, t.image, pc, priors.extractor);
        tuned[j] = render(result.first, r->code);
      } catch (const NumericalError&) {
      }
    });
  }

  std::vector<MetricsRow> rows;
  std::size_t failures = 0;
  std::vector<std::vector<std::vector<Image>>> grids(opt.spaces.size());
  for (std::size_t t = 0; t < grid.targets.size(); ++t) {
    const Target& tg = grid.targets[t];
    for (std::size_t s = 0; s < opt.spaces.size(); ++s) {
      const std::string tok = space_token(opt.spaces[s]);
      const std::size_t j = t * opt.spaces.size() + s;
      const auto* r = std::get_if<InversionResult>(&grid.outcomes[j]);
      if (!r) {
        rows.push_back(failed_row(tg.id, tok));
        ++failures;
        if (opt.pti) rows.push_back(failed_row(tg.id, tok + "+pti"));
        continue;
      }
      rows.push_back(reconstruction_row(tg.id, tok, r->image, tg.image, priors.extractor, id_fx));
      grids[s].push_back({tg.image, r->image});
      if (opt.pti) {
        if (tuned[j]) {
          rows.push_back(reconstruction_row(tg.id, tok + "+pti", *tuned[j], tg.image, priors.extractor, id_fx));
          grids[s].back().push_back(*tuned[j]);
        } else {
          rows.push_back(failed_row(tg.id, tok + "+pti"));
          ++failures;
        }
      }
    }
  }
  write_text(resolve(out_dir, "recon.csv"), to_csv(rows));
  for (std::size_t s = 0; s < opt.spaces.size(); ++s) {
    if (!grids[s].empty()) write_ppm(resolve(out_dir, "grid_" + space_token(opt.spaces[s]) + ".ppm").string(), make_grid(grids[s]));
  }
  const nlohmann::json summary = recon_summary_json(rows, grid.targets.size(), opt.margin_mse, opt.margin_ssim);
  write_text(resolve(out_dir, "summary.json"), summary.dump(1) + "\n");
  for (const auto& s : summary.at("spaces")) {
    if (s.at("count").get<std::size_t>() == 0) continue;
    out << s.at("space").get<std::string>() << ": mean mse " << brief(s.at("mean_mse").get<double>())
        << " ssim " << brief(s.at("mean_ssim").get<double>()) << " (n=" << s.at("count").get<std::size_t>()
        << ")\n";
  }
  if (!summary.at("noninferiority").is_null()) {
    out << "non-inferiority F/Z+ vs F/W+: p(mse) "
        << brief(summary.at("noninferiority").at("mse").at("p_value").get<double>()) << " p(ssim) "
        << brief(summary.at("noninferiority").at("ssim").at("p_value").get<double>()) << "\n";
  }
  if (failures > 0) {
    out << failures << " inversion(s) failed\n";
    return kExitNumerical;
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// edit-sweep

struct EditSweepOptions {
  std::string weights = "generator.sgz";
  std::vector<SpaceTag> spaces = {SpaceTag::kZPlus, SpaceTag::kFZ, SpaceTag::kWPlus, SpaceTag::kFW};
  TargetSpec targets{5, 0, 1, 0.0, {}};
  InversionOptions inversion;
  std::string directions;  // JSON file; empty: computed
  std::size_t num_directions = 5;
  std::size_t direction_samples = 2000;
  std::vector<double> alphas = default_alpha_grid();
  std::size_t pn_samples = 10000;
  std::uint64_t seed = 0;
};

/// W directions from principal components; Z directions from attribute
/// boundaries, topped up with random directions.
inline std::vector<Direction> default_sweep_directions(const GeneratorBundle& bundle, const EditSweepOptions& opt,
                                                       bool need_z, bool need_w) {
  std::vector<Direction> dirs;
  const std::size_t d = bundle.config().latent_dim;
  if (need_w) {
    const std::size_t n = std::max(opt.direction_samples, 10 * d);
    for (Direction& x : pca_directions(bundle, n, std::min(opt.num_directions, d), opt.seed)) dirs.push_back(std::move(x));
  }
  if (need_z) {
    std::size_t added = 0;
    for (const auto& name : oracle_names()) {
      if (added == opt.num_directions) break;
      const AttributeOracle o = make_oracle(name, bundle, 201, opt.seed);
      dirs.push_back(boundary_direction(SpaceTag::kZ, bundle, o, opt.direction_samples, derive_seed(opt.seed, hash_name(name))));
      ++added;
    }
    for (std::size_t k = 0; added < opt.num_directions; ++k, ++added) {
      dirs.push_back(random_direction(SpaceTag::kZ, d, derive_seed(opt.seed, 0x2000 + k)));
    }
  }
  return dirs;
}

struct SweepKey {
  std::string space;
  std::size_t direction;
  double alpha;
  auto operator<=>(const SweepKey&) const = default;
};

inline int run_edit_sweep(const EditSweepOptions& opt, const fs::path& out_dir, std::ostream& out) {
  if (opt.alphas.empty()) throw ConfigError("alpha grid is empty");
  const GeneratorBundle bundle = load_bundle(out_dir, opt.weights);
  auto targets = make_targets(bundle, opt.targets, out_dir);
  std::sort(targets.begin(), targets.end(), [](const Target& a, const Target& b) { return a.id < b.id; });
  bool need_z = false, need_w = false, need_pn = false;
  for (SpaceTag s : opt.spaces) {
    const CodeKind k = code_kind(s);
    need_z = need_z || is_sphere_kind(k);
    need_w = need_w || !is_sphere_kind(k);
    need_pn = need_pn || is_w_kind(k);
  }
  std::vector<Direction> dirs = opt.directions.empty() ? default_sweep_directions(bundle, opt, need_z, need_w)
                                                       : load_directions(resolve(out_dir, opt.directions));
  write_text(resolve(out_dir, "sweep_directions.json"), directions_json(dirs).dump(1) + "\n");
  std::optional<PnModel> pn;
  if (need_pn) pn = fit_pn(bundle, std::max(opt.pn_samples, 10 * bundle.config().latent_dim), opt.seed);

  const InversionPriors priors = make_priors(bundle, opt.inversion, opt.spaces);
  const InversionGrid grid = run_inversions(bundle, targets, opt.spaces, opt.inversion, priors, opt.seed);
  const FeatureExtractor id_fx(kIdentitySeed);

  // (target, space) -> rows; filled in parallel, flushed in key order.
  std::vector<std::vector<MetricsRow>> job_rows(grid.outcomes.size());
  std::vector<std::vector<std::pair<std::size_t, std::vector<Image>>>> job_strips(grid.outcomes.size());
  parallel_for(grid.outcomes.size(), [&](std::size_t j) {
    const auto* r = std::get_if<InversionResult>(&grid.outcomes[j]);
    const Target& t = grid.targets[j / opt.spaces.size()];
    const SpaceTag space = opt.spaces[j % opt.spaces.size()];
    const std::string tok = space_token(space);
    for (std::size_t k = 0; k < dirs.size(); ++k) {
      if (!compatible(dirs[k], code_kind(space))) continue;
      const std::string id = t.id + ":d" + std::to_string(k);
      if (!r) {
        for (double a : opt.alphas) {
          MetricsRow row = failed_row(id, tok);
          row.alpha = a;
          job_rows[j].push_back(row);
        }
        continue;
      }
      std::vector<Image> strip = {t.image};
      for (const SweepPoint& p : edit_sweep(bundle, r->code, dirs[k], opt.alphas, pn ? &*pn : nullptr)) {
        MetricsRow row = reconstruction_row(id, tok, p.image, t.image, priors.extractor, id_fx);
        row.alpha = p.alpha;
        row.indist = p.score;
        job_rows[j].push_back(row);
        strip.push_back(p.image);
      }
      job_strips[j].push_back({k, std::move(strip)});
    }
  });

  std::vector<MetricsRow> rows;
  std::map<SweepKey, std::pair<double, std::size_t>> curve_id;
  std::map<SweepKey, std::pair<double, std::size_t>> curve_indist;
  std::size_t failures = 0;
  for (std::size_t j = 0; j < job_rows.size(); ++j) {
    for (const MetricsRow& row : job_rows[j]) {
      rows.push_back(row);
      if (std::isnan(row.mse)) {
        ++failures;
        continue;
      }
      const std::size_t k = std::stoul(row.target.substr(row.target.find(":d") + 2));
      const SweepKey key{row.space, k, *row.alpha};
      auto& c = curve_id[key];
      c.first += *row.identity;
      ++c.second;
      if (row.indist) {
        auto& ci = curve_indist[key];
        ci.first += *row.indist;
        ++ci.second;
      }
    }
    const Target& t = grid.targets[j / opt.spaces.size()];
    const std::string tok = space_token(opt.spaces[j % opt.spaces.size()]);
    for (const auto& [k, strip] : job_strips[j]) {
      write_ppm(resolve(out_dir, "strip_" + t.id + "_" + tok + "_d" + std::to_string(k) + ".ppm").string(), make_grid({strip}));
    }
  }
  write_text(resolve(out_dir, "sweep.csv"), to_csv(rows));

  std::string curves = csv_line({"space", "direction", "alpha", "mean_identity", "mean_indist", "count"});
  std::map<std::string, std::pair<double, std::size_t>> per_space;
  for (const auto& [key, v] : curve_id) {
    const auto it = curve_indist.find(key);
    const std::string indist = it == curve_indist.end() ? "" : format_real(it->second.first / static_cast<double>(it->second.second));
    curves += csv_line({key.space, "d" + std::to_string(key.direction), format_real(key.alpha),
                        format_real(v.first / static_cast<double>(v.second)), indist, std::to_string(v.second)});
    if (key.alpha != 0.0) {
      per_space[key.space].first += v.first;
      per_space[key.space].second += v.second;
    }
  }
  write_text(resolve(out_dir, "curves.csv"), curves);

  nlohmann::json summary = nlohmann::json::object();
  for (SpaceTag s : opt.spaces) {
    const auto it = per_space.find(space_token(s));
    if (it == per_space.end()) continue;
    const double m = it->second.first / static_cast<double>(it->second.second);
    summary[space_token(s)] = {{"mean_identity_edited", m}, {"rows", it->second.second}};
    out << display_name(s) << ": mean identity over edits " << brief(m) << "\n";
  }
  write_text(resolve(out_dir, "sweep_summary.json"),
             nlohmann::json{{"spaces", summary}, {"alphas", opt.alphas}, {"notice", kSurrogateNotice}}.dump(1) + "\n");
  if (failures > 0) {
    out << failures << " sweep row(s) failed\n";
    return kExitNumerical;
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// gradcheck

inline int run_gradcheck(const BatteryOptions& opt, std::ostream& out) {
  const BatteryReport r = run_gradcheck_battery(opt);
  std::size_t failed = 0;
  for (const BatteryLine& l : r.lines) {
    std::size_t skipped = 0, scalars = 0;
    for (const auto& leaf : l.report.leaves) {
      skipped += leaf.skipped;
      scalars += leaf.scalars;
    }
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3e", l.report.max_rel_error());
    out << (l.report.passed ? "PASS " : "FAIL ") << l.graph << " seed=" << l.seed << " scalars=" << scalars
        << " max_rel_error=" << buf << " skipped=" << skipped << "\n";
    failed += !l.report.passed;
  }
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3e", r.max_rel_error());
  out << (r.passed ? "gradcheck passed: " : "gradcheck FAILED: ") << r.lines.size() - failed << "/" << r.lines.size()
      << " graphs within " << opt.tolerance << " (worst " << buf << ")\n";
  return r.passed ? kExitOk : kExitNumerical;
}

}  // namespace latent_atlas::bench
