#pragma once

// Command-line front end. Config files hold `key = value` lines grouped by
// `[section]` headers; keys outside any section or under [common] apply to
// every subcommand, keys under [<subcommand>] only to that one. Each key is
// the name of a flag and flags given on the command line win.

#include "CLI11.hpp"

#include <iostream>

#include "latent_atlas/bench.hpp"

namespace latent_atlas::cli {

namespace fs = std::filesystem;

struct ConfigEntry {
  std::string section;
  std::string key;
  std::string value;
  std::size_t line = 0;
};

inline std::vector<ConfigEntry> parse_config(const std::string& text) {
  std::vector<ConfigEntry> out;
  std::string section;
  std::stringstream ss(text);
  std::string raw;
  for (std::size_t n = 1; std::getline(ss, raw); ++n) {
    std::string line = bench::trim(raw);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config line " + std::to_string(n) + ": unterminated section header");
      section = bench::trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(n) + ": expected key = value");
    std::string key = bench::trim(line.substr(0, eq));
    std::string value = bench::trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    if (key.empty()) throw ConfigError("config line " + std::to_string(n) + ": empty key");
    std::replace(key.begin(), key.end(), '_', '-');
    out.push_back({section, key, value, n});
  }
  return out;
}

namespace detail {

template <class E>
CLI::Option* add_enum(CLI::App* app, const std::string& name, E& target, std::function<E(const std::string&)> parse,
                      const std::string& help) {
  return app->add_option_function<std::string>(name, [&target, parse](const std::string& s) { target = parse(s); }, help);
}

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adam") return OptimizerKind::kAdam;
  if (s == "sgd") return OptimizerKind::kSgd;
  throw ConfigError("unknown optimizer '" + s + "' (adam, sgd)");
}

inline InitPolicy parse_init(const std::string& s) {
  if (s == "default") return InitPolicy::kDefault;
  if (s == "random") return InitPolicy::kRandom;
  throw ConfigError("unknown init policy '" + s + "' (default, random)");
}

struct Common {
  std::string out_dir = ".";
  std::uint64_t seed = 0;
  std::string config;
};

inline void add_common(CLI::App* app, Common& c) {
  app->add_option("--out-dir", c.out_dir, "Output directory; relative paths resolve against it");
  app->add_option("--seed", c.seed, "Master seed");
  app->add_option("--config", c.config, "Config file of key = value lines");
}

inline void add_targets(CLI::App* app, bench::TargetSpec& t, std::string& files, bool single) {
  if (single) {
    app->add_option("--target", files, "Target PPM; default is a generated in-domain target");
    app->add_option("--target-index", t.first, "Index of the generated target");
  } else {
    app->add_option("--targets", t.count, "Number of generated targets");
    app->add_option("--target-files", files, "Comma-separated target PPMs instead of generated ones");
  }
  app->add_option("--target-seed", t.seed, "Seed of generated targets");
  app->add_option("--noise", t.noise, "Gaussian pixel noise added to targets")->check(CLI::NonNegativeNumber);
}

inline void add_inversion(CLI::App* app, bench::InversionOptions& o, std::string& lambda_reg) {
  InversionConfig& c = o.base;
  app->add_option("--steps", c.steps, "Optimization steps");
  app->add_option("--lr", c.lr, "Learning rate");
  add_enum<OptimizerKind>(app, "--optimizer", c.optimizer, parse_optimizer, "adam or sgd");
  app->add_option("--beta1", c.beta1, "Adam first-moment decay");
  app->add_option("--beta2", c.beta2, "Adam second-moment decay");
  app->add_option("--lambda-pix", c.lambda_pix, "Pixel loss weight");
  app->add_option("--lambda-perc", c.lambda_perc, "Perceptual loss weight");
  app->add_option("--lambda-reg", lambda_reg, "P_N regularizer weight for W-type spaces");
  add_enum<InitPolicy>(app, "--init", c.init, parse_init, "default or random");
  app->add_option("--prior-samples", o.prior_samples, "Samples for the mean w and the P_N fit");
}

inline void add_pti(CLI::App* app, PtiConfig& p) {
  app->add_option("--pti-steps", p.steps, "Generator tuning steps");
  app->add_option("--pti-lr", p.lr, "Generator tuning learning rate");
  app->add_option("--lambda-loc", p.lambda_loc, "Locality loss weight");
  app->add_option("--locality-samples", p.locality_samples, "Locality codes per step");
}

inline void finish_inversion(bench::InversionOptions& o, const std::string& lambda_reg, std::uint64_t seed) {
  if (!lambda_reg.empty()) o.base.lambda_reg = bench::parse_real(lambda_reg, "--lambda-reg");
  o.prior_seed = seed;
  InversionConfig probe = o.base;
  probe.validate();
}

inline void finish_targets(bench::TargetSpec& t, const std::string& files, bool single) {
  t.files = bench::split_list(files);
  if (single) t.count = 1;
}

/// argv tokens with config-file entries inserted after the subcommand name,
/// so flags given explicitly come later and win.
inline std::vector<std::string> expand_args(CLI::App& app, std::vector<std::string> args) {
  std::size_t sub_pos = args.size();
  CLI::App* sub = nullptr;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (!args[i].empty() && args[i][0] != '-') {
      sub = app.get_subcommand_no_throw(args[i]);
      if (sub) sub_pos = i;
      break;
    }
  }
  if (!sub) return args;
  std::string config, out_dir = ".";
  for (std::size_t i = sub_pos + 1; i < args.size(); ++i) {
    for (auto [flag, dest] : {std::pair<std::string, std::string*>{"--config", &config}, {"--out-dir", &out_dir}}) {
      if (args[i] == flag && i + 1 < args.size()) *dest = args[i + 1];
      if (args[i].rfind(flag + "=", 0) == 0) *dest = args[i].substr(flag.size() + 1);
    }
  }
  if (config.empty()) return args;
  fs::path path(config);
  if (!fs::exists(path) && !path.is_absolute()) path = fs::path(out_dir) / path;
  if (!fs::exists(path)) throw ConfigError("config file not found: " + config);
  std::vector<std::string> extra;
  for (const ConfigEntry& e : parse_config(read_file(path.string()))) {
    const bool global = e.section.empty() || e.section == "common";
    if (!global && e.section != sub->get_name()) continue;
    if (e.key == "config") continue;
    if (!sub->get_option_no_throw("--" + e.key)) {
      if (global) continue;
      throw ConfigError("config line " + std::to_string(e.line) + ": unknown key '" + e.key + "' for " +
                        sub->get_name());
    }
    extra.push_back("--" + e.key + "=" + e.value);
  }
  args.insert(args.begin() + static_cast<std::ptrdiff_t>(sub_pos + 1), extra.begin(), extra.end());
  return args;
}

}  // namespace detail

/// Runs the tool. Returns 0 on success, 1 on usage or configuration errors,
/// 2 on numerical failures.
inline int run_cli(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"latent-atlas: inversion, editing and evaluation across nine latent spaces"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  detail::Common common;
  std::function<int()> action;
  const auto dir = [&] { return fs::path(common.out_dir); };
  auto ensure_dir = [&] { fs::create_directories(dir()); };

  // init-gen
  bench::InitGenOptions init_opt;
  std::string channels;
  {
    CLI::App* s = app.add_subcommand("init-gen", "Initialize a generator and write its weights");
    detail::add_common(s, common);
    GeneratorConfig& c = init_opt.config;
    s->add_option("--latent-dim", c.latent_dim, "Latent dimension d");
    s->add_option("--mapping-layers", c.mapping_layers, "Mapping network depth L");
    s->add_option("--layers", c.synthesis_layers, "Synthesis style inputs N");
    s->add_option("--split-layer", c.split_layer, "Feature split layer M (1-based)");
    s->add_option("--base-resolution", c.base_resolution, "Resolution of the constant input");
    s->add_option("--resolution", c.output_resolution, "Output resolution");
    s->add_option("--channels", channels, "Comma-separated channels per block");
    s->add_option("--weights", init_opt.weights, "Weights file");
    s->callback([&] {
      action = [&] {
        init_opt.config.seed = common.seed;
        if (!channels.empty()) init_opt.config.channels = bench::parse_size_list(channels, "--channels");
        init_opt.config.validate();
        ensure_dir();
        return bench::run_init_gen(init_opt, dir(), out);
      };
    });
  }

  // sample
  bench::SampleOptions sample_opt;
  {
    CLI::App* s = app.add_subcommand("sample", "Sample codes in a space and render them");
    detail::add_common(s, common);
    s->add_option("--weights", sample_opt.weights, "Weights file");
    detail::add_enum<SpaceTag>(s, "--space", sample_opt.space, parse_space, "Space token");
    s->add_option("--count", sample_opt.count, "Number of codes");
    s->add_option("--codes", sample_opt.codes, "Output codes file");
    s->callback([&] {
      action = [&] {
        sample_opt.seed = common.seed;
        ensure_dir();
        return bench::run_sample(sample_opt, dir(), out);
      };
    });
  }

  // invert
  bench::InvertOptions inv_opt;
  std::string inv_files, inv_spaces, inv_reg;
  {
    CLI::App* s = app.add_subcommand("invert", "Invert one target in one or more spaces");
    detail::add_common(s, common);
    s->add_option("--weights", inv_opt.weights, "Weights file");
    s->add_option("--space,--spaces", inv_spaces, "Comma-separated space tokens or 'all'");
    detail::add_targets(s, inv_opt.target, inv_files, true);
    detail::add_inversion(s, inv_opt.inversion, inv_reg);
    s->callback([&] {
      action = [&] {
        inv_opt.seed = common.seed;
        if (!inv_spaces.empty()) inv_opt.spaces = bench::parse_space_list(inv_spaces);
        detail::finish_targets(inv_opt.target, inv_files, true);
        detail::finish_inversion(inv_opt.inversion, inv_reg, common.seed);
        ensure_dir();
        return bench::run_invert(inv_opt, dir(), out);
      };
    });
  }

  // pti
  bench::PtiOptions pti_opt;
  std::string pti_files, pti_reg;
  {
    CLI::App* s = app.add_subcommand("pti", "Tune the generator around a pivot code");
    detail::add_common(s, common);
    s->add_option("--weights", pti_opt.weights, "Weights file");
    s->add_option("--pivot", pti_opt.pivot, "Inversion result JSON; default inverts first");
    detail::add_enum<SpaceTag>(s, "--space", pti_opt.space, parse_space, "Space of the pivot inversion");
    s->add_option("--tuned-weights", pti_opt.tuned_weights, "Output weights file");
    detail::add_targets(s, pti_opt.target, pti_files, true);
    detail::add_inversion(s, pti_opt.inversion, pti_reg);
    detail::add_pti(s, pti_opt.pti);
    s->callback([&] {
      action = [&] {
        pti_opt.seed = common.seed;
        detail::finish_targets(pti_opt.target, pti_files, true);
        detail::finish_inversion(pti_opt.inversion, pti_reg, common.seed);
        ensure_dir();
        return bench::run_pti(pti_opt, dir(), out);
      };
    });
  }

  // directions
  bench::DirectionsOptions dir_opt;
  {
    CLI::App* s = app.add_subcommand("directions", "Discover edit directions");
    detail::add_common(s, common);
    s->add_option("--weights", dir_opt.weights, "Weights file");
    s->add_option("--method", dir_opt.method, "pca, boundary or random");
    detail::add_enum<SpaceTag>(s, "--dir-space", dir_opt.space, parse_space, "z or w");
    s->add_option("--k", dir_opt.k, "Number of directions (pca, random)");
    s->add_option("--samples", dir_opt.samples, "Samples for PCA or boundary fitting");
    s->add_option("--oracle,--oracles", dir_opt.oracles, "Comma-separated attribute oracles");
    s->add_option("--output", dir_opt.output, "Output directions file");
    s->callback([&] {
      action = [&] {
        dir_opt.seed = common.seed;
        ensure_dir();
        return bench::run_directions(dir_opt, dir(), out);
      };
    });
  }

  // edit-sweep
  bench::EditSweepOptions sweep_opt;
  std::string sweep_files, sweep_spaces, sweep_alphas, sweep_reg;
  {
    CLI::App* s = app.add_subcommand("edit-sweep", "Edit inverted codes along directions and score them");
    detail::add_common(s, common);
    s->add_option("--weights", sweep_opt.weights, "Weights file");
    s->add_option("--spaces", sweep_spaces, "Comma-separated space tokens or 'all'");
    s->add_option("--directions", sweep_opt.directions, "Directions file; default computes them");
    s->add_option("--num-directions", sweep_opt.num_directions, "Directions per space type when computed");
    s->add_option("--direction-samples", sweep_opt.direction_samples, "Samples per computed direction");
    s->add_option("--alphas", sweep_alphas, "Comma-separated edit strengths");
    s->add_option("--pn-samples", sweep_opt.pn_samples, "Samples for the P_N fit used in scoring");
    detail::add_targets(s, sweep_opt.targets, sweep_files, false);
    detail::add_inversion(s, sweep_opt.inversion, sweep_reg);
    s->callback([&] {
      action = [&] {
        sweep_opt.seed = common.seed;
        if (!sweep_spaces.empty()) sweep_opt.spaces = bench::parse_space_list(sweep_spaces);
        sweep_opt.alphas = bench::parse_alpha_grid(sweep_alphas);
        detail::finish_targets(sweep_opt.targets, sweep_files, false);
        detail::finish_inversion(sweep_opt.inversion, sweep_reg, common.seed);
        ensure_dir();
        return bench::run_edit_sweep(sweep_opt, dir(), out);
      };
    });
  }

  // recon-table
  bench::ReconTableOptions table_opt;
  std::string table_files, table_spaces, table_reg;
  {
    CLI::App* s = app.add_subcommand("recon-table", "Reconstruction metrics for every target and space");
    detail::add_common(s, common);
    s->add_option("--weights", table_opt.weights, "Weights file");
    s->add_option("--spaces", table_spaces, "Comma-separated space tokens or 'all'");
    s->add_flag("--pti", table_opt.pti, "Also tune the generator around every inversion");
    s->add_option("--margin-mse", table_opt.margin_mse, "Non-inferiority margin on MSE");
    s->add_option("--margin-ssim", table_opt.margin_ssim, "Non-inferiority margin on SSIM");
    detail::add_targets(s, table_opt.targets, table_files, false);
    detail::add_inversion(s, table_opt.inversion, table_reg);
    detail::add_pti(s, table_opt.pti_config);
    s->callback([&] {
      action = [&] {
        table_opt.seed = common.seed;
        if (!table_spaces.empty()) table_opt.spaces = bench::parse_space_list(table_spaces);
        detail::finish_targets(table_opt.targets, table_files, false);
        detail::finish_inversion(table_opt.inversion, table_reg, common.seed);
        ensure_dir();
        return bench::run_recon_table(table_opt, dir(), out);
      };
    });
  }

  // gradcheck
  BatteryOptions grad_opt;
  {
    CLI::App* s = app.add_subcommand("gradcheck", "Finite-difference check of every primitive and loss graph");
    detail::add_common(s, common);
    s->add_option("--seeds", grad_opt.seeds, "Seeds per graph");
    s->add_option("--tolerance", grad_opt.tolerance, "Relative error tolerance");
    s->add_option("--step", grad_opt.step, "Central difference step");
    s->add_flag("--primitives", grad_opt.primitives, "Check primitives");
    s->add_flag("--end-to-end", grad_opt.end_to_end, "Check per-space loss graphs");
    s->add_flag("--check-pti", grad_opt.pti, "Check the generator tuning objective");
    s->add_flag("--inject-fault", grad_opt.inject_fault, "Add an op with a wrong derivative");
    s->callback([&] { action = [&] { return bench::run_gradcheck(grad_opt, out); }; });
  }

  try {
    std::vector<std::string> args(argv.begin() + (argv.empty() ? 0 : 1), argv.end());
    args = detail::expand_args(app, std::move(args));
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return bench::kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return bench::kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return bench::kExitUsage;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return bench::kExitUsage;
  }

  try {
    return action ? action() : bench::kExitUsage;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return bench::kExitNumerical;
  } catch (const std::invalid_argument& e) {  // ConfigError, ShapeError
    err << "error: " << e.what() << "\n";
    return bench::kExitUsage;
  } catch (const nlohmann::json::exception& e) {
    err << "error: malformed input: " << e.what() << "\n";
    return bench::kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return bench::kExitUsage;
  }
}

inline int run_cli(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return run_cli(std::vector<std::string>(argv, argv + argc), out, err);
}

}  // namespace latent_atlas::cli
