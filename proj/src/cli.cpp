#include "shuffle_former/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "shuffle_former/checkpoint.hpp"
#include "shuffle_former/cost.hpp"
#include "shuffle_former/reachability.hpp"
#include "shuffle_former/train.hpp"

namespace shuffle_former {

std::string RunConfig::to_echo() const {
  std::ostringstream os;
  os << "# run.subcommand=" << subcommand << '\n';
  if (!variant.empty()) os << "# run.variant=" << variant << '\n';
  if (!config_path.empty()) os << "# run.config=" << config_path << '\n';
  if (shuffle) os << "# run.shuffle=" << to_string(*shuffle) << '\n';
  if (nwc) os << "# run.nwc=" << to_string(*nwc) << '\n';
  os << "# run.seed=" << seed << '\n';
  if (resolution > 0) os << "# run.resolution=" << resolution << '\n';
  for (const auto& [k, v] : paths) os << "# run.path." << k << '=' << v << '\n';
  for (const auto& [k, v] : extra) os << "# run." << k << '=' << v << '\n';
  return os.str();
}

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, std::uint64_t fallback) {
  if (flag) return *flag;
  if (const char* env = std::getenv("SHUFFLE_FORMER_SEED"); env && *env) {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(env, &used);
      if (used == std::string(env).size()) return v;
    } catch (const std::exception&) {
    }
    throw ConfigError(std::string("SHUFFLE_FORMER_SEED is not an unsigned integer: '") + env + "'");
  }
  return fallback;
}

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out << text;
  if (!out) throw ConfigError("write failed for '" + path + "'");
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::pair<std::int64_t, std::int64_t> parse_pair(const std::string& text, char sep, const char* what) {
  const auto pos = text.find(sep);
  try {
    if (pos == std::string::npos) {
      const auto v = std::stoll(text);
      return {v, v};
    }
    return {std::stoll(text.substr(0, pos)), std::stoll(text.substr(pos + 1))};
  } catch (const std::exception&) {
    throw ConfigError(std::string("bad ") + what + " '" + text + "'");
  }
}

// Flags shared by subcommands that build a model.
struct ModelFlags {
  std::string variant;
  std::string config;
  std::string shuffle;
  std::string nwc;

  void attach(CLI::App* app) {
    app->add_option("--variant", variant, "Model variant: T, S or B");
    app->add_option("--config", config, "key=value model config file");
    app->add_option("--shuffle", shuffle, "Shuffle mode: none, long, short, random");
    app->add_option("--nwc", nwc, "NWC position: none, A, B, C");
  }

  void fill(RunConfig& run) const {
    run.variant = variant;
    run.config_path = config;
    if (!shuffle.empty()) run.shuffle = parse_shuffle_mode(shuffle);
    if (!nwc.empty()) run.nwc = parse_nwc_position(nwc);
  }
};

struct SeedFlag {
  std::uint64_t value = 0;
  std::vector<CLI::Option*> opts;

  void attach(CLI::App* app) {
    opts.push_back(app->add_option("--seed", value, "Seed (overrides SHUFFLE_FORMER_SEED)"));
  }
  std::uint64_t resolve() const {
    const bool given = std::any_of(opts.begin(), opts.end(), [](const CLI::Option* o) { return o->count() > 0; });
    return resolve_seed(given ? std::optional<std::uint64_t>(value) : std::nullopt, 0);
  }
};

int cmd_stats(RunConfig& run, const std::string& out_prefix, const std::string& emit_config, std::ostream& out) {
  auto cfg = resolve_model_config(run, build_variant("T"));
  if (run.resolution <= 0) run.resolution = cfg.img_size;
  const auto report = cost_ledger(cfg, run.resolution, run.resolution);
  const auto echo = run.to_echo() + "# " + kCostConvention + '\n';
  out << report.to_text();
  if (!out_prefix.empty()) {
    write_file(out_prefix + ".csv", report.to_csv(run.to_echo()));
    write_file(out_prefix + ".txt", echo + report.to_text());
  }
  if (!emit_config.empty()) write_file(emit_config, cfg.to_text());
  return kExitOk;
}

struct ReachFlags {
  std::string stack;
  std::string grid = "8";
  std::int64_t window = 2;
  std::string probe = "0,0";
  std::string seeds = "1,2,3";
  double epsilon = 1e-3;
  double threshold = 1e-9;
  std::int64_t channels = 4;
  std::int64_t head_dim = 2;
  std::string out;
};

int cmd_reach(RunConfig& run, const ReachFlags& f, std::ostream& out, std::ostream& err) {
  const auto [gh, gw] = parse_pair(f.grid, 'x', "grid");
  const auto [ph, pw] = parse_pair(f.probe, ',', "probe");
  auto spec = StackSpec::parse(f.stack, gh, gw, f.window);
  spec.channels = f.channels;
  spec.head_dim = f.head_dim;
  spec.shuffle_seed = run.seed;
  spec.validate();

  ProbeOptions opts;
  opts.epsilon = f.epsilon;
  opts.threshold = f.threshold;
  opts.seeds.clear();
  for (const auto& s : split_list(f.seeds)) {
    try {
      opts.seeds.push_back(std::stoull(s));
    } catch (const std::exception&) {
      throw ConfigError("bad seed '" + s + "'");
    }
  }
  const auto fd = reachability_probe(spec, ph, pw, opts);
  const auto sym = symbolic_reachability(spec, ph, pw);
  const bool agree = fd.same_members(sym);

  nlohmann::json j;
  j["run_config"] = run.to_echo();
  j["stack"] = spec.describe();
  j["window"] = spec.window;
  j["fd"] = nlohmann::json::parse(fd.to_json());
  j["symbolic"] = nlohmann::json::parse(sym.to_json());
  j["agree"] = agree;
  j["full_grid"] = fd.full();
  j["strided"] = fd.strided();
  const auto text = j.dump(2);
  out << text << '\n';
  if (!f.out.empty()) write_file(f.out, text + '\n');
  if (!agree) {
    err << "check failed: finite-difference and symbolic reachability disagree (" << fd.size() << " vs "
        << sym.size() << " positions)\n";
    return kExitCheck;
  }
  return kExitOk;
}

struct TrainFlags {
  std::int64_t steps = 500;
  double lr = 1e-3;
  double weight_decay = 0.05;
  std::int64_t samples = 32;
  std::int64_t classes = 0;
  double noise = 1.0;
  double target = -1.0;
  std::int64_t log_every = 10;
  std::string log;
  std::string checkpoint;
};

int cmd_train(RunConfig& run, const TrainFlags& f, std::ostream& out, std::ostream& err) {
  auto cfg = resolve_model_config(run, toy_model_config());
  if (f.classes > 0) cfg.num_classes = f.classes;
  if (run.resolution > 0) cfg.img_size = run.resolution;
  run.resolution = cfg.img_size;
  if (f.steps < 0) throw ConfigError("--steps must be non-negative");

  const auto data = make_synthetic_dataset(f.samples, cfg.num_classes, cfg.img_size, cfg.img_size,
                                           Rng::derive_seed(run.seed, 1), f.noise);
  ShuffleTransformer<float> model(cfg, run.seed);
  TrainOptions opts;
  opts.steps = f.steps;
  opts.optimizer.lr = f.lr;
  opts.optimizer.weight_decay = f.weight_decay;
  opts.target_accuracy = f.target;

  std::ostringstream log;
  log << run.to_echo() << "step,loss,accuracy\n";
  const auto result = train_toy(model, data, opts, [&](const TrainRecord& r) {
    log << r.step << ',' << std::setprecision(9) << r.loss << ',' << r.accuracy << '\n';
    if (f.log_every > 0 && r.step % f.log_every == 0) {
      out << "step " << r.step << " loss " << std::fixed << std::setprecision(4) << r.loss << " acc "
          << r.accuracy << std::defaultfloat << '\n';
    }
  });
  if (!f.log.empty()) write_file(f.log, log.str());
  if (result.diverged) {
    err << "diverged: non-finite loss at step " << result.diverged_step << '\n';
    return kExitCheck;
  }
  out << "steps " << result.history.size() << " train_accuracy " << result.train_accuracy
      << " eval_accuracy " << result.eval_accuracy << '\n';
  if (!f.checkpoint.empty()) save_checkpoint(f.checkpoint, make_checkpoint(model, run.to_echo()));
  return kExitOk;
}

struct AblateFlags {
  std::string shuffles = "none,long,short,random";
  std::string nwcs = "none,A,B,C";
  bool train = false;
  std::int64_t steps = 100;
  std::string out;
};

int cmd_ablate(RunConfig& run, const AblateFlags& f, std::ostream& out) {
  if (run.shuffle || run.nwc) throw ConfigError("ablate sweeps --shuffles and --nwcs; drop --shuffle/--nwc");
  const auto base = resolve_model_config(run, build_variant("T"));
  if (run.resolution <= 0) run.resolution = base.img_size;

  std::ostringstream csv;
  csv << run.to_echo() << "# " << kCostConvention << '\n' << "shuffle,nwc,params,flops";
  if (f.train) csv << ",toy_steps,toy_train_accuracy,toy_eval_accuracy";
  csv << '\n';
  const auto data = f.train ? make_synthetic_dataset(32, toy_model_config().num_classes, 32, 32,
                                                     Rng::derive_seed(run.seed, 1))
                            : ToyDataset{};
  for (const auto& s : split_list(f.shuffles)) {
    for (const auto& n : split_list(f.nwcs)) {
      auto cfg = base;
      cfg.shuffle = parse_shuffle_mode(s);
      cfg.nwc = parse_nwc_position(n);
      const auto report = cost_ledger(cfg, run.resolution, run.resolution);
      csv << to_string(cfg.shuffle) << ',' << to_string(cfg.nwc) << ',' << report.total_params() << ','
          << report.total_flops();
      if (f.train) {
        auto toy = toy_model_config();
        toy.shuffle = cfg.shuffle;
        toy.nwc = cfg.nwc;
        ShuffleTransformer<float> model(toy, run.seed);
        TrainOptions opts;
        opts.steps = f.steps;
        const auto r = train_toy(model, data, opts);
        csv << ',' << r.history.size() << ',' << r.train_accuracy << ',' << r.eval_accuracy;
      }
      csv << '\n';
    }
  }
  out << csv.str();
  if (!f.out.empty()) write_file(f.out, csv.str());
  return kExitOk;
}

int cmd_infer(RunConfig& run, std::ostream& out) {
  const auto ckpt = load_checkpoint(run.paths.at("checkpoint"));
  auto model = model_from_checkpoint<float>(ckpt);
  model.set_requires_grad(false);
  std::string name;
  auto input = load_tensor_file<float>(run.paths.at("input"), &name);
  if (input.rank() == 3) input = reshape(input, {1, input.dim(0), input.dim(1), input.dim(2)});
  if (input.rank() != 4 || input.dim(1) != model.config().in_chans) {
    throw ShapeError("input tensor '" + name + "' must be (N, " + std::to_string(model.config().in_chans) +
                     ", H, W), got " + shape_str(input.shape()));
  }
  run.resolution = input.dim(2);
  const auto logits = model.forward(input, NormMode::eval);
  save_tensor_file(run.paths.at("output"), "logits", logits, run.to_echo());
  out << "logits " << shape_str(logits.shape()) << " -> " << run.paths.at("output") << '\n';
  return kExitOk;
}

}  // namespace

ModelConfig resolve_model_config(const RunConfig& run, const ModelConfig& fallback) {
  if (!run.variant.empty() && !run.config_path.empty()) {
    throw ConfigError("give either --variant or --config, not both");
  }
  ModelConfig cfg = fallback;
  if (!run.config_path.empty()) cfg = ModelConfig::from_text(read_file(run.config_path));
  if (!run.variant.empty()) cfg = build_variant(run.variant);
  if (run.shuffle) cfg.shuffle = *run.shuffle;
  if (run.nwc) cfg.nwc = *run.nwc;
  cfg.validate();
  return cfg;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Shuffle Transformer toolkit: cost ledgers, reachability probes, toy training, inference"};
  app.name("shuffle-former");
  app.require_subcommand(1);

  RunConfig run;
  ModelFlags model_flags;
  SeedFlag seed_flag;

  auto* stats = app.add_subcommand("stats", "Parameter and FLOP ledger");
  std::string stats_out, emit_config;
  model_flags.attach(stats);
  seed_flag.attach(stats);
  stats->add_option("--res", run.resolution, "Input resolution (square)");
  stats->add_option("--out", stats_out, "Write <out>.csv and <out>.txt");
  stats->add_option("--emit-config", emit_config, "Write the resolved model config");

  auto* reach = app.add_subcommand("reach", "Finite-difference and symbolic reachability");
  ReachFlags reach_flags;
  seed_flag.attach(reach);
  reach->add_option("--stack", reach_flags.stack,
                    "Layers: wmsa | swmsa[:mode] | nwc | mlp | block[:mode[:A|B|C|none]]")
      ->required();
  reach->add_option("--grid", reach_flags.grid, "Grid N or HxW");
  reach->add_option("--window", reach_flags.window, "Window size M");
  reach->add_option("--probe", reach_flags.probe, "Probe position h,w");
  reach->add_option("--seeds", reach_flags.seeds, "Weight seeds for the probe union");
  reach->add_option("--epsilon", reach_flags.epsilon, "Input perturbation");
  reach->add_option("--threshold", reach_flags.threshold, "Relative influence threshold");
  reach->add_option("--channels", reach_flags.channels, "Probe channels");
  reach->add_option("--head-dim", reach_flags.head_dim, "Probe head width");
  reach->add_option("--out", reach_flags.out, "Write the JSON report");

  auto* train = app.add_subcommand("train", "Toy overfit run on a synthetic dataset");
  TrainFlags train_flags;
  model_flags.attach(train);
  seed_flag.attach(train);
  train->add_option("--res", run.resolution, "Input resolution (default: config img_size)");
  train->add_option("--steps", train_flags.steps, "Optimizer steps");
  train->add_option("--lr", train_flags.lr, "AdamW learning rate");
  train->add_option("--weight-decay", train_flags.weight_decay, "AdamW decoupled weight decay");
  train->add_option("--samples", train_flags.samples, "Synthetic samples");
  train->add_option("--classes", train_flags.classes, "Classes (default: config num_classes)");
  train->add_option("--noise", train_flags.noise, "Per-sample noise std around class prototypes");
  train->add_option("--target", train_flags.target, "Stop at this train accuracy");
  train->add_option("--log-every", train_flags.log_every, "Print every N steps (0: quiet)");
  train->add_option("--log", train_flags.log, "Write step,loss,accuracy CSV");
  train->add_option("--checkpoint", train_flags.checkpoint, "Write the trained checkpoint");

  auto* ablate = app.add_subcommand("ablate", "Shuffle x NWC ablation table");
  AblateFlags ablate_flags;
  model_flags.attach(ablate);
  seed_flag.attach(ablate);
  ablate->add_option("--res", run.resolution, "Input resolution");
  ablate->add_option("--shuffles", ablate_flags.shuffles, "Shuffle modes to sweep");
  ablate->add_option("--nwcs", ablate_flags.nwcs, "NWC positions to sweep");
  ablate->add_flag("--train", ablate_flags.train, "Add toy-training columns per cell");
  ablate->add_option("--steps", ablate_flags.steps, "Toy steps per cell");
  ablate->add_option("--out", ablate_flags.out, "Write the CSV table");

  auto* infer = app.add_subcommand("infer", "Logits for a tensor file");
  std::string ckpt_path, input_path, output_path;
  seed_flag.attach(infer);
  infer->add_option("--checkpoint", ckpt_path, "Checkpoint file")->required();
  infer->add_option("--input", input_path, "Input tensor file (N,C,H,W)")->required();
  infer->add_option("--output", output_path, "Output logits tensor file")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitInvalid;
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    run.subcommand = sub->get_name();
    model_flags.fill(run);
    run.seed = seed_flag.resolve();
    if (run.subcommand == "stats") {
      if (!stats_out.empty()) run.paths["out"] = stats_out;
      return cmd_stats(run, stats_out, emit_config, out);
    }
    if (run.subcommand == "reach") {
      run.extra["stack"] = reach_flags.stack;
      run.extra["grid"] = reach_flags.grid;
      run.extra["window"] = std::to_string(reach_flags.window);
      run.extra["probe"] = reach_flags.probe;
      run.extra["seeds"] = reach_flags.seeds;
      return cmd_reach(run, reach_flags, out, err);
    }
    if (run.subcommand == "train") {
      run.extra["steps"] = std::to_string(train_flags.steps);
      run.extra["lr"] = std::to_string(train_flags.lr);
      run.extra["samples"] = std::to_string(train_flags.samples);
      if (!train_flags.checkpoint.empty()) run.paths["checkpoint"] = train_flags.checkpoint;
      if (!train_flags.log.empty()) run.paths["log"] = train_flags.log;
      return cmd_train(run, train_flags, out, err);
    }
    if (run.subcommand == "ablate") {
      run.extra["shuffles"] = ablate_flags.shuffles;
      run.extra["nwcs"] = ablate_flags.nwcs;
      if (ablate_flags.train) run.extra["toy_steps"] = std::to_string(ablate_flags.steps);
      return cmd_ablate(run, ablate_flags, out);
    }
    run.paths["checkpoint"] = ckpt_path;
    run.paths["input"] = input_path;
    run.paths["output"] = output_path;
    return cmd_infer(run, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kExitCheck;
  }
}

}  // namespace shuffle_former
