#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "revode/data.hpp"
#include "revode/model_io.hpp"
#include "revode/network.hpp"
#include "revode/stability.hpp"
#include "revode/train.hpp"
#include "revode/verify.hpp"

namespace revode::cli {

constexpr const char* kVersion = "0.1.0";

namespace detail {

namespace fs = std::filesystem;
using nlohmann::json;

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::vector<index_t> parse_int_list(const std::string& s, const std::string& flag) {
  std::vector<index_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    try {
      out.push_back(std::stoll(item));
    } catch (const std::exception&) {
      throw CLI::ValidationError(flag, "expected a comma-separated integer list, got '" + s + "'");
    }
  if (out.empty())
    throw CLI::ValidationError(flag, "expected a comma-separated integer list, got '" + s + "'");
  return out;
}

// Writes the run manifest beside outputs: seed, resolved config, config hash,
// version.
inline void write_manifest(const std::string& out_dir, const std::string& command,
                           const std::vector<std::string>& args, std::uint64_t seed,
                           const json& config) {
  fs::create_directories(out_dir);
  char hash[32];
  std::snprintf(hash, sizeof(hash), "%016llx",
                static_cast<unsigned long long>(fnv1a64(config.dump())));
  json manifest{{"command", command},
                {"args", args},
                {"seed", seed},
                {"config", config},
                {"config_hash", hash},
                {"version", kVersion}};
  std::ofstream os(fs::path(out_dir) / "manifest.json");
  os << manifest.dump(2) << "\n";
}

struct ArchFlags {
  std::string arch = "hamiltonian";
  std::string units = "6,6,6";
  std::string channels = "32,64,112";
  double h = 0.1;
  std::string activation = "relu";
  std::string leapfrog_init = "as-printed";
  index_t classes = 10;
  index_t in_channels = 3, in_h = 32, in_w = 32;

  ArchSpec build() const {
    ArchSpec a;
    a.kind = parse_block_kind(arch);
    const auto u = parse_int_list(units, "--units");
    const auto c = parse_int_list(channels, "--channels");
    if (u.size() != c.size())
      throw CLI::ValidationError("--channels", "unit and channel lists must have equal length");
    for (std::size_t i = 0; i < u.size(); ++i)
      a.units.push_back({static_cast<int>(u[i]), c[i]});
    a.h = h;
    a.act = parse_activation(activation);
    a.leapfrog_init = parse_leapfrog_init(leapfrog_init);
    a.classes = classes;
    a.in_channels = in_channels;
    a.in_h = in_h;
    a.in_w = in_w;
    a.validate();
    return a;
  }

  void add_options(CLI::App* cmd) {
    cmd->set_help_flag("--help", "print help");  // frees -h for the step size
    cmd->add_option("--arch", arch, "block kind")
        ->check(CLI::IsMember({"hamiltonian", "midpoint", "leapfrog", "resnet"}));
    cmd->add_option("--units", units, "blocks per unit, e.g. 6,6,6");
    cmd->add_option("--channels", channels, "channels per unit, e.g. 32,64,112");
    cmd->add_option("--h", h, "discretization step size");
    cmd->add_option("--activation", activation, "relu|tanh|identity");
    cmd->add_option("--leapfrog-init", leapfrog_init, "as-printed|zero-velocity");
  }
};

template <typename T>
int run_train_typed(const ArchSpec& arch, const TrainConfig& cfg, const std::string& data_dir,
                    const std::string& out_dir) {
  Dataset train = load_dataset_dir(data_dir, "train");
  Dataset test;
  try {
    test = load_dataset_dir(data_dir, "test");
  } catch (const std::exception& e) {
    std::cout << "note: no test split (" << e.what() << ")\n";
  }
  if (cfg.subsample_fraction < 1.0) {
    train = subsample(train, cfg.subsample_fraction, cfg.seed);
    std::cout << "subsampled training set to " << train.count << " images\n";
  }

  ArchSpec resolved = arch;
  resolved.classes = train.classes;
  resolved.in_channels = train.channels;
  resolved.in_h = train.height;
  resolved.in_w = train.width;
  resolved.validate();

  Network<T> net = init_network<T>(resolved, cfg.seed);
  std::cout << "revode train | arch: " << to_string(resolved.kind) << " | layers: "
            << resolved.layer_count() << " | params: " << resolved.param_count() << " ("
            << static_cast<double>(resolved.param_count()) / 1e6 << "M)\n";
  std::cout << "train images: " << train.count << " | test images: " << test.count
            << " | batch: " << cfg.batch << " | precision: " << cfg.precision << "\n";

  History h = run_training(net, train, test, cfg, out_dir);
  if (!h.rows.empty()) {
    const auto& last = h.rows.back();
    std::cout << "finished at epoch " << last.epoch << " | steps: " << h.steps
              << " | train_acc: " << last.train_acc << " | test_acc: " << last.test_acc << "\n";
  }
  if (!out_dir.empty())
    std::cout << "outputs written to " << out_dir << " (model.revode, history.csv)\n";
  return 0;
}

inline int run_verify(const std::string& suite, const std::string& precision, std::uint64_t seed,
                      int trials) {
  std::vector<CheckResult> results;
  if (suite == "reversibility")
    results = verify_reversibility(precision, seed);
  else if (suite == "spectrum")
    results = verify_spectrum(seed, trials);
  else if (suite == "gradcheck")
    results = verify_gradcheck(seed);
  else
    results = verify_all(precision, seed);

  bool all_pass = true;
  for (const auto& r : results) {
    all_pass = all_pass && r.pass;
    char line[160];
    std::snprintf(line, sizeof(line), "[%s] %s/%s worst=%.3e tol=%.1e", r.pass ? " ok " : "FAIL",
                  r.suite.c_str(), r.name.c_str(), r.worst, r.tol);
    std::cout << line << "\n";
  }
  std::cout << results.size() << " checks, "
            << (all_pass ? "all within tolerance" : "FAILURES") << "\n";
  return all_pass ? 0 : 1;
}

inline int run_analyze(const std::string& roots_grid, bool lyapunov, int spectrum_trials,
                       int size, const std::string& activation, std::uint64_t seed,
                       const std::string& out_dir, const std::vector<std::string>& argv) {
  json config{{"roots_grid", roots_grid},
              {"lyapunov", lyapunov},
              {"spectrum_trials", spectrum_trials},
              {"size", size},
              {"activation", activation},
              {"seed", seed}};
  if (!out_dir.empty()) write_manifest(out_dir, "analyze", argv, seed, config);

  if (!roots_grid.empty()) {
    double amin, amax, bmin, bmax;
    int steps;
    {
      std::stringstream ss(roots_grid);
      std::string tok;
      std::vector<std::string> parts;
      while (std::getline(ss, tok, ':')) parts.push_back(tok);
      if (parts.size() != 5)
        throw CLI::ValidationError("--roots-grid", "expected amin:amax:bmin:bmax:steps");
      amin = std::stod(parts[0]);
      amax = std::stod(parts[1]);
      bmin = std::stod(parts[2]);
      bmax = std::stod(parts[3]);
      steps = std::stoi(parts[4]);
      if (steps < 2) throw CLI::ValidationError("--roots-grid", "steps must be >= 2");
    }
    std::ostream* os = &std::cout;
    std::ofstream file;
    if (!out_dir.empty()) {
      file.open(fs::path(out_dir) / "roots_grid.csv");
      os = &file;
    }
    (*os) << "alpha,beta,a,max_abs_xi,stable\n";
    int stable_count = 0;
    for (int i = 0; i < steps; ++i)
      for (int j = 0; j < steps; ++j) {
        const double alpha = amin + (amax - amin) * i / (steps - 1);
        const double beta = bmin + (bmax - bmin) * j / (steps - 1);
        const auto r = characteristic_roots(alpha, beta);
        stable_count += r.stable ? 1 : 0;
        (*os) << alpha << "," << beta << "," << r.a << "," << r.max_abs() << ","
              << (r.stable ? 1 : 0) << "\n";
      }
    std::cout << "roots-grid rows=" << steps * steps << " stable=" << stable_count;
    if (!out_dir.empty()) std::cout << " csv=" << (fs::path(out_dir) / "roots_grid.csv").string();
    std::cout << "\n";
  }

  if (lyapunov) {
    for (double c : {-1.0, -0.5, 0.5}) {
      const double h = 0.01;
      auto step = [c, h](const std::vector<double>& y) {
        std::vector<double> r(y.size());
        for (std::size_t i = 0; i < y.size(); ++i) r[i] = y[i] + h * c * y[i];
        return r;
      };
      const double lam = lyapunov_estimate(step, {1.0}, {1.0}, 10000, h);
      std::cout << "lyapunov system=linear c=" << c << " lambda=" << lam << "\n";
    }
    Rng rng(seed);
    const int m = 8;
    DenseMatrix k1 = DenseMatrix::random_uniform(m, rng, -0.4, 0.4);
    DenseMatrix k2 = DenseMatrix::random_uniform(m, rng, -0.4, 0.4);
    const double h = 0.05;
    auto step = [&](const std::vector<double>& y) {
      return hamiltonian_verlet_step(k1, k2, y, Activation::tanh, h);
    };
    std::vector<double> y0(2 * m), d0(2 * m, 0.0);
    for (auto& v : y0) v = rng.uniform(-1.0, 1.0);
    d0[0] = 1.0;
    const double lam = lyapunov_estimate(step, y0, d0, 5000, h);
    std::cout << "lyapunov system=hamiltonian-chain h=" << h << " lambda=" << lam << "\n";
  }

  if (spectrum_trials > 0) {
    const Activation act = parse_activation(activation);
    const double worst_h =
        verify_imaginary_spectrum(spectrum_trials, size, act, seed, JacobianKind::hamiltonian);
    const double worst_m =
        verify_imaginary_spectrum(spectrum_trials, size, act, seed + 1, JacobianKind::midpoint);
    std::cout << "spectrum kind=hamiltonian trials=" << spectrum_trials << " size=" << size
              << " act=" << activation << " max_abs_re=" << worst_h << "\n";
    std::cout << "spectrum kind=midpoint trials=" << spectrum_trials << " size=" << size
              << " act=" << activation << " max_abs_re=" << worst_m << "\n";
    if (!out_dir.empty()) {
      std::ofstream scatter(fs::path(out_dir) / "spectrum_scatter.csv");
      scatter << "trial,kind,re,im\n";
      for (int t = 0; t < std::min(spectrum_trials, 16); ++t) {
        Rng rng = Rng::stream(seed, static_cast<std::uint64_t>(t));
        DenseMatrix k1 = DenseMatrix::random_uniform(size, rng);
        DenseMatrix k2 = DenseMatrix::random_uniform(size, rng);
        std::vector<double> point(static_cast<std::size_t>(2 * size));
        for (auto& v : point) v = rng.uniform(-1.0, 1.0);
        for (const auto& e : hamiltonian_jacobian_spectrum(k1, k2, point, act))
          scatter << t << ",hamiltonian," << e.real() << "," << e.imag() << "\n";
      }
      std::cout << "scatter csv=" << (fs::path(out_dir) / "spectrum_scatter.csv").string()
                << "\n";
    }
  }
  return 0;
}

inline int run_bench_mem(const ArchFlags& af, const std::string& mode_str, index_t batch,
                         bool measure) {
  ArchSpec arch = af.build();
  std::cout << "bench-mem arch=" << to_string(arch.kind) << " units=" << af.units
            << " channels=" << af.channels << " batch=" << batch << "\n";
  auto report = [&](Mode mode) {
    const auto counts = memory_report(arch, mode, batch);
    std::cout << "mode=" << to_string(mode) << " stored_tensors=" << counts.tensors
              << " stored_scalars=" << counts.scalars;
    if (measure && (mode != Mode::train_reversible || is_reversible(arch.kind))) {
      Network<float> net = init_network<float>(arch, 1);
      Rng rng(2);
      Tensor<float> x(batch, arch.in_channels, arch.in_h, arch.in_w);
      x.fill_uniform(rng, -1.0, 1.0);
      const auto measured = net_forward(net, x, mode).counts;
      std::cout << " | measured tensors=" << measured.tensors
                << " scalars=" << measured.scalars
                << (measured.tensors == counts.tensors && measured.scalars == counts.scalars
                        ? " (matches analytic)"
                        : " (MISMATCH)");
    }
    std::cout << "\n";
    return counts;
  };
  if (mode_str == "reversible") {
    report(Mode::train_reversible);
  } else if (mode_str == "stored") {
    report(Mode::train_stored);
  } else {
    const auto rev = report(Mode::train_reversible);
    const auto sto = report(Mode::train_stored);
    std::cout << "scalar ratio reversible/stored="
              << static_cast<double>(rev.scalars) / static_cast<double>(sto.scalars) << "\n";
  }
  return 0;
}

inline int run_inspect_data(const std::string& data_dir) {
  int found = 0;
  for (const std::string split : {"train", "test"}) {
    try {
      Dataset ds = load_dataset_dir(data_dir, split);
      ++found;
      std::cout << "split=" << split << " images=" << ds.count << " classes=" << ds.classes
                << " dims=" << ds.channels << "x" << ds.height << "x" << ds.width;
      std::cout << " ch_mean=";
      for (std::size_t c = 0; c < ds.ch_mean.size(); ++c)
        std::cout << (c ? "/" : "") << ds.ch_mean[c];
      std::cout << "\n";
      std::vector<index_t> hist(static_cast<std::size_t>(ds.classes), 0);
      for (int l : ds.labels) ++hist[static_cast<std::size_t>(l)];
      index_t mn = ds.count, mx = 0;
      for (index_t h : hist) {
        mn = std::min(mn, h);
        mx = std::max(mx, h);
      }
      std::cout << "split=" << split << " per-class min=" << mn << " max=" << mx << "\n";
    } catch (const std::exception& e) {
      std::cout << "split=" << split << " error: " << e.what() << "\n";
    }
  }
  if (found == 0) {
    std::cerr << "inspect-data: no readable splits under '" << data_dir << "'\n";
    return 1;
  }
  return 0;
}

}  // namespace detail

inline int run(std::vector<std::string> args) {
  namespace fs = std::filesystem;
  using detail::ArchFlags;
  using nlohmann::json;

  CLI::App app{"revode: stable reversible residual networks from ODE discretizations"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string("revode ") + kVersion);

  // --- train ---
  auto* train = app.add_subcommand("train", "train a network, writing checkpoint + history CSV");
  ArchFlags tf;
  tf.add_options(train);
  std::string data_dir, out_dir, config_path;
  TrainConfig tc;
  train->add_option("--data", data_dir, "dataset directory (CIFAR binary or manifest layout)");
  train->add_option("--out", out_dir, "output directory");
  train->add_option("--config", config_path,
                    "JSON run configuration (arch + train sections); explicit flags override");
  CLI::Option* o_subsample =
      train->add_option("--subsample", tc.subsample_fraction, "training-set fraction in (0,1]");
  CLI::Option* o_epochs = train->add_option("--epochs", tc.epochs, "epochs");
  CLI::Option* o_batch = train->add_option("--batch", tc.batch, "mini-batch size");
  CLI::Option* o_lr = train->add_option("--lr", tc.lr, "base learning rate");
  CLI::Option* o_momentum = train->add_option("--momentum", tc.momentum, "momentum coefficient");
  CLI::Option* o_wd =
      train->add_option("--weight-decay", tc.weight_decay, "weight decay coefficient");
  CLI::Option* o_sd = train->add_option("--smooth-decay", tc.smooth_decay,
                                        "weight smoothness decay coefficient");
  CLI::Option* o_seed = train->add_option("--seed", tc.seed, "random seed");
  CLI::Option* o_precision = train->add_option("--precision", tc.precision, "f32|f64")
                                ->check(CLI::IsMember({"f32", "f64"}));
  CLI::Option* o_max_steps =
      train->add_option("--max-steps", tc.max_steps, "stop after this many optimizer steps (0=off)");
  CLI::Option* o_eval = train->add_option("--eval-every", tc.eval_every, "evaluate every N epochs");
  CLI::Option* o_drift = train->add_option("--drift-check-every", tc.drift_check_every,
                                           "reconstruction drift monitor period (0=off)");
  CLI::Option* o_std = train->add_option("--standardize", tc.standardize, "per-image|per-channel");
  bool no_augment = false;
  train->add_flag("--no-augment", no_augment, "disable training augmentation");

  // --- verify ---
  auto* verify = app.add_subcommand("verify", "run property suites; exit 0 iff all pass");
  std::string suite = "all", vprecision = "f64";
  std::uint64_t vseed = 1;
  int vtrials = 50;
  verify->add_option("--suite", suite, "reversibility|spectrum|gradcheck|all")
      ->check(CLI::IsMember({"reversibility", "spectrum", "gradcheck", "all"}));
  verify->add_option("--precision", vprecision, "f32|f64")
      ->check(CLI::IsMember({"f32", "f64"}));
  verify->add_option("--seed", vseed, "random seed");
  verify->add_option("--trials", vtrials, "spectrum trials");

  // --- analyze ---
  auto* analyze = app.add_subcommand("analyze", "stability reports: roots grids, Lyapunov, spectra");
  std::string roots_grid, aout, aact = "relu";
  bool lyap = false;
  int spectrum_trials = 0, asize = 32;
  std::uint64_t aseed = 1;
  analyze->add_option("--roots-grid", roots_grid, "amin:amax:bmin:bmax:steps");
  analyze->add_flag("--lyapunov", lyap, "estimate Lyapunov exponents");
  analyze->add_option("--spectrum-trials", spectrum_trials, "random Jacobian trials");
  analyze->add_option("--size", asize, "Jacobian half-size");
  analyze->add_option("--activation", aact, "relu|tanh|identity");
  analyze->add_option("--seed", aseed, "random seed");
  analyze->add_option("--out", aout, "output directory for CSV + manifest");

  // --- bench-mem ---
  auto* bench = app.add_subcommand("bench-mem", "activation-memory report per mode");
  ArchFlags bf;
  bf.add_options(bench);
  std::string bmode = "both";
  index_t bbatch = 1;
  bool bmeasure = true;
  bench->add_option("--mode", bmode, "reversible|stored|both")
      ->check(CLI::IsMember({"reversible", "stored", "both"}));
  bench->add_option("--batch", bbatch, "batch size for the analytic/measured counts");
  bench->add_flag("!--no-measure", bmeasure, "skip the instrumented forward pass");

  // --- inspect-data ---
  auto* inspect = app.add_subcommand("inspect-data", "validate dataset record formats");
  std::string idata;
  inspect->add_option("--data", idata, "dataset directory")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());  // CLI11 vector order
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (train->parsed()) {
      ArchSpec arch;
      if (!config_path.empty()) {
        std::ifstream is(config_path);
        if (!is) throw std::runtime_error("cannot open config '" + config_path + "'");
        json cj = json::parse(is);
        if (cj.contains("train")) {
          const TrainConfig flags = tc;  // values as parsed from the command line
          tc = train_config_from_json(cj.at("train"));
          if (o_subsample->count()) tc.subsample_fraction = flags.subsample_fraction;
          if (o_epochs->count()) tc.epochs = flags.epochs;
          if (o_batch->count()) tc.batch = flags.batch;
          if (o_lr->count()) tc.lr = flags.lr;
          if (o_momentum->count()) tc.momentum = flags.momentum;
          if (o_wd->count()) tc.weight_decay = flags.weight_decay;
          if (o_sd->count()) tc.smooth_decay = flags.smooth_decay;
          if (o_seed->count()) tc.seed = flags.seed;
          if (o_precision->count()) tc.precision = flags.precision;
          if (o_max_steps->count()) tc.max_steps = flags.max_steps;
          if (o_eval->count()) tc.eval_every = flags.eval_every;
          if (o_drift->count()) tc.drift_check_every = flags.drift_check_every;
          if (o_std->count()) tc.standardize = flags.standardize;
        }
        if (cj.contains("arch")) {
          arch = arch_from_json(cj.at("arch"));
        } else {
          arch = tf.build();
        }
        if (cj.contains("data") && data_dir.empty()) data_dir = cj.at("data").get<std::string>();
      } else {
        arch = tf.build();
      }
      tc.augment = !no_augment && tc.augment;
      tc.validate();
      if (data_dir.empty())
        throw CLI::RequiredError("--data");

      if (!out_dir.empty())
        detail::write_manifest(out_dir, "train", args, tc.seed,
                               json{{"arch", arch_to_json(arch)},
                                    {"train", train_config_to_json(tc)},
                                    {"data", data_dir}});
      return tc.precision == "f64"
                 ? detail::run_train_typed<double>(arch, tc, data_dir, out_dir)
                 : detail::run_train_typed<float>(arch, tc, data_dir, out_dir);
    }
    if (verify->parsed()) return detail::run_verify(suite, vprecision, vseed, vtrials);
    if (analyze->parsed())
      return detail::run_analyze(roots_grid, lyap, spectrum_trials, asize, aact, aseed, aout,
                                 args);
    if (bench->parsed()) return detail::run_bench_mem(bf, bmode, bbatch, bmeasure);
    if (inspect->parsed()) return detail::run_inspect_data(idata);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace revode::cli
