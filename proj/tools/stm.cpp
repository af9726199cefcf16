// Command-line front end: simulated experiments, map building from point files,
// the sampling oracle and manifest-driven reruns.

#include <chrono>
#include <fstream>
#include <filesystem>
#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "stm/errors.hpp"
#include "stm/io.hpp"

namespace fs = std::filesystem;
using namespace stm;
using stm::io::RunConfig;

namespace {

enum ExitCode : int { kOk = 0, kOther = 1, kConfig = 2, kNotConverged = 3, kBadInput = 4, kAdaptation = 5 };

RunConfig load_run_config(const std::string& spec) {
  if (spec == "default") return RunConfig{};
  return io::load_config(spec);
}

/// Collects output files next to a manifest and writes the manifest last.
class Outputs {
 public:
  Outputs(fs::path manifest_path, const std::vector<std::string>& args, const RunConfig& config)
      : manifest_path_(std::move(manifest_path)) {
    manifest_.args = args;
    manifest_.config_text = io::to_config_text(config);
    manifest_.seed = config.seed;
  }

  fs::path path(const std::string& name) const { return manifest_path_.parent_path() / name; }
  void record(const std::string& name) { manifest_.outputs[name] = io::hex64(io::fnv1a_file(path(name))); }
  void finish() const { io::write_json(manifest_.to_json(), manifest_path_); }

 private:
  fs::path manifest_path_;
  io::Manifest manifest_;
};

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create output directory " + dir.string() + ": " + ec.message());
}

int cmd_simulate(const std::vector<std::string>& args, const std::string& scenario, const std::string& config_spec,
                 const fs::path& out) {
  const RunConfig config = load_run_config(config_spec);
  make_dir(out);
  Outputs outputs(out / "manifest.json", args, config);
  bool converged = true;

  if (scenario == "pushbroom" || scenario == "reobserve") {
    STMMap map = build_map(subdivide(config.depth), config.prior, config.window, config.convergence);
    const SyntheticSurface surface(config.surface);
    const ScenarioReport report = scenario == "pushbroom" ? scenario_pushbroom(map, surface, config.scenario())
                                                          : scenario_reobserve(map, surface, config.scenario());
    converged = report.converged;
    io::write_scenario_csv(report, outputs.path("scenario.csv"));
    io::write_json(io::scenario_to_json(report), outputs.path("scenario.json"));
    io::write_map_ply(map, outputs.path("map.ply"));
    io::write_json(io::map_to_json(map), outputs.path("map.json"));
    for (const char* name : {"scenario.csv", "scenario.json", "map.ply", "map.json"}) outputs.record(name);
    for (const auto& s : report.steps) {
      std::cout << "step " << s.step << ": " << s.n_new << " new, " << s.messages << " messages ("
                << s.normalized << " per measurement), " << s.sweeps << " sweeps"
                << (s.converged ? "" : ", not converged") << '\n';
    }
  } else {
    std::vector<AccuracyRow> rows;
    if (scenario == "accuracy2d") {
      rows = run_accuracy_2d(config.accuracy_2d_params());
    } else {
      for (int i = 0; i < config.accuracy3d.seeds; ++i) {
        auto batch = run_accuracy_3d(config.accuracy_3d_params(config.accuracy3d.surface_seed + i));
        rows.insert(rows.end(), batch.begin(), batch.end());
      }
    }
    for (const auto& r : rows) {
      converged = converged && r.converged;
      std::cout << "seed " << r.seed << " depth " << r.depth << ": mse stm " << r.mse_stm << " elevation "
                << r.mse_elevation << ", log-likelihood ratio " << r.loglik_ratio << '\n';
    }
    io::write_accuracy_csv(rows, outputs.path("accuracy.csv"));
    io::write_json(io::accuracy_to_json(rows), outputs.path("accuracy.json"));
    outputs.record("accuracy.csv");
    outputs.record("accuracy.json");
  }
  outputs.finish();
  if (!converged) {
    std::cerr << "warning: inference did not converge within the sweep budget\n";
    return kNotConverged;
  }
  return kOk;
}

struct BuildOptions {
  std::string points;
  std::string landmarks;
  std::vector<double> global_frame;
  bool upper = false;
  int depth = 5;
  std::string out;
  std::string config = "default";
  std::optional<std::size_t> batch_size;
};

int cmd_build(const std::vector<std::string>& args, const BuildOptions& opt) {
  RunConfig config = load_run_config(opt.config);
  config.depth = opt.depth;
  if (opt.batch_size) config.batch_size = *opt.batch_size;
  if (config.depth < 0 || config.depth > kMaxGridDepth) throw ConfigError("--depth out of range");
  if (config.batch_size == 0) throw ConfigError("--batch-size must be positive");

  const io::PointsFile points = io::read_points_csv(opt.points);
  for (const auto& w : points.warnings) std::cerr << "warning: " << w << '\n';
  if (points.skipped_fraction() > 0.1) {
    std::cerr << "error: " << points.skipped << " of " << points.rows << " rows could not be parsed\n";
    return kBadInput;
  }

  std::array<Eigen::Vector3d, 3> landmarks;
  if (!opt.landmarks.empty()) {
    landmarks = io::read_landmarks_csv(opt.landmarks);
  } else {
    const auto& g = opt.global_frame;
    landmarks = io::rectangle_landmarks(g[0], g[1], g[2], g[3], opt.upper);
  }
  const RelativeIRF irf = make_relative_irf(landmarks[0], landmarks[1], landmarks[2]);

  std::vector<Measurement> measurements;
  std::size_t outside = 0;
  for (std::size_t i = 0; i < points.points.size(); ++i) {
    const GaussianMoment rel = global_to_relative(irf, points.points[i]);
    const RelativePoint p{rel.mean(0), rel.mean(1), rel.mean(2)};
    if (!p.inside_submap()) {
      ++outside;
      continue;
    }
    measurements.push_back({rel.mean, rel.cov, static_cast<std::int64_t>(i)});
  }
  std::cout << points.points.size() << " points read, " << points.skipped << " rows skipped, " << outside
            << " outside the submap\n";

  const fs::path prefix(opt.out);
  if (prefix.has_parent_path()) make_dir(prefix.parent_path());
  const std::string stem = prefix.filename().string();
  Outputs outputs(fs::path(opt.out + ".manifest.json"), args, config);

  STMMap map = build_map(subdivide(config.depth), config.prior, config.window, config.convergence);
  bool converged = true;
  double seconds = 0.0;
  for (std::size_t start = 0; start < measurements.size(); start += config.batch_size) {
    const std::size_t n = std::min(config.batch_size, measurements.size() - start);
    const auto t0 = std::chrono::steady_clock::now();
    const ConvergenceReport r = map.incremental_update(std::span(measurements).subspan(start, n));
    const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    seconds += dt;
    converged = converged && r.converged;
    std::cout << "batch " << start / config.batch_size + 1 << ": " << n << " measurements, " << r.messages
              << " messages, " << r.sweeps << " sweeps, " << 1e3 * dt / static_cast<double>(n)
              << " ms per measurement" << (r.converged ? "" : ", not converged") << '\n';
  }
  if (!measurements.empty()) {
    std::cout << "throughput: " << 1e3 * seconds / static_cast<double>(measurements.size())
              << " ms per measurement\n";
  }

  io::write_map_ply(map, outputs.path(stem + ".ply"));
  io::write_json(io::map_to_json(map), outputs.path(stem + ".json"));
  outputs.record(stem + ".ply");
  outputs.record(stem + ".json");
  outputs.finish();
  if (!converged) {
    std::cerr << "warning: inference did not converge within the sweep budget\n";
    return kNotConverged;
  }
  return kOk;
}

int cmd_oracle(const std::vector<std::string>& args, const std::string& which, const std::string& config_spec,
               const fs::path& out) {
  const RunConfig config = load_run_config(config_spec);
  make_dir(out);
  Outputs outputs(out / "manifest.json", args, config);
  const OracleReport report = run_oracle(which == "stereo" ? OracleCase::Stereo : OracleCase::Lidar, config.chain);
  for (const auto& m : report.marginals) {
    std::cout << m.variable << ": mh " << m.mh_mean << " +- " << m.mh_std << ", vmp " << m.belief_mean << " +- "
              << m.belief_std << " (mean offset " << m.mean_discrepancy << " sd, std ratio " << m.std_ratio
              << ")\n";
  }
  std::cout << "acceptance " << report.acceptance_rate << ", " << report.retained << " samples, "
            << report.seconds << " s\n";
  io::write_json(io::oracle_to_json(report), outputs.path("oracle.json"));
  io::write_samples_csv(report.samples, outputs.path("samples.csv"));
  outputs.record("oracle.json");
  outputs.record("samples.csv");
  outputs.finish();
  return kOk;
}

int run(std::vector<std::string> args);

/// Re-run the recorded command into a scratch directory and compare output hashes.
int cmd_rerun(const fs::path& manifest_path) {
  const io::Manifest manifest = io::Manifest::from_json(io::read_json(manifest_path));
  if (manifest.args.empty()) throw ParseError("manifest has no command");

  std::random_device rd;
  const fs::path scratch = fs::temp_directory_path() / ("stm-rerun-" + io::hex64((std::uint64_t{rd()} << 32) | rd()));
  make_dir(scratch);
  struct Cleanup {
    fs::path dir;
    ~Cleanup() {
      std::error_code ec;
      fs::remove_all(dir, ec);
    }
  } cleanup{scratch};

  const fs::path config_path = scratch / "config.ini";
  {
    std::ofstream c(config_path, std::ios::binary);
    c << manifest.config_text;
  }

  std::vector<std::string> args = manifest.args;
  const bool is_build = args.front() == "build";
  bool has_config = false;
  std::string old_stem;
  for (std::size_t i = 1; i + 1 < args.size(); ++i) {
    if (args[i] == "--config") {
      args[i + 1] = config_path.string();
      has_config = true;
    } else if (args[i] == "--out") {
      old_stem = fs::path(args[i + 1]).filename().string();
      args[i + 1] = is_build ? (scratch / "out" / old_stem).string() : (scratch / "out").string();
    }
  }
  if (!has_config) {
    args.push_back("--config");
    args.push_back(config_path.string());
  }

  const int code = run(args);
  if (code != kOk && code != kNotConverged) return code;

  bool identical = true;
  for (const auto& [name, hash] : manifest.outputs) {
    const fs::path produced = scratch / "out" / name;
    const std::string now = fs::exists(produced) ? io::hex64(io::fnv1a_file(produced)) : "missing";
    const bool same = now == hash;
    identical = identical && same;
    std::cout << (same ? "match    " : "MISMATCH ") << name << " " << hash << " " << now << '\n';
  }
  std::cout << (identical ? "outputs reproduced bitwise\n" : "outputs differ\n");
  return identical ? kOk : kOther;
}

int run(std::vector<std::string> args) {
  CLI::App app{"Surfel terrain mapping"};
  app.require_subcommand(1);

  std::string scenario, config_spec = "default", out;
  auto* simulate = app.add_subcommand("simulate", "Run a simulated experiment");
  simulate->add_option("--scenario", scenario, "Experiment")
      ->required()
      ->check(CLI::IsMember({"pushbroom", "reobserve", "accuracy2d", "accuracy3d"}));
  simulate->add_option("--config", config_spec, "Config file or 'default'");
  simulate->add_option("--out", out, "Output directory")->required();

  BuildOptions build_opt;
  auto* build = app.add_subcommand("build", "Build a map from a points file");
  build->add_option("--points", build_opt.points, "Points CSV")->required();
  auto* lm = build->add_option("--landmarks", build_opt.landmarks, "Landmarks CSV");
  auto* gf = build->add_option("--global-frame", build_opt.global_frame, "xmin,ymin,xmax,ymax")
                 ->delimiter(',')
                 ->expected(4);
  lm->excludes(gf);
  build->add_flag("--upper", build_opt.upper, "Use the upper triangle of the global frame rectangle");
  build->add_option("--depth", build_opt.depth, "Grid depth")->required();
  build->add_option("--out", build_opt.out, "Output prefix")->required();
  build->add_option("--config", build_opt.config, "Config file or 'default'");
  build->add_option("--batch-size", build_opt.batch_size, "Measurements per incremental update");

  std::string oracle_case;
  std::string oracle_config = "default";
  std::string oracle_out;
  auto* oracle = app.add_subcommand("oracle", "Compare VMP with a Metropolis-Hastings chain");
  oracle->add_option("--case", oracle_case, "Emulation case")->required()->check(CLI::IsMember({"stereo", "lidar"}));
  oracle->add_option("--config", oracle_config, "Config file or 'default'");
  oracle->add_option("--out", oracle_out, "Output directory")->required();

  std::string manifest;
  auto* rerun = app.add_subcommand("rerun", "Reproduce a run from its manifest");
  rerun->add_option("--manifest", manifest, "Manifest JSON")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  // Record input paths absolutely so the manifest can be replayed from anywhere.
  std::vector<std::string> recorded = args;
  for (std::size_t i = 0; i + 1 < recorded.size(); ++i) {
    if (recorded[i] == "--points" || recorded[i] == "--landmarks") {
      recorded[i + 1] = fs::absolute(recorded[i + 1]).string();
    }
  }

  try {
    if (*simulate) return cmd_simulate(recorded, scenario, config_spec, out);
    if (*build) {
      if (build_opt.landmarks.empty() && build_opt.global_frame.empty()) {
        throw ConfigError("build needs --landmarks or --global-frame");
      }
      return cmd_build(recorded, build_opt);
    }
    if (*oracle) return cmd_oracle(recorded, oracle_case, oracle_config, oracle_out);
    return cmd_rerun(manifest);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfig;
  } catch (const AdaptationFailed& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kAdaptation;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kBadInput;
  } catch (const DegenerateLandmarks& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kBadInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kOther;
  }
}

}  // namespace

int main(int argc, char** argv) { return run(std::vector<std::string>(argv + 1, argv + argc)); }
