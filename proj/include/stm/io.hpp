#pragma once

// Run configuration, file formats and artifact manifests for the command-line tool.

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "stm/baseline.hpp"
#include "stm/mapgraph.hpp"
#include "stm/oracle.hpp"
#include "stm/simulate.hpp"

namespace stm::io {

inline constexpr int kFormatVersion = 1;
inline constexpr const char* kToolVersion = "1.0.0";

struct SensorConfig {
  SensorProfile profile = SensorProfile::Stereo;
  double sigma = 0.003;  // range std for stereo, isotropic std for lidar and custom
  double ratio = 10.0;   // stereo only: range / bearing std

  NoiseSpec noise() const;
};

struct AccuracyConfig {
  std::vector<int> depths;
  std::size_t n_measurements = 0;
  double sigma = 0.02;
  double ratio = 10.0;
  double frequency = 1.0;
  int octaves = 3;
  std::uint64_t surface_seed = 1;
  /// 3-D runs only: surfaces surface_seed .. surface_seed + seeds - 1.
  int seeds = 1;
  /// Measurement and evaluation-point stream.
  std::uint64_t seed = 11;
};

struct RunConfig {
  int depth = 5;
  PriorConfig prior;
  WindowConfig window;
  ConvergenceConfig convergence;
  std::uint64_t seed = 7;
  SensorConfig sensor;
  SurfaceParams surface;
  int steps = 16;
  double density = 10.0;
  std::size_t n_eval = 2000;
  AccuracyConfig accuracy2d{{0, 1, 2, 3, 4, 5, 6, 7, 8}, 2560, 0.02, 10.0, 1.0, 3, 2, 1};
  AccuracyConfig accuracy3d{{0, 1, 2, 3, 4, 5, 6}, 40960, 0.02, 10.0, 4.0, 3, 1, 10};
  ChainConfig chain;
  std::size_t batch_size = 1000;

  ScenarioParams scenario() const;
  AccuracyParams accuracy_2d_params() const;
  /// Parameters for one surface seed of the 3-D batch.
  AccuracyParams accuracy_3d_params(std::uint64_t surface_seed) const;
};

/// `[section]` headers, `key = value` lines, `#` or `;` comments. Unknown
/// sections or keys, duplicates and out-of-range values throw ConfigError
/// naming the source and line.
RunConfig parse_config(std::string_view text, const std::string& source = "<config>");
RunConfig load_config(const std::filesystem::path& path);
/// Canonical text: every key, fixed order, round-trips through parse_config.
std::string to_config_text(const RunConfig& config);

/// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view bytes);
std::uint64_t fnv1a_file(const std::filesystem::path& path);
std::string hex64(std::uint64_t value);

struct PointsFile {
  /// Global-frame points with covariance.
  std::vector<GaussianMoment> points;
  std::size_t rows = 0;
  std::size_t skipped = 0;
  /// "source:line: reason" for every skipped row.
  std::vector<std::string> warnings;

  double skipped_fraction() const { return rows == 0 ? 0.0 : static_cast<double>(skipped) / static_cast<double>(rows); }
};

/// CSV with header x,y,z,sxx,syy,szz,sxy,sxz,syz or x,y,z,sigma. Bad rows are
/// skipped with a warning; a bad header throws ParseError.
PointsFile parse_points_csv(std::istream& in, const std::string& source = "<points>");
PointsFile read_points_csv(const std::filesystem::path& path);

/// CSV id,x,y,z with exactly three landmarks: origin, alpha corner, beta corner.
std::array<Eigen::Vector3d, 3> parse_landmarks_csv(std::istream& in, const std::string& source = "<landmarks>");
std::array<Eigen::Vector3d, 3> read_landmarks_csv(const std::filesystem::path& path);

/// Landmarks for one triangular half of an axis-aligned rectangle at height zero.
std::array<Eigen::Vector3d, 3> rectangle_landmarks(double x_min, double y_min, double x_max, double y_max,
                                                   bool upper_half = false);

/// Binary little-endian PLY: vertices (x = alpha, y = beta, z = fused mean, std),
/// faces with planar_deviation and n_meas.
void write_map_ply(const STMMap& map, const std::filesystem::path& path);
/// Same layout; faces carry the cell mean and variance.
void write_elevation_ply(const ElevationMap& map, const std::filesystem::path& path);

nlohmann::json map_to_json(const STMMap& map);
nlohmann::json scenario_to_json(const ScenarioReport& report);
nlohmann::json accuracy_to_json(const std::vector<AccuracyRow>& rows);
nlohmann::json oracle_to_json(const OracleReport& report);

void write_scenario_csv(const ScenarioReport& report, const std::filesystem::path& path);
void write_accuracy_csv(const std::vector<AccuracyRow>& rows, const std::filesystem::path& path);
void write_samples_csv(std::span<const ChainSample> samples, const std::filesystem::path& path);
void write_json(const nlohmann::json& value, const std::filesystem::path& path);
nlohmann::json read_json(const std::filesystem::path& path);

/// Everything needed to re-run a command and check its outputs bit for bit.
struct Manifest {
  std::vector<std::string> args;  // command line after the program name
  std::string config_text;
  std::uint64_t seed = 0;
  /// Output file name (relative to the manifest) -> FNV-1a of its bytes.
  std::map<std::string, std::string> outputs;

  std::string config_hash() const { return hex64(fnv1a(config_text)); }
  nlohmann::json to_json() const;
  static Manifest from_json(const nlohmann::json& j);
};

}  // namespace stm::io
