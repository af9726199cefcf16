#include "stm/io.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <istream>
#include <limits>
#include <set>
#include <sstream>

#include "stm/errors.hpp"

namespace stm::io {

NoiseSpec SensorConfig::noise() const {
  switch (profile) {
    case SensorProfile::Stereo:
      return NoiseSpec::stereo(sigma, ratio);
    case SensorProfile::Lidar:
      return NoiseSpec::lidar(sigma);
    case SensorProfile::Custom:
      break;
  }
  NoiseSpec n = NoiseSpec::lidar(sigma);
  n.profile = SensorProfile::Custom;
  return n;
}

ScenarioParams RunConfig::scenario() const {
  ScenarioParams p;
  p.steps = steps;
  p.density = density;
  p.noise = sensor.noise();
  p.seed = seed;
  return p;
}

namespace {

AccuracyParams accuracy_params(const RunConfig& c, const AccuracyConfig& a, SurfaceKind kind,
                               std::uint64_t surface_seed) {
  AccuracyParams p;
  p.depths = a.depths;
  p.n_measurements = a.n_measurements;
  p.n_eval = c.n_eval;
  p.noise = NoiseSpec::stereo(a.sigma, a.ratio);
  p.surface = SurfaceParams{};
  p.surface.kind = kind;
  p.surface.seed = surface_seed;
  p.surface.frequency = a.frequency;
  p.surface.octaves = a.octaves;
  p.prior = c.prior;
  p.convergence = c.convergence;
  p.seed = a.seed;
  return p;
}

}  // namespace

AccuracyParams RunConfig::accuracy_2d_params() const {
  return accuracy_params(*this, accuracy2d, SurfaceKind::Profile, accuracy2d.surface_seed);
}

AccuracyParams RunConfig::accuracy_3d_params(std::uint64_t surface_seed) const {
  return accuracy_params(*this, accuracy3d, SurfaceKind::Perlin, surface_seed);
}

// ---------------------------------------------------------------------------
// Config text

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

std::string format_double(double v) {
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc{}) throw ConfigError("cannot format number");
  return std::string(buf, end);
}

double parse_double(const std::string& s) {
  double v = 0.0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || end != s.data() + s.size() || !std::isfinite(v)) {
    throw std::invalid_argument("expected a finite number, got '" + s + "'");
  }
  return v;
}

template <typename Int>
Int parse_integer(const std::string& s) {
  Int v{};
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || end != s.data() + s.size()) {
    throw std::invalid_argument("expected an integer, got '" + s + "'");
  }
  return v;
}

struct Key {
  std::string section;
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(RunConfig&)> get;
};

void require(bool ok, const std::string& message) {
  if (!ok) throw std::invalid_argument(message);
}

template <typename Field>
Key real(std::string section, std::string name, Field field, std::function<bool(double)> valid, std::string range) {
  return {std::move(section), std::move(name),
          [=](RunConfig& c, const std::string& v) {
            const double x = parse_double(v);
            require(valid(x), "must be " + range);
            field(c) = x;
          },
          [=](RunConfig& c) { return format_double(field(c)); }};
}

template <typename Int, typename Field>
Key integer(std::string section, std::string name, Field field, Int lo, Int hi) {
  return {std::move(section), std::move(name),
          [=](RunConfig& c, const std::string& v) {
            const Int x = parse_integer<Int>(v);
            require(x >= lo && x <= hi, "must lie in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
            field(c) = x;
          },
          [=](RunConfig& c) { return std::to_string(field(c)); }};
}

template <typename Field>
Key depth_list(std::string section, std::string name, Field field) {
  return {std::move(section), std::move(name),
          [=](RunConfig& c, const std::string& v) {
            std::vector<int> depths;
            std::stringstream ss(v);
            std::string item;
            while (std::getline(ss, item, ',')) {
              const int d = parse_integer<int>(trim(item));
              require(d >= 0 && d <= kMaxGridDepth, "depths must lie in [0, " + std::to_string(kMaxGridDepth) + "]");
              depths.push_back(d);
            }
            require(!depths.empty(), "needs at least one depth");
            field(c) = std::move(depths);
          },
          [=](RunConfig& c) {
            std::string out;
            for (int d : field(c)) out += (out.empty() ? "" : ",") + std::to_string(d);
            return out;
          }};
}

bool positive(double x) { return x > 0.0; }
bool non_negative(double x) { return x >= 0.0; }
bool any_value(double) { return true; }

constexpr std::uint64_t kMaxU64 = std::numeric_limits<std::uint64_t>::max();
constexpr std::size_t kMaxSize = std::numeric_limits<std::size_t>::max();

void add_accuracy_keys(std::vector<Key>& keys, const std::string& section, AccuracyConfig RunConfig::*member,
                       bool with_seeds) {
  auto acc = [member](RunConfig& c) -> AccuracyConfig& { return c.*member; };
  keys.push_back(depth_list(section, "depths", [acc](RunConfig& c) -> std::vector<int>& { return acc(c).depths; }));
  keys.push_back(integer<std::size_t>(section, "n_measurements",
                                      [acc](RunConfig& c) -> std::size_t& { return acc(c).n_measurements; }, 1,
                                      kMaxSize));
  keys.push_back(real(section, "sigma", [acc](RunConfig& c) -> double& { return acc(c).sigma; }, positive, "> 0"));
  keys.push_back(real(section, "ratio", [acc](RunConfig& c) -> double& { return acc(c).ratio; },
                      [](double x) { return x >= 10.0 && x <= 50.0; }, "in [10, 50]"));
  keys.push_back(
      real(section, "frequency", [acc](RunConfig& c) -> double& { return acc(c).frequency; }, positive, "> 0"));
  keys.push_back(integer<int>(section, "octaves", [acc](RunConfig& c) -> int& { return acc(c).octaves; }, 1, 16));
  keys.push_back(integer<std::uint64_t>(section, "surface_seed",
                                        [acc](RunConfig& c) -> std::uint64_t& { return acc(c).surface_seed; }, 0,
                                        kMaxU64));
  if (with_seeds) {
    keys.push_back(integer<int>(section, "seeds", [acc](RunConfig& c) -> int& { return acc(c).seeds; }, 1, 1000));
  }
  keys.push_back(
      integer<std::uint64_t>(section, "seed", [acc](RunConfig& c) -> std::uint64_t& { return acc(c).seed; }, 0,
                             kMaxU64));
}

const std::vector<Key>& config_keys() {
  static const std::vector<Key> keys = [] {
    std::vector<Key> k;
    k.push_back(integer<int>("grid", "depth", [](RunConfig& c) -> int& { return c.depth; }, 0, kMaxGridDepth));

    k.push_back(real("prior", "rho", [](RunConfig& c) -> double& { return c.prior.rho; },
                     [](double x) { return x >= 0.0 && x < 1.0; }, "in [0, 1)"));
    k.push_back(real("prior", "sigma2", [](RunConfig& c) -> double& { return c.prior.sigma2; }, positive, "> 0"));
    k.push_back(real("prior", "a_p", [](RunConfig& c) -> double& { return c.prior.a_p; }, positive, "> 0"));
    k.push_back(real("prior", "b_p", [](RunConfig& c) -> double& { return c.prior.b_p; }, positive, "> 0"));

    k.push_back({"window", "mode",
                 [](RunConfig& c, const std::string& v) {
                   if (v == "batches") {
                     c.window.mode = WindowMode::Batches;
                   } else if (v == "measurements") {
                     c.window.mode = WindowMode::Measurements;
                   } else {
                     throw std::invalid_argument("must be 'batches' or 'measurements'");
                   }
                 },
                 [](RunConfig& c) -> std::string {
                   return c.window.mode == WindowMode::Batches ? "batches" : "measurements";
                 }});
    k.push_back(integer<int>("window", "size", [](RunConfig& c) -> int& { return c.window.size; }, 1,
                             std::numeric_limits<int>::max()));

    k.push_back(real("convergence", "kl_threshold", [](RunConfig& c) -> double& { return c.convergence.kl_threshold; },
                     positive, "> 0"));
    k.push_back(integer<int>("convergence", "max_sweeps", [](RunConfig& c) -> int& { return c.convergence.max_sweeps; },
                             1, 1000000));

    k.push_back(integer<std::uint64_t>("run", "seed", [](RunConfig& c) -> std::uint64_t& { return c.seed; }, 0,
                                       kMaxU64));

    k.push_back({"sensor", "profile",
                 [](RunConfig& c, const std::string& v) {
                   if (v == "stereo") {
                     c.sensor.profile = SensorProfile::Stereo;
                   } else if (v == "lidar") {
                     c.sensor.profile = SensorProfile::Lidar;
                   } else if (v == "custom") {
                     c.sensor.profile = SensorProfile::Custom;
                   } else {
                     throw std::invalid_argument("must be 'stereo', 'lidar' or 'custom'");
                   }
                 },
                 [](RunConfig& c) -> std::string {
                   switch (c.sensor.profile) {
                     case SensorProfile::Stereo:
                       return "stereo";
                     case SensorProfile::Lidar:
                       return "lidar";
                     case SensorProfile::Custom:
                       break;
                   }
                   return "custom";
                 }});
    k.push_back(real("sensor", "sigma", [](RunConfig& c) -> double& { return c.sensor.sigma; }, positive, "> 0"));
    k.push_back(real("sensor", "ratio", [](RunConfig& c) -> double& { return c.sensor.ratio; },
                     [](double x) { return x >= 10.0 && x <= 50.0; }, "in [10, 50]"));

    k.push_back(integer<std::uint64_t>("surface", "seed", [](RunConfig& c) -> std::uint64_t& { return c.surface.seed; },
                                       0, kMaxU64));
    k.push_back(real("surface", "amplitude", [](RunConfig& c) -> double& { return c.surface.amplitude; }, non_negative,
                     ">= 0"));
    k.push_back(
        real("surface", "frequency", [](RunConfig& c) -> double& { return c.surface.frequency; }, positive, "> 0"));
    k.push_back(integer<int>("surface", "octaves", [](RunConfig& c) -> int& { return c.surface.octaves; }, 1, 16));
    k.push_back(real("surface", "persistence", [](RunConfig& c) -> double& { return c.surface.persistence; }, positive,
                     "> 0"));
    k.push_back(real("surface", "lacunarity", [](RunConfig& c) -> double& { return c.surface.lacunarity; }, positive,
                     "> 0"));
    k.push_back(real("surface", "offset", [](RunConfig& c) -> double& { return c.surface.offset; }, any_value,
                     "finite"));

    k.push_back(integer<int>("scenario", "steps", [](RunConfig& c) -> int& { return c.steps; }, 1, 100000));
    k.push_back(real("scenario", "density", [](RunConfig& c) -> double& { return c.density; }, positive, "> 0"));

    k.push_back(integer<std::size_t>("accuracy", "n_eval", [](RunConfig& c) -> std::size_t& { return c.n_eval; }, 1,
                                     kMaxSize));
    add_accuracy_keys(k, "accuracy2d", &RunConfig::accuracy2d, false);
    add_accuracy_keys(k, "accuracy3d", &RunConfig::accuracy3d, true);

    k.push_back(integer<std::size_t>("oracle", "samples", [](RunConfig& c) -> std::size_t& { return c.chain.n_samples; },
                                     1, kMaxSize));
    k.push_back(real("oracle", "burn_in", [](RunConfig& c) -> double& { return c.chain.burn_in; },
                     [](double x) { return x > 0.0 && x < 1.0; }, "in (0, 1)"));
    k.push_back(integer<std::size_t>("oracle", "thinning", [](RunConfig& c) -> std::size_t& { return c.chain.thinning; },
                                     1, kMaxSize));
    k.push_back(integer<std::size_t>("oracle", "adaptation_interval",
                                     [](RunConfig& c) -> std::size_t& { return c.chain.adaptation_interval; }, 1,
                                     kMaxSize));
    k.push_back(integer<std::uint64_t>("oracle", "seed", [](RunConfig& c) -> std::uint64_t& { return c.chain.seed; },
                                       0, kMaxU64));

    k.push_back(integer<std::size_t>("build", "batch_size", [](RunConfig& c) -> std::size_t& { return c.batch_size; },
                                     1, kMaxSize));
    return k;
  }();
  return keys;
}

}  // namespace

RunConfig parse_config(std::string_view text, const std::string& source) {
  const auto& keys = config_keys();
  std::set<std::string> sections;
  for (const auto& k : keys) sections.insert(k.section);

  RunConfig config;
  std::set<std::string> seen;
  std::string section;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  std::string raw;
  auto fail = [&](const std::string& what) {
    throw ConfigError(source + ":" + std::to_string(line_no) + ": " + what);
  };

  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = raw;
    if (const auto hash = line.find_first_of("#;"); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;

    if (line.front() == '[') {
      if (line.back() != ']') fail("unterminated section header");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      if (!sections.contains(section)) fail("unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail("expected 'key = value'");
    if (section.empty()) fail("key outside any section");
    const std::string name = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    const std::string qualified = section + "." + name;

    const auto it = std::find_if(keys.begin(), keys.end(),
                                 [&](const Key& k) { return k.section == section && k.name == name; });
    if (it == keys.end()) fail("unknown key '" + qualified + "'");
    if (!seen.insert(qualified).second) fail("duplicate key '" + qualified + "'");
    if (value.empty()) fail("'" + qualified + "' has no value");
    try {
      it->set(config, value);
    } catch (const std::invalid_argument& e) {
      fail("'" + qualified + "' " + e.what());
    } catch (const std::out_of_range&) {
      fail("'" + qualified + "' is out of range");
    }
  }
  return config;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config(text.str(), path.string());
}

std::string to_config_text(const RunConfig& config) {
  RunConfig copy = config;
  std::ostringstream out;
  std::string section;
  for (const auto& k : config_keys()) {
    if (k.section != section) {
      if (!section.empty()) out << '\n';
      section = k.section;
      out << '[' << section << "]\n";
    }
    out << k.name << " = " << k.get(copy) << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Hashing

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string());
  std::ostringstream bytes;
  bytes << in.rdbuf();
  return fnv1a(bytes.str());
}

std::string hex64(std::uint64_t value) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << value;
  return os.str();
}

// ---------------------------------------------------------------------------
// CSV input

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> fields;
  std::stringstream ss(line);
  std::string item;
  while (std::getline(ss, item, ',')) fields.push_back(trim(item));
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

bool blank(const std::string& line) { return trim(line).empty(); }

}  // namespace

PointsFile parse_points_csv(std::istream& in, const std::string& source) {
  static const std::vector<std::string> full = {"x", "y", "z", "sxx", "syy", "szz", "sxy", "sxz", "syz"};
  static const std::vector<std::string> iso = {"x", "y", "z", "sigma"};

  PointsFile file;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!blank(line)) break;
  }
  const auto header = split_csv(trim(line));
  if (header != full && header != iso) {
    throw ParseError(source + ":" + std::to_string(line_no) + ": header must be '" +
                     "x,y,z,sxx,syy,szz,sxy,sxz,syz' or 'x,y,z,sigma'");
  }
  const bool full_cov = header.size() == full.size();

  while (std::getline(in, line)) {
    ++line_no;
    if (blank(line)) continue;
    ++file.rows;
    auto skip = [&](const std::string& why) {
      ++file.skipped;
      file.warnings.push_back(source + ":" + std::to_string(line_no) + ": " + why);
    };
    const auto fields = split_csv(trim(line));
    if (fields.size() != header.size()) {
      skip("expected " + std::to_string(header.size()) + " fields, got " + std::to_string(fields.size()));
      continue;
    }
    std::vector<double> v;
    try {
      for (const auto& f : fields) v.push_back(parse_double(f));
    } catch (const std::invalid_argument& e) {
      skip(e.what());
      continue;
    }
    Mat3 cov;
    if (full_cov) {
      cov << v[3], v[6], v[7], v[6], v[4], v[8], v[7], v[8], v[5];
    } else {
      if (!(v[3] > 0.0)) {
        skip("sigma must be positive");
        continue;
      }
      cov = Mat3::Identity() * v[3] * v[3];
    }
    const Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
    if (eig.eigenvalues().minCoeff() <= 0.0) {
      skip("covariance is not positive definite");
      continue;
    }
    file.points.emplace_back(Eigen::Vector3d(v[0], v[1], v[2]), cov);
  }
  return file;
}

PointsFile read_points_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  return parse_points_csv(in, path.string());
}

std::array<Eigen::Vector3d, 3> parse_landmarks_csv(std::istream& in, const std::string& source) {
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!blank(line)) break;
  }
  if (split_csv(trim(line)) != std::vector<std::string>{"id", "x", "y", "z"}) {
    throw ParseError(source + ":" + std::to_string(line_no) + ": header must be 'id,x,y,z'");
  }
  std::vector<Eigen::Vector3d> rows;
  while (std::getline(in, line)) {
    ++line_no;
    if (blank(line)) continue;
    const auto fields = split_csv(trim(line));
    if (fields.size() != 4) throw ParseError(source + ":" + std::to_string(line_no) + ": expected 4 fields");
    try {
      rows.emplace_back(parse_double(fields[1]), parse_double(fields[2]), parse_double(fields[3]));
    } catch (const std::invalid_argument& e) {
      throw ParseError(source + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (rows.size() != 3) {
    throw ParseError(source + ": expected exactly 3 landmarks, got " + std::to_string(rows.size()));
  }
  return {rows[0], rows[1], rows[2]};
}

std::array<Eigen::Vector3d, 3> read_landmarks_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  return parse_landmarks_csv(in, path.string());
}

std::array<Eigen::Vector3d, 3> rectangle_landmarks(double x_min, double y_min, double x_max, double y_max,
                                                   bool upper_half) {
  if (!(x_max > x_min) || !(y_max > y_min)) throw DegenerateLandmarks("rectangle has no area");
  if (upper_half) {
    // Opposite corner as origin: alpha runs towards -x, beta towards -y.
    return {Eigen::Vector3d(x_max, y_max, 0.0), Eigen::Vector3d(x_min, y_max, 0.0),
            Eigen::Vector3d(x_max, y_min, 0.0)};
  }
  return {Eigen::Vector3d(x_min, y_min, 0.0), Eigen::Vector3d(x_max, y_min, 0.0), Eigen::Vector3d(x_min, y_max, 0.0)};
}

// ---------------------------------------------------------------------------
// PLY

namespace {

class PlyWriter {
 public:
  explicit PlyWriter(const std::filesystem::path& path) : out_(path, std::ios::binary) {
    if (!out_) throw ParseError("cannot write " + path.string());
  }

  void header(const std::string& text) { out_ << text; }

  template <typename T>
  void put(T value) {
    static_assert(std::is_arithmetic_v<T>);
    auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(value);
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    out_.write(bytes.data(), bytes.size());
  }

  void finish() {
    out_.flush();
    if (!out_) throw ParseError("write failed");
  }

 private:
  std::ofstream out_;
};

std::string ply_header(std::size_t vertices, std::size_t faces, const std::vector<std::string>& face_props) {
  std::ostringstream h;
  h << "ply\nformat binary_little_endian 1.0\n"
    << "obj_info format_version " << kFormatVersion << '\n'
    << "element vertex " << vertices << '\n'
    << "property double x\nproperty double y\nproperty double z\nproperty double std\nproperty uchar observed\n"
    << "element face " << faces << '\n'
    << "property list uchar int vertex_indices\n";
  for (const auto& p : face_props) h << "property " << p << '\n';
  h << "end_header\n";
  return h.str();
}

void put_face(PlyWriter& w, const SurfelInfo& s) {
  w.put<std::uint8_t>(3);
  for (VertexId v : s.vertices) w.put<std::int32_t>(static_cast<std::int32_t>(v));
}

}  // namespace

void write_map_ply(const STMMap& map, const std::filesystem::path& path) {
  const auto& grid = map.grid();
  const auto q = query_map(map);
  PlyWriter w(path);
  w.header(ply_header(grid.vertex_count(), grid.surfel_count(),
                      {"double planar_deviation", "int n_meas"}));
  for (std::size_t v = 0; v < grid.vertex_count(); ++v) {
    const auto p = grid.vertex_position(static_cast<VertexId>(v));
    const auto& s = q.vertices[v];
    w.put(p.x());
    w.put(p.y());
    w.put(s.mean);
    w.put(s.std);
    w.put<std::uint8_t>(s.observed ? 1 : 0);
  }
  for (std::size_t i = 0; i < grid.surfel_count(); ++i) {
    put_face(w, grid.surfels()[i]);
    const auto& s = q.surfels[i];
    w.put(s.expected_deviation.value_or(std::numeric_limits<double>::quiet_NaN()));
    w.put<std::int32_t>(static_cast<std::int32_t>(s.measurement_count));
  }
  w.finish();
}

namespace {

/// Vertex heights for the elevation map: precision-weighted fusion of the incident observed cells.
std::vector<VertexSummary> elevation_vertices(const ElevationMap& map) {
  const auto& grid = map.grid();
  std::vector<double> precision(grid.vertex_count(), 0.0), information(grid.vertex_count(), 0.0);
  for (std::size_t i = 0; i < grid.surfel_count(); ++i) {
    const auto& cell = map.cells()[i];
    if (!cell.observed()) continue;
    for (VertexId v : grid.surfels()[i].vertices) {
      precision[static_cast<std::size_t>(v)] += cell.precision;
      information[static_cast<std::size_t>(v)] += cell.information;
    }
  }
  std::vector<VertexSummary> out(grid.vertex_count());
  for (std::size_t v = 0; v < out.size(); ++v) {
    if (precision[v] <= 0.0) continue;
    out[v] = {true, information[v] / precision[v], std::sqrt(1.0 / precision[v])};
  }
  return out;
}

}  // namespace

void write_elevation_ply(const ElevationMap& map, const std::filesystem::path& path) {
  const auto& grid = map.grid();
  const auto vertices = elevation_vertices(map);
  PlyWriter w(path);
  w.header(ply_header(grid.vertex_count(), grid.surfel_count(), {"double mean", "double variance", "int n_meas"}));
  for (std::size_t v = 0; v < grid.vertex_count(); ++v) {
    const auto p = grid.vertex_position(static_cast<VertexId>(v));
    w.put(p.x());
    w.put(p.y());
    w.put(vertices[v].mean);
    w.put(vertices[v].std);
    w.put<std::uint8_t>(vertices[v].observed ? 1 : 0);
  }
  constexpr double nan = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t i = 0; i < grid.surfel_count(); ++i) {
    put_face(w, grid.surfels()[i]);
    const auto& cell = map.cells()[i];
    w.put(cell.observed() ? cell.mean() : nan);
    w.put(cell.observed() ? cell.variance() : nan);
    w.put<std::int32_t>(static_cast<std::int32_t>(cell.count));
  }
  w.finish();
}

// ---------------------------------------------------------------------------
// JSON

namespace {

using nlohmann::json;

json vec_json(const Vec3& v) { return json::array({v(0), v(1), v(2)}); }

json mat_json(const Mat3& m) {
  json rows = json::array();
  for (int r = 0; r < 3; ++r) rows.push_back(json::array({m(r, 0), m(r, 1), m(r, 2)}));
  return rows;
}

json height_json(const HeightFactor& f) { return {{"xi", vec_json(f.xi)}, {"omega", mat_json(f.omega)}}; }

json ig_json(const InverseGammaFactor& f) { return {{"exponent", f.exponent()}, {"scale", f.scale()}}; }

// JSON has no NaN; unobserved quantities become null.
json number_or_null(std::optional<double> v) {
  if (!v || !std::isfinite(*v)) return nullptr;
  return *v;
}

}  // namespace

nlohmann::json map_to_json(const STMMap& map) {
  const auto& grid = map.grid();
  const auto q = query_map(map);
  json surfels = json::array();
  for (std::size_t i = 0; i < grid.surfel_count(); ++i) {
    const auto& info = grid.surfels()[i];
    const auto& state = map.surfels()[i];
    const auto& sum = q.surfels[i];
    surfels.push_back({
        {"id", i},
        {"row", info.row},
        {"col", info.col},
        {"orientation", info.orientation == Orientation::Up ? "up" : "down"},
        {"vertices", json::array({info.vertices[0], info.vertices[1], info.vertices[2]})},
        {"observed", sum.observed},
        {"measurement_count", sum.measurement_count},
        {"folded_measurements", state.folded_measurements},
        {"mean", sum.observed ? vec_json(sum.mean) : json(nullptr)},
        {"std", sum.observed ? vec_json(sum.std) : json(nullptr)},
        {"planar_deviation", number_or_null(sum.expected_deviation)},
        {"belief_h", height_json(state.belief_h)},
        {"belief_nu", ig_json(state.belief_nu)},
        {"prior_h", height_json(state.prior_h)},
        {"prior_nu", ig_json(state.prior_nu)},
    });
  }
  json vertices = json::array();
  for (std::size_t v = 0; v < grid.vertex_count(); ++v) {
    const auto p = grid.vertex_position(static_cast<VertexId>(v));
    const auto& s = q.vertices[v];
    vertices.push_back({{"id", v},
                        {"alpha", p.x()},
                        {"beta", p.y()},
                        {"observed", s.observed},
                        {"mean", s.observed ? json(s.mean) : json(nullptr)},
                        {"std", s.observed ? json(s.std) : json(nullptr)}});
  }
  const auto& prior = map.prior();
  const auto& m = map.metrics();
  return {
      {"format_version", kFormatVersion},
      {"kind", "stm_map"},
      {"depth", grid.depth()},
      {"prior", {{"rho", prior.rho}, {"sigma2", prior.sigma2}, {"a_p", prior.a_p}, {"b_p", prior.b_p}}},
      {"window",
       {{"mode", map.window().mode == WindowMode::Batches ? "batches" : "measurements"},
        {"size", map.window().size}}},
      {"convergence",
       {{"kl_threshold", map.convergence().kl_threshold}, {"max_sweeps", map.convergence().max_sweeps}}},
      {"metrics", {{"messages", m.message_count}, {"sweeps", m.sweep_count}, {"batches", m.batches}}},
      {"surfels", std::move(surfels)},
      {"vertices", std::move(vertices)},
  };
}

nlohmann::json scenario_to_json(const ScenarioReport& report) {
  json steps = json::array();
  for (const auto& s : report.steps) {
    steps.push_back({{"step", s.step},
                     {"n_new", s.n_new},
                     {"messages", s.messages},
                     {"normalized", s.normalized},
                     {"total_kl", s.total_kl},
                     {"region_kl_fraction", s.region_kl_fraction},
                     {"sweeps", s.sweeps},
                     {"converged", s.converged}});
  }
  return {{"format_version", kFormatVersion},
          {"kind", "scenario"},
          {"name", report.name},
          {"total_messages", report.total_messages},
          {"total_new", report.total_new},
          {"total_kl", report.total_kl},
          {"converged", report.converged},
          {"steps", std::move(steps)}};
}

nlohmann::json accuracy_to_json(const std::vector<AccuracyRow>& rows) {
  json out = json::array();
  for (const auto& r : rows) {
    out.push_back({{"seed", r.seed},
                   {"depth", r.depth},
                   {"mse_stm", r.mse_stm},
                   {"mse_elevation", r.mse_elevation},
                   {"loglik_stm", r.loglik_stm},
                   {"loglik_elevation", r.loglik_elevation},
                   {"loglik_ratio", r.loglik_ratio},
                   {"n_eval", r.n_eval},
                   {"converged", r.converged}});
  }
  return {{"format_version", kFormatVersion}, {"kind", "accuracy"}, {"rows", std::move(out)}};
}

nlohmann::json oracle_to_json(const OracleReport& report) {
  json marginals = json::array();
  for (const auto& m : report.marginals) {
    marginals.push_back({{"variable", m.variable},
                         {"mh_mean", m.mh_mean},
                         {"mh_std", m.mh_std},
                         {"mh_mean_se", m.mh_mean_se},
                         {"mh_std_se", m.mh_std_se},
                         {"effective_samples", m.effective_samples},
                         {"belief_mean", m.belief_mean},
                         {"belief_std", m.belief_std},
                         {"mean_discrepancy", m.mean_discrepancy},
                         {"std_ratio", m.std_ratio}});
  }
  // Wall-clock time is left out so reruns are byte-identical.
  return {{"format_version", kFormatVersion},
          {"kind", "oracle"},
          {"name", report.name},
          {"acceptance_rate", report.acceptance_rate},
          {"retained", report.retained},
          {"vmp_passes", report.vmp_passes},
          {"marginals", std::move(marginals)}};
}

namespace {

std::ofstream open_text(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot write " + path.string());
  out << std::setprecision(17);
  return out;
}

}  // namespace

void write_scenario_csv(const ScenarioReport& report, const std::filesystem::path& path) {
  auto out = open_text(path);
  out << "step,n_new,messages,normalized,total_kl\n";
  for (const auto& s : report.steps) {
    out << s.step << ',' << s.n_new << ',' << s.messages << ',' << s.normalized << ',' << s.total_kl << '\n';
  }
}

void write_accuracy_csv(const std::vector<AccuracyRow>& rows, const std::filesystem::path& path) {
  auto out = open_text(path);
  out << "seed,depth,mse_stm,mse_elevation,loglik_stm,loglik_elevation,loglik_ratio,n_eval,converged\n";
  for (const auto& r : rows) {
    out << r.seed << ',' << r.depth << ',' << r.mse_stm << ',' << r.mse_elevation << ',' << r.loglik_stm << ','
        << r.loglik_elevation << ',' << r.loglik_ratio << ',' << r.n_eval << ',' << (r.converged ? 1 : 0) << '\n';
  }
}

void write_samples_csv(std::span<const ChainSample> samples, const std::filesystem::path& path) {
  auto out = open_text(path);
  out << "h0,h_alpha,h_beta,nu\n";
  for (const auto& s : samples) out << s[0] << ',' << s[1] << ',' << s[2] << ',' << s[3] << '\n';
}

void write_json(const nlohmann::json& value, const std::filesystem::path& path) {
  auto out = open_text(path);
  out << value.dump(2) << '\n';
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

nlohmann::json Manifest::to_json() const {
  return {{"format_version", kFormatVersion},
          {"kind", "manifest"},
          {"tool_version", kToolVersion},
          {"args", args},
          {"config", config_text},
          {"config_hash", config_hash()},
          {"seed", seed},
          {"outputs", outputs}};
}

Manifest Manifest::from_json(const nlohmann::json& j) {
  try {
    if (j.at("format_version").get<int>() != kFormatVersion) throw ParseError("unsupported manifest version");
    Manifest m;
    m.args = j.at("args").get<std::vector<std::string>>();
    m.config_text = j.at("config").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
    if (j.at("config_hash").get<std::string>() != m.config_hash()) throw ParseError("manifest config hash mismatch");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed manifest: ") + e.what());
  }
}

}  // namespace stm::io
