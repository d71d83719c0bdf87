#pragma once

// Connectome data model, file formats, atlas-mean parcellation and the
// synthetic planted-mapping dataset.

#include <Eigen/Eigenvalues>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "f2s/errors.hpp"
#include "f2s/tensorgrad.hpp"

namespace f2s {

using tg::Tensor;

// Symmetric n×n matrix with an exactly zero diagonal.
struct Connectome {
  Tensor values;

  Connectome() = default;
  explicit Connectome(Tensor v) : values(std::move(v)) {}
  static Connectome zeros(std::size_t n) { return Connectome(Tensor::matrix(n, n)); }

  std::size_t n() const { return values.rows(); }
  double operator()(std::size_t i, std::size_t j) const { return values(i, j); }
  double& operator()(std::size_t i, std::size_t j) { return values(i, j); }
  friend bool operator==(const Connectome&, const Connectome&) = default;
};

// n ROIs × s time points.
struct TimeSeriesPanel {
  Tensor values;

  TimeSeriesPanel() = default;
  explicit TimeSeriesPanel(Tensor v) : values(std::move(v)) {}
  std::size_t n() const { return values.rows(); }
  std::size_t s() const { return values.cols(); }
  friend bool operator==(const TimeSeriesPanel&, const TimeSeriesPanel&) = default;
};

// 4D signal on an X×Y×Z grid with S time points and an integer atlas.
// Signal is row-major with the time axis fastest.
struct LabeledVolume {
  std::array<std::uint32_t, 4> dims{};  // X, Y, Z, S
  std::vector<double> signal;
  std::vector<std::int32_t> atlas;

  std::size_t voxels() const { return std::size_t{dims[0]} * dims[1] * dims[2]; }
  std::size_t timepoints() const { return dims[3]; }
  std::size_t voxel_index(std::size_t x, std::size_t y, std::size_t z) const {
    return (x * dims[1] + y) * dims[2] + z;
  }
  double& at(std::size_t voxel, std::size_t tau) { return signal[voxel * dims[3] + tau]; }
  double at(std::size_t voxel, std::size_t tau) const { return signal[voxel * dims[3] + tau]; }
  friend bool operator==(const LabeledVolume&, const LabeledVolume&) = default;
};

enum class Group { NC, MCI };

inline std::string to_string(Group g) { return g == Group::NC ? "NC" : "MCI"; }
inline Group parse_group(const std::string& s) {
  if (s == "NC") return Group::NC;
  if (s == "MCI") return Group::MCI;
  throw DataError("unknown group label '" + s + "'");
}

struct SubjectRecord {
  std::string id;
  std::optional<LabeledVolume> volume;
  std::optional<TimeSeriesPanel> timeseries;
  std::optional<Connectome> empirical_sc;
  Group group = Group::NC;
};

using Edge = std::pair<std::size_t, std::size_t>;

// ---------------------------------------------------------------------------
// Validation

// Throws ValidationError naming the first offending index. Range checking
// applies to clean (empirical or predicted) matrices only.
inline void validate_connectome(const Tensor& m, bool check_range = true) {
  if (m.rank() != 2 || m.rows() != m.cols())
    throw ValidationError("connectome must be square, got shape " + tg::shape_str(m.shape()));
  const std::size_t n = m.rows();
  for (std::size_t i = 0; i < n; ++i) {
    if (m(i, i) != 0.0)
      throw ValidationError("connectome diagonal is nonzero at (" + std::to_string(i) + "," + std::to_string(i) + ")");
    for (std::size_t j = 0; j < n; ++j) {
      const double v = m(i, j);
      if (!std::isfinite(v))
        throw ValidationError("connectome entry not finite at (" + std::to_string(i) + "," + std::to_string(j) + ")");
      if (j > i && v != m(j, i))
        throw ValidationError("connectome is asymmetric at (" + std::to_string(i) + "," + std::to_string(j) + ")");
      if (check_range && (v < 0.0 || v > 1.0))
        throw ValidationError("connectome entry outside [0,1] at (" + std::to_string(i) + "," + std::to_string(j) + ")");
    }
  }
}

// ---------------------------------------------------------------------------
// Atlas-mean parcellation

// Mean signal over the voxels of each label 1..n at every time point. The
// ROI count is the largest label present; every label below it must own at
// least one voxel.
inline TimeSeriesPanel npm_parcellate(const LabeledVolume& vol) {
  if (vol.atlas.size() != vol.voxels() || vol.signal.size() != vol.voxels() * vol.timepoints())
    throw DataError("volume buffers do not match dims");
  std::int32_t n = 0;
  for (auto l : vol.atlas) {
    if (l < 0) throw DataError("negative atlas label " + std::to_string(l));
    n = std::max(n, l);
  }
  if (n == 0) throw DataError("atlas has no ROI labels");
  const std::size_t s = vol.timepoints();
  std::vector<std::size_t> counts(n + 1, 0);
  Tensor out = Tensor::matrix(static_cast<std::size_t>(n), s);
  for (std::size_t v = 0; v < vol.voxels(); ++v) {
    const auto l = vol.atlas[v];
    if (l == 0) continue;
    ++counts[l];
    for (std::size_t tau = 0; tau < s; ++tau) out(l - 1, tau) += vol.at(v, tau);
  }
  std::string missing;
  for (std::int32_t l = 1; l <= n; ++l)
    if (counts[l] == 0) missing += (missing.empty() ? "" : ",") + std::to_string(l);
  if (!missing.empty()) throw DataError("atlas coverage error: labels with no voxels: " + missing);
  for (std::int32_t l = 1; l <= n; ++l) {
    const double inv = 1.0 / static_cast<double>(counts[l]);
    for (std::size_t tau = 0; tau < s; ++tau) out(l - 1, tau) *= inv;
  }
  return TimeSeriesPanel(std::move(out));
}

// Returns the subject's ROI series, parcellating the volume if needed.
inline const TimeSeriesPanel& ensure_timeseries(SubjectRecord& r) {
  if (!r.timeseries) {
    if (!r.volume) throw DataError("subject '" + r.id + "' has neither volume nor timeseries");
    r.timeseries = npm_parcellate(*r.volume);
  }
  return *r.timeseries;
}

// ---------------------------------------------------------------------------
// CSV matrices

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_matrix_csv(std::ostream& os, const Tensor& m) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
      if (j) os << ',';
      os << format_double(m(i, j));
    }
    os << '\n';
  }
}

inline std::vector<double> parse_csv_row(const std::string& line, std::size_t lineno, const std::string& where) {
  std::vector<double> row;
  std::size_t pos = 0;
  while (pos <= line.size()) {
    std::size_t end = line.find(',', pos);
    if (end == std::string::npos) end = line.size();
    const std::string cell = line.substr(pos, end - pos);
    char* stop = nullptr;
    const double v = std::strtod(cell.c_str(), &stop);
    if (cell.empty() || stop == cell.c_str() || *stop != '\0')
      throw FormatError(where + ": bad number '" + cell + "' on line " + std::to_string(lineno));
    row.push_back(v);
    pos = end + 1;
  }
  return row;
}

inline Tensor read_matrix_csv(std::istream& is, const std::string& where) {
  std::vector<double> data;
  std::size_t cols = 0, rows = 0;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto row = parse_csv_row(line, rows + 1, where);
    if (rows == 0) cols = row.size();
    if (row.size() != cols) throw FormatError(where + ": ragged row " + std::to_string(rows + 1));
    data.insert(data.end(), row.begin(), row.end());
    ++rows;
  }
  if (rows == 0) throw FormatError(where + ": empty matrix file");
  return Tensor({rows, cols}, std::move(data));
}

inline void save_matrix(const std::filesystem::path& path, const Tensor& m) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  write_matrix_csv(os, m);
  if (!os) throw DataError("write failed for " + path.string());
}

inline void save_matrix(const std::filesystem::path& path, const Connectome& c) { save_matrix(path, c.values); }
inline void save_matrix(const std::filesystem::path& path, const TimeSeriesPanel& p) { save_matrix(path, p.values); }

inline Tensor load_matrix(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read " + path.string());
  return read_matrix_csv(is, path.string());
}

inline Connectome load_connectome(const std::filesystem::path& path) {
  Tensor m = load_matrix(path);
  validate_connectome(m);
  return Connectome(std::move(m));
}

inline TimeSeriesPanel load_timeseries(const std::filesystem::path& path) {
  Tensor m = load_matrix(path);
  for (double v : m.data())
    if (!std::isfinite(v)) throw ValidationError("time series contains non-finite values: " + path.string());
  return TimeSeriesPanel(std::move(m));
}

// ---------------------------------------------------------------------------
// F2SV binary volumes

inline constexpr std::array<char, 4> kVolumeMagic{'F', '2', 'S', 'V'};
inline constexpr std::uint16_t kVolumeVersion = 1;

namespace detail {
template <class U>
void put_le(std::string& out, U v) {
  for (std::size_t b = 0; b < sizeof(U); ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xFF));
}

template <class U>
U get_le(const std::string& in, std::size_t& off, const std::string& what) {
  if (off + sizeof(U) > in.size())
    throw FormatError("truncated volume file while reading " + what + " at byte offset " + std::to_string(off));
  U v = 0;
  for (std::size_t b = 0; b < sizeof(U); ++b)
    v |= static_cast<U>(static_cast<unsigned char>(in[off + b])) << (8 * b);
  off += sizeof(U);
  return v;
}
}  // namespace detail

inline std::string encode_volume(const LabeledVolume& vol) {
  std::string out(kVolumeMagic.begin(), kVolumeMagic.end());
  detail::put_le<std::uint16_t>(out, kVolumeVersion);
  for (auto d : vol.dims) detail::put_le<std::uint32_t>(out, d);
  for (auto l : vol.atlas) detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(l));
  for (double v : vol.signal) detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

inline LabeledVolume decode_volume(const std::string& bytes) {
  if (bytes.size() < 4 || !std::equal(kVolumeMagic.begin(), kVolumeMagic.end(), bytes.begin()))
    throw FormatError("bad magic at byte offset 0 (expected F2SV)");
  std::size_t off = 4;
  const auto version = detail::get_le<std::uint16_t>(bytes, off, "version");
  if (version != kVolumeVersion)
    throw FormatError("unsupported volume version " + std::to_string(version) + " at byte offset 4");
  LabeledVolume vol;
  for (auto& d : vol.dims) {
    const std::size_t at = off;
    d = detail::get_le<std::uint32_t>(bytes, off, "dims");
    if (d == 0) throw FormatError("zero dimension at byte offset " + std::to_string(at));
  }
  const std::size_t nv = vol.voxels();
  const std::size_t need = off + nv * 4 + nv * vol.timepoints() * 8;
  if (bytes.size() < need)
    throw FormatError("truncated volume file: " + std::to_string(bytes.size()) + " bytes, expected " +
                      std::to_string(need) + " (data ends at byte offset " + std::to_string(bytes.size()) + ")");
  if (bytes.size() > need) throw FormatError("trailing bytes after volume data at byte offset " + std::to_string(need));
  vol.atlas.resize(nv);
  for (auto& l : vol.atlas) l = static_cast<std::int32_t>(detail::get_le<std::uint32_t>(bytes, off, "atlas"));
  vol.signal.resize(nv * vol.timepoints());
  for (auto& v : vol.signal) v = std::bit_cast<double>(detail::get_le<std::uint64_t>(bytes, off, "signal"));
  return vol;
}

inline void save_volume(const std::filesystem::path& path, const LabeledVolume& vol) {
  const std::string bytes = encode_volume(vol);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw DataError("write failed for " + path.string());
}

inline LabeledVolume load_volume(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  try {
    return decode_volume(ss.str());
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Synthetic planted-mapping dataset

struct SynthConfig {
  std::size_t n_subjects = 240;
  std::size_t n = 16;
  std::size_t s = 187;
  std::uint64_t seed = 7;
  double density = 0.2;                 // fraction of pairs in the shared backbone
  std::size_t group_edges = 10;         // edges strengthened in MCI
  std::array<std::size_t, 3> grid{0, 0, 0};  // atlas blocks per axis; 0 = choose automatically
  std::size_t block = 2;                // voxels per block edge
  double spectral_radius = 0.95;        // of the planted dynamics, at most 0.95
  double noise_std = 1.0;
  double drop_prob = 0.05;              // per-subject chance a backbone edge is absent
  double weight_jitter = 0.1;           // relative std of backbone weights
  double rewire_fraction = 0.02;        // share of free pairs given a subject-specific edge
  bool write_volumes = true;
};

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = nlohmann::json{{"n_subjects", c.n_subjects}, {"n", c.n}, {"s", c.s}, {"seed", c.seed},
                     {"density", c.density}, {"group_edges", c.group_edges}, {"grid", c.grid},
                     {"block", c.block}, {"spectral_radius", c.spectral_radius},
                     {"noise_std", c.noise_std}, {"drop_prob", c.drop_prob},
                     {"weight_jitter", c.weight_jitter}, {"rewire_fraction", c.rewire_fraction},
                     {"write_volumes", c.write_volumes}};
}

inline void from_json(const nlohmann::json& j, SynthConfig& c) {
  SynthConfig d;
  c.n_subjects = j.value("n_subjects", d.n_subjects);
  c.n = j.value("n", d.n);
  c.s = j.value("s", d.s);
  c.seed = j.value("seed", d.seed);
  c.density = j.value("density", d.density);
  c.group_edges = j.value("group_edges", d.group_edges);
  c.grid = j.value("grid", d.grid);
  c.block = j.value("block", d.block);
  c.spectral_radius = j.value("spectral_radius", d.spectral_radius);
  c.noise_std = j.value("noise_std", d.noise_std);
  c.drop_prob = j.value("drop_prob", d.drop_prob);
  c.weight_jitter = j.value("weight_jitter", d.weight_jitter);
  c.rewire_fraction = j.value("rewire_fraction", d.rewire_fraction);
  c.write_volumes = j.value("write_volumes", d.write_volumes);
}

struct Dataset {
  std::size_t n = 0;
  std::size_t s = 0;
  std::uint64_t seed = 0;
  std::vector<SubjectRecord> subjects;
  std::vector<Edge> planted_edges;  // MCI-strengthened pairs (i < j)
};

namespace detail {
inline std::array<std::size_t, 3> block_grid(const SynthConfig& c) {
  if (c.grid[0] && c.grid[1] && c.grid[2]) {
    if (c.n > c.grid[0] * c.grid[1] * c.grid[2])
      throw ConfigError("infeasible atlas: " + std::to_string(c.n) + " ROIs do not fit a " + std::to_string(c.grid[0]) +
                        "x" + std::to_string(c.grid[1]) + "x" + std::to_string(c.grid[2]) + " block grid");
    return c.grid;
  }
  std::size_t g = 1;
  while (g * g * g < c.n) ++g;
  std::size_t gz = g;
  while (gz > 1 && g * g * (gz - 1) >= c.n) --gz;
  return {g, g, gz};
}

inline std::mt19937_64 subject_stream(std::uint64_t seed, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), 0x5eedu};
  return std::mt19937_64(seq);
}
}  // namespace detail

// Paints each ROI's series into a contiguous block of voxels.
inline LabeledVolume paint_block_volume(const TimeSeriesPanel& ts, const std::array<std::size_t, 3>& grid,
                                        std::size_t block) {
  const std::size_t n = ts.n(), s = ts.s();
  if (n > grid[0] * grid[1] * grid[2]) throw ConfigError("infeasible atlas: too many ROIs for block grid");
  LabeledVolume vol;
  vol.dims = {static_cast<std::uint32_t>(grid[0] * block), static_cast<std::uint32_t>(grid[1] * block),
              static_cast<std::uint32_t>(grid[2] * block), static_cast<std::uint32_t>(s)};
  vol.atlas.assign(vol.voxels(), 0);
  vol.signal.assign(vol.voxels() * s, 0.0);
  for (std::size_t x = 0; x < vol.dims[0]; ++x)
    for (std::size_t y = 0; y < vol.dims[1]; ++y)
      for (std::size_t z = 0; z < vol.dims[2]; ++z) {
        const std::size_t b = ((x / block) * grid[1] + y / block) * grid[2] + z / block;
        if (b >= n) continue;
        const std::size_t v = vol.voxel_index(x, y, z);
        vol.atlas[v] = static_cast<std::int32_t>(b + 1);
        for (std::size_t tau = 0; tau < s; ++tau) vol.at(v, tau) = ts.values(b, tau);
      }
  return vol;
}

// Stable linear dynamics x' = rho * Ahat x + noise over the lazy
// degree-normalized graph Ahat = D^{-1/2}(A + I)D^{-1/2}.
inline TimeSeriesPanel simulate_dynamics(const Connectome& sc, std::size_t s, double spectral_radius,
                                         double noise_std, std::mt19937_64& rng) {
  const std::size_t n = sc.n();
  Eigen::MatrixXd a(n, n);
  Eigen::VectorXd deg = Eigen::VectorXd::Zero(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      a(i, j) = sc(i, j) + (i == j ? 1.0 : 0.0);
      deg(i) += a(i, j);
    }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) a(i, j) /= std::sqrt(deg(i) * deg(j));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a, Eigen::EigenvaluesOnly);
  const double lambda = es.eigenvalues().cwiseAbs().maxCoeff();
  const Eigen::MatrixXd step = (spectral_radius / lambda) * a;

  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
  auto advance = [&] {
    Eigen::VectorXd e(n);
    for (std::size_t i = 0; i < n; ++i) e(i) = noise_std * normal(rng);
    x = step * x + e;
  };
  const std::size_t burn_in = 100;
  for (std::size_t k = 0; k < burn_in; ++k) advance();
  Tensor out = Tensor::matrix(n, s);
  for (std::size_t tau = 0; tau < s; ++tau) {
    advance();
    for (std::size_t i = 0; i < n; ++i) out(i, tau) = x(i);
  }
  return TimeSeriesPanel(std::move(out));
}

// Generates subjects whose SC shares a population backbone, carries
// per-subject weight jitter and rewiring, and (for MCI) a fixed set of
// strengthened group-difference edges. Series follow the planted SC through
// simulate_dynamics and are painted into a block atlas.
inline Dataset synth_dataset(const SynthConfig& c) {
  if (c.n < 4) throw ConfigError("synth: n must be >= 4");
  if (c.s < 2 * c.n) throw ConfigError("synth: s must be >= 2n");
  if (c.n_subjects < 2) throw ConfigError("synth: need at least 2 subjects");
  if (!(c.spectral_radius > 0.0 && c.spectral_radius <= 0.95)) throw ConfigError("synth: spectral_radius must be in (0, 0.95]");
  if (!(c.density > 0.0 && c.density < 1.0)) throw ConfigError("synth: density must be in (0,1)");
  if (c.block == 0) throw ConfigError("synth: block must be >= 1");
  if (!(c.drop_prob >= 0.0 && c.drop_prob <= 1.0)) throw ConfigError("synth: drop_prob must be in [0,1]");
  if (!(c.weight_jitter >= 0.0) || !(c.rewire_fraction >= 0.0 && c.rewire_fraction <= 1.0))
    throw ConfigError("synth: weight_jitter must be >= 0 and rewire_fraction in [0,1]");
  const auto grid = c.write_volumes ? detail::block_grid(c) : std::array<std::size_t, 3>{};

  const std::size_t n = c.n;
  std::vector<Edge> pairs;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) pairs.emplace_back(i, j);

  std::mt19937_64 rng(c.seed);
  std::shuffle(pairs.begin(), pairs.end(), rng);
  const std::size_t n_backbone = static_cast<std::size_t>(std::llround(c.density * static_cast<double>(pairs.size())));
  const std::size_t n_group = std::min(c.group_edges, pairs.size() - n_backbone);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<double> template_w(n_backbone);
  for (auto& w : template_w) w = 0.3 + 0.5 * unif(rng);

  Dataset ds;
  ds.n = n;
  ds.s = c.s;
  ds.seed = c.seed;
  ds.planted_edges.assign(pairs.begin() + static_cast<std::ptrdiff_t>(n_backbone),
                          pairs.begin() + static_cast<std::ptrdiff_t>(n_backbone + n_group));
  std::sort(ds.planted_edges.begin(), ds.planted_edges.end());
  const std::size_t first_free = n_backbone + n_group;

  for (std::size_t k = 0; k < c.n_subjects; ++k) {
    auto srng = detail::subject_stream(c.seed, k);
    std::normal_distribution<double> normal(0.0, 1.0);
    SubjectRecord rec;
    char id[32];
    std::snprintf(id, sizeof id, "sub-%04zu", k);
    rec.id = id;
    rec.group = (k % 2 == 0) ? Group::NC : Group::MCI;

    Connectome sc = Connectome::zeros(n);
    auto set = [&](const Edge& e, double w) {
      w = std::clamp(w, 0.0, 1.0);
      sc(e.first, e.second) = w;
      sc(e.second, e.first) = w;
    };
    for (const auto& e : pairs) set(e, 0.05 * unif(srng));
    for (std::size_t b = 0; b < n_backbone; ++b) {
      if (unif(srng) < c.drop_prob) continue;  // edge dropped for this subject
      set(pairs[b], template_w[b] * (1.0 + c.weight_jitter * normal(srng)));
    }
    if (first_free < pairs.size()) {
      const auto extra = static_cast<std::size_t>(
          std::llround(c.rewire_fraction * static_cast<double>(pairs.size() - first_free)));
      std::uniform_int_distribution<std::size_t> pick(first_free, pairs.size() - 1);
      for (std::size_t e = 0; e < extra; ++e) set(pairs[pick(srng)], 0.3 + 0.3 * unif(srng));
    }
    if (rec.group == Group::MCI)
      for (const auto& e : ds.planted_edges) set(e, 0.5 + 0.2 * unif(srng));

    TimeSeriesPanel ts = simulate_dynamics(sc, c.s, c.spectral_radius, c.noise_std, srng);
    if (c.write_volumes) rec.volume = paint_block_volume(ts, grid, c.block);
    rec.timeseries = std::move(ts);
    rec.empirical_sc = std::move(sc);
    ds.subjects.push_back(std::move(rec));
  }
  return ds;
}

// Deterministic 80/20 train/validation split of subject indices.
struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};

inline Split split_subjects(std::size_t count, std::uint64_t seed, double train_fraction = 0.8) {
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::size_t n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(count)));
  n_train = std::clamp<std::size_t>(n_train, 1, count > 1 ? count - 1 : 1);
  Split sp;
  sp.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
  sp.validation.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  std::sort(sp.train.begin(), sp.train.end());
  std::sort(sp.validation.begin(), sp.validation.end());
  return sp;
}

// ---------------------------------------------------------------------------
// Dataset manifest

inline constexpr const char* kManifestName = "manifest.json";

// Writes per-subject files plus manifest.json into dir.
inline void write_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  nlohmann::json subjects = nlohmann::json::array();
  for (const auto& r : ds.subjects) {
    nlohmann::json s{{"id", r.id}, {"group", to_string(r.group)}};
    if (r.volume) {
      const std::string f = r.id + "_bold.f2sv";
      save_volume(dir / f, *r.volume);
      s["volume"] = f;
    } else if (r.timeseries) {
      const std::string f = r.id + "_ts.csv";
      save_matrix(dir / f, *r.timeseries);
      s["timeseries"] = f;
    }
    if (r.empirical_sc) {
      const std::string f = r.id + "_sc.csv";
      save_matrix(dir / f, *r.empirical_sc);
      s["sc"] = f;
    }
    subjects.push_back(std::move(s));
  }
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& e : ds.planted_edges) edges.push_back({e.first, e.second});
  nlohmann::json m{{"format", "f2s-dataset"}, {"version", 1}, {"n", ds.n}, {"s", ds.s}, {"seed", ds.seed},
                   {"planted_group_edges", edges}, {"subjects", subjects}};
  std::ofstream os(dir / kManifestName);
  if (!os) throw DataError("cannot write manifest in " + dir.string());
  os << m.dump(2) << '\n';
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// Accepts either the manifest file or the directory holding it. Volumes are
// parcellated on load; the raw volume is kept only if keep_volumes is set.
inline Dataset load_dataset(std::filesystem::path path, bool keep_volumes = false) {
  if (std::filesystem::is_directory(path)) path /= kManifestName;
  const auto dir = path.parent_path();
  const auto m = read_json(path);
  Dataset ds;
  try {
    ds.n = m.at("n").get<std::size_t>();
    ds.s = m.at("s").get<std::size_t>();
    ds.seed = m.value("seed", std::uint64_t{0});
    for (const auto& e : m.value("planted_group_edges", nlohmann::json::array()))
      ds.planted_edges.emplace_back(e.at(0).get<std::size_t>(), e.at(1).get<std::size_t>());
    for (const auto& s : m.at("subjects")) {
      SubjectRecord r;
      r.id = s.at("id").get<std::string>();
      r.group = parse_group(s.at("group").get<std::string>());
      const bool has_vol = s.contains("volume") && !s["volume"].is_null();
      const bool has_ts = s.contains("timeseries") && !s["timeseries"].is_null();
      if (has_vol == has_ts)
        throw DataError("subject '" + r.id + "' must list exactly one of volume/timeseries");
      if (has_vol) {
        r.volume = load_volume(dir / s["volume"].get<std::string>());
        r.timeseries = npm_parcellate(*r.volume);
        if (!keep_volumes) r.volume.reset();
      } else {
        r.timeseries = load_timeseries(dir / s["timeseries"].get<std::string>());
      }
      if (s.contains("sc") && !s["sc"].is_null()) r.empirical_sc = load_connectome(dir / s["sc"].get<std::string>());
      if (r.timeseries->n() != ds.n) throw DataError("subject '" + r.id + "' has " + std::to_string(r.timeseries->n()) + " ROIs, manifest says " + std::to_string(ds.n));
      if (r.empirical_sc && r.empirical_sc->n() != ds.n) throw DataError("subject '" + r.id + "' SC size mismatch");
      ds.subjects.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return ds;
}

}  // namespace f2s
