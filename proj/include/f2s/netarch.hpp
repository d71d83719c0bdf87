#pragma once

// Symmetric graph generator (dual-channel masked attention + GCN blocks +
// sigmoid-Gram read-out) and the GCN connectivity discriminator.

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "f2s/conndata.hpp"
#include "f2s/errors.hpp"
#include "f2s/symdiffusion.hpp"
#include "f2s/tensorgrad.hpp"

namespace f2s {

using tg::Mask;
using tg::Tape;
using tg::Var;

struct ArchConfig {
  std::size_t n = 16;         // ROIs
  std::size_t s = 187;        // time points per series
  std::size_t model_dim = 64;
  std::size_t heads = 4;
  std::size_t layers = 3;
  std::size_t T = 100;
  std::size_t d = 10;

  std::size_t embeddings() const { return T / d + 1; }
  std::size_t head_dim() const { return model_dim / heads; }

  void validate() const {
    if (n < 2 || s < 1) throw ConfigError("arch: need n >= 2 and s >= 1");
    if (heads == 0 || model_dim % heads != 0) throw ConfigError("arch: model_dim must be a multiple of heads");
    if (layers == 0) throw ConfigError("arch: layers must be >= 1");
    if (d == 0 || T % d != 0) throw ConfigError("arch: d must divide T");
  }

  // Row of the temporal embedding table for step t; t must lie on the skip grid.
  std::size_t embedding_index(std::size_t t) const {
    if (t > T || t % d != 0)
      throw IndexError("step " + std::to_string(t) + " is not on the skip grid {0, " + std::to_string(d) + ", ..., " +
                       std::to_string(T) + "}");
    return t / d;
  }

  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ArchConfig& a) {
  j = nlohmann::json{{"n", a.n}, {"s", a.s}, {"model_dim", a.model_dim}, {"heads", a.heads},
                     {"layers", a.layers}, {"T", a.T}, {"d", a.d}};
}

inline void from_json(const nlohmann::json& j, ArchConfig& a) {
  j.at("n").get_to(a.n);
  j.at("s").get_to(a.s);
  j.at("model_dim").get_to(a.model_dim);
  j.at("heads").get_to(a.heads);
  j.at("layers").get_to(a.layers);
  j.at("T").get_to(a.T);
  j.at("d").get_to(a.d);
}

// ---------------------------------------------------------------------------
// Neighbor partition

struct NeighborPartition {
  Mask direct;
  Mask indirect;
  std::vector<std::size_t> num_direct;
  std::vector<std::size_t> num_indirect;
};

// Off-diagonal pair (i,j) is direct iff A_ij exceeds the mean off-diagonal
// entry; everything else off the diagonal is indirect.
inline NeighborPartition partition_neighbors(const Tensor& a) {
  if (a.rows() != a.cols()) throw DimensionError("partition_neighbors: square matrix required");
  const std::size_t n = a.rows();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) total += a(i, j);
  const double tau = n > 1 ? total / static_cast<double>(n * (n - 1)) : 0.0;
  NeighborPartition p{Mask(n, n), Mask(n, n), std::vector<std::size_t>(n, 0), std::vector<std::size_t>(n, 0)};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      // Compare the unordered pair so the masks stay symmetric for any input.
      const bool direct = (i < j ? a(i, j) : a(j, i)) > tau;
      (direct ? p.direct : p.indirect).set(i, j, true);
      ++(direct ? p.num_direct : p.num_indirect)[i];
    }
  return p;
}

// ---------------------------------------------------------------------------
// Building blocks on the tape

struct HeadVars {
  Var wq, wk1, wk2, wv, wo;
};

namespace detail {
inline Tensor inv_sqrt_counts(const std::vector<std::size_t>& counts) {
  Tensor t = Tensor::matrix(counts.size(), 1);
  for (std::size_t i = 0; i < counts.size(); ++i)
    t(i, 0) = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(counts[i], 1)));
  return t;
}
}  // namespace detail

// Dual-channel multi-head masked attention with residual connection.
inline Var dmsa_forward(Var features, const NeighborPartition& part, std::span<const HeadVars> heads) {
  Tape& tape = *features.tape;
  const std::size_t n = features.rows();
  if (part.direct.rows != n) throw DimensionError("dmsa: partition size does not match features");
  const Var scale_direct = tape.constant(detail::inv_sqrt_counts(part.num_direct));
  const Var scale_indirect = tape.constant(detail::inv_sqrt_counts(part.num_indirect));
  Var out = features;
  for (const auto& h : heads) {
    if (h.wq.rows() != features.cols()) throw DimensionError("dmsa: feature dim does not match projection weights");
    const Var q = tg::scale(tg::matmul(features, h.wq), 1.0 / std::sqrt(static_cast<double>(h.wq.cols())));
    const Var k1 = tg::matmul(features, h.wk1);
    const Var k2 = tg::matmul(features, h.wk2);
    const Var v = tg::matmul(features, h.wv);
    const Var att1 = tg::masked_softmax(tg::mul(tg::matmul(q, tg::transpose(k1)), scale_direct), part.direct);
    const Var att2 = tg::masked_softmax(tg::mul(tg::matmul(q, tg::transpose(k2)), scale_indirect), part.indirect);
    const Var head = tg::matmul(tg::add(att1, att2), v);
    // Concatenating heads and projecting equals summing per-head projections.
    out = tg::add(out, tg::matmul(head, h.wo));
  }
  return out;
}

// norm_adj · X · W + e_t (e_t broadcast to every row). norm_adj is the
// output of tg::normalized_adjacency.
inline Var gcn_layer(Var x, Var norm_adj, Var w, Var e_t) {
  return tg::bias_add(tg::matmul(norm_adj, tg::matmul(x, w)), e_t);
}

struct BlockVars {
  Var gcn1, gcn2, lm_w, lm_b;
};

// F + LM(ReLU(GCN2(ReLU(GCN1(F) + e)) + e)) + e with LM affine. The skip
// from F keeps repeated propagation over a dense noisy graph from collapsing
// every node onto the leading eigenvector.
inline Var generator_block(Var f_dmsa, Var norm_adj, const BlockVars& p, Var e_t) {
  const Var h1 = tg::relu(gcn_layer(f_dmsa, norm_adj, p.gcn1, e_t));
  const Var h2 = tg::relu(gcn_layer(h1, norm_adj, p.gcn2, e_t));
  return tg::add(f_dmsa, tg::bias_add(tg::bias_add(tg::matmul(h2, p.lm_w), p.lm_b), e_t));
}

inline Tensor off_diagonal_mask(std::size_t n) {
  Tensor m = Tensor::matrix(n, n, 1.0);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 0.0;
  return m;
}

// Removes the mean node, then gives every row zero mean and unit variance
// over the feature axis (no learned affine).
inline Var row_normalize(Var x, double eps = 1e-5) {
  Tape& tape = *x.tape;
  const std::size_t m = x.cols();
  const Var avg = tape.constant(Tensor::matrix(m, 1, 1.0 / static_cast<double>(m)));
  const Var node_avg = tape.constant(Tensor::matrix(1, x.rows(), 1.0 / static_cast<double>(x.rows())));
  const Var dev = tg::sub(x, tg::matmul(node_avg, x));
  const Var centered = tg::sub(dev, tg::matmul(dev, avg));
  const Var var = tg::matmul(tg::square(centered), avg);
  return tg::div(centered, tg::sqrt(tg::shift(var, eps)));
}

// sigmoid(s · F̂ F̂ᵀ / m + b) on row-normalized features, diagonal forced to
// exactly 0. F̂ F̂ᵀ / m is a cosine matrix, so s sets the sharpness. The
// offset b is needed because the mean off-diagonal cosine of n vectors is
// at least -1/(n-1); without it sparse outputs are unreachable.
inline Var pcd(Var f_graph, Var scale, Var bias) {
  Tape& tape = *f_graph.tape;
  const Var off = tape.constant(off_diagonal_mask(f_graph.rows()));
  const Var cosine = tg::scale(tg::gram(row_normalize(f_graph)), 1.0 / static_cast<double>(f_graph.cols()));
  return tg::mul(tg::sigmoid(tg::add(tg::mul(cosine, scale), bias)), off);
}

// sqrt(eta_bar_t) A + sqrt(1 - eta_bar_t) S on the tape; t = 0 is identity.
inline Var renoise_on_tape(Var a0_hat, std::size_t t, const Tensor& noise, const NoiseSchedule& sched) {
  if (t == 0) return a0_hat;
  const double eb = sched.eta_bar(t);
  Tensor scaled = noise;
  for (auto& v : scaled.storage()) v *= std::sqrt(1.0 - eb);
  for (std::size_t i = 0; i < scaled.rows(); ++i) scaled(i, i) = 0.0;
  return tg::add(tg::scale(a0_hat, std::sqrt(eb)), a0_hat.tape->constant(std::move(scaled)));
}

// Zero-mean, unit-variance rows. Constant rows map to zeros.
inline Tensor standardize_rows(const Tensor& f) {
  Tensor out = f;
  for (std::size_t i = 0; i < f.rows(); ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < f.cols(); ++j) mu += f(i, j);
    mu /= static_cast<double>(f.cols());
    double var = 0.0;
    for (std::size_t j = 0; j < f.cols(); ++j) var += (f(i, j) - mu) * (f(i, j) - mu);
    var /= static_cast<double>(f.cols());
    const double inv = var > 0.0 ? 1.0 / std::sqrt(var) : 0.0;
    for (std::size_t j = 0; j < f.cols(); ++j) out(i, j) = (f(i, j) - mu) * inv;
  }
  return out;
}

namespace detail {
inline Tensor glorot(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  const double lim = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> u(-lim, lim);
  Tensor t = Tensor::matrix(rows, cols);
  for (auto& v : t.storage()) v = u(rng);
  return t;
}

inline Tensor gaussian(std::size_t rows, std::size_t cols, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, std);
  Tensor t = Tensor::matrix(rows, cols);
  for (auto& v : t.storage()) v = g(rng);
  return t;
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Generator

class SymmetricGraphGenerator {
 public:
  struct Output {
    Var a0_hat;  // predicted clean connectome
    Var a_t;     // a0_hat re-noised to step t
  };

  SymmetricGraphGenerator() = default;

  SymmetricGraphGenerator(const ArchConfig& arch, std::uint64_t seed) : arch_(arch) {
    arch_.validate();
    std::mt19937_64 rng(seed);
    const std::size_t m = arch_.model_dim, dh = arch_.head_dim();
    params_.add("in.W", detail::glorot(arch_.s, m, rng));
    params_.add("in.b", Tensor::matrix(1, m));
    for (std::size_t l = 0; l < arch_.layers; ++l) {
      const std::string p = "L" + std::to_string(l) + ".";
      for (std::size_t h = 0; h < arch_.heads; ++h) {
        const std::string q = p + "dmsa.h" + std::to_string(h) + ".";
        params_.add(q + "Wq", detail::glorot(m, dh, rng));
        params_.add(q + "Wk1", detail::glorot(m, dh, rng));
        params_.add(q + "Wk2", detail::glorot(m, dh, rng));
        params_.add(q + "Wv", detail::glorot(m, dh, rng));
        params_.add(q + "Wo", Tensor::matrix(dh, m));
      }
      params_.add(p + "gcn1.W", detail::glorot(m, m, rng));
      params_.add(p + "gcn2.W", detail::glorot(m, m, rng));
      params_.add(p + "lm.W", Tensor::matrix(m, m));  // blocks start as the identity map
      params_.add(p + "lm.b", Tensor::matrix(1, m));
    }
    params_.add("pcd.s", Tensor::matrix(1, 1, 2.0));
    params_.add("pcd.b", Tensor::matrix(1, 1, -2.0));
    params_.add("emb", detail::gaussian(arch_.embeddings(), m, 0.1, rng));
  }

  const ArchConfig& arch() const { return arch_; }
  tg::ParameterSet& params() { return params_; }
  const tg::ParameterSet& params() const { return params_; }

  // Records one conditional denoising step on the tape. p holds the bound
  // parameter leaves in params() order. features is the standardized ROI
  // series panel (n × s).
  Output forward(Tape& tape, std::span<const Var> p, const Tensor& a_prev, const Tensor& features, std::size_t t,
                 const Tensor& noise, const NoiseSchedule& sched) const {
    if (p.size() != params_.size()) throw ContractError("generator: bound parameter count mismatch");
    if (t > arch_.T - arch_.d) throw IndexError("generator step " + std::to_string(t) + " outside 0.." + std::to_string(arch_.T - arch_.d));
    const std::size_t e_idx = arch_.embedding_index(t);
    if (a_prev.rows() != arch_.n || a_prev.cols() != arch_.n)
      throw DimensionError("generator: adjacency " + tg::shape_str(a_prev.shape()) + " does not match n=" + std::to_string(arch_.n));
    if (features.rows() != arch_.n || features.cols() != arch_.s)
      throw DimensionError("generator: features " + tg::shape_str(features.shape()) + " do not match n x s");

    const NeighborPartition part = partition_neighbors(a_prev);
    const Var adj = tg::normalized_adjacency(tape.constant(a_prev));
    const Var e_t = tg::select_row(p[params_.size() - 1], e_idx);

    Var h = tg::bias_add(tg::matmul(tape.constant(features), p[0]), p[1]);
    std::size_t k = 2;
    std::vector<HeadVars> heads(arch_.heads);
    for (std::size_t l = 0; l < arch_.layers; ++l) {
      for (auto& hv : heads) {
        hv = HeadVars{p[k], p[k + 1], p[k + 2], p[k + 3], p[k + 4]};
        k += 5;
      }
      const Var f_dmsa = dmsa_forward(h, part, heads);
      h = generator_block(f_dmsa, adj, BlockVars{p[k], p[k + 1], p[k + 2], p[k + 3]}, e_t);
      k += 4;
    }
    const Var a0_hat = pcd(h, p[params_.size() - 3], p[params_.size() - 2]);
    return {a0_hat, renoise_on_tape(a0_hat, t, noise, sched)};
  }

  // Clean prediction without gradient bookkeeping.
  Tensor predict_clean(const Tensor& a_prev, const Tensor& features, std::size_t t, const NoiseSchedule& sched) const {
    Tape tape;
    const auto p = tg::bind(tape, params_, false);
    const Tensor zero = Tensor::matrix(arch_.n, arch_.n);
    return forward(tape, p, a_prev, features, t, zero, sched).a0_hat.value();
  }

 private:
  ArchConfig arch_;
  tg::ParameterSet params_;
};

// Few-step sampling driven by a trained generator. series is the raw NPM
// output; it is standardized here.
template <class Rng>
Connectome sample_sc(const SymmetricGraphGenerator& g, const TimeSeriesPanel& series, const NoiseSchedule& sched,
                     std::size_t d, Rng& rng, const TrajectoryObserver& observe = {}) {
  const Tensor features = standardize_rows(series.values);
  return sample_sc([&](const Tensor& a_prev, std::size_t t) { return g.predict_clean(a_prev, features, t, sched); },
                   g.arch().n, sched, d, rng, observe);
}

// ---------------------------------------------------------------------------
// Discriminator

class ConnectivityDiscriminator {
 public:
  ConnectivityDiscriminator() = default;

  ConnectivityDiscriminator(const ArchConfig& arch, std::uint64_t seed) : arch_(arch) {
    arch_.validate();
    std::mt19937_64 rng(seed);
    const std::size_t m = arch_.model_dim;
    params_.add("gcn1.W", detail::glorot(arch_.n, m, rng));
    params_.add("gcn2.W", detail::glorot(m, m, rng));
    params_.add("gcn3.W", detail::glorot(m, m, rng));
    params_.add("readout.W", detail::glorot(m, 1, rng));
    params_.add("readout.b", Tensor::matrix(1, 1));
    params_.add("emb", detail::gaussian(arch_.embeddings(), m, 0.1, rng));
  }

  const ArchConfig& arch() const { return arch_; }
  tg::ParameterSet& params() { return params_; }
  const tg::ParameterSet& params() const { return params_; }

  // Raw least-squares score (no output sigmoid). a may carry gradient.
  Var forward(std::span<const Var> p, Var a, std::size_t t) const {
    if (p.size() != params_.size()) throw ContractError("discriminator: bound parameter count mismatch");
    if (a.rows() != arch_.n || a.cols() != arch_.n)
      throw DimensionError("discriminator: adjacency " + tg::shape_str(a.value().shape()) + " does not match n=" + std::to_string(arch_.n));
    const Var e_t = tg::select_row(p[5], arch_.embedding_index(t));
    const Var adj = tg::normalized_adjacency(a);
    // One-hot node features: I·W1 == W1.
    const Var h1 = tg::relu(tg::bias_add(tg::matmul(adj, p[0]), e_t));
    const Var h2 = tg::relu(gcn_layer(h1, adj, p[1], e_t));
    const Var h3 = gcn_layer(h2, adj, p[2], e_t);
    return tg::add(tg::matmul(tg::mean_rows(h3), p[3]), p[4]);
  }

 private:
  ArchConfig arch_;
  tg::ParameterSet params_;
};

// ---------------------------------------------------------------------------
// Checkpoint blocks
//
// Layout: line 1 is a single-line JSON header whose "blocks" array lists
// {name, rows, cols} in file order; every following line is one CSV matrix
// row, blocks concatenated in that order.

struct NamedBlock {
  std::string name;
  Tensor value;
};

inline void write_blocks(const std::filesystem::path& path, nlohmann::json header, const std::vector<NamedBlock>& blocks) {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& b : blocks) list.push_back({{"name", b.name}, {"rows", b.value.rows()}, {"cols", b.value.cols()}});
  header["blocks"] = std::move(list);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp);
    if (!os) throw DataError("cannot write " + tmp.string());
    os << header.dump() << '\n';
    for (const auto& b : blocks) write_matrix_csv(os, b.value);
    if (!os) throw DataError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::pair<nlohmann::json, std::vector<NamedBlock>> read_blocks(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw FormatError(path.string() + ": empty checkpoint");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad header: " + e.what());
  }
  if (!header.is_object() || !header.contains("blocks") || !header["blocks"].is_array())
    throw FormatError(path.string() + ": header has no block list");
  std::vector<NamedBlock> blocks;
  std::size_t lineno = 1;
  for (const auto& b : header.at("blocks")) {
    if (!b.is_object() || !b.contains("name") || !b.contains("rows") || !b.contains("cols") || !b["rows"].is_number_unsigned() ||
        !b["cols"].is_number_unsigned() || !b["name"].is_string())
      throw FormatError(path.string() + ": malformed block entry " + b.dump());
    const auto rows = b.at("rows").get<std::size_t>();
    const auto cols = b.at("cols").get<std::size_t>();
    std::vector<double> data;
    data.reserve(rows * cols);
    for (std::size_t r = 0; r < rows; ++r) {
      if (!std::getline(is, line)) throw FormatError(path.string() + ": truncated in block " + b.at("name").get<std::string>());
      ++lineno;
      auto row = parse_csv_row(line, lineno, path.string());
      if (row.size() != cols) throw FormatError(path.string() + ": wrong column count on line " + std::to_string(lineno));
      data.insert(data.end(), row.begin(), row.end());
    }
    blocks.push_back({b.at("name").get<std::string>(), Tensor({rows, cols}, std::move(data))});
  }
  return {std::move(header), std::move(blocks)};
}

inline void append_blocks(std::vector<NamedBlock>& out, const std::string& prefix, const tg::ParameterSet& ps) {
  for (const auto& p : ps) out.push_back({prefix + p.name, p.value});
}

inline void append_blocks(std::vector<NamedBlock>& out, const std::string& prefix, const tg::ParameterSet& ps,
                          const std::vector<Tensor>& values) {
  for (std::size_t i = 0; i < ps.size(); ++i) out.push_back({prefix + ps[i].name, values[i]});
}

// Copies blocks named prefix+param into the tensors, checking shapes.
inline void restore_blocks(const std::vector<NamedBlock>& blocks, const std::string& prefix, const tg::ParameterSet& ps,
                           std::vector<Tensor*> targets) {
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const std::string want = prefix + ps[i].name;
    const NamedBlock* found = nullptr;
    for (const auto& b : blocks)
      if (b.name == want) found = &b;
    if (!found) throw FormatError("checkpoint is missing block '" + want + "'");
    if (found->value.rows() != ps[i].value.rows() || found->value.cols() != ps[i].value.cols())
      throw VersionError("checkpoint block '" + want + "' has shape " + tg::shape_str(found->value.shape()) +
                         ", expected " + tg::shape_str(ps[i].value.shape()));
    const bool rg = targets[i]->requires_grad();
    *targets[i] = Tensor(ps[i].value.shape(), found->value.storage(), rg);
  }
}

}  // namespace f2s
