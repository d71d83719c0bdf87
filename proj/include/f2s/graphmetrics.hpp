#pragma once

// Graph measures on connectomes: proportional thresholding, degree,
// strength, clustering, Brandes betweenness, efficiency, and the
// eight-metric prediction error report.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <queue>
#include <string>
#include <vector>

#include "f2s/conndata.hpp"
#include "f2s/errors.hpp"

namespace f2s {

struct BinaryGraph {
  std::size_t n = 0;
  std::vector<std::uint8_t> adj;

  BinaryGraph() = default;
  explicit BinaryGraph(std::size_t nodes) : n(nodes), adj(nodes * nodes, 0) {}

  bool operator()(std::size_t i, std::size_t j) const { return adj[i * n + j] != 0; }

  void connect(std::size_t i, std::size_t j) {
    if (i == j) throw DataError("self-loop at node " + std::to_string(i));
    adj[i * n + j] = 1;
    adj[j * n + i] = 1;
  }

  std::vector<std::size_t> neighbors(std::size_t i) const {
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < n; ++j)
      if ((*this)(i, j)) out.push_back(j);
    return out;
  }

  std::size_t edge_count() const {
    std::size_t k = 0;
    for (auto b : adj) k += b;
    return k / 2;
  }

  friend bool operator==(const BinaryGraph&, const BinaryGraph&) = default;
};

using MetricVector = std::vector<double>;

// Keeps the floor(density * n(n-1)/2) strongest upper-triangle edges. Equal
// weights are ranked by (i, j) lexicographically.
inline BinaryGraph binarize(const Tensor& a, double density) {
  if (!(density > 0.0 && density <= 1.0)) throw ConfigError("binarize: density must be in (0, 1]");
  if (a.rows() != a.cols()) throw DimensionError("binarize: square matrix required");
  const std::size_t n = a.rows();
  struct Cand {
    double w;
    std::size_t i, j;
  };
  std::vector<Cand> cand;
  cand.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) cand.push_back({a(i, j), i, j});
  const std::size_t keep =
      std::min(cand.size(), static_cast<std::size_t>(std::floor(density * static_cast<double>(cand.size()) + 1e-9)));
  std::stable_sort(cand.begin(), cand.end(), [](const Cand& x, const Cand& y) {
    if (x.w != y.w) return x.w > y.w;
    return x.i != y.i ? x.i < y.i : x.j < y.j;
  });
  BinaryGraph g(n);
  for (std::size_t k = 0; k < keep; ++k) g.connect(cand[k].i, cand[k].j);
  return g;
}

inline MetricVector degree(const BinaryGraph& g) {
  MetricVector out(g.n, 0.0);
  for (std::size_t i = 0; i < g.n; ++i)
    for (std::size_t j = 0; j < g.n; ++j) out[i] += g(i, j);
  return out;
}

inline MetricVector strength(const Tensor& a) {
  MetricVector out(a.rows(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out[i] += a(i, j);
  return out;
}

// Local clustering coefficient; nodes with fewer than two neighbors get 0.
inline MetricVector clustering(const BinaryGraph& g) {
  MetricVector out(g.n, 0.0);
  for (std::size_t i = 0; i < g.n; ++i) {
    const auto nb = g.neighbors(i);
    const std::size_t k = nb.size();
    if (k < 2) continue;
    std::size_t tri = 0;
    for (std::size_t a = 0; a < k; ++a)
      for (std::size_t b = a + 1; b < k; ++b) tri += g(nb[a], nb[b]);
    out[i] = static_cast<double>(tri) / (static_cast<double>(k) * static_cast<double>(k - 1) / 2.0);
  }
  return out;
}

inline constexpr std::size_t kUnreachable = std::numeric_limits<std::size_t>::max();

// Hop distances from one source; kUnreachable for other components.
inline std::vector<std::size_t> bfs_distances(const BinaryGraph& g, std::size_t src) {
  std::vector<std::size_t> dist(g.n, kUnreachable);
  std::queue<std::size_t> q;
  dist[src] = 0;
  q.push(src);
  while (!q.empty()) {
    const std::size_t v = q.front();
    q.pop();
    for (std::size_t w = 0; w < g.n; ++w)
      if (g(v, w) && dist[w] == kUnreachable) {
        dist[w] = dist[v] + 1;
        q.push(w);
      }
  }
  return dist;
}

// Brandes' algorithm on the unweighted graph. Each unordered pair {i,j}
// contributes sigma_ij(k)/sigma_ij to every interior node k; the sum is
// divided by (n-1)(n-2)/2. Scalar is a template parameter so exact rational
// arithmetic can be substituted.
template <class Scalar = double>
std::vector<Scalar> betweenness(const BinaryGraph& g) {
  const std::size_t n = g.n;
  std::vector<Scalar> bc(n, Scalar(0));
  if (n < 3) return bc;
  for (std::size_t s = 0; s < n; ++s) {
    std::vector<std::size_t> order;
    order.reserve(n);
    std::vector<std::vector<std::size_t>> pred(n);
    std::vector<Scalar> sigma(n, Scalar(0));
    std::vector<std::size_t> dist(n, kUnreachable);
    sigma[s] = Scalar(1);
    dist[s] = 0;
    std::queue<std::size_t> q;
    q.push(s);
    while (!q.empty()) {
      const std::size_t v = q.front();
      q.pop();
      order.push_back(v);
      for (std::size_t w = 0; w < n; ++w) {
        if (!g(v, w)) continue;
        if (dist[w] == kUnreachable) {
          dist[w] = dist[v] + 1;
          q.push(w);
        }
        if (dist[w] == dist[v] + 1) {
          sigma[w] = sigma[w] + sigma[v];
          pred[w].push_back(v);
        }
      }
    }
    std::vector<Scalar> delta(n, Scalar(0));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      const std::size_t w = *it;
      for (auto v : pred[w]) delta[v] = delta[v] + (sigma[v] / sigma[w]) * (Scalar(1) + delta[w]);
      if (w != s) bc[w] = bc[w] + delta[w];
    }
  }
  // Every unordered pair was visited from both endpoints.
  const Scalar norm = Scalar(static_cast<long long>((n - 1) * (n - 2)));
  for (auto& v : bc) v = v / norm;
  return bc;
}

// Mean of 1/d(i,j) over ordered pairs i != j; unreachable pairs add 0.
inline double global_efficiency(const BinaryGraph& g) {
  if (g.n < 2) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < g.n; ++i) {
    const auto dist = bfs_distances(g, i);
    for (std::size_t j = 0; j < g.n; ++j)
      if (j != i && dist[j] != kUnreachable) total += 1.0 / static_cast<double>(dist[j]);
  }
  return total / static_cast<double>(g.n * (g.n - 1));
}

inline BinaryGraph induced_subgraph(const BinaryGraph& g, const std::vector<std::size_t>& nodes) {
  BinaryGraph sub(nodes.size());
  for (std::size_t a = 0; a < nodes.size(); ++a)
    for (std::size_t b = a + 1; b < nodes.size(); ++b)
      if (g(nodes[a], nodes[b])) sub.connect(a, b);
  return sub;
}

// Global efficiency of each node's neighborhood subgraph (0 when degree < 2).
inline MetricVector local_efficiency(const BinaryGraph& g) {
  MetricVector out(g.n, 0.0);
  for (std::size_t i = 0; i < g.n; ++i) {
    const auto nb = g.neighbors(i);
    if (nb.size() < 2) continue;
    out[i] = global_efficiency(induced_subgraph(g, nb));
  }
  return out;
}

// Sample Pearson correlation over the strict upper triangle; 0 when either
// side is constant.
inline double pearson(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b) || a.rows() != a.cols()) throw DimensionError("pearson: equal square matrices required");
  const std::size_t n = a.rows();
  const std::size_t k = n * (n - 1) / 2;
  if (k < 2) return 0.0;
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      ma += a(i, j);
      mb += b(i, j);
    }
  ma /= static_cast<double>(k);
  mb /= static_cast<double>(k);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double x = a(i, j) - ma, y = b(i, j) - mb;
      sab += x * y;
      saa += x * x;
      sbb += y * y;
    }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

inline double mean_abs_diff(const MetricVector& x, const MetricVector& y) {
  if (x.size() != y.size()) throw DimensionError("metric vectors differ in length");
  if (x.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += std::abs(x[i] - y[i]);
  return s / static_cast<double>(x.size());
}

struct MetricReport {
  double mae = 0.0;
  double cc = 0.0;
  double degree = 0.0;
  double strength = 0.0;
  double clustering = 0.0;
  double betweenness = 0.0;
  double local_efficiency = 0.0;
  double global_efficiency = 0.0;

  static constexpr std::array<const char*, 8> names{"mae", "cc", "degree_error", "strength_error",
                                                    "clustering_error", "betweenness_error",
                                                    "local_efficiency_error", "global_efficiency_error"};
  std::array<double, 8> values() const {
    return {mae, cc, degree, strength, clustering, betweenness, local_efficiency, global_efficiency};
  }
};

inline MetricReport metric_errors(const Tensor& pred, const Tensor& emp, double density) {
  if (!pred.same_shape(emp) || pred.rows() != pred.cols())
    throw DimensionError("metric_errors: predicted " + tg::shape_str(pred.shape()) + " vs empirical " +
                         tg::shape_str(emp.shape()));
  const std::size_t n = pred.rows();
  MetricReport r;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) s += std::abs(pred(i, j) - emp(i, j));
  r.mae = n > 1 ? s / static_cast<double>(n * (n - 1)) : 0.0;
  r.cc = pearson(pred, emp);
  const BinaryGraph gp = binarize(pred, density), ge = binarize(emp, density);
  r.degree = mean_abs_diff(degree(gp), degree(ge));
  r.strength = mean_abs_diff(strength(pred), strength(emp));
  r.clustering = mean_abs_diff(clustering(gp), clustering(ge));
  r.betweenness = mean_abs_diff(betweenness(gp), betweenness(ge));
  r.local_efficiency = mean_abs_diff(local_efficiency(gp), local_efficiency(ge));
  r.global_efficiency = std::abs(global_efficiency(gp) - global_efficiency(ge));
  return r;
}

}  // namespace f2s
