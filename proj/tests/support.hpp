#pragma once

// Shared oracles for the unit suites and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "f2s/graphmetrics.hpp"
#include "f2s/losses.hpp"
#include "f2s/netarch.hpp"
#include "f2s/symdiffusion.hpp"
#include "f2s/tensorgrad.hpp"

namespace f2s::testing {

using tg::Mask;
using tg::Tape;
using tg::Tensor;
using tg::Var;

inline Tensor uniform(std::size_t r, std::size_t c, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t = Tensor::matrix(r, c);
  for (auto& v : t.storage()) v = u(rng);
  return t;
}

// Uniform entries with |x - k| >= gap for every kink k.
inline Tensor away_from(std::size_t r, std::size_t c, std::mt19937_64& rng, std::vector<double> kinks, double gap,
                        double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t = Tensor::matrix(r, c);
  for (auto& v : t.storage()) {
    bool ok;
    do {
      v = u(rng);
      ok = std::all_of(kinks.begin(), kinks.end(), [&](double k) { return std::abs(v - k) >= gap; });
    } while (!ok);
  }
  return t;
}

inline Tensor random_symmetric(std::size_t n, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t = Tensor::matrix(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) t(i, j) = t(j, i) = u(rng);
  return t;
}

inline std::size_t dim(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

// Builds a scalar loss from leaves recorded on the tape.
using LossBuilder = std::function<Var(Tape&, const std::vector<Var>&)>;

// Reduces any output to a scalar with fixed random weights, so every output
// entry contributes a distinct gradient.
inline Var weighted_sum(Var out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Tensor& v = out.value();
  Tensor w(v.shape(), 0.0);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (auto& x : w.storage()) x = u(rng);
  return tg::sum(tg::mul(out, out.tape->constant(std::move(w))));
}

struct GradResult {
  double worst = 0.0;  // max over inputs of ||a - n|| / (||a|| + ||n||)
  std::size_t input = 0;
};

// Compares tape gradients with central differences (step h) for every
// entry of every input. Inputs whose gradients agree to 1e-10 in absolute
// norm count as exact (covers identically zero gradients).
inline GradResult check_gradients(const std::vector<Tensor>& inputs, const LossBuilder& build, double h = 1e-5) {
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& x : inputs) leaves.push_back(tape.variable(x));
    const Var loss = build(tape, leaves);
    tape.backward(loss);
    for (const auto& l : leaves) analytic.push_back(tape.grad_tensor(l));
  }
  auto eval = [&](const std::vector<Tensor>& xs) {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& x : xs) leaves.push_back(tape.constant(x));
    return build(tape, leaves).value().item();
  };
  GradResult res;
  std::vector<Tensor> xs = inputs;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t k = 0; k < xs[i].size(); ++k) {
      const double x0 = xs[i][k];
      xs[i][k] = x0 + h;
      const double up = eval(xs);
      xs[i][k] = x0 - h;
      const double down = eval(xs);
      xs[i][k] = x0;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[i][k];
      diff += (a - numeric) * (a - numeric);
      na += a * a;
      nn += numeric * numeric;
    }
    diff = std::sqrt(diff);
    const double rel = diff <= 1e-10 ? 0.0 : diff / (std::sqrt(na) + std::sqrt(nn));
    if (rel > res.worst) {
      res.worst = rel;
      res.input = i;
    }
  }
  return res;
}

struct GradCase {
  std::string name;
  std::function<GradResult(std::uint64_t seed)> run;
};

// Small generator used by the end-to-end gradient checks; weights are
// perturbed away from the zero initialization so every path is exercised.
inline ArchConfig small_arch() { return ArchConfig{5, 8, 8, 2, 2, 100, 10}; }

inline std::vector<Tensor> perturbed(const tg::ParameterSet& ps, std::mt19937_64& rng, double std) {
  std::normal_distribution<double> g(0.0, std);
  std::vector<Tensor> out;
  for (const auto& p : ps) {
    Tensor t(p.value.shape(), p.value.storage());
    for (auto& v : t.storage()) v += g(rng);
    out.push_back(std::move(t));
  }
  return out;
}

inline NeighborPartition random_partition(std::size_t n, std::mt19937_64& rng) {
  return partition_neighbors(random_symmetric(n, rng));
}

inline std::vector<GradCase> gradient_cases() {
  std::vector<GradCase> c;
  auto add = [&](std::string name, std::function<GradResult(std::uint64_t)> fn) { c.push_back({std::move(name), std::move(fn)}); };

  add("matmul", [](std::uint64_t s) {
    std::mt19937_64 rng(s);
    const std::size_t r = dim(rng, 1, 5), k = dim(rng, 1, 5), q = dim(rng, 1, 5);
    return check_gradients({uniform(r, k, rng), uniform(k, q, rng)},
                           [s](Tape&, const std::vector<Var>& v) { return weighted_sum(tg::matmul(v[0], v[1]), s); });
  });
  // Elementwise binaries with a random broadcast pattern for the second operand.
  auto binary = [&](const char* name, Var (*op)(Var, Var), bool positive_rhs) {
    add(name, [op, positive_rhs](std::uint64_t s) {
      std::mt19937_64 rng(s);
      const std::size_t r = dim(rng, 1, 5), q = dim(rng, 1, 5);
      const int pattern = static_cast<int>(dim(rng, 0, 2));
      const std::size_t br = pattern == 2 ? 1 : r, bq = pattern == 1 ? 1 : q;
      Tensor b = positive_rhs ? uniform(br, bq, rng, 0.5, 2.0) : uniform(br, bq, rng);
      return check_gradients({uniform(r, q, rng), b},
                             [op, s](Tape&, const std::vector<Var>& v) { return weighted_sum(op(v[0], v[1]), s); });
    });
  };
  binary("add", &tg::add, false);
  binary("sub", &tg::sub, false);
  binary("mul", &tg::mul, false);
  binary("div", &tg::div, true);
  add("bias_add", [](std::uint64_t s) {
    std::mt19937_64 rng(s);
    const std::size_t r = dim(rng, 1, 5), q = dim(rng, 1, 5);
    return check_gradients({uniform(r, q, rng), uniform(1, q, rng)},
                           [s](Tape&, const std::vector<Var>& v) { return weighted_sum(tg::bias_add(v[0], v[1]), s); });
  });
  auto unary = [&](const char* name, std::function<Var(Var)> op, std::function<Tensor(std::mt19937_64&, std::size_t, std::size_t)> gen) {
    add(name, [op, gen](std::uint64_t s) {
      std::mt19937_64 rng(s);
      const std::size_t r = dim(rng, 1, 5), q = dim(rng, 1, 5);
      return check_gradients({gen(rng, r, q)}, [op, s](Tape&, const std::vector<Var>& v) { return weighted_sum(op(v[0]), s); });
    });
  };
  auto plain = [](std::mt19937_64& rng, std::size_t r, std::size_t q) { return uniform(r, q, rng, -2.0, 2.0); };
  unary("scale", [](Var x) { return tg::scale(x, -1.7); }, plain);
  unary("shift", [](Var x) { return tg::shift(x, 0.3); }, plain);
  unary("relu", [](Var x) { return tg::relu(x); },
        [](std::mt19937_64& rng, std::size_t r, std::size_t q) { return away_from(r, q, rng, {0.0}, 1e-3); });
  unary("sigmoid", [](Var x) { return tg::sigmoid(x); }, plain);
  unary("square", [](Var x) { return tg::square(x); }, plain);
  unary("sqrt", [](Var x) { return tg::sqrt(x); },
        [](std::mt19937_64& rng, std::size_t r, std::size_t q) { return uniform(r, q, rng, 0.3, 3.0); });
  unary("clamp", [](Var x) { return tg::clamp(x, -1.0, 1.0); },
        [](std::mt19937_64& rng, std::size_t r, std::size_t q) { return away_from(r, q, rng, {-1.0, 1.0}, 1e-3); });
  unary("transpose", [](Var x) { return tg::transpose(x); }, plain);
  unary("sum", [](Var x) { return tg::sum(x); }, plain);
  unary("mean", [](Var x) { return tg::mean(x); }, plain);
  unary("mean_rows", [](Var x) { return tg::mean_rows(x); }, plain);
  unary("gram", [](Var x) { return tg::gram(x); }, plain);
  unary("select_row", [](Var x) { return tg::select_row(x, x.rows() - 1); }, plain);
  add("masked_softmax", [](std::uint64_t s) {
    std::mt19937_64 rng(s);
    const std::size_t r = dim(rng, 1, 5), q = dim(rng, 1, 5);
    Mask m(r, q);
    std::bernoulli_distribution keep(0.6);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < q; ++j) m.set(i, j, keep(rng));
    return check_gradients({uniform(r, q, rng, -3.0, 3.0)},
                           [m, s](Tape&, const std::vector<Var>& v) { return weighted_sum(tg::masked_softmax(v[0], m), s); });
  });
  add("normalized_adjacency", [](std::uint64_t s) {
    std::mt19937_64 rng(s);
    const std::size_t n = dim(rng, 2, 6);
    Tensor a = away_from(n, n, rng, {0.0}, 1e-3, -1.0, 1.0);
    for (std::size_t i = 0; i < n; ++i) a(i, i) = 0.0;
    return check_gradients({a}, [s](Tape&, const std::vector<Var>& v) { return weighted_sum(tg::normalized_adjacency(v[0]), s); });
  });
  add("row_normalize", [](std::uint64_t s) {
    std::mt19937_64 rng(s);
    const std::size_t r = dim(rng, 2, 5), q = dim(rng, 2, 5);
    return check_gradients({uniform(r, q, rng)}, [s](Tape&, const std::vector<Var>& v) { return weighted_sum(row_normalize(v[0]), s); });
  });
  add("pcd", [](std::uint64_t s) {
    std::mt19937_64 rng(s);
    const std::size_t r = dim(rng, 2, 5), q = dim(rng, 2, 5);
    return check_gradients({uniform(r, q, rng), uniform(1, 1, rng, 1.0, 3.0), uniform(1, 1, rng, -2.0, 0.0)},
                           [s](Tape&, const std::vector<Var>& v) { return weighted_sum(pcd(v[0], v[1], v[2]), s); });
  });
  add("dmsa", [](std::uint64_t s) {
    std::mt19937_64 rng(s);
    const std::size_t n = dim(rng, 3, 5), m = 4, dh = 2, heads = 2;
    const NeighborPartition part = random_partition(n, rng);
    std::vector<Tensor> in{uniform(n, m, rng)};
    for (std::size_t h = 0; h < heads; ++h) {
      for (int k = 0; k < 4; ++k) in.push_back(uniform(m, dh, rng));
      in.push_back(uniform(dh, m, rng));
    }
    return check_gradients(in, [part, heads, s](Tape&, const std::vector<Var>& v) {
      std::vector<HeadVars> hv;
      for (std::size_t h = 0; h < heads; ++h) hv.push_back({v[1 + 5 * h], v[2 + 5 * h], v[3 + 5 * h], v[4 + 5 * h], v[5 + 5 * h]});
      return weighted_sum(dmsa_forward(v[0], part, hv), s);
    });
  });
  add("gcn_layer", [](std::uint64_t s) {
    std::mt19937_64 rng(s);
    const std::size_t n = dim(rng, 2, 5), m = dim(rng, 1, 4), m2 = dim(rng, 1, 4);
    const Tensor a = random_symmetric(n, rng);
    return check_gradients({uniform(n, m, rng), uniform(m, m2, rng), uniform(1, m2, rng)},
                           [a, s](Tape& t, const std::vector<Var>& v) {
                             return weighted_sum(gcn_layer(v[0], tg::normalized_adjacency(t.constant(a)), v[1], v[2]), s);
                           });
  });
  add("generator_block", [](std::uint64_t s) {
    std::mt19937_64 rng(s);
    const std::size_t n = dim(rng, 2, 5), m = 3;
    const Tensor a = random_symmetric(n, rng);
    return check_gradients({uniform(n, m, rng), uniform(m, m, rng), uniform(m, m, rng), uniform(m, m, rng),
                            uniform(1, m, rng), uniform(1, m, rng)},
                           [a, s](Tape& t, const std::vector<Var>& v) {
                             const Var adj = tg::normalized_adjacency(t.constant(a));
                             return weighted_sum(generator_block(v[0], adj, BlockVars{v[1], v[2], v[3], v[4]}, v[5]), s);
                           });
  });
  add("pearson", [](std::uint64_t s) {
    std::mt19937_64 rng(s);
    const std::size_t n = dim(rng, 3, 6);
    const Tensor b = random_symmetric(n, rng);
    return check_gradients({random_symmetric(n, rng)}, [b](Tape&, const std::vector<Var>& v) { return pearson(v[0], b); });
  });
  add("recon_loss", [](std::uint64_t s) {
    std::mt19937_64 rng(s);
    const std::size_t n = dim(rng, 2, 6);
    const Tensor b = random_symmetric(n, rng);
    return check_gradients({random_symmetric(n, rng)}, [b](Tape&, const std::vector<Var>& v) { return recon_loss(v[0], b, 0.1); });
  });
  add("adversarial_losses", [](std::uint64_t s) {
    std::mt19937_64 rng(s);
    const std::size_t k = dim(rng, 1, 4);
    std::vector<Tensor> in;
    for (std::size_t i = 0; i < 2 * k; ++i) in.push_back(uniform(1, 1, rng, -2.0, 2.0));
    return check_gradients(in, [k](Tape&, const std::vector<Var>& v) {
      std::vector<Var> real(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k));
      std::vector<Var> fake(v.begin() + static_cast<std::ptrdiff_t>(k), v.end());
      return tg::add(disc_loss(real, fake, 0.1), gen_adv_loss(fake, 0.1));
    });
  });
  add("generator_forward", [](std::uint64_t s) {
    std::mt19937_64 rng(s);
    const ArchConfig arch = small_arch();
    const SymmetricGraphGenerator g(arch, s);
    const NoiseSchedule sched = build_schedule(arch.T, 1e-4, 0.02);
    const Tensor features = standardize_rows(uniform(arch.n, arch.s, rng));
    const Tensor a0 = random_symmetric(arch.n, rng);
    const std::size_t t = arch.d * dim(rng, 0, arch.T / arch.d - 1);
    const Tensor noise_prev = sample_symmetric_noise(arch.n, rng);
    const Tensor a_prev = diffuse_to(a0, t + arch.d, noise_prev, sched);
    const Tensor noise = sample_symmetric_noise(arch.n, rng);
    return check_gradients(perturbed(g.params(), rng, 0.3), [&](Tape& tape, const std::vector<Var>& p) {
      const auto out = g.forward(tape, p, a_prev, features, t, noise, sched);
      const Var corr = tg::shift(tg::scale(pearson(out.a0_hat, a0), -1.0), 1.0);
      return tg::add(tg::add(recon_loss(out.a0_hat, a0, 0.1), corr), weighted_sum(out.a_t, s));
    });
  });
  add("discriminator_forward", [](std::uint64_t s) {
    std::mt19937_64 rng(s);
    const ArchConfig arch = small_arch();
    const ConnectivityDiscriminator d(arch, s);
    const std::size_t t = arch.d * dim(rng, 0, arch.T / arch.d);
    Tensor a = away_from(arch.n, arch.n, rng, {0.0}, 1e-3, -1.0, 1.0);
    for (std::size_t i = 0; i < arch.n; ++i) {
      a(i, i) = 0.0;
      for (std::size_t j = 0; j < i; ++j) a(i, j) = a(j, i);
    }
    // Redraw until no ReLU input sits within 1e-3 of the kink, where a
    // central difference straddles two linear pieces.
    std::vector<Tensor> in;
    for (;;) {
      in = perturbed(d.params(), rng, 0.1);
      Tape tape;
      std::vector<Var> p;
      for (const auto& x : in) p.push_back(tape.constant(x));
      const Var e_t = tg::select_row(p[5], arch.embedding_index(t));
      const Var adj = tg::normalized_adjacency(tape.constant(a));
      const Var z1 = tg::bias_add(tg::matmul(adj, p[0]), e_t);
      const Var z2 = gcn_layer(tg::relu(z1), adj, p[1], e_t);
      double gap = 1.0;
      for (const Var& z : {z1, z2})
        for (double v : z.value().data()) gap = std::min(gap, std::abs(v));
      if (gap >= 1e-3) break;
    }
    in.push_back(a);
    return check_gradients(in, [&](Tape&, const std::vector<Var>& v) {
      const std::vector<Var> p(v.begin(), v.end() - 1);
      return tg::square(d.forward(p, v.back(), t));
    });
  });
  return c;
}

// ---------------------------------------------------------------------------
// Graph oracles

inline BinaryGraph random_graph(std::size_t n, double p, std::mt19937_64& rng) {
  BinaryGraph g(n);
  std::bernoulli_distribution b(p);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (b(rng)) g.connect(i, j);
  return g;
}

inline std::vector<std::vector<std::size_t>> floyd_warshall(const BinaryGraph& g) {
  const std::size_t inf = kUnreachable;
  std::vector<std::vector<std::size_t>> d(g.n, std::vector<std::size_t>(g.n, inf));
  for (std::size_t i = 0; i < g.n; ++i) {
    d[i][i] = 0;
    for (std::size_t j = 0; j < g.n; ++j)
      if (g(i, j)) d[i][j] = 1;
  }
  for (std::size_t k = 0; k < g.n; ++k)
    for (std::size_t i = 0; i < g.n; ++i)
      for (std::size_t j = 0; j < g.n; ++j)
        if (d[i][k] != inf && d[k][j] != inf && d[i][k] + d[k][j] < d[i][j]) d[i][j] = d[i][k] + d[k][j];
  return d;
}

// Exact fraction with 64-bit numerator/denominator, always reduced.
struct Rational {
  long long num = 0, den = 1;
  Rational() = default;
  Rational(long long v) : num(v), den(1) {}  // NOLINT(google-explicit-constructor)
  Rational(long long n, long long d) : num(n), den(d) { reduce(); }
  void reduce() {
    if (den < 0) {
      num = -num;
      den = -den;
    }
    const long long g = std::gcd(num < 0 ? -num : num, den);
    if (g > 1) {
      num /= g;
      den /= g;
    }
  }
  friend Rational operator+(Rational a, Rational b) { return {a.num * b.den + b.num * a.den, a.den * b.den}; }
  friend Rational operator*(Rational a, Rational b) { return {a.num * b.num, a.den * b.den}; }
  friend Rational operator/(Rational a, Rational b) { return {a.num * b.den, a.den * b.num}; }
  friend bool operator==(Rational a, Rational b) { return a.num == b.num && a.den == b.den; }
};

// Betweenness by enumerating every shortest path explicitly (DFS along
// distance layers), then the same normalization as the library.
inline std::vector<Rational> brute_force_betweenness(const BinaryGraph& g) {
  const std::size_t n = g.n;
  std::vector<Rational> bc(n, Rational(0));
  if (n < 3) return bc;
  const auto d = floyd_warshall(g);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t t = s + 1; t < n; ++t) {
      if (d[s][t] == kUnreachable) continue;
      std::vector<long long> through(n, 0);
      long long total = 0;
      std::vector<std::size_t> path{s};
      std::function<void(std::size_t)> walk = [&](std::size_t v) {
        if (v == t) {
          ++total;
          for (std::size_t k = 1; k + 1 < path.size(); ++k) ++through[path[k]];
          return;
        }
        for (std::size_t w = 0; w < n; ++w)
          if (g(v, w) && d[s][w] == d[s][v] + 1 && d[w][t] == d[v][t] - 1) {
            path.push_back(w);
            walk(w);
            path.pop_back();
          }
      };
      walk(s);
      for (std::size_t k = 0; k < n; ++k)
        if (through[k]) bc[k] = bc[k] + Rational(through[k], total);
    }
  const Rational norm(static_cast<long long>((n - 1) * (n - 2)), 2);
  for (auto& v : bc) v = v / norm;
  return bc;
}

inline std::vector<double> triple_clustering(const BinaryGraph& g) {
  std::vector<double> out(g.n, 0.0);
  for (std::size_t i = 0; i < g.n; ++i) {
    std::size_t tri = 0, pairs = 0;
    for (std::size_t a = 0; a < g.n; ++a)
      for (std::size_t b = a + 1; b < g.n; ++b) {
        if (a == i || b == i || !g(i, a) || !g(i, b)) continue;
        ++pairs;
        tri += g(a, b);
      }
    out[i] = pairs ? static_cast<double>(tri) / static_cast<double>(pairs) : 0.0;
  }
  return out;
}

}  // namespace f2s::testing
