#pragma once

// Least-squares adversarial losses, reconstruction loss and the spatially
// connected consistency loss.

#include <cmath>
#include <span>
#include <vector>

#include "f2s/errors.hpp"
#include "f2s/graphmetrics.hpp"
#include "f2s/netarch.hpp"
#include "f2s/tensorgrad.hpp"

namespace f2s {

struct LossReport {
  double l_d = 0.0;
  double l_g = 0.0;
  double l_mse = 0.0;
  double l_scc_corr = 0.0;
  double l_scc_bc = 0.0;
  double lambda_mse = 1.0;
  double lambda_scc = 1.0;

  friend bool operator==(const LossReport&, const LossReport&) = default;
};

// (d/T) [ mean((real - 1)^2) + mean(fake^2) ]
inline double disc_loss(std::span<const double> real, std::span<const double> fake, double d_over_t) {
  if (real.empty() || fake.empty()) throw ContractError("disc_loss: empty batch");
  double a = 0.0, b = 0.0;
  for (double r : real) a += (r - 1.0) * (r - 1.0);
  for (double f : fake) b += f * f;
  return d_over_t * (a / static_cast<double>(real.size()) + b / static_cast<double>(fake.size()));
}

inline double gen_adv_loss(std::span<const double> fake, double d_over_t) {
  if (fake.empty()) throw ContractError("gen_adv_loss: empty batch");
  double a = 0.0;
  for (double f : fake) a += (f - 1.0) * (f - 1.0);
  return d_over_t * a / static_cast<double>(fake.size());
}

inline Var disc_loss(std::span<const Var> real, std::span<const Var> fake, double d_over_t) {
  if (real.empty() || fake.empty()) throw ContractError("disc_loss: empty batch");
  Var a = tg::square(tg::shift(real[0], -1.0));
  for (std::size_t k = 1; k < real.size(); ++k) a = tg::add(a, tg::square(tg::shift(real[k], -1.0)));
  Var b = tg::square(fake[0]);
  for (std::size_t k = 1; k < fake.size(); ++k) b = tg::add(b, tg::square(fake[k]));
  return tg::scale(tg::add(tg::scale(a, 1.0 / static_cast<double>(real.size())),
                           tg::scale(b, 1.0 / static_cast<double>(fake.size()))),
                   d_over_t);
}

inline Var gen_adv_loss(std::span<const Var> fake, double d_over_t) {
  if (fake.empty()) throw ContractError("gen_adv_loss: empty batch");
  Var a = tg::square(tg::shift(fake[0], -1.0));
  for (std::size_t k = 1; k < fake.size(); ++k) a = tg::add(a, tg::square(tg::shift(fake[k], -1.0)));
  return tg::scale(a, d_over_t / static_cast<double>(fake.size()));
}

// (d/T) · mean over off-diagonal entries of (a0_hat - a0)^2.
inline Var recon_loss(Var a0_hat, const Tensor& a0, double d_over_t) {
  if (!a0_hat.value().same_shape(a0) || a0.rows() != a0.cols())
    throw DimensionError("recon_loss: " + tg::shape_str(a0_hat.value().shape()) + " vs " + tg::shape_str(a0.shape()));
  Tape& tape = *a0_hat.tape;
  const std::size_t n = a0.rows();
  const Var diff = tg::mul(tg::sub(a0_hat, tape.constant(a0)), tape.constant(off_diagonal_mask(n)));
  return tg::scale(tg::sum(tg::square(diff)), d_over_t / static_cast<double>(n * (n - 1)));
}

inline double recon_loss(const Tensor& a0_hat, const Tensor& a0, double d_over_t) {
  Tape tape;
  return recon_loss(tape.constant(a0_hat), a0, d_over_t).value().item();
}

// Differentiable Pearson correlation over the strict upper triangle, with
// the second argument held constant. Returns a constant 0 when either side
// has zero variance.
inline Var pearson(Var a, const Tensor& b) {
  Tape& tape = *a.tape;
  const Tensor& av = a.value();
  if (!av.same_shape(b) || b.rows() != b.cols()) throw DimensionError("pearson: equal square matrices required");
  const std::size_t n = b.rows();
  const double k = static_cast<double>(n * (n - 1) / 2);
  Tensor upper = Tensor::matrix(n, n);
  double mb = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      upper(i, j) = 1.0;
      mb += b(i, j);
    }
  mb *= 1.0 / k;  // same rounding as the on-tape mean
  Tensor cb = Tensor::matrix(n, n);
  double vb = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      cb(i, j) = b(i, j) - mb;
      vb += cb(i, j) * cb(i, j);
    }
  double ma = 0.0, va = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) ma += av(i, j);
  ma *= 1.0 / k;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) va += (av(i, j) - ma) * (av(i, j) - ma);
  if (va == 0.0 || vb == 0.0 || k < 2) return tape.constant(Tensor::scalar(0.0));

  const Var u = tape.constant(std::move(upper));
  const Var mean_a = tg::scale(tg::sum(tg::mul(a, u)), 1.0 / k);
  const Var ca = tg::mul(tg::sub(a, mean_a), u);
  const Var cov = tg::sum(tg::mul(ca, tape.constant(std::move(cb))));
  const Var var_a = tg::sum(tg::square(ca));
  return tg::clamp(tg::div(cov, tg::sqrt(tg::scale(var_a, vb))), -1.0, 1.0);
}

// Betweenness term of the consistency loss: lambda_bc · sum_k |BC_k(pred) -
// BC_k(emp)| on graphs binarized at the given density. Non-differentiable.
inline double scc_bc_term(const Tensor& pred, const Tensor& emp, double lambda_bc, double density) {
  const auto bp = betweenness(binarize(pred, density));
  const auto be = betweenness(binarize(emp, density));
  double s = 0.0;
  for (std::size_t k = 0; k < bp.size(); ++k) s += std::abs(bp[k] - be[k]);
  return lambda_bc * s;
}

struct SccLoss {
  Var total;          // (1 - r) + constant BC term
  double corr = 0.0;  // 1 - r
  double bc = 0.0;    // lambda_bc · sum |dBC|
};

// (1 - pearson) + BC term. Gradient flows through the correlation only.
inline SccLoss scc_loss(Var a0_pred, const Tensor& a0, double lambda_bc, double density) {
  const Var corr = tg::shift(tg::scale(pearson(a0_pred, a0), -1.0), 1.0);
  const double bc = scc_bc_term(a0_pred.value(), a0, lambda_bc, density);
  SccLoss out;
  out.total = tg::shift(corr, bc);
  out.corr = corr.value().item();
  out.bc = bc;
  return out;
}

inline double scc_loss(const Tensor& a0_pred, const Tensor& a0, double lambda_bc, double density) {
  Tape tape;
  return scc_loss(tape.constant(a0_pred), a0, lambda_bc, density).total.value().item();
}

}  // namespace f2s
