#pragma once

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "pcg/ops.hpp"
#include "pcg/rng.hpp"
#include "pcg/tensor.hpp"

namespace pcg::latent {

using ad::make_tensor;
using ad::Shape;
using ad::TapeT;
using ad::TensorPtr;

enum class LatentModel { AE, GI, GC };
enum class TrainRegime { all, normal_only };
enum class Divergence { none, kl, mmd };
enum class MmdKernel { gaussian, module };

inline std::string to_string(LatentModel m) {
  switch (m) {
    case LatentModel::AE: return "AE";
    case LatentModel::GI: return "GI";
    case LatentModel::GC: return "GC";
  }
  return "?";
}

// Floor added to the softplus of the raw Cholesky diagonal; keeps L strictly
// positive-definite for any parameter value.
inline constexpr double kCholDiagFloor = 1e-4;

// Diagonal-covariance posterior, one mean/log-variance pair per latent cell.
template <class T>
struct GaussianIndependentT {
  TensorPtr<T> mean;     // [batch, ch, T_z]
  TensorPtr<T> log_var;  // [batch, ch, T_z]
};

// Chain posterior over the time dimension: per (sample, channel) the
// precision is J = L L^T with L lower-bidiagonal, parameterized through its
// Cholesky factor so J stays SPD tridiagonal by construction.
template <class T>
struct GaussianChainT {
  TensorPtr<T> mean;           // [batch, ch, T_z]
  TensorPtr<T> chol_diag_raw;  // [batch, ch, T_z]
  TensorPtr<T> chol_off_raw;   // [batch, ch, T_z - 1]
};

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

// z = mean + exp(0.5 * log_var) * noise (reparameterized).
template <class T>
TensorPtr<T> sample_gi(TapeT<T>& tape, const GaussianIndependentT<T>& q,
                       const TensorPtr<T>& noise) {
  auto std_dev = ad::exp_op(tape, ad::scale(tape, q.log_var, 0.5));
  return ad::add(tape, q.mean, ad::mul(tape, std_dev, noise));
}

// z = mean + L^-T noise via back-substitution, so Cov(z) = (L L^T)^-1 = J^-1.
template <class T>
TensorPtr<T> sample_gc(TapeT<T>& tape, const GaussianChainT<T>& q, const TensorPtr<T>& noise) {
  const auto& mean = q.mean;
  const auto& draw = q.chol_diag_raw;
  const auto& oraw = q.chol_off_raw;
  ad::detail::require_rank3(mean, "sample_gc");
  const int B = mean->dim(0), C = mean->dim(1), Tz = mean->dim(2);
  if (draw->shape != mean->shape || noise->shape != mean->shape)
    throw std::invalid_argument("sample_gc: mean/diag/noise shape mismatch");
  if (oraw->shape != Shape{B, C, Tz - 1})
    throw std::invalid_argument("sample_gc: off-diagonal must be [batch, ch, T_z - 1]");

  auto out = make_tensor<T>(mean->shape);
  // Saved per chain: u (the solve result) and d (softplus'd diagonals).
  auto saved_u = std::make_shared<std::vector<double>>(mean->size());
  auto saved_d = std::make_shared<std::vector<double>>(mean->size());
  const int chains = B * C;
  for (int bc = 0; bc < chains; ++bc) {
    const std::size_t base = static_cast<std::size_t>(bc) * Tz;
    const std::size_t obase = static_cast<std::size_t>(bc) * (Tz - 1);
    double* u = saved_u->data() + base;
    double* d = saved_d->data() + base;
    for (int t = 0; t < Tz; ++t)
      d[t] = ad::detail::softplus_scalar(static_cast<double>(draw->value[base + t])) +
             kCholDiagFloor;
    u[Tz - 1] = noise->value[base + Tz - 1] / d[Tz - 1];
    for (int t = Tz - 2; t >= 0; --t)
      u[t] = (noise->value[base + t] - oraw->value[obase + t] * u[t + 1]) / d[t];
    for (int t = 0; t < Tz; ++t)
      out->value[base + t] = mean->value[base + t] + static_cast<T>(u[t]);
  }

  if (tape.grad_enabled() &&
      ad::detail::any_requires_grad<T>({mean, draw, oraw, noise})) {
    out->requires_grad = true;
    tape.record({mean, draw, oraw, noise, out},
                [mean, draw, oraw, noise, out, saved_u, saved_d, B, C, Tz] {
      const T* g = out->grad_data();
      const int chains = B * C;
      std::vector<double> eps_bar(static_cast<std::size_t>(Tz));
      for (int bc = 0; bc < chains; ++bc) {
        const std::size_t base = static_cast<std::size_t>(bc) * Tz;
        const std::size_t obase = static_cast<std::size_t>(bc) * (Tz - 1);
        const double* u = saved_u->data() + base;
        const double* d = saved_d->data() + base;
        if (mean->requires_grad) {
          T* gm = mean->grad_data();
          for (int t = 0; t < Tz; ++t) gm[base + t] += g[base + t];
        }
        // Adjoint of the triangular solve: L eps_bar = u_bar, then
        // L_bar = -eps_bar u^T restricted to the bidiagonal pattern.
        eps_bar[0] = g[base + 0] / d[0];
        for (int t = 1; t < Tz; ++t)
          eps_bar[static_cast<std::size_t>(t)] =
              (g[base + t] - oraw->value[obase + t - 1] * eps_bar[static_cast<std::size_t>(t - 1)]) /
              d[t];
        if (noise->requires_grad) {
          T* gn = noise->grad_data();
          for (int t = 0; t < Tz; ++t) gn[base + t] += static_cast<T>(eps_bar[static_cast<std::size_t>(t)]);
        }
        if (draw->requires_grad) {
          T* gd = draw->grad_data();
          for (int t = 0; t < Tz; ++t) {
            const double d_bar = -eps_bar[static_cast<std::size_t>(t)] * u[t];
            const double sig = ad::detail::sigmoid_scalar(static_cast<double>(draw->value[base + t]));
            gd[base + t] += static_cast<T>(d_bar * sig);
          }
        }
        if (oraw->requires_grad) {
          T* go = oraw->grad_data();
          for (int t = 0; t < Tz - 1; ++t)
            go[obase + t] += static_cast<T>(-eps_bar[static_cast<std::size_t>(t)] * u[t + 1]);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// KL divergences to the standard normal prior
// ---------------------------------------------------------------------------

// 0.5 * sum(exp(lv) + mean^2 - 1 - lv), summed over channels and averaged
// over (batch, latent time step).
template <class T>
TensorPtr<T> kl_gi(TapeT<T>& tape, const GaussianIndependentT<T>& q) {
  const auto& mean = q.mean;
  const auto& lv = q.log_var;
  ad::detail::require_rank3(mean, "kl_gi");
  ad::detail::require_same_shape(mean, lv, "kl_gi");
  const int B = mean->dim(0), Tz = mean->dim(2);
  const double denom = static_cast<double>(B) * Tz;
  auto out = make_tensor<T>(Shape{1});
  double acc = 0.0;
  const std::size_t n = mean->size();
  for (std::size_t i = 0; i < n; ++i) {
    const double m = mean->value[i];
    const double l = lv->value[i];
    acc += std::exp(l) + m * m - 1.0 - l;
  }
  out->value[0] = static_cast<T>(0.5 * acc / denom);

  if (tape.grad_enabled() && ad::detail::any_requires_grad<T>({mean, lv})) {
    out->requires_grad = true;
    tape.record({mean, lv, out}, [mean, lv, out, denom, n] {
      const double g = out->grad_data()[0] / denom;
      if (mean->requires_grad) {
        T* gm = mean->grad_data();
        for (std::size_t i = 0; i < n; ++i) gm[i] += static_cast<T>(g * mean->value[i]);
      }
      if (lv->requires_grad) {
        T* gl = lv->grad_data();
        for (std::size_t i = 0; i < n; ++i)
          gl[i] += static_cast<T>(g * 0.5 * (std::exp(static_cast<double>(lv->value[i])) - 1.0));
      }
    });
  }
  return out;
}

// Per chain: 0.5 * (tr(J^-1) + |mean|^2 - T_z - ln det J^-1), with
// ln det J^-1 = -2 sum ln L_tt and tr(J^-1) from the O(T_z) recursion
// S_{T-1} = 1, S_t = 1 + (e_t / d_{t+1})^2 S_{t+1}, tr = sum S_t / d_t^2.
// Averaged over (batch, latent time step) like kl_gi.
template <class T>
TensorPtr<T> kl_gc(TapeT<T>& tape, const GaussianChainT<T>& q) {
  const auto& mean = q.mean;
  const auto& draw = q.chol_diag_raw;
  const auto& oraw = q.chol_off_raw;
  ad::detail::require_rank3(mean, "kl_gc");
  const int B = mean->dim(0), C = mean->dim(1), Tz = mean->dim(2);
  if (draw->shape != mean->shape || oraw->shape != Shape{B, C, Tz - 1})
    throw std::invalid_argument("kl_gc: parameter shape mismatch");
  const double denom = static_cast<double>(B) * Tz;

  auto out = make_tensor<T>(Shape{1});
  const int chains = B * C;
  auto saved_d = std::make_shared<std::vector<double>>(mean->size());
  auto saved_S = std::make_shared<std::vector<double>>(mean->size());
  double total = 0.0;
  for (int bc = 0; bc < chains; ++bc) {
    const std::size_t base = static_cast<std::size_t>(bc) * Tz;
    const std::size_t obase = static_cast<std::size_t>(bc) * (Tz - 1);
    double* d = saved_d->data() + base;
    double* S = saved_S->data() + base;
    double logdet_prec = 0.0;
    for (int t = 0; t < Tz; ++t) {
      d[t] = ad::detail::softplus_scalar(static_cast<double>(draw->value[base + t])) +
             kCholDiagFloor;
      logdet_prec += std::log(d[t]);
    }
    S[Tz - 1] = 1.0;
    for (int t = Tz - 2; t >= 0; --t) {
      const double r = oraw->value[obase + t] / d[t + 1];
      S[t] = 1.0 + r * r * S[t + 1];
    }
    double tr = 0.0, msq = 0.0;
    for (int t = 0; t < Tz; ++t) {
      tr += S[t] / (d[t] * d[t]);
      const double m = mean->value[base + t];
      msq += m * m;
    }
    total += 0.5 * (tr + msq - Tz + 2.0 * logdet_prec);
  }
  out->value[0] = static_cast<T>(total / denom);

  if (tape.grad_enabled() && ad::detail::any_requires_grad<T>({mean, draw, oraw})) {
    out->requires_grad = true;
    tape.record({mean, draw, oraw, out}, [mean, draw, oraw, out, saved_d, saved_S, B, C, Tz, denom] {
      const double g = out->grad_data()[0] / denom;
      const int chains = B * C;
      std::vector<double> S_bar(static_cast<std::size_t>(Tz));
      for (int bc = 0; bc < chains; ++bc) {
        const std::size_t base = static_cast<std::size_t>(bc) * Tz;
        const std::size_t obase = static_cast<std::size_t>(bc) * (Tz - 1);
        const double* d = saved_d->data() + base;
        const double* S = saved_S->data() + base;
        if (mean->requires_grad) {
          T* gm = mean->grad_data();
          for (int t = 0; t < Tz; ++t)
            gm[base + t] += static_cast<T>(g * mean->value[base + t]);
        }
        // Adjoint of the S recursion, walked in increasing t.
        S_bar[0] = 1.0 / (d[0] * d[0]);
        for (int t = 1; t < Tz; ++t) {
          const double e = oraw->value[obase + t - 1];
          const double rho = (e / d[t]) * (e / d[t]);
          S_bar[static_cast<std::size_t>(t)] =
              1.0 / (d[t] * d[t]) + S_bar[static_cast<std::size_t>(t - 1)] * rho;
        }
        T* gd = draw->requires_grad ? draw->grad_data() : nullptr;
        T* go = oraw->requires_grad ? oraw->grad_data() : nullptr;
        for (int t = 0; t < Tz; ++t) {
          double dtr_dd = -2.0 * S[t] / (d[t] * d[t] * d[t]);
          if (t >= 1) {
            const double e = oraw->value[obase + t - 1];
            const double rho_bar = S_bar[static_cast<std::size_t>(t - 1)] * S[t];
            dtr_dd += rho_bar * (-2.0 * e * e / (d[t] * d[t] * d[t]));
            if (go)
              go[obase + t - 1] +=
                  static_cast<T>(g * 0.5 * rho_bar * 2.0 * e / (d[t] * d[t]));
          }
          if (gd) {
            const double dV_dd = dtr_dd + 2.0 / d[t];
            const double sig =
                ad::detail::sigmoid_scalar(static_cast<double>(draw->value[base + t]));
            gd[base + t] += static_cast<T>(g * 0.5 * dV_dd * sig);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Maximum mean discrepancy
// ---------------------------------------------------------------------------

namespace detail {

inline double kernel_eval(const double* a, const double* b, int dim, MmdKernel kernel,
                          double sigma_sq) {
  double d2 = 0.0;
  for (int k = 0; k < dim; ++k) {
    const double d = a[k] - b[k];
    d2 += d * d;
  }
  if (kernel == MmdKernel::gaussian) return std::exp(-d2 / (2.0 * sigma_sq));
  double na = 0.0, nb = 0.0;
  for (int k = 0; k < dim; ++k) {
    na += a[k] * a[k];
    nb += b[k] * b[k];
  }
  return std::sqrt(d2) - std::sqrt(na) - std::sqrt(nb);
}

// d k(a, b) / d a accumulated into grad (scaled by w).
inline void kernel_grad_first(const double* a, const double* b, int dim, MmdKernel kernel,
                              double sigma_sq, double w, double* grad) {
  if (kernel == MmdKernel::gaussian) {
    double d2 = 0.0;
    for (int k = 0; k < dim; ++k) {
      const double d = a[k] - b[k];
      d2 += d * d;
    }
    const double kv = std::exp(-d2 / (2.0 * sigma_sq));
    for (int k = 0; k < dim; ++k) grad[k] += w * kv * (-(a[k] - b[k]) / sigma_sq);
  } else {
    double d2 = 0.0, na = 0.0;
    for (int k = 0; k < dim; ++k) {
      const double d = a[k] - b[k];
      d2 += d * d;
      na += a[k] * a[k];
    }
    const double dn = std::sqrt(d2);
    const double an = std::sqrt(na);
    for (int k = 0; k < dim; ++k) {
      double v = 0.0;
      if (dn > 1e-12) v += (a[k] - b[k]) / dn;
      if (an > 1e-12) v -= a[k] / an;
      grad[k] += w * v;
    }
  }
}

}  // namespace detail

// Biased V-statistic over two flat [n, dim] sample sets:
// mean_pp - 2 mean_qp + mean_qq. Zero exactly when the sets coincide.
inline double mmd_value(const std::vector<double>& q, const std::vector<double>& p, int dim,
                        MmdKernel kernel, double sigma_sq) {
  if (dim <= 0 || q.size() % dim != 0 || p.size() % dim != 0)
    throw std::invalid_argument("mmd: sample size not a multiple of dim");
  const std::size_t nq = q.size() / dim, np = p.size() / dim;
  if (nq == 0 || np == 0) throw std::invalid_argument("mmd: empty sample set");
  double spp = 0.0, sqq = 0.0, sqp = 0.0;
  for (std::size_t a = 0; a < np; ++a)
    for (std::size_t b = 0; b < np; ++b)
      spp += detail::kernel_eval(p.data() + a * dim, p.data() + b * dim, dim, kernel, sigma_sq);
  for (std::size_t a = 0; a < nq; ++a)
    for (std::size_t b = 0; b < nq; ++b)
      sqq += detail::kernel_eval(q.data() + a * dim, q.data() + b * dim, dim, kernel, sigma_sq);
  for (std::size_t a = 0; a < nq; ++a)
    for (std::size_t b = 0; b < np; ++b)
      sqp += detail::kernel_eval(q.data() + a * dim, p.data() + b * dim, dim, kernel, sigma_sq);
  return spp / (static_cast<double>(np) * np) - 2.0 * sqp / (static_cast<double>(nq) * np) +
         sqq / (static_cast<double>(nq) * nq);
}

// MMD between the posterior samples in zq ([batch, ch, T_z]; each latent time
// step is one ch-dim sample) and fixed prior draws ([n_p, ch] flat).
// Differentiable w.r.t. zq.
template <class T>
TensorPtr<T> mmd_op(TapeT<T>& tape, const TensorPtr<T>& zq,
                    const std::shared_ptr<std::vector<double>>& prior, MmdKernel kernel,
                    double sigma_sq) {
  ad::detail::require_rank3(zq, "mmd");
  const int B = zq->dim(0), C = zq->dim(1), Tz = zq->dim(2);
  const std::size_t nq = static_cast<std::size_t>(B) * Tz;
  if (prior->empty() || prior->size() % C != 0)
    throw std::invalid_argument("mmd: prior sample set empty or wrong dim");

  // Gather q samples as flat [nq, C] rows.
  auto qflat = std::make_shared<std::vector<double>>(nq * C);
  for (int b = 0; b < B; ++b)
    for (int t = 0; t < Tz; ++t) {
      const std::size_t row = static_cast<std::size_t>(b) * Tz + t;
      for (int c = 0; c < C; ++c)
        (*qflat)[row * C + c] =
            zq->value[(static_cast<std::size_t>(b) * C + c) * Tz + t];
    }

  auto out = make_tensor<T>(Shape{1});
  out->value[0] = static_cast<T>(mmd_value(*qflat, *prior, C, kernel, sigma_sq));

  if (tape.grad_enabled() && zq->requires_grad) {
    out->requires_grad = true;
    tape.record({zq, out}, [zq, out, qflat, prior, kernel, sigma_sq, B, C, Tz, nq] {
      const double g = out->grad_data()[0];
      const std::size_t np = prior->size() / C;
      const double w_qq = 2.0 / (static_cast<double>(nq) * nq);
      const double w_qp = -2.0 / (static_cast<double>(nq) * np);
      std::vector<double> grow(static_cast<std::size_t>(C));
      T* gz = zq->grad_data();
      for (std::size_t i = 0; i < nq; ++i) {
        std::fill(grow.begin(), grow.end(), 0.0);
        const double* qi = qflat->data() + i * C;
        for (std::size_t b = 0; b < nq; ++b)
          detail::kernel_grad_first(qi, qflat->data() + b * C, C, kernel, sigma_sq, w_qq,
                                    grow.data());
        for (std::size_t j = 0; j < np; ++j)
          detail::kernel_grad_first(qi, prior->data() + j * C, C, kernel, sigma_sq, w_qp,
                                    grow.data());
        const int bi = static_cast<int>(i) / Tz;
        const int ti = static_cast<int>(i) % Tz;
        for (int c = 0; c < C; ++c)
          gz[(static_cast<std::size_t>(bi) * C + c) * Tz + ti] += static_cast<T>(g * grow[c]);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Divergence configuration
// ---------------------------------------------------------------------------

struct DivergenceConfig {
  Divergence divergence = Divergence::none;
  MmdKernel kernel = MmdKernel::gaussian;
  double sigma_sq = 4.0;  // gaussian kernel bandwidth, default = latent dim
  double lambda = 1.0;    // weight on the divergence term
};

// Default kernel per model/regime: GI-* and GC trained on normal data use the
// gaussian kernel; GC trained on all data uses the module kernel.
inline DivergenceConfig divergence_for(LatentModel model, TrainRegime regime,
                                       Divergence divergence = Divergence::mmd,
                                       double lambda = 1.0, double sigma_sq = 4.0) {
  DivergenceConfig cfg;
  cfg.lambda = lambda;
  cfg.sigma_sq = sigma_sq;
  if (model == LatentModel::AE) {
    if (divergence != Divergence::none)
      throw std::invalid_argument("divergence_for: AE mode has no latent divergence");
    cfg.divergence = Divergence::none;
    return cfg;
  }
  cfg.divergence = divergence;
  if (model == LatentModel::GI) {
    cfg.kernel = MmdKernel::gaussian;
  } else {
    cfg.kernel = regime == TrainRegime::all ? MmdKernel::module : MmdKernel::gaussian;
  }
  return cfg;
}

}  // namespace pcg::latent
