// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "moelab/meanfield.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <thread>
#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include "moelab/rng.hpp"

namespace moelab {

void DmftConfig::validate() const {
  require(P >= 1, "dmft: P must be >= 1");
  require(L >= 0, "dmft: L must be >= 0");
  require(std::isfinite(dt) && dt > 0, "dmft: dt must be positive");
  require(Kx_over_D.rows() == P && Kx_over_D.cols() == P, "dmft: Kx/D must be P x P");
  require(y.size() == P, "dmft: y must have P entries");
  require(Kx_over_D.allFinite() && y.allFinite(), "dmft: data must be finite");
  lrs.validate();
  require(kappa > 0 && kappa <= 1, "dmft: kappa must lie in (0, 1]");
  require(eta_bias >= 0 && std::isfinite(eta_bias), "dmft: eta_bias must be >= 0");
  for (double s : {s0, s1, s2, s3, sb, rho})
    require(std::isfinite(s) && s >= 0, "dmft: init scales and rho must be finite and >= 0");
  require(alpha_star >= 0 && std::isfinite(alpha_star), "dmft: alpha_star must be >= 0");
  require(M_res >= 2 && M_res % 2 == 0, "dmft: M_res must be even and >= 2");
  require(M_res >= 2 * P, "dmft: M_res must be at least 2P");
  require(M_exp >= 1 && M_within >= 1, "dmft: population sizes must be >= 1");
  require(static_cast<long long>(M_exp) * M_within <= budget_cap,
          "dmft: M_exp * M_within exceeds budget_cap");
  require(sens_experts >= 0 && sens_within >= 0 && sens_within <= M_within,
          "dmft: bad sensitivity sample counts");
  require(damping > 0 && damping <= 1, "dmft: damping must lie in (0, 1]");
  require(max_iter >= 1, "dmft: max_iter must be >= 1");
  require(tol > 0, "dmft: tol must be positive");
  require(threads >= 0, "dmft: threads must be >= 0");
}

DmftConfig dmft_from_finite(const TrajectoryConfig& fc) {
  const ModelDims& d = fc.dims;
  d.validate(fc.gate);
  require(fc.init.sr == 0.0 || d.gamma >= 1.0,
          "dmft: needs a zero router init or gamma >= 1");
  DmftConfig c;
  c.P = d.P;
  c.L = d.steps;
  c.dt = d.dt;
  c.Kx_over_D = fc.data.Kx / static_cast<double>(d.D);
  c.y = fc.data.y;
  c.loss = fc.loss;
  c.act = fc.act;
  c.gate = fc.gate;
  c.kappa = d.kappa;
  c.bias = fc.bias;
  c.eta_bias = fc.eta_bias;
  const double N = d.N, E = d.E, Ne = d.Ne;
  c.lrs = fc.lrs;
  c.lrs.eta0 = fc.lrs.eta0 / N;
  c.lrs.eta1 = fc.lrs.eta1 / (E * Ne);
  c.lrs.eta2 = fc.lrs.eta2 / (E * N);
  c.lrs.eta3 = fc.lrs.eta3 / N;
  c.lrs.eta_r = fc.lrs.eta_r / (E * std::pow(N, 2 * d.gamma - 1));
  c.lrs.eta_b = fc.lrs.eta_b / E;
  c.s0 = fc.init.s0;
  c.s1 = fc.init.s1;
  c.s2 = fc.init.s2;
  c.s3 = fc.init.s3;
  c.sb = fc.init.sb;
  c.rho = Ne / N;
  c.seed = fc.seed;
  return c;
}

// ---- Gaussian paths ---------------------------------------------------------

Mat causal_cholesky(const Mat& C) {
  if (C.rows() != C.cols()) throw ShapeError("causal_cholesky: matrix must be square");
  const Index K = C.rows();
  static const double kJitter[] = {1e-12, 1e-11, 1e-10, 1e-9, 1e-8};
  Mat Lf = Mat::Zero(K, K);
  double diag_sum = 0;
  int level = 0;  // never decreases, so row j depends on rows <= j only
  for (Index j = 0; j < K; ++j) {
    if (!std::isfinite(C(j, j))) throw ConditioningError("causal_cholesky: non-finite diagonal");
    diag_sum += std::abs(C(j, j));
    const double ref = diag_sum / static_cast<double>(j + 1);
    for (Index i = 0; i < j; ++i) {
      double s = C(j, i);
      for (Index t = 0; t < i; ++t) s -= Lf(j, t) * Lf(i, t);
      Lf(j, i) = Lf(i, i) > 0 ? s / Lf(i, i) : 0.0;
    }
    if (ref == 0.0) continue;  // all zeros so far
    double d0 = C(j, j);
    for (Index t = 0; t < j; ++t) d0 -= Lf(j, t) * Lf(j, t);
    // the pivot must keep at least half of the added jitter
    while (level < 5 && !(d0 + 0.5 * kJitter[level] * ref > 0)) ++level;
    const double d = d0 + kJitter[level] * ref;
    if (!(d0 + 0.5 * kJitter[level] * ref > 0))
      throw ConditioningError("causal_cholesky: kernel is not positive semidefinite at row " +
                              std::to_string(j) + " after maximal jitter");
    Lf(j, j) = std::sqrt(d);
  }
  return Lf;
}

namespace {

Mat gp_paths(const Mat& Lf, double scale, Mat Z) {
  // rows of Z are samples; path = Z L^T, column j uses L(j, 0..j)
  return scale * (Z * Lf.transpose());
}

void parallel_chunks(int n_chunks, int threads, const std::function<void(int)>& fn) {
  int T = threads > 0 ? threads : static_cast<int>(std::thread::hardware_concurrency());
  T = std::max(1, std::min(T, n_chunks));
  if (T == 1) {
    for (int c = 0; c < n_chunks; ++c) fn(c);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::exception_ptr> errs(T);
  std::vector<std::thread> pool;
  for (int t = 0; t < T; ++t)
    pool.emplace_back([&, t] {
      try {
        for (int c = next++; c < n_chunks; c = next++) fn(c);
      } catch (...) {
        errs[t] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errs)
    if (e) std::rethrow_exception(e);
}

// Within-expert recursion, advanced one time block at a time. U and Z start
// as the drivers and absorb history terms into their future columns, so the
// block of step n is final when step(n) is called.
class WithinEngine {
 public:
  WithinEngine(const DmftConfig& cfg, const Mat& C_h, const Mat& C_g, Mat chi, Mat xi)
      : cfg_(cfg), Ch_(C_h), Cg_(C_g), U_(std::move(chi)), Z_(std::move(xi)) {
    const Index M = U_.rows(), K = U_.cols();
    Phi_.resize(M, K);
    Gh_.resize(M, K);
    A_ = Vec::Zero(K);
    c1_ = Vec::Zero(K);
    c2_ = Vec::Zero(K);
  }

  // w and c hold the P gate values and Delta/P at step n.
  void step(int n, const Vec& w, const Vec& c) {
    const int P = cfg_.P;
    const Index B = static_cast<Index>(n) * P, K = U_.cols(), M = U_.rows();
    const auto Ub = U_.middleCols(B, P);
    Phi_.middleCols(B, P) = cfg_.act.phi.f(Mat(Ub));
    Gh_.middleCols(B, P) = cfg_.act.phi.df(Mat(Ub)).cwiseProduct(Z_.middleCols(B, P));
    for (int mu = 0; mu < P; ++mu)
      A_(B + mu) = Phi_.col(B + mu).dot(Z_.col(B + mu)) / static_cast<double>(M);
    const double g0dt = cfg_.lrs.gamma0 * cfg_.dt;
    for (int mu = 0; mu < P; ++mu) {
      c1_(B + mu) = g0dt * cfg_.lrs.eta1 * c(mu) * w(mu);
      c2_(B + mu) = g0dt * cfg_.lrs.eta2 * c(mu) * w(mu);
    }
    const Index F = K - B - P;
    if (F <= 0) return;
    if (c1_.segment(B, P).any())
      U_.rightCols(F).noalias() +=
          (Gh_.middleCols(B, P) * c1_.segment(B, P).asDiagonal()) * Ch_.block(B, B + P, P, F);
    if (c2_.segment(B, P).any())
      Z_.rightCols(F).noalias() +=
          (Phi_.middleCols(B, P) * c2_.segment(B, P).asDiagonal()) * Cg_.block(B, B + P, P, F);
  }

  const Mat& U() const { return U_; }
  const Mat& Z() const { return Z_; }
  const Mat& Phi() const { return Phi_; }
  const Mat& Gh() const { return Gh_; }
  const Vec& A() const { return A_; }
  double A(Index i) const { return A_(i); }

  // Forward accumulation for sample s: D_phi_xi(j, i) = d phi(u_j) / d xi_i
  // and D_g_chi(j, i) = d gh_j / d chi_i. Only sources up to block(j) matter.
  void sensitivities(Index s, Mat& D_phi_xi, Mat& D_g_chi) const {
    const int P = cfg_.P;
    const Index K = U_.cols();
    const int nb = cfg_.L + 1;
    Mat Dphi = Mat::Zero(K, 2 * K), Dg = Mat::Zero(K, 2 * K);  // [xi | chi]
    Mat Du(P, 2 * K), Dz(P, 2 * K);
    for (int n = 0; n < nb; ++n) {
      const Index B = static_cast<Index>(n) * P, S = B + P;  // live sources [0, S)
      Du.setZero();
      Dz.setZero();
      if (B > 0) {
        const Vec c1 = c1_.head(B), c2 = c2_.head(B);
        for (int h = 0; h < 2; ++h) {
          const Index off = h * K;
          Du.middleCols(off, B).noalias() =
              Ch_.block(0, B, B, P).transpose() * (c1.asDiagonal() * Dg.block(0, off, B, B));
          Dz.middleCols(off, B).noalias() =
              Cg_.block(0, B, B, P).transpose() * (c2.asDiagonal() * Dphi.block(0, off, B, B));
        }
      }
      for (int mu = 0; mu < P; ++mu) {
        Du(mu, K + B + mu) += 1.0;  // chi source
        Dz(mu, B + mu) += 1.0;      // xi source
      }
      for (int mu = 0; mu < P; ++mu) {
        const double u = U_(s, B + mu), z = Z_(s, B + mu);
        const double d1 = cfg_.act.phi.df(u);
        const double d2 = cfg_.act.phi.d2f(u);
        for (int h = 0; h < 2; ++h) {
          const Index off = h * K;
          Dphi.row(B + mu).segment(off, S) = d1 * Du.row(mu).segment(off, S);
          Dg.row(B + mu).segment(off, S) =
              (d2 * z) * Du.row(mu).segment(off, S) + d1 * Dz.row(mu).segment(off, S);
        }
      }
    }
    D_phi_xi = Dphi.leftCols(K);
    D_g_chi = Dg.rightCols(K);
  }

 private:
  const DmftConfig& cfg_;
  const Mat& Ch_;
  const Mat& Cg_;
  Mat U_, Z_, Phi_, Gh_;
  Vec A_, c1_, c2_;
};

Mat sym_gram(const Mat& X, double scale) {
  Mat G = Mat::Zero(X.cols(), X.cols());
  G.selfadjointView<Eigen::Lower>().rankUpdate(X.transpose(), scale);
  return G.selfadjointView<Eigen::Lower>();
}

void check_kernel(const Mat& C, Index K, const char* name) {
  if (C.rows() != K || C.cols() != K)
    throw ShapeError(std::string("dmft: ") + name + " has the wrong shape");
  if (!C.allFinite()) throw NumericOverflowError(std::string("dmft: ") + name + " is not finite");
}

}  // namespace

WithinPaths within_from_drivers(const DmftConfig& cfg, const Mat& C_h, const Mat& C_g,
                                const Mat& Delta, const Vec& w, const Mat& chi, const Mat& xi,
                                int n_sens) {
  cfg.validate();
  const Index K = cfg.K();
  check_kernel(C_h, K, "C_h");
  check_kernel(C_g, K, "C_g");
  if (Delta.rows() != cfg.P || Delta.cols() != cfg.L + 1) throw ShapeError("dmft: Delta shape");
  if (w.size() != K) throw ShapeError("dmft: gate path must have K entries");
  if (chi.cols() != K || xi.cols() != K || chi.rows() != xi.rows())
    throw ShapeError("dmft: driver shapes");
  const Index M = chi.rows();
  if (n_sens < 0 || n_sens > M) throw ConfigError("dmft: n_sens out of range");
  WithinEngine eng(cfg, C_h, C_g, chi, xi);
  for (int n = 0; n <= cfg.L; ++n)
    eng.step(n, w.segment(static_cast<Index>(n) * cfg.P, cfg.P), Delta.col(n) / cfg.P);
  WithinPaths out;
  out.chi = chi;
  out.xi = xi;
  out.u = eng.U();
  out.zh = eng.Z();
  out.phi = eng.Phi();
  out.gh = eng.Gh();
  out.A = eng.A();
  out.Phi = sym_gram(out.phi, 1.0 / M);
  out.Psi = sym_gram(out.gh, 1.0 / M);
  out.D_phi_xi = Mat::Zero(K, K);
  out.D_g_chi = Mat::Zero(K, K);
  for (int s = 0; s < n_sens; ++s) {
    Mat a, b;
    eng.sensitivities(s, a, b);
    out.D_phi_xi += a / n_sens;
    out.D_g_chi += b / n_sens;
  }
  return out;
}

WithinPaths sample_within_site(const DmftConfig& cfg, const Mat& C_h, const Mat& C_g,
                               const Mat& Delta, const Vec& w, int n_samples, int n_sens,
                               std::uint64_t seed) {
  cfg.validate();
  if (n_samples < 1) throw ConfigError("dmft: n_samples must be >= 1");
  const Index K = cfg.K();
  check_kernel(C_h, K, "C_h");
  check_kernel(C_g, K, "C_g");
  Rng rng = make_stream(seed, "dmft-within");
  Mat Zc(n_samples, K), Zx(n_samples, K);
  fill_normal(Zc, rng);
  fill_normal(Zx, rng);
  const Mat chi = gp_paths(causal_cholesky(C_h), cfg.s1, std::move(Zc));
  const Mat xi = gp_paths(causal_cholesky(C_g), std::sqrt(cfg.nu_xi()), std::move(Zx));
  return within_from_drivers(cfg, C_h, C_g, Delta, w, chi, xi, n_sens);
}

// ---- quantile -----------------------------------------------------------------

namespace {
std::vector<Index> ranked(const std::vector<double>& q, double kappa, size_t& k) {
  if (q.empty()) throw ConfigError("quantile of an empty population");
  if (!(kappa > 0 && kappa <= 1)) throw ConfigError("quantile: kappa must lie in (0, 1]");
  for (double v : q)
    if (std::isnan(v)) throw NumericOverflowError("quantile: NaN score");
  k = static_cast<size_t>(std::ceil(kappa * static_cast<double>(q.size()) - 1e-9));
  k = std::clamp<size_t>(k, 1, q.size());
  std::vector<Index> idx(q.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](Index a, Index b) { return q[a] > q[b]; });
  return idx;
}
}  // namespace

double quantile_threshold(const std::vector<double>& q, double kappa) {
  size_t k = 0;
  const auto idx = ranked(q, kappa, k);
  return q[idx[k - 1]];
}

std::vector<char> quantile_mask(const std::vector<double>& q, double kappa) {
  size_t k = 0;
  const auto idx = ranked(q, kappa, k);
  std::vector<char> m(q.size(), 0);
  for (size_t i = 0; i < k; ++i) m[idx[i]] = 1;
  return m;
}

// ---- expert level --------------------------------------------------------------

namespace {

// first draw of the expert stream
double expert_b0(const DmftConfig& cfg, Rng& rng) { return cfg.sb * normal(rng); }

struct ExpertAccum {
  Mat M_phi, M_psi, M_aa, R_phixi, R_gchi;
  Vec M_a;
  int n_sens = 0;
  void init(Index K, bool sens) {
    M_phi = Mat::Zero(K, K);
    M_psi = Mat::Zero(K, K);
    M_aa = Mat::Zero(K, K);
    M_a = Vec::Zero(K);
    if (sens) {
      R_phixi = Mat::Zero(K, K);
      R_gchi = Mat::Zero(K, K);
    }
  }
};

}  // namespace

ExpertPopulation sample_expert_site(const DmftConfig& cfg, const Mat& C_h, const Mat& C_g,
                                    const Mat& Delta, const Mat& qstar, bool keep_paths) {
  cfg.validate();
  const int P = cfg.P, nb = cfg.L + 1, Me = cfg.M_exp, Mw = cfg.M_within;
  const Index K = cfg.K();
  check_kernel(C_h, K, "C_h");
  check_kernel(C_g, K, "C_g");
  if (Delta.rows() != P || Delta.cols() != nb) throw ShapeError("dmft: Delta shape");
  const bool topk = cfg.gate == GateMode::kTopK;
  if (topk && (qstar.rows() != P || qstar.cols() != nb)) throw ShapeError("dmft: qstar shape");

  const Mat Lh = causal_cholesky(C_h), Lg = causal_cholesky(C_g);
  const double sxi = std::sqrt(cfg.nu_xi());
  const Activation& sig = cfg.act.sigma;
  const double g0dt = cfg.lrs.gamma0 * cfg.dt;
  const Mat c = Delta / static_cast<double>(P);
  const int n_sens_exp = std::min(cfg.sens_experts, Me);

  ExpertPopulation out;
  out.q = Mat::Zero(Me, K);
  Mat gated = Mat::Zero(Me, K);
  if (keep_paths) {
    out.p = Mat::Zero(Me, K);
    out.w = Mat::Zero(Me, K);
    out.active = Mat::Zero(Me, K);
    out.sigma_d = Mat::Zero(Me, K);
    out.A = Mat::Zero(Me, K);
    out.b = Mat::Zero(Me, nb);
  }

  const int n_chunks = std::min(32, Me);
  std::vector<ExpertAccum> acc(n_chunks);
  auto run_chunk = [&](int ch) {
    const int lo = static_cast<int>(static_cast<long long>(Me) * ch / n_chunks);
    const int hi = static_cast<int>(static_cast<long long>(Me) * (ch + 1) / n_chunks);
    ExpertAccum& a = acc[ch];
    a.init(K, lo < n_sens_exp);
    Mat Zc(Mw, K), Zx(Mw, K);
    Vec p_future(K), pv(K), w(K), sd(K), q(K), act(K), bpath(nb), av(K);
    for (int e = lo; e < hi; ++e) {
      Rng rng = make_stream(cfg.seed, "dmft-expert", static_cast<std::uint64_t>(e));
      double b = expert_b0(cfg, rng);
      fill_normal(Zc, rng);
      fill_normal(Zx, rng);
      WithinEngine eng(cfg, C_h, C_g, gp_paths(Lh, cfg.s1, Zc), gp_paths(Lg, sxi, Zx));
      p_future.setZero();
      for (int n = 0; n < nb; ++n) {
        const Index B = static_cast<Index>(n) * P;
        bpath(n) = b;
        for (int mu = 0; mu < P; ++mu) {
          const double p = p_future(B + mu), s = sig.f(p);
          pv(B + mu) = p;
          q(B + mu) = s + b;
          if (topk) {
            const bool on = q(B + mu) >= qstar(mu, n);
            act(B + mu) = on ? 1.0 : 0.0;
            w(B + mu) = on ? s : 0.0;
            sd(B + mu) = on ? sig.df(p) : 0.0;
          } else {
            act(B + mu) = 1.0;
            w(B + mu) = s + b;
            sd(B + mu) = sig.df(p);
          }
        }
        eng.step(n, w.segment(B, P), c.col(n));
        // bias for the next step
        if (cfg.bias == BiasMode::kGradient) {
          if (!topk) {
            double s = 0;
            for (int mu = 0; mu < P; ++mu) s += c(mu, n) * eng.A(B + mu);
            b += g0dt * cfg.lrs.eta_b * s;
          }
        } else if (cfg.bias == BiasMode::kBalance) {
          double load = 0;
          if (topk) {
            load = act.segment(B, P).mean();
          } else {
            load = std::clamp(w.segment(B, P).mean(), 0.0, 1.0);
          }
          b -= cfg.eta_bias * cfg.dt * (load - cfg.kappa);
        }
        const Index F = K - B - P;
        if (F > 0 && cfg.lrs.eta_r != 0.0) {
          Vec coef(P);
          for (int mu = 0; mu < P; ++mu)
            coef(mu) = g0dt * cfg.lrs.eta_r * c(mu, n) * eng.A(B + mu) * sd(B + mu);
          if (coef.any()) p_future.tail(F).noalias() += C_h.block(B, B + P, P, F).transpose() * coef;
        }
      }
      av = sd.cwiseProduct(eng.A());
      const Mat X = eng.Phi() * w.asDiagonal();
      const Mat Y = eng.Gh() * w.asDiagonal();
      a.M_phi.selfadjointView<Eigen::Lower>().rankUpdate(X.transpose(), 1.0 / Mw);
      a.M_psi.selfadjointView<Eigen::Lower>().rankUpdate(Y.transpose(), 1.0 / Mw);
      a.M_aa.selfadjointView<Eigen::Lower>().rankUpdate(av, 1.0);
      a.M_a += av;
      if (e < n_sens_exp) {
        for (int s = 0; s < cfg.sens_within; ++s) {
          Mat dpx, dgc;
          eng.sensitivities(s, dpx, dgc);
          a.R_phixi.noalias() += w.asDiagonal() * dpx / cfg.sens_within;
          a.R_gchi.noalias() += w.asDiagonal() * dgc / cfg.sens_within;
        }
        ++a.n_sens;
      }
      out.q.row(e) = q.transpose();
      gated.row(e) = act.transpose();
      if (keep_paths) {
        out.p.row(e) = pv.transpose();
        out.w.row(e) = w.transpose();
        out.active.row(e) = act.transpose();
        out.sigma_d.row(e) = sd.transpose();
        out.A.row(e) = eng.A().transpose();
        out.b.row(e) = bpath.transpose();
      }
    }
  };
  parallel_chunks(n_chunks, cfg.threads, run_chunk);

  out.M_phi = Mat::Zero(K, K);
  out.M_psi = Mat::Zero(K, K);
  out.M_aa = Mat::Zero(K, K);
  out.M_a = Vec::Zero(K);
  out.R_phixi = Mat::Zero(K, K);
  out.R_gchi = Mat::Zero(K, K);
  int ns = 0;
  for (const auto& a : acc) {
    out.M_phi += a.M_phi;
    out.M_psi += a.M_psi;
    out.M_aa += a.M_aa;
    out.M_a += a.M_a;
    if (a.n_sens > 0) {
      out.R_phixi += a.R_phixi;
      out.R_gchi += a.R_gchi;
      ns += a.n_sens;
    }
  }
  out.M_phi = Mat(out.M_phi.selfadjointView<Eigen::Lower>()) / Me;
  out.M_psi = Mat(out.M_psi.selfadjointView<Eigen::Lower>()) / Me;
  out.M_aa = Mat(out.M_aa.selfadjointView<Eigen::Lower>()) / Me;
  out.M_a /= Me;
  if (ns > 0) {
    out.R_phixi *= cfg.nu_xi() / ns;
    out.R_gchi *= cfg.s1 * cfg.s1 / ns;
  }
  out.qstar_new = Mat::Zero(P, nb);
  out.gated_fraction = Mat::Zero(P, nb);
  for (int n = 0; n < nb; ++n)
    for (int mu = 0; mu < P; ++mu) {
      const Index i = static_cast<Index>(n) * P + mu;
      out.gated_fraction(mu, n) = gated.col(i).mean();
      if (topk) {
        std::vector<double> col(out.q.col(i).data(), out.q.col(i).data() + Me);
        out.qstar_new(mu, n) = quantile_threshold(col, cfg.kappa);
      }
    }
  return out;
}

// ---- residual level --------------------------------------------------------------

ResidualPopulation sample_residual_site(const DmftConfig& cfg, const Mat& M_phi, const Mat& M_psi,
                                        const Mat& M_aa, const Mat& R_phixi, const Mat& R_gchi) {
  cfg.validate();
  const int P = cfg.P, nb = cfg.L + 1, M = cfg.M_res;
  const Index K = cfg.K();
  check_kernel(M_phi, K, "M_phi");
  check_kernel(M_psi, K, "M_psi");
  check_kernel(M_aa, K, "M_aa");
  check_kernel(R_phixi, K, "R_phixi");
  check_kernel(R_gchi, K, "R_gchi");
  const Activation& phi = cfg.act.phi;
  const double g0dt = cfg.lrs.gamma0 * cfg.dt;

  ResidualPopulation out;
  Rng rng = make_stream(cfg.seed, "dmft-residual");
  // moment-matched pairs: (Z_i, a_i) and (Z_i, -a_i)
  Mat Zh(M / 2, P);
  fill_normal(Zh, rng);
  {
    const Mat S = Zh.transpose() * Zh / static_cast<double>(M / 2);
    Eigen::LLT<Mat> llt(S);
    if (llt.info() != Eigen::Success) throw ConditioningError("dmft: residual init whitening failed");
    Zh = llt.matrixU().solve<Eigen::OnTheRight>(Zh);  // Zh R^{-1}, R = U
  }
  Eigen::SelfAdjointEigenSolver<Mat> es(cfg.s0 * cfg.s0 * cfg.Kx_over_D);
  const Mat root = es.eigenvectors() *
                   es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
                   es.eigenvectors().transpose();
  Mat h0init(M, P);
  Vec alpha(M);
  {
    const Mat half = Zh * root;
    Vec a(M / 2);
    fill_normal(a, rng);
    const double rms = std::sqrt(a.squaredNorm() / a.size());
    if (rms > 0) a *= cfg.s3 / rms;
    for (int i = 0; i < M / 2; ++i) {
      h0init.row(2 * i) = half.row(i);
      h0init.row(2 * i + 1) = half.row(i);
      alpha(2 * i) = a(i);
      alpha(2 * i + 1) = -a(i);
    }
  }
  out.alpha0 = alpha;

  Mat noise_h3, noise_q;
  if (cfg.alpha_star > 0) {
    Rng nr = make_stream(cfg.seed, "dmft-residual-noise");
    Mat Z1(M, K), Z2(M, K);
    fill_normal(Z1, nr);
    fill_normal(Z2, nr);
    noise_h3 = gp_paths(causal_cholesky(M_phi), std::sqrt(cfg.alpha_star * cfg.nu_xi()), Z1);
    noise_q = gp_paths(causal_cholesky(M_psi), std::sqrt(cfg.alpha_star) * cfg.s1, Z2);
  }

  Mat H0(M, K), H3(M, K), PH3(M, K), GT(M, K), QT(M, K);
  out.Delta = Mat::Zero(P, nb);
  out.f = Mat::Zero(P, nb);
  out.loss.assign(nb, 0.0);
  Vec c = Vec::Zero(K);
  Mat acc0 = Mat::Zero(M, P);
  const Mat kx = cfg.Kx_over_D;
  for (int n = 0; n < nb; ++n) {
    const Index B = static_cast<Index>(n) * P;
    H0.middleCols(B, P) = h0init + acc0;
    Mat h3 = H0.middleCols(B, P);
    if (B > 0) {
      Mat W(B, P);
      for (int nu = 0; nu < P; ++nu)
        for (Index i = 0; i < B; ++i)
          W(i, nu) = R_phixi(B + nu, i) + g0dt * cfg.lrs.eta2 * c(i) * M_phi(i, B + nu);
      h3.noalias() += GT.leftCols(B) * W;
    }
    if (cfg.alpha_star > 0) h3 += noise_h3.middleCols(B, P);
    H3.middleCols(B, P) = h3;
    PH3.middleCols(B, P) = phi.f(h3);
    if (n > 0) {
      Vec inc = Vec::Zero(M);
      for (int mu = 0; mu < P; ++mu) inc += c(B - P + mu) * PH3.col(B - P + mu);
      alpha += g0dt * cfg.lrs.eta3 * inc;
    }
    Vec f(P);
    for (int nu = 0; nu < P; ++nu) f(nu) = alpha.dot(PH3.col(B + nu)) / M;
    auto [lv, dv] = loss_and_delta(f, cfg.y, cfg.loss);
    if (!std::isfinite(lv) || !dv.allFinite())
      throw NumericOverflowError("dmft: non-finite loss at step " + std::to_string(n));
    out.f.col(n) = f;
    out.Delta.col(n) = dv;
    out.loss[n] = lv;
    c.segment(B, P) = dv / static_cast<double>(P);
    GT.middleCols(B, P) = phi.df(h3).array().colwise() * alpha.array();
    Mat W((B + P), P);
    for (int nu = 0; nu < P; ++nu)
      for (Index i = 0; i < B + P; ++i) {
        double v = R_gchi(B + nu, i);
        if (i < B) v += g0dt * c(i) * (cfg.lrs.eta1 * M_psi(i, B + nu) + cfg.lrs.eta_r * M_aa(i, B + nu));
        W(i, nu) = v;
      }
    Mat qt = GT.middleCols(B, P);
    qt.noalias() += H0.leftCols(B + P) * W;
    if (cfg.alpha_star > 0) qt += noise_q.middleCols(B, P);
    QT.middleCols(B, P) = qt;
    acc0.noalias() += g0dt * cfg.lrs.eta0 * (qt * c.segment(B, P).asDiagonal()) * kx;
    if (!H3.middleCols(B, P).allFinite() || !qt.allFinite())
      throw NumericOverflowError("dmft: residual paths overflow at step " + std::to_string(n));
  }
  out.C_h = sym_gram(H0, 1.0 / M);
  out.C_g = sym_gram(GT, 1.0 / M);
  out.C_phi3 = sym_gram(PH3, 1.0 / M);
  out.h0 = std::move(H0);
  out.h3 = std::move(H3);
  out.gt = std::move(GT);
  out.qt = std::move(QT);
  return out;
}

// ---- fixed point -------------------------------------------------------------------

namespace {

struct State {
  Mat C_h, C_g, C_phi3, M_phi, M_psi, M_aa, R_phixi, R_gchi, Delta, f;
  Vec M_a;
  std::vector<double> loss;
};

double max_diff(const State& a, const State& b) {
  double m = 0;
  auto upd = [&](const auto& x, const auto& y) { m = std::max(m, (x - y).cwiseAbs().maxCoeff()); };
  upd(a.C_h, b.C_h);
  upd(a.C_g, b.C_g);
  upd(a.C_phi3, b.C_phi3);
  upd(a.M_phi, b.M_phi);
  upd(a.M_psi, b.M_psi);
  upd(a.M_aa, b.M_aa);
  upd(a.R_phixi, b.R_phixi);
  upd(a.R_gchi, b.R_gchi);
  upd(a.Delta, b.Delta);
  upd(a.f, b.f);
  return m;
}

void blend(State& s, const State& t, double r) {
  auto mix = [r](auto& x, const auto& y) { x = ((1 - r) * x + r * y).eval(); };
  mix(s.C_h, t.C_h);
  mix(s.C_g, t.C_g);
  mix(s.C_phi3, t.C_phi3);
  mix(s.M_phi, t.M_phi);
  mix(s.M_psi, t.M_psi);
  mix(s.M_aa, t.M_aa);
  mix(s.R_phixi, t.R_phixi);
  mix(s.R_gchi, t.R_gchi);
  mix(s.Delta, t.Delta);
  mix(s.f, t.f);
  mix(s.M_a, t.M_a);
  for (size_t i = 0; i < s.loss.size(); ++i) s.loss[i] = (1 - r) * s.loss[i] + r * t.loss[i];
}

TwoTimeKernel full_kernel(const std::string& tag, int P, int L, const Mat& K) {
  TwoTimeKernel k;
  k.tag = tag;
  k.P = P;
  k.grid.resize(L + 1);
  std::iota(k.grid.begin(), k.grid.end(), 0);
  k.K = K;
  return k;
}

}  // namespace

DmftKernels solve_dmft(const DmftConfig& cfg) {
  cfg.validate();
  const int P = cfg.P, nb = cfg.L + 1;
  const Index K = cfg.K();
  const bool topk = cfg.gate == GateMode::kTopK;

  State s;
  {
    const Mat Z = Mat::Zero(K, K);
    ResidualPopulation r0 = sample_residual_site(cfg, Z, Z, Z, Z, Z);
    s.C_h = r0.C_h;
    s.C_g = r0.C_g;
    s.C_phi3 = r0.C_phi3;
    s.M_phi = s.M_psi = s.M_aa = s.R_phixi = s.R_gchi = Z;
    s.M_a = Vec::Zero(K);
    s.Delta = r0.Delta;
    s.f = r0.f;
    s.loss = r0.loss;
  }
  Mat qstar = Mat::Zero(P, nb);
  if (topk) {
    std::vector<double> q0(cfg.M_exp);
    const double s0 = cfg.act.sigma.f(0.0);
    for (int e = 0; e < cfg.M_exp; ++e) {
      Rng rng = make_stream(cfg.seed, "dmft-expert", static_cast<std::uint64_t>(e));
      q0[e] = s0 + expert_b0(cfg, rng);
    }
    qstar.setConstant(quantile_threshold(q0, cfg.kappa));
  }

  DmftKernels out;
  State best = s;
  Mat best_q = qstar, best_active, best_gated;
  double best_res = std::numeric_limits<double>::infinity();
  Mat last_active, last_gated;
  for (int it = 1; it <= cfg.max_iter; ++it) {
    ExpertPopulation ex = sample_expert_site(cfg, s.C_h, s.C_g, s.Delta, qstar, false);
    ResidualPopulation r =
        sample_residual_site(cfg, ex.M_phi, ex.M_psi, ex.M_aa, ex.R_phixi, ex.R_gchi);
    State t;
    t.C_h = r.C_h;
    t.C_g = r.C_g;
    t.C_phi3 = r.C_phi3;
    t.M_phi = ex.M_phi;
    t.M_psi = ex.M_psi;
    t.M_aa = ex.M_aa;
    t.M_a = ex.M_a;
    t.R_phixi = ex.R_phixi;
    t.R_gchi = ex.R_gchi;
    t.Delta = r.Delta;
    t.f = r.f;
    t.loss = r.loss;
    const double res = max_diff(t, s);
    if (!std::isfinite(res)) throw NumericOverflowError("dmft: iteration " + std::to_string(it) + " is not finite");
    // fraction of this population at or above its own quantile
    Mat active = Mat::Ones(P, nb);
    if (topk) {
      for (int n = 0; n < nb; ++n)
        for (int mu = 0; mu < P; ++mu) {
          const Index i = static_cast<Index>(n) * P + mu;
          active(mu, n) = (ex.q.col(i).array() >= ex.qstar_new(mu, n)).cast<double>().mean();
        }
    }
    blend(s, t, cfg.damping);
    const Mat q_used = qstar;
    if (topk) qstar = ex.qstar_new;
    out.log.push_back({it, cfg.damping * res, res});
    out.iterations = it;
    if (res < best_res) {
      best_res = res;
      best = s;
      best_q = topk ? ex.qstar_new : q_used;
      best_active = active;
      best_gated = ex.gated_fraction;
    }
    if (res < cfg.tol) {
      out.converged = true;
      break;
    }
  }
  const State& fin = out.converged ? s : best;
  out.P = P;
  out.L = cfg.L;
  out.residual = best_res;
  out.C_h = full_kernel("H0", P, cfg.L, fin.C_h);
  out.C_g = full_kernel("Gt", P, cfg.L, fin.C_g);
  out.C_phi3 = full_kernel("H3", P, cfg.L, fin.C_phi3);
  out.M_phi = full_kernel("MPhi", P, cfg.L, fin.M_phi);
  out.M_psi = full_kernel("MPsit", P, cfg.L, fin.M_psi);
  out.M_aa = full_kernel("MAAt", P, cfg.L, fin.M_aa);
  out.M_a.tag = "MAt";
  out.M_a.P = P;
  out.M_a.grid = out.C_h.grid;
  out.M_a.M = Eigen::Map<const Mat>(fin.M_a.data(), P, nb);
  out.R_phixi = fin.R_phixi;
  out.R_gchi = fin.R_gchi;
  out.Delta = fin.Delta;
  out.f = fin.f;
  out.loss = fin.loss;
  out.qstar = best_q;
  out.active_fraction = best_active;
  out.gated_fraction = best_gated;
  return out;
}

void write_dmft_kernels(const DmftKernels& k, const std::string& path) {
  CsvWriter w(path, kernel_header());
  for (const TwoTimeKernel* t : {&k.C_h, &k.C_g, &k.C_phi3, &k.M_phi, &k.M_psi, &k.M_aa})
    write_kernel_rows(w, *t, "dmft:");
  write_kernel_rows(w, full_kernel("Rphixi", k.P, k.L, k.R_phixi), "dmft:");
  write_kernel_rows(w, full_kernel("Rgchi", k.P, k.L, k.R_gchi), "dmft:");
  write_kernel_rows(w, k.M_a, "dmft:");
  auto one = [&](const std::string& tag, const Mat& m) {
    OneTimeMixture o;
    o.tag = tag;
    o.P = k.P;
    o.grid = k.C_h.grid;
    o.M = m;
    write_kernel_rows(w, o, "dmft:");
  };
  one("Delta", k.Delta);
  one("f", k.f);
  if (k.qstar.size()) one("qstar", k.qstar);
  if (k.active_fraction.size()) one("active_fraction", k.active_fraction);
  if (k.gated_fraction.size()) one("gated_fraction", k.gated_fraction);
  for (int n = 0; n <= k.L; ++n)
    w.row({std::string("dmft:loss"), 0LL, 0LL, static_cast<long long>(n),
           static_cast<long long>(n), k.loss[n]});
}

void write_convergence_log(const DmftKernels& k, const std::string& path) {
  CsvWriter w(path, {"iteration", "max_change", "residual"});
  for (const auto& r : k.log)
    w.row({static_cast<long long>(r.iteration), r.max_change, r.residual});
}

}  // namespace moelab
