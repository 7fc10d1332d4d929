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

#ifndef MOELAB_MEANFIELD_HPP_
#define MOELAB_MEANFIELD_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "moelab/dynamics.hpp"
#include "moelab/kernels.hpp"
#include "moelab/scaling.hpp"

namespace moelab {

// Path index on the (mu, n) grid: n * P + mu, K = P * (L + 1) in total.
struct DmftConfig {
  int P = 1, L = 0;
  double dt = 0.1;
  Mat Kx_over_D;  // P x P input kernel x^T x / D
  Vec y;          // targets
  LossKind loss;
  Activations act = default_activations();
  GateMode gate = GateMode::kSoft;
  double kappa = 1.0;
  BiasMode bias = BiasMode::kGradient;
  double eta_bias = 0.0;

  // Width-free rates (the bar rates of the parameterization) and gamma0.
  LearningRates lrs;
  // Unit-model init stds; the router starts at zero.
  double s0 = 1, s1 = 1, s2 = 1, s3 = 1, sb = 1;
  double rho = 1;  // Ne / N; the down-projection driver variance is rho * s2^2

  double alpha_star = 0.0;  // finite-width noise level N / (E Ne), off by default

  int M_res = 4096, M_exp = 4096, M_within = 64;
  int sens_experts = 1024;    // experts whose within samples are differentiated
  int sens_within = 1;        // differentiated samples per such expert
  long long budget_cap = 1LL << 22;  // cap on M_exp * M_within
  double damping = 0.5;
  int max_iter = 60;
  double tol = 1e-6;
  std::uint64_t seed = 0;
  int threads = 0;

  int K() const { return P * (L + 1); }
  double nu_xi() const { return rho * s2 * s2; }
  void validate() const;  // ConfigError
};

// Mean-field configuration matching a finite run in the width-normalised
// convention: eta0/N, eta1/(E Ne), eta2/(E N), eta3/N, eta_r/(E N^(2 gamma - 1)),
// eta_b/E. The router must start at zero or gamma >= 1 (ConfigError).
DmftConfig dmft_from_finite(const TrajectoryConfig& finite);

struct ConvergenceRecord {
  int iteration = 0;
  double max_change = 0;  // largest entry change actually applied
  double residual = 0;    // max |F(K) - K| before damping
};

struct DmftKernels {
  int P = 0, L = 0;
  TwoTimeKernel C_h, C_g, C_phi3;      // H0, G~, H3 roles
  TwoTimeKernel M_phi, M_psi, M_aa;    // w w Phi, w w Psi^, (sigma' A~)(sigma' A~)
  OneTimeMixture M_a;                  // mean sigma' A~
  Mat R_phixi, R_gchi;                 // K x K, row = output (nu,n), col = source (mu,m)
  Mat Delta, f;                        // P x (L+1)
  std::vector<double> loss;            // L+1
  Mat qstar;                           // P x (L+1), top-K only
  Mat active_fraction;                 // fraction with q >= qstar, same population
  Mat gated_fraction;                  // fraction gated in the last sweep (lagged qstar)
  bool converged = false;
  int iterations = 0;
  double residual = 0;
  std::vector<ConvergenceRecord> log;
};

// Causal Cholesky: rows are factorised in index order and a failing pivot
// gets diagonal jitter 1e-12 .. 1e-8 times the mean diagonal of the rows so
// far. Row j of the factor depends only on C[0..j, 0..j].
Mat causal_cholesky(const Mat& C);

// Drivers and paths of one within-expert population.
struct WithinPaths {
  Mat chi, xi;     // M x K drivers
  Mat u, zh;       // M x K paths; zh is the rescaled backward field Ne z
  Mat phi, gh;     // phi(u) and gh = phi'(u) zh
  Vec A;           // K, within mean of phi(u) zh
  Mat Phi, Psi;    // K x K within Gram of phi and gh
  Mat D_phi_xi;    // K x K mean d phi(u(j)) / d xi(i)
  Mat D_g_chi;     // K x K mean d gh(j) / d chi(i)
};

// Given the expert's gate path w (K), evolves the within recursion
//   u  = chi + sum_{i < block(j)} c1(i) gh(i) C_h(i, j)
//   zh = xi  + sum_{i < block(j)} c2(i) phi(i) C_g(i, j)
// with c1 = gamma0 eta1 dt Delta w / P and c2 = gamma0 eta2 dt Delta w / P,
// chi ~ GP(0, s1^2 C_h), xi ~ GP(0, nu_xi C_g). The first n_sens samples
// are differentiated by forward accumulation.
WithinPaths sample_within_site(const DmftConfig& cfg, const Mat& C_h, const Mat& C_g,
                               const Mat& Delta, const Vec& w, int n_samples, int n_sens,
                               std::uint64_t seed);
// Same recursion with the drivers supplied (rows are samples).
WithinPaths within_from_drivers(const DmftConfig& cfg, const Mat& C_h, const Mat& C_g,
                                const Mat& Delta, const Vec& w, const Mat& chi,
                                const Mat& xi, int n_sens);

// ceil(kappa M)-th largest value; exactly that many samples are active
// when ties go to the lower index (see quantile_mask).
double quantile_threshold(const std::vector<double>& q, double kappa);
std::vector<char> quantile_mask(const std::vector<double>& q, double kappa);

struct ExpertPopulation {
  Mat p, w, active, sigma_d, A, q;  // M_exp x K
  Mat b;                             // M_exp x (L+1)
  // population objects
  Mat M_phi, M_psi, M_aa, R_phixi, R_gchi;
  Vec M_a;
  Mat qstar_new;        // P x (L+1) quantile of this population (top-K)
  Mat gated_fraction;   // P x (L+1)
};
// Nested expert + within sampling for fixed C_h, C_g, Delta. qstar is the
// gate threshold used in top-K mode (P x (L+1)).
ExpertPopulation sample_expert_site(const DmftConfig& cfg, const Mat& C_h, const Mat& C_g,
                                    const Mat& Delta, const Mat& qstar, bool keep_paths = true);

struct ResidualPopulation {
  Mat h0, h3, gt, qt;  // M_res x K
  Vec alpha0;
  Mat C_h, C_g, C_phi3;
  Mat Delta, f;
  std::vector<double> loss;
};
// Residual sites driven by the mixtures and response kernels.
ResidualPopulation sample_residual_site(const DmftConfig& cfg, const Mat& M_phi, const Mat& M_psi,
                                        const Mat& M_aa, const Mat& R_phixi, const Mat& R_gchi);

DmftKernels solve_dmft(const DmftConfig& cfg);

// tag,mu,nu,n,nprime,value with tags prefixed "dmft:".
void write_dmft_kernels(const DmftKernels& k, const std::string& path);
void write_convergence_log(const DmftKernels& k, const std::string& path);

}  // namespace moelab

#endif  // MOELAB_MEANFIELD_HPP_
