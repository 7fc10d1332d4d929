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

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "moelab/io.hpp"
#include "moelab/meanfield.hpp"
#include "moelab/rng.hpp"
#include "moelab/scaling.hpp"
#include "test_util.hpp"

namespace moelab {
namespace {

DmftConfig small_cfg(int P, int L, std::uint64_t seed = 3) {
  DmftConfig c;
  c.P = P;
  c.L = L;
  c.dt = 0.2;
  const Dataset d = testing::random_data(4, P, seed);
  c.Kx_over_D = d.Kx / 4.0;
  c.y = d.y;
  c.M_res = 512;
  c.M_exp = 256;
  c.M_within = 16;
  c.sens_experts = 64;
  c.max_iter = 40;
  c.tol = 1e-9;
  c.seed = seed;
  c.threads = 1;
  c.act.sigma = make_activation("sigmoid");
  return c;
}

// A valid two-time kernel on K = P(L+1) indices.
Mat random_kernel(Index K, std::uint64_t seed) {
  Rng rng = make_stream(seed, "test-kernel");
  Mat A(K, K + 3);
  fill_normal(A, rng);
  return A * A.transpose() / static_cast<double>(K);
}

Mat static_kernel(const Mat& S, int L) {
  const Index P = S.rows();
  Mat C(P * (L + 1), P * (L + 1));
  for (int n = 0; n <= L; ++n)
    for (int m = 0; m <= L; ++m) C.block(n * P, m * P, P, P) = S;
  return C;
}

TEST(CausalCholesky, ReconstructsAndIsCausal) {
  const Mat C = random_kernel(12, 1);
  const Mat L = causal_cholesky(C);
  const Mat R = L * L.transpose() - C;
  // off-diagonal exact to rounding, diagonal carries the 1e-12 base jitter
  EXPECT_LT((R - Mat(R.diagonal().asDiagonal())).cwiseAbs().maxCoeff(), 1e-13);
  EXPECT_LT(R.diagonal().cwiseAbs().maxCoeff(), 2e-12 * C.diagonal().maxCoeff());
  EXPECT_EQ(L.triangularView<Eigen::StrictlyUpper>().toDenseMatrix().cwiseAbs().maxCoeff(), 0.0);
  // leading block of the factor is the factor of the leading block, bitwise
  Mat C2 = C;
  C2.bottomRightCorner(5, 5) += Mat::Identity(5, 5);
  C2.block(7, 0, 5, 7).setConstant(0.01);
  C2.block(0, 7, 7, 5).setConstant(0.01);
  const Mat L2 = causal_cholesky(C2);
  EXPECT_TRUE((L2.topLeftCorner(7, 7).array() == L.topLeftCorner(7, 7).array()).all());
}

TEST(CausalCholesky, RankDeficientZeroAndIndefinite) {
  const Mat S = random_kernel(3, 2);
  const Mat C = static_kernel(S, 4);
  const Mat L = causal_cholesky(C);
  EXPECT_LT((L * L.transpose() - C).cwiseAbs().maxCoeff(), 1e-6 * S.diagonal().maxCoeff());
  EXPECT_EQ(causal_cholesky(Mat::Zero(4, 4)).cwiseAbs().maxCoeff(), 0.0);
  Mat bad = Mat::Identity(3, 3);
  bad(2, 2) = -1;
  EXPECT_THROW(causal_cholesky(bad), ConditioningError);
}

TEST(Within, GpCovarianceMatchesKernel) {
  DmftConfig c = small_cfg(3, 2);
  c.lrs.gamma0 = 0.0;
  c.s1 = 1.3;
  c.rho = 0.5;
  c.s2 = 2.0;
  const Index K = c.K();
  const Mat Ch = random_kernel(K, 5), Cg = random_kernel(K, 6);
  const int M = 20000;
  const WithinPaths w = sample_within_site(c, Ch, Cg, Mat::Zero(3, 3), Vec::Ones(K), M, 0, 11);
  const Mat emp_u = w.u.transpose() * w.u / M;
  const Mat emp_z = w.zh.transpose() * w.zh / M;
  const double tol_u = 5.0 * std::sqrt(2.0) * c.s1 * c.s1 * Ch.diagonal().maxCoeff() / std::sqrt(M);
  const double tol_z = 5.0 * std::sqrt(2.0) * c.nu_xi() * Cg.diagonal().maxCoeff() / std::sqrt(M);
  EXPECT_LT((emp_u - c.s1 * c.s1 * Ch).cwiseAbs().maxCoeff(), tol_u);
  EXPECT_LT((emp_z - c.nu_xi() * Cg).cwiseAbs().maxCoeff(), tol_z);
  // no feedback: paths are the drivers and Phi is their Gram for tanh inputs
  EXPECT_EQ((w.u - w.chi).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Quantile, ExamplesTiesAndOrderStatistics) {
  EXPECT_EQ(quantile_threshold({3, 1, 2, 5, 4}, 0.4), 4.0);
  EXPECT_EQ(quantile_threshold({3, 1, 2, 5, 4}, 1.0), 1.0);
  EXPECT_EQ(quantile_threshold({3, 1, 2, 5, 4}, 0.1), 5.0);
  const auto m = quantile_mask({1, 1, 1, 1}, 0.5);
  EXPECT_EQ(m, (std::vector<char>{1, 1, 0, 0}));
  EXPECT_THROW(quantile_threshold({}, 0.5), ConfigError);
  EXPECT_THROW(quantile_threshold({1.0}, 0.0), ConfigError);
  Rng rng = make_stream(4, "q");
  std::vector<double> u(10000);
  for (auto& v : u) v = uniform01(rng);
  const double q = quantile_threshold(u, 0.3);
  EXPECT_NEAR(q, 0.7, 0.02);
  int above = 0;
  for (double v : u) above += v >= q;
  EXPECT_EQ(above, 3000);
}

// Direct evaluation of the recursion for L = 1.
TEST(Within, OneStepUnrollMatchesHandComputation) {
  DmftConfig c = small_cfg(2, 1);
  c.lrs.eta1 = 0.7;
  c.lrs.eta2 = 1.3;
  c.lrs.gamma0 = 1.5;
  const Index K = c.K();
  const Mat Ch = random_kernel(K, 7), Cg = random_kernel(K, 8);
  Mat Delta(2, 2);
  Delta << 0.4, -0.2, -0.9, 0.3;
  Vec w(K);
  w << 0.3, 0.8, 0.5, 0.6;
  Rng rng = make_stream(9, "drv");
  Mat chi(5, K), xi(5, K);
  fill_normal(chi, rng);
  fill_normal(xi, rng);
  const WithinPaths p = within_from_drivers(c, Ch, Cg, Delta, w, chi, xi, 0);
  for (int s = 0; s < 5; ++s)
    for (int nu = 0; nu < 2; ++nu) {
      double u = chi(s, 2 + nu), z = xi(s, 2 + nu);
      for (int mu = 0; mu < 2; ++mu) {
        const double cm = Delta(mu, 0) / 2.0 * w(mu) * c.lrs.gamma0 * c.dt;
        const double u0 = chi(s, mu), z0 = xi(s, mu);
        const double gh = (1 - std::tanh(u0) * std::tanh(u0)) * z0;
        u += c.lrs.eta1 * cm * gh * Ch(mu, 2 + nu);
        z += c.lrs.eta2 * cm * std::tanh(u0) * Cg(mu, 2 + nu);
      }
      EXPECT_NEAR(p.u(s, 2 + nu), u, 1e-14);
      EXPECT_NEAR(p.zh(s, 2 + nu), z, 1e-14);
      EXPECT_EQ(p.u(s, nu), chi(s, nu));
    }
  double a = 0;
  for (int s = 0; s < 5; ++s) a += std::tanh(p.u(s, 3)) * p.zh(s, 3);
  EXPECT_NEAR(p.A(3), a / 5, 1e-14);
}

TEST(Within, SensitivitiesMatchFiniteDifferences) {
  DmftConfig c = small_cfg(2, 3);
  c.lrs.gamma0 = 2.0;
  c.lrs.eta1 = 1.5;
  c.lrs.eta2 = 1.2;
  const Index K = c.K();
  const Mat Ch = random_kernel(K, 12), Cg = random_kernel(K, 13);
  Mat Delta(2, 4);
  Delta << 0.8, -0.5, 0.6, 0.2, -0.7, 0.9, -0.3, 0.4;
  Vec w(K);
  for (Index i = 0; i < K; ++i) w(i) = 0.5 + 0.1 * static_cast<double>(i % 3);
  Rng rng = make_stream(14, "drv");
  Mat chi(1, K), xi(1, K);
  fill_normal(chi, rng);
  fill_normal(xi, rng);
  const WithinPaths base = within_from_drivers(c, Ch, Cg, Delta, w, chi, xi, 1);
  const double h = 1e-6;
  double err = 0, scale = 0;
  for (Index i = 0; i < K; ++i)
    for (int which = 0; which < 2; ++which) {
      Mat cp = chi, cm = chi, xp = xi, xm = xi;
      (which ? cp : xp)(0, i) += h;
      (which ? cm : xm)(0, i) -= h;
      const WithinPaths a = within_from_drivers(c, Ch, Cg, Delta, w, cp, xp, 0);
      const WithinPaths b = within_from_drivers(c, Ch, Cg, Delta, w, cm, xm, 0);
      for (Index j = 0; j < K; ++j) {
        const double fd = which ? (a.gh(0, j) - b.gh(0, j)) / (2 * h)
                                : (a.phi(0, j) - b.phi(0, j)) / (2 * h);
        const double an = which ? base.D_g_chi(j, i) : base.D_phi_xi(j, i);
        err = std::max(err, std::abs(fd - an));
        scale = std::max(scale, std::abs(fd));
      }
    }
  EXPECT_GT(scale, 0.1);
  EXPECT_LT(err / scale, 1e-5);
  // phi never reacts to xi at the same or later block
  for (Index j = 0; j < K; ++j)
    for (Index i = (j / 2) * 2; i < K; ++i) EXPECT_EQ(base.D_phi_xi(j, i), 0.0);
  for (Index j = 0; j < K; ++j)
    for (Index i = (j / 2 + 1) * 2; i < K; ++i) EXPECT_EQ(base.D_g_chi(j, i), 0.0);
}

TEST(Expert, PathsAreCausalBitwise) {
  for (GateMode gm : {GateMode::kSoft, GateMode::kTopK}) {
    DmftConfig c = small_cfg(2, 4);
    c.gate = gm;
    c.kappa = 0.5;
    c.sb = 1.0;
    c.M_exp = 32;
    c.sens_experts = 4;
    const Index K = c.K();
    const Mat Ch = random_kernel(K, 20), Cg = random_kernel(K, 21);
    Mat Delta(2, 5);
    Delta.setConstant(0.5);
    Mat q(2, 5);
    q.setConstant(0.4);
    const ExpertPopulation a = sample_expert_site(c, Ch, Cg, Delta, q);
    const int n = 2;
    const Index T = (n + 1) * 2;  // indices of steps <= n
    Vec v = Vec::Zero(K);
    for (Index i = T; i < K; ++i) v(i) = 0.3 + 0.1 * i;
    Mat Delta2 = Delta;
    Delta2.rightCols(5 - n - 1).setConstant(-2.0);
    Mat q2 = q;
    q2.rightCols(5 - n - 1).setConstant(0.9);
    const ExpertPopulation b = sample_expert_site(c, Ch + v * v.transpose(),
                                                  Cg + 2 * v * v.transpose(), Delta2, q2);
    for (const auto& [x, y] : {std::pair{&a.p, &b.p}, {&a.w, &b.w}, {&a.A, &b.A}, {&a.q, &b.q}})
      EXPECT_TRUE((x->leftCols(T).array() == y->leftCols(T).array()).all());
    EXPECT_TRUE((a.b.leftCols(n + 1).array() == b.b.leftCols(n + 1).array()).all());
  }
}

TEST(Expert, NoErrorSignalKeepsPathsStill) {
  DmftConfig c = small_cfg(2, 5);
  c.sb = 1.0;
  c.M_exp = 64;
  const Mat S = c.Kx_over_D;
  const Mat Ch = static_kernel(S, 5), Cg = static_kernel(0.5 * S + 0.1 * Mat::Identity(2, 2), 5);
  const ExpertPopulation e = sample_expert_site(c, Ch, Cg, Mat::Zero(2, 6), Mat::Zero(2, 6));
  for (int k = 0; k < 64; ++k)
    for (int n = 1; n <= 5; ++n)
      for (int mu = 0; mu < 2; ++mu) {
        EXPECT_EQ(e.p(k, n * 2 + mu), 0.0);
        EXPECT_NEAR(e.A(k, n * 2 + mu), e.A(k, mu), 1e-4);
        EXPECT_EQ(e.b(k, n), e.b(k, 0));
      }
}

TEST(Expert, TopKQuantileIsExact) {
  DmftConfig c = small_cfg(2, 3);
  c.gate = GateMode::kTopK;
  c.kappa = 0.25;
  c.sb = 1.0;
  c.M_exp = 200;
  c.lrs.gamma0 = 3.0;
  const Index K = c.K();
  const Mat Ch = random_kernel(K, 30), Cg = random_kernel(K, 31);
  Mat Delta = Mat::Constant(2, 4, 0.7);
  const ExpertPopulation e = sample_expert_site(c, Ch, Cg, Delta, Mat::Zero(2, 4));
  for (Index i = 0; i < K; ++i) {
    const double frac =
        (e.q.col(i).array() >= e.qstar_new(i % 2, i / 2)).cast<double>().mean();
    EXPECT_LE(std::abs(frac - 0.25), 1.0 / 200);
  }
}

TEST(Solve, StaticKernelsWithoutFeedback) {
  DmftConfig c = small_cfg(3, 4);
  c.lrs.gamma0 = 0.0;
  c.act.phi = make_activation("identity");
  c.s0 = 1.2;
  const DmftKernels k = solve_dmft(c);
  EXPECT_TRUE(k.converged);
  for (int n = 0; n <= 4; ++n)
    for (int m = 0; m <= 4; ++m)
      EXPECT_LT((k.C_h.slice(n, m) - c.s0 * c.s0 * c.Kx_over_D).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((k.C_phi3.slice(0, 0) - k.C_h.slice(0, 0)).cwiseAbs().maxCoeff(), 1e-12);
  for (int n = 1; n <= 4; ++n) EXPECT_DOUBLE_EQ(k.loss[n], k.loss[0]);
  EXPECT_EQ(k.f.cwiseAbs().maxCoeff(), 0.0);  // antithetic readout
}

TEST(Solve, ConvergesWithFeedback) {
  for (GateMode gm : {GateMode::kSoft, GateMode::kTopK}) {
    DmftConfig c = small_cfg(2, 6);
    c.gate = gm;
    c.kappa = 0.5;
    c.sb = 0.5;
    c.lrs.gamma0 = 1.0;
    c.tol = 1e-8;
    c.max_iter = 80;
    const DmftKernels k = solve_dmft(c);
    EXPECT_TRUE(k.converged) << "residual " << k.residual;
    EXPECT_LT(k.loss.back(), k.loss.front());
    EXPECT_LT(k.C_h.symmetry_error(), 1e-12);
    EXPECT_GT(k.C_h.min_equal_time_eig(), -1e-12);
    if (gm == GateMode::kTopK)
      for (Index i = 0; i < k.active_fraction.size(); ++i)
        EXPECT_LE(std::abs(k.active_fraction(i) - 0.5), 1.0 / c.M_exp);
  }
}

TEST(Solve, HalvingDampingHalvesTheStep) {
  DmftConfig c = small_cfg(2, 6);
  c.max_iter = 3;
  c.damping = 0.6;
  const DmftKernels a = solve_dmft(c);
  c.damping = 0.3;
  const DmftKernels b = solve_dmft(c);
  ASSERT_EQ(a.log.size(), 3u);
  EXPECT_NEAR(b.log[0].max_change / a.log[0].max_change, 0.5, 0.1);
  for (size_t i = 0; i < 3; ++i) EXPECT_NEAR(a.log[i].max_change, 0.6 * a.log[i].residual, 1e-15);
}

TEST(Solve, FiniteMappingUsesWidthFreeRates) {
  TrajectoryConfig f;
  f.dims = testing::dims_of(8, 64, 4, 16, 3);
  f.dims.steps = 5;
  f.data = testing::random_data(8, 3, 2);
  f.init = InitScheme::router_zero();
  ParamBase pb;
  pb.lrs.eta0 = 0.3;
  pb.lrs.eta1 = 0.4;
  pb.lrs.eta2 = 0.5;
  pb.lrs.eta3 = 0.6;
  pb.lrs.eta_r = 0.7;
  pb.lrs.eta_b = 0.8;
  const ParameterizedSetup ps = apply_parameterization(pb, f.dims, Parameterization::table());
  f.lrs = ps.lrs;
  f.init.s2 = ps.init.s2;
  const DmftConfig c = dmft_from_finite(f);
  EXPECT_NEAR(c.lrs.eta0, 0.3, 1e-12);
  EXPECT_NEAR(c.lrs.eta1, 0.4, 1e-12);
  EXPECT_NEAR(c.lrs.eta2, 0.5, 1e-12);
  EXPECT_NEAR(c.lrs.eta3, 0.6, 1e-12);
  EXPECT_NEAR(c.lrs.eta_r, 0.7, 1e-12);
  EXPECT_NEAR(c.lrs.eta_b, 0.8, 1e-12);
  EXPECT_NEAR(c.nu_xi(), 1.0, 1e-12);
  f.init.sr = 1.0;
  f.dims.gamma = 0.5;
  EXPECT_THROW(dmft_from_finite(f), ConfigError);
}

TEST(Solve, ConfigErrorsAndExport) {
  DmftConfig c = small_cfg(2, 2);
  c.M_res = 7;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_cfg(2, 2);
  c.M_exp = 1 << 20;
  c.M_within = 64;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_cfg(2, 2);
  c.max_iter = 2;
  const DmftKernels k = solve_dmft(c);
  const auto dir = std::filesystem::temp_directory_path() / "moelab_dmft_test";
  std::filesystem::create_directories(dir);
  write_dmft_kernels(k, (dir / "k.csv").string());
  write_convergence_log(k, (dir / "c.csv").string());
  const CsvTable t = read_csv((dir / "k.csv").string());
  const int tag = t.column("tag");
  ASSERT_FALSE(t.rows.empty());
  for (const auto& r : t.rows) EXPECT_EQ(r[tag].rfind("dmft:", 0), 0u);
  EXPECT_EQ(read_csv((dir / "c.csv").string()).rows.size(), 2u);
}

}  // namespace
}  // namespace moelab
