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

#include "moelab/dynamics.hpp"

#include <array>
#include <cmath>

#include <gtest/gtest.h>

#include "moelab/tasks.hpp"
#include "test_util.hpp"

namespace moelab {
namespace {

using testing::dims_of;
using testing::random_data;

// Finite-difference gradient of the loss over every scalar parameter,
// returned per block as (||analytic - fd||, ||fd||).
std::array<std::pair<double, double>, 6> fd_block_errors(
    const ParamState& ps, const Dataset& data, const Activations& act,
    const ModelDims& d, GateMode mode, bool use_oracle) {
  const FieldState fs = evaluate(ps, data, act, mode, d, LossKind::half_mse());
  GradState g = grad_blocks(ps, data, d, fs);
  auto loss = [&](const ParamState& q) {
    if (use_oracle) return testing::oracle_loss(q, data, act, d);
    return evaluate(q, data, act, mode, d, LossKind::half_mse()).loss;
  };
  std::vector<double> fd, an;
  std::vector<int> blk;
  ParamState work = ps;
  const double h = 1e-5;
  testing::for_each_scalar(work, [&](int b, double& v) {
    const double v0 = v;
    v = v0 + h;
    const double lp = loss(work);
    v = v0 - h;
    const double lm = loss(work);
    v = v0;
    fd.push_back((lp - lm) / (2 * h));
    blk.push_back(b);
  });
  testing::for_each_scalar(g, [&](int, double& v) { an.push_back(v); });
  std::array<std::pair<double, double>, 6> out{};
  for (size_t i = 0; i < fd.size(); ++i) {
    out[blk[i]].first += (an[i] - fd[i]) * (an[i] - fd[i]);
    out[blk[i]].second += fd[i] * fd[i];
  }
  for (auto& e : out) e = {std::sqrt(e.first), std::sqrt(e.second)};
  return out;
}

FieldState blank_fields(const ModelDims& d) {
  FieldState fs;
  fs.h0 = fs.h3 = fs.phi_h3 = fs.g = fs.gt = fs.q = Mat::Zero(d.N, d.P);
  fs.f = fs.Delta = Vec::Zero(d.P);
  fs.p = fs.w = fs.A = fs.sigma_d = Mat::Zero(d.E, d.P);
  fs.active = Mat::Ones(d.E, d.P);
  for (int k = 0; k < d.E; ++k) {
    fs.u.push_back(Mat::Zero(d.Ne, d.P));
    fs.phi_u.push_back(Mat::Zero(d.Ne, d.P));
    fs.z.push_back(Mat::Zero(d.Ne, d.P));
    fs.delta.push_back(Mat::Zero(d.Ne, d.P));
    fs.m.push_back(Mat::Zero(d.N, d.P));
  }
  fs.has_backward = true;
  return fs;
}

TEST(DynamicsTest, ReadoutAndBiasSignalsByHand) {
  ModelDims d = dims_of(1, 2, 1, 1, 1);
  const Dataset data = random_data(1, 1, 0);
  ParamState ps = init_params(d, InitScheme::unit(), 0);
  FieldState fs = blank_fields(d);
  fs.phi_h3 << 1.0, 3.0;
  fs.Delta << 1.0;
  GradState g = grad_blocks(ps, data, d, fs);
  EXPECT_DOUBLE_EQ(-g.w3(0), 0.5);
  EXPECT_DOUBLE_EQ(-g.w3(1), 1.5);

  ModelDims d2 = dims_of(1, 4, 2, 1, 1);
  ParamState ps2 = init_params(d2, InitScheme::unit(), 0);
  FieldState fs2 = blank_fields(d2);
  fs2.A.setConstant(0.25);
  fs2.Delta << 1.0;
  g = grad_blocks(ps2, random_data(1, 1, 0), d2, fs2);
  EXPECT_DOUBLE_EQ(-g.b(0), 0.5);
}

TEST(DynamicsTest, GradientsMatchFiniteDifferencesEveryBlock) {
  for (int trial = 0; trial < 20; ++trial) {
    std::mt19937_64 pick(1000 + trial);
    auto r = [&](int hi) { return 1 + static_cast<int>(pick() % hi); };
    ModelDims d = dims_of(r(3), r(6), r(4), r(4), r(3));
    d.gamma = (trial % 2) ? 1.0 : 0.5;
    const Dataset data = random_data(d.D, d.P, 2000 + trial);
    const Activations act = default_activations();
    const ParamState ps = init_params(d, InitScheme::unit(), 3000 + trial);
    const auto err = fd_block_errors(ps, data, act, d, GateMode::kSoft, true);
    for (int b = 0; b < 6; ++b) {
      if (err[b].second < 1e-9) {
        EXPECT_LT(err[b].first, 1e-9) << block_name(b);
        continue;
      }
      EXPECT_LT(err[b].first / err[b].second, 1e-6) << "trial " << trial << " block " << block_name(b);
    }
  }
}

TEST(DynamicsTest, TopKGradientsHoldTheMaskFixed) {
  ModelDims d = dims_of(2, 4, 4, 3, 2);
  d.kappa = 0.5;
  const Dataset data = random_data(2, 2, 77);
  const ParamState ps = init_params(d, InitScheme::unit(), 78);
  const auto err = fd_block_errors(ps, data, default_activations(), d, GateMode::kTopK, false);
  for (int b = 0; b < 5; ++b) EXPECT_LT(err[b].first / err[b].second, 1e-6) << block_name(b);
  EXPECT_EQ(err[5].first, 0.0);  // bias only selects
  EXPECT_EQ(err[5].second, 0.0);
}

TEST(DynamicsTest, EulerStepScalarAndFrozen) {
  ParamState ps;
  ps.W0 = Mat::Constant(1, 1, 1.0);
  ps.W1 = {Mat::Constant(1, 1, 1.0)};
  ps.W2 = {Mat::Constant(1, 1, 1.0)};
  ps.w3 = Vec::Constant(1, 1.0);
  ps.r = Mat::Constant(1, 1, 1.0);
  ps.b = Vec::Constant(1, 1.0);
  GradState g = ps;
  g.W0.setConstant(-2.0);
  g.W1[0].setConstant(-2.0);
  g.W2[0].setConstant(-2.0);
  g.w3.setConstant(-2.0);
  g.r.setConstant(-2.0);
  g.b.setConstant(-2.0);
  const ParamState out = euler_step(ps, g, LearningRates{}, 0.1);
  EXPECT_DOUBLE_EQ(out.W0(0, 0), 1.2);
  EXPECT_DOUBLE_EQ(out.W1[0](0, 0), 1.2);
  EXPECT_DOUBLE_EQ(out.b(0), 1.2);
  const ParamState same = euler_step(ps, g, LearningRates::zeros(), 0.1);
  EXPECT_TRUE(same.W0 == ps.W0 && same.W1[0] == ps.W1[0] && same.W2[0] == ps.W2[0] &&
              same.w3 == ps.w3 && same.r == ps.r && same.b == ps.b);
  g.W0(0, 0) = std::nan("");
  EXPECT_THROW(euler_step(ps, g, LearningRates{}, 0.1, 7), DivergenceError);
}

TEST(DynamicsTest, InplaceStepMatchesGradStatePath) {
  ModelDims d = dims_of(3, 6, 4, 4, 3);
  d.dt = 0.05;
  const Dataset data = random_data(3, 3, 5);
  const Activations act = default_activations();
  const ParamState ps = init_params(d, InitScheme::unit(), 6);
  LearningRates lrs{0.3, 0.7, 1.1, 1.3, 0.9, 0.4, 1.5};
  const FieldState fs = evaluate(ps, data, act, GateMode::kSoft, d, LossKind::half_mse());
  const ParamState a = euler_step(ps, grad_blocks(ps, data, d, fs), lrs, d.dt);
  ParamState b = ps;
  euler_step_inplace(b, data, d, fs, lrs, BiasMode::kGradient);
  EXPECT_LT((a.W0 - b.W0).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LT((a.w3 - b.w3).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LT((a.r - b.r).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LT((a.b - b.b).cwiseAbs().maxCoeff(), 1e-15);
  for (int k = 0; k < d.E; ++k) {
    EXPECT_LT((a.W1[k] - b.W1[k]).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_LT((a.W2[k] - b.W2[k]).cwiseAbs().maxCoeff(), 1e-15);
  }
}

TEST(DynamicsTest, EulerLocalDefectIsSecondOrder) {
  ModelDims d = dims_of(2, 4, 3, 3, 2);
  const Dataset data = random_data(2, 2, 31);
  const Activations act = default_activations();
  const ParamState ps = init_params(d, InitScheme::unit(), 32);
  const LearningRates lrs;
  auto step = [&](const ParamState& p, double dt) {
    ModelDims dd = d;
    dd.dt = dt;
    ParamState q = p;
    const FieldState fs = evaluate(q, data, act, GateMode::kSoft, dd, LossKind::half_mse());
    euler_step_inplace(q, data, dd, fs, lrs, BiasMode::kGradient);
    return q;
  };
  auto defect = [&](double dt) {
    const ParamState one = step(ps, dt);
    const ParamState two = step(step(ps, dt / 2), dt / 2);
    double s = (one.W0 - two.W0).squaredNorm() + (one.w3 - two.w3).squaredNorm() +
               (one.r - two.r).squaredNorm() + (one.b - two.b).squaredNorm();
    for (int k = 0; k < d.E; ++k)
      s += (one.W1[k] - two.W1[k]).squaredNorm() + (one.W2[k] - two.W2[k]).squaredNorm();
    return std::sqrt(s);
  };
  const double ratio = defect(0.02) / defect(0.01);
  EXPECT_GE(ratio, 3.5);
  EXPECT_LE(ratio, 4.5);
}

TEST(DynamicsTest, BiasBalanceStep) {
  Vec b = Vec::Zero(4), loads(4);
  loads << 0.5, 0.5, 0, 0;
  const Vec out = bias_balance_step(b, loads, 0.25, 1.0, 0.1);
  EXPECT_NEAR(out(0), -0.025, 1e-17);
  EXPECT_NEAR(out(1), -0.025, 1e-17);
  EXPECT_NEAR(out(2), 0.025, 1e-17);
  EXPECT_NEAR(out(3), 0.025, 1e-17);
  EXPECT_TRUE(bias_balance_step(b, Vec::Constant(4, 0.25), 0.25, 1.0, 0.1) == b);
  // frozen loads: closed form b_n = b_0 - n eta dt (load - kappa)
  Vec x(4);
  x << 0.3, -0.2, 0.1, 0.0;
  Vec it = x;
  for (int n = 1; n <= 50; ++n) {
    it = bias_balance_step(it, loads, 0.25, 0.7, 0.1);
    const Vec closed = x - n * 0.07 * (loads.array() - 0.25).matrix();
    EXPECT_LT((it - closed).cwiseAbs().maxCoeff(), 1e-13);
  }
}

TrajectoryConfig small_config(int steps, double dt) {
  TrajectoryConfig c;
  c.dims = dims_of(3, 6, 4, 4, 3);
  c.dims.steps = steps;
  c.dims.dt = dt;
  c.data = random_data(3, 3, 55);
  c.seed = 56;
  return c;
}

TEST(DynamicsTest, TrajectoryBasics) {
  TrajectoryConfig c = small_config(0, 0.1);
  Trace t = run_trajectory(c);
  EXPECT_EQ(t.recorded_steps(), 1);
  EXPECT_EQ(t.params.size(), 1u);
  EXPECT_EQ(t.fields.size(), 1u);

  c = small_config(20, 0.1);
  c.lrs = LearningRates::zeros();
  t = run_trajectory(c);
  ASSERT_EQ(t.recorded_steps(), 21);
  for (const auto& s : t.summary) EXPECT_EQ(s.loss, t.summary[0].loss);

  // deterministic
  c = small_config(10, 0.1);
  const Trace a = run_trajectory(c), b = run_trajectory(c);
  for (int n = 0; n <= 10; ++n) EXPECT_EQ(a.summary[n].loss, b.summary[n].loss);
}

TEST(DynamicsTest, SmallStepLossIsNonIncreasing) {
  TrajectoryConfig c;
  const ProbeTask task = make_probe_task(8, 4, 1.0, 3);
  c.data = task.data;
  c.dims = dims_of(8, 16, 4, 8, 4);
  c.dims.steps = 200;
  c.dims.dt = 1e-3;
  c.lrs = LearningRates{2, 2, 2, 2, 2, 2, 1};
  c.retention = Retention::kSummary;
  const Trace t = run_trajectory(c);
  ASSERT_EQ(t.recorded_steps(), 201);
  for (int n = 0; n < 200; ++n) EXPECT_LE(t.summary[n + 1].loss, t.summary[n].loss + 1e-12) << n;
  EXPECT_LT(t.summary[200].loss, t.summary[0].loss);
}

TEST(DynamicsTest, ExpertPermutationGivesSameLossTrajectory) {
  TrajectoryConfig c = small_config(30, 0.1);
  const ParamState ps = init_params(c.dims, c.init, 99);
  ParamState pp = ps;
  const int perm[4] = {3, 1, 0, 2};
  for (int k = 0; k < 4; ++k) {
    pp.W1[k] = ps.W1[perm[k]];
    pp.W2[k] = ps.W2[perm[k]];
    pp.r.col(k) = ps.r.col(perm[k]);
    pp.b(k) = ps.b(perm[k]);
  }
  c.initial = ps;
  const Trace a = run_trajectory(c);
  c.initial = pp;
  const Trace b = run_trajectory(c);
  for (int n = 0; n <= 30; ++n)
    EXPECT_NEAR(a.summary[n].loss, b.summary[n].loss, 1e-12 * (1 + a.summary[n].loss));
}

TEST(DynamicsTest, AllActiveTopKEqualsSoftWithZeroBias) {
  TrajectoryConfig c = small_config(25, 0.1);
  ParamState ps = init_params(c.dims, c.init, 5);
  ps.b.setZero();
  c.initial = ps;
  c.bias = BiasMode::kFrozen;
  const Trace soft = run_trajectory(c);
  c.gate = GateMode::kTopK;
  c.dims.kappa = 1.0;
  const Trace topk = run_trajectory(c);
  for (int n = 0; n <= 25; ++n) EXPECT_EQ(soft.summary[n].loss, topk.summary[n].loss);
}

TEST(DynamicsTest, DivergenceIsReportedWithPartialTrace) {
  TrajectoryConfig c = small_config(200, 1.0);
  c.lrs = LearningRates{1e4, 1e4, 1e4, 1e4, 1e4, 1e4, 1};
  const Trace t = run_trajectory(c);
  EXPECT_TRUE(t.diverged);
  EXPECT_GE(t.diverged_step, 0);
  EXPECT_EQ(t.params.size(), t.fields.size());
  EXPECT_LE(t.recorded_steps(), 201);
}

}  // namespace
}  // namespace moelab
