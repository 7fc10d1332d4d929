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
#include <numeric>

#include "moelab/tasks.hpp"
#include "moelab/volterra.hpp"
#include "test_util.hpp"

namespace moelab {
namespace {

using testing::dims_of;
using testing::random_data;

TrajectoryConfig base(int steps, std::uint64_t seed = 21) {
  TrajectoryConfig c;
  c.dims = dims_of(2, 16, 4, 8, 3);
  c.dims.steps = steps;
  c.dims.dt = 0.1;
  c.data = random_data(2, 3, seed);
  c.seed = seed + 1;
  return c;
}

// Independent recomputation of theta^n for w3, b (gradient mode) and W0 by
// scalar loops in long double: every signal is rebuilt from the recorded
// fields with its defining formula.
struct OracleTel {
  double w3 = 0, b = 0, W0 = 0;
};

OracleTel oracle_telescoping(const Trace& tr) {
  const auto& d = tr.config.dims;
  const auto& lr = tr.config.lrs;
  const auto& x = tr.config.data.x;
  using LD = long double;
  std::vector<LD> w3(d.N), b(d.E), W0(d.N * d.D);
  for (int i = 0; i < d.N; ++i) w3[i] = tr.init.w3(i);
  for (int k = 0; k < d.E; ++k) b[k] = tr.init.b(k);
  for (int i = 0; i < d.N; ++i)
    for (int j = 0; j < d.D; ++j) W0[i * d.D + j] = tr.init.W0(i, j);
  OracleTel o;
  for (size_t n = 1; n < tr.params.size(); ++n) {
    const FieldState& fs = tr.fields[n - 1];
    const LD k = static_cast<LD>(lr.gamma0) * d.dt;
    for (int i = 0; i < d.N; ++i) {
      LD s = 0;
      for (int mu = 0; mu < d.P; ++mu) s += static_cast<LD>(fs.Delta(mu)) * std::tanh(static_cast<LD>(fs.h3(i, mu)));
      w3[i] += k * lr.eta3 * s / (d.P * d.N);
      for (int j = 0; j < d.D; ++j) {
        LD t = 0;
        for (int mu = 0; mu < d.P; ++mu) t += static_cast<LD>(fs.Delta(mu)) * fs.q(i, mu) * x(j, mu);
        W0[i * d.D + j] += k * lr.eta0 * t / (d.P * std::sqrt(static_cast<LD>(d.D)));
      }
    }
    for (int e = 0; e < d.E; ++e) {
      LD s = 0;
      for (int mu = 0; mu < d.P; ++mu) s += static_cast<LD>(fs.Delta(mu)) * fs.A(e, mu);
      b[e] += k * lr.eta_b * s * d.N / (static_cast<LD>(d.P) * d.E);
    }
    const ParamState& ps = tr.params[n];
    for (int i = 0; i < d.N; ++i) {
      o.w3 = std::max(o.w3, static_cast<double>(std::abs(w3[i] - ps.w3(i))));
      for (int j = 0; j < d.D; ++j)
        o.W0 = std::max(o.W0, static_cast<double>(std::abs(W0[i * d.D + j] - ps.W0(i, j))));
    }
    for (int e = 0; e < d.E; ++e) o.b = std::max(o.b, static_cast<double>(std::abs(b[e] - ps.b(e))));
  }
  return o;
}

// f identity by loops: f^n = <w3^0, phi(h3^n)>/N + dt g0 eta3 sum_m <c^m H3(m,n)>/N.
double oracle_f(const Trace& tr) {
  const auto& d = tr.config.dims;
  using LD = long double;
  double worst = 0;
  for (size_t n = 0; n < tr.fields.size(); ++n)
    for (int nu = 0; nu < d.P; ++nu) {
      LD f = 0;
      for (int i = 0; i < d.N; ++i) f += static_cast<LD>(tr.init.w3(i)) * std::tanh(static_cast<LD>(tr.fields[n].h3(i, nu)));
      f /= d.N;
      for (size_t m = 0; m < n; ++m)
        for (int mu = 0; mu < d.P; ++mu) {
          LD h = 0;
          for (int i = 0; i < d.N; ++i)
            h += std::tanh(static_cast<LD>(tr.fields[m].h3(i, mu))) * std::tanh(static_cast<LD>(tr.fields[n].h3(i, nu)));
          f += static_cast<LD>(tr.config.lrs.gamma0) * tr.config.lrs.eta3 * d.dt *
               tr.fields[m].Delta(mu) / d.P * h / (static_cast<LD>(d.N) * d.N);
        }
      worst = std::max(worst, static_cast<double>(std::abs(f - tr.fields[n].f(nu))));
    }
  return worst;
}

TEST(VolterraTest, SingleStepAndFrozenTrajectories) {
  Trace t = run_trajectory(base(1));
  for (const char* b : {"W0", "W1", "W2", "w3", "r", "b"}) {
    const auto r = check_telescoping(t, b);
    EXPECT_LT(r.max_abs(), 1e-15) << b;  // one rounding of the update
  }
  TrajectoryConfig c = base(30);
  c.lrs = LearningRates::zeros();
  t = run_trajectory(c);
  for (const char* b : {"W0", "W1", "W2", "w3", "r", "b"}) EXPECT_EQ(check_telescoping(t, b).max_abs(), 0.0) << b;
  for (const char* f : {"h0", "u", "m", "p", "f"}) EXPECT_LT(check_volterra_field(t, f).max_abs(), 1e-14) << f;
}

TEST(VolterraTest, StepZeroIsInitConsistency) {
  const Trace t = run_trajectory(base(0));
  for (const char* f : {"h0", "u", "m", "p", "f"}) {
    const auto r = check_volterra_field(t, f);
    EXPECT_LT(r.max_abs(), 1e-14) << f;
    EXPECT_EQ(r.entries[0].step == 0 || r.entries[0].step == -1, true);
  }
}

TEST(VolterraTest, LongRunMatchesExtendedPrecisionOracle) {
  TrajectoryConfig c = base(200, 5);
  c.lrs.eta0 = 0.5;
  c.lrs.eta_r = 2.0;
  c.init.sr = 0.5;
  const Trace t = run_trajectory(c);
  ASSERT_FALSE(t.diverged);
  EXPECT_GT(std::abs(t.summary.back().loss - t.summary.front().loss), 1e-3);  // actually trained
  const ResidualReport all = check_all(t);
  ASSERT_EQ(all.entries.size(), 11u);
  for (const auto& e : all.entries) {
    EXPECT_LT(e.max_abs, 1e-10) << e.identity;
    EXPECT_TRUE(e.passed()) << e.identity;
    EXPECT_GE(e.max_rel, 0.0);
  }
  const OracleTel o = oracle_telescoping(t);
  EXPECT_LT(o.w3, 1e-10);
  EXPECT_LT(o.W0, 1e-10);
  EXPECT_LT(o.b, 1e-10);
  EXPECT_NEAR(check_telescoping(t, "w3").max_abs(), o.w3, 1e-13);
  EXPECT_NEAR(check_telescoping(t, "b").max_abs(), o.b, 1e-13);
  const double of = oracle_f(t);
  EXPECT_LT(of, 1e-10);
  EXPECT_NEAR(check_volterra_field(t, "f").max_abs(), of, 1e-13);
}

TEST(VolterraTest, BalanceFrozenAndTopKModes) {
  for (BiasMode bm : {BiasMode::kBalance, BiasMode::kFrozen}) {
    TrajectoryConfig c = base(80, 9);
    c.bias = bm;
    c.eta_bias = 0.7;
    const Trace t = run_trajectory(c);
    const auto r = check_telescoping(t, "b");
    EXPECT_LT(r.max_abs(), 1e-10);
    EXPECT_NE(r.entries[0].identity.find(bm == BiasMode::kBalance ? "balance" : "frozen"), std::string::npos);
    if (bm == BiasMode::kFrozen) EXPECT_EQ(r.max_abs(), 0.0);
    EXPECT_TRUE(check_all(t).passed());
  }
  TrajectoryConfig c = base(80, 10);
  c.gate = GateMode::kTopK;
  c.dims.kappa = 0.5;
  c.bias = BiasMode::kBalance;
  c.eta_bias = 0.3;
  const Trace t = run_trajectory(c);
  const ResidualReport r = check_all(t);
  for (const auto& e : r.entries) EXPECT_LT(e.max_abs, 1e-10) << e.identity;
}

TEST(VolterraTest, SingleSnapshotCorruptionIsDetected) {
  const Trace clean = run_trajectory(base(100, 13));
  const double eps = 1e-6;
  auto corrupt = [&](auto&& edit) {
    Trace t = clean;
    edit(t);
    return t;
  };
  EXPECT_GE(check_telescoping(corrupt([&](Trace& t) { t.params[40].W1[2](3, 5) += eps; }), "W1").max_abs(), eps * 0.999);
  EXPECT_GE(check_telescoping(corrupt([&](Trace& t) { t.params[99].b(1) -= eps; }), "b").max_abs(), eps * 0.999);
  EXPECT_GE(check_telescoping(corrupt([&](Trace& t) { t.params[7].r(0, 0) += eps; }), "r").max_abs(), eps * 0.999);
  const Trace th = corrupt([&](Trace& t) { t.fields[50].h0(4, 1) += eps; });
  const auto rh = check_volterra_field(th, "h0");
  EXPECT_GE(rh.max_abs(), eps * 0.999);
  EXPECT_EQ(rh.entries[0].step, 50);
  EXPECT_EQ(rh.entries[0].index, 1 * 16 + 4);
  EXPECT_FALSE(rh.passed());
  EXPECT_GE(check_volterra_field(corrupt([&](Trace& t) { t.fields[60].u[1](2, 0) += eps; }), "u").max_abs(), eps * 0.999);
  EXPECT_GE(check_volterra_field(corrupt([&](Trace& t) { t.fields[61].m[3](9, 2) += eps; }), "m").max_abs(), eps * 0.999);
  EXPECT_GE(check_volterra_field(corrupt([&](Trace& t) { t.fields[62].p(0, 1) += eps; }), "p").max_abs(), eps * 0.999);
  EXPECT_GE(check_volterra_field(corrupt([&](Trace& t) { t.fields[63].f(2) += eps; }), "f").max_abs(), eps * 0.999);
}

TEST(VolterraTest, FResidualInvariantUnderCoordinatePermutation) {
  TrajectoryConfig c = base(60, 17);
  const Trace a = run_trajectory(c);
  std::vector<int> perm(c.dims.N);
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  std::swap(perm[0], perm[5]);
  const ParamState& p = a.init;
  ParamState q = p;
  for (int i = 0; i < c.dims.N; ++i) {
    q.W0.row(i) = p.W0.row(perm[i]);
    q.w3(i) = p.w3(perm[i]);
    q.r.row(i) = p.r.row(perm[i]);
    for (int e = 0; e < c.dims.E; ++e) {
      q.W1[e].col(i) = p.W1[e].col(perm[i]);
      q.W2[e].row(i) = p.W2[e].row(perm[i]);
    }
  }
  c.initial = q;
  const Trace b = run_trajectory(c);
  EXPECT_NEAR(b.summary.back().loss, a.summary.back().loss, 1e-13);
  EXPECT_NEAR(check_volterra_field(a, "f").max_abs(), check_volterra_field(b, "f").max_abs(), 1e-14);
}

TEST(VolterraTest, ErrorsAndCapabilities) {
  TrajectoryConfig c = base(5);
  const Trace full = run_trajectory(c);
  EXPECT_THROW(check_telescoping(full, "W9"), ConfigError);
  EXPECT_THROW(check_volterra_field(full, "q"), ConfigError);
  c.retention = Retention::kFields;
  const Trace fields = run_trajectory(c);
  EXPECT_THROW(check_telescoping(fields, "W0"), CapabilityError);
  EXPECT_TRUE(check_volterra_field(fields, "u").passed());
  c.retention = Retention::kSummary;
  EXPECT_THROW(check_volterra_field(run_trajectory(c), "h0"), CapabilityError);
  VolterraOptions plain;
  plain.compensated = false;
  EXPECT_LT(check_telescoping(full, "W2", plain).max_abs(), 1e-12);
}

}  // namespace
}  // namespace moelab
