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

#include "moelab/gate.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace moelab {

namespace {

int topk_count(double kappa, int E) {
  const double ke = kappa * E;
  const long k = std::lround(ke);
  if (k < 1 || std::abs(ke - static_cast<double>(k)) > 1e-9)
    throw ConfigError("top-K gate needs kappa*E to be a positive integer, got " +
                      std::to_string(ke));
  return static_cast<int>(k);
}

}  // namespace

GateResult gate(const Mat& p, const Vec& b, const Activation& sigma,
                GateMode mode, double kappa) {
  const Index E = p.rows(), P = p.cols();
  if (b.size() != E) throw ShapeError("gate: bias length does not match E");
  GateResult out;
  const Mat sp = sigma.f(p);
  const Mat sd = sigma.df(p);
  if (mode == GateMode::kSoft) {
    out.w = sp.colwise() + b;
    out.active = Mat::Ones(E, P);
    out.sigma_d = sd;
    return out;
  }
  const int K = topk_count(kappa, static_cast<int>(E));
  out.w = Mat::Zero(E, P);
  out.active = Mat::Zero(E, P);
  out.sigma_d = Mat::Zero(E, P);
  std::vector<Index> order(E);
  for (Index mu = 0; mu < P; ++mu) {
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index c) {
      return sp(a, mu) + b(a) > sp(c, mu) + b(c);
    });
    for (int j = 0; j < K; ++j) {
      const Index k = order[j];
      out.active(k, mu) = 1.0;
      out.w(k, mu) = sp(k, mu);
      out.sigma_d(k, mu) = sd(k, mu);
    }
  }
  return out;
}

Vec bias_balance_step(const Vec& b, const Vec& loads, double kappa,
                      double eta_bias, double dt) {
  if (b.size() != loads.size()) throw ShapeError("bias_balance_step: size mismatch");
  return b - (eta_bias * dt) * (loads.array() - kappa).matrix();
}

Vec expert_loads(const Mat& w, const Mat& active, GateMode mode) {
  if (mode == GateMode::kTopK) return active.rowwise().mean();
  return w.rowwise().mean().cwiseMax(0.0).cwiseMin(1.0);
}

Vec expert_loads(const GateResult& g, GateMode mode) {
  return expert_loads(g.w, g.active, mode);
}

}  // namespace moelab
