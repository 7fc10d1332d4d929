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

#include "moelab/model.hpp"

#include <cmath>

#include "moelab/gate.hpp"
#include "moelab/rng.hpp"

namespace moelab {

void ModelDims::validate(GateMode mode) const {
  require(D >= 1 && N >= 1 && E >= 1 && Ne >= 1 && P >= 1,
          "dims: D, N, E, Ne, P must all be >= 1");
  require(steps >= 0, "dims: steps must be >= 0");
  require(kappa > 0 && kappa <= 1, "dims: kappa must lie in (0, 1]");
  require(dt > 0 && std::isfinite(dt), "dims: dt must be > 0");
  require(gamma >= 0 && std::isfinite(gamma), "dims: gamma must be >= 0");
  if (mode == GateMode::kTopK) active_experts();
}

int ModelDims::active_experts() const {
  const double ke = kappa * E;
  const long k = std::lround(ke);
  require(k >= 1 && std::abs(ke - static_cast<double>(k)) < 1e-9,
          "dims: kappa*E must be a positive integer in top-K mode");
  return static_cast<int>(k);
}

Dataset Dataset::make(Mat x, Vec y) {
  if (x.cols() != y.size()) throw ShapeError("dataset: x has " + std::to_string(x.cols()) +
                                             " columns but y has " + std::to_string(y.size()));
  Dataset d;
  d.Kx = x.transpose() * x;
  d.x = std::move(x);
  d.y = std::move(y);
  return d;
}

InitScheme InitScheme::zeros() {
  InitScheme s;
  s.name = "zeros";
  s.s0 = s.s1 = s.s2 = s.s3 = s.sr = s.sb = 0.0;
  return s;
}

InitScheme InitScheme::router_zero() {
  InitScheme s;
  s.name = "router-zero";
  s.sr = 0.0;
  return s;
}

bool ParamState::all_finite() const {
  if (!W0.allFinite() || !w3.allFinite() || !r.allFinite() || !b.allFinite()) return false;
  for (const auto& m : W1)
    if (!m.allFinite()) return false;
  for (const auto& m : W2)
    if (!m.allFinite()) return false;
  return true;
}

namespace {

void draw(Mat& m, Index rows, Index cols, double sd, std::uint64_t seed,
          const char* label, std::uint64_t k = 0) {
  m = Mat::Zero(rows, cols);
  if (sd == 0.0) return;
  Rng rng = make_stream(seed, label, k);
  fill_normal(m, rng, sd);
}

void check_finite(const Mat& m, const char* field, int k = -1) {
  if (m.allFinite()) return;
  for (Index mu = 0; mu < m.cols(); ++mu) {
    if (!m.col(mu).allFinite()) {
      std::string where = std::string(field) + " at datum " + std::to_string(mu);
      if (k >= 0) where += " (expert " + std::to_string(k) + ")";
      throw NumericOverflowError("non-finite value in " + where);
    }
  }
}

}  // namespace

ParamState init_params(const ModelDims& dims, const InitScheme& scheme,
                       std::uint64_t seed) {
  dims.validate();
  require(scheme.s0 >= 0 && scheme.s1 >= 0 && scheme.s2 >= 0 && scheme.s3 >= 0 &&
              scheme.sr >= 0 && scheme.sb >= 0,
          "init: standard deviations must be >= 0");
  ParamState ps;
  draw(ps.W0, dims.N, dims.D, scheme.s0, seed, "init/W0");
  ps.W1.resize(dims.E);
  ps.W2.resize(dims.E);
  for (int k = 0; k < dims.E; ++k) {
    draw(ps.W1[k], dims.Ne, dims.N, scheme.s1, seed, "init/W1", k);
    draw(ps.W2[k], dims.N, dims.Ne, scheme.s2, seed, "init/W2", k);
  }
  Mat w3;
  draw(w3, dims.N, 1, scheme.s3, seed, "init/w3");
  ps.w3 = w3.col(0);
  draw(ps.r, dims.N, dims.E, scheme.sr, seed, "init/r");
  Mat b;
  draw(b, dims.E, 1, scheme.sb, seed, "init/b");
  ps.b = b.col(0);
  return ps;
}

FieldState forward(const ParamState& ps, const Dataset& data,
                   const Activations& act, GateMode mode,
                   const ModelDims& dims) {
  const int N = dims.N, E = dims.E;
  if (ps.W0.rows() != N || ps.W0.cols() != data.D() || static_cast<int>(ps.W1.size()) != E ||
      static_cast<int>(ps.W2.size()) != E || ps.r.rows() != N || ps.r.cols() != E ||
      ps.b.size() != E || ps.w3.size() != N)
    throw ShapeError("forward: parameter shapes do not match dims");
  FieldState fs;
  fs.h0 = ps.W0 * data.x / std::sqrt(static_cast<double>(data.D()));
  check_finite(fs.h0, "h0");

  fs.p = std::pow(static_cast<double>(N), -dims.gamma) * (ps.r.transpose() * fs.h0);
  check_finite(fs.p, "p");
  GateResult gr = gate(fs.p, ps.b, act.sigma, mode, dims.kappa);
  fs.w = std::move(gr.w);
  fs.active = std::move(gr.active);
  fs.sigma_d = std::move(gr.sigma_d);
  fs.mode = mode;

  fs.u.resize(E);
  fs.phi_u.resize(E);
  fs.m.resize(E);
  fs.h3 = fs.h0;
  const double inv_sqrt_n = 1.0 / std::sqrt(static_cast<double>(N));
  const double inv_sqrt_ne = 1.0 / std::sqrt(static_cast<double>(dims.Ne));
  for (int k = 0; k < E; ++k) {
    fs.u[k].noalias() = inv_sqrt_n * (ps.W1[k] * fs.h0);
    check_finite(fs.u[k], "u", k);
    fs.phi_u[k] = act.phi.f(fs.u[k]);
    fs.m[k].noalias() = inv_sqrt_ne * (ps.W2[k] * fs.phi_u[k]);
    check_finite(fs.m[k], "m", k);
    fs.h3.noalias() += (fs.m[k] * fs.w.row(k).asDiagonal()) / static_cast<double>(E);
  }
  check_finite(fs.h3, "h3");
  fs.phi_h3 = act.phi.f(fs.h3);
  fs.f = fs.phi_h3.transpose() * ps.w3 / static_cast<double>(N);
  check_finite(fs.f.transpose(), "f");
  return fs;
}

void backward(const ParamState& ps, const Dataset& data, const Activations& act,
              const ModelDims& dims, FieldState& fs) {
  (void)data;
  const int N = dims.N, E = dims.E;
  if (fs.h3.size() == 0 || static_cast<int>(fs.u.size()) != E)
    throw StateError("backward: forward fields are missing");
  const double n = static_cast<double>(N);
  fs.g = (act.phi.df(fs.h3).array().colwise() * ps.w3.array()).matrix() / n;
  fs.gt = fs.g * n;
  fs.z.resize(E);
  fs.delta.resize(E);
  fs.A.resize(E, fs.h3.cols());
  fs.q = fs.g;
  const double inv_sqrt_n = 1.0 / std::sqrt(n);
  const double inv_sqrt_ne = 1.0 / std::sqrt(static_cast<double>(dims.Ne));
  const double router_scale = std::pow(n, -dims.gamma) * n;
  for (int k = 0; k < E; ++k) {
    fs.z[k].noalias() = inv_sqrt_ne * (ps.W2[k].transpose() * fs.g);
    fs.delta[k] = fs.z[k].cwiseProduct(act.phi.df(fs.u[k]));
    fs.A.row(k) = (fs.g.cwiseProduct(fs.m[k])).colwise().sum() / n;
    // router path: sigma'(p) N^-gamma r_k (N A_k); MLP path: w_k W1^T delta / sqrt(N)
    const Vec rcoef = (router_scale * fs.sigma_d.row(k).cwiseProduct(fs.A.row(k))).transpose();
    fs.q.noalias() += (ps.r.col(k) * rcoef.transpose()) / static_cast<double>(E);
    fs.q.noalias() += (inv_sqrt_n / E) * (ps.W1[k].transpose() * fs.delta[k]) *
                      fs.w.row(k).asDiagonal();
  }
  check_finite(fs.q, "q");
  fs.has_backward = true;
}

std::pair<double, Vec> loss_and_delta(const Vec& f, const Vec& y,
                                      const LossKind& kind) {
  if (f.size() != y.size()) throw ShapeError("loss: f and y differ in length");
  if (!f.allFinite() || !y.allFinite()) throw NumericOverflowError("loss: non-finite input");
  const Index P = f.size();
  Vec delta(P);
  double L = 0.0;
  if (!kind.l) {
    delta = y - f;
    L = 0.5 * delta.squaredNorm() / static_cast<double>(P);
  } else {
    for (Index mu = 0; mu < P; ++mu) {
      L += kind.l(f(mu), y(mu));
      delta(mu) = -kind.dl(f(mu), y(mu));
    }
    L /= static_cast<double>(P);
  }
  return {L, delta};
}

FieldState evaluate(const ParamState& params, const Dataset& data,
                    const Activations& act, GateMode mode,
                    const ModelDims& dims, const LossKind& loss) {
  FieldState fs = forward(params, data, act, mode, dims);
  auto [L, delta] = loss_and_delta(fs.f, data.y, loss);
  fs.loss = L;
  fs.Delta = std::move(delta);
  backward(params, data, act, dims, fs);
  return fs;
}

}  // namespace moelab
