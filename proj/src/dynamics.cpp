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

#include <cmath>

namespace moelab {

void LearningRates::validate() const {
  for (double v : {eta0, eta1, eta2, eta3, eta_r, eta_b, gamma0})
    require(std::isfinite(v) && v >= 0, "learning rates must be finite and >= 0");
}

LearningRates LearningRates::zeros() {
  LearningRates l;
  l.eta0 = l.eta1 = l.eta2 = l.eta3 = l.eta_r = l.eta_b = 0.0;
  return l;
}

const char* block_name(int i) {
  static const char* names[] = {"W0", "W1", "W2", "w3", "r", "b"};
  return names[i];
}

namespace {

// Per-block descent directions -<Delta grad f>. Each returns the quantity
// that is *added* to theta after multiplying by gamma0 * eta * dt.
struct Signals {
  const Dataset& data;
  const ModelDims& dims;
  const FieldState& fs;
  Vec c;  // Delta / P

  Signals(const Dataset& d, const ModelDims& m, const FieldState& f)
      : data(d), dims(m), fs(f), c(f.Delta / static_cast<double>(f.Delta.size())) {}

  Vec cw(int k) const { return c.cwiseProduct(fs.w.row(k).transpose()); }

  Vec w3() const { return fs.phi_h3 * c / static_cast<double>(dims.N); }
  Mat W2(int k) const {
    const double s = 1.0 / (dims.E * std::sqrt(static_cast<double>(dims.Ne)));
    return s * (fs.g * cw(k).asDiagonal()) * fs.phi_u[k].transpose();
  }
  Mat W1(int k) const {
    const double s = 1.0 / (dims.E * std::sqrt(static_cast<double>(dims.N)));
    return s * (fs.delta[k] * cw(k).asDiagonal()) * fs.h0.transpose();
  }
  Vec r(int k) const {
    const double s = std::pow(static_cast<double>(dims.N), 1.0 - dims.gamma) / dims.E;
    const Vec a = c.cwiseProduct(fs.A.row(k).transpose()).cwiseProduct(fs.sigma_d.row(k).transpose());
    return s * (fs.h0 * a);
  }
  // d w / d b is 1 in soft mode and 0 under the top-K mask.
  double b(int k) const {
    if (fs.mode != GateMode::kSoft) return 0.0;
    const double s = static_cast<double>(dims.N) / dims.E;
    return s * c.cwiseProduct(fs.A.row(k).transpose()).sum();
  }
  Mat W0() const {
    const double s = 1.0 / std::sqrt(static_cast<double>(data.D()));
    return s * (fs.q * c.asDiagonal()) * data.x.transpose();
  }
};

void check_update(const Mat& m, const char* block, int step) {
  if (!m.allFinite()) throw DivergenceError(std::string("non-finite update of ") + block, step);
}

}  // namespace

GradState grad_blocks(const ParamState& ps, const Dataset& data,
                      const ModelDims& dims, const FieldState& fs) {
  if (!fs.has_backward) throw StateError("grad_blocks: backward fields are missing");
  Signals s(data, dims, fs);
  GradState g;
  g.W0 = -s.W0();
  g.W1.resize(dims.E);
  g.W2.resize(dims.E);
  g.r.resize(ps.r.rows(), ps.r.cols());
  g.b.resize(dims.E);
  for (int k = 0; k < dims.E; ++k) {
    g.W1[k] = -s.W1(k);
    g.W2[k] = -s.W2(k);
    g.r.col(k) = -s.r(k);
    g.b(k) = -s.b(k);
  }
  g.w3 = -s.w3();
  return g;
}

ParamState euler_step(const ParamState& ps, const GradState& g,
                      const LearningRates& lrs, double dt, int step) {
  require(dt > 0, "euler_step: dt must be > 0");
  const double k = lrs.gamma0 * dt;
  ParamState out = ps;
  auto upd = [&](Mat& th, const Mat& gr, double eta, const char* name) {
    if (eta == 0.0) return;
    th.noalias() -= (k * eta) * gr;
    check_update(th, name, step);
  };
  auto updv = [&](Vec& th, const Vec& gr, double eta, const char* name) {
    if (eta == 0.0) return;
    th.noalias() -= (k * eta) * gr;
    check_update(th, name, step);
  };
  upd(out.W0, g.W0, lrs.eta0, "W0");
  for (size_t e = 0; e < out.W1.size(); ++e) {
    upd(out.W1[e], g.W1[e], lrs.eta1, "W1");
    upd(out.W2[e], g.W2[e], lrs.eta2, "W2");
  }
  updv(out.w3, g.w3, lrs.eta3, "w3");
  upd(out.r, g.r, lrs.eta_r, "r");
  updv(out.b, g.b, lrs.eta_b, "b");
  return out;
}

void euler_step_inplace(ParamState& ps, const Dataset& data, const ModelDims& dims,
                        const FieldState& fs, const LearningRates& lrs,
                        BiasMode mode, int step) {
  if (!fs.has_backward) throw StateError("euler_step_inplace: backward fields are missing");
  Signals s(data, dims, fs);
  const double k = lrs.gamma0 * dims.dt;
  // Every signal is evaluated from the same fields before anything moves.
  Vec b_sig(dims.E);
  Mat r_sig(ps.r.rows(), ps.r.cols());
  for (int e = 0; e < dims.E; ++e) {
    b_sig(e) = s.b(e);
    r_sig.col(e) = s.r(e);
  }
  if (lrs.eta0 != 0.0) {
    ps.W0.noalias() += (k * lrs.eta0) * s.W0();
    check_update(ps.W0, "W0", step);
  }
  const double c1 = k * lrs.eta1 / (dims.E * std::sqrt(static_cast<double>(dims.N)));
  const double c2 = k * lrs.eta2 / (dims.E * std::sqrt(static_cast<double>(dims.Ne)));
  for (int e = 0; e < dims.E; ++e) {
    const Vec cw = s.cw(e);
    if (c1 != 0.0) ps.W1[e].noalias() += (fs.delta[e] * (c1 * cw).asDiagonal()) * fs.h0.transpose();
    if (c2 != 0.0) ps.W2[e].noalias() += (fs.g * (c2 * cw).asDiagonal()) * fs.phi_u[e].transpose();
  }
  for (int e = 0; e < dims.E; ++e) {
    check_update(ps.W1[e], "W1", step);
    check_update(ps.W2[e], "W2", step);
  }
  if (lrs.eta3 != 0.0) {
    ps.w3.noalias() += (k * lrs.eta3) * s.w3();
    check_update(ps.w3, "w3", step);
  }
  if (lrs.eta_r != 0.0) {
    ps.r.noalias() += (k * lrs.eta_r) * r_sig;
    check_update(ps.r, "r", step);
  }
  if (mode == BiasMode::kGradient && lrs.eta_b != 0.0) {
    ps.b.noalias() += (k * lrs.eta_b) * b_sig;
    check_update(ps.b, "b", step);
  }
}

namespace {

StepSummary summarize(int n, double dt, const ParamState& ps, const FieldState& fs) {
  StepSummary s;
  s.step = n;
  s.time = n * dt;
  s.loss = fs.loss;
  s.mean_abs_delta = fs.Delta.cwiseAbs().mean();
  s.f = fs.f;
  s.Delta = fs.Delta;
  double w1 = 0, w2 = 0;
  for (const auto& m : ps.W1) w1 += m.squaredNorm();
  for (const auto& m : ps.W2) w2 += m.squaredNorm();
  s.norms = {ps.W0.norm(), std::sqrt(w1), std::sqrt(w2), ps.w3.norm(), ps.r.norm(), ps.b.norm()};
  return s;
}

double max_field(const FieldState& fs) {
  double m = std::max({fs.h0.cwiseAbs().maxCoeff(), fs.h3.cwiseAbs().maxCoeff(),
                       fs.f.cwiseAbs().maxCoeff(), fs.p.cwiseAbs().maxCoeff(),
                       fs.q.cwiseAbs().maxCoeff()});
  for (const auto& u : fs.u) m = std::max(m, u.cwiseAbs().maxCoeff());
  for (const auto& x : fs.m) m = std::max(m, x.cwiseAbs().maxCoeff());
  return m;
}

}  // namespace

Trace run_trajectory(const TrajectoryConfig& cfg) {
  cfg.dims.validate(cfg.gate);
  cfg.lrs.validate();
  require(cfg.data.P() == cfg.dims.P && cfg.data.D() == cfg.dims.D,
          "run_trajectory: dataset shape does not match dims");
  Trace tr;
  tr.config = cfg;
  tr.config.observer = nullptr;
  ParamState ps = cfg.initial ? *cfg.initial : init_params(cfg.dims, cfg.init, cfg.seed);
  tr.init = ps;
  const int L = cfg.dims.steps;
  tr.summary.reserve(L + 1);
  for (int n = 0; n <= L; ++n) {
    FieldState fs;
    try {
      fs = evaluate(ps, cfg.data, cfg.act, cfg.gate, cfg.dims, cfg.loss);
      if (max_field(fs) > cfg.divergence_threshold)
        throw DivergenceError("field magnitude above threshold", n);
    } catch (const Error& e) {
      if (!dynamic_cast<const DivergenceError*>(&e) &&
          !dynamic_cast<const NumericOverflowError*>(&e))
        throw;
      tr.diverged = true;
      tr.diverged_step = n;
      tr.error = e.what();
      break;
    }
    tr.summary.push_back(summarize(n, cfg.dims.dt, ps, fs));
    if (cfg.observer) cfg.observer(n, ps, fs);
    if (cfg.retention == Retention::kFull) tr.params.push_back(ps);
    if (n < L) {
      try {
        // loads are read before the parameters move
        Vec loads;
        if (cfg.bias == BiasMode::kBalance) loads = expert_loads(fs.w, fs.active, cfg.gate);
        euler_step_inplace(ps, cfg.data, cfg.dims, fs, cfg.lrs, cfg.bias, n);
        if (cfg.bias == BiasMode::kBalance)
          ps.b = bias_balance_step(ps.b, loads, cfg.dims.kappa, cfg.eta_bias, cfg.dims.dt);
      } catch (const DivergenceError& e) {
        tr.diverged = true;
        tr.diverged_step = n;
        tr.error = e.what();
        if (cfg.retention != Retention::kSummary) tr.fields.push_back(std::move(fs));
        break;
      }
    }
    if (cfg.retention != Retention::kSummary) tr.fields.push_back(std::move(fs));
  }
  return tr;
}

}  // namespace moelab
