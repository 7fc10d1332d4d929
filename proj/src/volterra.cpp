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

#include "moelab/volterra.hpp"

#include <algorithm>
#include <cmath>

#include "moelab/gate.hpp"

namespace moelab {

double ResidualReport::max_abs() const {
  double m = 0;
  for (const auto& e : entries) m = std::max(m, e.max_abs);
  return m;
}

bool ResidualReport::passed() const {
  return std::all_of(entries.begin(), entries.end(), [](const ResidualEntry& e) { return e.passed(); });
}

void ResidualReport::append(const ResidualReport& o) {
  entries.insert(entries.end(), o.entries.begin(), o.entries.end());
}

namespace {

using LReal = long double;
using LMat = Eigen::Matrix<LReal, Eigen::Dynamic, Eigen::Dynamic>;
using LVec = Eigen::Matrix<LReal, Eigen::Dynamic, 1>;

LMat ld(const Mat& m) { return m.cast<LReal>(); }
LVec ldv(const Vec& v) { return v.cast<LReal>(); }

// Running sum, optionally Kahan-compensated.
struct Accum {
  LMat s, c;
  bool comp = true;
  Accum(Index r, Index k, bool compensated) : s(LMat::Zero(r, k)), c(LMat::Zero(r, k)), comp(compensated) {}
  void add(const LMat& x) {
    if (!comp) {
      s += x;
      return;
    }
    const LMat y = x - c;
    const LMat t = s + y;
    c = (t - s) - y;
    s = t;
  }
};

// Tracks the worst |lhs - rhs| over all (coordinate, step).
struct Worst {
  ResidualEntry e;
  double lhs_max = 0;
  Worst(std::string name, double tol) {
    e.identity = std::move(name);
    e.tolerance = tol;
  }
  void see(const LMat& lhs, const LMat& rhs, int step) {
    const LMat r = (lhs - rhs).cwiseAbs();
    Index i, j;
    const double m = static_cast<double>(r.maxCoeff(&i, &j));
    lhs_max = std::max(lhs_max, static_cast<double>(lhs.cwiseAbs().maxCoeff()));
    if (!(m <= e.max_abs)) {  // also catches NaN
      e.max_abs = std::isnan(m) ? std::numeric_limits<double>::infinity() : m;
      e.index = static_cast<long long>(j) * r.rows() + i;
      e.step = step;
    }
  }
  ResidualReport done() {
    e.max_rel = lhs_max > 0 ? e.max_abs / lhs_max : e.max_abs;
    return ResidualReport{{e}};
  }
};

double tolerance(const Trace& tr, const VolterraOptions& opt) {
  const int steps = std::max(1, static_cast<int>(tr.fields.size()) - 1);
  return opt.abs_tol * std::sqrt(static_cast<double>(steps));
}

LMat flatten(const ParamState& ps, const std::string& block) {
  auto stackv = [](const std::vector<Mat>& v) {
    Index n = 0;
    for (const auto& m : v) n += m.size();
    LMat out(n, 1);
    Index o = 0;
    for (const auto& m : v) {
      out.middleRows(o, m.size()) = ld(m).reshaped();
      o += m.size();
    }
    return out;
  };
  if (block == "W0") return ld(ps.W0).reshaped();
  if (block == "W1") return stackv(ps.W1);
  if (block == "W2") return stackv(ps.W2);
  if (block == "w3") return ldv(ps.w3);
  if (block == "r") return ld(ps.r).reshaped();
  if (block == "b") return ldv(ps.b);
  throw ConfigError("unknown parameter block '" + block + "'");
}

}  // namespace

ResidualReport check_telescoping(const Trace& tr, const std::string& block,
                                 const VolterraOptions& opt) {
  flatten(tr.init, block);  // validates the name
  if (!tr.has_params() || !tr.has_fields())
    throw CapabilityError("telescoping check needs full parameter and field snapshots");
  const auto& cfg = tr.config;
  const auto& lr = cfg.lrs;
  const LReal dt = cfg.dims.dt, g0 = lr.gamma0;
  const int T = static_cast<int>(std::min(tr.params.size(), tr.fields.size()));
  std::string name = "telescoping:" + block;
  if (block == "b" && cfg.bias == BiasMode::kBalance) name += ":balance";
  if (block == "b" && cfg.bias == BiasMode::kFrozen) name += ":frozen";
  Worst w(name, tolerance(tr, opt));
  const LMat theta0 = flatten(tr.params[0], block);
  Accum acc(theta0.rows(), 1, opt.compensated);
  w.see(theta0, flatten(tr.init, block), 0);
  for (int n = 1; n < T; ++n) {
    const int m = n - 1;
    const FieldState& fs = tr.fields[m];
    if (block == "b" && cfg.bias != BiasMode::kGradient) {
      if (cfg.bias == BiasMode::kBalance) {
        const Vec loads = expert_loads(fs.w, fs.active, cfg.gate);
        const LMat ex = ldv(loads).array() - static_cast<LReal>(cfg.dims.kappa);
        acc.add(-static_cast<LReal>(cfg.eta_bias) * dt * ex);
      }
    } else {
      const GradState g = grad_blocks(tr.params[m], cfg.data, cfg.dims, fs);
      const double eta = block == "W0" ? lr.eta0 : block == "W1" ? lr.eta1 : block == "W2" ? lr.eta2
                       : block == "w3" ? lr.eta3 : block == "r" ? lr.eta_r : lr.eta_b;
      acc.add(-(g0 * static_cast<LReal>(eta) * dt) * flatten(g, block));
    }
    w.see(flatten(tr.params[n], block), theta0 + acc.s, n);
  }
  return w.done();
}

ResidualReport check_volterra_field(const Trace& tr, const std::string& field,
                                    const VolterraOptions& opt) {
  if (field != "h0" && field != "u" && field != "m" && field != "p" && field != "f")
    throw ConfigError("unknown Volterra field '" + field + "'");
  if (!tr.has_fields()) throw CapabilityError("Volterra checks need field snapshots");
  const auto& cfg = tr.config;
  const auto& d = cfg.dims;
  const auto& lr = cfg.lrs;
  const auto& th = tr.init;
  const int T = static_cast<int>(tr.fields.size());
  const int P = d.P;
  const LReal dt = d.dt, g0 = lr.gamma0, N = d.N, Ne = d.Ne, E = d.E, D = d.D;
  Worst w("volterra:" + field, tolerance(tr, opt));

  std::vector<LVec> c(T);  // Delta / P as a column
  for (int m = 0; m < T; ++m) c[m] = ldv(tr.fields[m].Delta) / static_cast<LReal>(P);

  if (field == "h0") {
    const LMat Kx = ld(cfg.data.Kx);
    const LMat drive = ld(th.W0) * ld(cfg.data.x) / std::sqrt(D);
    Accum acc(d.N, P, opt.compensated);
    const LReal k = g0 * static_cast<LReal>(lr.eta0) * dt / D;
    for (int n = 0; n < T; ++n) {
      if (n > 0) {
        const FieldState& fm = tr.fields[n - 1];
        acc.add(k * (ld(fm.q) * c[n - 1].asDiagonal()) * Kx);
      }
      w.see(ld(tr.fields[n].h0), drive + acc.s, n);
    }
    return w.done();
  }

  // Gram objects between steps m and n, recomputed here.
  auto H0 = [&](int m, int n) { return LMat(ld(tr.fields[m].h0).transpose() * ld(tr.fields[n].h0) / N); };
  auto H3 = [&](int m, int n) {
    return LMat(ld(tr.fields[m].phi_h3).transpose() * ld(tr.fields[n].phi_h3) / N);
  };

  if (field == "f") {
    const LReal k = g0 * static_cast<LReal>(lr.eta3) * dt;
    for (int n = 0; n < T; ++n) {
      const FieldState& fn = tr.fields[n];
      const LMat drive = (ld(fn.phi_h3).transpose() * ldv(th.w3)) / N;
      Accum acc(P, 1, opt.compensated);
      for (int m = 0; m < n; ++m) acc.add(k * H3(m, n).transpose() * c[m] / N);
      w.see(ldv(fn.f), drive + acc.s, n);
    }
    return w.done();
  }

  if (field == "p") {
    const LReal k = g0 * static_cast<LReal>(lr.eta_r) * dt * std::pow(N, 2 - 2 * static_cast<LReal>(d.gamma)) / E;
    for (int n = 0; n < T; ++n) {
      const FieldState& fn = tr.fields[n];
      const LMat drive = std::pow(N, -static_cast<LReal>(d.gamma)) * ld(th.r).transpose() * ld(fn.h0);
      Accum acc(d.E, P, opt.compensated);
      for (int m = 0; m < n; ++m) {
        const FieldState& fm = tr.fields[m];
        // row k: (c * A_k * sigma'_k)^T H0(m, n)
        LMat a = ld(fm.A).cwiseProduct(ld(fm.sigma_d));
        a = a * c[m].asDiagonal();
        acc.add(k * a * H0(m, n));
      }
      w.see(ld(fn.p), drive + acc.s, n);
    }
    return w.done();
  }

  // Expert fields: u (Ne x P) and m (N x P) per expert, stacked by rows.
  const bool is_u = field == "u";
  const Index rows = is_u ? d.Ne : d.N;
  const LReal k = g0 * static_cast<LReal>(is_u ? lr.eta1 : lr.eta2) * dt / E;
  for (int n = 0; n < T; ++n) {
    const FieldState& fn = tr.fields[n];
    LMat lhs(rows * d.E, P), rhs(rows * d.E, P);
    for (int e = 0; e < d.E; ++e) {
      LMat drive;
      if (is_u) drive = ld(th.W1[e]) * ld(fn.h0) / std::sqrt(N);
      else drive = ld(th.W2[e]) * ld(fn.phi_u[e]) / std::sqrt(Ne);
      Accum acc(rows, P, opt.compensated);
      for (int m = 0; m < n; ++m) {
        const FieldState& fm = tr.fields[m];
        const LVec cw = c[m].cwiseProduct(ldv(fm.w.row(e).transpose()));
        if (is_u) {
          acc.add(k * (ld(fm.delta[e]) * cw.asDiagonal()) * H0(m, n));
        } else {
          const LMat Phi = ld(fm.phi_u[e]).transpose() * ld(fn.phi_u[e]) / Ne;
          acc.add(k * (ld(fm.g) * cw.asDiagonal()) * Phi);
        }
      }
      lhs.middleRows(e * rows, rows) = ld(is_u ? fn.u[e] : fn.m[e]);
      rhs.middleRows(e * rows, rows) = drive + acc.s;
    }
    w.see(lhs, rhs, n);
  }
  return w.done();
}

ResidualReport check_all(const Trace& tr, const VolterraOptions& opt) {
  ResidualReport r;
  for (const char* b : {"W0", "W1", "W2", "w3", "r", "b"}) r.append(check_telescoping(tr, b, opt));
  for (const char* f : {"h0", "u", "m", "p", "f"}) r.append(check_volterra_field(tr, f, opt));
  return r;
}

}  // namespace moelab
