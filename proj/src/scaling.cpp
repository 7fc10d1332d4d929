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

#include "moelab/scaling.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <thread>

#include "moelab/io.hpp"
#include "moelab/kernels.hpp"
#include "moelab/rng.hpp"

namespace moelab {

// ---- parameterization --------------------------------------------------

Parameterization Parameterization::table(double gamma) {
  Parameterization p;
  p.name = "table";
  p.gamma = gamma;
  p.blocks[0] = {0, 0, 1, 0, 0};              // embed
  p.blocks[1] = {-0.5, 0, 0, 1, 1};           // expert up
  p.blocks[2] = {-0.5, -1, 0, -1, 1};         // expert down
  p.blocks[3] = {-1, 0, -1, 0, 0};            // readout
  p.blocks[4] = {-gamma, 0, -1, 0, 1};        // router
  p.blocks[5] = {0, 0, 0, 0, 1};              // bias
  p.bias_lr_E_balance = 0;
  return p;
}

Parameterization Parameterization::ntk_baseline(double gamma) {
  Parameterization p = table(gamma);
  p.name = "ntk-baseline";
  p.blocks[2].init_alpha = -0.5;
  return p;
}

Parameterization Parameterization::from_name(const std::string& name, double gamma) {
  if (name == "table") return table(gamma);
  if (name == "ntk-baseline") return ntk_baseline(gamma);
  throw ConfigError("unknown parameterization scheme '" + name + "'");
}

ParameterizedSetup apply_parameterization(const ParamBase& base, const ModelDims& d,
                                          const Parameterization& pz, BiasMode bias) {
  d.validate();
  require(std::isfinite(pz.gamma), "parameterization gamma must be finite");
  require(std::abs(pz.gamma - d.gamma) < 1e-12,
          "parameterization gamma does not match dims.gamma");
  for (const auto& b : pz.blocks)
    for (double e : {b.init_N, b.init_alpha, b.lr_N, b.lr_alpha, b.lr_E})
      require(std::isfinite(e), "parameterization exponents must be finite");
  base.lrs.validate();
  const double N = d.N, E = d.E, Ne = d.Ne, D = d.D, alpha = Ne / N;
  // Raw = unit-model value times c for stds, c^2 for rates.
  const std::array<double, 6> c = {1.0 / std::sqrt(D), 1.0 / std::sqrt(N), 1.0 / std::sqrt(Ne),
                                   1.0 / N, std::pow(N, -d.gamma), 1.0};
  const std::array<double, 6> fold = {1.0 / std::sqrt(D), 1, 1, 1, 1, 1};
  const auto& bi = base.init;
  const std::array<double, 6> s_base = {bi.s0, bi.s1, bi.s2, bi.s3, bi.sr, bi.sb};
  const auto& bl = base.lrs;
  const std::array<double, 6> l_base = {bl.eta0, bl.eta1, bl.eta2, bl.eta3, bl.eta_r,
                                        bias == BiasMode::kBalance ? base.eta_bias : bl.eta_b};
  ParameterizedSetup out;
  std::array<double, 6> s{}, l{};
  for (int i = 0; i < 6; ++i) {
    const BlockRule& r = pz.blocks[i];
    const double lrE = (i == 5 && bias == BiasMode::kBalance) ? pz.bias_lr_E_balance : r.lr_E;
    out.raw_std[i] = s_base[i] * fold[i] * std::pow(N, r.init_N) * std::pow(alpha, r.init_alpha);
    out.raw_lr[i] = l_base[i] * fold[i] * fold[i] * std::pow(N, r.lr_N) * std::pow(alpha, r.lr_alpha) *
                    std::pow(E, lrE);
    s[i] = out.raw_std[i] / c[i];
    l[i] = out.raw_lr[i] / (c[i] * c[i]);
  }
  out.init.name = pz.name;
  out.init.s0 = s[0];
  out.init.s1 = s[1];
  out.init.s2 = s[2];
  out.init.s3 = s[3];
  out.init.sr = s[4];
  out.init.sb = s[5];
  out.lrs.eta0 = l[0];
  out.lrs.eta1 = l[1];
  out.lrs.eta2 = l[2];
  out.lrs.eta3 = l[3];
  out.lrs.eta_r = l[4];
  out.lrs.gamma0 = bl.gamma0;
  if (bias == BiasMode::kBalance) {
    out.lrs.eta_b = 0.0;
    out.eta_bias = l[5];
  } else {
    out.lrs.eta_b = l[5];
  }
  return out;
}

// ---- limits ---------------------------------------------------------------

const char* regime_name(LimitRegime r) {
  switch (r) {
    case LimitRegime::kODE: return "ODE";
    case LimitRegime::kSDE: return "SDE";
    default: return "unstable";
  }
}

LimitClass classify_limit(const std::vector<ModelDims>& seq, double tol) {
  require(seq.size() >= 2, "classify_limit needs at least two dims");
  std::vector<double> x, y;
  for (const auto& d : seq) {
    require(d.N > 0 && d.E > 0 && d.Ne > 0, "classify_limit: dims must be positive");
    x.push_back(std::log(static_cast<double>(d.N) * d.E * d.Ne));
    y.push_back(std::log(static_cast<double>(d.N) / (static_cast<double>(d.E) * d.Ne)));
  }
  const double xm = std::accumulate(x.begin(), x.end(), 0.0) / x.size();
  const double ym = std::accumulate(y.begin(), y.end(), 0.0) / y.size();
  double sxy = 0, sxx = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - xm) * (y[i] - ym);
    sxx += (x[i] - xm) * (x[i] - xm);
  }
  require(sxx > 0, "classify_limit: sequence does not grow");
  const double slope = sxy / sxx;
  if (slope < -tol) return {LimitRegime::kODE, 0.0};
  if (slope > tol) return {LimitRegime::kUnstable, std::numeric_limits<double>::infinity()};
  return {LimitRegime::kSDE, std::exp(y.back())};
}

LimitClass classify_limit(const GrowthLaw& g) {
  require(g.cN > 0 && g.cE > 0 && g.cNe > 0, "classify_limit: constants must be positive");
  require(g.aN + g.aE + g.aNe > 0, "classify_limit: sequence does not grow");
  const double a = g.aN - g.aE - g.aNe;
  if (a < 0) return {LimitRegime::kODE, 0.0};
  if (a > 0) return {LimitRegime::kUnstable, std::numeric_limits<double>::infinity()};
  return {LimitRegime::kSDE, g.cN / (g.cE * g.cNe)};
}

// ---- sweeps ---------------------------------------------------------------

std::string GammaProbe::label() const {
  return tag + "[" + std::to_string(mu) + "," + std::to_string(nu) + "," + std::to_string(n) + "," +
         std::to_string(nprime) + "]";
}

namespace {

bool one_time(const std::string& tag) { return tag == "MA" || tag == "MAt"; }

const std::set<std::string> kProbeTags = {"H0", "H3", "G", "Gt", "MA", "MAt", "MAA", "MAAt", "MPhi"};

}  // namespace

void SweepPlan::validate() const {
  require(!scales.empty(), "sweep needs at least one scale");
  require(!seeds.empty(), "sweep needs at least one seed");
  for (double s : scales) require(std::isfinite(s) && s > 0, "sweep scales must be positive");
  require(std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() == seeds.size(),
          "sweep seeds must be distinct");
  require(threads >= 0, "threads must be >= 0");
  for (const auto& p : probes) {
    require(kProbeTags.count(p.tag) > 0, "unknown probe tag '" + p.tag + "'");
    require(p.mu >= 0 && p.mu < base.dims.P && p.nu >= 0 && p.nu < base.dims.P,
            "probe datum index out of range");
    require(p.n >= 0 && p.n <= base.dims.steps && p.nprime >= 0 && p.nprime <= base.dims.steps,
            "probe step out of range");
  }
}

ModelDims scaled_dims(const ModelDims& base, const ScalePath& path, double s) {
  ModelDims d = base;
  auto sc = [s](int v, double p) { return std::max(1, static_cast<int>(std::lround(v * std::pow(s, p)))); };
  d.N = sc(base.N, path.pN);
  d.E = sc(base.E, path.pE);
  d.Ne = sc(base.Ne, path.pNe);
  return d;
}

TrajectoryConfig cell_config(const SweepPlan& plan, int cell, std::uint64_t seed) {
  TrajectoryConfig c = plan.base;
  c.observer = nullptr;
  c.initial.reset();
  c.dims = scaled_dims(plan.base.dims, plan.path, plan.scales.at(cell));
  const ParameterizedSetup ps = apply_parameterization(plan.pbase, c.dims, plan.pz, c.bias);
  c.init = ps.init;
  c.lrs = ps.lrs;
  c.eta_bias = ps.eta_bias;
  c.seed = derive_seed(plan.master_seed, "sweep-cell", static_cast<std::uint64_t>(cell), seed);
  c.retention = Retention::kSummary;
  return c;
}

namespace {

SweepCell run_cell(const SweepPlan& plan, int cell, std::uint64_t seed) {
  SweepCell out;
  out.cell = cell;
  out.scale = plan.scales[cell];
  out.seed = seed;
  out.probe_values.assign(plan.probes.size(), std::numeric_limits<double>::quiet_NaN());
  TrajectoryConfig c = cell_config(plan, cell, seed);
  out.dims = c.dims;
  std::set<int> need;
  for (const auto& p : plan.probes) {
    need.insert(p.n);
    need.insert(p.nprime);
  }
  std::map<int, FieldState> kept;
  const int last = c.dims.steps;
  c.observer = [&](int n, const ParamState& ps, const FieldState& fs) {
    if (need.count(n)) kept[n] = fs;
    if (plan.record_final_states && n == last) {
      Mat S(2 * c.dims.P + 1, c.dims.N);
      S.topRows(c.dims.P) = fs.h0.transpose();
      S.middleRows(c.dims.P, c.dims.P) = fs.h3.transpose();
      S.row(2 * c.dims.P) = ps.w3.transpose();
      out.final_states = std::move(S);
    }
  };
  try {
    const Trace tr = run_trajectory(c);
    for (const auto& s : tr.summary) out.loss.push_back(s.loss);
    out.diverged = tr.diverged;
    out.error = tr.error;
    if (!plan.probes.empty() && kept.size() == need.size()) {
      Trace tmp;
      tmp.config = c;
      tmp.config.observer = nullptr;
      std::map<int, int> pos;
      std::vector<int> grid;
      for (auto& [n, fs] : kept) {
        pos[n] = static_cast<int>(tmp.fields.size());
        grid.push_back(pos[n]);
        tmp.fields.push_back(std::move(fs));
      }
      std::optional<GlobalKernels> g, gt;
      std::optional<MixtureKernels> m, mt;
      for (size_t i = 0; i < plan.probes.size(); ++i) {
        const GammaProbe& p = plan.probes[i];
        const int a = pos[p.n], b = pos[p.nprime];
        const std::string& t = p.tag;
        auto glob = [&](bool tilde) -> const GlobalKernels& {
          auto& o = tilde ? gt : g;
          if (!o) o = global_kernels(tmp, tilde, grid);
          return *o;
        };
        auto mix = [&](bool tilde) -> const MixtureKernels& {
          auto& o = tilde ? mt : m;
          if (!o) o = mixture_kernels(tmp, grid, tilde);
          return *o;
        };
        double v;
        if (t == "H0") v = glob(false).H0(p.mu, p.nu, a, b);
        else if (t == "H3") v = glob(false).H3(p.mu, p.nu, a, b);
        else if (t == "G") v = glob(false).G(p.mu, p.nu, a, b);
        else if (t == "Gt") v = glob(true).G(p.mu, p.nu, a, b);
        else if (t == "MA") v = mix(false).MA.M(p.mu, a);
        else if (t == "MAt") v = mix(true).MA.M(p.mu, a);
        else if (t == "MAA") v = mix(false).MAA(p.mu, p.nu, a, b);
        else if (t == "MAAt") v = mix(true).MAA(p.mu, p.nu, a, b);
        else v = mix(false).MPhi(p.mu, p.nu, a, b);
        out.probe_values[i] = v;
      }
    }
  } catch (const Error& e) {
    out.diverged = true;
    out.error = e.what();
  }
  return out;
}

int resolve_threads(int t, size_t work) {
  if (t <= 0) t = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  return static_cast<int>(std::min<size_t>(t, std::max<size_t>(work, 1)));
}

}  // namespace

SweepReport run_sweep(const SweepPlan& plan) {
  plan.validate();
  SweepReport rep;
  rep.probes = plan.probes;
  const size_t ns = plan.seeds.size();
  const size_t work = plan.scales.size() * ns;
  rep.runs.resize(work);
  std::atomic<size_t> next{0};
  auto worker = [&] {
    for (size_t i = next++; i < work; i = next++)
      rep.runs[i] = run_cell(plan, static_cast<int>(i / ns), plan.seeds[i % ns]);
  };
  const int nt = resolve_threads(plan.threads, work);
  std::vector<std::thread> pool;
  for (int t = 1; t < nt; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  return rep;
}

double SweepReport::observable(const SweepCell& run, const std::string& name) const {
  if (name == "final_loss") return run.loss.empty() ? std::numeric_limits<double>::quiet_NaN() : run.loss.back();
  for (size_t i = 0; i < probes.size(); ++i)
    if (probes[i].label() == name) return run.probe_values[i];
  throw ConfigError("unknown observable '" + name + "'");
}

void write_sweep(const SweepReport& rep, const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::string> h = {"run", "cell", "scale", "N", "E", "Ne", "seed", "diverged", "final_loss"};
  for (const auto& p : rep.probes) h.push_back(p.label());
  CsvWriter cells(dir + "/cells.csv", h);
  CsvWriter curves(dir + "/loss_curves.csv", {"run", "cell", "seed", "step", "loss"});
  for (size_t r = 0; r < rep.runs.size(); ++r) {
    const SweepCell& c = rep.runs[r];
    std::vector<CsvWriter::Cell> row = {static_cast<long long>(r), static_cast<long long>(c.cell), c.scale,
                                        static_cast<long long>(c.dims.N), static_cast<long long>(c.dims.E),
                                        static_cast<long long>(c.dims.Ne), std::to_string(c.seed),
                                        static_cast<long long>(c.diverged), rep.observable(c, "final_loss")};
    for (double v : c.probe_values) row.push_back(v);
    cells.row(row);
    for (size_t n = 0; n < c.loss.size(); ++n)
      curves.row({static_cast<long long>(r), static_cast<long long>(c.cell), std::to_string(c.seed),
                  static_cast<long long>(n), c.loss[n]});
  }
}

// ---- fits -------------------------------------------------------------------

RateFit fit_rate(const std::vector<double>& sizes, const std::vector<std::vector<double>>& samples,
                 const std::string& observable) {
  require(sizes.size() == samples.size(), "fit_rate: sizes and samples differ in length");
  require(sizes.size() >= 3, "concentration fit needs at least 3 sizes");
  RateFit f;
  f.observable = observable;
  f.sizes = sizes;
  for (size_t i = 0; i < sizes.size(); ++i) {
    const auto& s = samples[i];
    require(sizes[i] > 0, "fit_rate: sizes must be positive");
    require(s.size() >= 4, "concentration fit needs at least 4 samples per size");
    const double m = std::accumulate(s.begin(), s.end(), 0.0) / s.size();
    double v = 0;
    for (double x : s) v += (x - m) * (x - m);
    f.means.push_back(m);
    f.stds.push_back(std::sqrt(v / (s.size() - 1)));
  }
  if (std::all_of(f.stds.begin(), f.stds.end(), [](double s) { return s == 0.0; })) {
    f.slope = 0;
    f.intercept = -std::numeric_limits<double>::infinity();
    f.r2 = 1;
    return f;
  }
  for (double s : f.stds) require(s > 0 && std::isfinite(s), "concentration fit: degenerate dispersion");
  const size_t n = sizes.size();
  double xm = 0, ym = 0;
  for (size_t i = 0; i < n; ++i) {
    xm += std::log(sizes[i]) / n;
    ym += std::log(f.stds[i]) / n;
  }
  double sxy = 0, sxx = 0, syy = 0;
  for (size_t i = 0; i < n; ++i) {
    const double dx = std::log(sizes[i]) - xm, dy = std::log(f.stds[i]) - ym;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  require(sxx > 0, "concentration fit needs distinct sizes");
  f.slope = sxy / sxx;
  f.intercept = ym - f.slope * xm;
  f.r2 = syy > 0 ? sxy * sxy / (sxx * syy) : 1.0;
  return f;
}

RateFit concentration_fit(const SweepReport& rep, const std::string& observable) {
  std::map<int, std::vector<double>> by_cell;
  std::map<int, double> scale;
  for (const auto& r : rep.runs) {
    if (r.diverged) continue;
    const double v = rep.observable(r, observable);
    if (!std::isfinite(v)) continue;
    by_cell[r.cell].push_back(v);
    scale[r.cell] = r.scale;
  }
  std::vector<double> sizes;
  std::vector<std::vector<double>> samples;
  for (auto& [c, v] : by_cell) {
    sizes.push_back(scale[c]);
    samples.push_back(std::move(v));
  }
  return fit_rate(sizes, samples, observable);
}

double collapse_metric(const std::vector<double>& base, const std::vector<double>& scaled,
                       int horizon, double eps) {
  require(horizon >= 0, "collapse_metric: horizon must be >= 0");
  require(static_cast<int>(base.size()) > horizon && static_cast<int>(scaled.size()) > horizon,
          "collapse_metric: curves shorter than the horizon");
  double m = 0;
  for (int n = 0; n <= horizon; ++n)
    m = std::max(m, std::abs(scaled[n] - base[n]) / std::max(std::abs(base[n]), eps));
  return m;
}

std::vector<double> default_lr_grid() {
  std::vector<double> g;
  for (int k = -3; k <= 3; ++k) g.push_back(std::pow(10.0, 0.5 * k));
  return g;
}

LrProbe lr_argmin_probe(const SweepPlan& plan, const std::vector<double>& grid) {
  require(!grid.empty(), "lr grid is empty");
  LrProbe out;
  out.grid = grid;
  out.scales = plan.scales;
  out.loss.assign(plan.scales.size(), std::vector<double>(grid.size(), 0.0));
  for (size_t j = 0; j < grid.size(); ++j) {
    SweepPlan p = plan;
    p.probes.clear();
    auto& l = p.pbase.lrs;
    for (double* e : {&l.eta0, &l.eta1, &l.eta2, &l.eta3, &l.eta_r, &l.eta_b}) *e *= grid[j];
    p.pbase.eta_bias *= grid[j];
    const SweepReport rep = run_sweep(p);
    std::vector<int> count(plan.scales.size(), 0);
    for (const auto& r : rep.runs) {
      const double v = r.diverged || r.loss.empty() || !std::isfinite(r.loss.back())
                           ? std::numeric_limits<double>::infinity()
                           : r.loss.back();
      out.loss[r.cell][j] += v;
      ++count[r.cell];
    }
    for (size_t i = 0; i < plan.scales.size(); ++i) out.loss[i][j] /= count[i];
  }
  for (const auto& row : out.loss)
    out.argmin.push_back(static_cast<int>(std::min_element(row.begin(), row.end()) - row.begin()));
  return out;
}

}  // namespace moelab
