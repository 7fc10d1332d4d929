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

#include "moelab/kernels.hpp"

#include <algorithm>
#include <Eigen/Eigenvalues>

namespace moelab {

std::vector<int> default_grid(int last) {
  std::vector<int> g;
  for (int n = 0; n <= std::min(last, 63); ++n) g.push_back(n);
  for (int n = 64; n < last; n *= 2) g.push_back(n);
  if (g.back() != last) g.push_back(last);
  return g;
}

double TwoTimeKernel::symmetry_error() const {
  return (K - K.transpose()).cwiseAbs().maxCoeff();
}

double TwoTimeKernel::min_equal_time_eig() const {
  double m = std::numeric_limits<double>::infinity();
  for (int gi = 0; gi < G(); ++gi) {
    Mat s = slice(gi, gi);
    s = 0.5 * (s + s.transpose()).eval();
    Eigen::SelfAdjointEigenSolver<Mat> es(s, Eigen::EigenvaluesOnly);
    m = std::min(m, es.eigenvalues().minCoeff());
  }
  return m;
}

namespace {

void need_fields(const Trace& tr, const std::vector<int>& grid) {
  if (!tr.has_fields()) throw CapabilityError("trace was recorded without field snapshots");
  for (int n : grid)
    if (n < 0 || n >= static_cast<int>(tr.fields.size()))
      throw ConfigError("kernel grid step " + std::to_string(n) + " is outside the trace");
}

// Columns (gi, mu) of one per-step N x P field, stacked along time.
template <typename F>
Mat stack(const Trace& tr, const std::vector<int>& grid, F&& field) {
  const Mat& first = field(tr.fields[grid[0]]);
  const Index rows = first.rows(), P = first.cols();
  Mat out(rows, P * static_cast<Index>(grid.size()));
  for (size_t gi = 0; gi < grid.size(); ++gi) out.middleCols(gi * P, P) = field(tr.fields[grid[gi]]);
  return out;
}

TwoTimeKernel gram(const std::string& tag, const Mat& X, double scale, int P,
                   const std::vector<int>& grid) {
  TwoTimeKernel k;
  k.tag = tag;
  k.P = P;
  k.grid = grid;
  k.K = Mat::Zero(X.cols(), X.cols());
  k.K.selfadjointView<Eigen::Lower>().rankUpdate(X.transpose(), scale);
  k.K = k.K.selfadjointView<Eigen::Lower>();
  return k;
}

}  // namespace

LevelStates extract_states(const Trace& tr) {
  if (!tr.has_params() || !tr.has_fields())
    throw CapabilityError("extract_states needs full parameter and field snapshots");
  const auto& d = tr.config.dims;
  const int P = d.P;
  LevelStates s;
  for (size_t n = 0; n < tr.fields.size(); ++n) {
    const FieldState& fs = tr.fields[n];
    const ParamState& ps = tr.params[n];
    Mat S(2 * P + 1, d.N);
    S.topRows(P) = fs.h0.transpose();
    S.middleRows(P, P) = fs.h3.transpose();
    S.row(2 * P) = ps.w3.transpose();
    Mat X(P + 1, d.E);
    X.row(0) = ps.b.transpose();
    X.bottomRows(P) = fs.p.transpose();
    Mat Y(2 * P, d.E * d.Ne);
    for (int k = 0; k < d.E; ++k) {
      Y.block(0, k * d.Ne, P, d.Ne) = fs.u[k].transpose();
      Y.block(P, k * d.Ne, P, d.Ne) = fs.z[k].transpose();
    }
    s.S.push_back(std::move(S));
    s.X.push_back(std::move(X));
    s.Y.push_back(std::move(Y));
  }
  return s;
}

GlobalKernels global_kernels(const Trace& tr, bool use_gtilde, const std::vector<int>& grid) {
  need_fields(tr, grid);
  const auto& d = tr.config.dims;
  const double invN = 1.0 / d.N;
  GlobalKernels out;
  out.H0 = gram("H0", stack(tr, grid, [](const FieldState& f) -> const Mat& { return f.h0; }),
                invN, d.P, grid);
  out.H3 = gram("H3", stack(tr, grid, [](const FieldState& f) -> const Mat& { return f.phi_h3; }),
                invN, d.P, grid);
  if (use_gtilde)
    out.G = gram("Gt", stack(tr, grid, [](const FieldState& f) -> const Mat& { return f.gt; }),
                 invN, d.P, grid);
  else
    out.G = gram("G", stack(tr, grid, [](const FieldState& f) -> const Mat& { return f.g; }),
                 invN, d.P, grid);
  return out;
}

ExpertKernels expert_kernels(const Trace& tr, int k, const std::vector<int>& grid) {
  need_fields(tr, grid);
  const auto& d = tr.config.dims;
  if (k < 0 || k >= d.E) throw ConfigError("expert index " + std::to_string(k) + " out of range");
  const double invNe = 1.0 / d.Ne;
  ExpertKernels out;
  out.Phi = gram("Phi1k", stack(tr, grid, [k](const FieldState& f) -> const Mat& { return f.phi_u[k]; }),
                 invNe, d.P, grid);
  out.Psi = gram("Psik", stack(tr, grid, [k](const FieldState& f) -> const Mat& { return f.delta[k]; }),
                 invNe, d.P, grid);
  return out;
}

MixtureKernels mixture_kernels(const Trace& tr, const std::vector<int>& grid, bool tilde) {
  need_fields(tr, grid);
  const auto& d = tr.config.dims;
  const int P = d.P, G = static_cast<int>(grid.size());
  const Index PG = static_cast<Index>(P) * G;
  const std::string sfx = tilde ? "t" : "";
  const double psi_scale = tilde ? static_cast<double>(d.Ne) * d.Ne : 1.0;
  const double a_scale = tilde ? static_cast<double>(d.N) : 1.0;
  MixtureKernels out;
  Mat mphi = Mat::Zero(PG, PG), mpsi = Mat::Zero(PG, PG);
  Mat as = Mat::Zero(PG, d.E);  // column k: A sigma' over (gi, mu)
  for (int k = 0; k < d.E; ++k) {
    Vec wk(PG);
    for (int gi = 0; gi < G; ++gi) {
      const FieldState& fs = tr.fields[grid[gi]];
      wk.segment(gi * P, P) = fs.w.row(k).transpose();
      as.col(k).segment(gi * P, P) =
          a_scale * fs.A.row(k).cwiseProduct(fs.sigma_d.row(k)).transpose();
    }
    const Mat X = stack(tr, grid, [k](const FieldState& f) -> const Mat& { return f.phi_u[k]; }) *
                  wk.asDiagonal();
    const Mat Y = stack(tr, grid, [k](const FieldState& f) -> const Mat& { return f.delta[k]; }) *
                  wk.asDiagonal();
    mphi.selfadjointView<Eigen::Lower>().rankUpdate(X.transpose(), 1.0 / (d.E * d.Ne));
    mpsi.selfadjointView<Eigen::Lower>().rankUpdate(Y.transpose(), psi_scale / (d.E * d.Ne));
  }
  auto finish = [&](const std::string& tag, Mat& m) {
    TwoTimeKernel k;
    k.tag = tag;
    k.P = P;
    k.grid = grid;
    k.K = m.selfadjointView<Eigen::Lower>();
    return k;
  };
  out.MPhi = finish("MPhi", mphi);
  out.MPsi = finish("MPsi" + sfx, mpsi);
  Mat maa = Mat::Zero(PG, PG);
  maa.selfadjointView<Eigen::Lower>().rankUpdate(as, 1.0 / d.E);
  out.MAA = finish("MAA" + sfx, maa);
  out.MA.tag = "MA" + sfx;
  out.MA.P = P;
  out.MA.grid = grid;
  out.MA.M = Mat(P, G);
  const Vec mean = as.rowwise().mean();
  for (int gi = 0; gi < G; ++gi) out.MA.M.col(gi) = mean.segment(gi * P, P);
  return out;
}

GammaFields gamma_fields(const Trace& tr, const std::vector<int>& grid, bool tilde) {
  GlobalKernels g = global_kernels(tr, tilde, grid);
  MixtureKernels m = mixture_kernels(tr, grid, tilde);
  GammaFields out{std::move(g.H0), std::move(g.H3), std::move(g.G), std::move(m.MPhi),
                  std::move(m.MAA), std::move(m.MA), {}};
  out.Delta.tag = "Delta";
  out.Delta.P = tr.config.dims.P;
  out.Delta.grid = grid;
  out.Delta.M = Mat(out.Delta.P, grid.size());
  for (size_t gi = 0; gi < grid.size(); ++gi) out.Delta.M.col(gi) = tr.fields[grid[gi]].Delta;
  return out;
}

std::vector<std::string> kernel_header() { return {"tag", "mu", "nu", "n", "nprime", "value"}; }

void write_kernel_rows(CsvWriter& w, const TwoTimeKernel& k, const std::string& prefix) {
  for (int gi = 0; gi < k.G(); ++gi)
    for (int gj = 0; gj < k.G(); ++gj)
      for (int mu = 0; mu < k.P; ++mu)
        for (int nu = 0; nu < k.P; ++nu)
          w.row({prefix + k.tag, static_cast<long long>(mu), static_cast<long long>(nu),
                 static_cast<long long>(k.grid[gi]), static_cast<long long>(k.grid[gj]),
                 k(mu, nu, gi, gj)});
}

void write_kernel_rows(CsvWriter& w, const OneTimeMixture& m, const std::string& prefix) {
  for (size_t gi = 0; gi < m.grid.size(); ++gi)
    for (int mu = 0; mu < m.P; ++mu)
      w.row({prefix + m.tag, static_cast<long long>(mu), static_cast<long long>(mu),
             static_cast<long long>(m.grid[gi]), static_cast<long long>(m.grid[gi]),
             m.M(mu, static_cast<Index>(gi))});
}

void write_level_states(const LevelStates& s, const std::vector<int>& steps,
                        const std::string& path) {
  CsvWriter w(path, {"level", "step", "record", "coord", "value"});
  auto dump = [&](const char* level, const std::vector<Mat>& v) {
    for (int n : steps) {
      if (n < 0 || n >= static_cast<int>(v.size())) throw ConfigError("state step out of range");
      const Mat& m = v[n];
      for (Index r = 0; r < m.cols(); ++r)
        for (Index c = 0; c < m.rows(); ++c)
          w.row({std::string(level), static_cast<long long>(n), static_cast<long long>(r),
                 static_cast<long long>(c), m(c, r)});
    }
  };
  dump("S", s.S);
  dump("X", s.X);
  dump("Y", s.Y);
}

}  // namespace moelab
