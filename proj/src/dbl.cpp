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

#include <algorithm>
#include <cmath>
#include <random>

#include "moelab/kernels.hpp"
#include "moelab/rng.hpp"

namespace moelab {

namespace {

// Pairwise distances: rows = points of X, cols = centres C.
Mat distances(const Mat& X, const Mat& C) {
  const Vec xn = X.colwise().squaredNorm().transpose();
  const Vec cn = C.colwise().squaredNorm().transpose();
  Mat d2 = (-2.0 * X.transpose() * C).eval();
  d2.colwise() += xn;
  d2.rowwise() += cn.transpose();
  return d2.cwiseMax(0.0).cwiseSqrt();
}

double gap(const Vec& fa, const Vec& fb) { return std::abs(fa.mean() - fb.mean()); }

}  // namespace

double dbl_estimate(const Mat& A, const Mat& B, int n_test, std::uint64_t seed,
                    const DblOptions& opt) {
  if (A.rows() != B.rows()) throw ShapeError("dbl_estimate: point dimensions differ");
  if (A.cols() == 0 || B.cols() == 0) throw ShapeError("dbl_estimate: empty sample");
  if (n_test < 1) throw ConfigError("dbl_estimate: n_test must be positive");
  const Index d = A.rows();
  Rng rng = make_stream(seed, "dbl");
  double best = 0.0;

  // Ramps. Offsets cover the projected range so the ramp is not saturated.
  const Mat AB = (Mat(d, A.cols() + B.cols()) << A, B).finished();
  const int n_ramp = opt.ramps_only ? n_test : (n_test + 1) / 2;
  for (int t = 0; t < n_ramp; ++t) {
    Vec w(d);
    fill_normal(w, rng);
    const double nw = w.norm();
    if (nw == 0.0) continue;
    w /= nw;
    const Vec pa = A.transpose() * w, pb = B.transpose() * w;
    const double lo = std::min(pa.minCoeff(), pb.minCoeff());
    const double hi = std::max(pa.maxCoeff(), pb.maxCoeff());
    const double beta = -(lo + (hi - lo) * uniform01(rng));
    auto ramp = [beta](const Vec& p) { return (p.array() + beta).cwiseMax(-1.0).cwiseMin(1.0).matrix().eval(); };
    best = std::max(best, gap(ramp(pa), ramp(pb)));
  }
  if (opt.ramps_only) return best;

  // Cones f = clamp(min_j (beta_j + |s - c_j|), -1, 1) centred on (up to
  // kMaxCentres) sample points. Offsets are tuned by a randomised hill
  // climb on the signed gap, once per sign; every visited offset vector is
  // one test function.
  constexpr Index kMaxCentres = 64;
  std::vector<Index> centres(AB.cols());
  for (Index j = 0; j < AB.cols(); ++j) centres[j] = j;
  if (AB.cols() > kMaxCentres) {
    std::shuffle(centres.begin(), centres.end(), rng);
    centres.resize(kMaxCentres);
  }
  const Index nc = static_cast<Index>(centres.size());
  Mat C(d, nc);
  for (Index j = 0; j < nc; ++j) C.col(j) = AB.col(centres[j]);
  const Mat DA = distances(A, C), DB = distances(B, C);
  auto signed_gap = [&](const Vec& beta) {
    const Vec fa = (DA.rowwise() + beta.transpose()).rowwise().minCoeff().cwiseMax(-1.0).cwiseMin(1.0);
    const Vec fb = (DB.rowwise() + beta.transpose()).rowwise().minCoeff().cwiseMax(-1.0).cwiseMin(1.0);
    return fa.mean() - fb.mean();
  };
  const int budget = n_test - n_ramp;
  for (int sign = 0; sign < 2; ++sign) {
    const int iters = sign == 0 ? budget / 2 : budget - budget / 2;
    if (iters < 1) continue;
    // start low on the side that should be low
    Vec beta(nc);
    for (Index j = 0; j < nc; ++j) {
      const bool from_a = centres[j] < A.cols();
      beta(j) = (from_a == (sign == 0)) ? 1.0 : -1.0;
    }
    const double sgn = sign == 0 ? 1.0 : -1.0;
    double cur = sgn * signed_gap(beta);
    best = std::max(best, cur);
    for (int t = 1; t < iters; ++t) {
      const double step = 0.5 * std::pow(1e-3, static_cast<double>(t) / iters);
      const Index j = static_cast<Index>(uniform01(rng) * nc) % nc;
      const double old = beta(j);
      beta(j) = std::clamp(old + step * normal(rng), -1.0, 3.0);
      const double val = sgn * signed_gap(beta);
      if (val >= cur) {
        cur = val;
        best = std::max(best, cur);
      } else {
        beta(j) = old;
      }
    }
  }
  return best;
}

}  // namespace moelab
