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

#ifndef MOELAB_KERNELS_HPP_
#define MOELAB_KERNELS_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "moelab/dynamics.hpp"
#include "moelab/io.hpp"

namespace moelab {

// Every step up to 64, then powers of two, and always the last step.
std::vector<int> default_grid(int last_step);

// K(mu, nu, n, n') stored as a (P*G) x (P*G) matrix, row index gi*P + mu.
struct TwoTimeKernel {
  std::string tag;
  int P = 0;
  std::vector<int> grid;  // step indices
  Mat K;

  int G() const { return static_cast<int>(grid.size()); }
  double operator()(int mu, int nu, int gi, int gj) const { return K(gi * P + mu, gj * P + nu); }
  Mat slice(int gi, int gj) const { return K.block(gi * P, gj * P, P, P); }
  double symmetry_error() const;       // max |K - K^T|
  double min_equal_time_eig() const;   // min over gi of lambda_min(K[gi,gi])
};

// M(mu, n) stored P x G.
struct OneTimeMixture {
  std::string tag;
  int P = 0;
  std::vector<int> grid;
  Mat M;
};

// Three-level particle records, one matrix per recorded step with one
// column per record: S is (2P+1) x N, X is (P+1) x E, Y is 2P x (E*Ne).
struct LevelStates {
  std::vector<Mat> S, X, Y;
};

LevelStates extract_states(const Trace& trace);

struct GlobalKernels {
  TwoTimeKernel H0, H3, G;
};
// G uses g, or g~ = N g when use_gtilde (tag "Gt").
GlobalKernels global_kernels(const Trace& trace, bool use_gtilde,
                             const std::vector<int>& grid);

struct ExpertKernels {
  TwoTimeKernel Phi, Psi;
};
ExpertKernels expert_kernels(const Trace& trace, int k, const std::vector<int>& grid);

// tilde switches to the order-one normalisations: Psi on Ne*delta and A on
// N*A (the mean-field objects). Tags gain a "t" suffix.
struct MixtureKernels {
  TwoTimeKernel MPhi, MPsi, MAA;
  OneTimeMixture MA;
};
MixtureKernels mixture_kernels(const Trace& trace, const std::vector<int>& grid,
                               bool tilde = false);

struct GammaFields {
  TwoTimeKernel H0, H3, G, MPhi, MAA;
  OneTimeMixture MA;
  OneTimeMixture Delta;
};
GammaFields gamma_fields(const Trace& trace, const std::vector<int>& grid, bool tilde);

// Flat export: tag,mu,nu,n,nprime,value. One-time objects use nu = mu and
// nprime = n.
void write_kernel_rows(CsvWriter& w, const TwoTimeKernel& k, const std::string& prefix = "");
void write_kernel_rows(CsvWriter& w, const OneTimeMixture& m, const std::string& prefix = "");
std::vector<std::string> kernel_header();

// level,step,record,coord,value
void write_level_states(const LevelStates& s, const std::vector<int>& steps,
                        const std::string& path);

// Randomised lower bound on the bounded-Lipschitz distance between the
// uniform measures on the columns of A and B. Test functions are ramps
// clamp(<w,s> + beta, -1, 1) with |w| = 1 and, unless ramps_only, clamped
// cone potentials clamp(min_j (beta_j + |s - c_j|), -1, 1) centred on sample
// points. Every test function is bounded by 1 and 1-Lipschitz.
struct DblOptions {
  bool ramps_only = false;
};
double dbl_estimate(const Mat& A, const Mat& B, int n_test, std::uint64_t seed,
                    const DblOptions& opt = {});

}  // namespace moelab

#endif  // MOELAB_KERNELS_HPP_
