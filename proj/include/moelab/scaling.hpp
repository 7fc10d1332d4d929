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

#ifndef MOELAB_SCALING_HPP_
#define MOELAB_SCALING_HPP_

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "moelab/dynamics.hpp"

namespace moelab {

// Exponents of one parameter block. Raw values are
//   std = base * N^init_N * alpha^init_alpha
//   lr  = base * N^lr_N * alpha^lr_alpha * E^lr_E
// with alpha = Ne / N, in the convention where the block is used without
// explicit width factors in the forward map.
struct BlockRule {
  double init_N = 0, init_alpha = 0;
  double lr_N = 0, lr_alpha = 0, lr_E = 0;
};

// Blocks in the order W0 (embed), W1 (expert up), W2 (expert down),
// w3 (readout), r (router), b (bias).
struct Parameterization {
  std::string name;
  double gamma = 1.0;
  std::array<BlockRule, 6> blocks{};
  double bias_lr_E_balance = 0.0;  // bias exponent of E under load balancing

  static Parameterization table(double gamma = 1.0);
  // table with fan-in down-projection init, N^-1/2 alpha^-1/2
  static Parameterization ntk_baseline(double gamma = 1.0);
  static Parameterization from_name(const std::string& name, double gamma = 1.0);  // ConfigError
};

// Base multipliers: init stds (sb defaults to 0) and base learning rates.
struct ParamBase {
  InitScheme init = [] {
    InitScheme s;
    s.sb = 0.0;
    return s;
  }();
  LearningRates lrs;
  double eta_bias = 1.0;  // base balancing rate
};

struct ParameterizedSetup {
  InitScheme init;      // stds for the width-normalised model
  LearningRates lrs;    // rates for the width-normalised model
  double eta_bias = 0;  // balancing rate when bias == kBalance
  std::array<double, 6> raw_std{}, raw_lr{};  // raw-convention values
};

ParameterizedSetup apply_parameterization(const ParamBase& base, const ModelDims& dims,
                                          const Parameterization& pz,
                                          BiasMode bias = BiasMode::kGradient);

// Regime of a growth sequence through alpha_star = lim N / (E * Ne).
enum class LimitRegime { kODE, kSDE, kUnstable };
struct LimitClass {
  LimitRegime regime;
  double alpha_star;  // 0, finite, or +inf
};
// Needs at least two dims, ordered by growth. The trend of
// log(N / (E Ne)) against log(N E Ne) decides the regime.
LimitClass classify_limit(const std::vector<ModelDims>& seq, double slope_tol = 1e-2);
// Symbolic law N = cN s^aN, E = cE s^aE, Ne = cNe s^aNe.
struct GrowthLaw {
  double cN = 1, aN = 1, cE = 1, aE = 0, cNe = 1, aNe = 0;
};
LimitClass classify_limit(const GrowthLaw& law);
const char* regime_name(LimitRegime r);

// One recorded Gamma entry. Tags: H0, H3, G, Gt, MA, MAt, MAA, MAAt, MPhi.
// One-time tags ignore nu and nprime.
struct GammaProbe {
  std::string tag;
  int mu = 0, nu = 0, n = 0, nprime = 0;
  std::string label() const;
};

// Cell dims = round(base * s^exponent) per dimension.
struct ScalePath {
  double pN = 1, pE = 1, pNe = 1;
};

struct SweepPlan {
  TrajectoryConfig base;  // dims at s = 1; data shared by every cell
  Parameterization pz = Parameterization::table();
  ParamBase pbase;
  ScalePath path;
  std::vector<double> scales;
  std::vector<std::uint64_t> seeds;
  std::uint64_t master_seed = 0;
  std::vector<GammaProbe> probes;
  bool record_final_states = false;  // S-level records at the last step
  int threads = 0;                   // 0: hardware concurrency

  void validate() const;  // ConfigError
};

ModelDims scaled_dims(const ModelDims& base, const ScalePath& path, double s);
// The exact per-run configuration of (cell, seed).
TrajectoryConfig cell_config(const SweepPlan& plan, int cell, std::uint64_t seed);

struct SweepCell {
  int cell = 0;
  double scale = 1;
  ModelDims dims;
  std::uint64_t seed = 0;  // plan seed value
  std::vector<double> loss;
  std::vector<double> probe_values;
  Mat final_states;  // (2P+1) x N when requested
  bool diverged = false;
  std::string error;
};

struct SweepReport {
  std::vector<GammaProbe> probes;
  std::vector<SweepCell> runs;  // ordered by (cell, seed position)
  // Observable value of a run: "final_loss" or a probe label.
  double observable(const SweepCell& run, const std::string& name) const;
};

SweepReport run_sweep(const SweepPlan& plan);

// cells.csv (one row per run) and loss_curves.csv (run, step, loss).
void write_sweep(const SweepReport& report, const std::string& dir);

struct RateFit {
  std::string observable;
  double slope = 0, intercept = 0, r2 = 0;
  std::vector<double> sizes, stds, means;
};
// Least squares of log(std) on log(size); needs >= 3 sizes with >= 4
// samples each. All-zero dispersion gives slope 0.
RateFit fit_rate(const std::vector<double>& sizes,
                 const std::vector<std::vector<double>>& samples,
                 const std::string& observable = "");
// Across-seed std per scale, diverged runs skipped.
RateFit concentration_fit(const SweepReport& report, const std::string& observable);

// max_{n <= horizon} |L_scaled - L_base| / max(|L_base|, eps)
double collapse_metric(const std::vector<double>& base, const std::vector<double>& scaled,
                       int horizon, double eps = 1e-12);

// Final loss over a log grid of base-rate multipliers, per scale; diverged
// runs count as +inf. argmin[i] is the grid index of the best multiplier.
struct LrProbe {
  std::vector<double> grid, scales;
  std::vector<std::vector<double>> loss;  // [scale][grid]
  std::vector<int> argmin;
};
// Seven points with half-decade spacing around 1.
std::vector<double> default_lr_grid();
LrProbe lr_argmin_probe(const SweepPlan& plan, const std::vector<double>& grid);

}  // namespace moelab

#endif  // MOELAB_SCALING_HPP_
