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

#ifndef MOELAB_MODEL_HPP_
#define MOELAB_MODEL_HPP_

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "moelab/activations.hpp"
#include "moelab/common.hpp"

namespace moelab {

enum class GateMode { kSoft, kTopK };

struct ModelDims {
  int D = 1, N = 1, E = 1, Ne = 1, P = 1;
  double gamma = 1.0;
  double kappa = 1.0;
  int steps = 0;
  double dt = 0.1;

  // Throws ConfigError. In top-K mode kappa*E must be a positive integer.
  void validate(GateMode mode = GateMode::kSoft) const;
  int active_experts() const;  // kappa*E rounded, checked by validate
};

// Inputs are stored column-wise: x is D x P.
struct Dataset {
  Mat x;
  Vec y;
  Mat Kx;  // x^T x

  static Dataset make(Mat x, Vec y);
  int P() const { return static_cast<int>(x.cols()); }
  int D() const { return static_cast<int>(x.rows()); }
};

// Per-block Gaussian standard deviations.
struct InitScheme {
  std::string name = "unit";
  double s0 = 1, s1 = 1, s2 = 1, s3 = 1, sr = 1, sb = 1;

  static InitScheme unit() { return {}; }
  static InitScheme zeros();
  static InitScheme router_zero();  // r = 0, b ~ N(0, 1)
};

struct ParamState {
  Mat W0;               // N x D
  std::vector<Mat> W1;  // E of Ne x N
  std::vector<Mat> W2;  // E of N x Ne
  Vec w3;               // N
  Mat r;                // N x E, column k is r_k
  Vec b;                // E

  bool all_finite() const;
};

// Per-datum fields, datum index along columns.
struct FieldState {
  Mat h0, h3;  // N x P
  Mat phi_h3;  // N x P
  Vec f;       // P
  std::vector<Mat> u, phi_u, m;  // E of Ne x P, Ne x P, N x P
  Mat p, w;                      // E x P, w is the effective gate
  Mat active;                    // E x P, 1 where the expert is routed
  Mat sigma_d;                   // E x P, d w / d p (zero where inactive)
  GateMode mode = GateMode::kSoft;

  bool has_backward = false;
  Mat g, gt, q;                  // N x P, gt = N g
  std::vector<Mat> z, delta;     // E of Ne x P
  Mat A;                         // E x P
  Vec Delta;                     // P
  double loss = 0.0;
};

struct LossKind {
  std::string name = "half-mse";
  // Hook: l(f, y) and dl/df(f, y). Empty for half-mse.
  std::function<double(double, double)> l, dl;

  static LossKind half_mse() { return {}; }
};

ParamState init_params(const ModelDims& dims, const InitScheme& scheme,
                       std::uint64_t seed);

FieldState forward(const ParamState& params, const Dataset& data,
                   const Activations& act, GateMode mode,
                   const ModelDims& dims);

// Fills g, gt, z, delta, A and q of an existing forward result.
void backward(const ParamState& params, const Dataset& data,
              const Activations& act, const ModelDims& dims, FieldState& fs);

std::pair<double, Vec> loss_and_delta(const Vec& f, const Vec& y,
                                      const LossKind& kind);

// forward + loss + backward in one call.
FieldState evaluate(const ParamState& params, const Dataset& data,
                    const Activations& act, GateMode mode,
                    const ModelDims& dims, const LossKind& loss);

}  // namespace moelab

#endif  // MOELAB_MODEL_HPP_
