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

#ifndef MOELAB_GATE_HPP_
#define MOELAB_GATE_HPP_

#include "moelab/activations.hpp"
#include "moelab/model.hpp"

namespace moelab {

struct GateResult {
  Mat w;        // E x P effective mixing coefficients
  Mat active;   // E x P, 1.0 or 0.0
  Mat sigma_d;  // E x P, dw/dp with the mask held fixed
};

// soft: w = sigma(p) + b, everything active.
// topk: per datum the kappa*E largest sigma(p)+b are active with
// w = sigma(p); ties go to the lower expert index.
GateResult gate(const Mat& p, const Vec& b, const Activation& sigma,
                GateMode mode, double kappa);

// b' = b - eta_bias * dt * (load - kappa)
Vec bias_balance_step(const Vec& b, const Vec& loads, double kappa,
                      double eta_bias, double dt);

// Fraction of data routed to each expert (topk) or <w>_mu clipped to [0,1].
Vec expert_loads(const GateResult& g, GateMode mode);
Vec expert_loads(const Mat& w, const Mat& active, GateMode mode);

}  // namespace moelab

#endif  // MOELAB_GATE_HPP_
