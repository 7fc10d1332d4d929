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

#ifndef MOELAB_DYNAMICS_HPP_
#define MOELAB_DYNAMICS_HPP_

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "moelab/gate.hpp"
#include "moelab/model.hpp"

namespace moelab {

// Raw per-block rates. gamma0 multiplies every rate.
struct LearningRates {
  double eta0 = 1, eta1 = 1, eta2 = 1, eta3 = 1, eta_r = 1, eta_b = 1;
  double gamma0 = 1;

  void validate() const;
  static LearningRates zeros();
};

// gradient: b follows the gradient flow; balance: b follows the load
// balancing rule; frozen: b is never updated.
enum class BiasMode { kGradient, kBalance, kFrozen };

// Shaped like ParamState, holding grad L with theta' = -eta * grad.
using GradState = ParamState;

GradState grad_blocks(const ParamState& params, const Dataset& data,
                      const ModelDims& dims, const FieldState& fs);

// theta - gamma0 * eta * dt * grad, per block. step is only used in errors.
ParamState euler_step(const ParamState& params, const GradState& grads,
                      const LearningRates& lrs, double dt, int step = -1);

// Same update written straight into params without materialising a
// GradState. The bias is left alone unless mode == kGradient.
void euler_step_inplace(ParamState& params, const Dataset& data,
                        const ModelDims& dims, const FieldState& fs,
                        const LearningRates& lrs, BiasMode mode, int step = -1);

enum class Retention { kSummary, kFields, kFull };

struct TrajectoryConfig {
  ModelDims dims;
  Dataset data;
  Activations act = default_activations();
  InitScheme init;
  LearningRates lrs;
  GateMode gate = GateMode::kSoft;
  BiasMode bias = BiasMode::kGradient;
  double eta_bias = 0.0;  // balancing rate
  LossKind loss;
  std::uint64_t seed = 0;
  Retention retention = Retention::kFull;
  std::optional<ParamState> initial;  // overrides init/seed when set
  // Called after each evaluation, before the update.
  std::function<void(int, const ParamState&, const FieldState&)> observer;
  double divergence_threshold = 1e12;
};

struct StepSummary {
  int step = 0;
  double time = 0, loss = 0, mean_abs_delta = 0;
  std::array<double, 6> norms{};  // W0 W1 W2 w3 r b (Frobenius)
  Vec f, Delta;
};

struct Trace {
  TrajectoryConfig config;  // observer cleared
  ParamState init;
  std::vector<StepSummary> summary;
  std::vector<ParamState> params;   // kFull only
  std::vector<FieldState> fields;   // kFields and kFull
  bool diverged = false;
  int diverged_step = -1;
  std::string error;

  int recorded_steps() const { return static_cast<int>(summary.size()); }
  bool has_fields() const { return !fields.empty(); }
  bool has_params() const { return !params.empty(); }
};

const char* block_name(int i);  // order of StepSummary::norms

// Runs dims.steps Euler steps; a divergence ends the run with the partial
// trace kept and diverged set.
Trace run_trajectory(const TrajectoryConfig& config);

}  // namespace moelab

#endif  // MOELAB_DYNAMICS_HPP_
