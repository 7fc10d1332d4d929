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

#ifndef MOELAB_VOLTERRA_HPP_
#define MOELAB_VOLTERRA_HPP_

#include <string>
#include <vector>

#include "moelab/dynamics.hpp"

namespace moelab {

struct ResidualEntry {
  std::string identity;
  double max_abs = 0;    // max |residual|
  double max_rel = 0;    // max_abs / max |lhs|
  long long index = -1;  // flat coordinate of the worst residual
  int step = -1;         // step of the worst residual
  double tolerance = 0;
  bool passed() const { return max_abs <= tolerance; }
};

struct ResidualReport {
  std::vector<ResidualEntry> entries;
  double max_abs() const;
  bool passed() const;
  void append(const ResidualReport& other);
};

struct VolterraOptions {
  double abs_tol = 1e-10;  // per step, scaled by sqrt(steps)
  bool compensated = true; // Kahan sums in long double
};

// theta^n - theta^0 - sum_{m<n} (update of step m), for block in
// {W0, W1, W2, w3, r, b}. Update signals are recomputed from the recorded
// fields. The bias identity follows the trace's bias mode (gradient,
// balance or frozen). Needs full retention.
ResidualReport check_telescoping(const Trace& trace, const std::string& block,
                                 const VolterraOptions& opt = {});

// Field at step n minus the drive through theta^0 minus the history sum
// over Gram objects recomputed from the trace, for field in
// {h0, u, m, p, f}. Needs field snapshots.
ResidualReport check_volterra_field(const Trace& trace, const std::string& field,
                                    const VolterraOptions& opt = {});

// All six telescoping checks and all five field checks.
ResidualReport check_all(const Trace& trace, const VolterraOptions& opt = {});

}  // namespace moelab

#endif  // MOELAB_VOLTERRA_HPP_
