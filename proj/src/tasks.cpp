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

#include "moelab/tasks.hpp"

#include <cmath>

#include "moelab/rng.hpp"

namespace moelab {

ProbeTask make_probe_task(int D, int P, double radius, std::uint64_t seed) {
  require(D >= 1 && P >= 1 && radius > 0, "probe task: need D, P >= 1 and radius > 0");
  Rng rng = make_stream(seed, "probe-task");
  ProbeTask t;
  Mat x(D, P);
  fill_normal(x, rng);
  for (int mu = 0; mu < P; ++mu) x.col(mu) *= radius / x.col(mu).norm();
  t.a = Vec(D);
  fill_normal(t.a, rng, 1.0 / std::sqrt(static_cast<double>(D)));
  t.B = Mat(D, D);
  fill_normal(t.B, rng, 1.0 / D);
  t.B = 0.5 * (t.B + t.B.transpose()).eval();
  Vec y(P);
  for (int mu = 0; mu < P; ++mu) {
    const Vec s = x.col(mu) / radius;
    y(mu) = t.a.dot(s) + s.dot(t.B * s);
  }
  const double rms = std::sqrt(y.squaredNorm() / P);
  t.label_scale = rms > 0 ? 1.0 / rms : 1.0;
  y *= t.label_scale;
  t.data = Dataset::make(std::move(x), std::move(y));
  return t;
}

}  // namespace moelab
