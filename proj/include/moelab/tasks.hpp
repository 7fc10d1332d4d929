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

#ifndef MOELAB_TASKS_HPP_
#define MOELAB_TASKS_HPP_

#include <cstdint>

#include "moelab/model.hpp"

namespace moelab {

// P random inputs on the sphere of the given radius in R^D, labelled by a
// random degree-2 polynomial teacher y = <a, x>/r + x^T B x / r^2 rescaled
// to unit root-mean-square over the dataset.
struct ProbeTask {
  Dataset data;
  Vec a;
  Mat B;
  double label_scale = 1.0;
};

ProbeTask make_probe_task(int D, int P, double radius, std::uint64_t seed);

}  // namespace moelab

#endif  // MOELAB_TASKS_HPP_
