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

#ifndef MOELAB_RNG_HPP_
#define MOELAB_RNG_HPP_

#include <cstdint>
#include <random>
#include <string_view>

#include "moelab/common.hpp"

namespace moelab {

using Rng = std::mt19937_64;

// stream = hash(master, label, a, b). Streams never share state, so any
// consumer can be run in any order or concurrently.
std::uint64_t derive_seed(std::uint64_t master, std::string_view label,
                          std::uint64_t a = 0, std::uint64_t b = 0);

inline Rng make_stream(std::uint64_t master, std::string_view label,
                       std::uint64_t a = 0, std::uint64_t b = 0) {
  return Rng(derive_seed(master, label, a, b));
}

// Own Gaussian samplers (53-bit uniforms) so draws do not depend on the
// standard library implementation.
double normal(Rng& rng);
double uniform01(Rng& rng);
void fill_normal(Mat& m, Rng& rng, double stddev = 1.0);
void fill_normal(Vec& v, Rng& rng, double stddev = 1.0);

}  // namespace moelab

#endif  // MOELAB_RNG_HPP_
