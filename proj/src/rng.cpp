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

#include "moelab/rng.hpp"

#include <cmath>
#include <numbers>

namespace moelab {
namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t master, std::string_view label,
                          std::uint64_t a, std::uint64_t b) {
  // FNV-1a over the label, then mixed with the counters.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : label) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::uint64_t s = splitmix(master ^ splitmix(h));
  s = splitmix(s ^ splitmix(a + 0x632be59bd9b4e019ULL));
  s = splitmix(s ^ splitmix(b + 0x8cb92ba72f3d8dd7ULL));
  return s;
}

double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

double normal(Rng& rng) {
  double u1 = 0.0;
  do {
    u1 = uniform01(rng);
  } while (u1 <= 0.0);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) *
         std::cos(2.0 * std::numbers::pi * u2);
}

namespace {

// Marsaglia polar method, both outputs used.
template <typename F>
void fill_pairs(Index n, Rng& rng, F&& put) {
  Index i = 0;
  while (i < n) {
    double a, b, s;
    do {
      a = 2.0 * uniform01(rng) - 1.0;
      b = 2.0 * uniform01(rng) - 1.0;
      s = a * a + b * b;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    put(i++, a * f);
    if (i < n) put(i++, b * f);
  }
}

}  // namespace

void fill_normal(Mat& m, Rng& rng, double stddev) {
  double* d = m.data();
  fill_pairs(m.size(), rng, [&](Index i, double z) { d[i] = stddev * z; });
}

void fill_normal(Vec& v, Rng& rng, double stddev) {
  double* d = v.data();
  fill_pairs(v.size(), rng, [&](Index i, double z) { d[i] = stddev * z; });
}

}  // namespace moelab
