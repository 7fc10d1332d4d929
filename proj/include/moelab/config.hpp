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

#ifndef MOELAB_CONFIG_HPP_
#define MOELAB_CONFIG_HPP_

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "moelab/dynamics.hpp"
#include "moelab/meanfield.hpp"
#include "moelab/scaling.hpp"

namespace moelab {

using Json = nlohmann::ordered_json;

// Every accepted key with its default value. A user document may only
// contain keys present here, with the same JSON type (numbers interchange).
Json default_config();

// Environment overrides: MOELAB_<key>__<subkey>=<value>, the value parsed as
// JSON when possible and as a string otherwise.
inline constexpr const char* kEnvPrefix = "MOELAB_";

struct RunConfig {
  Json doc;  // fully resolved

  std::uint64_t seed() const;
  std::string out() const;
  int threads() const;

  TrajectoryConfig trajectory() const;  // finite run, parameterization applied
  DmftConfig dmft() const;              // mean-field problem mirroring trajectory()
  SweepPlan sweep() const;
  std::vector<int> kernel_grid(int steps) const;
  std::string dump() const;  // resolved document, 2-space indent
};

// Layers: defaults, file (may be empty), environment, then flag overrides
// given as dotted keys. Throws ConfigError on unknown keys, type mismatches
// and semantic problems.
RunConfig resolve_config(const std::string& path, const std::map<std::string, std::string>& env,
                         const std::map<std::string, Json>& overrides = {});
std::map<std::string, std::string> environment_overrides();  // reads environ

GammaProbe parse_probe(const std::string& label);  // "tag[mu,nu,n,nprime]"

}  // namespace moelab

#endif  // MOELAB_CONFIG_HPP_
