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

#ifndef MOELAB_COMMON_HPP_
#define MOELAB_COMMON_HPP_

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace moelab {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using Index = Eigen::Index;

// Error taxonomy. The CLI maps ConfigError to exit code 2 and everything
// else that signals a failed check to exit code 1.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct StateError : Error {
  using Error::Error;
};
struct CapabilityError : Error {
  using Error::Error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct NumericOverflowError : Error {
  using Error::Error;
};
struct ConditioningError : Error {
  using Error::Error;
};
struct DivergenceError : Error {
  DivergenceError(const std::string& what, int step)
      : Error(what + " (step " + std::to_string(step) + ")"), step(step) {}
  int step;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ConfigError(msg);
}

}  // namespace moelab

#endif  // MOELAB_COMMON_HPP_
