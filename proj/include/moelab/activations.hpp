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

#ifndef MOELAB_ACTIVATIONS_HPP_
#define MOELAB_ACTIVATIONS_HPP_

#include <functional>
#include <string>
#include <string_view>

#include "moelab/common.hpp"

namespace moelab {

enum class ActKind { kIdentity, kTanh, kGelu, kReluSmooth, kSigmoid, kHook };

// A scalar map with its first and second derivatives. The second derivative
// is only consumed by the mean-field sensitivity recursion.
struct Activation {
  ActKind kind = ActKind::kTanh;
  std::string name = "tanh";
  std::function<double(double)> hook_f, hook_df, hook_d2f;

  double f(double x) const;
  double df(double x) const;
  double d2f(double x) const;

  Mat f(const Mat& x) const;
  Mat df(const Mat& x) const;
  Mat d2f(const Mat& x) const;
};

struct Activations {
  Activation phi;
  Activation sigma;
};

// identity | tanh | gelu | relu-smooth | sigmoid
Activation make_activation(std::string_view name);
Activation make_hook(std::string name, std::function<double(double)> f,
                     std::function<double(double)> df,
                     std::function<double(double)> d2f = {});
Activations default_activations();

// Max relative error of df against a central difference of f over a fixed
// probe grid in [-4, 4]. Error is measured relative to max(|df|, 1).
double derivative_check(const Activation& act, bool second = false);

}  // namespace moelab

#endif  // MOELAB_ACTIVATIONS_HPP_
