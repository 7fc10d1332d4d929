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

#include "moelab/activations.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace moelab {
namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double gelu(double x) { return 0.5 * x * std::erfc(-x * kInvSqrt2); }
double gelu_d(double x) {
  return 0.5 * std::erfc(-x * kInvSqrt2) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}
double gelu_d2(double x) {
  return kInvSqrt2Pi * std::exp(-0.5 * x * x) * (2.0 - x * x);
}

}  // namespace

double Activation::f(double x) const {
  switch (kind) {
    case ActKind::kIdentity: return x;
    case ActKind::kTanh: return std::tanh(x);
    case ActKind::kGelu: return gelu(x);
    case ActKind::kReluSmooth: return softplus(x);
    case ActKind::kSigmoid: return sigmoid(x);
    case ActKind::kHook: return hook_f(x);
  }
  return 0.0;
}

double Activation::df(double x) const {
  switch (kind) {
    case ActKind::kIdentity: return 1.0;
    case ActKind::kTanh: {
      const double t = std::tanh(x);
      return 1.0 - t * t;
    }
    case ActKind::kGelu: return gelu_d(x);
    case ActKind::kReluSmooth: return sigmoid(x);
    case ActKind::kSigmoid: {
      const double s = sigmoid(x);
      return s * (1.0 - s);
    }
    case ActKind::kHook: return hook_df(x);
  }
  return 0.0;
}

double Activation::d2f(double x) const {
  switch (kind) {
    case ActKind::kIdentity: return 0.0;
    case ActKind::kTanh: {
      const double t = std::tanh(x);
      return -2.0 * t * (1.0 - t * t);
    }
    case ActKind::kGelu: return gelu_d2(x);
    case ActKind::kReluSmooth: {
      const double s = sigmoid(x);
      return s * (1.0 - s);
    }
    case ActKind::kSigmoid: {
      const double s = sigmoid(x);
      return s * (1.0 - s) * (1.0 - 2.0 * s);
    }
    case ActKind::kHook:
      if (!hook_d2f) throw CapabilityError("activation hook '" + name + "' has no second derivative");
      return hook_d2f(x);
  }
  return 0.0;
}

Mat Activation::f(const Mat& x) const {
  switch (kind) {
    case ActKind::kIdentity: return x;
    case ActKind::kTanh: return x.array().tanh().matrix();
    default: return x.unaryExpr([this](double v) { return f(v); });
  }
}

Mat Activation::df(const Mat& x) const {
  switch (kind) {
    case ActKind::kIdentity: return Mat::Ones(x.rows(), x.cols());
    case ActKind::kTanh: return (1.0 - x.array().tanh().square()).matrix();
    default: return x.unaryExpr([this](double v) { return df(v); });
  }
}

Mat Activation::d2f(const Mat& x) const {
  switch (kind) {
    case ActKind::kIdentity: return Mat::Zero(x.rows(), x.cols());
    case ActKind::kTanh: {
      const auto t = x.array().tanh();
      return (-2.0 * t * (1.0 - t.square())).matrix();
    }
    default: return x.unaryExpr([this](double v) { return d2f(v); });
  }
}

Activation make_activation(std::string_view name) {
  Activation a;
  a.name = std::string(name);
  if (name == "identity") a.kind = ActKind::kIdentity;
  else if (name == "tanh") a.kind = ActKind::kTanh;
  else if (name == "gelu") a.kind = ActKind::kGelu;
  else if (name == "relu-smooth" || name == "softplus") a.kind = ActKind::kReluSmooth;
  else if (name == "sigmoid") a.kind = ActKind::kSigmoid;
  else throw ConfigError("unknown activation '" + std::string(name) + "'");
  return a;
}

Activation make_hook(std::string name, std::function<double(double)> f,
                     std::function<double(double)> df,
                     std::function<double(double)> d2f) {
  require(static_cast<bool>(f) && static_cast<bool>(df),
          "activation hook needs f and df");
  Activation a;
  a.kind = ActKind::kHook;
  a.name = std::move(name);
  a.hook_f = std::move(f);
  a.hook_df = std::move(df);
  a.hook_d2f = std::move(d2f);
  return a;
}

Activations default_activations() {
  return {make_activation("tanh"), make_activation("tanh")};
}

double derivative_check(const Activation& act, bool second) {
  double worst = 0.0;
  const double h = 1e-5;
  for (int i = 0; i <= 64; ++i) {
    const double x = -4.0 + 8.0 * i / 64.0 + 1e-3;
    double fd, an;
    if (second) {
      fd = (act.df(x + h) - act.df(x - h)) / (2 * h);
      an = act.d2f(x);
    } else {
      fd = (act.f(x + h) - act.f(x - h)) / (2 * h);
      an = act.df(x);
    }
    worst = std::max(worst, std::abs(fd - an) / std::max(std::abs(an), 1.0));
  }
  return worst;
}

}  // namespace moelab
