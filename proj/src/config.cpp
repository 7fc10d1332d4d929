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

#include "moelab/config.hpp"

#include <cstdlib>
#include <fstream>
#include <regex>
#include <sstream>

#include "moelab/rng.hpp"
#include "moelab/tasks.hpp"

extern char** environ;

namespace moelab {

Json default_config() {
  return Json::parse(R"({
  "seed": 0,
  "out": "out",
  "threads": 0,
  "dims": {"D": 8, "N": 64, "E": 8, "Ne": 16, "P": 4, "gamma": 1.0, "kappa": 1.0,
           "steps": 50, "dt": 0.1},
  "task": {"radius": 1.0, "seed": 0},
  "activations": {"phi": "tanh", "sigma": "sigmoid"},
  "init": {"scheme": "unit", "s0": null, "s1": null, "s2": null, "s3": null, "sr": null, "sb": null},
  "lrs": {"eta0": 1.0, "eta1": 1.0, "eta2": 1.0, "eta3": 1.0, "eta_r": 1.0, "eta_b": 1.0,
          "gamma0": 1.0},
  "parameterization": "none",
  "gate": "soft",
  "bias": {"mode": "gradient", "eta_bias": 0.0},
  "loss": "half-mse",
  "retention": "full",
  "divergence_threshold": 1e12,
  "kernels": {"grid": "default", "tilde": true},
  "verify": {"abs_tol": 1e-10},
  "dmft": {"M_res": 4096, "M_exp": 4096, "M_within": 64, "sens_experts": 1024, "sens_within": 1,
           "budget_cap": 4194304, "damping": 0.5, "max_iter": 60, "tol": 1e-6,
           "alpha_star": 0.0},
  "sweep": {"path": {"pN": 1.0, "pE": 1.0, "pNe": 1.0}, "scales": [1, 2, 4], "seeds": [0, 1, 2, 3],
            "probes": [], "observables": ["final_loss"]},
  "compare": {"finite": "", "dmft": "", "tolerance": null}
})");
}

namespace {

// keys whose value may take another JSON type than the default
bool flexible(const std::string& path) {
  return path == "kernels.grid" || path == "compare.tolerance" || path.rfind("init.s", 0) == 0;
}

bool same_kind(const Json& a, const Json& b) {
  if (a.is_number() && b.is_number()) return true;
  return a.type() == b.type();
}

void merge(Json& base, const Json& user, const std::string& prefix) {
  if (!user.is_object()) throw ConfigError("config section '" + prefix + "' must be an object");
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    Json& slot = base[it.key()];
    if (slot.is_object()) {
      merge(slot, it.value(), key);
    } else {
      if (!flexible(key) && !same_kind(slot, it.value()))
        throw ConfigError("config key '" + key + "' has the wrong type");
      slot = it.value();
    }
  }
}

void set_dotted(Json& doc, const std::string& dotted, const Json& value) {
  Json patch = value;
  std::vector<std::string> parts;
  std::stringstream ss(dotted);
  for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
  if (parts.empty()) throw ConfigError("empty config key");
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) {
    Json o = Json::object();
    o[*it] = patch;
    patch = std::move(o);
  }
  merge(doc, patch, "");
}

const Json& at(const Json& d, const char* a, const char* b = nullptr) {
  const Json& x = d.at(a);
  return b ? x.at(b) : x;
}

template <typename T>
T get(const Json& d, const char* a, const char* b = nullptr) {
  const Json& v = at(d, a, b);
  try {
    if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer() && !v.is_number_unsigned())
        throw ConfigError(std::string("config key '") + a + (b ? std::string(".") + b : "") +
                          "' must be an integer");
    }
    return v.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string("config key '") + a + (b ? std::string(".") + b : "") +
                      "' has the wrong type");
  }
}

GateMode gate_of(const std::string& s) {
  if (s == "soft") return GateMode::kSoft;
  if (s == "topk") return GateMode::kTopK;
  throw ConfigError("gate must be soft or topk");
}

BiasMode bias_of(const std::string& s) {
  if (s == "gradient") return BiasMode::kGradient;
  if (s == "balance") return BiasMode::kBalance;
  if (s == "frozen") return BiasMode::kFrozen;
  throw ConfigError("bias.mode must be gradient, balance or frozen");
}

Retention retention_of(const std::string& s) {
  if (s == "full") return Retention::kFull;
  if (s == "fields") return Retention::kFields;
  if (s == "summary") return Retention::kSummary;
  throw ConfigError("retention must be full, fields or summary");
}

Activation act_of(const std::string& s) {
  try {
    return make_activation(s);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace

std::uint64_t RunConfig::seed() const { return get<std::uint64_t>(doc, "seed"); }
std::string RunConfig::out() const { return get<std::string>(doc, "out"); }
int RunConfig::threads() const {
  const int t = get<int>(doc, "threads");
  require(t >= 0, "threads must be >= 0");
  return t;
}

TrajectoryConfig RunConfig::trajectory() const {
  TrajectoryConfig c;
  ModelDims& d = c.dims;
  d.D = get<int>(doc, "dims", "D");
  d.N = get<int>(doc, "dims", "N");
  d.E = get<int>(doc, "dims", "E");
  d.Ne = get<int>(doc, "dims", "Ne");
  d.P = get<int>(doc, "dims", "P");
  d.gamma = get<double>(doc, "dims", "gamma");
  d.kappa = get<double>(doc, "dims", "kappa");
  d.steps = get<int>(doc, "dims", "steps");
  d.dt = get<double>(doc, "dims", "dt");
  c.gate = gate_of(get<std::string>(doc, "gate"));
  d.validate(c.gate);
  c.data = make_probe_task(d.D, d.P, get<double>(doc, "task", "radius"),
                           get<std::uint64_t>(doc, "task", "seed"))
               .data;
  c.act.phi = act_of(get<std::string>(doc, "activations", "phi"));
  c.act.sigma = act_of(get<std::string>(doc, "activations", "sigma"));
  const std::string scheme = get<std::string>(doc, "init", "scheme");
  if (scheme == "unit")
    c.init = InitScheme::unit();
  else if (scheme == "zeros")
    c.init = InitScheme::zeros();
  else if (scheme == "router-zero")
    c.init = InitScheme::router_zero();
  else
    throw ConfigError("init.scheme must be unit, zeros or router-zero");
  const Json& ij = doc.at("init");
  for (auto [key, slot] : {std::pair{"s0", &c.init.s0}, {"s1", &c.init.s1}, {"s2", &c.init.s2},
                           {"s3", &c.init.s3}, {"sr", &c.init.sr}, {"sb", &c.init.sb}}) {
    if (ij.at(key).is_null()) continue;
    if (!ij.at(key).is_number()) throw ConfigError(std::string("init.") + key + " must be a number");
    *slot = ij.at(key).get<double>();
    require(std::isfinite(*slot) && *slot >= 0, std::string("init.") + key + " must be >= 0");
  }
  LearningRates& l = c.lrs;
  l.eta0 = get<double>(doc, "lrs", "eta0");
  l.eta1 = get<double>(doc, "lrs", "eta1");
  l.eta2 = get<double>(doc, "lrs", "eta2");
  l.eta3 = get<double>(doc, "lrs", "eta3");
  l.eta_r = get<double>(doc, "lrs", "eta_r");
  l.eta_b = get<double>(doc, "lrs", "eta_b");
  l.gamma0 = get<double>(doc, "lrs", "gamma0");
  l.validate();
  c.bias = bias_of(get<std::string>(doc, "bias", "mode"));
  c.eta_bias = get<double>(doc, "bias", "eta_bias");
  require(c.eta_bias >= 0, "bias.eta_bias must be >= 0");
  const std::string loss = get<std::string>(doc, "loss");
  require(loss == "half-mse", "loss must be half-mse");
  c.retention = retention_of(get<std::string>(doc, "retention"));
  c.divergence_threshold = get<double>(doc, "divergence_threshold");
  require(c.divergence_threshold > 0, "divergence_threshold must be positive");
  c.seed = derive_seed(seed(), "train");
  const std::string pz = get<std::string>(doc, "parameterization");
  if (pz != "none") {
    ParamBase base;
    base.init = c.init;
    base.lrs = c.lrs;
    base.eta_bias = c.eta_bias;
    const ParameterizedSetup ps =
        apply_parameterization(base, d, Parameterization::from_name(pz, d.gamma), c.bias);
    c.init = ps.init;
    c.lrs = ps.lrs;
    c.eta_bias = ps.eta_bias;
  }
  return c;
}

DmftConfig RunConfig::dmft() const {
  DmftConfig c = dmft_from_finite(trajectory());
  const Json& j = doc.at("dmft");
  c.M_res = get<int>(j, "M_res");
  c.M_exp = get<int>(j, "M_exp");
  c.M_within = get<int>(j, "M_within");
  c.sens_experts = get<int>(j, "sens_experts");
  c.sens_within = get<int>(j, "sens_within");
  c.budget_cap = get<long long>(j, "budget_cap");
  c.damping = get<double>(j, "damping");
  c.max_iter = get<int>(j, "max_iter");
  c.tol = get<double>(j, "tol");
  c.alpha_star = get<double>(j, "alpha_star");
  c.seed = derive_seed(seed(), "dmft");
  c.threads = threads();
  c.validate();
  return c;
}

SweepPlan RunConfig::sweep() const {
  SweepPlan p;
  p.base = trajectory();
  const std::string pz = get<std::string>(doc, "parameterization");
  require(pz != "none", "sweep needs a parameterization (table or ntk-baseline)");
  p.pz = Parameterization::from_name(pz, p.base.dims.gamma);
  // base values straight from the document, before any width scaling
  RunConfig plain = *this;
  plain.doc["parameterization"] = "none";
  const TrajectoryConfig raw = plain.trajectory();
  p.pbase.init = raw.init;
  p.pbase.lrs = raw.lrs;
  p.pbase.eta_bias = raw.eta_bias;
  const Json& s = doc.at("sweep");
  p.path.pN = get<double>(s, "path", "pN");
  p.path.pE = get<double>(s, "path", "pE");
  p.path.pNe = get<double>(s, "path", "pNe");
  for (const auto& v : s.at("scales")) {
    require(v.is_number(), "sweep.scales must hold numbers");
    p.scales.push_back(v.get<double>());
  }
  for (const auto& v : s.at("seeds")) {
    require(v.is_number_integer() || v.is_number_unsigned(), "sweep.seeds must hold integers");
    p.seeds.push_back(v.get<std::uint64_t>());
  }
  for (const auto& v : s.at("probes")) {
    require(v.is_string(), "sweep.probes must hold labels like H0[0,0,5,5]");
    p.probes.push_back(parse_probe(v.get<std::string>()));
  }
  p.master_seed = seed();
  p.threads = threads();
  p.validate();
  return p;
}

std::vector<int> RunConfig::kernel_grid(int steps) const {
  const Json& g = doc.at("kernels").at("grid");
  if (g.is_string()) {
    require(g.get<std::string>() == "default", "kernels.grid must be \"default\" or a list");
    return default_grid(steps);
  }
  require(g.is_array() && !g.empty(), "kernels.grid must be \"default\" or a non-empty list");
  std::vector<int> out;
  for (const auto& v : g) {
    require(v.is_number_integer(), "kernels.grid entries must be integers");
    const int n = v.get<int>();
    require(n >= 0 && n <= steps, "kernels.grid entry outside [0, steps]");
    out.push_back(n);
  }
  return out;
}

std::string RunConfig::dump() const { return doc.dump(2) + "\n"; }

GammaProbe parse_probe(const std::string& label) {
  static const std::regex re(R"(^([A-Za-z0-9]+)\[(\d+),(\d+),(\d+),(\d+)\]$)");
  std::smatch m;
  if (!std::regex_match(label, m, re)) throw ConfigError("bad probe label '" + label + "'");
  GammaProbe p;
  p.tag = m[1];
  p.mu = std::stoi(m[2]);
  p.nu = std::stoi(m[3]);
  p.n = std::stoi(m[4]);
  p.nprime = std::stoi(m[5]);
  return p;
}

std::map<std::string, std::string> environment_overrides() {
  std::map<std::string, std::string> out;
  const std::string pre = kEnvPrefix;
  for (char** e = environ; e && *e; ++e) {
    const std::string kv = *e;
    if (kv.rfind(pre, 0) != 0) continue;
    const auto eq = kv.find('=');
    if (eq == std::string::npos) continue;
    out[kv.substr(pre.size(), eq - pre.size())] = kv.substr(eq + 1);
  }
  return out;
}

RunConfig resolve_config(const std::string& path, const std::map<std::string, std::string>& env,
                         const std::map<std::string, Json>& overrides) {
  RunConfig rc;
  rc.doc = default_config();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    Json user;
    try {
      user = Json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
    }
    merge(rc.doc, user, "");
  }
  for (const auto& [k, v] : env) {
    std::string dotted = std::regex_replace(k, std::regex("__"), ".");
    Json val;
    try {
      val = Json::parse(v);
    } catch (const nlohmann::json::exception&) {
      val = v;
    }
    set_dotted(rc.doc, dotted, val);
  }
  for (const auto& [k, v] : overrides) set_dotted(rc.doc, k, v);
  // semantic checks for everything reachable
  (void)rc.seed();
  (void)rc.threads();
  (void)rc.trajectory();
  return rc;
}

}  // namespace moelab
