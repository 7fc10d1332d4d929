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

// moelab: train | verify | dmft | sweep | compare
// Exit codes: 0 success, 1 failed check, 2 configuration error.

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <tuple>

#include "moelab/config.hpp"
#include "moelab/io.hpp"
#include "moelab/kernels.hpp"
#include "moelab/meanfield.hpp"
#include "moelab/scaling.hpp"
#include "moelab/volterra.hpp"

namespace fs = std::filesystem;
using namespace moelab;

namespace {

struct Common {
  std::string config;
  std::string out;
  std::uint64_t seed = 0;
  int threads = -1;
  bool seed_set = false;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "JSON config file")->check(CLI::ExistingFile);
  sub->add_option("--out", c.out, "output directory");
  sub->add_option_function<std::uint64_t>(
      "--seed", [&c](const std::uint64_t& v) { c.seed = v; c.seed_set = true; }, "master seed");
  sub->add_option("--threads", c.threads, "worker threads, 0 = auto")->check(CLI::NonNegativeNumber);
}

RunConfig load(const Common& c) {
  std::map<std::string, Json> ov;
  if (c.seed_set) ov["seed"] = c.seed;
  if (!c.out.empty()) ov["out"] = c.out;
  if (c.threads >= 0) ov["threads"] = c.threads;
  return resolve_config(c.config, environment_overrides(), ov);
}

fs::path prepare_out(const RunConfig& rc) {
  const fs::path dir = rc.out();
  fs::create_directories(dir);
  std::ofstream(dir / "resolved_config.json") << rc.dump();
  return dir;
}

void write_finite_kernels(const Trace& tr, const std::vector<int>& grid, bool tilde,
                          const std::string& path) {
  CsvWriter w(path, kernel_header());
  const GlobalKernels g = global_kernels(tr, tilde, grid);
  const MixtureKernels m = mixture_kernels(tr, grid, tilde);
  for (const TwoTimeKernel* k : {&g.H0, &g.G, &g.H3, &m.MPhi, &m.MPsi, &m.MAA})
    write_kernel_rows(w, *k);
  write_kernel_rows(w, m.MA);
  OneTimeMixture delta, f;
  delta.tag = "Delta";
  f.tag = "f";
  delta.P = f.P = tr.config.dims.P;
  delta.grid = f.grid = grid;
  delta.M = f.M = Mat(delta.P, grid.size());
  for (size_t gi = 0; gi < grid.size(); ++gi) {
    delta.M.col(gi) = tr.summary[grid[gi]].Delta;
    f.M.col(gi) = tr.summary[grid[gi]].f;
  }
  write_kernel_rows(w, delta);
  write_kernel_rows(w, f);
  for (int n : grid)
    w.row({std::string("loss"), 0LL, 0LL, static_cast<long long>(n), static_cast<long long>(n),
           tr.summary[n].loss});
}

int cmd_train(const Common& c) {
  const RunConfig rc = load(c);
  TrajectoryConfig tc = rc.trajectory();
  const fs::path dir = prepare_out(rc);
  const Trace tr = run_trajectory(tc);
  write_step_log(tr, (dir / "steps.csv").string());
  if (tr.has_fields() && !tr.diverged) {
    const auto grid = rc.kernel_grid(tc.dims.steps);
    write_finite_kernels(tr, grid, rc.doc["kernels"]["tilde"].get<bool>(),
                         (dir / "kernels.csv").string());
  }
  if (tr.has_params()) write_trace_binary(tr, (dir / "trace.bin").string());
  if (tr.diverged) {
    std::cerr << "train: diverged at step " << tr.diverged_step << ": " << tr.error << "\n";
    return 1;
  }
  std::cout << "train: " << tr.recorded_steps() << " recorded steps, final loss "
            << fmt_double(tr.summary.back().loss) << "\n";
  return 0;
}

int cmd_verify(const Common& c, const std::string& trace_path) {
  const RunConfig rc = load(c);
  const Trace tr = read_trace_binary(trace_path);
  VolterraOptions opt;
  opt.abs_tol = rc.doc["verify"]["abs_tol"].get<double>();
  require(opt.abs_tol > 0, "verify.abs_tol must be positive");
  const ResidualReport rep = check_all(tr, opt);
  std::vector<std::string> header{"identity", "max_abs", "max_rel", "step", "index", "tolerance", "passed"};
  auto emit = [&](CsvWriter& w) {
    for (const auto& e : rep.entries)
      w.row({e.identity, e.max_abs, e.max_rel, static_cast<long long>(e.step), e.index, e.tolerance,
             static_cast<long long>(e.passed())});
  };
  {
    CsvWriter w(std::cout, header);
    emit(w);
  }
  if (!c.out.empty()) {
    const fs::path dir = prepare_out(rc);
    CsvWriter w((dir / "verify.csv").string(), header);
    emit(w);
  }
  return rep.passed() ? 0 : 1;
}

int cmd_dmft(const Common& c) {
  const RunConfig rc = load(c);
  const DmftConfig dc = rc.dmft();
  const fs::path dir = prepare_out(rc);
  const DmftKernels k = solve_dmft(dc);
  write_dmft_kernels(k, (dir / "dmft_kernels.csv").string());
  write_convergence_log(k, (dir / "convergence.csv").string());
  std::cout << "dmft: " << k.iterations << " iterations, residual " << fmt_double(k.residual)
            << (k.converged ? ", converged" : ", NOT converged") << "\n";
  return k.converged ? 0 : 1;
}

int cmd_sweep(const Common& c) {
  const RunConfig rc = load(c);
  const SweepPlan plan = rc.sweep();
  const fs::path dir = prepare_out(rc);
  const SweepReport rep = run_sweep(plan);
  write_sweep(rep, dir.string());
  CsvWriter w((dir / "fits.csv").string(), {"observable", "slope", "intercept", "r2"});
  std::vector<std::string> obs;
  for (const auto& v : rc.doc["sweep"]["observables"]) {
    require(v.is_string(), "sweep.observables must hold strings");
    obs.push_back(v.get<std::string>());
  }
  for (const auto& p : plan.probes) obs.push_back(p.label());
  const bool can_fit = plan.scales.size() >= 3 && plan.seeds.size() >= 4;
  if (can_fit)
    for (const auto& o : obs) {
      const RateFit f = concentration_fit(rep, o);
      w.row({o, f.slope, f.intercept, f.r2});
    }
  int failed = 0;
  for (const auto& r : rep.runs) failed += r.diverged;
  std::cout << "sweep: " << rep.runs.size() << " runs, " << failed << " diverged\n";
  return failed ? 1 : 0;
}

using Key = std::tuple<std::string, long long, long long, long long, long long>;

std::map<Key, double> read_kernel_csv(const std::string& path) {
  const CsvTable t = read_csv(path);
  const int ct = t.column("tag"), cm = t.column("mu"), cn = t.column("nu"), c1 = t.column("n"),
            c2 = t.column("nprime"), cv = t.column("value");
  std::map<Key, double> out;
  for (const auto& r : t.rows) {
    std::string tag = r[ct];
    if (tag.rfind("dmft:", 0) == 0) tag = tag.substr(5);
    out[{tag, std::stoll(r[cm]), std::stoll(r[cn]), std::stoll(r[c1]), std::stoll(r[c2])}] =
        std::stod(r[cv]);
  }
  return out;
}

int cmd_compare(const Common& c, std::string finite, std::string dmft) {
  const RunConfig rc = load(c);
  if (finite.empty()) finite = rc.doc["compare"]["finite"].get<std::string>();
  if (dmft.empty()) dmft = rc.doc["compare"]["dmft"].get<std::string>();
  require(!finite.empty() && !dmft.empty(), "compare needs a finite and a dmft kernel file");
  for (const auto& p : {finite, dmft})
    if (!fs::exists(p)) throw ConfigError("no such kernel file '" + p + "'");
  const Json& tj = rc.doc["compare"]["tolerance"];
  require(tj.is_null() || tj.is_number(), "compare.tolerance must be a number or null");
  const auto a = read_kernel_csv(finite), b = read_kernel_csv(dmft);
  struct Gap {
    long long n = 0;
    double max_abs = 0, max_rel = 0, diff2 = 0, ref2 = 0;
  };
  std::map<std::string, Gap> gaps;
  for (const auto& [k, va] : a) {
    auto it = b.find(k);
    if (it == b.end()) continue;
    Gap& g = gaps[std::get<0>(k)];
    const double d = std::abs(va - it->second);
    ++g.n;
    g.max_abs = std::max(g.max_abs, d);
    if (it->second != 0) g.max_rel = std::max(g.max_rel, d / std::abs(it->second));
    g.diff2 += d * d;
    g.ref2 += it->second * it->second;
  }
  require(!gaps.empty(), "the two kernel files share no entries");
  std::vector<std::string> header{"tag", "entries", "max_abs", "max_rel", "rel_fro"};
  bool ok = true;
  auto emit = [&](CsvWriter& w) {
    for (const auto& [tag, g] : gaps) {
      const double rel = g.ref2 > 0 ? std::sqrt(g.diff2 / g.ref2) : std::sqrt(g.diff2);
      if (tj.is_number() && rel > tj.get<double>()) ok = false;
      w.row({tag, g.n, g.max_abs, g.max_rel, rel});
    }
  };
  {
    CsvWriter w(std::cout, header);
    emit(w);
  }
  const fs::path dir = prepare_out(rc);
  CsvWriter w((dir / "compare.csv").string(), header);
  emit(w);
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"moelab: mixture-of-experts training dynamics and mean-field tools"};
  app.require_subcommand(1);
  Common c;
  std::string trace_path, finite, dmft;
  auto* train = app.add_subcommand("train", "run a finite-width trajectory");
  auto* verify = app.add_subcommand("verify", "check telescoping and Volterra identities of a trace");
  auto* dm = app.add_subcommand("dmft", "solve the mean-field equations");
  auto* sweep = app.add_subcommand("sweep", "width sweep with concentration fits");
  auto* cmp = app.add_subcommand("compare", "gap table between two kernel files");
  for (auto* s : {train, verify, dm, sweep, cmp}) add_common(s, c);
  verify->add_option("trace", trace_path, "trace.bin from train")->required();
  cmp->add_option("finite", finite, "finite kernels.csv");
  cmp->add_option("dmft", dmft, "dmft_kernels.csv");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  try {
    if (*train) return cmd_train(c);
    if (*verify) return cmd_verify(c, trace_path);
    if (*dm) return cmd_dmft(c);
    if (*sweep) return cmd_sweep(c);
    if (*cmp) return cmd_compare(c, finite, dmft);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
