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

#include "moelab/io.hpp"

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <sstream>

#include "json.hpp"

namespace moelab {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

CsvWriter::CsvWriter(const std::string& path, std::vector<std::string> header)
    : file_(path), os_(&file_), header_(std::move(header)) {
  if (!file_) throw ConfigError("cannot open '" + path + "' for writing");
  write_header();
}

CsvWriter::CsvWriter(std::ostream& os, std::vector<std::string> header)
    : os_(&os), header_(std::move(header)) {
  write_header();
}

void CsvWriter::write_header() {
  for (size_t i = 0; i < header_.size(); ++i) *os_ << (i ? "," : "") << header_[i];
  *os_ << '\n';
}

void CsvWriter::row(std::initializer_list<Cell> cells) {
  row(std::vector<Cell>(cells));
}

void CsvWriter::row(const std::vector<Cell>& cells) {
  if (cells.size() != header_.size()) throw ShapeError("csv row width does not match header");
  bool first = true;
  for (const auto& c : cells) {
    if (!first) *os_ << ',';
    first = false;
    if (const auto* s = std::get_if<std::string>(&c)) *os_ << *s;
    else if (const auto* d = std::get_if<double>(&c)) *os_ << fmt_double(*d);
    else *os_ << std::get<long long>(c);
  }
  *os_ << '\n';
}

int CsvTable::column(const std::string& name) const {
  for (size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return static_cast<int>(i);
  throw ConfigError("csv: missing column '" + name + "'");
}

CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  CsvTable t;
  std::string line;
  auto split = [](const std::string& l) {
    std::vector<std::string> out;
    std::stringstream ss(l);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
  };
  if (!std::getline(in, line)) throw ConfigError("csv '" + path + "' is empty");
  t.header = split(line);
  while (std::getline(in, line))
    if (!line.empty()) t.rows.push_back(split(line));
  return t;
}

void write_step_log(const Trace& tr, const std::string& path) {
  std::vector<std::string> header = {"step", "time", "loss", "mean_abs_delta"};
  for (int b = 0; b < 6; ++b) header.push_back(std::string("norm_") + block_name(b));
  CsvWriter w(path, header);
  for (const auto& s : tr.summary) {
    std::vector<CsvWriter::Cell> row = {static_cast<long long>(s.step), s.time, s.loss,
                                        s.mean_abs_delta};
    for (double v : s.norms) row.push_back(v);
    w.row(row);
  }
}

namespace {

constexpr char kMagic[8] = {'M', 'O', 'E', 'L', 'A', 'B', 'T', 'R'};

struct Out {
  std::ofstream f;
  void u64(std::uint64_t v) { f.write(reinterpret_cast<const char*>(&v), 8); }
  void i64(std::int64_t v) { f.write(reinterpret_cast<const char*>(&v), 8); }
  void d(double v) { f.write(reinterpret_cast<const char*>(&v), 8); }
  void mat(const Mat& m) {
    i64(m.rows());
    i64(m.cols());
    f.write(reinterpret_cast<const char*>(m.data()), 8 * m.size());
  }
  void vec(const Vec& v) {
    i64(v.size());
    f.write(reinterpret_cast<const char*>(v.data()), 8 * v.size());
  }
  void mats(const std::vector<Mat>& ms) {
    i64(static_cast<std::int64_t>(ms.size()));
    for (const auto& m : ms) mat(m);
  }
};

struct In {
  std::ifstream f;
  std::string path;
  void raw(void* p, std::size_t n) {
    f.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!f) throw ConfigError("trace file '" + path + "' is truncated");
  }
  std::uint64_t u64() { std::uint64_t v; raw(&v, 8); return v; }
  std::int64_t i64() { std::int64_t v; raw(&v, 8); return v; }
  double d() { double v; raw(&v, 8); return v; }
  Mat mat() {
    const auto r = i64(), c = i64();
    if (r < 0 || c < 0 || r * c > (std::int64_t{1} << 34)) throw ConfigError("trace file: bad matrix header");
    Mat m(r, c);
    raw(m.data(), 8 * static_cast<std::size_t>(m.size()));
    return m;
  }
  Vec vec() {
    const auto n = i64();
    if (n < 0 || n > (std::int64_t{1} << 34)) throw ConfigError("trace file: bad vector header");
    Vec v(n);
    raw(v.data(), 8 * static_cast<std::size_t>(n));
    return v;
  }
  std::vector<Mat> mats() {
    const auto n = i64();
    std::vector<Mat> out;
    for (std::int64_t i = 0; i < n; ++i) out.push_back(mat());
    return out;
  }
};

void put_params(Out& o, const ParamState& p) {
  o.mat(p.W0);
  o.mats(p.W1);
  o.mats(p.W2);
  o.vec(p.w3);
  o.mat(p.r);
  o.vec(p.b);
}

ParamState get_params(In& in) {
  ParamState p;
  p.W0 = in.mat();
  p.W1 = in.mats();
  p.W2 = in.mats();
  p.w3 = in.vec();
  p.r = in.mat();
  p.b = in.vec();
  return p;
}

void put_fields(Out& o, const FieldState& fs) {
  for (const Mat* m : {&fs.h0, &fs.h3, &fs.phi_h3, &fs.p, &fs.w, &fs.active, &fs.sigma_d,
                       &fs.g, &fs.gt, &fs.q, &fs.A})
    o.mat(*m);
  for (const auto* v : {&fs.u, &fs.phi_u, &fs.m, &fs.z, &fs.delta}) o.mats(*v);
  o.vec(fs.f);
  o.vec(fs.Delta);
  o.d(fs.loss);
  o.i64(fs.mode == GateMode::kTopK ? 1 : 0);
  o.i64(fs.has_backward ? 1 : 0);
}

FieldState get_fields(In& in) {
  FieldState fs;
  for (Mat* m : {&fs.h0, &fs.h3, &fs.phi_h3, &fs.p, &fs.w, &fs.active, &fs.sigma_d, &fs.g,
                 &fs.gt, &fs.q, &fs.A})
    *m = in.mat();
  for (auto* v : {&fs.u, &fs.phi_u, &fs.m, &fs.z, &fs.delta}) *v = in.mats();
  fs.f = in.vec();
  fs.Delta = in.vec();
  fs.loss = in.d();
  fs.mode = in.i64() ? GateMode::kTopK : GateMode::kSoft;
  fs.has_backward = in.i64() != 0;
  return fs;
}

const char* bias_mode_name(BiasMode m) {
  switch (m) {
    case BiasMode::kGradient: return "gradient";
    case BiasMode::kBalance: return "balance";
    case BiasMode::kFrozen: return "frozen";
  }
  return "gradient";
}

BiasMode bias_mode_from(const std::string& s) {
  if (s == "gradient") return BiasMode::kGradient;
  if (s == "balance") return BiasMode::kBalance;
  if (s == "frozen") return BiasMode::kFrozen;
  throw ConfigError("unknown bias mode '" + s + "'");
}

}  // namespace

void write_trace_binary(const Trace& tr, const std::string& path) {
  if (!tr.has_params() || !tr.has_fields())
    throw CapabilityError("binary trace needs full retention");
  const auto& c = tr.config;
  if (c.act.phi.kind == ActKind::kHook || c.act.sigma.kind == ActKind::kHook || c.loss.l)
    throw CapabilityError("binary trace cannot store activation or loss hooks");
  nlohmann::json h;
  h["schema_version"] = kTraceSchemaVersion;
  h["dims"] = {{"D", c.dims.D},         {"N", c.dims.N},         {"E", c.dims.E},
               {"Ne", c.dims.Ne},       {"P", c.dims.P},         {"gamma", c.dims.gamma},
               {"kappa", c.dims.kappa}, {"steps", c.dims.steps}, {"dt", c.dims.dt}};
  h["phi"] = c.act.phi.name;
  h["sigma"] = c.act.sigma.name;
  h["lrs"] = {c.lrs.eta0, c.lrs.eta1, c.lrs.eta2, c.lrs.eta3, c.lrs.eta_r, c.lrs.eta_b, c.lrs.gamma0};
  h["gate"] = c.gate == GateMode::kTopK ? "topk" : "soft";
  h["bias_mode"] = bias_mode_name(c.bias);
  h["eta_bias"] = c.eta_bias;
  h["loss"] = c.loss.name;
  h["seed"] = c.seed;
  h["recorded"] = tr.recorded_steps();
  h["diverged"] = tr.diverged;
  h["diverged_step"] = tr.diverged_step;
  const std::string hs = h.dump();

  Out o;
  o.f.open(path, std::ios::binary);
  if (!o.f) throw ConfigError("cannot open '" + path + "' for writing");
  o.f.write(kMagic, 8);
  o.u64(hs.size());
  o.f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  o.mat(c.data.x);
  o.vec(c.data.y);
  put_params(o, tr.init);
  for (int n = 0; n < tr.recorded_steps(); ++n) {
    const auto& s = tr.summary[n];
    o.i64(s.step);
    o.d(s.time);
    o.d(s.loss);
    o.d(s.mean_abs_delta);
    for (double v : s.norms) o.d(v);
    put_params(o, tr.params[n]);
    put_fields(o, tr.fields[n]);
  }
  if (!o.f) throw ConfigError("write to '" + path + "' failed");
}

Trace read_trace_binary(const std::string& path) {
  In in;
  in.path = path;
  in.f.open(path, std::ios::binary);
  if (!in.f) throw ConfigError("cannot open trace '" + path + "'");
  char magic[8];
  in.raw(magic, 8);
  if (std::memcmp(magic, kMagic, 8) != 0) throw ConfigError("'" + path + "' is not a trace file");
  const auto hl = in.u64();
  if (hl > (1u << 24)) throw ConfigError("trace header too large");
  std::string hs(hl, '\0');
  in.raw(hs.data(), hl);
  const nlohmann::json h = nlohmann::json::parse(hs);
  if (h.at("schema_version").get<int>() != kTraceSchemaVersion)
    throw ConfigError("unsupported trace schema version");
  Trace tr;
  auto& c = tr.config;
  const auto& d = h.at("dims");
  c.dims.D = d.at("D");
  c.dims.N = d.at("N");
  c.dims.E = d.at("E");
  c.dims.Ne = d.at("Ne");
  c.dims.P = d.at("P");
  c.dims.gamma = d.at("gamma");
  c.dims.kappa = d.at("kappa");
  c.dims.steps = d.at("steps");
  c.dims.dt = d.at("dt");
  c.act.phi = make_activation(h.at("phi").get<std::string>());
  c.act.sigma = make_activation(h.at("sigma").get<std::string>());
  const auto l = h.at("lrs").get<std::vector<double>>();
  c.lrs = LearningRates{l.at(0), l.at(1), l.at(2), l.at(3), l.at(4), l.at(5), l.at(6)};
  c.gate = h.at("gate").get<std::string>() == "topk" ? GateMode::kTopK : GateMode::kSoft;
  c.bias = bias_mode_from(h.at("bias_mode").get<std::string>());
  c.eta_bias = h.at("eta_bias");
  c.seed = h.at("seed");
  c.retention = Retention::kFull;
  tr.diverged = h.at("diverged");
  tr.diverged_step = h.at("diverged_step");
  Mat x = in.mat();
  Vec y = in.vec();
  c.data = Dataset::make(std::move(x), std::move(y));
  tr.init = get_params(in);
  const int rec = h.at("recorded");
  for (int n = 0; n < rec; ++n) {
    StepSummary s;
    s.step = static_cast<int>(in.i64());
    s.time = in.d();
    s.loss = in.d();
    s.mean_abs_delta = in.d();
    for (double& v : s.norms) v = in.d();
    tr.params.push_back(get_params(in));
    tr.fields.push_back(get_fields(in));
    s.f = tr.fields.back().f;
    s.Delta = tr.fields.back().Delta;
    tr.summary.push_back(std::move(s));
  }
  return tr;
}

}  // namespace moelab
