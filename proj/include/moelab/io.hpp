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

#ifndef MOELAB_IO_HPP_
#define MOELAB_IO_HPP_

#include <fstream>
#include <initializer_list>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "moelab/dynamics.hpp"

namespace moelab {

// 17 significant digits, round-trip exact.
std::string fmt_double(double v);

// Comma-separated table with a mandatory header row.
class CsvWriter {
 public:
  using Cell = std::variant<std::string, double, long long>;

  CsvWriter(const std::string& path, std::vector<std::string> header);
  explicit CsvWriter(std::ostream& os, std::vector<std::string> header);
  void row(std::initializer_list<Cell> cells);
  void row(const std::vector<Cell>& cells);

 private:
  void write_header();
  std::ofstream file_;
  std::ostream* os_;
  std::vector<std::string> header_;
};

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const;  // throws ConfigError if absent
};
CsvTable read_csv(const std::string& path);

// Per-step log with columns step,time,loss,mean_abs_delta,norm_<block>.
void write_step_log(const Trace& trace, const std::string& path);

// Compact binary with an embedded schema version. Requires full retention.
// Hooks (activation or loss) cannot be serialised and are rejected.
void write_trace_binary(const Trace& trace, const std::string& path);
Trace read_trace_binary(const std::string& path);
constexpr int kTraceSchemaVersion = 1;

}  // namespace moelab

#endif  // MOELAB_IO_HPP_
