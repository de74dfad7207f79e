/* Copyright (c) 2026 The bilevel Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License. */

#pragma once

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "bilevel/types.hpp"

namespace bilevel {

/// One logged row per master iteration.
struct TraceRow {
  std::int64_t t = 0;
  double vtime = 0.0;   // virtual time, non-decreasing across rows
  double upper = 0.0;   // F = upper_sum at the current iterates
  double h = 0.0;       // lower-level residual h(v, {y_i}, z)
  double gap_sq = 0.0;  // squared stationarity gap
  int planes = 0;       // |P^t|
  double c1 = 0.0;      // regularization weight used for this iteration
  std::vector<int> active;  // worker ids consumed this iteration
};

inline constexpr const char* kTraceCsvHeader = "t,vtime,F,h,gap_sq,planes,c1,active";

/// Divergence with the rows logged so far attached, so callers can still
/// persist the partial trace.
struct SolverDivergence : DivergenceError {
  SolverDivergence(const std::string& msg, std::vector<TraceRow> rows)
      : DivergenceError(msg), partial_trace(std::move(rows)) {}
  std::vector<TraceRow> partial_trace;
};

namespace detail {

inline void append_float(std::string& out, double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  out += buf;
}

// std::stod raises out_of_range on subnormals; strtod just returns them.
inline double parse_trace_double(const std::string& tok) {
  if (tok.empty()) throw std::invalid_argument("empty field");
  char* end = nullptr;
  const double v = std::strtod(tok.c_str(), &end);
  if (end != tok.c_str() + tok.size()) throw std::invalid_argument(tok);
  return v;
}

}  // namespace detail

/// Floats carry 17 significant digits so rows parse back losslessly.
inline std::string trace_to_csv(const std::vector<TraceRow>& rows) {
  std::string out = kTraceCsvHeader;
  out += '\n';
  for (const auto& row : rows) {
    out += std::to_string(row.t);
    out += ',';
    detail::append_float(out, row.vtime);
    out += ',';
    detail::append_float(out, row.upper);
    out += ',';
    detail::append_float(out, row.h);
    out += ',';
    detail::append_float(out, row.gap_sq);
    out += ',';
    out += std::to_string(row.planes);
    out += ',';
    detail::append_float(out, row.c1);
    out += ',';
    for (std::size_t i = 0; i < row.active.size(); ++i) {
      if (i > 0) out += ';';
      out += std::to_string(row.active[i]);
    }
    out += '\n';
  }
  return out;
}

inline void write_trace_csv(const std::string& path,
                            const std::vector<TraceRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open trace file for writing: " + path);
  out << trace_to_csv(rows);
  if (!out) throw IoError("failed writing trace file: " + path);
}

inline std::vector<TraceRow> parse_trace_csv(std::istream& in) {
  std::vector<TraceRow> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line_no == 1) {
      if (line != kTraceCsvHeader) throw ParseError("unexpected trace header", line_no);
      continue;
    }
    std::stringstream ss(line);
    std::string tok;
    std::vector<std::string> fields;
    while (std::getline(ss, tok, ',')) fields.push_back(tok);
    if (ss.eof() && !line.empty() && line.back() == ',') fields.push_back("");
    if (fields.size() != 8) throw ParseError("expected 8 CSV fields", line_no);
    TraceRow row;
    try {
      row.t = std::stoll(fields[0]);
      row.vtime = detail::parse_trace_double(fields[1]);
      row.upper = detail::parse_trace_double(fields[2]);
      row.h = detail::parse_trace_double(fields[3]);
      row.gap_sq = detail::parse_trace_double(fields[4]);
      row.planes = std::stoi(fields[5]);
      row.c1 = detail::parse_trace_double(fields[6]);
      if (!fields[7].empty()) {
        std::stringstream as(fields[7]);
        std::string id;
        while (std::getline(as, id, ';')) row.active.push_back(std::stoi(id));
      }
    } catch (const std::exception&) {
      throw ParseError("malformed trace row", line_no);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::vector<TraceRow> read_trace_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open trace file: " + path);
  return parse_trace_csv(in);
}

}  // namespace bilevel
