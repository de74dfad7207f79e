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

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "bilevel/rng.hpp"
#include "bilevel/types.hpp"

namespace bilevel {

enum class Split { kTrain, kValidation };

enum class DatasetFormat { kCsv, kLibsvm };

/// In-memory dataset: one feature row per sample, integer labels, and a
/// per-sample train/validation tag (everything is kTrain until tagged).
struct Dataset {
  Matrix features;           // num_samples x feature_dim
  Eigen::VectorXi labels;    // per-sample class id, binary problems use +-1
  std::vector<Split> split;  // same length as labels

  Eigen::Index num_samples() const { return features.rows(); }
  Eigen::Index feature_dim() const { return features.cols(); }

  std::vector<int> indices_of(Split tag) const {
    std::vector<int> out;
    for (int i = 0; i < static_cast<int>(split.size()); ++i) {
      if (split[i] == tag) out.push_back(i);
    }
    return out;
  }

  std::set<int> label_set() const {
    std::set<int> out;
    for (Eigen::Index i = 0; i < labels.size(); ++i) out.insert(labels[i]);
    return out;
  }

  void validate() const {
    if (features.rows() != labels.size() ||
        split.size() != static_cast<std::size_t>(labels.size())) {
      throw ShapeError("Dataset: features, labels and split tags disagree");
    }
  }
};

struct CorruptionRecord {
  std::vector<int> corrupted_indices;
  double rate = 0.0;
  std::uint64_t seed = 0;
};

namespace detail {

inline std::string strip_cr(std::string line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

inline double parse_double(const std::string& tok, std::size_t line_no,
                           const char* what) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(tok, &pos);
    if (pos != tok.size()) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw ParseError(std::string("bad ") + what + " '" + tok + "'", line_no);
  }
}

inline int parse_label(const std::string& tok, std::size_t line_no) {
  const double v = parse_double(tok, line_no, "label");
  const int rounded = static_cast<int>(std::lround(v));
  if (std::abs(v - rounded) > 1e-9) {
    throw ParseError("non-integer label '" + tok + "'", line_no);
  }
  return rounded;
}

}  // namespace detail

inline Dataset load_csv(std::istream& in, bool has_header) {
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  std::string line;
  std::size_t line_no = 0;
  Eigen::Index dim = -1;
  while (std::getline(in, line)) {
    ++line_no;
    line = detail::strip_cr(line);
    if (line.empty()) continue;
    if (has_header && line_no == 1) continue;
    std::stringstream ss(line);
    std::string tok;
    std::vector<std::string> fields;
    while (std::getline(ss, tok, ',')) fields.push_back(tok);
    if (fields.size() < 2) {
      throw ParseError("expected 'label,f1,...' with at least one feature",
                       line_no);
    }
    labels.push_back(detail::parse_label(fields[0], line_no));
    std::vector<double> feats;
    for (std::size_t j = 1; j < fields.size(); ++j) {
      feats.push_back(detail::parse_double(fields[j], line_no, "feature"));
    }
    if (dim < 0) dim = static_cast<Eigen::Index>(feats.size());
    if (static_cast<Eigen::Index>(feats.size()) != dim) {
      throw ParseError("inconsistent feature count", line_no);
    }
    rows.push_back(std::move(feats));
  }
  Dataset out;
  out.features.resize(static_cast<Eigen::Index>(rows.size()), std::max<Eigen::Index>(dim, 0));
  out.labels.resize(static_cast<Eigen::Index>(labels.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (Eigen::Index j = 0; j < dim; ++j) out.features(static_cast<Eigen::Index>(i), j) = rows[i][static_cast<std::size_t>(j)];
    out.labels[static_cast<Eigen::Index>(i)] = labels[i];
  }
  out.split.assign(rows.size(), Split::kTrain);
  return out;
}

/// LIBSVM text: `label idx:val ...` with 1-based indices; omitted indices
/// are zero. Feature dimension is the maximum index seen.
inline Dataset load_libsvm(std::istream& in) {
  struct Row {
    int label;
    std::vector<std::pair<int, double>> entries;
  };
  std::vector<Row> rows;
  std::string line;
  std::size_t line_no = 0;
  int max_index = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = detail::strip_cr(line);
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string tok;
    if (!(ss >> tok)) continue;
    Row row;
    row.label = detail::parse_label(tok, line_no);
    while (ss >> tok) {
      const auto colon = tok.find(':');
      if (colon == std::string::npos) {
        throw ParseError("expected 'index:value', got '" + tok + "'", line_no);
      }
      const double raw_idx =
          detail::parse_double(tok.substr(0, colon), line_no, "index");
      const int idx = static_cast<int>(raw_idx);
      if (idx < 1 || raw_idx != idx) {
        throw ParseError("feature index must be a positive integer", line_no);
      }
      const double val =
          detail::parse_double(tok.substr(colon + 1), line_no, "value");
      row.entries.emplace_back(idx, val);
      max_index = std::max(max_index, idx);
    }
    rows.push_back(std::move(row));
  }
  Dataset out;
  out.features = Matrix::Zero(static_cast<Eigen::Index>(rows.size()), max_index);
  out.labels.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.labels[static_cast<Eigen::Index>(i)] = rows[i].label;
    for (const auto& [idx, val] : rows[i].entries) {
      out.features(static_cast<Eigen::Index>(i), idx - 1) = val;
    }
  }
  out.split.assign(rows.size(), Split::kTrain);
  return out;
}

inline Dataset load_dataset(const std::string& path, DatasetFormat format,
                            bool csv_has_header = false) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset file: " + path);
  return format == DatasetFormat::kCsv ? load_csv(in, csv_has_header)
                                       : load_libsvm(in);
}

/// Tags a deterministic random fraction of the samples as validation.
inline void tag_validation_split(Dataset& data, double val_fraction,
                                 std::uint64_t seed) {
  if (val_fraction < 0.0 || val_fraction > 1.0) {
    throw ConfigError("val_fraction must lie in [0, 1]");
  }
  std::vector<int> idx(static_cast<std::size_t>(data.num_samples()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  Rng rng(seed, /*stream=*/101);
  rng.shuffle(idx);
  const auto n_val = static_cast<std::size_t>(
      std::lround(val_fraction * static_cast<double>(idx.size())));
  data.split.assign(idx.size(), Split::kTrain);
  for (std::size_t i = 0; i < n_val; ++i) {
    data.split[static_cast<std::size_t>(idx[i])] = Split::kValidation;
  }
}

/// Deterministic worker assignment behind partition_dataset: per worker,
/// the sorted original sample indices it receives. Within each split tag
/// the shard sizes differ by at most one; the spare samples rotate across
/// workers so totals stay balanced too.
inline std::vector<std::vector<int>> partition_assignments(const Dataset& data,
                                                           int num_workers,
                                                           std::uint64_t seed) {
  data.validate();
  if (num_workers < 1) throw ConfigError("partition: need at least one worker");
  if (data.num_samples() < num_workers) {
    throw ConfigError("partition: more workers than samples");
  }
  Rng rng(seed, /*stream=*/202);
  std::vector<std::vector<int>> assigned(static_cast<std::size_t>(num_workers));
  int extra_cursor = 0;
  for (Split tag : {Split::kTrain, Split::kValidation}) {
    std::vector<int> idx = data.indices_of(tag);
    if (idx.empty()) continue;
    rng.shuffle(idx);
    const int base = static_cast<int>(idx.size()) / num_workers;
    const int extras = static_cast<int>(idx.size()) % num_workers;
    std::vector<int> take(static_cast<std::size_t>(num_workers), base);
    for (int e = 0; e < extras; ++e) {
      take[static_cast<std::size_t>((extra_cursor + e) % num_workers)] += 1;
    }
    extra_cursor = (extra_cursor + extras) % num_workers;
    std::size_t pos = 0;
    for (int w = 0; w < num_workers; ++w) {
      for (int k = 0; k < take[static_cast<std::size_t>(w)]; ++k) {
        assigned[static_cast<std::size_t>(w)].push_back(idx[pos++]);
      }
    }
  }
  for (auto& rows : assigned) std::sort(rows.begin(), rows.end());
  return assigned;
}

/// Splits samples across N workers: a disjoint cover with balanced shard
/// sizes (see partition_assignments).
inline std::vector<Dataset> partition_dataset(const Dataset& data, int num_workers,
                                              std::uint64_t seed) {
  const auto assigned = partition_assignments(data, num_workers, seed);
  std::vector<Dataset> shards;
  shards.reserve(static_cast<std::size_t>(num_workers));
  for (int w = 0; w < num_workers; ++w) {
    const auto& rows = assigned[static_cast<std::size_t>(w)];
    Dataset shard;
    shard.features.resize(static_cast<Eigen::Index>(rows.size()), data.feature_dim());
    shard.labels.resize(static_cast<Eigen::Index>(rows.size()));
    shard.split.resize(rows.size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      shard.features.row(static_cast<Eigen::Index>(r)) = data.features.row(rows[r]);
      shard.labels[static_cast<Eigen::Index>(r)] = data.labels[rows[r]];
      shard.split[r] = data.split[static_cast<std::size_t>(rows[r])];
    }
    shards.push_back(std::move(shard));
  }
  return shards;
}

/// Flips each training label with the given probability; the replacement is
/// drawn uniformly from the other observed classes, so `rate` is the realized
/// flip probability. Validation labels are left alone.
inline std::pair<Dataset, CorruptionRecord> corrupt_labels(
    const Dataset& data, double rate, std::uint64_t seed) {
  if (rate < 0.0 || rate > 1.0) throw ConfigError("corruption rate must lie in [0, 1]");
  data.validate();
  Dataset out = data;
  CorruptionRecord record;
  record.rate = rate;
  record.seed = seed;
  if (rate == 0.0) return {std::move(out), std::move(record)};

  const std::set<int> label_set = data.label_set();
  if (label_set.size() < 2) {
    throw ConfigError("label corruption needs at least two classes");
  }
  const std::vector<int> classes(label_set.begin(), label_set.end());
  Rng rng(seed, /*stream=*/303);
  for (int i = 0; i < static_cast<int>(data.num_samples()); ++i) {
    if (data.split[static_cast<std::size_t>(i)] != Split::kTrain) continue;
    if (rng.uniform01() >= rate) continue;
    // Pick among the classes other than the current label.
    const int current = out.labels[i];
    auto draw = static_cast<std::size_t>(rng.below(classes.size() - 1));
    int replacement = classes[draw];
    if (replacement == current) replacement = classes[classes.size() - 1];
    out.labels[i] = replacement;
    record.corrupted_indices.push_back(i);
  }
  return {std::move(out), std::move(record)};
}

/// Synthetic linearly separable binary data with +-1 labels.
inline Dataset make_synthetic_binary(int samples, int features,
                                     std::uint64_t seed) {
  if (samples < 1 || features < 1) {
    throw ConfigError("synthetic dataset needs samples >= 1 and features >= 1");
  }
  Rng rng(seed, /*stream=*/404);
  Vector w_true(features);
  for (int j = 0; j < features; ++j) {
    w_true[j] = rng.normal() / std::sqrt(static_cast<double>(features));
  }
  Dataset out;
  out.features.resize(samples, features);
  out.labels.resize(samples);
  for (int i = 0; i < samples; ++i) {
    for (int j = 0; j < features; ++j) out.features(i, j) = rng.normal();
    const double margin = out.features.row(i).dot(w_true);
    out.labels[i] = margin >= 0.0 ? 1 : -1;
  }
  out.split.assign(static_cast<std::size_t>(samples), Split::kTrain);
  return out;
}

}  // namespace bilevel
