#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "lcap/routing.hpp"
#include "lcap/tensor.hpp"

namespace lcap {

// One iteration's agreement matrix, position-averaged to [L, N] with the raw
// per-position [.., L, N] tensor optionally kept alongside.
struct AgreementSnapshot {
  std::int64_t iteration = 1;  // 1-based
  Tensor mean_assignments;     // [L, N]
  std::optional<Tensor> per_position;
};

// Mean over all leading axes of a [.., L, N] assignment tensor.
inline Tensor position_mean_assignments(const Tensor& c) {
  if (c.rank() < 2) throw ShapeError("position_mean_assignments: rank must be >= 2");
  Tensor out = c;
  while (out.rank() > 2) out = mean(out, 0);
  return out;
}

inline std::vector<AgreementSnapshot> snapshots_from_state(const RoutingState& state,
                                                           bool keep_per_position = false) {
  std::vector<AgreementSnapshot> snaps;
  snaps.reserve(state.iteration_trace.size());
  for (std::size_t t = 0; t < state.iteration_trace.size(); ++t) {
    AgreementSnapshot s;
    s.iteration = static_cast<std::int64_t>(t) + 1;
    s.mean_assignments = position_mean_assignments(state.iteration_trace[t]);
    if (keep_per_position) s.per_position = state.iteration_trace[t];
    snaps.push_back(std::move(s));
  }
  return snaps;
}

// Skewness of the agreement distribution, in nats:
//   entropy = -(1/L) sum_l sum_n C_{l->n} ln C_{l->n}
// Uniform rows give ln N for any L (ln 512 = 6.2383, the value reported for
// the uniform first iteration). Zero entries contribute 0.
inline double entropy(const Tensor& c) {
  if (c.rank() != 2) throw ShapeError("entropy: expects [L, N] assignments");
  const std::int64_t L = c.shape()[0];
  double acc = 0.0;
  for (double v : c.data()) {
    if (v > 0.0) acc += v * std::log(v);
  }
  return -acc / static_cast<double>(L);
}

// Mean pairwise cosine distance between the per-capsule assignment columns:
//   diversity = (1/C(N,2)) sum_{i<j} (1 - cos(C_i, C_j))
// Identical columns (the uniform init) score 0; orthogonal columns score 1.
// A zero-norm column contributes 0 to its pairs and sets *zero_column_flag.
inline double diversity(const Tensor& c, bool* zero_column_flag = nullptr) {
  if (c.rank() != 2) throw ShapeError("diversity: expects [L, N] assignments");
  const std::int64_t L = c.shape()[0];
  const std::int64_t N = c.shape()[1];
  if (N < 2) throw ContractError("diversity: needs at least 2 output capsules");
  if (zero_column_flag) *zero_column_flag = false;

  const auto& d = c.data();
  std::vector<double> norms(static_cast<std::size_t>(N), 0.0);
  for (std::int64_t n = 0; n < N; ++n) {
    double s = 0.0;
    for (std::int64_t l = 0; l < L; ++l) {
      const double v = d[static_cast<std::size_t>(l * N + n)];
      s += v * v;
    }
    norms[static_cast<std::size_t>(n)] = std::sqrt(s);
    if (s == 0.0 && zero_column_flag) *zero_column_flag = true;
  }
  double acc = 0.0;
  for (std::int64_t i = 0; i < N; ++i) {
    for (std::int64_t j = i + 1; j < N; ++j) {
      const double ni = norms[static_cast<std::size_t>(i)];
      const double nj = norms[static_cast<std::size_t>(j)];
      if (ni == 0.0 || nj == 0.0) continue;
      bool identical = true;
      double dot = 0.0;
      for (std::int64_t l = 0; l < L; ++l) {
        const double a = d[static_cast<std::size_t>(l * N + i)];
        const double b = d[static_cast<std::size_t>(l * N + j)];
        identical = identical && a == b;
        dot += a * b;
      }
      if (identical) continue;  // distance of a column to itself is exactly 0
      const double cosine = std::min(1.0, std::max(-1.0, dot / (ni * nj)));
      acc += 1.0 - cosine;
    }
  }
  const double pairs = static_cast<double>(N) * static_cast<double>(N - 1) / 2.0;
  return acc / pairs;
}

// ---------------------------------------------------------------------------
// Heatmap export: CSV (6-decimal fixed point) and binary 8-bit PGM where
// pixel = round(255 * (1 - C / max(C))), so higher agreement is darker.
// ---------------------------------------------------------------------------

inline void write_agreement_csv(const Tensor& c, const std::string& path) {
  if (c.rank() != 2) throw ShapeError("write_agreement_csv: expects [L, N]");
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open for writing: " + path);
  const std::int64_t L = c.shape()[0];
  const std::int64_t N = c.shape()[1];
  char buf[64];
  for (std::int64_t l = 0; l < L; ++l) {
    for (std::int64_t n = 0; n < N; ++n) {
      std::snprintf(buf, sizeof(buf), "%.6f", c.data()[static_cast<std::size_t>(l * N + n)]);
      os << buf;
      if (n + 1 < N) os << ",";
    }
    os << "\n";
  }
  if (!os) throw IoError("write failed: " + path);
}

inline Tensor read_agreement_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path);
  std::vector<double> values;
  std::int64_t rows = 0;
  std::int64_t cols = -1;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::int64_t c = 0;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      values.push_back(std::stod(cell));
      ++c;
    }
    if (cols < 0) cols = c;
    if (c != cols) throw IoError("ragged CSV in " + path);
    ++rows;
  }
  return Tensor::from_data({rows, cols}, std::move(values));
}

inline void write_agreement_pgm(const Tensor& c, const std::string& path) {
  if (c.rank() != 2) throw ShapeError("write_agreement_pgm: expects [L, N]");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for writing: " + path);
  const std::int64_t L = c.shape()[0];
  const std::int64_t N = c.shape()[1];
  double mx = 0.0;
  for (double v : c.data()) mx = std::max(mx, v);
  os << "P5\n" << N << " " << L << "\n255\n";
  for (double v : c.data()) {
    const double rel = mx > 0.0 ? v / mx : 0.0;
    const int pix = static_cast<int>(std::lround(255.0 * (1.0 - rel)));
    os.put(static_cast<char>(pix < 0 ? 0 : (pix > 255 ? 255 : pix)));
  }
  if (!os) throw IoError("write failed: " + path);
}

inline void export_heatmap(const AgreementSnapshot& snapshot, const std::string& csv_path,
                           const std::string& pgm_path) {
  write_agreement_csv(snapshot.mean_assignments, csv_path);
  write_agreement_pgm(snapshot.mean_assignments, pgm_path);
}

}  // namespace lcap
