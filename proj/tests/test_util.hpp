#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "lcap/tensor.hpp"

namespace lcap_test {

// Central finite difference of a scalar function w.r.t. one tensor's data.
inline std::vector<double> finite_difference(const std::function<double()>& eval,
                                             lcap::Tensor& param, double step = 1e-6) {
  std::vector<double> fd(param.data().size());
  for (std::size_t i = 0; i < fd.size(); ++i) {
    const double saved = param.data()[i];
    param.data()[i] = saved + step;
    const double up = eval();
    param.data()[i] = saved - step;
    const double down = eval();
    param.data()[i] = saved;
    fd[i] = (up - down) / (2.0 * step);
  }
  return fd;
}

inline double rel_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double max_rel_error(const std::vector<double>& a, const std::vector<double>& b,
                            double floor = 1e-6) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, rel_error(a[i], b[i], floor));
  return m;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace lcap_test
