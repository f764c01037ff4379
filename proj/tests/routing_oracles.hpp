#pragma once

// Self-contained scalar re-implementations of the two iterative routing
// procedures, written directly from their step-by-step definitions with plain
// loops and no shared code with the library. The suites compare the library's
// tensor implementations against these.

#include <cmath>
#include <vector>

namespace routing_oracle {

struct Grid {
  int L = 0;
  int N = 0;
  int H = 0;
  // votes[l][n][h] flattened
  std::vector<double> v;
  double& at(int l, int n, int h) { return v[static_cast<std::size_t>((l * N + n) * H + h)]; }
  double at(int l, int n, int h) const { return v[static_cast<std::size_t>((l * N + n) * H + h)]; }
};

inline std::vector<double> softmax_row(const std::vector<double>& x) {
  double mx = x[0];
  for (double v : x) mx = std::max(mx, v);
  std::vector<double> out(x.size());
  double denom = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(x[i] - mx);
    denom += out[i];
  }
  for (auto& v : out) v /= denom;
  return out;
}

inline std::vector<double> squash_vec(const std::vector<double>& s) {
  double n2 = 0;
  for (double v : s) n2 += v * v;
  std::vector<double> out(s.size(), 0.0);
  if (n2 == 0.0) return out;
  const double norm = std::sqrt(n2);
  const double scale = n2 / (1.0 + n2) / norm;
  for (std::size_t i = 0; i < s.size(); ++i) out[i] = s[i] * scale;
  return out;
}

struct DynamicResult {
  std::vector<double> omega;                   // [N][H]
  std::vector<std::vector<double>> c_per_iter;  // T entries of [L][N]
};

// Iterative dynamic routing for one position.
inline DynamicResult dynamic_routing(const Grid& votes, int iterations) {
  const int L = votes.L, N = votes.N, H = votes.H;
  std::vector<double> b(static_cast<std::size_t>(L * N), 0.0);
  DynamicResult res;
  res.omega.assign(static_cast<std::size_t>(N * H), 0.0);
  for (int t = 0; t < iterations; ++t) {
    // routing softmax per input capsule
    std::vector<double> c(static_cast<std::size_t>(L * N));
    for (int l = 0; l < L; ++l) {
      std::vector<double> row(static_cast<std::size_t>(N));
      for (int n = 0; n < N; ++n) row[static_cast<std::size_t>(n)] = b[static_cast<std::size_t>(l * N + n)];
      auto sm = softmax_row(row);
      for (int n = 0; n < N; ++n) c[static_cast<std::size_t>(l * N + n)] = sm[static_cast<std::size_t>(n)];
    }
    res.c_per_iter.push_back(c);
    // weighted sum and squash
    for (int n = 0; n < N; ++n) {
      std::vector<double> s(static_cast<std::size_t>(H), 0.0);
      for (int l = 0; l < L; ++l) {
        for (int h = 0; h < H; ++h) {
          s[static_cast<std::size_t>(h)] += c[static_cast<std::size_t>(l * N + n)] * votes.at(l, n, h);
        }
      }
      auto om = squash_vec(s);
      for (int h = 0; h < H; ++h) res.omega[static_cast<std::size_t>(n * H + h)] = om[static_cast<std::size_t>(h)];
    }
    // agreement update
    for (int l = 0; l < L; ++l) {
      for (int n = 0; n < N; ++n) {
        double dot = 0;
        for (int h = 0; h < H; ++h) dot += res.omega[static_cast<std::size_t>(n * H + h)] * votes.at(l, n, h);
        b[static_cast<std::size_t>(l * N + n)] += dot;
      }
    }
  }
  return res;
}

struct EmResult {
  std::vector<double> omega;                    // [N][H]
  std::vector<double> mu;                       // [N][H]
  std::vector<double> sigma2;                   // [N][H]
  std::vector<double> a_out;                    // [N]
  std::vector<double> c_final;                  // [L][N]
  std::vector<std::vector<double>> c_per_iter;  // T entries, C before each M-step
};

// Iterative EM routing for one position.
inline EmResult em_routing(const Grid& votes, const std::vector<double>& a_in, int iterations,
                           const std::vector<double>& lambdas, double beta_a, double beta_mu,
                           double floor) {
  const int L = votes.L, N = votes.N, H = votes.H;
  const double kTwoPi = 6.283185307179586;
  EmResult res;
  std::vector<double> c(static_cast<std::size_t>(L * N), 1.0 / N);
  std::vector<double> mu(static_cast<std::size_t>(N * H), 0.0);
  std::vector<double> sig2(static_cast<std::size_t>(N * H), 0.0);
  std::vector<double> a_out(static_cast<std::size_t>(N), 0.0);

  for (int t = 0; t < iterations; ++t) {
    res.c_per_iter.push_back(c);
    // ---- M-step: scale assignments by input activations, fit Gaussians
    std::vector<double> cp(static_cast<std::size_t>(L * N));
    for (int l = 0; l < L; ++l) {
      for (int n = 0; n < N; ++n) {
        cp[static_cast<std::size_t>(l * N + n)] =
            c[static_cast<std::size_t>(l * N + n)] * a_in[static_cast<std::size_t>(l)];
      }
    }
    for (int n = 0; n < N; ++n) {
      double denom = 0;
      for (int l = 0; l < L; ++l) denom += cp[static_cast<std::size_t>(l * N + n)];
      double cost_total = 0;
      for (int h = 0; h < H; ++h) {
        double m = 0;
        if (denom > 0) {
          for (int l = 0; l < L; ++l) m += cp[static_cast<std::size_t>(l * N + n)] * votes.at(l, n, h);
          m /= denom;
        }
        double var = 0;
        if (denom > 0) {
          for (int l = 0; l < L; ++l) {
            const double dlt = votes.at(l, n, h) - m;
            var += cp[static_cast<std::size_t>(l * N + n)] * dlt * dlt;
          }
          var /= denom;
        }
        var = std::max(var, floor);
        mu[static_cast<std::size_t>(n * H + h)] = m;
        sig2[static_cast<std::size_t>(n * H + h)] = var;
        cost_total += (std::log(std::sqrt(var)) + (1.0 + std::log(kTwoPi)) / 2.0) * denom;
      }
      const double z = lambdas[static_cast<std::size_t>(t)] * (beta_a - beta_mu * denom - cost_total);
      a_out[static_cast<std::size_t>(n)] =
          z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    }
    // ---- E-step: re-normalize assignments from Gaussian log-densities
    for (int l = 0; l < L; ++l) {
      std::vector<double> score(static_cast<std::size_t>(N));
      for (int n = 0; n < N; ++n) {
        double logp = 0;
        for (int h = 0; h < H; ++h) {
          const double var = sig2[static_cast<std::size_t>(n * H + h)];
          const double dlt = votes.at(l, n, h) - mu[static_cast<std::size_t>(n * H + h)];
          logp += -0.5 * std::log(kTwoPi * var) - dlt * dlt / (2.0 * var);
        }
        score[static_cast<std::size_t>(n)] =
            std::log(std::max(a_out[static_cast<std::size_t>(n)], 1e-300)) + logp;
      }
      auto sm = softmax_row(score);
      for (int n = 0; n < N; ++n) c[static_cast<std::size_t>(l * N + n)] = sm[static_cast<std::size_t>(n)];
    }
  }
  res.mu = mu;
  res.sigma2 = sig2;
  res.a_out = a_out;
  res.c_final = c;
  res.omega.assign(static_cast<std::size_t>(N * H), 0.0);
  for (int n = 0; n < N; ++n) {
    for (int h = 0; h < H; ++h) {
      res.omega[static_cast<std::size_t>(n * H + h)] =
          a_out[static_cast<std::size_t>(n)] * mu[static_cast<std::size_t>(n * H + h)];
    }
  }
  return res;
}

}  // namespace routing_oracle
