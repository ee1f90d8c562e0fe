#pragma once

// Deliberately naive reference implementations, independent of the library's
// tensor and tape machinery. Tests compare the real ops against these.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

namespace oracle {

// Minimal sum of squared differences over all one-to-one pairings of two
// equal-size 1-d point sets, by exhaustive permutation search. O(M!), so
// keep M small (<= 8).
inline double min_pairing_cost(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<std::size_t> perm(b.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  double best = std::numeric_limits<double>::infinity();
  do {
    double cost = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double d = a[i] - b[perm[i]];
      cost += d * d;
    }
    best = std::min(best, cost);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

// Average over directions of the exhaustive 1-d pairing cost of the
// projected point sets. `src`/`tgt` are rows of d-dim points, `dirs` rows of
// d-dim directions.
inline double sliced_cost(const std::vector<std::vector<double>>& src,
                          const std::vector<std::vector<double>>& tgt,
                          const std::vector<std::vector<double>>& dirs) {
  double total = 0.0;
  for (const auto& dir : dirs) {
    std::vector<double> ps, pt;
    for (const auto& x : src) {
      double v = 0.0;
      for (std::size_t j = 0; j < dir.size(); ++j) v += dir[j] * x[j];
      ps.push_back(v);
    }
    for (const auto& x : tgt) {
      double v = 0.0;
      for (std::size_t j = 0; j < dir.size(); ++j) v += dir[j] * x[j];
      pt.push_back(v);
    }
    total += min_pairing_cost(ps, pt);
  }
  return total / static_cast<double>(dirs.size());
}

// Supervised contrastive loss written out longhand: normalize rows, take
// pairwise dot products over temperature, and for every anchor average the
// negative log-probability of each positive against all other rows.
// The row normalization matches the library's 1/sqrt(sum + eps) convention
// so values agree to tight tolerances.
inline double supcon(const std::vector<std::vector<double>>& emb,
                     const std::vector<std::int64_t>& labels, double tau,
                     double eps = 1e-12) {
  const std::size_t n = emb.size();
  std::vector<std::vector<double>> z(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (double v : emb[i]) s += v * v;
    const double inv = 1.0 / std::sqrt(s + eps);
    for (double v : emb[i]) z[i].push_back(v * inv);
  }
  auto dot = [&](std::size_t i, std::size_t j) {
    double s = 0.0;
    for (std::size_t k = 0; k < z[i].size(); ++k) s += z[i][k] * z[j][k];
    return s;
  };
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double denom = 0.0;
    for (std::size_t a = 0; a < n; ++a)
      if (a != i) denom += std::exp(dot(i, a) / tau);
    std::size_t positives = 0;
    for (std::size_t p = 0; p < n; ++p)
      if (p != i && labels[p] == labels[i]) ++positives;
    for (std::size_t p = 0; p < n; ++p) {
      if (p == i || labels[p] != labels[i]) continue;
      loss -= std::log(std::exp(dot(i, p) / tau) / denom) /
              static_cast<double>(positives);
    }
  }
  return loss;
}

}  // namespace oracle
