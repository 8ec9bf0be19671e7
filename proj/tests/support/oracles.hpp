#pragma once

// Reference implementations used only by tests. Deliberately naive: the
// metric oracles rescan everything per threshold and the gradient oracle
// uses central finite differences, so they share no code path with the
// library routines they check.

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>
#include <vector>

#include "cnd/linalg.hpp"
#include "cnd/rng.hpp"

namespace oracle {

using cnd::Mat;

// O(|pos|*|neg|) pairwise AUC with half credit for ties.
inline double auc_pairwise(const std::vector<double>& pos, const std::vector<double>& neg) {
  long long wins2 = 0;  // 2*wins + ties, exact in integers
  for (double p : pos)
    for (double n : neg) {
      if (p > n)
        wins2 += 2;
      else if (p == n)
        wins2 += 1;
    }
  return static_cast<double>(wins2) /
         (2.0 * static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

// Precision-recall area by explicit rescan at each distinct threshold,
// thresholds descending, ties grouped.
inline double aupr_rescan(const std::vector<double>& pos, const std::vector<double>& neg) {
  std::set<double, std::greater<double>> thresholds(pos.begin(), pos.end());
  thresholds.insert(neg.begin(), neg.end());
  double area = 0.0;
  double prev_recall = 0.0;
  for (double tau : thresholds) {
    long tp = 0, fp = 0;
    for (double p : pos)
      if (p >= tau) ++tp;
    for (double n : neg)
      if (n >= tau) ++fp;
    const double recall = static_cast<double>(tp) / static_cast<double>(pos.size());
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    area += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return area;
}

// Detection error by rescan over candidate thresholds (distinct scores and
// +-infinity), equal priors.
inline double der_rescan(const std::vector<double>& pos, const std::vector<double>& neg) {
  std::set<double> taus(pos.begin(), pos.end());
  taus.insert(neg.begin(), neg.end());
  std::vector<double> candidates(taus.begin(), taus.end());
  candidates.push_back(-std::numeric_limits<double>::infinity());
  candidates.push_back(std::numeric_limits<double>::infinity());
  double best = std::numeric_limits<double>::infinity();
  for (double tau : candidates) {
    long in_below = 0, out_above = 0;
    for (double p : pos)
      if (p <= tau) ++in_below;
    for (double n : neg)
      if (n > tau) ++out_above;
    const double err = 0.5 * static_cast<double>(in_below) / static_cast<double>(pos.size()) +
                       0.5 * static_cast<double>(out_above) / static_cast<double>(neg.size());
    best = std::min(best, err);
  }
  return best;
}

// Central finite differences of a scalar objective with respect to every
// entry of `x`. The objective must not mutate shared state.
inline Mat finite_difference(const std::function<double(const Mat&)>& f, const Mat& x,
                             double h = 1e-5) {
  Mat g(x.rows(), x.cols());
  Mat xp = x;
  for (int j = 0; j < x.cols(); ++j)
    for (int i = 0; i < x.rows(); ++i) {
      const double orig = xp(i, j);
      xp(i, j) = orig + h;
      const double fp = f(xp);
      xp(i, j) = orig - h;
      const double fm = f(xp);
      xp(i, j) = orig;
      g(i, j) = (fp - fm) / (2.0 * h);
    }
  return g;
}

// Componentwise gradient agreement: |a - b| <= tol * max(1, |a|, |b|).
inline bool grad_close(const Mat& got, const Mat& want, double tol = 1e-4) {
  if (got.rows() != want.rows() || got.cols() != want.cols()) return false;
  for (int j = 0; j < got.cols(); ++j)
    for (int i = 0; i < got.rows(); ++i) {
      const double scale = std::max({1.0, std::abs(got(i, j)), std::abs(want(i, j))});
      if (std::abs(got(i, j) - want(i, j)) > tol * scale) return false;
    }
  return true;
}

// Random score sets with deliberate tie mass: values drawn from a small
// lattice so cross-set ties are common.
inline std::vector<double> lattice_scores(cnd::Rng& rng, size_t n, int lattice = 13) {
  std::vector<double> v(n);
  for (auto& s : v)
    s = static_cast<double>(rng.uniform_int(static_cast<uint64_t>(lattice))) /
        static_cast<double>(lattice);
  return v;
}

}  // namespace oracle
