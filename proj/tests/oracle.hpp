#pragma once

// Independent scalar reference implementations of the loss terms and PCC,
// written as flat loops over plain arrays. They share nothing with the
// tensor/tape path they are used to check, except the stated conventions
// (epsilon-guarded norms, per-pair means).

#include <cmath>
#include <cstddef>
#include <map>
#include <span>
#include <stdexcept>
#include <vector>

namespace oracle {

inline constexpr double kNormEps = 1e-12;

inline double norm_guarded(std::span<const double> v) {
  double acc = kNormEps;
  for (double x : v) acc += x * x;
  return std::sqrt(acc);
}

inline double distance_guarded(std::span<const double> a, std::span<const double> b) {
  double acc = kNormEps;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

inline std::vector<double> unit(std::span<const double> v) {
  const double n = norm_guarded(v);
  std::vector<double> out(v.begin(), v.end());
  for (double& x : out) x /= n;
  return out;
}

// One granularity x aspect pair: mean squared error over valid elements.
inline double mse_pair(std::span<const double> pred, std::span<const double> target,
                       std::span<const double> mask) {
  double acc = 0.0;
  double count = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double m = mask.empty() ? 1.0 : mask[i];
    if (m == 0.0) continue;
    const double d = pred[i] - target[i];
    acc += d * d;
    count += 1.0;
  }
  return acc / count;
}

// Token rows as vectors; mask/ids/scores flat over rows.
struct TokenView {
  std::vector<std::vector<double>> embeddings;
  std::vector<int> ids;
  std::vector<double> mask;
  std::vector<double> scores;
};

inline std::map<int, std::vector<double>> centers(const TokenView& view, bool normalize) {
  std::map<int, std::pair<std::vector<double>, int>> sums;
  for (std::size_t r = 0; r < view.embeddings.size(); ++r) {
    if (view.mask[r] == 0.0) continue;
    const std::vector<double> e =
        normalize ? unit(view.embeddings[r]) : view.embeddings[r];
    auto& [sum, count] = sums[view.ids[r]];
    if (sum.empty()) sum.assign(e.size(), 0.0);
    for (std::size_t j = 0; j < e.size(); ++j) sum[j] += e[j];
    ++count;
  }
  std::map<int, std::vector<double>> out;
  for (auto& [cat, sc] : sums) {
    std::vector<double> c = sc.first;
    for (double& x : c) x /= sc.second;
    out.emplace(cat, std::move(c));
  }
  return out;
}

// Literal ordered double sum: -(1/(M(M-1))) sum_i sum_{j != i} ||ci - cj|| * m.
inline double phonemic_distinction(const std::map<int, std::vector<double>>& cs, double margin) {
  const int m_count = static_cast<int>(cs.size());
  if (m_count < 2) return 0.0;
  double acc = 0.0;
  for (const auto& [ci, vi] : cs) {
    for (const auto& [cj, vj] : cs) {
      if (ci == cj) continue;
      acc += distance_guarded(vi, vj) * margin;
    }
  }
  return -acc / (static_cast<double>(m_count) * (m_count - 1));
}

inline double ordinal_tightness(const TokenView& view, bool normalize,
                                const std::map<int, std::vector<double>>& cs) {
  double acc = 0.0;
  int n = 0;
  for (std::size_t r = 0; r < view.embeddings.size(); ++r) {
    if (view.mask[r] == 0.0) continue;
    ++n;
    const std::vector<double> e =
        normalize ? unit(view.embeddings[r]) : view.embeddings[r];
    acc += distance_guarded(e, cs.at(view.ids[r])) * view.scores[r];
  }
  return acc / n;
}

inline double pearson(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size() || xs.size() < 2) throw std::runtime_error("oracle pearson: bad input");
  const double n = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace oracle
