#pragma once

// Server-side aggregation rules that screen updates by Euclidean distance or
// cosine similarity.

#include "fedpoison/common.hpp"

#include <algorithm>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace fedpoison {

struct AggregationReport {
  VectorXd aggregate;
  std::vector<bool> accepted;
  VectorXd scores;
  std::optional<double> threshold;
};

inline VectorXd fedavg(const UpdateMatrix& updates, std::span<const double> weights) {
  if (updates.rows() < 1) throw DefenseError("fedavg: no updates");
  if (weights.size() != static_cast<std::size_t>(updates.rows()))
    throw DefenseError("fedavg: one weight per update required");
  double total = 0.0;
  for (double w : weights) {
    if (w < 0.0) throw DefenseError("fedavg: negative weight");
    total += w;
  }
  if (!(total > 0.0)) throw DefenseError("fedavg: weights sum to zero");
  VectorXd agg = VectorXd::Zero(updates.cols());
  for (Index i = 0; i < updates.rows(); ++i)
    if (weights[static_cast<std::size_t>(i)] != 0.0)
      agg += weights[static_cast<std::size_t>(i)] * updates.row(i).transpose();
  return agg / total;
}

inline VectorXd mean_update(const UpdateMatrix& updates) {
  return updates.colwise().mean().transpose();
}

inline MatrixXd pairwise_sq_distances(const UpdateMatrix& updates) {
  const Index n = updates.rows();
  MatrixXd d = MatrixXd::Zero(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j) d(i, j) = d(j, i) = (updates.row(i) - updates.row(j)).squaredNorm();
  return d;
}

// ---------------------------------------------------------------------------
// Krum / Multi-Krum

struct KrumResult {
  Index selected = 0;
  VectorXd scores;
};

// score(i) = sum of squared distances to the n - f - 2 nearest other updates.
inline VectorXd krum_scores(const UpdateMatrix& updates, int f) {
  const Index n = updates.rows();
  if (f < 0 || n < f + 3)
    throw DefenseError(detail::concat("krum requires n >= f + 3 (n=", n, ", f=", f, ")"));
  const Index neighbours = n - f - 2;
  const MatrixXd d = pairwise_sq_distances(updates);
  VectorXd scores(n);
  std::vector<double> row;
  for (Index i = 0; i < n; ++i) {
    row.clear();
    for (Index j = 0; j < n; ++j)
      if (j != i) row.push_back(d(i, j));
    std::partial_sort(row.begin(), row.begin() + neighbours, row.end());
    scores[i] = std::accumulate(row.begin(), row.begin() + neighbours, 0.0);
  }
  return scores;
}

// Indices ordered by ascending score, ties toward the lower index.
inline std::vector<Index> rank_by_score(const VectorXd& scores) {
  std::vector<Index> order(static_cast<std::size_t>(scores.size()));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return scores[a] < scores[b]; });
  return order;
}

inline KrumResult krum(const UpdateMatrix& updates, int f) {
  KrumResult r;
  r.scores = krum_scores(updates, f);
  r.selected = rank_by_score(r.scores).front();
  return r;
}

struct MultiKrumResult {
  std::vector<Index> selected;
  VectorXd aggregate;
  VectorXd scores;
};

inline MultiKrumResult multi_krum(const UpdateMatrix& updates, int f, int m) {
  MultiKrumResult r;
  r.scores = krum_scores(updates, f);
  const Index n = updates.rows();
  if (m < 1 || m > n - f - 2)
    throw DefenseError(detail::concat("multi_krum requires 1 <= m <= n - f - 2 (m=", m, ")"));
  auto order = rank_by_score(r.scores);
  r.selected.assign(order.begin(), order.begin() + m);
  r.aggregate = VectorXd::Zero(updates.cols());
  for (Index i : r.selected) r.aggregate += updates.row(i).transpose();
  r.aggregate /= static_cast<double>(m);
  return r;
}

// ---------------------------------------------------------------------------
// Coordinate-wise statistics

inline VectorXd trimmed_mean(const UpdateMatrix& updates, int beta) {
  const Index n = updates.rows();
  if (beta < 0 || n <= 2 * static_cast<Index>(beta))
    throw DefenseError(detail::concat("trimmed_mean requires n > 2*beta (n=", n, ", beta=", beta, ")"));
  VectorXd out(updates.cols());
  std::vector<double> col(static_cast<std::size_t>(n));
  for (Index c = 0; c < updates.cols(); ++c) {
    for (Index i = 0; i < n; ++i) col[static_cast<std::size_t>(i)] = updates(i, c);
    std::sort(col.begin(), col.end());
    double s = 0.0;
    for (Index i = beta; i < n - beta; ++i) s += col[static_cast<std::size_t>(i)];
    out[c] = s / static_cast<double>(n - 2 * beta);
  }
  return out;
}

inline VectorXd coord_median(const UpdateMatrix& updates) {
  const Index n = updates.rows();
  if (n < 1) throw DefenseError("coord_median: no updates");
  VectorXd out(updates.cols());
  std::vector<double> col(static_cast<std::size_t>(n));
  const auto mid = static_cast<std::size_t>(n / 2);
  for (Index c = 0; c < updates.cols(); ++c) {
    for (Index i = 0; i < n; ++i) col[static_cast<std::size_t>(i)] = updates(i, c);
    std::nth_element(col.begin(), col.begin() + static_cast<long>(mid), col.end());
    const double hi = col[mid];
    if (n % 2 == 1) {
      out[c] = hi;
    } else {
      const double lo = *std::max_element(col.begin(), col.begin() + static_cast<long>(mid));
      out[c] = 0.5 * (lo + hi);
    }
  }
  return out;
}

struct GeometricMedianResult {
  VectorXd point;
  int iterations = 0;
  bool converged = false;
};

// Weiszfeld iteration from the coordinate mean.
inline GeometricMedianResult geometric_median(const UpdateMatrix& updates, double tol = 1e-10,
                                              int max_iter = 1000) {
  if (updates.rows() < 1) throw DefenseError("geometric_median: no updates");
  if (!(tol > 0.0)) throw DefenseError("geometric_median: tol must be > 0");
  constexpr double kEps = 1e-12;
  GeometricMedianResult r;
  r.point = mean_update(updates);
  for (int it = 0; it < max_iter; ++it) {
    VectorXd num = VectorXd::Zero(updates.cols());
    double den = 0.0;
    for (Index i = 0; i < updates.rows(); ++i) {
      const double w = 1.0 / std::max((updates.row(i).transpose() - r.point).norm(), kEps);
      num += w * updates.row(i).transpose();
      den += w;
    }
    VectorXd next = num / den;
    const double step = (next - r.point).norm();
    r.point = std::move(next);
    if (step < tol) {
      r.iterations = it;
      r.converged = true;
      return r;
    }
  }
  r.iterations = max_iter;
  return r;
}

inline double geometric_median_objective(const UpdateMatrix& updates, const VectorXd& y) {
  double s = 0.0;
  for (Index i = 0; i < updates.rows(); ++i) s += (updates.row(i).transpose() - y).norm();
  return s;
}

// ---------------------------------------------------------------------------
// Dynamic cosine-similarity filter

// s_i = cos(u_i, reference); tau = mean(s) - lambda * popstd(s); keep s_i >= tau.
inline AggregationReport cosine_threshold_filter(const UpdateMatrix& updates, const VectorXd& reference,
                                                 double lambda) {
  const Index n = updates.rows();
  if (n < 2) throw DefenseError("cosine_threshold_filter: needs at least 2 updates");
  if (reference.size() != updates.cols()) throw DefenseError("cosine_threshold_filter: reference dim mismatch");
  if (reference.norm() == 0.0) throw DefenseError("cosine_threshold_filter: reference is zero");

  AggregationReport rep;
  rep.scores.resize(n);
  for (Index i = 0; i < n; ++i) rep.scores[i] = cosine(updates.row(i).transpose(), reference);
  const auto [mean, sd] = mean_and_pop_std(rep.scores);
  const double tau = mean - lambda * sd;
  rep.threshold = tau;
  // Rounding in the mean can put identical scores one ulp below tau.
  constexpr double kSlack = 1e-12;
  rep.accepted.resize(static_cast<std::size_t>(n));
  rep.aggregate = VectorXd::Zero(updates.cols());
  Index kept = 0;
  for (Index i = 0; i < n; ++i) {
    const bool ok = rep.scores[i] >= tau - kSlack;
    rep.accepted[static_cast<std::size_t>(i)] = ok;
    if (ok) {
      rep.aggregate += updates.row(i).transpose();
      ++kept;
    }
  }
  if (kept == 0) throw DefenseError("no updates survive filter");
  rep.aggregate /= static_cast<double>(kept);
  return rep;
}

// ---------------------------------------------------------------------------
// Dispatcher used by the round loop

enum class DefenseKind { kFedAvg, kKrum, kMultiKrum, kTrimmedMean, kCoordMedian, kGeometricMedian, kCosineFilter };

inline const std::vector<std::pair<DefenseKind, std::string>>& defense_names() {
  static const std::vector<std::pair<DefenseKind, std::string>> names{
      {DefenseKind::kFedAvg, "fedavg"},
      {DefenseKind::kKrum, "krum"},
      {DefenseKind::kMultiKrum, "multi_krum"},
      {DefenseKind::kTrimmedMean, "trimmed_mean"},
      {DefenseKind::kCoordMedian, "coord_median"},
      {DefenseKind::kGeometricMedian, "geometric_median"},
      {DefenseKind::kCosineFilter, "cosine_filter"},
  };
  return names;
}

inline std::string to_string(DefenseKind k) {
  for (const auto& [kind, name] : defense_names())
    if (kind == k) return name;
  return "unknown";
}

inline std::optional<DefenseKind> parse_defense(const std::string& s) {
  for (const auto& [kind, name] : defense_names())
    if (name == s) return kind;
  return std::nullopt;
}

struct DefenseParams {
  DefenseKind kind = DefenseKind::kCosineFilter;
  int f = 2;
  int m = 2;
  int beta = 2;
  double lambda = 1.5;
  double gm_tol = 1e-10;
  int gm_max_iter = 1000;
};

// Runs the configured rule. Rules without a per-client score report each
// update's Euclidean distance to the aggregate.
inline AggregationReport apply_defense(const DefenseParams& p, const UpdateMatrix& updates,
                                       std::span<const double> weights, const VectorXd& reference) {
  const Index n = updates.rows();
  AggregationReport rep;
  rep.accepted.assign(static_cast<std::size_t>(n), true);
  auto distance_scores = [&](const VectorXd& agg) {
    VectorXd s(n);
    for (Index i = 0; i < n; ++i) s[i] = (updates.row(i).transpose() - agg).norm();
    return s;
  };
  switch (p.kind) {
    case DefenseKind::kFedAvg:
      rep.aggregate = fedavg(updates, weights);
      rep.scores = distance_scores(rep.aggregate);
      break;
    case DefenseKind::kKrum: {
      auto k = krum(updates, p.f);
      rep.accepted.assign(static_cast<std::size_t>(n), false);
      rep.accepted[static_cast<std::size_t>(k.selected)] = true;
      rep.aggregate = updates.row(k.selected).transpose();
      rep.scores = k.scores;
      break;
    }
    case DefenseKind::kMultiKrum: {
      auto k = multi_krum(updates, p.f, p.m);
      rep.accepted.assign(static_cast<std::size_t>(n), false);
      for (Index i : k.selected) rep.accepted[static_cast<std::size_t>(i)] = true;
      rep.aggregate = k.aggregate;
      rep.scores = k.scores;
      break;
    }
    case DefenseKind::kTrimmedMean:
      rep.aggregate = trimmed_mean(updates, p.beta);
      rep.scores = distance_scores(rep.aggregate);
      break;
    case DefenseKind::kCoordMedian:
      rep.aggregate = coord_median(updates);
      rep.scores = distance_scores(rep.aggregate);
      break;
    case DefenseKind::kGeometricMedian:
      rep.aggregate = geometric_median(updates, p.gm_tol, p.gm_max_iter).point;
      rep.scores = distance_scores(rep.aggregate);
      break;
    case DefenseKind::kCosineFilter:
      return cosine_threshold_filter(updates, reference, p.lambda);
  }
  return rep;
}

}  // namespace fedpoison
