#pragma once

// Independent reference implementations used only by the tests. None of these
// call into the library's numerical routines.

#include "fedpoison/common.hpp"
#include "fedpoison/grmp.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace oracle {

using fedpoison::Index;
using fedpoison::MatrixXd;
using fedpoison::UpdateMatrix;
using fedpoison::VectorXd;

inline UpdateMatrix random_matrix(std::mt19937_64& rng, Index rows, Index cols, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  UpdateMatrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = nd(rng);
  return m;
}

inline VectorXd random_vector(std::mt19937_64& rng, Index n, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  VectorXd v(n);
  for (Index i = 0; i < n; ++i) v[i] = nd(rng);
  return v;
}

inline MatrixXd random_graph(std::mt19937_64& rng, Index n, double p) {
  std::bernoulli_distribution edge(p);
  MatrixXd A = MatrixXd::Zero(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j)
      if (edge(rng)) A(i, j) = A(j, i) = 1.0;
  return A;
}

// FNV-1a written out byte by byte.
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h = h ^ c;
    h = h * 0x100000001b3ULL;
  }
  return h;
}

inline double dist2(const UpdateMatrix& u, Index a, Index b) {
  double s = 0.0;
  for (Index c = 0; c < u.cols(); ++c) s += (u(a, c) - u(b, c)) * (u(a, c) - u(b, c));
  return s;
}

// Krum score by exhaustive search: the minimum, over every subset of n-f-2
// other points, of the summed squared distances.
inline std::vector<double> krum_scores_bruteforce(const UpdateMatrix& u, int f) {
  const Index n = u.rows();
  const Index k = n - f - 2;
  std::vector<double> out(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    std::vector<Index> others;
    for (Index j = 0; j < n; ++j)
      if (j != i) others.push_back(j);
    double best = std::numeric_limits<double>::infinity();
    const unsigned total = 1u << others.size();
    for (unsigned mask = 0; mask < total; ++mask) {
      if (std::popcount(mask) != k) continue;
      double s = 0.0;
      for (std::size_t b = 0; b < others.size(); ++b)
        if (mask & (1u << b)) s += dist2(u, i, others[b]);
      best = std::min(best, s);
    }
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

// Lowest score, lowest index on ties.
inline Index argmin_first(const std::vector<double>& s) {
  Index best = 0;
  for (std::size_t i = 1; i < s.size(); ++i)
    if (s[i] < s[static_cast<std::size_t>(best)]) best = static_cast<Index>(i);
  return best;
}

// m lowest scores by repeated selection.
inline std::vector<Index> select_m_lowest(std::vector<double> s, int m) {
  std::vector<Index> out;
  for (int r = 0; r < m; ++r) {
    const Index i = argmin_first(s);
    out.push_back(i);
    s[static_cast<std::size_t>(i)] = std::numeric_limits<double>::infinity();
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline VectorXd trimmed_mean_sort(const UpdateMatrix& u, int beta) {
  VectorXd out(u.cols());
  for (Index c = 0; c < u.cols(); ++c) {
    std::vector<double> col;
    for (Index r = 0; r < u.rows(); ++r) col.push_back(u(r, c));
    std::sort(col.begin(), col.end());
    double s = 0.0;
    int k = 0;
    for (std::size_t r = static_cast<std::size_t>(beta); r + static_cast<std::size_t>(beta) < col.size(); ++r, ++k)
      s += col[r];
    out[c] = s / k;
  }
  return out;
}

inline VectorXd median_sort(const UpdateMatrix& u) {
  VectorXd out(u.cols());
  for (Index c = 0; c < u.cols(); ++c) {
    std::vector<double> col;
    for (Index r = 0; r < u.rows(); ++r) col.push_back(u(r, c));
    std::sort(col.begin(), col.end());
    const std::size_t n = col.size();
    out[c] = n % 2 ? col[n / 2] : 0.5 * (col[n / 2 - 1] + col[n / 2]);
  }
  return out;
}

inline double sum_dist(const UpdateMatrix& u, double x, double y, double z) {
  double s = 0.0;
  for (Index r = 0; r < u.rows(); ++r)
    s += std::sqrt((u(r, 0) - x) * (u(r, 0) - x) + (u(r, 1) - y) * (u(r, 1) - y) + (u(r, 2) - z) * (u(r, 2) - z));
  return s;
}

// Coarse-to-fine grid search for the geometric median in R^3, final spacing
// below 1e-3 around the best coarse cell.
inline double geometric_median_grid(const UpdateMatrix& u) {
  double lo[3], hi[3];
  for (int c = 0; c < 3; ++c) {
    lo[c] = u.col(c).minCoeff();
    hi[c] = u.col(c).maxCoeff();
  }
  double cx = 0, cy = 0, cz = 0, best = std::numeric_limits<double>::infinity();
  double span[3] = {hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]};
  double origin[3] = {lo[0], lo[1], lo[2]};
  const int steps = 40;
  for (int level = 0; level < 6; ++level) {
    for (int i = 0; i <= steps; ++i)
      for (int j = 0; j <= steps; ++j)
        for (int k = 0; k <= steps; ++k) {
          const double x = origin[0] + span[0] * i / steps;
          const double y = origin[1] + span[1] * j / steps;
          const double z = origin[2] + span[2] * k / steps;
          const double v = sum_dist(u, x, y, z);
          if (v < best) {
            best = v;
            cx = x;
            cy = y;
            cz = z;
          }
        }
    for (int c = 0; c < 3; ++c) span[c] *= 4.0 / steps;
    origin[0] = cx - span[0] / 2;
    origin[1] = cy - span[1] / 2;
    origin[2] = cz - span[2] / 2;
  }
  return best;
}

// Cyclic Jacobi eigenvalue iteration for a symmetric matrix; ascending values.
inline VectorXd jacobi_eigenvalues(MatrixXd a) {
  const Index n = a.rows();
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (Index p = 0; p < n; ++p)
      for (Index q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (off < 1e-26) break;
    for (Index p = 0; p < n; ++p)
      for (Index q = p + 1; q < n; ++q) {
        if (std::abs(a(p, q)) < 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (Index k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Index k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
      }
  }
  std::vector<double> v(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = a(i, i);
  std::sort(v.begin(), v.end());
  return Eigen::Map<VectorXd>(v.data(), n);
}

struct UnionFind {
  std::vector<Index> parent;
  explicit UnionFind(Index n) : parent(static_cast<std::size_t>(n)) { std::iota(parent.begin(), parent.end(), 0); }
  Index find(Index x) {
    while (parent[static_cast<std::size_t>(x)] != x) x = parent[static_cast<std::size_t>(x)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
    return x;
  }
  void unite(Index a, Index b) { parent[static_cast<std::size_t>(find(a))] = find(b); }
};

inline Index component_count(const MatrixXd& A) {
  UnionFind uf(A.rows());
  for (Index i = 0; i < A.rows(); ++i)
    for (Index j = i + 1; j < A.cols(); ++j)
      if (A(i, j) != 0.0) uf.unite(i, j);
  Index roots = 0;
  for (Index i = 0; i < A.rows(); ++i) roots += uf.find(i) == i ? 1 : 0;
  return roots;
}

// Central differences of a scalar function over every entry of `x`.
inline VectorXd central_diff(const std::function<double(const VectorXd&)>& f, VectorXd x, double h = 1e-5) {
  VectorXd g(x.size());
  for (Index i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// max |a - b| / max(1, max|b|): relative to the gradient scale so that
// near-zero entries do not dominate.
inline double rel_error(const VectorXd& analytic, const VectorXd& numeric) {
  const double scale = std::max(1e-8, numeric.cwiseAbs().maxCoeff());
  return (analytic - numeric).cwiseAbs().maxCoeff() / scale;
}

// Straight-line VGAE forward pass and loss, written from the definitions with
// explicit loops.
struct VgaeOracle {
  MatrixXd X, A, noise;
  double row_norm = 0.0;

  MatrixXd norm_adj() const {
    const Index n = A.rows();
    std::vector<double> deg(static_cast<std::size_t>(n), 1.0);
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < n; ++j) deg[static_cast<std::size_t>(i)] += A(i, j);
    MatrixXd an(n, n);
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < n; ++j)
        an(i, j) = (A(i, j) + (i == j ? 1.0 : 0.0)) /
                   std::sqrt(deg[static_cast<std::size_t>(i)] * deg[static_cast<std::size_t>(j)]);
    return an;
  }

  static MatrixXd matmul(const MatrixXd& a, const MatrixXd& b) {
    MatrixXd c = MatrixXd::Zero(a.rows(), b.cols());
    for (Index i = 0; i < a.rows(); ++i)
      for (Index k = 0; k < a.cols(); ++k)
        for (Index j = 0; j < b.cols(); ++j) c(i, j) += a(i, k) * b(k, j);
    return c;
  }

  std::pair<MatrixXd, MatrixXd> encode(const MatrixXd& W0, const MatrixXd& Wmu, const MatrixXd& Wlv) const {
    MatrixXd f = X;
    if (row_norm > 0)
      for (Index i = 0; i < f.rows(); ++i) {
        double s = 0;
        for (Index j = 0; j < f.cols(); ++j) s += f(i, j) * f(i, j);
        if (s > 0)
          for (Index j = 0; j < f.cols(); ++j) f(i, j) *= row_norm / std::sqrt(s);
      }
    const MatrixXd an = norm_adj();
    MatrixXd h = matmul(matmul(an, f), W0);
    for (Index i = 0; i < h.size(); ++i) h.data()[i] = std::max(0.0, h.data()[i]);
    const MatrixXd ah = matmul(an, h);
    return {matmul(ah, Wmu), matmul(ah, Wlv)};
  }

  double loss(const MatrixXd& W0, const MatrixXd& Wmu, const MatrixXd& Wlv) const {
    const auto [mu, lv] = encode(W0, Wmu, Wlv);
    const Index n = A.rows(), k = mu.cols();
    MatrixXd z(n, k);
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < k; ++j) z(i, j) = mu(i, j) + std::exp(0.5 * lv(i, j)) * noise(i, j);
    double edges = 0;
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < n; ++j) edges += (i != j && A(i, j) != 0) ? 1 : 0;
    const double pairs = static_cast<double>(n * (n - 1));
    const double pw = edges > 0 ? (pairs - edges) / edges : 1.0;
    double bce = 0;
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < n; ++j) {
        if (i == j) continue;
        double dot = 0;
        for (Index c = 0; c < k; ++c) dot += z(i, c) * z(j, c);
        const double q = 1.0 / (1.0 + std::exp(-dot));
        bce += A(i, j) != 0 ? -pw * std::log(q) : -std::log(1.0 - q);
      }
    double kl = 0;
    for (Index i = 0; i < n; ++i)
      for (Index c = 0; c < k; ++c) kl += 1.0 + lv(i, c) - mu(i, c) * mu(i, c) - std::exp(lv(i, c));
    return bce / pairs - 0.5 * kl / static_cast<double>(n);
  }
};

inline fedpoison::VgaeParams random_vgae(std::mt19937_64& rng, Index d, Index h, Index k, double scale = 0.5) {
  fedpoison::VgaeParams p;
  p.W0 = oracle::random_matrix(rng, d, h, scale);
  p.W_mu = oracle::random_matrix(rng, h, k, scale);
  p.W_logvar = oracle::random_matrix(rng, h, k, scale * 0.5);
  return p;
}

inline VectorXd flat(const MatrixXd& m) { return Eigen::Map<const VectorXd>(m.data(), m.size()); }
inline MatrixXd unflat(const VectorXd& v, Index r, Index c) { return Eigen::Map<const MatrixXd>(v.data(), r, c); }

}  // namespace oracle
