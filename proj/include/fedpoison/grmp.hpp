#pragma once

// Graph-representation model poisoning.
//
// Pipeline per round:
//   1. build_update_graph      benign updates -> nodes, thresholded cosine -> edges
//   2. fit_vgae                GCN encoder + inner-product decoder learns the benign graphs
//   3. lagrange_dual_search    ascend reconstruction loss in latent space under a
//                              cosine-to-reference stealth constraint
//   4. gsp_synthesize          benign spectral coefficients re-expressed in the
//                              adversarial graph's Laplacian eigenbasis
//   5. craft_malicious_update  blend with the poison direction, then project onto
//                              the stealth cone and clip to the benign norm range

#include "fedpoison/common.hpp"

#include <optional>
#include <span>
#include <tuple>
#include <vector>

namespace fedpoison {

// ---------------------------------------------------------------------------
// Update graph

struct UpdateGraph {
  UpdateMatrix X;  // n x d, one benign update per row
  MatrixXd A;      // n x n symmetric {0,1}, zero diagonal
  double tau_edge = 0.3;

  Index nodes() const { return X.rows(); }
};

inline UpdateGraph build_update_graph(const UpdateMatrix& updates, double tau_edge) {
  const Index n = updates.rows();
  if (n < 2) throw AttackError("build_update_graph: need at least 2 updates");
  UpdateGraph g{updates, MatrixXd::Zero(n, n), tau_edge};
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j)
      if (cosine(updates.row(i), updates.row(j)) >= tau_edge) g.A(i, j) = g.A(j, i) = 1.0;
  return g;
}

inline int edge_count(const MatrixXd& A) {
  int e = 0;
  for (Index i = 0; i < A.rows(); ++i)
    for (Index j = i + 1; j < A.cols(); ++j) e += A(i, j) != 0.0 ? 1 : 0;
  return e;
}

// D~^{-1/2} (A + I) D~^{-1/2}
inline MatrixXd normalized_adjacency(const MatrixXd& A) {
  const Index n = A.rows();
  MatrixXd at = A + MatrixXd::Identity(n, n);
  const VectorXd inv_sqrt = at.rowwise().sum().array().rsqrt();
  return inv_sqrt.asDiagonal() * at * inv_sqrt.asDiagonal();
}

// ---------------------------------------------------------------------------
// Variational graph autoencoder

struct VgaeParams {
  MatrixXd W0;        // p x h, p = feature dim after the optional projection
  MatrixXd W_mu;      // h x k
  MatrixXd W_logvar;  // h x k
  // Optional d x p random projection applied to node features.
  MatrixXd projection;
  // When positive, each (projected) feature row is rescaled to this norm.
  double row_norm = 0.0;

  Index hidden() const { return W0.cols(); }
  Index latent() const { return W_mu.cols(); }
};

struct Encoding {
  MatrixXd mu;
  MatrixXd logvar;
};

inline MatrixXd encoder_features(const VgaeParams& p, const UpdateMatrix& X) {
  MatrixXd f = p.projection.size() > 0 ? MatrixXd(X * p.projection) : MatrixXd(X);
  if (p.row_norm > 0.0) {
    const double target = p.row_norm;
    for (Index i = 0; i < f.rows(); ++i) {
      const double nrm = f.row(i).norm();
      if (nrm > 0.0) f.row(i) *= target / nrm;
    }
  }
  return f;
}

namespace detail {

struct EncoderPass {
  MatrixXd pre;     // a_norm * features * W0
  MatrixXd ah;      // a_norm * relu(pre)
  MatrixXd mu;
  MatrixXd logvar;
};

inline EncoderPass encode_pre(const VgaeParams& p, const MatrixXd& a_norm, MatrixXd pre) {
  EncoderPass e;
  e.pre = std::move(pre);
  e.ah = a_norm * e.pre.cwiseMax(0.0);
  e.mu = e.ah * p.W_mu;
  e.logvar = e.ah * p.W_logvar;
  return e;
}

inline void check_dims(const VgaeParams& p, Index feature_dim) {
  if (p.W0.rows() != feature_dim)
    throw AttackError(detail::concat("vgae: feature dim ", feature_dim, " != W0 rows ", p.W0.rows()));
  if (p.W_mu.rows() != p.W0.cols() || p.W_logvar.rows() != p.W0.cols() || p.W_mu.cols() != p.W_logvar.cols())
    throw AttackError("vgae: inconsistent layer shapes");
}

}  // namespace detail

// H = ReLU(A~ X W0); mu = A~ H W_mu; logvar = A~ H W_logvar.
inline Encoding vgae_encode(const VgaeParams& p, const UpdateGraph& g) {
  if (p.projection.size() > 0 && p.projection.rows() != g.X.cols())
    throw AttackError("vgae_encode: projection rows != update dim");
  const MatrixXd feats = encoder_features(p, g.X);
  detail::check_dims(p, feats.cols());
  const MatrixXd a_norm = normalized_adjacency(g.A);
  auto e = detail::encode_pre(p, a_norm, a_norm * feats * p.W0);
  return {std::move(e.mu), std::move(e.logvar)};
}

inline double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

// A_hat = sigmoid(Z Z^T), computed on the upper triangle and mirrored.
inline MatrixXd vgae_decode(const MatrixXd& Z) {
  const Index n = Z.rows();
  MatrixXd out(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = i; j < n; ++j) out(i, j) = out(j, i) = sigmoid(Z.row(i).dot(Z.row(j)));
  return out;
}

inline constexpr double kProbClamp = 1e-7;

// #non-edges / #edges over off-diagonal entries; 1 when there are no edges.
inline double positive_weight(const MatrixXd& A) {
  const Index n = A.rows();
  const double pairs = static_cast<double>(n * (n - 1));
  const double edges = 2.0 * edge_count(A);
  if (edges == 0.0) return 1.0;
  return (pairs - edges) / edges;
}

// Mean weighted binary cross-entropy over off-diagonal entries.
inline double recon_bce(const MatrixXd& A_hat, const MatrixXd& A) {
  const Index n = A.rows();
  if (A_hat.rows() != n || A_hat.cols() != n) throw AttackError("recon_bce: shape mismatch");
  if (n < 2) return 0.0;
  const double pw = positive_weight(A);
  double s = 0.0;
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) {
      if (i == j) continue;
      const double q = std::clamp(A_hat(i, j), kProbClamp, 1.0 - kProbClamp);
      s -= A(i, j) != 0.0 ? pw * std::log(q) : std::log(1.0 - q);
    }
  return s / static_cast<double>(n * (n - 1));
}

// d recon_bce / d logits, where A_hat = sigmoid(logits). Zero on clamped entries.
inline MatrixXd recon_bce_logit_grad(const MatrixXd& A_hat, const MatrixXd& A) {
  const Index n = A.rows();
  MatrixXd g = MatrixXd::Zero(n, n);
  if (n < 2) return g;
  const double pw = positive_weight(A);
  const double inv = 1.0 / static_cast<double>(n * (n - 1));
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) {
      if (i == j) continue;
      const double q = A_hat(i, j);
      if (q <= kProbClamp || q >= 1.0 - kProbClamp) continue;
      g(i, j) = (A(i, j) != 0.0 ? -pw * (1.0 - q) : q) * inv;
    }
  return g;
}

// Gradient of recon_bce(decode(Z), A) with respect to Z.
inline MatrixXd recon_bce_latent_grad(const MatrixXd& Z, const MatrixXd& A) {
  const MatrixXd gs = recon_bce_logit_grad(vgae_decode(Z), A);
  return (gs + gs.transpose()) * Z;
}

// Per-node Gaussian KL to N(0, I), averaged over nodes.
inline double gaussian_kl(const MatrixXd& mu, const MatrixXd& logvar) {
  if (mu.rows() == 0) return 0.0;
  const double s = (1.0 + logvar.array() - mu.array().square() - logvar.array().exp()).sum();
  return -0.5 * s / static_cast<double>(mu.rows());
}

struct VgaeLoss {
  double total = 0.0;
  double recon_bce = 0.0;
  double kl = 0.0;
};

inline VgaeLoss vgae_loss(const MatrixXd& A_hat, const MatrixXd& A, const MatrixXd& mu, const MatrixXd& logvar) {
  if (mu.rows() != A.rows() || logvar.rows() != A.rows() || mu.cols() != logvar.cols())
    throw AttackError("vgae_loss: shape mismatch");
  VgaeLoss l;
  l.recon_bce = recon_bce(A_hat, A);
  l.kl = gaussian_kl(mu, logvar);
  l.total = l.recon_bce + l.kl;
  return l;
}

struct VgaeGradient {
  VgaeLoss loss;
  MatrixXd dW0;
  MatrixXd dW_mu;
  MatrixXd dW_logvar;
};

namespace detail {

struct HeadGradient {
  VgaeLoss loss;
  MatrixXd dW_mu;
  MatrixXd dW_logvar;
  MatrixXd g_pre;  // d loss / d pre, n x h
};

// Loss and gradients for one graph from its first-layer pre-activations.
// Latents are Z = mu + exp(logvar / 2) * noise.
inline HeadGradient head_grad(const VgaeParams& p, const MatrixXd& a_norm, MatrixXd pre, const MatrixXd& A,
                              const MatrixXd& noise) {
  const EncoderPass e = encode_pre(p, a_norm, std::move(pre));
  const MatrixXd half_std = (0.5 * e.logvar.array()).exp().matrix();
  const MatrixXd Z = e.mu + half_std.cwiseProduct(noise);
  const MatrixXd a_hat = vgae_decode(Z);

  HeadGradient out;
  out.loss = vgae_loss(a_hat, A, e.mu, e.logvar);

  const MatrixXd gs = recon_bce_logit_grad(a_hat, A);
  const MatrixXd gz = (gs + gs.transpose()) * Z;
  const double inv_n = 1.0 / static_cast<double>(A.rows());
  const MatrixXd g_mu = gz + e.mu * inv_n;
  const MatrixXd g_lv = (0.5 * gz.cwiseProduct(noise).cwiseProduct(half_std).array() +
                        (e.logvar.array().exp() - 1.0) * (0.5 * inv_n))
                           .matrix();

  out.dW_mu = e.ah.transpose() * g_mu;
  out.dW_logvar = e.ah.transpose() * g_lv;
  const MatrixXd g_h = a_norm.transpose() * (g_mu * p.W_mu.transpose() + g_lv * p.W_logvar.transpose());
  out.g_pre = g_h.cwiseProduct((e.pre.array() > 0.0).cast<double>().matrix());
  return out;
}

}  // namespace detail

// Loss and analytic gradients for a single graph under fixed reparameterization noise.
inline VgaeGradient vgae_loss_and_grad(const VgaeParams& p, const UpdateGraph& g, const MatrixXd& noise) {
  const MatrixXd feats = encoder_features(p, g.X);
  detail::check_dims(p, feats.cols());
  if (noise.rows() != g.nodes() || noise.cols() != p.latent()) throw AttackError("vgae: noise shape mismatch");
  const MatrixXd a_norm = normalized_adjacency(g.A);
  const MatrixXd ax = a_norm * feats;
  auto h = detail::head_grad(p, a_norm, ax * p.W0, g.A, noise);
  return {h.loss, ax.transpose() * h.g_pre, std::move(h.dW_mu), std::move(h.dW_logvar)};
}

struct VgaeFitOptions {
  Index hidden = 32;
  Index latent = 8;
  int epochs = 100;
  double lr = 0.01;
  // 0 disables the projection.
  Index projection_dim = 0;
  // Node features are rescaled to this row norm before encoding; 0 keeps raw updates.
  double row_norm = 1.0;
};

// Xavier-uniform initialization; the projection, if any, is N(0, 1/p).
inline VgaeParams init_vgae(Index update_dim, const VgaeFitOptions& opt, std::uint64_t seed) {
  if (opt.hidden < 1 || opt.latent < 1) throw AttackError("init_vgae: hidden and latent must be >= 1");
  Rng rng(derive_seed(seed, 0x76A3));
  VgaeParams p;
  p.row_norm = opt.row_norm;
  Index feat_dim = update_dim;
  if (opt.projection_dim > 0 && opt.projection_dim < update_dim) {
    feat_dim = opt.projection_dim;
    std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(static_cast<double>(feat_dim)));
    p.projection.resize(update_dim, feat_dim);
    for (Index i = 0; i < p.projection.size(); ++i) p.projection.data()[i] = nd(rng);
  }
  auto xavier = [&](Index rows, Index cols) {
    const double lim = std::sqrt(6.0 / static_cast<double>(rows + cols));
    std::uniform_real_distribution<double> u(-lim, lim);
    MatrixXd m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
    return m;
  };
  p.W0 = xavier(feat_dim, opt.hidden);
  p.W_mu = xavier(opt.hidden, opt.latent);
  p.W_logvar = xavier(opt.hidden, opt.latent);
  return p;
}

// Sum over graphs of the loss evaluated at Z = mu (no sampling noise).
inline double vgae_objective(const VgaeParams& p, std::span<const UpdateGraph> graphs) {
  double total = 0.0;
  for (const auto& g : graphs) {
    const auto enc = vgae_encode(p, g);
    total += vgae_loss(vgae_decode(enc.mu), g.A, enc.mu, enc.logvar).total;
  }
  return total;
}

// Full-batch gradient descent on the summed loss with seeded reparameterization noise.
inline VgaeParams fit_vgae(std::span<const UpdateGraph> graphs, const VgaeFitOptions& opt, std::uint64_t seed) {
  if (graphs.empty()) throw AttackError("fit_vgae: no graphs");
  const Index d = graphs.front().X.cols();
  for (const auto& g : graphs)
    if (g.X.cols() != d) throw AttackError("fit_vgae: graphs disagree on update dim");

  VgaeParams p = init_vgae(d, opt, seed);
  // All graphs' normalized-adjacency-times-features stacked by rows, so the
  // update-dimension products run as one GEMM per epoch.
  Index total = 0;
  for (const auto& g : graphs) total += g.nodes();
  std::vector<MatrixXd> a_norm;
  std::vector<Index> offset;
  MatrixXd ax(total, p.W0.rows());
  for (const auto& g : graphs) {
    offset.push_back(offset.empty() ? 0 : offset.back() + a_norm.back().rows());
    a_norm.push_back(normalized_adjacency(g.A));
    ax.middleRows(offset.back(), g.nodes()) = a_norm.back() * encoder_features(p, g.X);
  }
  Rng rng(derive_seed(seed, 0xE951));
  std::normal_distribution<double> nd(0.0, 1.0);
  MatrixXd pre(total, p.W0.cols());
  MatrixXd g_pre(total, p.W0.cols());
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    pre.noalias() = ax * p.W0;
    MatrixXd dmu = MatrixXd::Zero(p.W_mu.rows(), p.W_mu.cols());
    MatrixXd dlv = MatrixXd::Zero(p.W_logvar.rows(), p.W_logvar.cols());
    for (std::size_t gi = 0; gi < graphs.size(); ++gi) {
      const Index n = graphs[gi].nodes();
      MatrixXd noise(n, opt.latent);
      for (Index i = 0; i < noise.size(); ++i) noise.data()[i] = nd(rng);
      const auto h = detail::head_grad(p, a_norm[gi], pre.middleRows(offset[gi], n), graphs[gi].A, noise);
      g_pre.middleRows(offset[gi], n) = h.g_pre;
      dmu += h.dW_mu;
      dlv += h.dW_logvar;
    }
    p.W0.noalias() -= opt.lr * (ax.transpose() * g_pre);
    p.W_mu -= opt.lr * dmu;
    p.W_logvar -= opt.lr * dlv;
  }
  return p;
}

// ---------------------------------------------------------------------------
// Graph signal processing

struct SpectralDecomposition {
  MatrixXd L;               // D - A
  MatrixXd U;               // orthonormal eigenvectors, ascending eigenvalue order
  VectorXd eigenvalues;     // ascending
  MatrixXd S_hat;           // U^T X, n x d
};

inline MatrixXd laplacian(const MatrixXd& A) {
  MatrixXd L = -A;
  L.diagonal() = A.rowwise().sum();
  return L;
}

// Symmetric eigendecomposition, ascending; each eigenvector's largest-magnitude
// entry (lowest index on ties) is made positive.
inline std::pair<VectorXd, MatrixXd> symmetric_eigen(const MatrixXd& M) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(M);
  if (es.info() != Eigen::Success) throw AttackError("symmetric eigensolve failed");
  MatrixXd U = es.eigenvectors();
  for (Index c = 0; c < U.cols(); ++c) {
    Index arg = 0;
    for (Index r = 1; r < U.rows(); ++r)
      if (std::abs(U(r, c)) > std::abs(U(arg, c))) arg = r;
    if (U(arg, c) < 0.0) U.col(c) = -U.col(c);
  }
  return {es.eigenvalues(), std::move(U)};
}

// Component label per node (labels ordered by lowest member index).
inline std::vector<Index> connected_components(const MatrixXd& A) {
  const Index n = A.rows();
  std::vector<Index> label(static_cast<std::size_t>(n), -1);
  Index next = 0;
  std::vector<Index> stack;
  for (Index s = 0; s < n; ++s) {
    if (label[static_cast<std::size_t>(s)] >= 0) continue;
    label[static_cast<std::size_t>(s)] = next;
    stack.assign(1, s);
    while (!stack.empty()) {
      const Index u = stack.back();
      stack.pop_back();
      for (Index v = 0; v < n; ++v)
        if (A(u, v) != 0.0 && label[static_cast<std::size_t>(v)] < 0) {
          label[static_cast<std::size_t>(v)] = next;
          stack.push_back(v);
        }
    }
    ++next;
  }
  return label;
}

// Laplacian eigendecomposition. The zero eigenspace is degenerate when the
// graph is disconnected, so its basis is fixed: the constant vector first, then
// Gram-Schmidt over the component indicators (ordered by lowest member index).
// The remaining eigenvectors use the symmetric_eigen sign convention.
inline std::pair<VectorXd, MatrixXd> laplacian_eigen(const MatrixXd& A) {
  auto [vals, U] = symmetric_eigen(laplacian(A));
  const Index n = A.rows();
  if (n == 0) return {std::move(vals), std::move(U)};
  const auto label = connected_components(A);
  const Index comps = *std::max_element(label.begin(), label.end()) + 1;
  const double zero_tol = 1e-9 * std::max(1.0, vals.cwiseAbs().maxCoeff());
  Index zeros = 0;
  while (zeros < vals.size() && std::abs(vals[zeros]) <= zero_tol) ++zeros;
  if (zeros != comps) return {std::move(vals), std::move(U)};

  U.col(0).setConstant(1.0 / std::sqrt(static_cast<double>(n)));
  for (Index c = 1; c < comps; ++c) {
    VectorXd v = VectorXd::Zero(n);
    for (Index i = 0; i < n; ++i)
      if (label[static_cast<std::size_t>(i)] == c - 1) v[i] = 1.0;
    for (int pass = 0; pass < 2; ++pass)
      for (Index k = 0; k < c; ++k) v -= U.col(k).dot(v) * U.col(k);
    v.normalize();
    Index arg = 0;
    for (Index r = 1; r < n; ++r)
      if (std::abs(v[r]) > std::abs(v[arg])) arg = r;
    U.col(c) = v[arg] < 0.0 ? VectorXd(-v) : v;
  }
  vals.head(comps).setZero();
  return {std::move(vals), std::move(U)};
}

inline SpectralDecomposition gsp_decompose(const UpdateGraph& g) {
  if (g.nodes() < 2) throw AttackError("gsp_decompose: need at least 2 nodes");
  SpectralDecomposition s;
  s.L = laplacian(g.A);
  std::tie(s.eigenvalues, s.U) = laplacian_eigen(g.A);
  s.S_hat = s.U.transpose() * g.X;
  return s;
}

// Benign spectral coefficients re-expressed in the eigenbasis of A_adv's Laplacian.
inline UpdateMatrix gsp_synthesize(const SpectralDecomposition& decomp, const MatrixXd& A_adv) {
  const Index n = decomp.U.rows();
  if (A_adv.rows() != n || A_adv.cols() != n) throw AttackError("gsp_synthesize: adjacency size mismatch");
  if ((A_adv - A_adv.transpose()).cwiseAbs().maxCoeff() != 0.0 || A_adv.diagonal().cwiseAbs().maxCoeff() != 0.0)
    throw AttackError("gsp_synthesize: adjacency must be symmetric with zero diagonal");
  const auto [vals, U_adv] = laplacian_eigen(A_adv);
  return U_adv * decomp.S_hat;
}

// ---------------------------------------------------------------------------
// Latent-space search under a stealth constraint

// Threshold at 0.5 (symmetric, zero diagonal). Each isolated node gets back its
// single highest-probability edge; any components still separate are then
// joined by their highest-probability crossing edge until the graph is connected.
inline MatrixXd adversarial_adjacency(const MatrixXd& A_hat) {
  const Index n = A_hat.rows();
  MatrixXd A = MatrixXd::Zero(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j)
      if (A_hat(i, j) >= 0.5) A(i, j) = A(j, i) = 1.0;
  if (n < 2) return A;
  const MatrixXd thresholded = A;
  for (Index i = 0; i < n; ++i) {
    if (thresholded.row(i).sum() > 0.0) continue;
    Index best = i == 0 ? 1 : 0;
    for (Index j = 0; j < n; ++j)
      if (j != i && A_hat(i, j) > A_hat(i, best)) best = j;
    A(i, best) = A(best, i) = 1.0;
  }
  for (;;) {
    const auto label = connected_components(A);
    if (*std::max_element(label.begin(), label.end()) == 0) break;
    Index bi = -1, bj = -1;
    for (Index i = 0; i < n; ++i)
      for (Index j = i + 1; j < n; ++j)
        if (label[static_cast<std::size_t>(i)] != label[static_cast<std::size_t>(j)] &&
            (bi < 0 || A_hat(i, j) > A_hat(bi, bj))) {
          bi = i;
          bj = j;
        }
    A(bi, bj) = A(bj, bi) = 1.0;
  }
  return A;
}

inline int edges_flipped(const MatrixXd& A, const MatrixXd& B) {
  int k = 0;
  for (Index i = 0; i < A.rows(); ++i)
    for (Index j = i + 1; j < A.cols(); ++j) k += (A(i, j) != 0.0) != (B(i, j) != 0.0) ? 1 : 0;
  return k;
}

// Cosine between the mean synthesized update and the reference direction.
inline double synthesized_cosine(const SpectralDecomposition& decomp, const MatrixXd& A_adv,
                                 const VectorXd& reference) {
  const UpdateMatrix xs = gsp_synthesize(decomp, A_adv);
  return cosine(xs.colwise().mean().transpose(), reference);
}

struct DualState {
  double lambda_dual = 0.0;
  double stealth_floor = 0.0;
  MatrixXd Z;
  MatrixXd A_hat;
};

struct DualSearchResult {
  DualState state;
  MatrixXd A_adv;
  double recon_bce_initial = 0.0;
  double recon_bce_final = 0.0;
  double stealth_cosine = 0.0;
  int edges_flipped = 0;
};

// Alternating primal ascent / dual ascent starting from the encoder mean.
//
// Primal objective: recon_bce(decode(Z), A) - lambda * max(0, floor - c(Z)),
// where c(Z) is the cosine of the synthesized mean update to the reference.
// c is piecewise constant in Z (it depends on the thresholded decode), so its
// gradient is taken as -grad recon_bce: moving back toward the benign
// structure is the direction that restores stealth. The primal step is then
// (1 - lambda * [violated]) * grad recon_bce.
inline DualSearchResult lagrange_dual_search(const VgaeParams& params, const UpdateGraph& g,
                                             const VectorXd& reference, double stealth_floor, int steps,
                                             double step_size) {
  if (!(stealth_floor >= -1.0 && stealth_floor <= 1.0))
    throw AttackError("lagrange_dual_search: stealth_floor must lie in [-1,1]");
  if (steps < 1) throw AttackError("lagrange_dual_search: steps must be >= 1");
  if (reference.size() != g.X.cols()) throw AttackError("lagrange_dual_search: reference dim mismatch");

  const SpectralDecomposition decomp = gsp_decompose(g);
  DualSearchResult r;
  r.state.stealth_floor = stealth_floor;
  r.state.Z = vgae_encode(params, g).mu;
  r.recon_bce_initial = recon_bce(vgae_decode(r.state.Z), g.A);

  for (int s = 0; s < steps; ++s) {
    const MatrixXd a_hat = vgae_decode(r.state.Z);
    const double bce = recon_bce(a_hat, g.A);
    const double c = synthesized_cosine(decomp, adversarial_adjacency(a_hat), reference);
    const double violation = stealth_floor - c;
    const double objective = bce - r.state.lambda_dual * std::max(0.0, violation);
    if (!std::isfinite(objective) || !r.state.Z.allFinite())
      throw AttackError(detail::concat("lagrange_dual_search: non-finite objective at step ", s));
    const double weight = 1.0 - (violation > 0.0 ? r.state.lambda_dual : 0.0);
    r.state.Z += step_size * weight * recon_bce_latent_grad(r.state.Z, g.A);
    r.state.lambda_dual = std::max(0.0, r.state.lambda_dual + step_size * violation);
  }

  r.state.A_hat = vgae_decode(r.state.Z);
  r.A_adv = adversarial_adjacency(r.state.A_hat);
  r.recon_bce_final = recon_bce(r.state.A_hat, g.A);
  r.stealth_cosine = synthesized_cosine(decomp, r.A_adv, reference);
  r.edges_flipped = edges_flipped(g.A, r.A_adv);
  if (!std::isfinite(r.recon_bce_final))
    throw AttackError(detail::concat("lagrange_dual_search: non-finite objective at step ", steps));
  return r;
}

// ---------------------------------------------------------------------------
// Malicious update synthesis

// Smallest alpha >= 0 with cos(v + alpha * reference, reference) >= floor, then
// a norm clip to max_norm (which leaves the cosine unchanged).
inline VectorXd project_to_stealth_cone(const VectorXd& v, const VectorXd& reference, double floor,
                                        double max_norm) {
  const double rn = reference.norm();
  if (rn == 0.0) throw AttackError("project_to_stealth_cone: zero reference");
  const VectorXd rhat = reference / rn;
  VectorXd out = v;
  if (cosine(out, reference) < floor) {
    const double along = v.dot(rhat);
    const double ortho = (v - along * rhat).norm();
    const double f = std::min(floor, 1.0 - 1e-12);
    double target;
    if (ortho <= 1e-300) {
      target = std::max(std::abs(along), 1e-300);
    } else {
      // Aim slightly inside the cone so rounding cannot land below the floor.
      const double fa = std::min(f + 1e-12, 1.0 - 1e-12);
      target = fa * ortho / std::sqrt(1.0 - fa * fa);
    }
    out = v + (target - along) * rhat;
  }
  const double n = out.norm();
  if (n > max_norm && n > 0.0) out *= max_norm / n;
  return out;
}

struct CraftConfig {
  double tau_edge = 0.3;
  double stealth_floor = 0.0;
  double gamma_blend = 1.0;
  int dual_steps = 100;
  double step_size = 0.05;
};

struct CraftResult {
  VectorXd update;
  DualSearchResult dual;
  double stealth_cosine = 0.0;  // cosine of the final update to the reference
  double max_benign_norm = 0.0;
};

inline CraftResult craft_malicious_update(const UpdateMatrix& benign, const VectorXd& raw_poison,
                                          const VectorXd& reference, const CraftConfig& cfg,
                                          const VgaeParams& params) {
  if (benign.rows() < 2) throw AttackError("craft_malicious_update: need at least 2 benign updates");
  if (raw_poison.size() != benign.cols() || reference.size() != benign.cols())
    throw AttackError("craft_malicious_update: dimension mismatch");
  if (!raw_poison.allFinite()) throw AttackError("craft_malicious_update: raw_poison not finite");

  const UpdateGraph g = build_update_graph(benign, cfg.tau_edge);
  CraftResult r;
  r.dual = lagrange_dual_search(params, g, reference, cfg.stealth_floor, cfg.dual_steps, cfg.step_size);
  const UpdateMatrix synth = gsp_synthesize(gsp_decompose(g), r.dual.A_adv);
  const VectorXd base = synth.colwise().mean().transpose();
  const VectorXd candidate = base + cfg.gamma_blend * raw_poison;
  r.max_benign_norm = benign.rowwise().norm().maxCoeff();
  r.update = project_to_stealth_cone(candidate, reference, cfg.stealth_floor, r.max_benign_norm);
  r.stealth_cosine = cosine(r.update, reference);
  if (r.stealth_cosine < cfg.stealth_floor - 1e-9 || r.update.norm() > r.max_benign_norm + 1e-9)
    throw AttackError("craft_malicious_update: stealth projection postcondition violated");
  return r;
}

// ---------------------------------------------------------------------------
// Attacker's view of benign updates

enum class Knowledge { kFull, kOwnPlusGlobal };

struct RoundObservation {
  UpdateMatrix benign_updates;  // only meaningful under full knowledge
  VectorXd global_delta;        // global_t - global_{t-1}
  UpdateMatrix own_submitted;   // what the attackers actually sent
  UpdateMatrix own_clean;       // attackers' clean local-training updates
  int n_clients = 0;
  // True when the server's aggregate was the equal-weight mean of all submissions.
  bool equal_weight_mean = false;
};

struct BenignObservations {
  std::vector<UpdateMatrix> matrices;
  bool estimated = false;
  // Set when an estimate relies on an aggregation the reconstruction does not model.
  bool biased = false;
};

// Under full knowledge each round yields [benign updates; attackers' clean
// updates]. Under own_plus_global each round yields [benign-mean estimate; attackers'
// clean updates], where the estimate is (n * global_delta - sum(own_submitted)) / (n - n_own).
inline BenignObservations collect_benign_observations(std::span<const RoundObservation> history,
                                                      Knowledge knowledge) {
  if (history.empty()) throw AttackError("collect_benign_observations: empty history");
  BenignObservations out;
  out.estimated = knowledge == Knowledge::kOwnPlusGlobal;
  for (const auto& r : history) {
    if (knowledge == Knowledge::kFull) {
      UpdateMatrix m(r.benign_updates.rows() + r.own_clean.rows(), r.benign_updates.cols());
      m.topRows(r.benign_updates.rows()) = r.benign_updates;
      if (r.own_clean.rows() > 0) m.bottomRows(r.own_clean.rows()) = r.own_clean;
      out.matrices.push_back(std::move(m));
      continue;
    }
    const Index n_own = r.own_submitted.rows();
    if (r.n_clients <= n_own) throw AttackError("collect_benign_observations: no benign clients to estimate");
    VectorXd sum = static_cast<double>(r.n_clients) * r.global_delta;
    for (Index i = 0; i < n_own; ++i) sum -= r.own_submitted.row(i).transpose();
    const VectorXd est = sum / static_cast<double>(r.n_clients - n_own);
    UpdateMatrix m(1 + r.own_clean.rows(), est.size());
    m.row(0) = est.transpose();
    if (r.own_clean.rows() > 0) m.bottomRows(r.own_clean.rows()) = r.own_clean;
    out.matrices.push_back(std::move(m));
    out.biased = out.biased || !r.equal_weight_mean;
  }
  return out;
}

}  // namespace fedpoison
