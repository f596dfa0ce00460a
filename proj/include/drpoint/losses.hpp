#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "drpoint/error.hpp"
#include "drpoint/geometry.hpp"
#include "drpoint/renderer.hpp"
#include "drpoint/tensor.hpp"

namespace drpoint {

// ---------------------------------------------------------------------------
// Differentiable rendering loss

/// Mean absolute difference over T stacked H x W images.
inline double dr_loss(std::span<const DepthImage> pred, std::span<const DepthImage> gt) {
    if (pred.empty() || pred.size() != gt.size()) throw DomainError("dr_loss: image lists must be nonempty and equal length");
    double sum = 0.0;
    Index count = 0;
    for (std::size_t t = 0; t < pred.size(); ++t) {
        if (pred[t].pixels.rows() != gt[t].pixels.rows() || pred[t].pixels.cols() != gt[t].pixels.cols() ||
            pred[t].pixels.rows() != pred[0].pixels.rows() || pred[t].pixels.cols() != pred[0].pixels.cols())
            throw DomainError("dr_loss: image shape mismatch");
        sum += (pred[t].pixels - gt[t].pixels).cwiseAbs().sum();
        count += pred[t].pixels.size();
    }
    return sum / static_cast<double>(count);
}

/// d dr_loss / d pred; the subgradient at exact ties is 0.
inline std::vector<Mat> dr_loss_grad(std::span<const DepthImage> pred, std::span<const DepthImage> gt) {
    dr_loss(pred, gt);  // shape validation
    const double n = static_cast<double>(pred.size() * pred[0].pixels.size());
    std::vector<Mat> out;
    out.reserve(pred.size());
    for (std::size_t t = 0; t < pred.size(); ++t) {
        Mat g = (pred[t].pixels - gt[t].pixels).unaryExpr([n](double d) {
            return d > 0.0 ? 1.0 / n : (d < 0.0 ? -1.0 / n : 0.0);
        });
        out.push_back(std::move(g));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Chamfer distance and F-score

enum class ChamferVariant { L1, L2 };

struct ChamferResult {
    double value = 0.0;
    Points grad_p;  // d value / d P, nearest neighbours held fixed
};

namespace detail {

// For each row of `from`, index of the nearest row of `to` (lowest index on ties)
// and the squared distance.
inline void nearest(const Points& from, const Points& to, std::vector<Index>& idx, std::vector<double>& d2) {
    idx.assign(from.rows(), 0);
    d2.assign(from.rows(), std::numeric_limits<double>::infinity());
    for (Index i = 0; i < from.rows(); ++i) {
        const double px = from(i, 0), py = from(i, 1), pz = from(i, 2);
        double best = std::numeric_limits<double>::infinity();
        Index arg = 0;
        for (Index j = 0; j < to.rows(); ++j) {
            const double dx = px - to(j, 0), dy = py - to(j, 1), dz = pz - to(j, 2);
            const double d = dx * dx + dy * dy + dz * dz;
            if (d < best) {
                best = d;
                arg = j;
            }
        }
        idx[i] = arg;
        d2[i] = best;
    }
}

}  // namespace detail

/// Half-sum Chamfer distance: 0.5 * (mean_p min_q d(p,q) + mean_q min_p d(q,p)),
/// with d Euclidean (L1 variant) or squared Euclidean (L2 variant).
inline ChamferResult chamfer_with_grad(const PointCloud& P, const PointCloud& Q, ChamferVariant variant) {
    if (P.empty() || Q.empty()) throw DomainError("chamfer: empty point cloud");
    std::vector<Index> p2q, q2p;
    std::vector<double> dp, dq;
    detail::nearest(P.xyz, Q.xyz, p2q, dp);
    detail::nearest(Q.xyz, P.xyz, q2p, dq);
    const double np = static_cast<double>(P.count()), nq = static_cast<double>(Q.count());

    ChamferResult r;
    r.grad_p = Points::Zero(P.count(), 3);
    double sp = 0.0, sq = 0.0;
    const bool l1 = variant == ChamferVariant::L1;
    auto dist = [l1](double d2) { return l1 ? std::sqrt(d2) : d2; };
    // derivative of dist(|p - q|^2) w.r.t. p is coef * (p - q)
    auto coef = [l1](double d2) { return l1 ? (d2 > 0.0 ? 1.0 / std::sqrt(d2) : 0.0) : 2.0; };

    for (Index i = 0; i < P.count(); ++i) {
        sp += dist(dp[i]);
        const Eigen::RowVector3d diff = P.xyz.row(i) - Q.xyz.row(p2q[i]);
        r.grad_p.row(i) += (0.5 / np) * coef(dp[i]) * diff;
    }
    for (Index j = 0; j < Q.count(); ++j) {
        sq += dist(dq[j]);
        const Index i = q2p[j];
        const Eigen::RowVector3d diff = P.xyz.row(i) - Q.xyz.row(j);
        r.grad_p.row(i) += (0.5 / nq) * coef(dq[j]) * diff;
    }
    r.value = 0.5 * (sp / np + sq / nq);
    return r;
}

inline double chamfer(const PointCloud& P, const PointCloud& Q, ChamferVariant variant) {
    return chamfer_with_grad(P, Q, variant).value;
}

/// F-score at threshold d: harmonic mean of the fraction of P within d of Q
/// (precision) and of Q within d of P (recall).
inline double fscore(const PointCloud& P, const PointCloud& Q, double d = 0.01) {
    if (P.empty() || Q.empty()) throw DomainError("fscore: empty point cloud");
    if (!(d > 0.0)) throw DomainError("fscore: threshold must be positive");
    std::vector<Index> idx;
    std::vector<double> dp, dq;
    detail::nearest(P.xyz, Q.xyz, idx, dp);
    detail::nearest(Q.xyz, P.xyz, idx, dq);
    const double d2 = d * d;
    auto frac = [d2](const std::vector<double>& v) {
        double c = 0.0;
        for (double x : v) c += x <= d2 ? 1.0 : 0.0;
        return c / static_cast<double>(v.size());
    };
    const double prec = frac(dp), rec = frac(dq);
    return prec + rec > 0.0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
}

// ---------------------------------------------------------------------------
// Contrastive objectives

enum class Modality { Point, Rgb, Depth };

/// One unit-norm embedding per row.
struct EmbeddingBatch {
    Mat rows;
    Modality modality = Modality::Point;

    Index size() const { return rows.rows(); }
    bool unit_norm(double tol = 1e-6) const {
        for (Index i = 0; i < rows.rows(); ++i)
            if (std::abs(rows.row(i).norm() - 1.0) > tol) return false;
        return true;
    }
};

inline Mat normalize_rows(const Mat& m) {
    Mat out = m;
    for (Index i = 0; i < out.rows(); ++i) {
        const double n = out.row(i).norm();
        if (n > 0.0) out.row(i) /= n;
    }
    return out;
}

/// Learnable temperature stored as log(tau); tau is kept within [0.01, 1].
struct ContrastiveHead {
    static constexpr double kMinTau = 0.01;
    static constexpr double kMaxTau = 1.0;

    double log_tau = std::log(0.07);

    double tau() const { return std::clamp(std::exp(log_tau), kMinTau, kMaxTau); }
    bool clamped() const { return std::exp(log_tau) < kMinTau || std::exp(log_tau) > kMaxTau; }
    void project() { log_tau = std::clamp(log_tau, std::log(kMinTau), std::log(kMaxTau)); }
};

struct NceResult {
    double value = 0.0;
    Mat grad_a;
    Mat grad_b;
    double grad_log_tau = 0.0;
};

namespace detail {

inline double logsumexp(const double* x, Index n, Index stride) {
    double m = -std::numeric_limits<double>::infinity();
    for (Index i = 0; i < n; ++i) m = std::max(m, x[i * stride]);
    double s = 0.0;
    for (Index i = 0; i < n; ++i) s += std::exp(x[i * stride] - m);
    return m + std::log(s);
}

}  // namespace detail

/// Symmetric two-direction InfoNCE averaged over the B positive pairs (i, i):
/// each pair contributes -1/2 log softmax_row(i)[i] - 1/2 log softmax_col(i)[i]
/// of the similarity matrix gA gB^T / tau.
inline NceResult cross_modal_nce(const EmbeddingBatch& a, const EmbeddingBatch& b, const ContrastiveHead& head) {
    if (a.size() != b.size() || a.rows.cols() != b.rows.cols())
        throw DomainError("cross_modal_nce: batch size mismatch");
    if (a.size() == 0) throw DomainError("cross_modal_nce: empty batch");
    const Index B = a.size();
    const double tau = head.tau();
    const Mat S = (a.rows * b.rows.transpose()) / tau;

    NceResult r;
    Mat dS = Mat::Zero(B, B);
    double loss = 0.0;
    for (Index i = 0; i < B; ++i) {
        const double lse_row = detail::logsumexp(S.data() + i * B, B, 1);
        const double lse_col = detail::logsumexp(S.data() + i, B, B);
        loss += 0.5 * (lse_row - S(i, i)) + 0.5 * (lse_col - S(i, i));
        for (Index k = 0; k < B; ++k) {
            dS(i, k) += 0.5 * std::exp(S(i, k) - lse_row);  // row softmax of row i
            dS(k, i) += 0.5 * std::exp(S(k, i) - lse_col);  // column softmax of column i
        }
        dS(i, i) -= 1.0;
    }
    dS /= static_cast<double>(B);
    r.value = loss / static_cast<double>(B);
    r.grad_a = dS * b.rows / tau;
    r.grad_b = dS.transpose() * a.rows / tau;
    // S scales as exp(-log_tau)
    r.grad_log_tau = head.clamped() ? 0.0 : -(dS.cwiseProduct(S)).sum();
    return r;
}

/// MoCo negatives queue: fixed-capacity FIFO of unit-norm keys.
struct MocoState {
    Index capacity = 1024;
    Index dim = 0;
    double momentum = 0.999;
    double tau = 0.07;
    Mat storage;      // capacity x dim ring buffer
    Index size = 0;   // number of valid rows
    Index head = 0;   // next write position

    MocoState() = default;
    MocoState(Index capacity_, Index dim_, double momentum_ = 0.999, double tau_ = 0.07)
        : capacity(capacity_), dim(dim_), momentum(momentum_), tau(tau_), storage(Mat::Zero(capacity_, dim_)) {
        if (capacity_ < 1 || dim_ < 1) throw DomainError("MocoState: capacity and dim must be positive");
    }

    /// Keys from oldest to newest.
    Mat ordered() const {
        Mat out(size, dim);
        const Index start = (head - size + capacity) % capacity;
        for (Index i = 0; i < size; ++i) out.row(i) = storage.row((start + i) % capacity);
        return out;
    }
};

struct MocoResult {
    double value = 0.0;
    Mat grad_query;
};

/// InfoNCE of each query against its key (positive) and the queued keys
/// (negatives), averaged over the batch. The state is not modified.
inline MocoResult moco_loss(const EmbeddingBatch& query, const EmbeddingBatch& key, const MocoState& state) {
    if (query.size() != key.size() || query.rows.cols() != key.rows.cols())
        throw DomainError("moco_loss: query/key batch mismatch");
    if (state.size > 0 && state.dim != query.rows.cols()) throw DomainError("moco_loss: queue dim mismatch");
    const Index B = query.size();
    const double inv_tau = 1.0 / state.tau;
    // negatives are summed, so storage order is irrelevant
    const Mat queue = state.storage.topRows(state.size);
    MocoResult r;
    r.grad_query = Mat::Zero(B, query.rows.cols());
    double loss = 0.0;
    std::vector<double> logits(state.size + 1);
    for (Index i = 0; i < B; ++i) {
        logits[0] = query.rows.row(i).dot(key.rows.row(i)) * inv_tau;
        if (state.size > 0) {
            const Eigen::VectorXd neg = queue * query.rows.row(i).transpose() * inv_tau;
            for (Index j = 0; j < state.size; ++j) logits[j + 1] = neg[j];
        }
        const double lse = detail::logsumexp(logits.data(), state.size + 1, 1);
        loss += lse - logits[0];
        RowVec g = (std::exp(logits[0] - lse) - 1.0) * key.rows.row(i);
        for (Index j = 0; j < state.size; ++j) g += std::exp(logits[j + 1] - lse) * queue.row(j);
        r.grad_query.row(i) = g * inv_tau / static_cast<double>(B);
    }
    r.value = loss / static_cast<double>(B);
    return r;
}

/// Enqueues new keys and evicts the oldest beyond capacity.
inline MocoState moco_update(MocoState state, const EmbeddingBatch& keys) {
    if (state.storage.rows() != state.capacity || state.storage.cols() != state.dim)
        state.storage = Mat::Zero(state.capacity, state.dim);
    if (keys.rows.cols() != state.dim) throw DomainError("moco_update: key dim mismatch");
    for (Index i = 0; i < keys.size(); ++i) {
        state.storage.row(state.head) = keys.rows.row(i);
        state.head = (state.head + 1) % state.capacity;
        state.size = std::min(state.size + 1, state.capacity);
    }
    return state;
}

// ---------------------------------------------------------------------------
// Token cross-entropy

struct TokenCeResult {
    double value = 0.0;
    Mat grad_logits;
};

/// Mean over masked rows of -log softmax(logits)[target].
inline TokenCeResult token_ce(const Mat& logits, std::span<const int> targets, const std::vector<bool>& mask) {
    const Index G = logits.rows(), V = logits.cols();
    if (V < 2) throw DomainError("token_ce: need at least two classes");
    if (Index(targets.size()) != G || Index(mask.size()) != G) throw DomainError("token_ce: targets/mask length mismatch");
    Index m = 0;
    for (bool b : mask) m += b ? 1 : 0;
    if (m == 0) throw DomainError("token_ce: no masked positions");

    TokenCeResult r;
    r.grad_logits = Mat::Zero(G, V);
    double loss = 0.0;
    for (Index g = 0; g < G; ++g) {
        if (!mask[g]) continue;
        const int t = targets[g];
        if (t < 0 || t >= V) throw DomainError("token_ce: target id out of range");
        const double lse = detail::logsumexp(logits.data() + g * V, V, 1);
        loss += lse - logits(g, t);
        for (Index v = 0; v < V; ++v) r.grad_logits(g, v) = std::exp(logits(g, v) - lse) / double(m);
        r.grad_logits(g, t) -= 1.0 / double(m);
    }
    r.value = loss / double(m);
    return r;
}

inline TokenCeResult token_ce(const Mat& logits, std::span<const int> targets) {
    return token_ce(logits, targets, std::vector<bool>(targets.size(), true));
}

// ---------------------------------------------------------------------------
// Weighted objective

struct LossWeights {
    double alpha = 0.1;  // (RGB, depth)
    double beta = 0.1;   // (RGB, point)
    double theta = 0.1;  // (point, depth)
};

struct LossParts {
    double l_rd = 0.0;
    double l_rp = 0.0;
    double l_pd = 0.0;
    double l_moco = 0.0;
    double l_ce = 0.0;
    double l_dr = 0.0;
    double l_cd = 0.0;

    static constexpr std::array<const char*, 7> names = {"l_rd", "l_rp", "l_pd", "l_moco", "l_ce", "l_dr", "l_cd"};
    std::array<double, 7> values() const { return {l_rd, l_rp, l_pd, l_moco, l_ce, l_dr, l_cd}; }
};

/// alpha L(R,D) + beta L(R,P) + theta L(P,D) + L_moco + L_ce + L_dr + L_cd.
inline double total_loss(const LossParts& p, const LossWeights& w = {}) {
    const auto v = p.values();
    for (std::size_t i = 0; i < v.size(); ++i)
        if (!std::isfinite(v[i])) throw NonFiniteError(LossParts::names[i]);
    return w.alpha * p.l_rd + w.beta * p.l_rp + w.theta * p.l_pd + p.l_moco + p.l_ce + p.l_dr + p.l_cd;
}

}  // namespace drpoint
