#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "drpoint/error.hpp"
#include "drpoint/tensor.hpp"

namespace drpoint {

/// Named parameter tensors. Ordered by name so every traversal is deterministic.
struct ParamStore {
    std::map<std::string, Mat> tensors;

    Mat& add(const std::string& name, Mat value) {
        auto [it, inserted] = tensors.emplace(name, std::move(value));
        if (!inserted) throw DomainError("ParamStore: duplicate parameter " + name);
        return it->second;
    }
    const Mat& at(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw DomainError("ParamStore: missing parameter " + name);
        return it->second;
    }
    Mat& at(const std::string& name) { return const_cast<Mat&>(std::as_const(*this).at(name)); }
    bool contains(const std::string& name) const { return tensors.count(name) != 0; }

    Index numel() const {
        Index n = 0;
        for (const auto& [_, m] : tensors) n += m.size();
        return n;
    }

    /// Same names and shapes.
    bool congruent(const ParamStore& other) const {
        if (tensors.size() != other.tensors.size()) return false;
        auto a = tensors.begin();
        auto b = other.tensors.begin();
        for (; a != tensors.end(); ++a, ++b)
            if (a->first != b->first || a->second.rows() != b->second.rows() || a->second.cols() != b->second.cols())
                return false;
        return true;
    }
};

using Gradients = std::map<std::string, Mat>;

namespace ad {

class Tape;

/// Handle to a node on a Tape.
struct Var {
    Tape* tape = nullptr;
    int id = -1;

    const Mat& value() const;
    Index rows() const { return value().rows(); }
    Index cols() const { return value().cols(); }
    double scalar() const { return value()(0, 0); }
};

/// Reverse-mode tape over dense matrices. Nodes are recorded in creation order
/// and swept backwards once; each node's backward closure accumulates into its
/// parents' gradients.
class Tape {
public:
    using Backward = std::function<void(const Mat& grad_out)>;

    Var constant(Mat value) { return push(std::move(value), false, {}); }

    /// Leaf whose gradient can be read back with grad().
    Var input(Mat value) { return push(std::move(value), true, {}); }

    /// Leaf bound to a stored parameter (not copied). Repeated requests for the
    /// same tensor return the same node.
    Var param(const ParamStore& store, const std::string& name, bool trainable = true) {
        const Mat* ptr = &store.at(name);
        auto it = param_ids_.find(ptr);
        if (it != param_ids_.end()) return Var{this, it->second};
        Node& n = nodes_.emplace_back();
        n.ref = ptr;
        n.requires_grad = trainable;
        const int id = int(nodes_.size()) - 1;
        param_ids_[ptr] = id;
        if (trainable) param_names_.emplace_back(name, id);
        return Var{this, id};
    }

    /// Records an op result. `parents` decide whether the node needs a gradient.
    Var record(Mat value, const std::vector<Var>& parents, Backward backward) {
        bool req = false;
        for (const Var& p : parents) req = req || nodes_[p.id].requires_grad;
        return push(std::move(value), req, req ? std::move(backward) : Backward{});
    }

    const Mat& value(int id) const {
        const Node& n = nodes_[id];
        return n.ref ? *n.ref : n.own;
    }
    bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

    void accumulate(Var v, const Mat& g) {
        Node& n = nodes_[v.id];
        if (!n.requires_grad) return;
        if (n.grad.size() == 0) {
            n.grad = g;
        } else {
            n.grad += g;
        }
    }

    /// Gradient of a node after backward(); zero if it never received one.
    Mat grad(Var v) const {
        const Node& n = nodes_[v.id];
        if (n.grad.size() == 0) return Mat::Zero(value(v.id).rows(), value(v.id).cols());
        return n.grad;
    }

    /// Seeds the given nodes with cotangents and sweeps the tape backwards.
    void backward(const std::vector<std::pair<Var, Mat>>& seeds) {
        for (const auto& [v, g] : seeds) {
            if (g.rows() != v.rows() || g.cols() != v.cols()) throw DomainError("Tape::backward: seed shape mismatch");
            accumulate(v, g);
        }
        for (int id = int(nodes_.size()) - 1; id >= 0; --id) {
            Node& n = nodes_[id];
            if (!n.backward || n.grad.size() == 0) continue;
            n.backward(n.grad);
            n.backward = nullptr;  // release captured activations
        }
    }

    void backward(Var scalar_loss) { backward({{scalar_loss, Mat::Constant(1, 1, 1.0)}}); }

    /// Gradients of every trainable parameter reached by the sweep, by name.
    Gradients param_grads() const {
        Gradients out;
        for (const auto& [name, id] : param_names_) {
            const Node& n = nodes_[id];
            if (n.grad.size() != 0) out[name] = n.grad;
        }
        return out;
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Mat own;
        const Mat* ref = nullptr;
        Mat grad;
        bool requires_grad = false;
        Backward backward;
    };

    Var push(Mat value, bool req, Backward backward) {
        Node& n = nodes_.emplace_back();
        n.own = std::move(value);
        n.requires_grad = req;
        n.backward = std::move(backward);
        return Var{this, int(nodes_.size()) - 1};
    }

    std::deque<Node> nodes_;
    std::map<const Mat*, int> param_ids_;
    std::vector<std::pair<std::string, int>> param_names_;
};

inline const Mat& Var::value() const { return tape->value(id); }

// ---------------------------------------------------------------------------
// Elementary ops

inline Var matmul(Var a, Var b) {
    Tape& t = *a.tape;
    return t.record(a.value() * b.value(), {a, b}, [&t, a, b](const Mat& g) {
        if (t.requires_grad(a)) t.accumulate(a, g * b.value().transpose());
        if (t.requires_grad(b)) t.accumulate(b, a.value().transpose() * g);
    });
}

/// x W + b with b a 1 x out row broadcast over rows.
inline Var linear(Var x, Var w, Var b) {
    Tape& t = *x.tape;
    if (x.cols() != w.rows() || b.rows() != 1 || b.cols() != w.cols())
        throw DomainError("linear: shape mismatch");
    Mat y = x.value() * w.value();
    y.rowwise() += b.value().row(0);
    return t.record(std::move(y), {x, w, b}, [&t, x, w, b](const Mat& g) {
        if (t.requires_grad(x)) t.accumulate(x, g * w.value().transpose());
        if (t.requires_grad(w)) t.accumulate(w, x.value().transpose() * g);
        if (t.requires_grad(b)) t.accumulate(b, g.colwise().sum());
    });
}

inline Var add(Var a, Var b) {
    Tape& t = *a.tape;
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw DomainError("add: shape mismatch");
    return t.record(a.value() + b.value(), {a, b}, [&t, a, b](const Mat& g) {
        t.accumulate(a, g);
        t.accumulate(b, g);
    });
}

inline Var sub(Var a, Var b) {
    Tape& t = *a.tape;
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw DomainError("sub: shape mismatch");
    return t.record(a.value() - b.value(), {a, b}, [&t, a, b](const Mat& g) {
        t.accumulate(a, g);
        if (t.requires_grad(b)) t.accumulate(b, -g);
    });
}

/// a + r with r a single row broadcast over the rows of a.
inline Var add_row(Var a, Var r) {
    Tape& t = *a.tape;
    if (r.rows() != 1 || r.cols() != a.cols()) throw DomainError("add_row: shape mismatch");
    Mat y = a.value();
    y.rowwise() += r.value().row(0);
    return t.record(std::move(y), {a, r}, [&t, a, r](const Mat& g) {
        t.accumulate(a, g);
        if (t.requires_grad(r)) t.accumulate(r, g.colwise().sum());
    });
}

inline Var scale(Var a, double s) {
    Tape& t = *a.tape;
    return t.record(a.value() * s, {a}, [&t, a, s](const Mat& g) { t.accumulate(a, g * s); });
}

inline Var mul(Var a, Var b) {
    Tape& t = *a.tape;
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw DomainError("mul: shape mismatch");
    return t.record(a.value().cwiseProduct(b.value()), {a, b}, [&t, a, b](const Mat& g) {
        if (t.requires_grad(a)) t.accumulate(a, g.cwiseProduct(b.value()));
        if (t.requires_grad(b)) t.accumulate(b, g.cwiseProduct(a.value()));
    });
}

inline Var relu(Var a) {
    Tape& t = *a.tape;
    return t.record(a.value().cwiseMax(0.0), {a}, [&t, a](const Mat& g) {
        t.accumulate(a, g.cwiseProduct(a.value().unaryExpr([](double x) { return x > 0.0 ? 1.0 : 0.0; })));
    });
}

/// Exact (erf) GELU.
inline Var gelu(Var a) {
    Tape& t = *a.tape;
    Mat y = a.value().unaryExpr([](double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); });
    return t.record(std::move(y), {a}, [&t, a](const Mat& g) {
        const double c = 0.5 * M_2_SQRTPI * M_SQRT1_2;  // 1/sqrt(2 pi)
        t.accumulate(a, g.cwiseProduct(a.value().unaryExpr([c](double x) {
            return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * c * std::exp(-0.5 * x * x);
        })));
    });
}

inline Var sum(Var a) {
    Tape& t = *a.tape;
    return t.record(Mat::Constant(1, 1, a.value().sum()), {a}, [&t, a](const Mat& g) {
        t.accumulate(a, Mat::Constant(a.rows(), a.cols(), g(0, 0)));
    });
}

inline Var mean_rows(Var a) {
    Tape& t = *a.tape;
    const double n = static_cast<double>(a.rows());
    return t.record(a.value().colwise().mean(), {a}, [&t, a, n](const Mat& g) {
        Mat ga(a.rows(), a.cols());
        ga.rowwise() = g.row(0) / n;
        t.accumulate(a, ga);
    });
}

/// Row-wise layer normalization with learned per-column gain and bias.
inline Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5) {
    Tape& t = *x.tape;
    const Index n = x.rows(), d = x.cols();
    if (gamma.cols() != d || beta.cols() != d) throw DomainError("layer_norm: shape mismatch");
    auto xhat = std::make_shared<Mat>(n, d);
    auto inv_std = std::make_shared<Eigen::VectorXd>(n);
    const Mat& xv = x.value();
    for (Index i = 0; i < n; ++i) {
        const double mu = xv.row(i).mean();
        const double var = (xv.row(i).array() - mu).square().mean();
        (*inv_std)[i] = 1.0 / std::sqrt(var + eps);
        xhat->row(i) = (xv.row(i).array() - mu) * (*inv_std)[i];
    }
    Mat y = xhat->array().rowwise() * gamma.value().row(0).array();
    y.rowwise() += beta.value().row(0);
    return t.record(std::move(y), {x, gamma, beta}, [&t, x, gamma, beta, xhat, inv_std](const Mat& g) {
        if (t.requires_grad(gamma)) t.accumulate(gamma, g.cwiseProduct(*xhat).colwise().sum());
        if (t.requires_grad(beta)) t.accumulate(beta, g.colwise().sum());
        if (t.requires_grad(x)) {
            const Mat gx = g.array().rowwise() * gamma.value().row(0).array();
            Mat dx(gx.rows(), gx.cols());
            for (Index i = 0; i < gx.rows(); ++i) {
                const double m1 = gx.row(i).mean();
                const double m2 = gx.row(i).cwiseProduct(xhat->row(i)).mean();
                dx.row(i) = (gx.row(i).array() - m1 - xhat->row(i).array() * m2) * (*inv_std)[i];
            }
            t.accumulate(x, dx);
        }
    });
}

/// Multi-head scaled dot-product attention on already-projected q (n x d),
/// k and v (m x d); heads split the columns evenly.
inline Var attention(Var q, Var k, Var v, int heads) {
    Tape& t = *q.tape;
    const Index n = q.rows(), m = k.rows(), d = q.cols();
    if (k.cols() != d || v.cols() != d || v.rows() != m) throw DomainError("attention: shape mismatch");
    if (heads <= 0 || d % heads != 0) throw DomainError("attention: dim must be divisible by heads");
    const Index dh = d / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    auto probs = std::make_shared<std::vector<Mat>>(heads);
    Mat out(n, d);
    for (int h = 0; h < heads; ++h) {
        Mat s = q.value().middleCols(h * dh, dh) * k.value().middleCols(h * dh, dh).transpose() * sc;
        for (Index i = 0; i < n; ++i) {
            const double mx = s.row(i).maxCoeff();
            s.row(i) = (s.row(i).array() - mx).exp();
            s.row(i) /= s.row(i).sum();
        }
        out.middleCols(h * dh, dh) = s * v.value().middleCols(h * dh, dh);
        (*probs)[h] = std::move(s);
    }
    return t.record(std::move(out), {q, k, v}, [&t, q, k, v, heads, dh, sc, probs](const Mat& g) {
        Mat gq = Mat::Zero(q.rows(), q.cols());
        Mat gk = Mat::Zero(k.rows(), k.cols());
        Mat gv = Mat::Zero(v.rows(), v.cols());
        for (int h = 0; h < heads; ++h) {
            const Mat& p = (*probs)[h];
            const auto gh = g.middleCols(h * dh, dh);
            gv.middleCols(h * dh, dh) = p.transpose() * gh;
            Mat dp = gh * v.value().middleCols(h * dh, dh).transpose();
            // softmax backward: ds = p * (dp - rowsum(dp * p))
            const Eigen::VectorXd r = dp.cwiseProduct(p).rowwise().sum();
            Mat ds = p.cwiseProduct(dp.colwise() - r) * sc;
            gq.middleCols(h * dh, dh) = ds * k.value().middleCols(h * dh, dh);
            gk.middleCols(h * dh, dh) = ds.transpose() * q.value().middleCols(h * dh, dh);
        }
        t.accumulate(q, gq);
        t.accumulate(k, gk);
        t.accumulate(v, gv);
    });
}

inline Var gather_rows(Var a, std::vector<Index> idx) {
    Tape& t = *a.tape;
    Mat y(static_cast<Index>(idx.size()), a.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= a.rows()) throw DomainError("gather_rows: index out of range");
        y.row(Index(i)) = a.value().row(idx[i]);
    }
    return t.record(std::move(y), {a}, [&t, a, idx = std::move(idx)](const Mat& g) {
        Mat ga = Mat::Zero(a.rows(), a.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) ga.row(idx[i]) += g.row(Index(i));
        t.accumulate(a, ga);
    });
}

inline Var slice_rows(Var a, Index start, Index count) {
    Tape& t = *a.tape;
    if (start < 0 || count < 0 || start + count > a.rows()) throw DomainError("slice_rows: out of range");
    return t.record(a.value().middleRows(start, count), {a}, [&t, a, start, count](const Mat& g) {
        Mat ga = Mat::Zero(a.rows(), a.cols());
        ga.middleRows(start, count) = g;
        t.accumulate(a, ga);
    });
}

inline Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw DomainError("concat_rows: nothing to concatenate");
    Tape& t = *parts[0].tape;
    Index rows = 0;
    const Index cols = parts[0].cols();
    for (const Var& p : parts) {
        if (p.cols() != cols) throw DomainError("concat_rows: column mismatch");
        rows += p.rows();
    }
    Mat y(rows, cols);
    Index r = 0;
    for (const Var& p : parts) {
        y.middleRows(r, p.rows()) = p.value();
        r += p.rows();
    }
    return t.record(std::move(y), parts, [&t, parts](const Mat& g) {
        Index r = 0;
        for (const Var& p : parts) {
            if (t.requires_grad(p)) t.accumulate(p, g.middleRows(r, p.rows()));
            r += p.rows();
        }
    });
}

/// Max over consecutive blocks of `group` rows: (G * group) x c -> G x c.
/// Ties resolve to the first row of the block.
inline Var group_max(Var a, Index group) {
    Tape& t = *a.tape;
    if (group <= 0 || a.rows() % group != 0) throw DomainError("group_max: rows must be a multiple of the group size");
    const Index G = a.rows() / group, c = a.cols();
    Mat y(G, c);
    auto arg = std::make_shared<std::vector<Index>>(G * c);
    const Mat& x = a.value();
    for (Index g = 0; g < G; ++g) {
        for (Index j = 0; j < c; ++j) {
            Index best = g * group;
            for (Index r = g * group + 1; r < (g + 1) * group; ++r)
                if (x(r, j) > x(best, j)) best = r;
            y(g, j) = x(best, j);
            (*arg)[g * c + j] = best;
        }
    }
    return t.record(std::move(y), {a}, [&t, a, arg, G, c](const Mat& g) {
        Mat ga = Mat::Zero(a.rows(), a.cols());
        for (Index i = 0; i < G; ++i)
            for (Index j = 0; j < c; ++j) ga((*arg)[i * c + j], j) += g(i, j);
        t.accumulate(a, ga);
    });
}

/// Scales every row to unit Euclidean norm.
inline Var normalize_rows(Var a) {
    Tape& t = *a.tape;
    auto norms = std::make_shared<Eigen::VectorXd>(a.value().rowwise().norm());
    for (Index i = 0; i < norms->size(); ++i) {
        if (!std::isfinite((*norms)[i])) throw NonFiniteError("embedding (normalize_rows input)");
        if (!((*norms)[i] > 0.0)) throw DomainError("normalize_rows: zero-norm row");
    }
    Mat y = a.value().array().colwise() / norms->array();
    auto yv = std::make_shared<Mat>(y);
    return t.record(std::move(y), {a}, [&t, a, norms, yv](const Mat& g) {
        // d(x/|x|) = (g - y (y . g)) / |x|
        const Eigen::VectorXd dots = g.cwiseProduct(*yv).rowwise().sum();
        Mat ga = (g - (yv->array().colwise() * dots.array()).matrix());
        ga.array().colwise() /= norms->array();
        t.accumulate(a, ga);
    });
}

/// Same data in row-major order, new shape.
inline Var reshape(Var a, Index rows, Index cols) {
    Tape& t = *a.tape;
    if (rows * cols != a.value().size()) throw DomainError("reshape: element count mismatch");
    Mat y = Eigen::Map<const Mat>(a.value().data(), rows, cols);
    const Index r0 = a.rows(), c0 = a.cols();
    return t.record(std::move(y), {a}, [&t, a, r0, c0](const Mat& g) {
        t.accumulate(a, Eigen::Map<const Mat>(g.data(), r0, c0));
    });
}

/// 3x3 convolution with zero padding 1 on an image stored as (H*W) x C rows.
/// Weights are (9*C) x Cout with row index (ky*3 + kx)*C + c.
inline Var conv3x3(Var x, Var w, Var b, int height, int width, int stride) {
    Tape& t = *x.tape;
    const Index C = x.cols();
    if (x.rows() != Index(height) * width) throw DomainError("conv3x3: input is not H*W rows");
    if (w.rows() != 9 * C || b.cols() != w.cols()) throw DomainError("conv3x3: weight shape mismatch");
    const int ho = (height - 1) / stride + 1, wo = (width - 1) / stride + 1;
    auto cols = std::make_shared<Mat>(Mat::Zero(Index(ho) * wo, 9 * C));
    const Mat& xv = x.value();
    for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox)
            for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx) {
                    const int iy = oy * stride + ky - 1, ix = ox * stride + kx - 1;
                    if (iy < 0 || iy >= height || ix < 0 || ix >= width) continue;
                    cols->row(Index(oy) * wo + ox).segment((ky * 3 + kx) * C, C) = xv.row(Index(iy) * width + ix);
                }
    Mat y = *cols * w.value();
    y.rowwise() += b.value().row(0);
    return t.record(std::move(y), {x, w, b}, [&t, x, w, b, cols, height, width, stride, ho, wo, C](const Mat& g) {
        if (t.requires_grad(w)) t.accumulate(w, cols->transpose() * g);
        if (t.requires_grad(b)) t.accumulate(b, g.colwise().sum());
        if (!t.requires_grad(x)) return;
        const Mat gc = g * w.value().transpose();
        Mat gx = Mat::Zero(Index(height) * width, C);
        for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox)
                for (int ky = 0; ky < 3; ++ky)
                    for (int kx = 0; kx < 3; ++kx) {
                        const int iy = oy * stride + ky - 1, ix = ox * stride + kx - 1;
                        if (iy < 0 || iy >= height || ix < 0 || ix >= width) continue;
                        gx.row(Index(iy) * width + ix) += gc.row(Index(oy) * wo + ox).segment((ky * 3 + kx) * C, C);
                    }
        t.accumulate(x, gx);
    });
}

/// Wraps an externally differentiated function: `backward` receives the output
/// cotangent and returns one cotangent per input (empty Mat = no gradient).
inline Var custom(const std::vector<Var>& inputs, Mat value, std::function<std::vector<Mat>(const Mat&)> backward) {
    if (inputs.empty()) throw DomainError("custom: needs at least one input");
    Tape& t = *inputs[0].tape;
    return t.record(std::move(value), inputs, [&t, inputs, backward = std::move(backward)](const Mat& g) {
        std::vector<Mat> grads = backward(g);
        for (std::size_t i = 0; i < inputs.size() && i < grads.size(); ++i)
            if (grads[i].size() != 0) t.accumulate(inputs[i], grads[i]);
    });
}

}  // namespace ad
}  // namespace drpoint
