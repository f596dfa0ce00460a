#pragma once

#include <cmath>
#include <string>

#include "drpoint/autodiff.hpp"
#include "drpoint/rng.hpp"

namespace drpoint::nn {

using ad::Tape;
using ad::Var;

// ---------------------------------------------------------------------------
// Initialization

inline Mat normal_matrix(Index rows, Index cols, double stddev, Rng& rng) {
    Mat m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * rng.normal();
    return m;
}

/// Weight (in x out) and bias (1 x out). Default init is N(0, 0.02^2), as in ViT-style backbones.
inline void init_linear(ParamStore& ps, const std::string& name, Index in, Index out, Rng& rng,
                        double stddev = 0.02) {
    ps.add(name + ".w", normal_matrix(in, out, stddev, rng));
    ps.add(name + ".b", Mat::Zero(1, out));
}

/// He-normal fan-in init for ReLU stacks.
inline void init_linear_he(ParamStore& ps, const std::string& name, Index in, Index out, Rng& rng) {
    init_linear(ps, name, in, out, rng, std::sqrt(2.0 / static_cast<double>(in)));
}

inline void init_layer_norm(ParamStore& ps, const std::string& name, Index dim) {
    ps.add(name + ".g", Mat::Ones(1, dim));
    ps.add(name + ".b", Mat::Zero(1, dim));
}

// ---------------------------------------------------------------------------
// Layers

inline Var linear(Tape& t, const ParamStore& ps, const std::string& name, Var x) {
    return ad::linear(x, t.param(ps, name + ".w"), t.param(ps, name + ".b"));
}

inline Var layer_norm(Tape& t, const ParamStore& ps, const std::string& name, Var x) {
    return ad::layer_norm(x, t.param(ps, name + ".g"), t.param(ps, name + ".b"));
}

/// in -> hidden (GELU) -> out.
inline void init_mlp(ParamStore& ps, const std::string& name, Index in, Index hidden, Index out, Rng& rng) {
    init_linear(ps, name + ".fc1", in, hidden, rng);
    init_linear(ps, name + ".fc2", hidden, out, rng);
}

/// Same shape as init_mlp with fan-in scaled weights, for projection heads.
inline void init_head_mlp(ParamStore& ps, const std::string& name, Index in, Index hidden, Index out, Rng& rng) {
    init_linear_he(ps, name + ".fc1", in, hidden, rng);
    init_linear(ps, name + ".fc2", hidden, out, rng, std::sqrt(1.0 / static_cast<double>(hidden)));
}

inline Var mlp(Tape& t, const ParamStore& ps, const std::string& name, Var x) {
    return linear(t, ps, name + ".fc2", ad::gelu(linear(t, ps, name + ".fc1", x)));
}

// ---------------------------------------------------------------------------
// Transformer block

struct BlockShape {
    Index dim = 384;
    int heads = 6;
    int ffn_ratio = 4;
};

inline void init_block(ParamStore& ps, const std::string& name, const BlockShape& s, Rng& rng) {
    init_layer_norm(ps, name + ".norm1", s.dim);
    init_linear(ps, name + ".attn.q", s.dim, s.dim, rng);
    init_linear(ps, name + ".attn.k", s.dim, s.dim, rng);
    init_linear(ps, name + ".attn.v", s.dim, s.dim, rng);
    init_linear(ps, name + ".attn.o", s.dim, s.dim, rng);
    init_layer_norm(ps, name + ".norm2", s.dim);
    init_mlp(ps, name + ".ffn", s.dim, s.dim * s.ffn_ratio, s.dim, rng);
}

/// Per-sample residual-branch gate for stochastic depth: 0 (dropped) or 1/keep.
struct DropPath {
    double rate = 0.0;
    Rng* rng = nullptr;  // null = eval mode

    double gate() const {
        if (!rng || rate <= 0.0) return 1.0;
        const double keep = 1.0 - rate;
        return rng->bernoulli(keep) ? 1.0 / keep : 0.0;
    }
};

inline Var residual(Var x, Var branch, double gate) {
    if (gate == 0.0) return x;
    return ad::add(x, gate == 1.0 ? branch : ad::scale(branch, gate));
}

/// Pre-norm block: x + attn(LN(x)), then x + FFN(LN(x)).
inline Var block(Tape& t, const ParamStore& ps, const std::string& name, Var x, int heads, const DropPath& dp = {}) {
    const double g_attn = dp.gate();
    const double g_ffn = dp.gate();
    if (g_attn != 0.0) {
        const Var h = layer_norm(t, ps, name + ".norm1", x);
        const Var a = ad::attention(linear(t, ps, name + ".attn.q", h), linear(t, ps, name + ".attn.k", h),
                                    linear(t, ps, name + ".attn.v", h), heads);
        x = residual(x, linear(t, ps, name + ".attn.o", a), g_attn);
    }
    if (g_ffn != 0.0) {
        const Var h = layer_norm(t, ps, name + ".norm2", x);
        x = residual(x, mlp(t, ps, name + ".ffn", h), g_ffn);
    }
    return x;
}

}  // namespace drpoint::nn
