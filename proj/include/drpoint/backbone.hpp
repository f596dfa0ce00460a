#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "drpoint/autodiff.hpp"
#include "drpoint/geometry.hpp"
#include "drpoint/nn.hpp"
#include "drpoint/rng.hpp"

namespace drpoint {

using ad::Tape;
using ad::Var;

// ---------------------------------------------------------------------------
// Grouping

/// Farthest-point sampling starting from `start`; ties go to the lowest index.
inline std::vector<Index> fps_from(const PointCloud& cloud, Index m, Index start) {
    const Index n = cloud.count();
    if (m < 1 || m > n) throw DomainError("fps: need 1 <= m <= point count");
    if (start < 0 || start >= n) throw DomainError("fps: start index out of range");
    std::vector<Index> picked;
    picked.reserve(m);
    std::vector<double> dist(n, std::numeric_limits<double>::infinity());
    Index cur = start;
    for (Index s = 0; s < m; ++s) {
        picked.push_back(cur);
        const Eigen::RowVector3d c = cloud.xyz.row(cur);
        Index next = 0;
        double best = -1.0;
        for (Index i = 0; i < n; ++i) {
            const double d = (cloud.xyz.row(i) - c).squaredNorm();
            if (d < dist[i]) dist[i] = d;
            if (dist[i] > best) {
                best = dist[i];
                next = i;
            }
        }
        cur = next;
    }
    return picked;
}

/// FPS whose first index is drawn from `seed`.
inline std::vector<Index> fps(const PointCloud& cloud, Index m, std::uint64_t seed) {
    if (cloud.count() < 1) throw DomainError("fps: empty cloud");
    Rng rng(seed, Stream::Fps);
    return fps_from(cloud, m, static_cast<Index>(rng.index(cloud.count())));
}

/// G groups of k points each; groups holds (G*k) rows of center-relative
/// coordinates, group g occupying rows [g*k, (g+1)*k).
struct GroupedTokens {
    Points centers;
    Points groups;
    std::vector<Index> indices;  // source point of each groups row
    Index k = 0;

    Index num_groups() const { return centers.rows(); }
    /// World coordinates of group g.
    Points world_group(Index g) const {
        Points out = groups.middleRows(g * k, k);
        out.rowwise() += centers.row(g);
        return out;
    }
};

inline GroupedTokens knn_group(const PointCloud& cloud, const Points& centers, Index k) {
    const Index n = cloud.count();
    if (k < 1 || k > n) throw DomainError("knn_group: need 1 <= k <= point count");
    GroupedTokens out;
    out.centers = centers;
    out.k = k;
    out.groups.resize(centers.rows() * k, 3);
    out.indices.resize(centers.rows() * k);
    std::vector<std::pair<double, Index>> d(n);
    for (Index g = 0; g < centers.rows(); ++g) {
        for (Index i = 0; i < n; ++i) d[i] = {(cloud.xyz.row(i) - centers.row(g)).squaredNorm(), i};
        std::partial_sort(d.begin(), d.begin() + k, d.end());  // pair order breaks ties by index
        for (Index j = 0; j < k; ++j) {
            out.indices[g * k + j] = d[j].second;
            out.groups.row(g * k + j) = cloud.xyz.row(d[j].second) - centers.row(g);
        }
    }
    return out;
}

/// FPS centers followed by kNN grouping.
inline GroupedTokens group_cloud(const PointCloud& cloud, Index num_groups, Index group_size, std::uint64_t seed) {
    const std::vector<Index> c = fps(cloud, num_groups, seed);
    Points centers(num_groups, 3);
    for (Index g = 0; g < num_groups; ++g) centers.row(g) = cloud.xyz.row(c[g]);
    return knn_group(cloud, centers, group_size);
}

// ---------------------------------------------------------------------------
// Masking

struct TokenMask {
    std::vector<Index> visible;  // ascending
    std::vector<Index> masked;   // ascending
};

/// Masks exactly floor(ratio * G) tokens, chosen uniformly without replacement.
inline TokenMask mask_tokens(Index G, double ratio, std::uint64_t seed) {
    if (!(ratio >= 0.0 && ratio < 1.0)) throw DomainError("mask_tokens: ratio must lie in [0, 1)");
    const Index n_mask = static_cast<Index>(std::floor(ratio * static_cast<double>(G) + 1e-9));
    Rng rng(seed, Stream::Mask);
    const std::vector<std::size_t> perm = rng.permutation(static_cast<std::size_t>(G));
    std::vector<bool> is_masked(G, false);
    for (Index i = 0; i < n_mask; ++i) is_masked[perm[i]] = true;
    TokenMask m;
    for (Index g = 0; g < G; ++g) (is_masked[g] ? m.masked : m.visible).push_back(g);
    return m;
}

// ---------------------------------------------------------------------------
// Configuration

struct EncoderConfig {
    int layers = 12;
    int dim = 384;
    int heads = 6;
    int ffn_ratio = 4;
    double droppath_rate = 0.1;

    void validate() const {
        if (layers < 1 || dim < 1 || heads < 1 || ffn_ratio < 1) throw DomainError("EncoderConfig: sizes must be positive");
        if (dim % heads != 0) throw DomainError("EncoderConfig: dim must be divisible by heads");
        if (!(droppath_rate >= 0.0 && droppath_rate < 1.0))
            throw DomainError("EncoderConfig: droppath_rate must lie in [0, 1)");
    }
    nn::BlockShape block() const { return {dim, heads, ffn_ratio}; }
};

struct BackboneConfig {
    EncoderConfig encoder;
    int num_groups = 64;
    int group_size = 32;
    int embed_hidden = 64;        // pointwise MLP width inside each group
    int token_decoder_blocks = 1;
    int point_decoder_blocks = 4;
    int codebook_size = 64;
    int image_size = 224;
    int image_width = 16;         // channels of the first conv stage; doubles per stage
    int external_feature_dim = 0; // > 0 enables the precomputed-feature projection

    void validate() const {
        encoder.validate();
        if (num_groups < 1 || group_size < 1 || embed_hidden < 1) throw DomainError("BackboneConfig: group sizes must be positive");
        if (token_decoder_blocks < 1 || point_decoder_blocks < 1) throw DomainError("BackboneConfig: decoder depth must be positive");
        if (codebook_size < 2) throw DomainError("BackboneConfig: codebook_size must be >= 2");
        if (image_size < 16) throw DomainError("BackboneConfig: image_size must be >= 16");
        if (image_width < 1 || external_feature_dim < 0) throw DomainError("BackboneConfig: invalid image encoder width");
    }
};

// ---------------------------------------------------------------------------
// Group embedding

inline void init_group_embedder(ParamStore& ps, const BackboneConfig& cfg, Rng& rng) {
    nn::init_linear_he(ps, "embed.fc1", 3, cfg.embed_hidden, rng);
    nn::init_linear(ps, "embed.fc2", cfg.embed_hidden, cfg.encoder.dim, rng, std::sqrt(1.0 / cfg.embed_hidden));
    nn::init_linear_he(ps, "embed.pos.fc1", 3, 128, rng);
    nn::init_linear(ps, "embed.pos.fc2", 128, cfg.encoder.dim, rng, std::sqrt(1.0 / 128));
}

/// Shared pointwise MLP over every point followed by a max over each group:
/// (G*k) x 3 -> G x dim. Parameters are looked up under `prefix`.
inline Var local_group_features(Tape& t, const ParamStore& ps, const GroupedTokens& tokens,
                                const std::string& prefix = "embed") {
    const Var pts = t.constant(Mat(tokens.groups));
    const Var h = ad::relu(nn::linear(t, ps, prefix + ".fc1", pts));
    return ad::group_max(nn::linear(t, ps, prefix + ".fc2", h), tokens.k);
}

/// Positional embedding of group centers taken relative to the mean center, so
/// translating the whole cloud leaves it unchanged.
inline Points relative_centers(const Points& centers) {
    Points rel = centers;
    rel.rowwise() -= centers.colwise().mean();
    return rel;
}

inline Var positional_embedding(Tape& t, const ParamStore& ps, const Points& relative) {
    return nn::mlp(t, ps, "embed.pos", t.constant(Mat(relative)));
}

/// Local features plus positional embedding, G x dim.
inline Var embed_groups(Tape& t, const ParamStore& ps, const GroupedTokens& tokens) {
    return ad::add(local_group_features(t, ps, tokens), positional_embedding(t, ps, relative_centers(tokens.centers)));
}

// ---------------------------------------------------------------------------
// Encoder

inline void init_encoder(ParamStore& ps, const EncoderConfig& cfg, Rng& rng) {
    ps.add("encoder.cls", nn::normal_matrix(1, cfg.dim, 0.02, rng));
    ps.add("encoder.cls_pos", nn::normal_matrix(1, cfg.dim, 0.02, rng));
    for (int l = 0; l < cfg.layers; ++l) nn::init_block(ps, "encoder.block" + std::to_string(l), cfg.block(), rng);
    nn::init_layer_norm(ps, "encoder.norm", cfg.dim);
}

/// Prepends the learnable class token (plus its positional term) to G x dim tokens.
inline Var with_class_token(Tape& t, const ParamStore& ps, Var tokens) {
    const Var cls = ad::add(t.param(ps, "encoder.cls"), t.param(ps, "encoder.cls_pos"));
    return ad::concat_rows({cls, tokens});
}

/// The transformer stack (no final norm). `drop_rng` null selects eval mode;
/// stochastic depth rates grow linearly from 0 to droppath_rate across layers.
inline Var encode(Tape& t, const ParamStore& ps, Var x, const EncoderConfig& cfg, Rng* drop_rng = nullptr) {
    if (x.cols() != cfg.dim) throw DomainError("encode: token width does not match encoder dim");
    for (int l = 0; l < cfg.layers; ++l) {
        const double rate = cfg.layers > 1 ? cfg.droppath_rate * l / (cfg.layers - 1) : cfg.droppath_rate;
        x = nn::block(t, ps, "encoder.block" + std::to_string(l), x, cfg.heads, nn::DropPath{rate, drop_rng});
    }
    return x;
}

inline Var encoder_norm(Tape& t, const ParamStore& ps, Var x) { return nn::layer_norm(t, ps, "encoder.norm", x); }

// ---------------------------------------------------------------------------
// Codebook tokenizer

struct Codebook {
    Mat codewords;  // V x E

    Index size() const { return codewords.rows(); }
};

/// Nearest codeword per feature row; ties go to the lowest id.
inline std::vector<int> tokenize(const Mat& features, const Codebook& cb) {
    if (features.cols() != cb.codewords.cols()) throw DomainError("tokenize: feature width mismatch");
    std::vector<int> ids(features.rows());
    for (Index i = 0; i < features.rows(); ++i) {
        double best = std::numeric_limits<double>::infinity();
        int arg = 0;
        for (Index v = 0; v < cb.size(); ++v) {
            const double d = (features.row(i) - cb.codewords.row(v)).squaredNorm();
            if (d < best) {
                best = d;
                arg = int(v);
            }
        }
        ids[i] = arg;
    }
    return ids;
}

/// Lloyd iterations from the given initial codewords. Empty clusters keep
/// their previous codeword.
inline Codebook fit_codebook_from(const Mat& features, Mat init, int iterations) {
    if (features.cols() != init.cols()) throw DomainError("fit_codebook: width mismatch");
    Codebook cb{std::move(init)};
    const Index V = cb.size(), E = features.cols();
    for (int it = 0; it < iterations; ++it) {
        const std::vector<int> ids = tokenize(features, cb);
        Mat sums = Mat::Zero(V, E);
        std::vector<Index> counts(V, 0);
        for (Index i = 0; i < features.rows(); ++i) {
            sums.row(ids[i]) += features.row(i);
            ++counts[ids[i]];
        }
        for (Index v = 0; v < V; ++v)
            if (counts[v] > 0) cb.codewords.row(v) = sums.row(v) / double(counts[v]);
    }
    return cb;
}

/// k-means with V distinct seeded initial rows.
inline Codebook fit_codebook(const Mat& features, Index V, std::uint64_t seed, int iterations = 20) {
    if (V < 2) throw DomainError("fit_codebook: need V >= 2");
    if (features.rows() < V) throw DomainError("fit_codebook: need at least V feature rows");
    Rng rng(seed, Stream::Codebook);
    const std::vector<std::size_t> perm = rng.permutation(static_cast<std::size_t>(features.rows()));
    Mat init(V, features.cols());
    for (Index v = 0; v < V; ++v) init.row(v) = features.row(static_cast<Index>(perm[v]));
    return fit_codebook_from(features, std::move(init), iterations);
}

// ---------------------------------------------------------------------------
// Decoders

inline void init_decoder(ParamStore& ps, const std::string& name, int blocks, Index out, const EncoderConfig& cfg,
                         Rng& rng) {
    ps.add(name + ".mask", nn::normal_matrix(1, cfg.dim, 0.02, rng));
    for (int b = 0; b < blocks; ++b) nn::init_block(ps, name + ".block" + std::to_string(b), cfg.block(), rng);
    nn::init_layer_norm(ps, name + ".norm", cfg.dim);
    nn::init_linear(ps, name + ".head", cfg.dim, out, rng);
}

namespace detail {

// Mask queries (mask embedding + positional term) appended after the visible
// tokens, run through the decoder blocks; returns the normalized query rows.
inline Var decode_queries(Tape& t, const ParamStore& ps, const std::string& name, int blocks, Var visible,
                          Var masked_pos, int heads) {
    if (masked_pos.rows() == 0) throw DomainError(name + ": empty mask set");
    const Var queries = ad::add_row(masked_pos, t.param(ps, name + ".mask"));
    Var x = ad::concat_rows({visible, queries});
    for (int b = 0; b < blocks; ++b) x = nn::block(t, ps, name + ".block" + std::to_string(b), x, heads);
    x = ad::slice_rows(x, visible.rows(), masked_pos.rows());
    return nn::layer_norm(t, ps, name + ".norm", x);
}

}  // namespace detail

/// Token-level decoder: logits over the codebook for each masked group.
inline Var decode_tokens(Tape& t, const ParamStore& ps, Var visible, Var masked_pos, const BackboneConfig& cfg) {
    const Var q = detail::decode_queries(t, ps, "tta", cfg.token_decoder_blocks, visible, masked_pos, cfg.encoder.heads);
    return nn::linear(t, ps, "tta.head", q);
}

/// Point-level decoder: k center-relative points per masked group, returned as
/// (n_masked*k) x 3 world coordinates (offsets plus the group centers).
inline Var decode_points(Tape& t, const ParamStore& ps, Var visible, Var masked_pos, const Points& masked_centers,
                         const BackboneConfig& cfg) {
    const Var q = detail::decode_queries(t, ps, "pta", cfg.point_decoder_blocks, visible, masked_pos, cfg.encoder.heads);
    const Index k = cfg.group_size;
    const Var offsets = ad::reshape(nn::linear(t, ps, "pta.head", q), masked_pos.rows() * k, 3);
    Mat centers(masked_centers.rows() * k, 3);
    for (Index g = 0; g < masked_centers.rows(); ++g)
        for (Index j = 0; j < k; ++j) centers.row(g * k + j) = masked_centers.row(g);
    return ad::add(offsets, t.constant(std::move(centers)));
}

// ---------------------------------------------------------------------------
// Image encoder

inline constexpr int kImageStages = 4;

/// name is "rgb" or "depth"; channels 3 or 1.
inline void init_image_encoder(ParamStore& ps, const std::string& name, int channels, const BackboneConfig& cfg,
                               Rng& rng) {
    int in = channels;
    for (int s = 0; s < kImageStages; ++s) {
        const int out = cfg.image_width << s;
        nn::init_linear_he(ps, name + ".conv" + std::to_string(s), 9 * in, out, rng);
        in = out;
    }
    nn::init_head_mlp(ps, name + ".head", in, cfg.encoder.dim, cfg.encoder.dim, rng);
    if (cfg.external_feature_dim > 0)
        nn::init_linear(ps, name + ".ext", cfg.external_feature_dim, in, rng,
                        std::sqrt(1.0 / cfg.external_feature_dim));
}

/// Four stride-2 conv + ReLU stages, global average pool, two-layer projection
/// head and L2 normalization. `image` holds (S*S) x C rows.
inline Var encode_image(Tape& t, const ParamStore& ps, const std::string& name, Var image, int channels,
                        const BackboneConfig& cfg) {
    const int S = cfg.image_size;
    if (image.rows() != Index(S) * S || image.cols() != channels)
        throw DomainError("encode_image: expected a " + std::to_string(S) + "x" + std::to_string(S) + "x" +
                          std::to_string(channels) + " image");
    Var x = image;
    int h = S, w = S;
    for (int s = 0; s < kImageStages; ++s) {
        const std::string conv = name + ".conv" + std::to_string(s);
        x = ad::relu(ad::conv3x3(x, t.param(ps, conv + ".w"), t.param(ps, conv + ".b"), h, w, 2));
        h = (h - 1) / 2 + 1;
        w = (w - 1) / 2 + 1;
    }
    return ad::normalize_rows(nn::mlp(t, ps, name + ".head", ad::mean_rows(x)));
}

/// Projects a precomputed external image feature (1 x external_feature_dim)
/// through the same head.
inline Var encode_external_features(Tape& t, const ParamStore& ps, const std::string& name, Var features,
                                    const BackboneConfig& cfg) {
    if (cfg.external_feature_dim <= 0 || features.cols() != cfg.external_feature_dim)
        throw DomainError("encode_external_features: feature width does not match the configured dim");
    return ad::normalize_rows(nn::mlp(t, ps, name + ".head", ad::relu(nn::linear(t, ps, name + ".ext", features))));
}

// ---------------------------------------------------------------------------
// Momentum encoder

/// key <- m * key + (1 - m) * query for every tensor of `key`.
inline void momentum_update(ParamStore& key, const ParamStore& query, double m) {
    if (!(m >= 0.0 && m <= 1.0)) throw DomainError("momentum_update: m must lie in [0, 1]");
    for (auto& [name, k] : key.tensors) {
        if (!query.contains(name)) throw DomainError("momentum_update: query lacks " + name);
        const Mat& q = query.at(name);
        if (q.rows() != k.rows() || q.cols() != k.cols()) throw DomainError("momentum_update: shape mismatch for " + name);
        if (m == 1.0) continue;
        k = m * k + (1.0 - m) * q;
    }
}

}  // namespace drpoint
