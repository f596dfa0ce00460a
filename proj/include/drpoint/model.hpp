#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "drpoint/backbone.hpp"
#include "drpoint/image_io.hpp"
#include "drpoint/losses.hpp"

namespace drpoint {

/// Every trainable tensor of the tri-modal model: group embedder, shared
/// encoder, token and point decoders, projection heads, both image encoders and
/// the contrastive temperature.
inline ParamStore init_model(const BackboneConfig& cfg, std::uint64_t seed, double tau_init = 0.07) {
    cfg.validate();
    if (!(tau_init >= ContrastiveHead::kMinTau && tau_init <= ContrastiveHead::kMaxTau))
        throw DomainError("init_model: tau_init must lie in [0.01, 1]");
    Rng rng(seed, Stream::Init);
    ParamStore ps;
    const Index dim = cfg.encoder.dim;
    init_group_embedder(ps, cfg, rng);
    init_encoder(ps, cfg.encoder, rng);
    init_decoder(ps, "tta", cfg.token_decoder_blocks, cfg.codebook_size, cfg.encoder, rng);
    init_decoder(ps, "pta", cfg.point_decoder_blocks, Index(3) * cfg.group_size, cfg.encoder, rng);
    nn::init_head_mlp(ps, "head_p", dim, dim, dim, rng);
    nn::init_head_mlp(ps, "moco_head", dim, dim, dim, rng);
    init_image_encoder(ps, "rgb", 3, cfg, rng);
    init_image_encoder(ps, "depth", 1, cfg, rng);
    ps.add("contrast.log_tau", Mat::Constant(1, 1, std::log(tau_init)));
    return ps;
}

/// Parameters mirrored by the momentum (key) encoder.
inline bool is_key_param(const std::string& name) {
    return name.rfind("embed.", 0) == 0 || name.rfind("encoder.", 0) == 0 || name.rfind("moco_head.", 0) == 0;
}

inline ParamStore key_encoder_copy(const ParamStore& ps) {
    ParamStore key;
    for (const auto& [name, m] : ps.tensors)
        if (is_key_param(name)) key.add(name, m);
    return key;
}

/// Frozen copy of the pointwise group MLP used to produce codebook targets.
inline ParamStore tokenizer_copy(const ParamStore& ps) {
    ParamStore tok;
    for (const char* n : {"fc1.w", "fc1.b", "fc2.w", "fc2.b"}) tok.add(std::string("tok.") + n, ps.at(std::string("embed.") + n));
    return tok;
}

/// Decoupled weight decay applies to weight matrices only.
inline bool decays(const std::string& name) { return name.size() > 2 && name.compare(name.size() - 2, 2, ".w") == 0; }

/// Subset of a grouping (groups listed in `which`), keeping the original centers' frame.
inline GroupedTokens select_groups(const GroupedTokens& t, const std::vector<Index>& which) {
    GroupedTokens out;
    out.k = t.k;
    out.centers.resize(Index(which.size()), 3);
    out.groups.resize(Index(which.size()) * t.k, 3);
    out.indices.resize(which.size() * t.k);
    for (std::size_t i = 0; i < which.size(); ++i) {
        out.centers.row(Index(i)) = t.centers.row(which[i]);
        out.groups.middleRows(Index(i) * t.k, t.k) = t.groups.middleRows(which[i] * t.k, t.k);
        for (Index j = 0; j < t.k; ++j) out.indices[i * t.k + j] = t.indices[which[i] * t.k + j];
    }
    return out;
}

/// World coordinates of the listed groups stacked in order.
inline Points group_points(const GroupedTokens& t, const std::vector<Index>& which) {
    Points out(Index(which.size()) * t.k, 3);
    for (std::size_t i = 0; i < which.size(); ++i) out.middleRows(Index(i) * t.k, t.k) = t.world_group(which[i]);
    return out;
}

inline std::vector<Index> all_indices(Index n) {
    std::vector<Index> v(n);
    for (Index i = 0; i < n; ++i) v[i] = i;
    return v;
}

struct EncodedTokens {
    Var tokens;       // (1 + n_visible) x dim after the final norm, class token first
    Var positions;    // G x dim positional embedding of every group
};

/// Embeds the `visible` groups, prepends the class token and runs the shared
/// encoder. `drop_rng` null = eval mode.
inline EncodedTokens encode_groups(Tape& t, const ParamStore& ps, const BackboneConfig& cfg, const GroupedTokens& tokens,
                                   const std::vector<Index>& visible, Rng* drop_rng = nullptr) {
    const Var pos = positional_embedding(t, ps, relative_centers(tokens.centers));
    const Var local = local_group_features(t, ps, select_groups(tokens, visible));
    const Var x = with_class_token(t, ps, ad::add(local, ad::gather_rows(pos, visible)));
    return {encoder_norm(t, ps, encode(t, ps, x, cfg.encoder, drop_rng)), pos};
}

inline Var class_token(Var tokens) { return ad::slice_rows(tokens, 0, 1); }

inline Var point_embedding(Tape& t, const ParamStore& ps, Var encoded) {
    return ad::normalize_rows(nn::mlp(t, ps, "head_p", class_token(encoded)));
}

inline Var moco_embedding(Tape& t, const ParamStore& ps, Var encoded) {
    return ad::normalize_rows(nn::mlp(t, ps, "moco_head", class_token(encoded)));
}

/// Brings an H x W single-channel image (as a Var) to image_size and lays it
/// out as (S*S) x 1 for the depth encoder; differentiable.
inline Var depth_to_encoder_input(Tape& t, Var depth, const BackboneConfig& cfg) {
    const int S = cfg.image_size;
    Var x = depth;
    if (depth.rows() != S || depth.cols() != S) {
        const Var a = t.constant(resize_matrix(int(depth.rows()), S));
        const Var bt = t.constant(Mat(resize_matrix(int(depth.cols()), S).transpose()));
        x = ad::matmul(a, ad::matmul(depth, bt));
    }
    return ad::reshape(x, Index(S) * S, 1);
}

inline Mat rgb_encoder_input(const Image& rgb, const BackboneConfig& cfg) {
    if (rgb.channels != 3) throw DomainError("rgb_encoder_input: expected 3 channels");
    return resize_image(rgb, cfg.image_size, cfg.image_size).pixels;
}

// ---------------------------------------------------------------------------
// Inference-time embeddings

/// g^P of a (normalized) cloud: all groups visible, eval mode.
inline RowVec embed_point(const ParamStore& ps, const BackboneConfig& cfg, const PointCloud& cloud, std::uint64_t seed) {
    if (cloud.count() < cfg.num_groups || cloud.count() < cfg.group_size)
        throw DomainError("embed_point: cloud has fewer points than the grouping requires");
    Tape t;
    const GroupedTokens tokens = group_cloud(cloud, cfg.num_groups, cfg.group_size, seed);
    const EncodedTokens enc = encode_groups(t, ps, cfg, tokens, all_indices(cfg.num_groups));
    return point_embedding(t, ps, enc.tokens).value();
}

inline RowVec embed_rgb(const ParamStore& ps, const BackboneConfig& cfg, const Image& rgb) {
    Tape t;
    return encode_image(t, ps, "rgb", t.constant(rgb_encoder_input(rgb, cfg)), 3, cfg).value();
}

inline RowVec embed_depth(const ParamStore& ps, const BackboneConfig& cfg, const DepthImage& depth) {
    Tape t;
    return encode_image(t, ps, "depth", depth_to_encoder_input(t, t.constant(depth.pixels), cfg), 1, cfg).value();
}

inline RowVec embed_rgb_features(const ParamStore& ps, const BackboneConfig& cfg, const Mat& features) {
    Tape t;
    return encode_external_features(t, ps, "rgb", t.constant(features), cfg).value();
}

}  // namespace drpoint
