#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "drpoint/config.hpp"
#include "drpoint/data.hpp"
#include "drpoint/model.hpp"
#include "drpoint/parallel.hpp"

namespace drpoint {

// ---------------------------------------------------------------------------
// Schedule

/// Warmup steps actually used: warmup_steps, or 10% of the run when it is -1.
inline long resolved_warmup(const TrainConfig& cfg, long total_steps) {
    return cfg.warmup_steps >= 0 ? cfg.warmup_steps : total_steps / 10;
}

/// Linear warmup to base_lr over `warmup` steps, then half-cosine decay to 0 at total_steps.
inline double cosine_lr(long step, long total_steps, double base_lr, long warmup = 0) {
    if (total_steps <= 0 || step < 0 || step > total_steps) throw DomainError("cosine_lr: need 0 <= step <= total_steps");
    warmup = std::clamp(warmup, 0L, total_steps);
    if (step < warmup) return base_lr * double(step + 1) / double(warmup);
    if (warmup == total_steps) return base_lr;
    const double progress = double(step - warmup) / double(total_steps - warmup);
    return base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

inline long steps_per_epoch(std::size_t dataset_size, int batch_size) {
    return long((dataset_size + std::size_t(batch_size) - 1) / std::size_t(batch_size));
}

inline long total_steps(const TrainConfig& cfg, std::size_t dataset_size) {
    return cfg.max_steps > 0 ? cfg.max_steps : long(cfg.epochs) * steps_per_epoch(dataset_size, cfg.batch_size);
}

/// Dataset indices of the batch at a 0-based step: epochs are seeded
/// permutations, the last batch of an epoch may be short.
inline std::vector<std::size_t> batch_indices(std::size_t dataset_size, int batch_size, long step, std::uint64_t seed) {
    const long spe = steps_per_epoch(dataset_size, batch_size);
    const long epoch = step / spe, pos = step % spe;
    Rng rng(seed, Stream::Shuffle, {std::uint64_t(epoch)});
    const std::vector<std::size_t> perm = rng.permutation(dataset_size);
    const std::size_t lo = std::size_t(pos) * std::size_t(batch_size);
    const std::size_t hi = std::min(dataset_size, lo + std::size_t(batch_size));
    return {perm.begin() + long(lo), perm.begin() + long(hi)};
}

// ---------------------------------------------------------------------------
// State

struct TrainState {
    long step = 0;                 // completed optimizer steps
    std::uint64_t seed = 0;        // every random draw derives from (seed, step, object)
    ParamStore params;
    ParamStore key_params;         // momentum encoder
    ParamStore tokenizer;          // frozen group MLP for token targets
    Codebook codebook;
    ParamStore adam_m;
    ParamStore adam_v;
    MocoState moco;
};

/// Group-MLP features of every dataset object under the frozen tokenizer.
inline Mat tokenizer_features(const std::vector<Triplet>& data, const ParamStore& tokenizer, const TrainConfig& cfg) {
    std::vector<Mat> parts(data.size());
    parallel_for(data.size(), [&](std::size_t i) {
        const PointCloud cloud = encoder_input(data[i], cfg.seed, 0);
        const GroupedTokens tokens = group_cloud(cloud, cfg.model.num_groups, cfg.model.group_size,
                                                 mix_seed({cfg.seed, hash_string(data[i].object_id)}));
        ad::Tape t;
        parts[i] = local_group_features(t, tokenizer, tokens, "tok").value();
    });
    Mat all(Index(data.size()) * cfg.model.num_groups, cfg.model.encoder.dim);
    for (std::size_t i = 0; i < parts.size(); ++i) all.middleRows(Index(i) * cfg.model.num_groups, cfg.model.num_groups) = parts[i];
    return all;
}

/// Fresh parameters, momentum copy, tokenizer and a codebook fitted on the dataset.
inline TrainState init_state(const std::vector<Triplet>& data, const TrainConfig& cfg) {
    cfg.validate();
    if (data.empty()) throw DomainError("init_state: empty dataset");
    TrainState s;
    s.seed = cfg.seed;
    s.params = init_model(cfg.model, cfg.seed, cfg.tau_init);
    s.key_params = key_encoder_copy(s.params);
    s.tokenizer = tokenizer_copy(s.params);
    const Mat features = tokenizer_features(data, s.tokenizer, cfg);
    if (features.rows() < cfg.model.codebook_size) throw DomainError("init_state: too few groups to fit the codebook");
    s.codebook = fit_codebook(features, cfg.model.codebook_size, cfg.seed, cfg.kmeans_iters);
    for (const auto& [name, m] : s.params.tensors) {
        s.adam_m.add(name, Mat::Zero(m.rows(), m.cols()));
        s.adam_v.add(name, Mat::Zero(m.rows(), m.cols()));
    }
    s.moco = MocoState(cfg.moco.K, cfg.model.encoder.dim, cfg.moco.m, cfg.moco.tau);
    return s;
}

// ---------------------------------------------------------------------------
// Differentiable rendering ops

namespace detail {

// Normalized union of fixed points and predicted rows (placed last).
inline PointCloud recon_cloud(const Points& fixed, const Mat& pred, const Normalization& n) {
    Points all(fixed.rows() + pred.rows(), 3);
    all << fixed, pred;
    return n.apply(PointCloud(std::move(all)));
}

}  // namespace detail

/// L_DR between the render of (fixed ∪ pred) and the render of `gt`, over all
/// poses, under the normalization `n` held constant. Differentiable in pred.
inline Var render_loss(Var pred, const Points& fixed, const PointCloud& gt, const Normalization& n,
                       const std::vector<CameraPose>& poses, const RenderConfig& cfg) {
    const PointCloud recon = detail::recon_cloud(fixed, pred.value(), n);
    const PointCloud target = n.apply(gt);
    auto grids = std::make_shared<std::vector<OccupancyGrid>>(poses.size());
    std::vector<DepthImage> rp(poses.size()), rg(poses.size());
    for (std::size_t v = 0; v < poses.size(); ++v) {
        rp[v] = render(recon, poses[v], cfg, &(*grids)[v]);
        rg[v] = render(target, poses[v], cfg);
    }
    const double value = dr_loss(rp, rg);
    auto grads = std::make_shared<std::vector<Mat>>(dr_loss_grad(rp, rg));
    const Index offset = fixed.rows(), rows = pred.rows();
    const double scale = n.scale;
    return ad::custom({pred}, Mat::Constant(1, 1, value),
                      [recon, poses, cfg, grids, grads, offset, rows, scale](const Mat& g) -> std::vector<Mat> {
                          Points total = Points::Zero(rows, 3);
                          for (std::size_t v = 0; v < poses.size(); ++v)
                              total += render_vjp(recon, poses[v], cfg, g(0, 0) * (*grads)[v], &(*grids)[v], offset);
                          return {Mat(total * scale)};
                      });
}

/// Depth image (H x W) of (fixed ∪ pred) from one pose; differentiable in pred.
inline Var render_view(Var pred, const Points& fixed, const Normalization& n, const CameraPose& pose,
                       const RenderConfig& cfg) {
    const PointCloud recon = detail::recon_cloud(fixed, pred.value(), n);
    auto grid = std::make_shared<OccupancyGrid>();
    DepthImage img = render(recon, pose, cfg, grid.get());
    const Index offset = fixed.rows();
    const double scale = n.scale;
    return ad::custom({pred}, std::move(img.pixels), [recon, pose, cfg, grid, offset, scale](const Mat& g) {
        return std::vector<Mat>{Mat(render_vjp(recon, pose, cfg, g, grid.get(), offset) * scale)};
    });
}

inline Var token_ce_op(Var logits, const std::vector<int>& targets) {
    TokenCeResult r = token_ce(logits.value(), targets);
    auto grad = std::make_shared<Mat>(std::move(r.grad_logits));
    return ad::custom({logits}, Mat::Constant(1, 1, r.value),
                      [grad](const Mat& g) { return std::vector<Mat>{Mat(*grad * g(0, 0))}; });
}

inline Var chamfer_op(Var pred, const PointCloud& target, ChamferVariant variant) {
    ChamferResult r = chamfer_with_grad(PointCloud(Points(pred.value())), target, variant);
    auto grad = std::make_shared<Mat>(std::move(r.grad_p));
    return ad::custom({pred}, Mat::Constant(1, 1, r.value),
                      [grad](const Mat& g) { return std::vector<Mat>{Mat(*grad * g(0, 0))}; });
}

// ---------------------------------------------------------------------------
// One optimizer step

struct StepMetrics {
    long step = 0;  // 1-based
    double lr = 0.0;
    LossParts parts;
    double total = 0.0;
};

inline nlohmann::json to_json(const StepMetrics& m) {
    nlohmann::json j;
    j["step"] = m.step;
    j["lr"] = m.lr;
    const auto v = m.parts.values();
    for (std::size_t i = 0; i < v.size(); ++i) j[LossParts::names[i]] = v[i];
    j["total"] = m.total;
    return j;
}

namespace detail {

// Forward results of one sample, kept alive until its backward sweep.
struct SampleForward {
    std::unique_ptr<ad::Tape> tape;
    Var g_p, g_r, g_d, query, local;
    RowVec key;
    double ce = 0.0, dr = 0.0, cd = 0.0;
};

inline std::uint64_t sample_seed(const TrainState& s, const Triplet& x, std::uint64_t salt) {
    return mix_seed({s.seed, hash_string(x.object_id), std::uint64_t(s.step), salt});
}

inline SampleForward forward_sample(const TrainState& s, const Triplet& x, const TrainConfig& cfg,
                                    const std::vector<CameraPose>& poses) {
    const BackboneConfig& mc = cfg.model;
    SampleForward f;
    f.tape = std::make_unique<ad::Tape>();
    ad::Tape& t = *f.tape;

    // query view: subsample, augment, group, mask
    const PointCloud view = augment_cloud(encoder_input(x, s.seed, 2 * std::uint64_t(s.step)), cfg.cloud_augment,
                                          sample_seed(s, x, 1));
    const GroupedTokens tokens = group_cloud(view, mc.num_groups, mc.group_size, sample_seed(s, x, 2));
    const TokenMask mask = mask_tokens(mc.num_groups, cfg.mask_ratio, sample_seed(s, x, 3));
    Rng drop(sample_seed(s, x, 4), Stream::DropPath);
    const EncodedTokens enc = encode_groups(t, s.params, mc, tokens, mask.visible, &drop);
    const Var masked_pos = ad::gather_rows(enc.positions, mask.masked);

    // TTA: codebook ids of the masked groups
    std::vector<int> targets;
    {
        ad::Tape tt;
        targets = tokenize(local_group_features(tt, s.tokenizer, select_groups(tokens, mask.masked), "tok").value(),
                           s.codebook);
    }
    const Var ce = token_ce_op(decode_tokens(t, s.params, enc.tokens, masked_pos, mc), targets);

    // PTA: masked group points, then renders of visible ∪ predicted vs all groups
    const Points masked_centers = select_groups(tokens, mask.masked).centers;
    const Var pred = decode_points(t, s.params, enc.tokens, masked_pos, masked_centers, mc);
    const Var cd = chamfer_op(pred, PointCloud(group_points(tokens, mask.masked)), cfg.chamfer);
    const Points visible_pts = group_points(tokens, mask.visible);
    const PointCloud gt(group_points(tokens, all_indices(mc.num_groups)));
    const Normalization norm = normalization_of(gt);
    const Var dr = render_loss(pred, visible_pts, gt, norm, poses, cfg.render);

    // embeddings
    Rng view_rng(sample_seed(s, x, 5), Stream::DepthView);
    const CameraPose& depth_pose = poses[view_rng.index(poses.size())];
    const Var depth = render_view(pred, visible_pts, norm, depth_pose, cfg.render);
    f.g_d = encode_image(t, s.params, "depth", depth_to_encoder_input(t, depth, mc), 1, mc);
    const Image rgb = augment_rgb(x.rgb, cfg.rgb_augment, sample_seed(s, x, 6));
    f.g_r = encode_image(t, s.params, "rgb", t.constant(rgb_encoder_input(rgb, mc)), 3, mc);
    // unmasked pass of the same view for g^P and the MoCo query
    Rng drop_full(sample_seed(s, x, 9), Stream::DropPath);
    const EncodedTokens full = encode_groups(t, s.params, mc, tokens, all_indices(mc.num_groups), &drop_full);
    f.g_p = point_embedding(t, s.params, full.tokens);
    f.query = moco_embedding(t, s.params, full.tokens);

    // MoCo key: second view through the momentum encoder, eval mode
    {
        const PointCloud view2 = augment_cloud(encoder_input(x, s.seed, 2 * std::uint64_t(s.step) + 1),
                                               cfg.cloud_augment, sample_seed(s, x, 7));
        const GroupedTokens tokens2 = group_cloud(view2, mc.num_groups, mc.group_size, sample_seed(s, x, 8));
        ad::Tape kt;
        const EncodedTokens kenc = encode_groups(kt, s.key_params, mc, tokens2, all_indices(mc.num_groups));
        f.key = moco_embedding(kt, s.key_params, kenc.tokens).value();
    }

    f.ce = ce.scalar();
    f.cd = cd.scalar();
    f.dr = dr.scalar();
    f.local = ad::add(ad::add(ce, cd), dr);
    return f;
}

inline Mat stack_rows(const std::vector<SampleForward>& fs, Var SampleForward::*member) {
    Mat out(Index(fs.size()), (fs[0].*member).cols());
    for (std::size_t i = 0; i < fs.size(); ++i) out.row(Index(i)) = (fs[i].*member).value();
    return out;
}

inline void add_into(Gradients& acc, const Gradients& g) {
    for (const auto& [name, m] : g) {
        auto it = acc.find(name);
        if (it == acc.end()) {
            acc.emplace(name, m);
        } else {
            it->second += m;
        }
    }
}

}  // namespace detail

struct StepResult {
    StepMetrics metrics;
    Gradients grads;  // summed batch gradient before the update
};

/// One pre-training step on `batch`, updating `state` in place. The state is
/// untouched when the step throws (for instance NonFiniteError).
inline StepResult pretrain_step(TrainState& state, const std::vector<const Triplet*>& batch, const TrainConfig& cfg,
                                long total = 0) {
    if (batch.empty()) throw DomainError("pretrain_step: empty batch");
    if (total <= 0) total = std::max(state.step + 1, 1L);
    const std::size_t B = batch.size();
    const double inv_b = 1.0 / double(B);
    const std::vector<CameraPose> poses = generate_camera_poses(cfg.camera_radius);

    // per-sample forward passes
    std::vector<detail::SampleForward> fs(B);
    parallel_for(B, [&](std::size_t i) { fs[i] = detail::forward_sample(state, *batch[i], cfg, poses); });

    // batch-level contrastive terms
    const EmbeddingBatch gp{detail::stack_rows(fs, &detail::SampleForward::g_p), Modality::Point};
    const EmbeddingBatch gr{detail::stack_rows(fs, &detail::SampleForward::g_r), Modality::Rgb};
    const EmbeddingBatch gd{detail::stack_rows(fs, &detail::SampleForward::g_d), Modality::Depth};
    const EmbeddingBatch q{detail::stack_rows(fs, &detail::SampleForward::query), Modality::Point};
    EmbeddingBatch keys{Mat(Index(B), cfg.model.encoder.dim), Modality::Point};
    for (std::size_t i = 0; i < B; ++i) keys.rows.row(Index(i)) = fs[i].key;

    ContrastiveHead head;
    head.log_tau = state.params.at("contrast.log_tau")(0, 0);
    const LossWeights& w = cfg.loss_weights;
    const NceResult rd = cross_modal_nce(gr, gd, head);
    const NceResult rp = cross_modal_nce(gr, gp, head);
    const NceResult pd = cross_modal_nce(gp, gd, head);
    const MocoResult mo = moco_loss(q, keys, state.moco);

    StepMetrics m;
    m.step = state.step + 1;
    m.lr = cosine_lr(state.step, total, cfg.lr, resolved_warmup(cfg, total));
    m.parts.l_rd = rd.value;
    m.parts.l_rp = rp.value;
    m.parts.l_pd = pd.value;
    m.parts.l_moco = mo.value;
    for (const auto& f : fs) {
        m.parts.l_ce += f.ce * inv_b;
        m.parts.l_dr += f.dr * inv_b;
        m.parts.l_cd += f.cd * inv_b;
    }
    m.total = total_loss(m.parts, w);

    // per-sample backward, seeded with the batch-level cotangents
    const Mat seed_r = w.alpha * rd.grad_a + w.beta * rp.grad_a;
    const Mat seed_p = w.beta * rp.grad_b + w.theta * pd.grad_a;
    const Mat seed_d = w.alpha * rd.grad_b + w.theta * pd.grad_b;
    std::vector<Gradients> per(B);
    parallel_for(B, [&](std::size_t i) {
        const Index r = Index(i);
        detail::SampleForward& f = fs[i];
        f.tape->backward({{f.local, Mat::Constant(1, 1, inv_b)},
                          {f.g_r, Mat(seed_r.row(r))},
                          {f.g_p, Mat(seed_p.row(r))},
                          {f.g_d, Mat(seed_d.row(r))},
                          {f.query, Mat(mo.grad_query.row(r))}});
        per[i] = f.tape->param_grads();
        f.tape.reset();
    });

    // fixed-order reduction
    StepResult out;
    for (const auto& g : per) detail::add_into(out.grads, g);
    out.grads["contrast.log_tau"] = Mat::Constant(
        1, 1, w.alpha * rd.grad_log_tau + w.beta * rp.grad_log_tau + w.theta * pd.grad_log_tau);
    double norm2 = 0.0;
    for (const auto& [name, g] : out.grads) {
        if (!g.allFinite()) throw NonFiniteError("gradient " + name);
        norm2 += g.squaredNorm();
    }
    const double clip = cfg.grad_clip > 0.0 && std::sqrt(norm2) > cfg.grad_clip ? cfg.grad_clip / std::sqrt(norm2) : 1.0;

    // AdamW with decoupled decay
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double t = double(state.step + 1);
    const double c1 = 1.0 - std::pow(b1, t), c2 = 1.0 - std::pow(b2, t);
    for (auto& [name, p] : state.params.tensors) {
        Mat& mm = state.adam_m.at(name);
        Mat& vv = state.adam_v.at(name);
        auto it = out.grads.find(name);
        const Mat g = it == out.grads.end() ? Mat::Zero(p.rows(), p.cols()) : Mat(it->second * clip);
        mm = b1 * mm + (1.0 - b1) * g;
        vv = b2 * vv + (1.0 - b2) * g.cwiseProduct(g);
        Mat update = ((mm / c1).array() / ((vv / c2).array().sqrt() + eps)).matrix();
        if (decays(name)) update += cfg.weight_decay * p;
        p -= m.lr * update;
    }
    Mat& log_tau = state.params.at("contrast.log_tau");
    log_tau(0, 0) = std::clamp(log_tau(0, 0), std::log(ContrastiveHead::kMinTau), std::log(ContrastiveHead::kMaxTau));

    momentum_update(state.key_params, state.params, cfg.moco.m);
    state.moco = moco_update(std::move(state.moco), keys);
    ++state.step;
    out.metrics = m;
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation

/// Eval-mode embeddings of every object: g^P from the full cloud, g^R from the
/// stored image, g^D from the ground-truth render at the object's depth view.
struct DatasetEmbeddings {
    Mat point, rgb, depth;
};

inline DatasetEmbeddings embed_dataset(const ParamStore& ps, const std::vector<Triplet>& data, const TrainConfig& cfg) {
    const Index n = Index(data.size()), dim = cfg.model.encoder.dim;
    DatasetEmbeddings e{Mat(n, dim), Mat(n, dim), Mat(n, dim)};
    const std::vector<CameraPose> poses = generate_camera_poses(cfg.camera_radius);
    parallel_for(data.size(), [&](std::size_t i) {
        const Triplet& x = data[i];
        const PointCloud cloud = encoder_input(x, cfg.seed, 0);
        e.point.row(Index(i)) = embed_point(ps, cfg.model, cloud, mix_seed({cfg.seed, hash_string(x.object_id)}));
        e.rgb.row(Index(i)) = embed_rgb(ps, cfg.model, x.rgb);
        const PointCloud normalized = normalize_cloud(cloud).cloud;
        e.depth.row(Index(i)) = embed_depth(ps, cfg.model, render(normalized, poses[std::size_t(x.depth_view_index)], cfg.render));
    });
    return e;
}

/// Mean cosine of matching rows minus the mean over non-matching pairs.
inline double cosine_gap(const Mat& a, const Mat& b) {
    if (a.rows() != b.rows() || a.rows() < 2) throw DomainError("cosine_gap: need two equal batches of at least 2 rows");
    const Mat s = normalize_rows(a) * normalize_rows(b).transpose();
    const double n = double(a.rows());
    const double pos = s.diagonal().sum() / n;
    const double neg = (s.sum() - s.diagonal().sum()) / (n * (n - 1.0));
    return pos - neg;
}

struct AlignmentGaps {
    double rgb_depth = 0.0, rgb_point = 0.0, point_depth = 0.0;
};

inline AlignmentGaps alignment_gaps(const ParamStore& ps, const std::vector<Triplet>& data, const TrainConfig& cfg) {
    const DatasetEmbeddings e = embed_dataset(ps, data, cfg);
    return {cosine_gap(e.rgb, e.depth), cosine_gap(e.rgb, e.point), cosine_gap(e.point, e.depth)};
}

}  // namespace drpoint
