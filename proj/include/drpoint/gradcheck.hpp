#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "drpoint/losses.hpp"
#include "drpoint/model.hpp"
#include "drpoint/renderer.hpp"
#include "drpoint/rng.hpp"

namespace drpoint {

struct GradcheckOptions {
    std::uint64_t seed = 0;
    double h = 1e-4;
    double tolerance = 1e-3;
    int instances = 20;          // random instances per op
    int max_entries = 32;        // coordinates sampled per parameter block
    bool flip_sign = false;      // negate the analytic gradient (negative control)
    bool zero_cotangent = false; // scale the checked scalar by 0
};

struct BlockReport {
    std::string op;
    std::string block;
    double max_rel_error = 0.0;
    long checked = 0;
    bool pass = true;
};

struct GradcheckReport {
    double tolerance = 0.0;
    std::vector<BlockReport> blocks;

    bool pass() const {
        return std::all_of(blocks.begin(), blocks.end(), [](const BlockReport& b) { return b.pass; });
    }
};

/// |a - b| / max(|a|, |b|, 1e-8)
inline double relative_error(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

inline const std::vector<std::string>& gradcheck_ops() {
    static const std::vector<std::string> ops = {"render", "dr_loss", "chamfer", "nce",     "moco",
                                                 "token_ce", "encoder", "decoder", "embed", "image"};
    return ops;
}

namespace detail {

// One differentiable scalar function of named matrix blocks.
struct GradProblem {
    std::vector<std::pair<std::string, Mat>> blocks;
    std::function<double(const std::vector<Mat>&)> value;
    std::function<std::vector<Mat>(const std::vector<Mat>&)> gradient;
};

class GradAccumulator {
public:
    GradAccumulator(std::string op, const GradcheckOptions& opt) : op_(std::move(op)), opt_(opt) {}

    void check(const GradProblem& p, Rng& rng) {
        std::vector<Mat> x;
        for (const auto& b : p.blocks) x.push_back(b.second);
        const double c = opt_.zero_cotangent ? 0.0 : 1.0;
        std::vector<Mat> analytic = p.gradient(x);
        for (std::size_t bi = 0; bi < p.blocks.size(); ++bi) {
            BlockReport& r = report(p.blocks[bi].first);
            const Index n = x[bi].size();
            std::vector<Index> entries;
            if (n <= opt_.max_entries) {
                for (Index i = 0; i < n; ++i) entries.push_back(i);
            } else {
                for (int i = 0; i < opt_.max_entries; ++i) entries.push_back(Index(rng.index(std::size_t(n))));
            }
            for (Index e : entries) {
                const double orig = x[bi].data()[e];
                x[bi].data()[e] = orig + opt_.h;
                const double fp = p.value(x);
                x[bi].data()[e] = orig - opt_.h;
                const double fm = p.value(x);
                x[bi].data()[e] = orig;
                const double fd = c * (fp - fm) / (2.0 * opt_.h);
                double a = c * analytic[bi].data()[e];
                if (opt_.flip_sign) a = -a;
                r.max_rel_error = std::max(r.max_rel_error, relative_error(a, fd));
                ++r.checked;
            }
        }
    }

    std::vector<BlockReport> finish() {
        for (auto& b : blocks_) b.pass = b.max_rel_error < opt_.tolerance;
        return std::move(blocks_);
    }

private:
    BlockReport& report(const std::string& block) {
        for (auto& b : blocks_)
            if (b.block == block) return b;
        blocks_.push_back(BlockReport{op_, block});
        return blocks_.back();
    }

    std::string op_;
    GradcheckOptions opt_;
    std::vector<BlockReport> blocks_;
};

inline Mat random_matrix(Index rows, Index cols, Rng& rng, double scale = 1.0) {
    Mat m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
    return m;
}

inline Points random_ball_points(Index n, double radius, Rng& rng) {
    Points p(n, 3);
    for (Index i = 0; i < n; ++i) {
        Vec3 v;
        do {
            v = Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
        } while (v.squaredNorm() > 1.0);
        p.row(i) = radius * v.transpose();
    }
    return p;
}

// True when a perturbation of `margin` voxels could cross the truncation
// sphere of some splat or push an occupancy sum across the clamp at 1.
inline bool near_render_kink(const PointCloud& cloud, const CameraPose& pose, const RenderConfig& cfg, double margin) {
    const Points u = camera_to_voxel(world_to_camera(cloud, pose), pose.frustum, cfg);
    const double R = cfg.truncation_radius;
    const int sizes[3] = {cfg.image_width, cfg.image_height, cfg.grid_depth};
    for (Index k = 0; k < u.rows(); ++k) {
        int lo[3], hi[3];
        bool inside = true;
        for (int a = 0; a < 3; ++a) {
            axis_window(u(k, a), R + margin, sizes[a], lo[a], hi[a]);
            inside = inside && lo[a] <= hi[a];
        }
        if (!inside) continue;
        for (int d = lo[2]; d <= hi[2]; ++d)
            for (int h = lo[1]; h <= hi[1]; ++h)
                for (int w = lo[0]; w <= hi[0]; ++w) {
                    const double r = Vec3(w + 0.5 - u(k, 0), h + 0.5 - u(k, 1), d + 0.5 - u(k, 2)).norm();
                    if (std::abs(r - R) < margin) return true;
                }
    }
    const OccupancyGrid grid = splat_occupancy(world_to_camera(cloud, pose), pose.frustum, cfg);
    return std::any_of(grid.raw.begin(), grid.raw.end(), [&](double r) { return std::abs(r - 1.0) < margin; });
}

inline std::vector<CameraPose> pick_poses(const std::vector<CameraPose>& all, int count, Rng& rng) {
    const std::vector<std::size_t> perm = rng.permutation(all.size());
    std::vector<CameraPose> out;
    for (int i = 0; i < count; ++i) out.push_back(all[perm[std::size_t(i)]]);
    return out;
}

inline RenderConfig gradcheck_render_config() {
    RenderConfig cfg;
    cfg.grid_depth = 16;
    cfg.image_width = cfg.image_height = 8;
    return cfg;
}

inline std::vector<DepthImage> render_all(const PointCloud& c, const std::vector<CameraPose>& poses,
                                          const RenderConfig& cfg) {
    std::vector<DepthImage> out;
    for (const auto& p : poses) out.push_back(render(c, p, cfg));
    return out;
}

inline bool near_abs_tie(const std::vector<DepthImage>& a, const std::vector<DepthImage>& b, double margin) {
    for (std::size_t t = 0; t < a.size(); ++t)
        for (Index i = 0; i < a[t].pixels.size(); ++i) {
            const double d = std::abs(a[t].pixels.data()[i] - b[t].pixels.data()[i]);
            if (d > 0.0 && d < margin) return true;
        }
    return false;
}

// Samples clouds of n points in the unit ball until no finite-difference
// step of size h can reach a non-differentiable point of the renderer.
inline PointCloud smooth_render_cloud(Index n, const std::vector<CameraPose>& poses, const RenderConfig& cfg, double h,
                                      Rng& rng) {
    for (;;) {
        PointCloud c(random_ball_points(n, 0.8, rng));
        const bool bad = std::any_of(poses.begin(), poses.end(), [&](const CameraPose& p) {
            const double margin = 2.0 * h * camera_to_voxel_scale(p.frustum, cfg).cwiseAbs().maxCoeff();
            return near_render_kink(c, p, cfg, margin);
        });
        if (!bad) return c;
    }
}

inline void check_render(GradAccumulator& acc, const GradcheckOptions& opt, Rng& rng) {
    const RenderConfig cfg = gradcheck_render_config();
    const std::vector<CameraPose> all = generate_camera_poses(2.0);
    for (int inst = 0; inst < opt.instances; ++inst) {
        const std::vector<CameraPose> pose = pick_poses(all, 1, rng);
        const PointCloud c = smooth_render_cloud(5, pose, cfg, opt.h, rng);
        const Mat up = random_matrix(cfg.image_height, cfg.image_width, rng);
        GradProblem p;
        p.blocks = {{"points", Mat(c.xyz)}};
        p.value = [&](const std::vector<Mat>& x) {
            return render(PointCloud(Points(x[0])), pose[0], cfg).pixels.cwiseProduct(up).sum();
        };
        p.gradient = [&](const std::vector<Mat>& x) {
            return std::vector<Mat>{Mat(render_vjp(PointCloud(Points(x[0])), pose[0], cfg, up))};
        };
        acc.check(p, rng);
    }
}

/// Eq. 1 through the renderer: dr_loss(render(pred), render(target)) over 4 poses.
inline void check_dr_loss(GradAccumulator& acc, const GradcheckOptions& opt, Rng& rng) {
    const RenderConfig cfg = gradcheck_render_config();
    const std::vector<CameraPose> all = generate_camera_poses(2.0);
    for (int inst = 0; inst < opt.instances; ++inst) {
        const std::vector<CameraPose> poses = pick_poses(all, 4, rng);
        PointCloud pred, target;
        std::vector<DepthImage> gt;
        do {
            pred = smooth_render_cloud(5, poses, cfg, opt.h, rng);
            target = PointCloud(random_ball_points(5, 0.8, rng));
            gt = render_all(target, poses, cfg);
        } while (near_abs_tie(render_all(pred, poses, cfg), gt, 1e-4));
        GradProblem p;
        p.blocks = {{"points", Mat(pred.xyz)}};
        p.value = [&](const std::vector<Mat>& x) { return dr_loss(render_all(PointCloud(Points(x[0])), poses, cfg), gt); };
        p.gradient = [&](const std::vector<Mat>& x) {
            const PointCloud c{Points(x[0])};
            const std::vector<Mat> g = dr_loss_grad(render_all(c, poses, cfg), gt);
            Points total = Points::Zero(c.count(), 3);
            for (std::size_t v = 0; v < poses.size(); ++v) total += render_vjp(c, poses[v], cfg, g[v]);
            return std::vector<Mat>{Mat(total)};
        };
        acc.check(p, rng);
    }
}

// Smallest gap between the nearest and second-nearest squared distance.
inline double nearest_gap(const Points& from, const Points& to) {
    double gap = std::numeric_limits<double>::infinity();
    for (Index i = 0; i < from.rows(); ++i) {
        double a = std::numeric_limits<double>::infinity(), b = a;
        for (Index j = 0; j < to.rows(); ++j) {
            const double d = (from.row(i) - to.row(j)).squaredNorm();
            if (d < a) {
                b = a;
                a = d;
            } else if (d < b) {
                b = d;
            }
        }
        gap = std::min(gap, b - a);
    }
    return gap;
}

inline void check_chamfer(GradAccumulator& acc, const GradcheckOptions& opt, Rng& rng) {
    for (int inst = 0; inst < opt.instances; ++inst) {
        Points P, Q;
        do {
            P = random_ball_points(12, 1.0, rng);
            Q = random_ball_points(10, 1.0, rng);
        } while (nearest_gap(P, Q) < 1e-2 || nearest_gap(Q, P) < 1e-2);
        for (ChamferVariant v : {ChamferVariant::L1, ChamferVariant::L2}) {
            GradProblem p;
            p.blocks = {{v == ChamferVariant::L1 ? "P (l1)" : "P (l2)", Mat(P)}};
            p.value = [&](const std::vector<Mat>& x) { return chamfer(PointCloud(Points(x[0])), PointCloud(Q), v); };
            p.gradient = [&](const std::vector<Mat>& x) {
                return std::vector<Mat>{Mat(chamfer_with_grad(PointCloud(Points(x[0])), PointCloud(Q), v).grad_p)};
            };
            acc.check(p, rng);
        }
    }
}

inline void check_nce(GradAccumulator& acc, const GradcheckOptions& opt, Rng& rng) {
    for (int inst = 0; inst < opt.instances; ++inst) {
        const Mat a = normalize_rows(random_matrix(4, 6, rng));
        const Mat b = normalize_rows(random_matrix(4, 6, rng));
        const double log_tau = std::log(rng.uniform(0.05, 0.5));
        auto eval = [](const std::vector<Mat>& x) {
            ContrastiveHead h;
            h.log_tau = x[2](0, 0);
            return cross_modal_nce({x[0], Modality::Rgb}, {x[1], Modality::Depth}, h);
        };
        GradProblem p;
        p.blocks = {{"a", a}, {"b", b}, {"log_tau", Mat::Constant(1, 1, log_tau)}};
        p.value = [&](const std::vector<Mat>& x) { return eval(x).value; };
        p.gradient = [&](const std::vector<Mat>& x) {
            const NceResult r = eval(x);
            return std::vector<Mat>{r.grad_a, r.grad_b, Mat::Constant(1, 1, r.grad_log_tau)};
        };
        acc.check(p, rng);
    }
}

inline void check_moco(GradAccumulator& acc, const GradcheckOptions& opt, Rng& rng) {
    for (int inst = 0; inst < opt.instances; ++inst) {
        MocoState st(8, 6, 0.999, 0.2);
        st = moco_update(std::move(st), {normalize_rows(random_matrix(5, 6, rng)), Modality::Point});
        const Mat key = normalize_rows(random_matrix(3, 6, rng));
        GradProblem p;
        p.blocks = {{"query", normalize_rows(random_matrix(3, 6, rng))}};
        p.value = [&](const std::vector<Mat>& x) { return moco_loss({x[0]}, {key}, st).value; };
        p.gradient = [&](const std::vector<Mat>& x) {
            return std::vector<Mat>{moco_loss({x[0]}, {key}, st).grad_query};
        };
        acc.check(p, rng);
    }
}

inline void check_token_ce(GradAccumulator& acc, const GradcheckOptions& opt, Rng& rng) {
    for (int inst = 0; inst < opt.instances; ++inst) {
        const Index G = 6, V = 10;
        std::vector<int> targets(G);
        std::vector<bool> mask(G);
        for (Index g = 0; g < G; ++g) {
            targets[g] = int(rng.index(V));
            mask[g] = g == 0 || rng.bernoulli(0.6);
        }
        GradProblem p;
        p.blocks = {{"logits", random_matrix(G, V, rng, 2.0)}};
        p.value = [&](const std::vector<Mat>& x) { return token_ce(x[0], targets, mask).value; };
        p.gradient = [&](const std::vector<Mat>& x) { return std::vector<Mat>{token_ce(x[0], targets, mask).grad_logits}; };
        acc.check(p, rng);
    }
}

// Network blocks: the checked scalar is <R, f(inputs, params)> for a random R,
// with every parameter tensor of the sub-network as its own block.
struct NetProblem {
    ParamStore params;
    std::vector<std::pair<std::string, Mat>> inputs;
    std::function<Var(ad::Tape&, const ParamStore&, const std::vector<Var>&)> forward;
};

inline void check_net(GradAccumulator& acc, NetProblem net, Rng& rng) {
    Mat probe;
    {
        ad::Tape t;
        std::vector<Var> in;
        for (const auto& [_, m] : net.inputs) in.push_back(t.constant(m));
        const Mat out = net.forward(t, net.params, in).value();
        probe = random_matrix(out.rows(), out.cols(), rng);
        probe /= probe.norm();
    }
    std::vector<std::string> names;
    GradProblem p;
    for (const auto& [name, m] : net.params.tensors) {
        p.blocks.emplace_back(name, m);
        names.push_back(name);
    }
    const std::size_t n_params = names.size();
    for (const auto& in : net.inputs) p.blocks.push_back(in);

    auto unpack = [&](const std::vector<Mat>& x, ParamStore& ps) {
        for (std::size_t i = 0; i < n_params; ++i) ps.add(names[i], x[i]);
    };
    p.value = [&](const std::vector<Mat>& x) {
        ParamStore ps;
        unpack(x, ps);
        ad::Tape t;
        std::vector<Var> in;
        for (std::size_t i = n_params; i < x.size(); ++i) in.push_back(t.constant(x[i]));
        return net.forward(t, ps, in).value().cwiseProduct(probe).sum();
    };
    p.gradient = [&](const std::vector<Mat>& x) {
        ParamStore ps;
        unpack(x, ps);
        ad::Tape t;
        std::vector<Var> in;
        for (std::size_t i = n_params; i < x.size(); ++i) in.push_back(t.input(x[i]));
        const Var out = net.forward(t, ps, in);
        t.backward({{out, probe}});
        const Gradients g = t.param_grads();
        std::vector<Mat> grads;
        for (std::size_t i = 0; i < n_params; ++i) {
            auto it = g.find(names[i]);
            grads.push_back(it == g.end() ? Mat::Zero(x[i].rows(), x[i].cols()) : it->second);
        }
        for (const Var& v : in) grads.push_back(t.grad(v));
        return grads;
    };
    acc.check(p, rng);
}

inline BackboneConfig tiny_backbone() {
    BackboneConfig c;
    c.encoder = EncoderConfig{2, 8, 2, 2, 0.0};
    c.num_groups = 6;
    c.group_size = 5;
    c.embed_hidden = 6;
    c.token_decoder_blocks = 1;
    c.point_decoder_blocks = 2;
    c.codebook_size = 5;
    c.image_size = 16;
    c.image_width = 2;
    return c;
}

// Parameters under the given prefixes, perturbed away from their initial
// values so layer norms and biases are not at special points.
inline ParamStore tiny_params(const BackboneConfig& cfg, const std::vector<std::string>& prefixes, Rng& rng) {
    const ParamStore all = init_model(cfg, rng.index(1u << 30));
    ParamStore ps;
    for (const auto& [name, m] : all.tensors)
        for (const auto& pre : prefixes)
            if (name.rfind(pre, 0) == 0) {
                ps.add(name, m + random_matrix(m.rows(), m.cols(), rng, 0.1));
                break;
            }
    return ps;
}

inline void check_encoder(GradAccumulator& acc, const GradcheckOptions& opt, Rng& rng) {
    const BackboneConfig cfg = tiny_backbone();
    for (int inst = 0; inst < std::max(1, opt.instances / 4); ++inst) {
        NetProblem net;
        net.params = tiny_params(cfg, {"encoder."}, rng);
        net.inputs = {{"tokens", random_matrix(5, cfg.encoder.dim, rng)}};
        net.forward = [&](ad::Tape& t, const ParamStore& ps, const std::vector<Var>& in) {
            return encoder_norm(t, ps, encode(t, ps, with_class_token(t, ps, in[0]), cfg.encoder));
        };
        check_net(acc, std::move(net), rng);
    }
}

inline void check_decoder(GradAccumulator& acc, const GradcheckOptions& opt, Rng& rng) {
    const BackboneConfig cfg = tiny_backbone();
    for (int inst = 0; inst < std::max(1, opt.instances / 4); ++inst) {
        const Points centers = random_ball_points(3, 1.0, rng);
        NetProblem net;
        net.params = tiny_params(cfg, {"tta.", "pta."}, rng);
        net.inputs = {{"visible", random_matrix(4, cfg.encoder.dim, rng)}, {"masked_pos", random_matrix(3, cfg.encoder.dim, rng)}};
        net.forward = [&, centers](ad::Tape& t, const ParamStore& ps, const std::vector<Var>& in) {
            const Var logits = decode_tokens(t, ps, in[0], in[1], cfg);
            const Var points = decode_points(t, ps, in[0], in[1], centers, cfg);
            return ad::concat_rows({ad::reshape(logits, logits.value().size(), 1), ad::reshape(points, points.value().size(), 1)});
        };
        check_net(acc, std::move(net), rng);
    }
}

inline void check_embed(GradAccumulator& acc, const GradcheckOptions& opt, Rng& rng) {
    const BackboneConfig cfg = tiny_backbone();
    for (int inst = 0; inst < std::max(1, opt.instances / 4); ++inst) {
        const PointCloud cloud(random_ball_points(40, 1.0, rng));
        const GroupedTokens tokens = group_cloud(cloud, cfg.num_groups, cfg.group_size, rng.index(1000));
        NetProblem net;
        net.params = tiny_params(cfg, {"embed."}, rng);
        net.inputs = {};
        net.forward = [&, tokens](ad::Tape& t, const ParamStore& ps, const std::vector<Var>&) {
            return embed_groups(t, ps, tokens);
        };
        check_net(acc, std::move(net), rng);
    }
}

// Smallest |pre-activation| over the conv stages of an image encoder.
inline double min_conv_preactivation(const ParamStore& ps, const std::string& name, const Mat& image,
                                     const BackboneConfig& cfg) {
    ad::Tape t;
    Var x = t.constant(image);
    int h = cfg.image_size, w = cfg.image_size;
    double lo = std::numeric_limits<double>::infinity();
    for (int s = 0; s < kImageStages; ++s) {
        const std::string conv = name + ".conv" + std::to_string(s);
        const Var z = ad::conv3x3(x, t.param(ps, conv + ".w"), t.param(ps, conv + ".b"), h, w, 2);
        lo = std::min(lo, z.value().cwiseAbs().minCoeff());
        x = ad::relu(z);
        h = (h - 1) / 2 + 1;
        w = (w - 1) / 2 + 1;
    }
    return lo;
}

inline void check_image(GradAccumulator& acc, const GradcheckOptions& opt, Rng& rng) {
    const BackboneConfig cfg = tiny_backbone();
    for (int inst = 0; inst < std::max(1, opt.instances / 4); ++inst) {
        NetProblem net;
        Mat img(Index(cfg.image_size) * cfg.image_size, 1);
        do {
            net.params = tiny_params(cfg, {"depth."}, rng);
            for (Index i = 0; i < img.size(); ++i) img.data()[i] = rng.uniform();
        } while (min_conv_preactivation(net.params, "depth", img, cfg) < 100.0 * opt.h);
        net.inputs = {{"image", img}};
        net.forward = [&](ad::Tape& t, const ParamStore& ps, const std::vector<Var>& in) {
            return encode_image(t, ps, "depth", in[0], 1, cfg);
        };
        check_net(acc, std::move(net), rng);
    }
}

}  // namespace detail

/// Central differences against the analytic gradient of `op` on random
/// float64 instances; one report row per parameter block.
inline GradcheckReport finite_difference_check(const std::string& op, const GradcheckOptions& opt = {}) {
    if (!(opt.h > 0.0)) throw DomainError("finite_difference_check: h must be positive");
    using Fn = void (*)(detail::GradAccumulator&, const GradcheckOptions&, Rng&);
    static const std::vector<std::pair<std::string, Fn>> table = {
        {"render", detail::check_render},   {"dr_loss", detail::check_dr_loss}, {"chamfer", detail::check_chamfer},
        {"nce", detail::check_nce},         {"moco", detail::check_moco},       {"token_ce", detail::check_token_ce},
        {"encoder", detail::check_encoder}, {"decoder", detail::check_decoder}, {"embed", detail::check_embed},
        {"image", detail::check_image}};
    GradcheckReport report;
    report.tolerance = opt.tolerance;
    bool found = false;
    for (const auto& [name, fn] : table) {
        if (op != "all" && op != name) continue;
        found = true;
        Rng rng(opt.seed, Stream::Gradcheck, {hash_string(name)});
        detail::GradAccumulator acc(name, opt);
        fn(acc, opt, rng);
        for (auto& b : acc.finish()) report.blocks.push_back(std::move(b));
    }
    if (!found) throw DomainError("finite_difference_check: unknown op '" + op + "'");
    return report;
}

}  // namespace drpoint
