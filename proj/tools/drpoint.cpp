// drpoint: rendering, gradient checks, pre-training, embeddings and metrics.
//
// Exit status: 0 success, 1 check or training failure, 2 usage or input error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "drpoint/drpoint.hpp"

namespace fs = std::filesystem;
using namespace drpoint;

namespace {

constexpr int kOk = 0;
constexpr int kCheckFailed = 1;
constexpr int kUsage = 2;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

nlohmann::json row_json(const RowVec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

// ---------------------------------------------------------------------------
// render

struct RenderArgs {
    std::string cloud, poses = "all", out, size;
    int grid = 0;
    double radius = 2.0;
};

int run_render(const RenderArgs& a) {
    RenderConfig cfg;
    if (a.grid > 0) cfg.grid_depth = a.grid;
    if (!a.size.empty()) {
        int w = 0, h = 0;
        char tail = 0;
        if (std::sscanf(a.size.c_str(), "%dx%d%c", &w, &h, &tail) != 2 || w <= 0 || h <= 0)
            throw UsageError("--size must look like WxH, got '" + a.size + "'");
        cfg.image_width = w;
        cfg.image_height = h;
    }
    cfg.validate();
    const PointCloud cloud = normalize_cloud(load_xyz(a.cloud)).cloud;
    const std::vector<CameraPose> poses = generate_camera_poses(a.radius);
    std::vector<int> which;
    if (a.poses == "all") {
        for (int t = 0; t < kNumPoses; ++t) which.push_back(t);
    } else {
        std::size_t used = 0;
        int t = -1;
        try {
            t = std::stoi(a.poses, &used);
        } catch (const std::exception&) {
        }
        if (used != a.poses.size() || t < 0 || t >= kNumPoses) throw UsageError("--poses must be 'all' or 0..31");
        which.push_back(t);
    }
    fs::create_directories(a.out);
    for (int t : which) {
        const DepthImage img = render(cloud, poses[std::size_t(t)], cfg);
        char stem[32];
        std::snprintf(stem, sizeof stem, "view_%02d", t);
        save_png(to_image(img), (fs::path(a.out) / (std::string(stem) + ".png")).string());
        save_depth_raw(img, (fs::path(a.out) / (std::string(stem) + ".f32")).string());
    }
    std::cout << "wrote " << which.size() << " views to " << a.out << "\n";
    return kOk;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckArgs {
    std::string op = "all";
    GradcheckOptions opt;
};

int run_gradcheck(const GradcheckArgs& a) {
    if (a.op != "all" && std::find(gradcheck_ops().begin(), gradcheck_ops().end(), a.op) == gradcheck_ops().end())
        throw UsageError("unknown --op '" + a.op + "'");
    const GradcheckReport r = finite_difference_check(a.op, a.opt);
    std::string last;
    for (const BlockReport& b : r.blocks) {
        if (b.op != last) std::printf("[%s]\n", b.op.c_str());
        last = b.op;
        std::printf("  %-32s max_rel_err %.3e  (%ld coords)  %s\n", b.block.c_str(), b.max_rel_error, b.checked,
                    b.pass ? "ok" : "FAIL");
    }
    std::size_t failed = 0;
    for (const auto& b : r.blocks) failed += b.pass ? 0 : 1;
    std::printf("%s: %zu of %zu blocks within tolerance %.1e\n", r.pass() ? "PASS" : "FAIL", r.blocks.size() - failed,
                r.blocks.size(), r.tolerance);
    return r.pass() ? kOk : kCheckFailed;
}

// ---------------------------------------------------------------------------
// pretrain

struct PretrainArgs {
    std::string config, data, out, resume;
    bool no_epoch_checkpoints = false, eval = false;
};

std::vector<Triplet> load_data(const std::string& spec, std::uint64_t seed) {
    if (spec.rfind("synth:", 0) == 0) {
        std::size_t used = 0;
        int n = 0;
        try {
            n = std::stoi(spec.substr(6), &used);
        } catch (const std::exception&) {
        }
        if (n < 1 || used != spec.size() - 6) throw UsageError("--data synth:N needs a positive N");
        return synth_triplets(n, seed);
    }
    return load_dataset(spec, seed);
}

int run_pretrain(const PretrainArgs& a) {
    std::optional<Checkpoint> ck;
    if (!a.resume.empty()) ck = load_checkpoint(a.resume);
    TrainConfig cfg = !a.config.empty() ? load_config(a.config) : ck ? ck->config : TrainConfig::desk();
    cfg.validate();
    const std::vector<Triplet> data = load_data(a.data, cfg.seed);
    const long total = total_steps(cfg, data.size());

    PretrainOptions opt;
    opt.out_dir = a.out;
    opt.epoch_checkpoints = !a.no_epoch_checkpoints;
    opt.on_step = [total](const StepMetrics& m) {
        if (m.step == 1 || m.step % 10 == 0 || m.step == total)
            std::printf("step %ld/%ld  lr %.3e  total %.4f\n", m.step, total, m.lr, m.total);
        std::fflush(stdout);
    };
    std::optional<TrainState> resume;
    if (ck) resume = std::move(ck->state);
    const PretrainResult r = pretrain(data, cfg, opt, std::move(resume));
    if (a.eval) {
        const AlignmentGaps g = alignment_gaps(r.state.params, data, cfg);
        std::cout << nlohmann::json{{"gap_rgb_depth", g.rgb_depth}, {"gap_rgb_point", g.rgb_point},
                                    {"gap_point_depth", g.point_depth}}
                         .dump()
                  << "\n";
    }
    return kOk;
}

// ---------------------------------------------------------------------------
// embed

struct EmbedArgs {
    std::string checkpoint, cloud, rgb, out;
    int depth_view = 0;
};

int run_embed(const EmbedArgs& a) {
    const Checkpoint ck = load_checkpoint(a.checkpoint);
    const TrainConfig& cfg = ck.config;
    const ParamStore& ps = ck.state.params;
    if (a.depth_view < 0 || a.depth_view >= kNumPoses) throw UsageError("--depth-view must lie in 0..31");

    PointCloud cloud = normalize_cloud(load_xyz(a.cloud)).cloud;
    if (cloud.count() > kEncoderPoints) {
        Rng rng(cfg.seed, Stream::Subsample);
        cloud = subsample(cloud, kEncoderPoints, rng);
    }
    nlohmann::json j;
    j["dim"] = cfg.model.encoder.dim;
    j["g_p"] = row_json(embed_point(ps, cfg.model, cloud, cfg.seed));
    const CameraPose pose = generate_camera_poses(cfg.camera_radius)[std::size_t(a.depth_view)];
    j["g_d"] = row_json(embed_depth(ps, cfg.model, render(cloud, pose, cfg.render)));
    if (!a.rgb.empty()) {
        if (fs::path(a.rgb).extension() == ".png") {
            const Image img = load_png(a.rgb);
            if (img.channels != 3) throw DomainError("--rgb image must have 3 channels, got " + std::to_string(img.channels));
            j["g_r"] = row_json(embed_rgb(ps, cfg.model, img));
        } else {
            const Mat f = load_features(a.rgb);
            if (f.rows() != 1 || f.cols() != cfg.model.external_feature_dim)
                throw DomainError("feature file holds " + std::to_string(f.rows()) + "x" + std::to_string(f.cols()) +
                                  ", checkpoint expects 1x" + std::to_string(cfg.model.external_feature_dim));
            j["g_r"] = row_json(embed_rgb_features(ps, cfg.model, f));
        }
    }
    if (a.out.empty()) {
        std::cout << j.dump() << "\n";
    } else {
        std::ofstream os(a.out);
        if (!(os << j.dump() << "\n")) throw FormatError("cannot write " + a.out);
    }
    return kOk;
}

// ---------------------------------------------------------------------------
// metrics

struct MetricsArgs {
    std::string pred, gt;
    double threshold = 0.01;
};

int run_metrics(const MetricsArgs& a) {
    const PointCloud p = load_xyz(a.pred), q = load_xyz(a.gt);
    nlohmann::json j;
    j["cd_l1"] = chamfer(p, q, ChamferVariant::L1);
    j["cd_l2"] = chamfer(p, q, ChamferVariant::L2);
    j["fscore_1pct"] = fscore(p, q, a.threshold);
    std::cout << j.dump() << "\n";
    return kOk;
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
    int n = 64;
    std::uint64_t seed = 0;
    std::string out;
};

int run_synth(const SynthArgs& a) {
    if (a.n < 1) throw UsageError("--n must be positive");
    fs::create_directories(a.out);
    std::ofstream manifest(fs::path(a.out) / "manifest.jsonl");
    for (const Triplet& t : synth_triplets(a.n, a.seed)) {
        save_xyz(t.cloud, (fs::path(a.out) / (t.object_id + ".xyz")).string());
        save_png(t.rgb, (fs::path(a.out) / (t.object_id + ".png")).string());
        manifest << nlohmann::json{{"id", t.object_id}, {"cloud_path", t.object_id + ".xyz"},
                                   {"rgb_path", t.object_id + ".png"}}
                        .dump()
                 << "\n";
    }
    if (!manifest) throw FormatError("cannot write manifest in " + a.out);
    std::cout << "wrote " << a.n << " objects and manifest.jsonl to " << a.out << "\n";
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"drpoint: tri-modal point cloud pre-training toolkit"};
    app.require_subcommand(1);

    RenderArgs ra;
    auto* render_cmd = app.add_subcommand("render", "Render depth views of a point cloud");
    render_cmd->add_option("--cloud", ra.cloud, "ASCII .xyz point file")->required();
    render_cmd->add_option("--poses", ra.poses, "'all' or a pose index 0..31");
    render_cmd->add_option("--out", ra.out, "Output directory")->required();
    render_cmd->add_option("--grid", ra.grid, "Depth slices of the occupancy grid");
    render_cmd->add_option("--size", ra.size, "Image size WxH");
    render_cmd->add_option("--radius", ra.radius, "Camera distance from the origin");

    GradcheckArgs ga;
    auto* grad_cmd = app.add_subcommand("gradcheck", "Compare analytic gradients with central differences");
    grad_cmd->add_option("--op", ga.op, "Op to check, or 'all'");
    grad_cmd->add_option("--tol", ga.opt.tolerance, "Maximum relative error");
    grad_cmd->add_option("--step", ga.opt.h, "Finite-difference step h");
    grad_cmd->add_option("--seed", ga.opt.seed, "Instance seed");
    grad_cmd->add_option("--instances", ga.opt.instances, "Random instances per op")->check(CLI::PositiveNumber);

    PretrainArgs pa;
    auto* pre_cmd = app.add_subcommand("pretrain", "Run tri-modal pre-training");
    pre_cmd->add_option("--config", pa.config, "JSON config (default: desk profile)");
    pre_cmd->add_option("--data", pa.data, "Manifest path or synth:N")->required();
    pre_cmd->add_option("--out", pa.out, "Output directory")->required();
    pre_cmd->add_option("--resume", pa.resume, "Checkpoint to continue from");
    pre_cmd->add_flag("--no-epoch-checkpoints", pa.no_epoch_checkpoints, "Only write final.drck");
    pre_cmd->add_flag("--eval", pa.eval, "Print cross-modal cosine gaps after training");

    EmbedArgs ea;
    auto* embed_cmd = app.add_subcommand("embed", "Print point, depth and RGB embeddings as JSON");
    embed_cmd->add_option("--checkpoint", ea.checkpoint, "Checkpoint file")->required();
    embed_cmd->add_option("--cloud", ea.cloud, "ASCII .xyz point file")->required();
    embed_cmd->add_option("--rgb", ea.rgb, "RGB PNG or external feature file");
    embed_cmd->add_option("--depth-view", ea.depth_view, "Pose index of the depth view");
    embed_cmd->add_option("--out", ea.out, "Write JSON here instead of stdout");

    MetricsArgs ma;
    auto* metrics_cmd = app.add_subcommand("metrics", "Chamfer distances and F-score between two clouds");
    metrics_cmd->add_option("--pred", ma.pred, "Predicted .xyz")->required();
    metrics_cmd->add_option("--gt", ma.gt, "Ground-truth .xyz")->required();
    metrics_cmd->add_option("--threshold", ma.threshold, "F-score distance")->check(CLI::PositiveNumber);

    SynthArgs sa;
    auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic dataset with a manifest");
    synth_cmd->add_option("--n", sa.n, "Number of objects");
    synth_cmd->add_option("--seed", sa.seed, "Generator seed");
    synth_cmd->add_option("--out", sa.out, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (render_cmd->parsed()) return run_render(ra);
        if (grad_cmd->parsed()) return run_gradcheck(ga);
        if (pre_cmd->parsed()) return run_pretrain(pa);
        if (embed_cmd->parsed()) return run_embed(ea);
        if (metrics_cmd->parsed()) return run_metrics(ma);
        if (synth_cmd->parsed()) return run_synth(sa);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const DomainError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const NonFiniteError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kCheckFailed;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kCheckFailed;
    }
    return kUsage;
}
