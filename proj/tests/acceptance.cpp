// Acceptance suite: one PASS/FAIL line per criterion, exit 0 iff all pass.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>

#include "drpoint/drpoint.hpp"
#include "oracles.hpp"

using namespace drpoint;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int n, bool ok, const std::string& detail) {
    std::printf("criterion %d: %s  %s\n", n, ok ? "PASS" : "FAIL", detail.c_str());
    std::fflush(stdout);
    failures += ok ? 0 : 1;
}

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

bool same_bits(const Mat& a, const Mat& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() &&
           std::memcmp(a.data(), b.data(), sizeof(double) * std::size_t(a.size())) == 0;
}

bool same_store(const ParamStore& a, const ParamStore& b) {
    if (!a.congruent(b)) return false;
    for (const auto& [n, m] : a.tensors)
        if (!same_bits(m, b.at(n))) return false;
    return true;
}

bool same_state(const TrainState& a, const TrainState& b) {
    return a.step == b.step && same_store(a.params, b.params) && same_store(a.key_params, b.key_params) &&
           same_store(a.adam_m, b.adam_m) && same_store(a.adam_v, b.adam_v) &&
           same_bits(a.moco.storage, b.moco.storage) && a.moco.size == b.moco.size && a.moco.head == b.moco.head;
}

void criterion1() {
    const auto t0 = Clock::now();
    const auto poses = generate_camera_poses(2.0);
    bool ok = poses.size() == 32;
    const Vec3 axes[3] = {Vec3::UnitX(), Vec3::UnitY(), Vec3::UnitZ()};
    for (std::size_t i = 0; ok && i < poses.size(); ++i) {
        const Vec3 f = poses[i].forward();
        ok = poses[i].valid() && std::abs(f.norm() - 1.0) < 1e-12;
        if (i < 24) {
            ok = ok && std::abs(f.dot(axes[i / 8])) < 1e-12;
        } else {
            for (int c = 0; c < 3; ++c) ok = ok && std::abs(std::abs(f[c]) - 1.0 / std::sqrt(3.0)) < 1e-12;
        }
    }
    const double s = seconds_since(t0);
    report(1, ok && s < 1.0, fmt("%zu poses (3 rings x 8 + 8 diagonals), unit view directions, %.4f s", poses.size(), s));
}

void criterion2() {
    const auto t0 = Clock::now();
    GradcheckOptions opt;
    opt.h = 1e-4;
    opt.tolerance = 1e-3;
    opt.instances = 20;
    const GradcheckReport r = finite_difference_check("dr_loss", opt);
    double worst = 0.0;
    for (const auto& b : r.blocks) worst = std::max(worst, b.max_rel_error);
    const double s = seconds_since(t0);
    report(2, r.pass() && !r.blocks.empty() && s < 30.0,
           fmt("L_DR vs central differences, 20 instances, max rel error %.2e (< 1e-3), %.2f s", worst, s));
}

void criterion3() {
    std::mt19937_64 gen(3);
    std::uniform_real_distribution<double> u(0, 1);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        OccupancyGrid g;
        g.depth = 1 + int(gen() % 32);
        g.height = 1 + int(gen() % 8);
        g.width = 1 + int(gen() % 8);
        g.values.resize(std::size_t(g.depth) * g.height * g.width);
        for (double& v : g.values) v = (gen() % 6 == 0) ? double(gen() % 2) : u(gen);
        g.raw = g.values;
        const TerminationVolume t = ray_termination(g);
        const std::size_t plane = std::size_t(g.height) * g.width;
        for (std::size_t p = 0; p < plane; ++p) {
            double s = t.residual[p];
            for (int d = 0; d < g.depth; ++d) s += t.values[d * plane + p];
            worst = std::max(worst, std::abs(s - 1.0));
        }
    }
    report(3, worst <= 1e-9, fmt("100 random grids, max |sum t + residual - 1| = %.2e", worst));
}

void criterion4() {
    std::mt19937_64 gen(4);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 1 + int(gen() % 64), m = 1 + int(gen() % 64);
        const oracle::Pts P = oracle::random_points(gen, n), Q = oracle::random_points(gen, m);
        Points a(n, 3), b(m, 3);
        for (int i = 0; i < n; ++i) a.row(i) = P[i].transpose();
        for (int i = 0; i < m; ++i) b.row(i) = Q[i].transpose();
        worst = std::max(worst, std::abs(chamfer(PointCloud(a), PointCloud(b), ChamferVariant::L1) - oracle::chamfer(P, Q, false)));
        worst = std::max(worst, std::abs(chamfer(PointCloud(a), PointCloud(b), ChamferVariant::L2) - oracle::chamfer(P, Q, true)));
    }
    const PointCloud p{{0, 0, 0}}, q{{1, 0, 0}};
    const double l1 = chamfer(p, q, ChamferVariant::L1), l2 = chamfer(p, q, ChamferVariant::L2);
    report(4, worst <= 1e-9 && l1 == 1.0 && l2 == 1.0,
           fmt("100 pairs vs brute force, max diff %.2e; hand case CD-l1 = %g, CD-l2 = %g", worst, l1, l2));
}

void criterion5() {
    const double total = total_loss(LossParts{1, 1, 1, 1, 1, 1, 1});
    const std::vector<int> targets = {0, 5, 17, 63};
    const double ce = token_ce(Mat::Zero(4, 64), targets).value;
    Mat g(2, 2);
    g << 1, 0, 0, 1;
    ContrastiveHead head;
    head.log_tau = 0.0;
    const double nce = cross_modal_nce({g, Modality::Rgb}, {g, Modality::Point}, head).value;
    const double hand = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
    const bool ok = std::abs(total - 4.3) <= 1e-12 && std::abs(ce - std::log(64.0)) <= 1e-9 && std::abs(nce - hand) <= 1e-6;
    report(5, ok, fmt("total_loss(all 1) = %.12g, token_ce(uniform, V=64) = %.10f (ln 64 = %.10f), nce = %.8f (-log(e/(e+1)) = %.8f)",
                      total, ce, std::log(64.0), nce, hand));
}

struct ToyRun {
    PretrainResult result;
    double seconds = 0.0;
};

TrainConfig toy_config() {
    TrainConfig c = TrainConfig::desk();
    c.max_steps = 200;
    c.seed = 0;
    return c;
}

ToyRun toy_run(const std::vector<Triplet>& data, const fs::path& dir, const char* threads) {
    setenv("DRPOINT_THREADS", threads, 1);
    fs::remove_all(dir);
    const auto t0 = Clock::now();
    PretrainOptions opt;
    opt.out_dir = dir.string();
    opt.epoch_checkpoints = false;
    opt.on_step = [](const StepMetrics& m) {
        if (m.step % 50 == 0) std::fprintf(stderr, "  step %ld  total %.4f\n", m.step, m.total);
    };
    ToyRun r{pretrain(data, toy_config(), opt), 0.0};
    r.seconds = seconds_since(t0);
    unsetenv("DRPOINT_THREADS");
    return r;
}

void criteria6to8(const fs::path& work) {
    const TrainConfig cfg = toy_config();
    const std::vector<Triplet> data = synth_triplets(64, cfg.seed);

    const ToyRun a = toy_run(data, work / "run_a", "1");
    const auto& ms = a.result.metrics;
    double first = 0.0;
    for (int i = 0; i < 10; ++i) first += ms[std::size_t(i)].total / 10.0;
    const double last = ms.back().total;
    const AlignmentGaps gaps = alignment_gaps(a.result.state.params, data, cfg);
    const bool descent = ms.size() == 200 && last <= 0.7 * first;
    const bool aligned = gaps.rgb_depth >= 0.2 && gaps.rgb_point >= 0.2 && gaps.point_depth >= 0.2;
    report(6, descent && aligned && a.seconds < 900.0,
           fmt("loss step 200 = %.4f vs first-10 mean %.4f (ratio %.3f <= 0.7); cosine gaps rgb-depth %.3f, "
               "rgb-point %.3f, point-depth %.3f (>= 0.2); %.0f s",
               last, first, last / first, gaps.rgb_depth, gaps.rgb_point, gaps.point_depth, a.seconds));

    const ToyRun b = toy_run(data, work / "run_b", "4");
    const std::string ma = slurp(work / "run_a" / "metrics.jsonl"), mb = slurp(work / "run_b" / "metrics.jsonl");
    const bool same_ck = slurp(work / "run_a" / "final.drck") == slurp(work / "run_b" / "final.drck");
    report(7, !ma.empty() && ma == mb && same_ck,
           fmt("metrics.jsonl (%zu bytes) %s, final checkpoint %s, DRPOINT_THREADS=1 vs 4",
               ma.size(), ma == mb ? "byte-identical" : "DIFFERS", same_ck ? "byte-identical" : "DIFFERS"));

    // save -> load -> 10 steps against 10 uninterrupted steps
    TrainState s = init_state(data, cfg);
    const long total = total_steps(cfg, data.size());
    auto step = [&](TrainState& st) {
        std::vector<const Triplet*> batch;
        for (std::size_t i : batch_indices(data.size(), cfg.batch_size, st.step, cfg.seed)) batch.push_back(&data[i]);
        return pretrain_step(st, batch, cfg, total).metrics;
    };
    for (int i = 0; i < 3; ++i) step(s);
    const fs::path ck = work / "criterion8.drck";
    checkpoint_save(s, cfg, ck.string());
    TrainState resumed = checkpoint_load(ck.string());
    bool ok = same_state(s, resumed);
    for (int i = 0; i < 10; ++i) {
        const StepMetrics x = step(s), y = step(resumed);
        ok = ok && to_json(x).dump() == to_json(y).dump();
    }
    ok = ok && same_state(s, resumed);
    report(8, ok, fmt("checkpoint at step 3, 10 continued steps %s the uninterrupted run (state and metrics)",
                      ok ? "bit-identical to" : "DIFFER from"));
}

void criterion9() {
    std::printf(
        "criterion 9: PASS  Statement: the downstream results of the method (for example 93.6%% ModelNet40 "
        "classification accuracy, 89.51%% ScanObjectNN OBJ-BG accuracy, and the point cloud completion Chamfer "
        "distances) depend on ShapeNet-scale pre-training followed by task-specific fine-tuning. They are NOT "
        "reproducible at desk scale and are not claimed here. Criteria 1-8 are the substituted property-based "
        "acceptance suite.\n");
}

}  // namespace

int main(int argc, char** argv) {
    const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "drpoint_acceptance";
    fs::create_directories(work);
    try {
        criterion1();
        criterion2();
        criterion3();
        criterion4();
        criterion5();
        criteria6to8(work);
        criterion9();
    } catch (const std::exception& e) {
        std::printf("acceptance aborted: %s\n", e.what());
        return 1;
    }
    std::printf("%s: %d criteria failed\n", failures == 0 ? "ALL PASS" : "FAILURES", failures);
    return failures == 0 ? 0 : 1;
}
