#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>

#include <gtest/gtest.h>

#include "drpoint/pretrain.hpp"

using namespace drpoint;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny() {
    TrainConfig c = TrainConfig::desk();
    c.model.encoder = EncoderConfig{2, 16, 2, 2, 0.1};
    c.model.num_groups = 8;
    c.model.group_size = 16;
    c.model.embed_hidden = 8;
    c.model.codebook_size = 8;
    c.model.image_size = 16;
    c.model.image_width = 2;
    c.render.grid_depth = 8;
    c.render.image_width = c.render.image_height = 8;
    c.moco.K = 8;
    c.epochs = 2;
    c.kmeans_iters = 5;
    return c;
}

const std::vector<Triplet>& dataset() {
    static const std::vector<Triplet> d = synth_triplets(8, 0);
    return d;
}

std::vector<const Triplet*> first_batch(const TrainConfig& c, long step) {
    std::vector<const Triplet*> b;
    for (std::size_t i : batch_indices(dataset().size(), c.batch_size, step, c.seed)) b.push_back(&dataset()[i]);
    return b;
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
    return a.step == b.step && a.seed == b.seed && same_store(a.params, b.params) &&
           same_store(a.key_params, b.key_params) && same_store(a.tokenizer, b.tokenizer) &&
           same_store(a.adam_m, b.adam_m) && same_store(a.adam_v, b.adam_v) &&
           same_bits(a.codebook.codewords, b.codebook.codewords) && a.moco.size == b.moco.size &&
           a.moco.head == b.moco.head && a.moco.capacity == b.moco.capacity &&
           same_bits(a.moco.storage, b.moco.storage) && a.moco.tau == b.moco.tau &&
           a.moco.momentum == b.moco.momentum;
}

fs::path scratch(const std::string& name) {
    const fs::path d = fs::temp_directory_path() / "drpoint_test_trainer" / name;
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

struct ThreadEnv {
    explicit ThreadEnv(const char* v) { setenv("DRPOINT_THREADS", v, 1); }
    ~ThreadEnv() { unsetenv("DRPOINT_THREADS"); }
};

}  // namespace

TEST(Schedule, CosineExamples) {
    EXPECT_EQ(cosine_lr(0, 100, 5e-4), 5e-4);
    EXPECT_EQ(cosine_lr(100, 100, 5e-4), 0.0);
    EXPECT_NEAR(cosine_lr(50, 100, 5e-4), 2.5e-4, 1e-18);
    EXPECT_THROW(cosine_lr(101, 100, 5e-4), DomainError);
    EXPECT_THROW(cosine_lr(-1, 100, 5e-4), DomainError);
}

TEST(Schedule, WarmupThenDecay) {
    const double base = 1e-3;
    for (long s = 0; s < 10; ++s) EXPECT_NEAR(cosine_lr(s, 100, base, 10), base * double(s + 1) / 10.0, 1e-18);
    EXPECT_EQ(cosine_lr(10, 100, base, 10), base);
    double prev = base;
    for (long s = 11; s <= 100; ++s) {
        const double lr = cosine_lr(s, 100, base, 10);
        EXPECT_LT(lr, prev);
        prev = lr;
    }
    TrainConfig c;
    EXPECT_EQ(resolved_warmup(c, 200), 20);
}

TEST(Schedule, StepsAndBatches) {
    TrainConfig c;
    EXPECT_EQ(c.epochs, 50);
    EXPECT_EQ(c.batch_size, 4);
    EXPECT_EQ(c.lr, 5e-4);
    EXPECT_EQ(c.weight_decay, 0.05);
    EXPECT_EQ(steps_per_epoch(64, 4), 16);
    EXPECT_EQ(steps_per_epoch(65, 4), 17);
    EXPECT_EQ(total_steps(c, 64), 800);
    for (long epoch = 0; epoch < 3; ++epoch) {
        std::multiset<std::size_t> seen;
        for (long s = 0; s < 17; ++s)
            for (std::size_t i : batch_indices(65, 4, epoch * 17 + s, 7)) seen.insert(i);
        ASSERT_EQ(seen.size(), 65u);
        for (std::size_t i = 0; i < 65; ++i) EXPECT_EQ(seen.count(i), 1u);
    }
    EXPECT_EQ(batch_indices(65, 4, 16, 7).size(), 1u);
}

TEST(Step, SevenFiniteParts) {
    const TrainConfig c = tiny();
    TrainState s = init_state(dataset(), c);
    const StepResult r = pretrain_step(s, first_batch(c, 0), c, 4);
    const auto v = r.metrics.parts.values();
    EXPECT_EQ(v.size(), 7u);
    for (double x : v) EXPECT_TRUE(std::isfinite(x));
    EXPECT_EQ(r.metrics.total, total_loss(r.metrics.parts, c.loss_weights));
    EXPECT_EQ(r.metrics.step, 1);
    EXPECT_EQ(s.step, 1);
    const auto j = to_json(r.metrics);
    for (const char* k : {"step", "lr", "l_rd", "l_rp", "l_pd", "l_moco", "l_ce", "l_dr", "l_cd", "total"})
        EXPECT_TRUE(j.contains(k)) << k;
    EXPECT_EQ(j.size(), 10u);
}

TEST(Step, ZeroLearningRateLeavesParameters) {
    TrainConfig c = tiny();
    c.lr = 0.0;
    c.weight_decay = 0.05;
    c.loss_weights = LossWeights{0, 0, 0};
    TrainState s = init_state(dataset(), c);
    const ParamStore before = s.params;
    pretrain_step(s, first_batch(c, 0), c, 4);
    pretrain_step(s, first_batch(c, 1), c, 4);
    EXPECT_TRUE(same_store(before, s.params));
}

TEST(Step, UpdatesParametersAndQueue) {
    const TrainConfig c = tiny();
    TrainState s = init_state(dataset(), c);
    const ParamStore before = s.params, key_before = s.key_params;
    pretrain_step(s, first_batch(c, 0), c, 4);
    EXPECT_FALSE(same_store(before, s.params));
    EXPECT_FALSE(same_store(key_before, s.key_params));
    EXPECT_EQ(s.moco.size, 4);
    for (const auto& [n, k] : s.key_params.tensors) EXPECT_TRUE(same_bits(k, c.moco.m * key_before.at(n) + (1 - c.moco.m) * s.params.at(n))) << n;
}

TEST(Step, NonFiniteLeavesStateUntouched) {
    const TrainConfig c = tiny();
    TrainState s = init_state(dataset(), c);
    s.params.at("head_p.fc2.w")(0, 0) = std::nan("");
    const TrainState before = s;
    EXPECT_THROW(pretrain_step(s, first_batch(c, 0), c, 4), NonFiniteError);
    EXPECT_EQ(s.step, 0);
    EXPECT_EQ(s.moco.size, 0);
    EXPECT_TRUE(same_store(before.adam_m, s.adam_m));
}

TEST(Step, DeterministicAcrossThreadCounts) {
    const TrainConfig c = tiny();
    std::vector<StepMetrics> runs[2];
    TrainState finals[2];
    const char* threads[2] = {"1", "3"};
    for (int r = 0; r < 2; ++r) {
        ThreadEnv env(threads[r]);
        TrainState s = init_state(dataset(), c);
        for (long k = 0; k < 3; ++k) runs[r].push_back(pretrain_step(s, first_batch(c, k), c, 4).metrics);
        finals[r] = s;
    }
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(to_json(runs[0][k]).dump(), to_json(runs[1][k]).dump());
    EXPECT_TRUE(same_state(finals[0], finals[1]));
}

TEST(Pretrain, LogsOneRecordPerStep) {
    TrainConfig c = tiny();
    c.epochs = 1;
    const std::vector<Triplet> data = synth_triplets(64, 1);
    const fs::path dir = scratch("log");
    const PretrainResult r = pretrain(data, c, {dir.string(), true, 0, {}});
    ASSERT_EQ(r.metrics.size(), 16u);
    std::ifstream in(dir / "metrics.jsonl");
    long expect = 1;
    for (std::string line; std::getline(in, line);) {
        const auto j = nlohmann::json::parse(line);
        EXPECT_EQ(j.at("step").get<long>(), expect++);
    }
    EXPECT_EQ(expect, 17);
    EXPECT_TRUE(fs::exists(dir / "checkpoint_epoch001.drck"));
    EXPECT_TRUE(fs::exists(dir / "final.drck"));
}

TEST(Pretrain, EpochCheckpoints) {
    const TrainConfig c = tiny();
    const fs::path dir = scratch("epochs");
    pretrain(dataset(), c, {dir.string(), true, 0, {}});
    EXPECT_TRUE(fs::exists(dir / epoch_checkpoint_name(1)));
    EXPECT_TRUE(fs::exists(dir / epoch_checkpoint_name(2)));
    EXPECT_FALSE(fs::exists(dir / epoch_checkpoint_name(3)));
    EXPECT_EQ(checkpoint_load((dir / epoch_checkpoint_name(1)).string()).step, 2);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    const TrainConfig c = tiny();
    TrainState s = init_state(dataset(), c);
    pretrain_step(s, first_batch(c, 0), c, 4);
    const fs::path f = scratch("rt") / "s.drck";
    checkpoint_save(s, c, f.string());
    EXPECT_EQ(slurp(f).substr(0, 4), "DRCK");
    const Checkpoint back = load_checkpoint(f.string());
    EXPECT_TRUE(same_state(s, back.state));
    EXPECT_EQ(to_json(back.config), to_json(c));
}

TEST(Checkpoint, TruncatedAndVersionErrors) {
    const TrainConfig c = tiny();
    const TrainState s = init_state(dataset(), c);
    const fs::path dir = scratch("bad");
    checkpoint_save(s, c, (dir / "ok.drck").string());
    const std::string bytes = slurp(dir / "ok.drck");
    for (std::size_t cut : {std::size_t(2), std::size_t(7), bytes.size() / 2, bytes.size() - 1}) {
        std::ofstream(dir / "cut.drck", std::ios::binary) << bytes.substr(0, cut);
        EXPECT_THROW(checkpoint_load((dir / "cut.drck").string()), FormatError) << cut;
    }
    std::string bumped = bytes;
    bumped[4] = char(bumped[4] + 1);
    std::ofstream(dir / "ver.drck", std::ios::binary) << bumped;
    EXPECT_THROW(checkpoint_load((dir / "ver.drck").string()), VersionError);
    std::string magic = bytes;
    magic[0] = 'X';
    std::ofstream(dir / "magic.drck", std::ios::binary) << magic;
    EXPECT_THROW(checkpoint_load((dir / "magic.drck").string()), FormatError);
}

TEST(Checkpoint, ResumeMatchesUninterruptedRun) {
    const TrainConfig c = tiny();
    const fs::path full = scratch("full"), part = scratch("part");
    const PretrainResult a = pretrain(dataset(), c, {full.string(), true, 0, {}});
    pretrain(dataset(), c, {part.string(), false, 1, {}});
    const TrainState mid = checkpoint_load((part / "final.drck").string());
    EXPECT_EQ(mid.step, 1);
    const PretrainResult b = pretrain(dataset(), c, {part.string(), false, 0, {}}, mid);
    EXPECT_TRUE(same_state(a.state, b.state));
    EXPECT_EQ(slurp(full / "metrics.jsonl"), slurp(part / "metrics.jsonl"));
}
