#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "drpoint/checkpoint.hpp"
#include "drpoint/trainer.hpp"

namespace drpoint {

struct PretrainOptions {
    std::string out_dir;                               // empty: no files written
    bool epoch_checkpoints = true;
    long stop_after = 0;                               // > 0: stop once state.step reaches it
    std::function<void(const StepMetrics&)> on_step;   // called after each step
};

struct PretrainResult {
    TrainState state;
    std::vector<StepMetrics> metrics;
};

inline std::string metrics_line(const StepMetrics& m) { return to_json(m).dump(); }

inline std::string epoch_checkpoint_name(long epoch) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "checkpoint_epoch%03ld.drck", epoch);
    return buf;
}

namespace detail {

// Keeps metrics lines up to `step` so a resumed run appends without duplicates.
inline void truncate_metrics(const std::filesystem::path& file, long step) {
    if (!std::filesystem::exists(file)) return;
    std::ifstream in(file);
    std::vector<std::string> keep;
    for (std::string line; std::getline(in, line);) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        if (j.at("step").get<long>() <= step) keep.push_back(line);
    }
    in.close();
    std::ofstream out(file, std::ios::trunc);
    for (const auto& l : keep) out << l << '\n';
}

}  // namespace detail

/// Runs total_steps(cfg, N) optimizer steps (or continues `resume` up to that
/// count), appending one metrics record per step to out_dir/metrics.jsonl and
/// writing a checkpoint at the end of every epoch plus final.drck.
inline PretrainResult pretrain(const std::vector<Triplet>& data, const TrainConfig& cfg, const PretrainOptions& opt = {},
                               std::optional<TrainState> resume = std::nullopt) {
    cfg.validate();
    if (data.empty()) throw DomainError("pretrain: empty dataset");
    PretrainResult r;
    r.state = resume ? std::move(*resume) : init_state(data, cfg);
    const long total = total_steps(cfg, data.size());
    const long spe = steps_per_epoch(data.size(), cfg.batch_size);
    const long last = opt.stop_after > 0 ? std::min(total, opt.stop_after) : total;

    std::filesystem::path dir;
    std::ofstream metrics;
    if (!opt.out_dir.empty()) {
        dir = opt.out_dir;
        std::filesystem::create_directories(dir);
        detail::truncate_metrics(dir / "metrics.jsonl", r.state.step);
        metrics.open(dir / "metrics.jsonl", std::ios::app);
        if (!metrics) throw FormatError("pretrain: cannot write " + (dir / "metrics.jsonl").string());
    }

    while (r.state.step < last) {
        const std::vector<std::size_t> idx = batch_indices(data.size(), cfg.batch_size, r.state.step, cfg.seed);
        std::vector<const Triplet*> batch;
        for (std::size_t i : idx) batch.push_back(&data[i]);
        const StepMetrics m = pretrain_step(r.state, batch, cfg, total).metrics;
        r.metrics.push_back(m);
        if (metrics.is_open()) metrics << metrics_line(m) << '\n' << std::flush;
        if (opt.on_step) opt.on_step(m);
        if (!dir.empty() && opt.epoch_checkpoints && r.state.step % spe == 0)
            checkpoint_save(r.state, cfg, (dir / epoch_checkpoint_name(r.state.step / spe)).string());
    }
    if (!dir.empty()) checkpoint_save(r.state, cfg, (dir / "final.drck").string());
    return r;
}

}  // namespace drpoint
