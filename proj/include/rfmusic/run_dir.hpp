#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "run_config.hpp"
#include "trainer.hpp"

// Training run directory:
//   config.json        resolved RunConfig, written before any work
//   metrics.jsonl      one {step, loss, grad_norm, lr, wall_ms} line per step
//   latest.rfmk        most recent checkpoint (resume point)
//   step_<k>.rfmk      periodic checkpoints
//   final.rfmk         checkpoint after the last step (sampling uses its EMA)
namespace rfm {

inline bool deterministic_requested() {
    const char* v = std::getenv("RFMUSIC_DETERMINISTIC");
    return v != nullptr && std::string(v) == "1";
}

struct TrainRunOptions {
    bool resume = false;
    std::optional<std::uint64_t> stop_after;  // end early without writing final.rfmk
    std::function<void(const StepMetrics&)> on_step;
};

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
    std::ofstream os(path);
    if (!os) throw InputError("cannot write " + path.string());
    os << j.dump(2) << '\n';
}

/// Keeps the metrics lines with step <= `last`, so a resumed run continues
/// without gaps or duplicates.
inline void truncate_metrics(const std::filesystem::path& path, std::uint64_t last) {
    std::vector<std::string> keep;
    {
        std::ifstream is(path);
        std::string line;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            try {
                if (nlohmann::json::parse(line).at("step").get<std::uint64_t>() <= last) keep.push_back(line);
            } catch (const nlohmann::json::exception&) {
                break;  // torn final line from an interrupted write
            }
        }
    }
    std::ofstream os(path, std::ios::trunc);
    for (const auto& l : keep) os << l << '\n';
}

inline Checkpoint train_run(RunConfig cfg, const std::filesystem::path& out, const TrainRunOptions& opt = {}) {
    namespace fs = std::filesystem;
    Checkpoint ck;
    const auto latest = out / "latest.rfmk";
    const auto metrics_path = out / "metrics.jsonl";
    if (opt.resume) {
        if (!fs::exists(latest)) throw InputError("--resume given but " + latest.string() + " does not exist");
        ck = load_checkpoint(latest);
        const std::size_t steps = cfg.train.steps;
        cfg = ck.run;
        cfg.train.steps = std::max<std::size_t>(steps, ck.state.step);
        ck.run.train.steps = cfg.train.steps;
        ck.state.train.steps = cfg.train.steps;
        truncate_metrics(metrics_path, ck.state.step);
    } else {
        if (fs::exists(out) && !fs::is_empty(out))
            throw ContractError("output directory " + out.string() + " already exists; pass --resume to continue it");
        cfg.validate();
        fs::create_directories(out);
        write_json_file(out / "config.json", to_json(cfg));
    }
    ck.deterministic = deterministic_requested() || ck.deterministic;
    auto data = prepare_data(cfg);
    if (!opt.resume) {
        ck.run = cfg;
        ck.state = TrainState::create(cfg.model, cfg.train, data.stats);
    } else if (!(data.stats == ck.state.stats)) {
        throw ContractError("training data no longer matches the checkpoint's latent statistics");
    }

    std::ofstream metrics(metrics_path, std::ios::app);
    const std::uint64_t target = opt.stop_after ? std::min<std::uint64_t>(*opt.stop_after, cfg.train.steps) : cfg.train.steps;
    train_until(ck.state, data.train, target, [&](const StepMetrics& m) {
        metrics << m.to_json().dump() << '\n';
        metrics.flush();
        if (cfg.checkpoint_every > 0 && m.step % cfg.checkpoint_every == 0) {
            save_checkpoint(ck, out / ("step_" + std::to_string(m.step) + ".rfmk"));
            save_checkpoint(ck, latest);
        }
        if (opt.on_step) opt.on_step(m);
    });
    if (!opt.stop_after || target == cfg.train.steps) {
        save_checkpoint(ck, latest);
        save_checkpoint(ck, out / "final.rfmk");
    }
    return ck;
}

}  // namespace rfm
