#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "analysis.hpp"
#include "config.hpp"

namespace massl::cli {

enum ExitCode : int { ok = 0, usage = 1, runtime = 2 };

/// A required input file or directory does not exist.
class PathError : public std::runtime_error {
  public:
    explicit PathError(const std::string& path)
        : std::runtime_error("missing input: '" + path + "'"), path_(path) {}
    const std::string& path() const noexcept { return path_; }

  private:
    std::string path_;
};

namespace fs = std::filesystem;

inline void log(const std::string& msg) {
    static std::mutex mu;
    std::lock_guard lock(mu);
    std::cerr << "[massl] " << msg << '\n';
}

inline void require_file(const std::string& path) {
    if (!fs::is_regular_file(path)) throw PathError(path);
}

inline void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError(FormatError::Kind::io, "cannot write '" + path.string() + "'");
    out << text;
}

inline fs::path prepare_run_dir(const RunConfig& cfg) {
    const fs::path dir = cfg.run_dir();
    fs::create_directories(dir / "tables");
    write_text(dir / "config.echo", echo_config(cfg));
    return dir;
}

struct LoadedData {
    std::vector<Sample> pool;
    SplitPlan plan;
};

inline LoadedData load_fold(const RunConfig& cfg, std::size_t fold) {
    require_file(cfg.dataset);
    LoadedData d;
    d.pool = read_dataset(cfg.dataset);
    if (!d.pool.empty() && (d.pool.front().height != cfg.net.height || d.pool.front().width != cfg.net.width)) {
        throw ConfigError("dataset '" + cfg.dataset + "' is " + std::to_string(d.pool.front().height) + "x" +
                              std::to_string(d.pool.front().width) + " but the network expects " +
                              std::to_string(cfg.net.height) + "x" + std::to_string(cfg.net.width),
                          "height");
    }
    d.plan = make_splits(d.pool.size(), cfg.folds, cfg.split_sizes(), cfg.split_seed, cfg.fully_supervised).at(fold);
    return d;
}

inline int cmd_synth(const RunConfig& cfg) {
    prepare_run_dir(cfg);
    const auto samples = generate_synthetic(cfg.n_samples, cfg.net.height, cfg.net.width, cfg.data_seed);
    const fs::path out = cfg.dataset;
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    write_dataset(cfg.dataset, samples);
    log("wrote " + std::to_string(samples.size()) + " samples to " + cfg.dataset);
    return ok;
}

struct FoldOutcome {
    Strategy strategy{};
    std::size_t fold = 0;
    double test_dice = 0;
    bool diverged = false;
    std::string divergence;
};

/// Trains one (fold, strategy) pair into `dir` (metrics.csv, checkpoint.bin)
/// and scores the test set.
inline FoldOutcome train_one(const RunConfig& cfg, const LoadedData& data, Strategy strategy, std::size_t fold,
                             const fs::path& dir) {
    fs::create_directories(dir);
    const auto metrics_path = (dir / "metrics.csv").string();
    fs::remove(metrics_path);
    MetricsWriter metrics(metrics_path, strategy);
    const SampleSet labeled(data.pool, data.plan.labeled, true);
    const SampleSet unlabeled(data.pool, data.plan.unlabeled, false);
    const SampleSet validation(data.pool, data.plan.validation, true);
    const SampleSet test(data.pool, data.plan.test, true);

    const std::string tag = std::string(to_string(strategy)) + " fold " + std::to_string(fold);
    auto result = run_strategy<float>(cfg.net, cfg.train_for_fold(fold, strategy), labeled, unlabeled, validation,
                                      [&](const EpochLog& e) {
                                          metrics.append(e);
                                          log(tag + " " + e.phase + " epoch " + std::to_string(e.epoch) +
                                              " l1=" + format_metric(e.loss.l1) + " l2=" + format_metric(e.loss.l2) +
                                              " val_dice=" + format_metric(e.val_dice));
                                      });
    save_checkpoint(result.model, (dir / "checkpoint.bin").string());

    FoldOutcome out;
    out.strategy = strategy;
    out.fold = fold;
    out.diverged = result.diverged;
    out.divergence = result.divergence;
    if (!test.empty()) {
        const auto d = evaluate_dice(result.model, test);
        out.test_dice = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size());
    } else {
        out.test_dice = std::numeric_limits<double>::quiet_NaN();
    }
    if (out.diverged) write_text(dir / "divergence.txt", tag + ": " + out.divergence + "\n");
    return out;
}

inline int cmd_train(const RunConfig& cfg) {
    const auto data = load_fold(cfg, cfg.fold);
    const auto dir = prepare_run_dir(cfg);
    const auto r = train_one(cfg, data, cfg.train.strategy, cfg.fold, dir);
    if (r.diverged) {
        log("training diverged: " + r.divergence + " (see " + (dir / "divergence.txt").string() + ")");
        return runtime;
    }
    log("checkpoint written to " + (dir / "checkpoint.bin").string());
    return ok;
}

inline int cmd_eval(const RunConfig& cfg) {
    const auto ckpt = cfg.checkpoint_path();
    require_file(ckpt);
    const auto model = load_checkpoint<float>(ckpt);
    if (model.config().height != cfg.net.height || model.config().width != cfg.net.width) {
        throw ConfigError("checkpoint '" + ckpt + "' was trained at a different resolution", "height");
    }
    const auto data = load_fold(cfg, cfg.fold);
    const auto dir = prepare_run_dir(cfg);
    const SampleSet test(data.pool, data.plan.test, true);
    const auto d = evaluate_dice(model, test);

    std::ostringstream rows;
    rows << "id,dice\n";
    double mean = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
        rows << data.pool[data.plan.test[i]].id << ',' << format_metric(d[i]) << '\n';
        mean += d[i];
    }
    mean = d.empty() ? std::numeric_limits<double>::quiet_NaN() : mean / static_cast<double>(d.size());
    write_text(dir / "tables" / "eval.csv", rows.str());
    write_text(dir / "tables" / "eval_summary.csv", "fold,samples,mean_dice\n" + std::to_string(cfg.fold) + "," +
                                                        std::to_string(d.size()) + "," + format_metric(mean) + "\n");
    log("test dice " + format_metric(mean) + " over " + std::to_string(d.size()) + " samples");
    return ok;
}

inline int cmd_probe(const RunConfig& cfg) {
    const auto ckpt = cfg.checkpoint_path();
    require_file(ckpt);
    const auto model = load_checkpoint<float>(ckpt);
    const auto data = load_fold(cfg, cfg.fold);
    const auto dir = prepare_run_dir(cfg);
    std::vector<const Sample*> batch;
    for (auto i : data.plan.test) batch.push_back(&data.pool[i]);
    if (batch.empty()) throw ConfigError("probe needs a non-empty test set", "n_test");
    std::vector<Tensor<float>> feats;
    {
        NoGradGuard guard;
        feats = model.encode(stack_images<float>(batch));
    }
    ProbeOptions opt;
    opt.max_voxels = cfg.probe_max_voxels;
    opt.seed = cfg.probe_seed;
    opt.heldout = cfg.probe_heldout;
    const auto r = probe_r2_repeated(feats, stack_masks<float>(batch), cfg.probe_repeats, opt);
    write_probe_csv((dir / "tables" / "probe.csv").string(), r);
    for (std::size_t l = 0; l < r.levels.size(); ++l) {
        log("level " + std::to_string(l) + " R2 " + format_metric(r.r2_mean[l]));
    }
    return ok;
}

inline constexpr std::string_view kSweepHeader = "strategy,fold,test_dice,diverged";

inline std::vector<StrategyRuns> read_sweep_table(const std::string& path) {
    require_file(path);
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    if (line != kSweepHeader) {
        throw FormatError(FormatError::Kind::malformed_header, "'" + path + "' is not a sweep table");
    }
    std::vector<StrategyRuns> runs;
    std::map<std::string, std::size_t> index;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string strategy, fold, dice;
        std::getline(ss, strategy, ',');
        std::getline(ss, fold, ',');
        std::getline(ss, dice, ',');
        auto [it, fresh] = index.try_emplace(strategy, runs.size());
        if (fresh) runs.push_back({strategy, {}});
        try {
            runs[it->second].scores.push_back(std::stod(dice));
        } catch (const std::exception&) {
            throw FormatError(FormatError::Kind::malformed_header, "bad dice value in '" + path + "': " + line);
        }
    }
    return runs;
}

inline int cmd_compare(const RunConfig& cfg) {
    const fs::path dir = cfg.run_dir();
    const auto runs = read_sweep_table((dir / "tables" / "sweep.csv").string());
    prepare_run_dir(cfg);
    const auto report = compare_strategies(runs);
    write_comparison_csv((dir / "tables" / "compare.csv").string(), report);
    for (const auto& r : report.rows) log(r.name + " mean dice " + format_metric(r.mean) + " sd " + format_metric(r.stddev));
    return ok;
}

/// Every configured strategy on every fold. Jobs run on cfg.threads worker
/// threads; each owns its output directory and results are gathered in job
/// order, so outputs do not depend on scheduling.
inline int cmd_sweep(const RunConfig& cfg) {
    require_file(cfg.dataset);
    const auto dir = prepare_run_dir(cfg);
    std::vector<LoadedData> folds;
    for (std::size_t f = 0; f < cfg.folds; ++f) folds.push_back(load_fold(cfg, f));

    struct Job {
        std::size_t fold;
        Strategy strategy;
    };
    std::vector<Job> jobs;
    for (std::size_t f = 0; f < cfg.folds; ++f) {
        for (auto s : cfg.strategies) jobs.push_back({f, s});
    }
    std::vector<FoldOutcome> outcomes(jobs.size());
    std::vector<std::exception_ptr> errors(jobs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < jobs.size(); i = next++) {
            try {
                const auto& j = jobs[i];
                outcomes[i] = train_one(cfg, folds[j.fold], j.strategy, j.fold,
                                        dir / ("fold" + std::to_string(j.fold)) / to_string(j.strategy));
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const std::size_t n_threads = std::min(cfg.threads, jobs.size());
    if (n_threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }

    std::ostringstream table;
    table << kSweepHeader << '\n';
    bool any_diverged = false;
    for (const auto& o : outcomes) {
        table << to_string(o.strategy) << ',' << o.fold << ',' << format_metric(o.test_dice) << ','
              << (o.diverged ? 1 : 0) << '\n';
        any_diverged = any_diverged || o.diverged;
    }
    write_text(dir / "tables" / "sweep.csv", table.str());

    if (cfg.folds >= 2) {
        const auto runs = read_sweep_table((dir / "tables" / "sweep.csv").string());
        write_comparison_csv((dir / "tables" / "compare.csv").string(), compare_strategies(runs));
    }
    if (any_diverged) {
        std::ostringstream rep;
        for (const auto& o : outcomes) {
            if (o.diverged) rep << to_string(o.strategy) << " fold " << o.fold << ": " << o.divergence << '\n';
        }
        write_text(dir / "divergence.txt", rep.str());
        log("one or more runs diverged; see " + (dir / "divergence.txt").string());
        return runtime;
    }
    return ok;
}

/// Dispatches a subcommand and maps failures onto exit codes.
inline int run(const std::string& subcommand, RunConfig cfg) {
    try {
        apply_env_overrides(cfg);
        cfg.validate();
        if (subcommand == "synth") return cmd_synth(cfg);
        if (subcommand == "train") return cmd_train(cfg);
        if (subcommand == "eval") return cmd_eval(cfg);
        if (subcommand == "probe") return cmd_probe(cfg);
        if (subcommand == "compare") return cmd_compare(cfg);
        if (subcommand == "sweep") return cmd_sweep(cfg);
        log("unknown subcommand '" + subcommand + "'");
        return usage;
    } catch (const ConfigError& e) {
        log(std::string("config error: ") + e.what());
        return usage;
    } catch (const PathError& e) {
        log(e.what());
        return runtime;
    } catch (const std::exception& e) {
        log(std::string("error: ") + e.what());
        return runtime;
    }
}

}  // namespace massl::cli
