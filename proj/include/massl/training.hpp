#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include "augment.hpp"
#include "losses.hpp"
#include "metrics.hpp"
#include "optim.hpp"

namespace massl {

enum class Strategy { cnn, pretrain_dec, pretrain_cnn, mssl_joint, mssl_alter, massl_joint, massl_alter };

inline constexpr Strategy kAllStrategies[] = {Strategy::cnn,        Strategy::pretrain_dec, Strategy::pretrain_cnn,
                                              Strategy::mssl_joint, Strategy::mssl_alter,   Strategy::massl_joint,
                                              Strategy::massl_alter};

inline const char* to_string(Strategy s) {
    switch (s) {
        case Strategy::cnn: return "cnn";
        case Strategy::pretrain_dec: return "pretrain_dec";
        case Strategy::pretrain_cnn: return "pretrain_cnn";
        case Strategy::mssl_joint: return "mssl_joint";
        case Strategy::mssl_alter: return "mssl_alter";
        case Strategy::massl_joint: return "massl_joint";
        case Strategy::massl_alter: return "massl_alter";
    }
    return "?";
}

inline Strategy parse_strategy(std::string_view s) {
    for (auto k : kAllStrategies) {
        if (s == to_string(k)) return k;
    }
    throw ConfigError("unknown strategy '" + std::string(s) + "'", "strategy");
}

inline bool is_joint(Strategy s) { return s == Strategy::mssl_joint || s == Strategy::massl_joint; }
inline bool is_alternating(Strategy s) { return s == Strategy::mssl_alter || s == Strategy::massl_alter; }
inline bool uses_attention(Strategy s) { return s == Strategy::massl_joint || s == Strategy::massl_alter; }
inline bool is_pretrain(Strategy s) { return s == Strategy::pretrain_dec || s == Strategy::pretrain_cnn; }
inline bool needs_unlabeled(Strategy s) { return s != Strategy::cnn; }
inline std::size_t recon_channels_for(Strategy s) { return uses_attention(s) ? 2 : 1; }

struct TrainConfig {
    Strategy strategy = Strategy::massl_alter;
    double gamma = 0.7;  // joint strategies only
    double lr_seg = 0.01;
    double lr_recon = 0.001;
    std::size_t epochs = 60;
    std::size_t pretrain_epochs = 20;
    std::size_t batch_size = 4;
    std::uint64_t seed = 0;
    bool augment = true;
    AugmentParams augmentation;
    AdamParams adam;  // lr is overridden per optimizer

    void validate() const {
        check_gamma(gamma);
        if (!(lr_seg > 0)) throw ConfigError("lr_seg must be positive", "lr_seg");
        if (!(lr_recon > 0)) throw ConfigError("lr_recon must be positive", "lr_recon");
        if (batch_size == 0) throw ConfigError("batch_size must be >= 1", "batch_size");
        if (is_joint(strategy) && batch_size % 2) {
            throw ConfigError("joint training needs an even batch_size, got " + std::to_string(batch_size),
                              "batch_size");
        }
        if (augmentation.scale_lo <= 0 || augmentation.scale_hi < augmentation.scale_lo) {
            throw ConfigError("scale range must satisfy 0 < scale_lo <= scale_hi", "scale_lo");
        }
        if (augmentation.flip_prob < 0 || augmentation.flip_prob > 1) {
            throw ConfigError("flip_prob must lie in [0,1]", "flip_prob");
        }
        if (augmentation.max_rotation_deg < 0) throw ConfigError("rotation_deg must be >= 0", "rotation_deg");
    }
};

struct EpochLog {
    std::size_t epoch = 0;  // 1-based within the phase
    std::string phase;      // "pretrain" or "train"
    LossReport loss;
    double val_dice = std::numeric_limits<double>::quiet_NaN();
};

template <typename T>
struct TrainResult {
    Model<T> model;
    std::vector<EpochLog> log;
    bool diverged = false;
    std::string divergence;
};

using EpochCallback = std::function<void(const EpochLog&)>;

enum class BatchKind { labeled, unlabeled, joint };

/// Observer of single optimization steps; called with after=false right
/// before a step and after=true right after it.
template <typename T>
using StepHook = std::function<void(BatchKind, bool after, const Model<T>&)>;

// ---------------------------------------------------------------------------
// Single optimization steps. Each clears every model gradient, builds one
// graph, back-propagates, and steps the given optimizer.
// ---------------------------------------------------------------------------

template <typename T>
double segmentation_step(Model<T>& model, Adam<T>& opt, const std::vector<const Sample*>& batch) {
    model.clear_grads();
    const auto x = stack_images<T>(batch);
    const auto y = stack_masks<T>(batch);
    const auto loss = dice_loss(model.segment(model.encode(x)), y);
    backward(loss);
    opt.step();
    return static_cast<double>(loss.item());
}

/// Reconstruction loss of an unlabeled batch. With attention, the current
/// segmentation output (gradient-blocked) splits the targets.
template <typename T>
struct ReconOutcome {
    Tensor<T> loss;
    LossReport report;
};

template <typename T>
ReconOutcome<T> reconstruction_loss(const Model<T>& model, const Tensor<T>& x, bool attention) {
    const auto feats = model.encode(x);
    ReconOutcome<T> r;
    const auto recon = model.reconstruct(feats);
    if (attention) {
        const auto masks = make_attention_masks(model.segment(feats));
        const auto l2 = attention_recon_loss(x, slice_channels(recon, 0, 1), slice_channels(recon, 1, 1), masks);
        r.loss = l2.value;
        r.report.l2_fg_term = l2.fg_term;
        r.report.l2_bg_term = l2.bg_term;
        r.report.fg_weight = l2.fg_weight;
        r.report.bg_weight = l2.bg_weight;
    } else {
        r.loss = plain_recon_loss(x, recon);
    }
    r.report.l2 = static_cast<double>(r.loss.item());
    return r;
}

template <typename T>
LossReport reconstruction_step(Model<T>& model, Adam<T>& opt, const std::vector<const Sample*>& batch,
                               bool attention) {
    model.clear_grads();
    auto r = reconstruction_loss(model, stack_images<T>(batch), attention);
    backward(r.loss);
    opt.step();
    r.report.combined = r.report.l2;
    return r.report;
}

template <typename T>
LossReport joint_step(Model<T>& model, Adam<T>& opt, const std::vector<const Sample*>& labeled,
                      const std::vector<const Sample*>& unlabeled, double gamma, bool attention) {
    model.clear_grads();
    const auto l1 = dice_loss(model.segment(model.encode(stack_images<T>(labeled))), stack_masks<T>(labeled));
    auto r = reconstruction_loss(model, stack_images<T>(unlabeled), attention);
    const auto total = joint_loss(l1, r.loss, gamma);
    backward(total);
    opt.step();
    r.report.l1 = static_cast<double>(l1.item());
    r.report.combined = static_cast<double>(total.item());
    return r.report;
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::vector<std::size_t>> chunk(const std::vector<std::size_t>& v, std::size_t size) {
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < v.size(); i += size) {
        out.emplace_back(v.begin() + static_cast<long>(i), v.begin() + static_cast<long>(std::min(v.size(), i + size)));
    }
    return out;
}

struct Running {
    double sum = 0;
    std::size_t n = 0;
    void add(double v) {
        if (!std::isnan(v)) {
            sum += v;
            ++n;
        }
    }
    double mean() const { return n ? sum / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN(); }
};

}  // namespace detail

/// Runs one strategy end to end. Sampling, augmentation and initialization
/// are all derived from cfg.seed, so equal inputs give bit-identical models.
template <typename T>
class Trainer {
  public:
    Trainer(const NetworkConfig& net, const TrainConfig& cfg)
        : cfg_(cfg), model_(adjusted(net, cfg), derive_seed(cfg.seed, 1)), rng_(derive_seed(cfg.seed, 2)) {
        cfg_.validate();
    }

    Model<T>& model() { return model_; }
    SplitMix64& rng() { return rng_; }
    void set_step_hook(StepHook<T> hook) { hook_ = std::move(hook); }

    Adam<T> make_optimizer(std::initializer_list<ParamGroup> groups, double lr) const {
        std::vector<Tensor<T>> params;
        for (const auto& p : model_.parameters()) {
            for (auto g : groups) {
                if (p.group == g) params.push_back(p.tensor);
            }
        }
        AdamParams hp = cfg_.adam;
        hp.lr = lr;
        return Adam<T>(std::move(params), hp);
    }

    /// Copies (augmented when enabled) of the listed set positions.
    std::vector<Sample> fetch(const SampleSet& set, const std::vector<std::size_t>& positions) {
        std::vector<Sample> out;
        out.reserve(positions.size());
        for (auto p : positions) {
            const Sample& s = set.at(p);
            out.push_back(cfg_.augment ? augment(s, cfg_.augmentation, rng_) : s);
        }
        return out;
    }

    std::vector<std::size_t> permutation(std::size_t n) {
        std::vector<std::size_t> p(n);
        std::iota(p.begin(), p.end(), std::size_t{0});
        shuffle(p, rng_);
        return p;
    }

    TrainResult<T> run(const SampleSet& labeled, const SampleSet& unlabeled, const SampleSet& validation,
                       const EpochCallback& on_epoch = {}) {
        if (labeled.empty()) throw ConfigError("labeled set is empty", "n_labeled");
        if (needs_unlabeled(cfg_.strategy) && unlabeled.empty()) {
            throw ConfigError(std::string("strategy ") + to_string(cfg_.strategy) + " needs unlabeled data",
                              "n_unlabeled");
        }
        TrainResult<T> result{model_, {}, false, {}};
        auto record = [&](EpochLog e) -> bool {
            e.val_dice = validation.empty() ? std::numeric_limits<double>::quiet_NaN() : mean_dice(validation);
            if (on_epoch) on_epoch(e);
            result.log.push_back(e);
            if (!finite_report(e.loss)) {
                result.diverged = true;
                result.divergence = "non-finite loss in " + e.phase + " epoch " + std::to_string(e.epoch);
                return false;
            }
            return true;
        };

        switch (cfg_.strategy) {
            case Strategy::cnn: supervised(labeled, {ParamGroup::encoder, ParamGroup::seg_decoder}, record); break;
            case Strategy::pretrain_dec:
            case Strategy::pretrain_cnn: {
                if (!pretrain(unlabeled, record)) break;
                if (cfg_.strategy == Strategy::pretrain_dec) {
                    supervised(labeled, {ParamGroup::seg_decoder}, record);
                } else {
                    supervised(labeled, {ParamGroup::encoder, ParamGroup::seg_decoder}, record);
                }
                break;
            }
            case Strategy::mssl_joint:
            case Strategy::massl_joint: joint(labeled, unlabeled, record); break;
            case Strategy::mssl_alter:
            case Strategy::massl_alter: alternating(labeled, unlabeled, record); break;
        }
        return result;
    }

  private:
    static NetworkConfig adjusted(NetworkConfig net, const TrainConfig& cfg) {
        net.recon_channels = recon_channels_for(cfg.strategy);
        return net;
    }

    static bool finite_report(const LossReport& r) {
        // NaN marks "not applicable"; the epoch loops map any non-finite step loss to +inf.
        return !std::isinf(r.l1) && !std::isinf(r.l2) && !std::isinf(r.combined);
    }

    double mean_dice(const SampleSet& set) const {
        const auto d = evaluate_dice(model_, set);
        return std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size());
    }

    template <typename Record>
    bool supervised(const SampleSet& labeled, std::initializer_list<ParamGroup> groups, Record& record) {
        auto opt = make_optimizer(groups, cfg_.lr_seg);
        const std::size_t b = std::min(cfg_.batch_size, labeled.size());
        for (std::size_t e = 1; e <= cfg_.epochs; ++e) {
            detail::Running l1;
            bool bad = false;
            for (const auto& chunk : detail::chunk(permutation(labeled.size()), b)) {
                const auto batch = fetch(labeled, chunk);
                notify(BatchKind::labeled, false);
                const double v = segmentation_step(model_, opt, pointers(batch));
                notify(BatchKind::labeled, true);
                bad = bad || !std::isfinite(v);
                l1.add(v);
            }
            EpochLog log{e, "train", {}, {}};
            log.loss.l1 = bad ? std::numeric_limits<double>::infinity() : l1.mean();
            log.loss.combined = log.loss.l1;
            if (!record(log)) return false;
        }
        return true;
    }

    template <typename Record>
    bool pretrain(const SampleSet& unlabeled, Record& record) {
        auto opt = make_optimizer({ParamGroup::encoder, ParamGroup::recon_decoder}, cfg_.lr_recon);
        const std::size_t b = std::min(cfg_.batch_size, unlabeled.size());
        for (std::size_t e = 1; e <= cfg_.pretrain_epochs; ++e) {
            detail::Running l2;
            bool bad = false;
            for (const auto& chunk : detail::chunk(permutation(unlabeled.size()), b)) {
                const auto batch = fetch(unlabeled, chunk);
                notify(BatchKind::unlabeled, false);
                const auto r = reconstruction_step(model_, opt, pointers(batch), false);
                notify(BatchKind::unlabeled, true);
                bad = bad || !std::isfinite(r.l2);
                l2.add(r.l2);
            }
            EpochLog log{e, "pretrain", {}, {}};
            log.loss.l2 = bad ? std::numeric_limits<double>::infinity() : l2.mean();
            log.loss.combined = log.loss.l2;
            if (!record(log)) return false;
        }
        return true;
    }

    template <typename Record>
    bool alternating(const SampleSet& labeled, const SampleSet& unlabeled, Record& record) {
        const bool attention = uses_attention(cfg_.strategy);
        auto seg_opt = make_optimizer({ParamGroup::encoder, ParamGroup::seg_decoder}, cfg_.lr_seg);
        auto rec_opt = make_optimizer({ParamGroup::encoder, ParamGroup::recon_decoder}, cfg_.lr_recon);
        const std::size_t k = std::min(labeled.size(), unlabeled.size());
        const std::size_t b = std::min(cfg_.batch_size, k);
        for (std::size_t e = 1; e <= cfg_.epochs; ++e) {
            auto lp = permutation(labeled.size());
            auto up = permutation(unlabeled.size());
            lp.resize(k);
            up.resize(k);
            const auto lchunks = detail::chunk(lp, b);
            const auto uchunks = detail::chunk(up, b);
            detail::Running l1, l2, fg, bg, fw, bw;
            bool bad = false;
            for (std::size_t i = 0; i < lchunks.size(); ++i) {
                const auto lb = fetch(labeled, lchunks[i]);
                notify(BatchKind::labeled, false);
                const double v = segmentation_step(model_, seg_opt, pointers(lb));
                notify(BatchKind::labeled, true);
                bad = bad || !std::isfinite(v);
                l1.add(v);
                const auto ub = fetch(unlabeled, uchunks[i]);
                notify(BatchKind::unlabeled, false);
                const auto r = reconstruction_step(model_, rec_opt, pointers(ub), attention);
                notify(BatchKind::unlabeled, true);
                bad = bad || !std::isfinite(r.l2);
                l2.add(r.l2);
                fg.add(r.l2_fg_term);
                bg.add(r.l2_bg_term);
                fw.add(r.fg_weight);
                bw.add(r.bg_weight);
            }
            EpochLog log{e, "train", {}, {}};
            log.loss.l1 = bad ? std::numeric_limits<double>::infinity() : l1.mean();
            log.loss.l2 = l2.mean();
            log.loss.l2_fg_term = fg.mean();
            log.loss.l2_bg_term = bg.mean();
            log.loss.fg_weight = fw.mean();
            log.loss.bg_weight = bw.mean();
            if (!record(log)) return false;
        }
        return true;
    }

    template <typename Record>
    bool joint(const SampleSet& labeled, const SampleSet& unlabeled, Record& record) {
        const bool attention = uses_attention(cfg_.strategy);
        auto opt = make_optimizer({ParamGroup::encoder, ParamGroup::seg_decoder, ParamGroup::recon_decoder},
                                  cfg_.lr_seg);
        const std::size_t k = std::min(labeled.size(), unlabeled.size());
        const std::size_t half = std::min(cfg_.batch_size / 2, k);
        for (std::size_t e = 1; e <= cfg_.epochs; ++e) {
            auto lp = permutation(labeled.size());
            auto up = permutation(unlabeled.size());
            lp.resize(k);
            up.resize(k);
            const auto lchunks = detail::chunk(lp, half);
            const auto uchunks = detail::chunk(up, half);
            detail::Running l1, l2, total, fg, bg, fw, bw;
            bool bad = false;
            for (std::size_t i = 0; i < lchunks.size(); ++i) {
                const auto lb = fetch(labeled, lchunks[i]);
                const auto ub = fetch(unlabeled, uchunks[i]);
                notify(BatchKind::joint, false);
                const auto r = joint_step(model_, opt, pointers(lb), pointers(ub), cfg_.gamma, attention);
                notify(BatchKind::joint, true);
                bad = bad || !std::isfinite(r.combined);
                l1.add(r.l1);
                l2.add(r.l2);
                total.add(r.combined);
                fg.add(r.l2_fg_term);
                bg.add(r.l2_bg_term);
                fw.add(r.fg_weight);
                bw.add(r.bg_weight);
            }
            EpochLog log{e, "train", {}, {}};
            log.loss.l1 = l1.mean();
            log.loss.l2 = l2.mean();
            log.loss.combined = bad ? std::numeric_limits<double>::infinity() : total.mean();
            log.loss.l2_fg_term = fg.mean();
            log.loss.l2_bg_term = bg.mean();
            log.loss.fg_weight = fw.mean();
            log.loss.bg_weight = bw.mean();
            if (!record(log)) return false;
        }
        return true;
    }

    void notify(BatchKind kind, bool after) const {
        if (hook_) hook_(kind, after, model_);
    }

    static std::vector<const Sample*> pointers(const std::vector<Sample>& v) {
        std::vector<const Sample*> out;
        for (const auto& s : v) out.push_back(&s);
        return out;
    }

    TrainConfig cfg_;
    Model<T> model_;
    SplitMix64 rng_;
    StepHook<T> hook_;
};

template <typename T>
TrainResult<T> run_strategy(const NetworkConfig& net, const TrainConfig& cfg, const SampleSet& labeled,
                            const SampleSet& unlabeled, const SampleSet& validation, const EpochCallback& on_epoch = {}) {
    Trainer<T> trainer(net, cfg);
    return trainer.run(labeled, unlabeled, validation, on_epoch);
}

// ---------------------------------------------------------------------------
// Metrics file: epoch,phase,strategy,l1,l2,val_dice
// ---------------------------------------------------------------------------

inline std::string format_metric(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

inline constexpr std::string_view kMetricsHeader = "epoch,phase,strategy,l1,l2,val_dice";

/// Appends one row per epoch; writes the header when the file is new or empty.
class MetricsWriter {
  public:
    MetricsWriter(const std::string& path, Strategy strategy) : strategy_(strategy) {
        std::ifstream probe(path, std::ios::binary | std::ios::ate);
        const bool fresh = !probe || probe.tellg() == 0;
        out_.open(path, std::ios::binary | std::ios::app);
        if (!out_) throw FormatError(FormatError::Kind::io, "cannot open metrics file '" + path + "'");
        if (fresh) out_ << kMetricsHeader << '\n';
    }

    void append(const EpochLog& e) {
        out_ << e.epoch << ',' << e.phase << ',' << to_string(strategy_) << ',' << format_metric(e.loss.l1) << ','
             << format_metric(e.loss.l2) << ',' << format_metric(e.val_dice) << '\n';
        out_.flush();
    }

  private:
    Strategy strategy_;
    std::ofstream out_;
};

}  // namespace massl
