#pragma once

#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/students_t.hpp>

#include "metrics.hpp"
#include "rng.hpp"
#include "training.hpp"

namespace massl {

// ---------------------------------------------------------------------------
// Linear probe
// ---------------------------------------------------------------------------

struct ProbeOptions {
    std::size_t max_voxels = 20000;  // per level; 0 means no cap
    std::uint64_t seed = 0;
    bool heldout = false;  // fit on a random half, score on the other half
    double ridge = 1e-8;
};

struct LevelProbe {
    std::optional<double> r2;  // empty when the label plane is constant
    std::size_t voxels = 0;
    std::size_t channels = 0;
};

struct ProbeResult {
    std::vector<LevelProbe> levels;
    // Across repetitions (a single run has variance 0).
    std::vector<double> r2_mean;
    std::vector<double> r2_variance;
    std::size_t repetitions = 1;
    bool heldout = false;
};

/// Block means of binary masks (N,1,H,W) over factor x factor windows.
template <typename M>
std::vector<double> pool_labels(std::span<const M> mask, std::size_t items, std::size_t H, std::size_t W,
                                std::size_t factor) {
    if (factor == 0 || H % factor || W % factor) {
        throw ShapeError("cannot pool " + std::to_string(H) + "x" + std::to_string(W) + " by " + std::to_string(factor));
    }
    const std::size_t h = H / factor, w = W / factor;
    std::vector<double> out(items * h * w, 0.0);
    const double inv = 1.0 / static_cast<double>(factor * factor);
    for (std::size_t n = 0; n < items; ++n) {
        for (std::size_t y = 0; y < H; ++y) {
            for (std::size_t x = 0; x < W; ++x) {
                out[(n * h + y / factor) * w + x / factor] += static_cast<double>(mask[(n * H + y) * W + x]);
            }
        }
    }
    for (auto& v : out) v *= inv;
    return out;
}

/// Ordinary least squares with intercept, solved through the (jittered)
/// normal equations of the centred design. Returns R^2 = 1 - SS_res/SS_tot
/// evaluated on (eval_x, eval_y), or empty when SS_tot is zero.
inline std::optional<double> ols_r2(const Eigen::MatrixXd& fit_x, const Eigen::VectorXd& fit_y,
                                    const Eigen::MatrixXd& eval_x, const Eigen::VectorXd& eval_y, double ridge) {
    const double m = static_cast<double>(fit_x.rows());
    const Eigen::RowVectorXd x_mean = fit_x.colwise().mean();
    const double y_mean = fit_y.mean();
    const Eigen::MatrixXd xc = fit_x.rowwise() - x_mean;
    const Eigen::VectorXd yc = fit_y.array() - y_mean;
    Eigen::MatrixXd gram = (xc.transpose() * xc) / m;
    gram.diagonal().array() += ridge;
    const Eigen::VectorXd beta = gram.ldlt().solve((xc.transpose() * yc) / m);

    const double e_mean = eval_y.mean();
    const Eigen::VectorXd pred = ((eval_x.rowwise() - x_mean) * beta).array() + y_mean;
    const double ss_res = (eval_y - pred).squaredNorm();
    const double ss_tot = (eval_y.array() - e_mean).matrix().squaredNorm();
    if (ss_tot == 0.0) return std::nullopt;
    return 1.0 - ss_res / ss_tot;
}

/// Linear discriminability of encoder features. Each voxel of a level is one
/// sample whose regressors are its channel values and whose target is the
/// ground-truth mask average-pooled to that level's resolution.
///
/// features: one (N,C,h,w) tensor per level; masks: (N,1,H,W) binary.
template <typename T>
ProbeResult probe_r2(const std::vector<Tensor<T>>& features, const Tensor<T>& masks, const ProbeOptions& opt = {}) {
    if (masks.dim() != 4 || masks.extent(1) != 1) {
        throw ShapeError("probe masks must be (N,1,H,W), got " + to_string(masks.shape()));
    }
    for (T v : masks.values()) {
        if (v != T(0) && v != T(1)) throw ValidationError("probe masks must be binary");
    }
    const std::size_t N = masks.extent(0), H = masks.extent(2), W = masks.extent(3);
    ProbeResult result;
    result.heldout = opt.heldout;
    SplitMix64 rng(opt.seed);
    for (std::size_t level = 0; level < features.size(); ++level) {
        const auto& f = features[level];
        if (f.dim() != 4 || f.extent(0) != N || H % f.extent(2) || W % f.extent(3) ||
            H / f.extent(2) != W / f.extent(3)) {
            throw ShapeError("probe features " + to_string(f.shape()) + " incompatible with masks " +
                             to_string(masks.shape()));
        }
        const std::size_t C = f.extent(1), h = f.extent(2), w = f.extent(3);
        const auto labels = pool_labels<T>(masks.values(), N, H, W, H / h);

        const std::size_t total = N * h * w;
        std::vector<std::size_t> rows(total);
        std::iota(rows.begin(), rows.end(), std::size_t{0});
        if (opt.max_voxels && total > opt.max_voxels) {
            // Partial Fisher-Yates: a uniform subset of max_voxels rows.
            for (std::size_t i = 0; i < opt.max_voxels; ++i) {
                const auto j = i + static_cast<std::size_t>(rng.below(total - i));
                std::swap(rows[i], rows[j]);
            }
            rows.resize(opt.max_voxels);
        }
        Eigen::MatrixXd x(rows.size(), C);
        Eigen::VectorXd y(rows.size());
        const auto fv = f.values();
        for (std::size_t r = 0; r < rows.size(); ++r) {
            const std::size_t v = rows[r];
            const std::size_t n = v / (h * w), pix = v % (h * w);
            for (std::size_t c = 0; c < C; ++c) x(r, c) = static_cast<double>(fv[(n * C + c) * h * w + pix]);
            y(r) = labels[v];
        }

        LevelProbe lp;
        lp.voxels = rows.size();
        lp.channels = C;
        if (opt.heldout) {
            std::vector<Eigen::Index> order(rows.size());
            std::iota(order.begin(), order.end(), Eigen::Index{0});
            shuffle(order, rng);
            const auto half = static_cast<Eigen::Index>(order.size() / 2);
            if (half < 1) throw ValidationError("held-out probe needs at least two voxels");
            const std::vector<Eigen::Index> fit_idx(order.begin(), order.begin() + half);
            const std::vector<Eigen::Index> eval_idx(order.begin() + half, order.end());
            lp.r2 = ols_r2(x(fit_idx, Eigen::all), y(fit_idx), x(eval_idx, Eigen::all), y(eval_idx), opt.ridge);
        } else {
            lp.r2 = ols_r2(x, y, x, y, opt.ridge);
        }
        result.levels.push_back(lp);
        const double v = lp.r2.value_or(std::numeric_limits<double>::quiet_NaN());
        result.r2_mean.push_back(v);
        result.r2_variance.push_back(lp.r2 ? 0.0 : std::numeric_limits<double>::quiet_NaN());
    }
    return result;
}

/// Repeats the probe with independent subsample seeds and reports the mean and
/// (population) variance of each level's R^2 over the defined repetitions.
template <typename T>
ProbeResult probe_r2_repeated(const std::vector<Tensor<T>>& features, const Tensor<T>& masks, std::size_t reps,
                              const ProbeOptions& opt = {}) {
    if (reps == 0) throw ConfigError("probe repetitions must be >= 1", "probe_repeats");
    ProbeResult first;
    std::vector<std::vector<double>> values(features.size());
    for (std::size_t r = 0; r < reps; ++r) {
        ProbeOptions o = opt;
        o.seed = derive_seed(opt.seed, r);
        auto pr = probe_r2(features, masks, o);
        for (std::size_t l = 0; l < pr.levels.size(); ++l) {
            if (pr.levels[l].r2) values[l].push_back(*pr.levels[l].r2);
        }
        if (r == 0) first = std::move(pr);
    }
    first.repetitions = reps;
    for (std::size_t l = 0; l < values.size(); ++l) {
        const auto& v = values[l];
        if (v.empty()) {
            first.r2_mean[l] = first.r2_variance[l] = std::numeric_limits<double>::quiet_NaN();
            continue;
        }
        double mean = 0;
        for (double a : v) mean += a;
        mean /= static_cast<double>(v.size());
        double var = 0;
        for (double a : v) var += (a - mean) * (a - mean);
        first.r2_mean[l] = mean;
        first.r2_variance[l] = var / static_cast<double>(v.size());
    }
    return first;
}

inline constexpr std::string_view kProbeHeader = "level,channels,voxels,r2,r2_mean,r2_variance,repetitions,mode";

inline void write_probe_csv(const std::string& path, const ProbeResult& r) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError(FormatError::Kind::io, "cannot write '" + path + "'");
    out << kProbeHeader << '\n';
    for (std::size_t l = 0; l < r.levels.size(); ++l) {
        const auto& lp = r.levels[l];
        out << l << ',' << lp.channels << ',' << lp.voxels << ','
            << (lp.r2 ? format_metric(*lp.r2) : std::string("undefined")) << ',' << format_metric(r.r2_mean[l]) << ','
            << format_metric(r.r2_variance[l]) << ',' << r.repetitions << ',' << (r.heldout ? "heldout" : "in_sample")
            << '\n';
    }
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

struct TTestResult {
    double t = 0;
    double dof = 0;
    double p = 1;
};

/// Welch's unequal-variance two-sample t-test, two-sided.
///
/// When both sample variances are zero the statistic is undefined; the
/// convention is p = 1 for equal means and p = 0 otherwise.
inline TTestResult welch_t_test(std::span<const double> a, std::span<const double> b) {
    if (a.size() < 2 || b.size() < 2) throw ValidationError("t-test needs at least two values per sample");
    auto moments = [](std::span<const double> v) {
        double m = 0;
        for (double x : v) m += x;
        m /= static_cast<double>(v.size());
        double s = 0;
        for (double x : v) s += (x - m) * (x - m);
        return std::pair{m, s / static_cast<double>(v.size() - 1)};
    };
    const auto [ma, va] = moments(a);
    const auto [mb, vb] = moments(b);
    const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
    const double sa = va / na, sb = vb / nb;
    TTestResult r;
    if (sa + sb == 0.0) {
        r.t = ma == mb ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), ma - mb);
        r.dof = na + nb - 2;
        r.p = ma == mb ? 1.0 : 0.0;
        return r;
    }
    r.t = (ma - mb) / std::sqrt(sa + sb);
    r.dof = (sa + sb) * (sa + sb) / (sa * sa / (na - 1) + sb * sb / (nb - 1));
    if (r.t == 0.0) {
        r.p = 1.0;
        return r;
    }
    const boost::math::students_t dist(r.dof);
    r.p = std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::fabs(r.t))));
    return r;
}

inline double t_test_two_sided(std::span<const double> a, std::span<const double> b) { return welch_t_test(a, b).p; }

struct StrategyRuns {
    std::string name;
    std::vector<double> scores;  // one per fold / seed
};

struct ComparisonRow {
    std::string name;
    double mean = 0;
    double stddev = 0;  // sample standard deviation
    std::size_t runs = 0;
};

struct ComparisonReport {
    std::vector<ComparisonRow> rows;
    std::vector<std::vector<double>> p_values;  // symmetric, 1 on the diagonal
};

inline ComparisonReport compare_strategies(const std::vector<StrategyRuns>& runs) {
    if (runs.empty()) throw ValidationError("compare_strategies needs at least one strategy");
    const std::size_t folds = runs.front().scores.size();
    for (const auto& r : runs) {
        if (r.scores.size() != folds) {
            throw ValidationError("strategy '" + r.name + "' has " + std::to_string(r.scores.size()) +
                                  " runs, expected " + std::to_string(folds));
        }
    }
    if (folds < 2) throw ValidationError("compare_strategies needs at least two runs per strategy");

    ComparisonReport rep;
    for (const auto& r : runs) {
        ComparisonRow row;
        row.name = r.name;
        row.runs = folds;
        for (double v : r.scores) row.mean += v;
        row.mean /= static_cast<double>(folds);
        double ss = 0;
        for (double v : r.scores) ss += (v - row.mean) * (v - row.mean);
        row.stddev = std::sqrt(ss / static_cast<double>(folds - 1));
        rep.rows.push_back(row);
    }
    const std::size_t k = runs.size();
    rep.p_values.assign(k, std::vector<double>(k, 1.0));
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = i + 1; j < k; ++j) {
            const double p = t_test_two_sided(runs[i].scores, runs[j].scores);
            rep.p_values[i][j] = rep.p_values[j][i] = p;
        }
    }
    return rep;
}

/// strategy,mean_dice,std_dice,runs,p_vs_<strategy>...
inline void write_comparison_csv(const std::string& path, const ComparisonReport& rep) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError(FormatError::Kind::io, "cannot write '" + path + "'");
    out << "strategy,mean_dice,std_dice,runs";
    for (const auto& r : rep.rows) out << ",p_vs_" << r.name;
    out << '\n';
    for (std::size_t i = 0; i < rep.rows.size(); ++i) {
        const auto& r = rep.rows[i];
        out << r.name << ',' << format_metric(r.mean) << ',' << format_metric(r.stddev) << ',' << r.runs;
        for (double p : rep.p_values[i]) out << ',' << format_metric(p);
        out << '\n';
    }
}

}  // namespace massl
