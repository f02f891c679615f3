#pragma once

// Residual evaluation: debiasing, CUSUM tests, ROC/AUC and consistency-based
// fault isolation.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "greybox/dm.hpp"

namespace greybox {

inline double median(std::vector<double> v) {
    if (v.empty()) throw std::invalid_argument("median of an empty sample");
    const auto mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + mid, v.end());
    double hi = v[mid];
    if (v.size() % 2 == 1) return hi;
    double lo = *std::max_element(v.begin(), v.begin() + mid);
    return 0.5 * (lo + hi);
}

/// r'_t = r_t - median(r_0 .. r_{window-1})
inline std::vector<double> debias(std::span<const double> r, std::size_t window) {
    if (r.empty()) throw std::invalid_argument("cannot debias an empty series");
    if (window == 0 || window > r.size()) throw std::invalid_argument("debias window must lie in [1, length]");
    const double m = median(std::vector<double>(r.begin(), r.begin() + window));
    std::vector<double> out(r.size());
    for (std::size_t i = 0; i < r.size(); ++i) out[i] = r[i] - m;
    return out;
}

enum class Direction { positive, negative };

/// T_t = max(0, T_{t-1} + s r_t - nu) with T_{-1} = 0, s = +1 or -1.
inline std::vector<double> cusum(std::span<const double> r, double nu, Direction dir) {
    if (nu < 0.0) throw std::invalid_argument("CUSUM drift must be non-negative");
    std::vector<double> out(r.size());
    double T = 0.0;
    const double s = dir == Direction::positive ? 1.0 : -1.0;
    for (std::size_t t = 0; t < r.size(); ++t) {
        T = std::max(0.0, T + s * r[t] - nu);
        out[t] = T;
    }
    return out;
}

/// Streaming one-sided CUSUM. The alarm latches once T exceeds J.
class CusumTest {
public:
    CusumTest(double drift, double threshold, Direction dir) : drift_(drift), threshold_(threshold), dir_(dir) {
        if (drift < 0.0) throw std::invalid_argument("CUSUM drift must be non-negative");
        if (threshold < 0.0) throw std::invalid_argument("CUSUM threshold must be non-negative");
    }

    /// Feeds one residual sample; returns whether T_t > J now.
    bool update(double r) {
        const double s = dir_ == Direction::positive ? r : -r;
        state_ = std::max(0.0, state_ + s - drift_);
        const bool over = state_ > threshold_;
        if (over && !alarm_time_) alarm_time_ = samples_;
        ++samples_;
        return over;
    }

    void reset() {
        state_ = 0.0;
        samples_ = 0;
        alarm_time_.reset();
    }

    double state() const { return state_; }
    double drift() const { return drift_; }
    double threshold() const { return threshold_; }
    Direction direction() const { return dir_; }
    bool alarmed() const { return alarm_time_.has_value(); }
    std::optional<std::size_t> alarm_time() const { return alarm_time_; }

private:
    double drift_;
    double threshold_;
    Direction dir_;
    double state_ = 0.0;
    std::size_t samples_ = 0;
    std::optional<std::size_t> alarm_time_;
};

struct CusumTuningOptions {
    double margin = 3.0;
    double safety = 1.5;
    double min_drift = 1e-6;
    double min_threshold = 1e-6;
    double min_threshold_std = 1.0;  // J >= this many nominal standard deviations
    std::size_t window = 100;  // nominal data must hold at least 10 windows
};

struct CusumTuning {
    double drift_positive = 0.0;
    double drift_negative = 0.0;
    double threshold = 0.0;
    double held_out_alarm_rate = 0.0;  // fraction of held-out samples with T > J on either side
};

/// nu = mean|r| + margin * std(r) on the first half of the nominal data,
/// J = safety * max CUSUM value there, floored at min_threshold_std * std(r)
/// so a silent fit half does not leave a vanishing threshold. The second half
/// is the held-out check.
inline CusumTuning tune_cusum(std::span<const double> nominal, const CusumTuningOptions& opt = {}) {
    if (nominal.size() < 10 * opt.window || nominal.size() < 2) {
        throw std::invalid_argument("insufficient nominal data for CUSUM tuning: " + std::to_string(nominal.size()) +
                                    " samples, need " + std::to_string(10 * opt.window));
    }
    const auto half = nominal.size() / 2;
    auto fit = nominal.subspan(0, half);
    auto held = nominal.subspan(half);

    double mean_abs = 0.0, mean = 0.0;
    for (auto v : fit) {
        mean_abs += std::abs(v);
        mean += v;
    }
    mean_abs /= static_cast<double>(fit.size());
    mean /= static_cast<double>(fit.size());
    double var = 0.0;
    for (auto v : fit) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / static_cast<double>(fit.size()));

    CusumTuning out;
    const double nu = std::max(opt.min_drift, mean_abs + opt.margin * sd);
    out.drift_positive = nu;
    out.drift_negative = nu;
    double peak = 0.0;
    for (auto dir : {Direction::positive, Direction::negative}) {
        auto T = cusum(fit, nu, dir);
        for (auto v : T) peak = std::max(peak, v);
    }
    out.threshold = std::max({opt.min_threshold, opt.min_threshold_std * sd, opt.safety * peak});

    std::size_t alarms = 0;
    auto tp = cusum(held, out.drift_positive, Direction::positive);
    auto tn = cusum(held, out.drift_negative, Direction::negative);
    for (std::size_t t = 0; t < held.size(); ++t) alarms += (tp[t] > out.threshold || tn[t] > out.threshold);
    out.held_out_alarm_rate = static_cast<double>(alarms) / static_cast<double>(held.size());
    return out;
}

/// First sample index (at or after `from`) where either side exceeds J.
inline std::optional<std::size_t> first_alarm(std::span<const double> r, const CusumTuning& tuning,
                                              std::size_t from = 0) {
    CusumTest pos(tuning.drift_positive, tuning.threshold, Direction::positive);
    CusumTest neg(tuning.drift_negative, tuning.threshold, Direction::negative);
    for (std::size_t t = 0; t < r.size(); ++t) {
        bool a = pos.update(r[t]);
        bool b = neg.update(r[t]);
        if ((a || b) && t >= from) return t;
    }
    return std::nullopt;
}

struct AucResult {
    double auc = 0.5;         // P(faulty > nominal) + P(equal) / 2
    double normalized = 0.0;  // 2 (auc - 0.5), test r > J
    double mirrored = 0.0;    // normalized score of the test -r > J

    /// Best of the two one-sided tests.
    double separation() const { return std::abs(normalized); }
};

/// Mann-Whitney rank statistic with tied ranks averaged.
inline AucResult roc_auc(std::span<const double> nominal, std::span<const double> faulty) {
    if (nominal.empty() || faulty.empty()) throw std::invalid_argument("AUC needs two non-empty samples");
    struct Item {
        double value;
        bool faulty;
    };
    std::vector<Item> all;
    all.reserve(nominal.size() + faulty.size());
    for (auto v : nominal) all.push_back({v, false});
    for (auto v : faulty) all.push_back({v, true});
    std::sort(all.begin(), all.end(), [](const Item& a, const Item& b) { return a.value < b.value; });
    double rank_sum = 0.0;
    for (std::size_t i = 0; i < all.size();) {
        std::size_t j = i;
        while (j < all.size() && all[j].value == all[i].value) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // ranks i+1 .. j
        for (std::size_t k = i; k < j; ++k) {
            if (all[k].faulty) rank_sum += avg_rank;
        }
        i = j;
    }
    const double nf = static_cast<double>(faulty.size()), nn = static_cast<double>(nominal.size());
    AucResult out;
    out.auc = (rank_sum - nf * (nf + 1.0) / 2.0) / (nf * nn);
    out.normalized = 2.0 * (out.auc - 0.5);
    out.mirrored = -out.normalized;
    return out;
}

struct AucRow {
    double magnitude = 0.0;
    AucResult auc;
};

/// Default sweep: 21 points over [-0.2, 0.2].
inline std::vector<double> fault_magnitude_grid(double limit = 0.2, std::size_t points = 21) {
    std::vector<double> out;
    for (std::size_t i = 0; i < points; ++i) {
        out.push_back(points == 1 ? 0.0 : -limit + 2.0 * limit * static_cast<double>(i) / (points - 1.0));
    }
    return out;
}

/// `faulty_residual(f)` simulates the plant with magnitude f, runs the residual
/// generator and returns the post-onset residual samples.
inline std::vector<AucRow> auc_vs_magnitude(std::span<const double> nominal_residual,
                                            const std::function<std::vector<double>(double)>& faulty_residual,
                                            const std::vector<double>& magnitudes) {
    std::vector<AucRow> out;
    for (auto f : magnitudes) out.push_back({f, roc_auc(nominal_residual, faulty_residual(f))});
    return out;
}

struct Hypothesis {
    std::string fault;  // "no-fault" for an empty alarm pattern
    std::size_t column = 0;
    std::size_t unexplained = 0;  // sensitive residuals that did not alarm
    std::size_t weight = 0;       // residuals sensitive to the fault
};

/// Faults whose signature covers every alarmed residual, fewest unexplained
/// non-alarms first, then lighter columns, then column order.
inline std::vector<Hypothesis> diagnose(const std::vector<bool>& pattern, const FaultMatrix& sig) {
    if (pattern.size() != sig.rows()) {
        throw std::invalid_argument("alarm pattern has " + std::to_string(pattern.size()) +
                                    " entries, signature matrix has " + std::to_string(sig.rows()) + " residuals");
    }
    if (std::none_of(pattern.begin(), pattern.end(), [](bool b) { return b; })) {
        return {{"no-fault", 0, 0, 0}};
    }
    std::vector<Hypothesis> out;
    for (std::size_t c = 0; c < sig.cols(); ++c) {
        bool covers = true;
        Hypothesis h{sig.column_labels[c], c, 0, 0};
        for (std::size_t r = 0; r < sig.rows(); ++r) {
            if (pattern[r] && !sig(r, c)) covers = false;
            if (sig(r, c)) {
                ++h.weight;
                if (!pattern[r]) ++h.unexplained;
            }
        }
        if (covers) out.push_back(h);
    }
    std::sort(out.begin(), out.end(), [](const Hypothesis& a, const Hypothesis& b) {
        if (a.unexplained != b.unexplained) return a.unexplained < b.unexplained;
        if (a.weight != b.weight) return a.weight < b.weight;
        return a.column < b.column;
    });
    return out;
}

}  // namespace greybox
