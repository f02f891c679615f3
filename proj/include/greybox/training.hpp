#pragma once

// Backpropagation through time, Adam, the epoch loop and ensembles.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "greybox/rnn.hpp"

namespace greybox {

class TrainingError : public std::runtime_error {
public:
    TrainingError(const std::string& what, std::size_t epoch)
        : std::runtime_error(what + " in epoch " + std::to_string(epoch)), epoch_(epoch) {}

    std::size_t epoch() const noexcept { return epoch_; }

private:
    std::size_t epoch_;
};

struct TrainConfig {
    std::size_t epochs = 2000;
    double learning_rate = 5e-4;
    double decay = 0.97;
    std::size_t decay_every = 10;
    std::size_t batch_length = 600;
    std::size_t batch_count = 0;  // 0: every batch supplied
    std::size_t truncation = 0;   // 0: unroll the full batch
    bool shuffle = false;
    std::uint64_t seed = 0;
    std::vector<std::size_t> hidden{256, 256};
    std::size_t report_every = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    void validate() const {
        if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
        if (!(decay > 0.0 && decay <= 1.0)) throw std::invalid_argument("decay must lie in (0, 1]");
        if (decay_every == 0) throw std::invalid_argument("decay interval must be positive");
        if (batch_length == 0) throw std::invalid_argument("batch length must be positive");
    }
};

/// lr0 * decay^floor(epoch / decay_every)
inline double learning_rate_at(const TrainConfig& cfg, std::size_t epoch) {
    return cfg.learning_rate * std::pow(cfg.decay, static_cast<double>(epoch / cfg.decay_every));
}

/// One training sequence; every batch starts from the network's x0.
struct Batch {
    SignalMatrix inputs;
    std::vector<double> measured;
};

/// Cuts aligned series into consecutive batches of `length` rows; a short
/// tail is dropped. `count` = 0 keeps every full batch.
inline std::vector<Batch> make_batches(const SignalMatrix& inputs, std::span<const double> measured, std::size_t length,
                                       std::size_t count = 0) {
    if (inputs.rows != measured.size()) throw std::invalid_argument("inputs and measurements differ in length");
    if (length == 0) throw std::invalid_argument("batch length must be positive");
    std::size_t n = inputs.rows / length;
    if (count > 0) n = std::min(n, count);
    std::vector<Batch> out(n);
    for (std::size_t b = 0; b < n; ++b) {
        out[b].inputs = SignalMatrix(length, inputs.cols);
        std::copy_n(inputs.data.begin() + b * length * inputs.cols, length * inputs.cols, out[b].inputs.data.begin());
        out[b].measured.assign(measured.begin() + b * length, measured.begin() + (b + 1) * length);
    }
    return out;
}

inline double mse_loss(std::span<const double> pred, std::span<const double> target) {
    if (pred.empty()) throw std::invalid_argument("mse of an empty series");
    if (pred.size() != target.size()) throw std::invalid_argument("mse operands differ in length");
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        double d = target[i] - pred[i];
        acc += d * d;
    }
    return acc / static_cast<double>(pred.size());
}

/// Flat gradients laid out like GreyBoxRNN::net(k).parameters().
struct Gradients {
    std::vector<std::vector<double>> nets;
    double loss = 0.0;

    double max_abs() const {
        double m = 0.0;
        for (const auto& g : nets) {
            for (auto v : g) m = std::max(m, std::abs(v));
        }
        return m;
    }
};

/// Exact gradient of the batch MSE with respect to every network parameter.
///
/// Forward: x_{t+1} = x_t + T g(x_t, u_t), yhat_t = h(x_t, u_t), x_0 fixed.
/// Backward with adjoint lambda_t = dL/dx_t:
///   lambda_t = dL/dyhat_t * dh/dx_t + lambda_{t+1} (I + T dg/dx_t)
/// With truncation k > 0 the adjoint is not carried across multiples of k.
inline Gradients bptt_gradients(const GreyBoxRNN& rnn, const Batch& batch, std::size_t truncation = 0) {
    const std::size_t n = batch.measured.size();
    if (n == 0) throw std::invalid_argument("empty batch");
    if (batch.inputs.rows != n || batch.inputs.cols != rnn.input_count()) {
        throw std::invalid_argument("batch inputs do not match the network");
    }
    const std::size_t ns = rnn.state_count();
    const double T = rnn.sampling_time();

    std::vector<std::vector<MlpCache>> g_cache(n, std::vector<MlpCache>(ns));
    std::vector<MlpCache> h_cache(n);
    std::vector<double> pred(n);
    std::vector<double> x = rnn.x0(), next(ns), args;
    for (std::size_t t = 0; t < n; ++t) {
        auto u = batch.inputs.row(t);
        GreyBoxRNN::gather(rnn.h_route(), x, u, args);
        pred[t] = rnn.h_net().forward(args, h_cache[t]);
        if (!std::isfinite(pred[t])) throw SimulationError("prediction is not finite", t);
        if (t + 1 == n) break;
        for (std::size_t i = 0; i < ns; ++i) {
            GreyBoxRNN::gather(rnn.g_route(i), x, u, args);
            next[i] = x[i] + T * rnn.g_nets()[i].forward(args, g_cache[t][i]);
            if (!std::isfinite(next[i]) || std::abs(next[i]) > rnn.state_limit()) {
                throw SimulationError("state '" + rnn.structure().states[i] + "' diverged", t);
            }
        }
        x.swap(next);
    }

    Gradients out;
    out.loss = mse_loss(pred, batch.measured);
    out.nets.resize(rnn.net_count());
    for (std::size_t k = 0; k < rnn.net_count(); ++k) out.nets[k].assign(rnn.net(k).parameter_count(), 0.0);

    std::vector<double> lambda(ns, 0.0), lambda_next(ns, 0.0), in_grad;
    const double scale = 2.0 / static_cast<double>(n);
    for (std::size_t t = n; t-- > 0;) {
        if (truncation > 0 && (t + 1) % truncation == 0) std::fill(lambda_next.begin(), lambda_next.end(), 0.0);
        lambda = lambda_next;
        if (t + 1 < n) {
            for (std::size_t i = 0; i < ns; ++i) {
                const double up = lambda_next[i] * T;
                if (up == 0.0) continue;
                const auto& route = rnn.g_route(i);
                in_grad.assign(route.size(), 0.0);
                rnn.g_nets()[i].backward(g_cache[t][i], up, out.nets[i], in_grad);
                for (std::size_t a = 0; a < route.size(); ++a) {
                    if (route[a].from_state) lambda[route[a].index] += in_grad[a];
                }
            }
        }
        const double dy = -scale * (batch.measured[t] - pred[t]);
        const auto& route = rnn.h_route();
        in_grad.assign(route.size(), 0.0);
        rnn.h_net().backward(h_cache[t], dy, out.nets[ns], in_grad);
        for (std::size_t a = 0; a < route.size(); ++a) {
            if (route[a].from_state) lambda[route[a].index] += in_grad[a];
        }
        lambda_next.swap(lambda);
    }
    return out;
}

/// Sign pattern of every rectifier pre-activation over a forward pass, used
/// to tell whether a finite-difference probe crossed a kink.
inline std::vector<char> activation_pattern(const GreyBoxRNN& rnn, const Batch& batch) {
    std::vector<char> out;
    std::vector<double> x = rnn.x0(), args;
    MlpCache cache;
    auto record = [&](const MLP& net) {
        for (std::size_t l = 0; l + 1 < net.layers().size(); ++l) {
            for (auto v : cache.outputs[l]) out.push_back(v > 0.0);
        }
    };
    const std::size_t n = batch.measured.size();
    for (std::size_t t = 0; t < n; ++t) {
        auto u = batch.inputs.row(t);
        GreyBoxRNN::gather(rnn.h_route(), x, u, args);
        rnn.h_net().forward(args, cache);
        record(rnn.h_net());
        if (t + 1 == n) break;
        std::vector<double> next(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) {
            GreyBoxRNN::gather(rnn.g_route(i), x, u, args);
            next[i] = x[i] + rnn.sampling_time() * rnn.g_nets()[i].forward(args, cache);
            record(rnn.g_nets()[i]);
        }
        x.swap(next);
    }
    return out;
}

/// Smallest |pre-activation| over all rectifier units in a forward pass.
inline double kink_distance(const GreyBoxRNN& rnn, const Batch& batch) {
    double best = std::numeric_limits<double>::infinity();
    std::vector<double> x = rnn.x0(), args;
    auto pre = [&](const MLP& net, std::span<const double> in) {
        std::vector<double> a(in.begin(), in.end()), b;
        const auto& p = net.parameters();
        for (const auto& l : net.layers()) {
            b.assign(l.outputs, 0.0);
            for (std::size_t o = 0; o < l.outputs; ++o) {
                double acc = p[l.offset + l.inputs * l.outputs + o];
                for (std::size_t i = 0; i < l.inputs; ++i) acc += p[l.offset + o * l.inputs + i] * a[i];
                if (l.activation == Activation::relu) best = std::min(best, std::abs(acc));
                b[o] = l.activation == Activation::relu ? std::max(acc, 0.0) : acc;
            }
            a.swap(b);
        }
        return a[0];
    };
    const std::size_t n = batch.measured.size();
    for (std::size_t t = 0; t < n; ++t) {
        auto u = batch.inputs.row(t);
        GreyBoxRNN::gather(rnn.h_route(), x, u, args);
        pre(rnn.h_net(), args);
        if (t + 1 == n) break;
        std::vector<double> next(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) {
            GreyBoxRNN::gather(rnn.g_route(i), x, u, args);
            next[i] = x[i] + rnn.sampling_time() * pre(rnn.g_nets()[i], args);
        }
        x.swap(next);
    }
    return best;
}

inline double batch_loss(const GreyBoxRNN& rnn, const Batch& batch) {
    return mse_loss(rnn_simulate(rnn, batch.inputs, batch.measured).predicted, batch.measured);
}

struct GradientCheck {
    double max_relative_error = 0.0;
    std::size_t checked = 0;
    std::size_t excluded = 0;
};

/// Fourth-order central differences against bptt_gradients. A parameter is
/// excluded when any probe changes the rectifier pattern. Relative error is
/// |a - b| / max(|a|, |b|, floor).
inline GradientCheck check_gradients(const GreyBoxRNN& rnn, const Batch& batch, double step = 1e-4,
                                     double floor = 1e-6) {
    GradientCheck out;
    auto analytic = bptt_gradients(rnn, batch);
    auto base = activation_pattern(rnn, batch);
    GreyBoxRNN probe = rnn;
    for (std::size_t k = 0; k < rnn.net_count(); ++k) {
        auto& p = probe.net(k).parameters();
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double orig = p[i];
            bool kink = false;
            auto at = [&](double offset) {
                p[i] = orig + offset;
                double l = batch_loss(probe, batch);
                kink = kink || activation_pattern(probe, batch) != base;
                return l;
            };
            const double f1 = at(step) - at(-step);
            const double f2 = at(2 * step) - at(-2 * step);
            p[i] = orig;
            if (kink) {
                ++out.excluded;
                continue;
            }
            const double fd = (8.0 * f1 - f2) / (12.0 * step);
            const double a = analytic.nets[k][i];
            const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), floor});
            out.max_relative_error = std::max(out.max_relative_error, rel);
            ++out.checked;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    std::size_t step = 0;  // number of updates applied so far

    explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

/// One bias-corrected Adam update; increments `state.step` first, so the
/// first call uses t = 1.
inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, double lr,
                      double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
    if (params.size() != grads.size() || state.m.size() != params.size()) {
        throw std::invalid_argument("adam operands differ in size");
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(beta1, t);
    const double c2 = 1.0 - std::pow(beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        const double mh = state.m[i] / c1;
        const double vh = state.v[i] / c2;
        params[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainResult {
    GreyBoxRNN rnn;
    std::vector<double> loss_curve;  // epoch-averaged batch loss before each update
    std::vector<double> learning_rates;
};

/// Runs `cfg.epochs` passes over the batches with one Adam update per batch.
inline TrainResult train(GreyBoxRNN rnn, const std::vector<Batch>& all_batches, const TrainConfig& cfg) {
    cfg.validate();
    TrainResult out;
    if (cfg.epochs == 0) {
        out.rnn = std::move(rnn);
        return out;
    }
    if (all_batches.empty()) throw std::invalid_argument("training needs at least one batch");
    std::vector<const Batch*> batches;
    for (const auto& b : all_batches) {
        if (cfg.batch_count > 0 && batches.size() == cfg.batch_count) break;
        batches.push_back(&b);
    }

    std::vector<AdamState> adam;
    for (std::size_t k = 0; k < rnn.net_count(); ++k) adam.emplace_back(rnn.net(k).parameter_count());
    Rng shuffle_rng(derive_seed(cfg.seed, "shuffle"));
    std::vector<std::size_t> order(batches.size());
    std::iota(order.begin(), order.end(), 0);

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = learning_rate_at(cfg, epoch);
        if (cfg.shuffle) {
            for (std::size_t i = order.size(); i > 1; --i) {
                std::swap(order[i - 1], order[shuffle_rng.next() % i]);
            }
        }
        double total = 0.0;
        for (auto b : order) {
            Gradients grads;
            try {
                grads = bptt_gradients(rnn, *batches[b], cfg.truncation);
            } catch (const SimulationError& e) {
                throw TrainingError(std::string("forward pass failed: ") + e.what(), epoch);
            }
            if (!std::isfinite(grads.loss)) throw TrainingError("loss is not finite", epoch);
            total += grads.loss;
            for (std::size_t k = 0; k < rnn.net_count(); ++k) {
                adam_step(rnn.net(k).parameters(), grads.nets[k], adam[k], lr, cfg.beta1, cfg.beta2, cfg.epsilon);
            }
        }
        const double loss = total / static_cast<double>(batches.size());
        if (!std::isfinite(loss)) throw TrainingError("loss is not finite", epoch);
        out.loss_curve.push_back(loss);
        out.learning_rates.push_back(lr);
    }
    out.rnn = std::move(rnn);
    return out;
}

// ---------------------------------------------------------------------------
// Ensembles

class EnsembleModel {
public:
    explicit EnsembleModel(std::vector<GreyBoxRNN> members) : members_(std::move(members)) {
        if (members_.size() < 2) throw std::invalid_argument("an ensemble needs at least two members");
        const auto h = members_.front().structure().hash();
        for (const auto& m : members_) {
            if (m.structure().hash() != h) throw std::invalid_argument("ensemble members have different structures");
        }
    }

    const std::vector<GreyBoxRNN>& members() const { return members_; }
    const StateSpaceStructure& structure() const { return members_.front().structure(); }

private:
    std::vector<GreyBoxRNN> members_;
};

struct EnsemblePrediction {
    std::vector<double> mean;
    std::vector<double> std;  // sample standard deviation across members
    std::vector<double> lower;  // mean - 3 std
    std::vector<double> upper;  // mean + 3 std
    std::vector<double> residual;  // y - mean
};

inline EnsemblePrediction ensemble_predict(const EnsembleModel& ens, const SignalMatrix& inputs,
                                           std::span<const double> measured) {
    const auto n = measured.size();
    const auto k = ens.members().size();
    std::vector<std::vector<double>> preds;
    for (const auto& m : ens.members()) preds.push_back(rnn_simulate(m, inputs, measured).predicted);
    EnsemblePrediction out;
    out.mean.resize(n);
    out.std.resize(n);
    out.lower.resize(n);
    out.upper.resize(n);
    out.residual.resize(n);
    for (std::size_t t = 0; t < n; ++t) {
        // deviations from the first member keep identical members exact
        const double ref = preds.front()[t];
        double s = 0.0;
        for (const auto& p : preds) s += p[t] - ref;
        const double shift = s / static_cast<double>(k);
        const double mean = ref + shift;
        double ss = 0.0;
        for (const auto& p : preds) ss += (p[t] - ref - shift) * (p[t] - ref - shift);
        const double sd = std::sqrt(ss / static_cast<double>(k - 1));
        out.mean[t] = mean;
        out.std[t] = sd;
        out.lower[t] = mean - 3.0 * sd;
        out.upper[t] = mean + 3.0 * sd;
        out.residual[t] = measured[t] - mean;
    }
    return out;
}

/// Trains one member per seed (initialisation differs only by seed), running
/// up to `workers` members concurrently. Results are in seed order.
inline std::vector<TrainResult> train_ensemble(const StateSpaceStructure& s, RnnHyperparameters hp,
                                               const std::vector<Batch>& batches, const TrainConfig& cfg,
                                               const std::vector<std::uint64_t>& seeds, std::size_t workers = 1) {
    std::vector<TrainResult> out(seeds.size());
    std::vector<std::exception_ptr> errors(seeds.size());
    auto run = [&](std::size_t i) {
        try {
            auto member_hp = hp;
            member_hp.seed = seeds[i];
            auto member_cfg = cfg;
            member_cfg.seed = seeds[i];
            out[i] = train(build_rnn(s, member_hp), batches, member_cfg);
        } catch (...) {
            errors[i] = std::current_exception();
        }
    };
    workers = std::max<std::size_t>(1, workers);
    for (std::size_t start = 0; start < seeds.size(); start += workers) {
        std::vector<std::thread> pool;
        const auto end = std::min(seeds.size(), start + workers);
        if (workers == 1) {
            run(start);
        } else {
            for (std::size_t i = start; i < end; ++i) pool.emplace_back(run, i);
            for (auto& t : pool) t.join();
        }
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    return out;
}

}  // namespace greybox
