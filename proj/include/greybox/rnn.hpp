#pragma once

// Grey-box recurrent network shaped by a StateSpaceStructure:
//
//   x_{t+1} = x_t + T * g(x_t, u_t)     one MLP per state
//   yhat_t  = h(x_t, u_t)               one MLP for the output map
//
// Each network only sees the arguments the computational graph assigns it.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "greybox/causal.hpp"
#include "greybox/mlp.hpp"
#include "greybox/random.hpp"

namespace greybox {

/// Row-major time x signal matrix.
struct SignalMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    SignalMatrix() = default;
    SignalMatrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    std::span<double> row(std::size_t t) { return {data.data() + t * cols, cols}; }
    std::span<const double> row(std::size_t t) const { return {data.data() + t * cols, cols}; }
    double& operator()(std::size_t t, std::size_t k) { return data[t * cols + k]; }
    double operator()(std::size_t t, std::size_t k) const { return data[t * cols + k]; }

    bool operator==(const SignalMatrix&) const = default;
};

class SimulationError : public std::runtime_error {
public:
    SimulationError(const std::string& what, std::size_t time_index)
        : std::runtime_error(what + " at time index " + std::to_string(time_index)), time_index_(time_index) {}

    std::size_t time_index() const noexcept { return time_index_; }

private:
    std::size_t time_index_;
};

class WeightsError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct RnnHyperparameters {
    std::vector<std::size_t> hidden{256, 256};
    double sampling_time = 0.05;
    std::vector<double> x0;  // empty: zeros
    std::uint64_t seed = 0;
    double state_limit = 1e6;
    double g_output_scale = 0.1;  // small initial g keeps the untrained network near rest
};

/// Where a network argument comes from: the state vector or the input vector.
struct ArgumentRoute {
    bool from_state = false;
    std::size_t index = 0;

    bool operator==(const ArgumentRoute&) const = default;
};

class GreyBoxRNN {
public:
    GreyBoxRNN() = default;

    GreyBoxRNN(StateSpaceStructure structure, std::vector<MLP> g_nets, MLP h_net, double sampling_time,
               std::vector<double> x0, std::uint64_t seed, double state_limit)
        : structure_(std::move(structure)),
          g_nets_(std::move(g_nets)),
          h_net_(std::move(h_net)),
          sampling_time_(sampling_time),
          x0_(std::move(x0)),
          seed_(seed),
          state_limit_(state_limit) {
        structure_.validate();
        if (structure_.states.empty()) throw std::invalid_argument("grey-box RNN needs at least one state");
        if (g_nets_.size() != structure_.states.size()) {
            throw std::invalid_argument("one g network per state required");
        }
        if (x0_.empty()) x0_.assign(structure_.states.size(), 0.0);
        if (x0_.size() != structure_.states.size()) throw std::invalid_argument("x0 dimension mismatch");
        for (std::size_t i = 0; i < g_nets_.size(); ++i) {
            g_routes_.push_back(route(structure_.g_args[i]));
            if (g_nets_[i].input_width() != g_routes_.back().size()) {
                throw std::invalid_argument("g network " + std::to_string(i) + " width does not match its arguments");
            }
        }
        h_routes_ = route(structure_.h_args);
        if (h_net_.input_width() != h_routes_.size()) {
            throw std::invalid_argument("h network width does not match its arguments");
        }
    }

    const StateSpaceStructure& structure() const { return structure_; }
    std::size_t state_count() const { return structure_.states.size(); }
    std::size_t input_count() const { return structure_.inputs.size(); }
    double sampling_time() const { return sampling_time_; }
    const std::vector<double>& x0() const { return x0_; }
    std::uint64_t seed() const { return seed_; }
    double state_limit() const { return state_limit_; }

    const std::vector<MLP>& g_nets() const { return g_nets_; }
    const MLP& h_net() const { return h_net_; }
    std::vector<MLP>& g_nets() { return g_nets_; }
    MLP& h_net() { return h_net_; }

    /// Networks in optimiser order: g_0 .. g_{n-1}, h.
    std::size_t net_count() const { return g_nets_.size() + 1; }
    MLP& net(std::size_t k) { return k < g_nets_.size() ? g_nets_[k] : h_net_; }
    const MLP& net(std::size_t k) const { return k < g_nets_.size() ? g_nets_[k] : h_net_; }

    const std::vector<ArgumentRoute>& g_route(std::size_t i) const { return g_routes_[i]; }
    const std::vector<ArgumentRoute>& h_route() const { return h_routes_; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (std::size_t k = 0; k < net_count(); ++k) n += net(k).parameter_count();
        return n;
    }

    static void gather(const std::vector<ArgumentRoute>& routes, std::span<const double> x, std::span<const double> u,
                       std::vector<double>& out) {
        out.resize(routes.size());
        for (std::size_t k = 0; k < routes.size(); ++k) {
            out[k] = routes[k].from_state ? x[routes[k].index] : u[routes[k].index];
        }
    }

    bool operator==(const GreyBoxRNN&) const = default;

private:
    std::vector<ArgumentRoute> route(const std::vector<std::string>& args) const {
        std::vector<ArgumentRoute> out;
        for (const auto& a : args) {
            auto s = std::find(structure_.states.begin(), structure_.states.end(), a);
            if (s != structure_.states.end()) {
                out.push_back({true, static_cast<std::size_t>(s - structure_.states.begin())});
                continue;
            }
            auto u = std::find(structure_.inputs.begin(), structure_.inputs.end(), a);
            out.push_back({false, static_cast<std::size_t>(u - structure_.inputs.begin())});
        }
        return out;
    }

    StateSpaceStructure structure_;
    std::vector<MLP> g_nets_;
    MLP h_net_;
    double sampling_time_ = 0.05;
    std::vector<double> x0_;
    std::uint64_t seed_ = 0;
    double state_limit_ = 1e6;
    std::vector<std::vector<ArgumentRoute>> g_routes_;
    std::vector<ArgumentRoute> h_routes_;
};

/// Sizes one network per state from its argument list plus the output
/// network, and initialises all of them from `hp.seed`.
inline GreyBoxRNN build_rnn(const StateSpaceStructure& s, const RnnHyperparameters& hp) {
    if (s.states.empty()) throw std::invalid_argument("structure has no states");
    Rng rng(hp.seed);
    std::vector<MLP> g;
    for (const auto& args : s.g_args) {
        g.emplace_back(args.size(), hp.hidden);
        g.back().initialize(rng, hp.g_output_scale);
    }
    MLP h(s.h_args.size(), hp.hidden);
    h.initialize(rng);
    return GreyBoxRNN(s, std::move(g), std::move(h), hp.sampling_time, hp.x0, hp.seed, hp.state_limit);
}

struct StepResult {
    std::vector<double> next_state;
    double prediction = 0.0;
};

/// One Euler step. Throws SimulationError (time index 0) when the new state
/// is non-finite or exceeds the configured limit.
inline StepResult rnn_step(const GreyBoxRNN& rnn, std::span<const double> x, std::span<const double> u) {
    if (x.size() != rnn.state_count() || u.size() != rnn.input_count()) {
        throw std::invalid_argument("rnn_step dimension mismatch");
    }
    std::vector<double> args;
    StepResult out;
    GreyBoxRNN::gather(rnn.h_route(), x, u, args);
    out.prediction = rnn.h_net().forward(args);
    out.next_state.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        GreyBoxRNN::gather(rnn.g_route(i), x, u, args);
        double next = x[i] + rnn.sampling_time() * rnn.g_nets()[i].forward(args);
        if (!std::isfinite(next) || std::abs(next) > rnn.state_limit()) {
            throw SimulationError("state '" + rnn.structure().states[i] + "' diverged", 0);
        }
        out.next_state[i] = next;
    }
    return out;
}

struct Trajectory {
    SignalMatrix inputs;
    SignalMatrix states;  // x_0 .. x_{N-1}
    std::vector<double> measured;
    std::vector<double> predicted;
    std::vector<double> residual;
};

/// Runs the network over aligned input rows and measurements starting from
/// x0; residual r_t = y_t - yhat_t.
inline Trajectory rnn_simulate(const GreyBoxRNN& rnn, const SignalMatrix& inputs, std::span<const double> measured) {
    if (inputs.rows != measured.size()) {
        throw std::invalid_argument("inputs have " + std::to_string(inputs.rows) + " rows but " +
                                    std::to_string(measured.size()) + " measurements given");
    }
    if (inputs.cols != rnn.input_count()) {
        throw std::invalid_argument("expected " + std::to_string(rnn.input_count()) + " input signals");
    }
    const auto n = inputs.rows;
    Trajectory tr;
    tr.inputs = inputs;
    tr.measured.assign(measured.begin(), measured.end());
    tr.states = SignalMatrix(n, rnn.state_count());
    tr.predicted.resize(n);
    tr.residual.resize(n);
    std::vector<double> x = rnn.x0();
    for (std::size_t t = 0; t < n; ++t) {
        std::copy(x.begin(), x.end(), tr.states.row(t).begin());
        StepResult step;
        try {
            step = rnn_step(rnn, x, inputs.row(t));
        } catch (const SimulationError& e) {
            throw SimulationError("state diverged", t);
        }
        tr.predicted[t] = step.prediction;
        tr.residual[t] = measured[t] - step.prediction;
        x = std::move(step.next_state);
    }
    return tr;
}

// ---------------------------------------------------------------------------
// Weights file

namespace detail {

inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s) {
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
        throw WeightsError("malformed number '" + s + "'");
    }
    return v;
}

inline std::string hex64(std::uint64_t v) {
    std::ostringstream o;
    o << std::hex << std::setw(16) << std::setfill('0') << v;
    return o.str();
}

}  // namespace detail

/// Plain-text weights: header, embedded structure, then one block per
/// network. Doubles are written in shortest round-trip form.
inline std::string save_weights(const GreyBoxRNN& rnn) {
    std::ostringstream out;
    out << "greybox-weights 1\n";
    out << "structure_hash " << detail::hex64(rnn.structure().hash()) << '\n';
    out << "sampling_time " << detail::format_double(rnn.sampling_time()) << '\n';
    out << "seed " << rnn.seed() << '\n';
    out << "state_limit " << detail::format_double(rnn.state_limit()) << '\n';
    out << "x0";
    for (auto v : rnn.x0()) out << ' ' << detail::format_double(v);
    out << '\n';
    out << "begin-structure\n" << rnn.structure().to_text() << "end-structure\n";
    for (std::size_t k = 0; k < rnn.net_count(); ++k) {
        const auto& net = rnn.net(k);
        out << "net " << (k < rnn.state_count() ? "g" + std::to_string(k) : std::string("h")) << " inputs "
            << net.input_width() << " layers " << net.layers().size() << '\n';
        for (const auto& l : net.layers()) {
            out << "layer " << l.inputs << ' ' << l.outputs << ' '
                << (l.activation == Activation::relu ? "relu" : "identity") << '\n';
            for (std::size_t i = 0; i < l.parameter_count(); ++i) {
                out << (i ? " " : "") << detail::format_double(net.parameters()[l.offset + i]);
            }
            out << '\n';
        }
    }
    out << "end\n";
    return out.str();
}

/// Parses a weights file. When `expected` is given its hash must equal the
/// stored structure hash.
inline GreyBoxRNN load_weights(const std::string& text, const StateSpaceStructure* expected = nullptr) {
    std::istringstream in(text);
    std::string line;
    auto next_line = [&]() {
        if (!std::getline(in, line)) throw WeightsError("truncated weights file");
        return detail::split_ws(line);
    };
    auto expect_key = [&](const std::string& key) {
        auto tok = next_line();
        if (tok.empty() || tok[0] != key) throw WeightsError("expected '" + key + "' in weights file");
        return tok;
    };

    auto header = next_line();
    if (header != std::vector<std::string>{"greybox-weights", "1"}) throw WeightsError("not a weights file");
    auto hash_tok = expect_key("structure_hash");
    if (hash_tok.size() != 2) throw WeightsError("malformed structure_hash");
    double T = detail::parse_double(expect_key("sampling_time").at(1));
    std::uint64_t seed = std::stoull(expect_key("seed").at(1));
    double limit = detail::parse_double(expect_key("state_limit").at(1));
    auto x0_tok = expect_key("x0");
    std::vector<double> x0;
    for (std::size_t i = 1; i < x0_tok.size(); ++i) x0.push_back(detail::parse_double(x0_tok[i]));

    expect_key("begin-structure");
    std::string structure_text;
    while (true) {
        if (!std::getline(in, line)) throw WeightsError("unterminated structure block");
        if (line == "end-structure") break;
        structure_text += line + '\n';
    }
    auto structure = StateSpaceStructure::parse(structure_text);
    if (detail::hex64(structure.hash()) != hash_tok[1]) throw WeightsError("embedded structure is corrupt");
    if (expected && expected->hash() != structure.hash()) {
        throw WeightsError("structure hash mismatch: weights were trained for '" + structure.name() +
                           "', supplied structure is '" + expected->name() + "'");
    }

    auto read_net = [&](std::size_t expected_inputs) {
        auto tok = expect_key("net");
        if (tok.size() != 6) throw WeightsError("malformed net header");
        std::size_t inputs = std::stoul(tok[3]);
        std::size_t layers = std::stoul(tok[5]);
        if (inputs != expected_inputs) throw WeightsError("network input width does not match structure");
        std::vector<std::size_t> hidden;
        std::vector<std::vector<double>> values;
        std::size_t prev = inputs;
        for (std::size_t l = 0; l < layers; ++l) {
            auto lt = expect_key("layer");
            if (lt.size() != 4) throw WeightsError("malformed layer header");
            std::size_t li = std::stoul(lt[1]), lo = std::stoul(lt[2]);
            bool relu = lt[3] == "relu";
            if (li != prev || relu != (l + 1 < layers) || (l + 1 == layers && lo != 1)) {
                throw WeightsError("inconsistent layer shapes");
            }
            if (relu) hidden.push_back(lo);
            prev = lo;
            auto vals = next_line();
            if (vals.size() != li * lo + lo) throw WeightsError("wrong parameter count in layer");
            std::vector<double> v;
            for (const auto& s : vals) v.push_back(detail::parse_double(s));
            values.push_back(std::move(v));
        }
        MLP net(inputs, hidden);
        for (std::size_t l = 0; l < layers; ++l) {
            std::copy(values[l].begin(), values[l].end(), net.parameters().begin() + net.layers()[l].offset);
        }
        return net;
    };

    std::vector<MLP> g;
    for (const auto& args : structure.g_args) g.push_back(read_net(args.size()));
    MLP h = read_net(structure.h_args.size());
    expect_key("end");
    return GreyBoxRNN(structure, std::move(g), std::move(h), T, x0, seed, limit);
}

}  // namespace greybox
