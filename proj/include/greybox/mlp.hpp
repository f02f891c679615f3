#pragma once

// Fully connected network with rectifier hidden layers and an affine scalar
// output, x_out = g(a^T x_in + b) per unit. Parameters live in one flat
// vector so optimisers can treat every network uniformly.

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "greybox/random.hpp"

namespace greybox {

enum class Activation { relu, identity };

struct DenseLayer {
    std::size_t inputs = 0;
    std::size_t outputs = 0;
    Activation activation = Activation::identity;
    std::size_t offset = 0;  // start of the row-major weights; biases follow

    std::size_t parameter_count() const { return inputs * outputs + outputs; }

    bool operator==(const DenseLayer&) const = default;
};

/// Per-evaluation storage for backpropagation: the network input and the
/// post-activation output of every layer.
struct MlpCache {
    std::vector<double> input;
    std::vector<std::vector<double>> outputs;
};

class MLP {
public:
    MLP() = default;

    /// Zero-initialised network input -> hidden... -> 1.
    MLP(std::size_t input_width, const std::vector<std::size_t>& hidden) : input_width_(input_width) {
        std::size_t in = input_width, offset = 0;
        for (auto h : hidden) {
            if (h == 0) throw std::invalid_argument("hidden layer width must be positive");
            layers_.push_back({in, h, Activation::relu, offset});
            offset += layers_.back().parameter_count();
            in = h;
        }
        layers_.push_back({in, 1, Activation::identity, offset});
        offset += layers_.back().parameter_count();
        params_.assign(offset, 0.0);
    }

    /// Uniform weights scaled by fan-in (He-style for rectifier layers),
    /// zero biases. `output_scale` shrinks the output layer.
    void initialize(Rng& rng, double output_scale = 1.0) {
        for (const auto& l : layers_) {
            double fan_in = static_cast<double>(l.inputs > 0 ? l.inputs : 1);
            double bound = l.activation == Activation::relu ? std::sqrt(6.0 / fan_in)
                                                            : output_scale * std::sqrt(1.0 / fan_in);
            for (std::size_t i = 0; i < l.inputs * l.outputs; ++i) params_[l.offset + i] = rng.uniform(-bound, bound);
            for (std::size_t i = 0; i < l.outputs; ++i) params_[l.offset + l.inputs * l.outputs + i] = 0.0;
        }
    }

    std::size_t input_width() const { return input_width_; }
    std::size_t parameter_count() const { return params_.size(); }
    const std::vector<DenseLayer>& layers() const { return layers_; }
    std::vector<double>& parameters() { return params_; }
    const std::vector<double>& parameters() const { return params_; }

    double forward(std::span<const double> in) const {
        check_width(in.size());
        thread_local std::vector<double> a, b;
        a.assign(in.begin(), in.end());
        for (const auto& l : layers_) {
            b.assign(l.outputs, 0.0);
            affine(l, a, b);
            a.swap(b);
        }
        return a[0];
    }

    double forward(std::span<const double> in, MlpCache& cache) const {
        check_width(in.size());
        cache.input.assign(in.begin(), in.end());
        cache.outputs.resize(layers_.size());
        const std::vector<double>* prev = &cache.input;
        for (std::size_t k = 0; k < layers_.size(); ++k) {
            auto& out = cache.outputs[k];
            out.assign(layers_[k].outputs, 0.0);
            affine(layers_[k], *prev, out);
            prev = &out;
        }
        return cache.outputs.back()[0];
    }

    /// Accumulates upstream * d(out)/d(params) into `param_grad` and writes
    /// upstream * d(out)/d(input) into `input_grad` (when non-empty).
    void backward(const MlpCache& cache, double upstream, std::span<double> param_grad,
                  std::span<double> input_grad) const {
        thread_local std::vector<double> delta, next;
        delta.assign(1, upstream);
        for (std::size_t k = layers_.size(); k-- > 0;) {
            const auto& l = layers_[k];
            const auto& in = k == 0 ? cache.input : cache.outputs[k - 1];
            const double* w = params_.data() + l.offset;
            double* gw = param_grad.data() + l.offset;
            double* gb = gw + l.inputs * l.outputs;
            for (std::size_t o = 0; o < l.outputs; ++o) {
                const double d = delta[o];
                gb[o] += d;
                if (d == 0.0) continue;
                double* row = gw + o * l.inputs;
                for (std::size_t i = 0; i < l.inputs; ++i) row[i] += d * in[i];
            }
            if (k == 0 && input_grad.empty()) break;
            next.assign(l.inputs, 0.0);
            for (std::size_t o = 0; o < l.outputs; ++o) {
                const double d = delta[o];
                if (d == 0.0) continue;
                const double* row = w + o * l.inputs;
                for (std::size_t i = 0; i < l.inputs; ++i) next[i] += d * row[i];
            }
            if (k > 0 && layers_[k - 1].activation == Activation::relu) {
                const auto& act = cache.outputs[k - 1];
                for (std::size_t i = 0; i < l.inputs; ++i) {
                    if (act[i] <= 0.0) next[i] = 0.0;
                }
            }
            delta.swap(next);
        }
        if (!input_grad.empty()) {
            for (std::size_t i = 0; i < input_width_; ++i) input_grad[i] = delta[i];
        }
    }

    bool operator==(const MLP&) const = default;

private:
    void check_width(std::size_t n) const {
        if (n != input_width_) {
            throw std::invalid_argument("network expects " + std::to_string(input_width_) + " inputs, got " +
                                        std::to_string(n));
        }
    }

    void affine(const DenseLayer& l, const std::vector<double>& in, std::vector<double>& out) const {
        const double* w = params_.data() + l.offset;
        const double* bias = w + l.inputs * l.outputs;
        for (std::size_t o = 0; o < l.outputs; ++o) {
            double acc = bias[o];
            const double* row = w + o * l.inputs;
            for (std::size_t i = 0; i < l.inputs; ++i) acc += row[i] * in[i];
            out[o] = l.activation == Activation::relu ? (acc > 0.0 ? acc : 0.0) : acc;
        }
    }

    std::size_t input_width_ = 0;
    std::vector<DenseLayer> layers_;
    std::vector<double> params_;
};

inline double mlp_forward(const MLP& net, std::span<const double> input) { return net.forward(input); }

}  // namespace greybox
