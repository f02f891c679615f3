#pragma once

// Desk-scale benchmark plant: two cascaded tanks feeding a level-coupled
// heater stage.
//
//   q1  = k1 sqrt(x1)
//   x1' = (u1 - q1 - f_leak k1 sqrt(x1)) / A1
//   x2' = (q1 - k2 sqrt(x2)) / A2
//   x3' = (1 + u2 (1 + c x2) - x3) / tau3
//   x4' = (x3 - x4) / tau4
//   p   = x1 + 0.1 u1                  (internal, unmeasured)
//   y1 = x2, y2 = x4, y3 = q1          (+ noise, multiplicative faults)

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "greybox/random.hpp"
#include "greybox/structural_model.hpp"
#include "greybox/timeseries.hpp"

namespace greybox {

struct PlantSpec {
    double k1 = 0.5;
    double A1 = 0.8;
    double k2 = 0.5;
    double A2 = 1.0;
    double tau3 = 3.0;
    double tau4 = 4.0;
    double c = 0.5;
    std::array<double, 3> noise_std{0.01, 0.01, 0.004};  // y1 y2 y3
    double sampling_time = 0.05;
    std::size_t substeps = 4;
    double u1_min = 0.7, u1_max = 1.0;
    double u2_min = 0.5, u2_max = 1.0;
    double u1_ref = 0.85, u2_ref = 0.75;

    void validate() const {
        for (double v : {k1, A1, k2, A2, tau3, tau4, sampling_time}) {
            if (!(v > 0.0) || !std::isfinite(v)) throw std::invalid_argument("plant parameters must be positive");
        }
        if (c < 0.0 || substeps == 0) throw std::invalid_argument("invalid plant parameterisation");
        for (double s : noise_std) {
            if (s < 0.0) throw std::invalid_argument("noise std must be non-negative");
        }
        if (!(u1_min > 0.0 && u1_min <= u1_max && u2_min <= u2_max)) {
            throw std::invalid_argument("invalid input range");
        }
    }
};

inline const std::vector<std::string>& plant_inputs() {
    static const std::vector<std::string> names{"u1", "u2"};
    return names;
}

inline const std::vector<std::string>& plant_sensors() {
    static const std::vector<std::string> names{"y1", "y2", "y3"};
    return names;
}

inline const std::vector<std::string>& plant_faults() {
    static const std::vector<std::string> names{"f_leak", "f_y1", "f_y2", "f_y3"};
    return names;
}

enum class FaultKind { sensor_multiplicative, leak };

struct FaultScenario {
    std::string fault;  // one of plant_faults()
    double magnitude = 0.0;
    double onset = 0.0;  // seconds

    FaultKind kind() const { return fault == "f_leak" ? FaultKind::leak : FaultKind::sensor_multiplicative; }
};

using PlantState = std::array<double, 4>;

/// Analytic equilibrium for constant inputs.
inline PlantState plant_fixed_point(const PlantSpec& s, double u1, double u2) {
    PlantState x;
    x[0] = (u1 / s.k1) * (u1 / s.k1);
    x[1] = (u1 / s.k2) * (u1 / s.k2);
    x[2] = 1.0 + u2 * (1.0 + s.c * x[1]);
    x[3] = x[2];
    return x;
}

inline PlantState plant_derivative(const PlantSpec& s, const PlantState& x, double u1, double u2, double leak) {
    const double q1 = s.k1 * std::sqrt(std::max(x[0], 0.0));
    PlantState d;
    d[0] = (u1 - q1 - leak * q1) / s.A1;
    d[1] = (q1 - s.k2 * std::sqrt(std::max(x[1], 0.0))) / s.A2;
    d[2] = (1.0 + u2 * (1.0 + s.c * x[1]) - x[2]) / s.tau3;
    d[3] = (x[2] - x[3]) / s.tau4;
    return d;
}

/// Every model equation evaluated for its output variable from a full
/// variable assignment; each reads only the variables in its incidence row.
inline std::map<std::string, double> evaluate_plant_equations(const PlantSpec& s,
                                                              const std::map<std::string, double>& v) {
    auto at = [&](const char* n) {
        auto it = v.find(n);
        if (it == v.end()) throw std::invalid_argument(std::string("missing value for '") + n + "'");
        return it->second;
    };
    std::map<std::string, double> out;
    out["e1"] = (at("u1") - at("q1") * (1.0 + at("f_leak"))) / s.A1;                      // dx1
    out["e2"] = (at("q1") - s.k2 * std::sqrt(std::max(at("x2"), 0.0))) / s.A2;            // dx2
    out["e3"] = (1.0 + at("u2") * (1.0 + s.c * at("x2")) - at("x3")) / s.tau3;            // dx3
    out["e4"] = (at("x3") - at("x4")) / s.tau4;                                           // dx4
    out["e5"] = s.k1 * std::sqrt(std::max(at("x1"), 0.0));                                // q1
    out["e6"] = at("x1") + 0.1 * at("u1");                                                // p
    out["s1"] = (1.0 + at("f_y1")) * at("x2");                                            // y1
    out["s2"] = (1.0 + at("f_y2")) * at("x4");                                            // y2
    out["s3"] = (1.0 + at("f_y3")) * at("q1");                                            // y3
    return out;
}

/// Output variable computed by each equation in evaluate_plant_equations.
inline const std::map<std::string, std::string>& plant_equation_outputs() {
    static const std::map<std::string, std::string> m{{"e1", "dx1"}, {"e2", "dx2"}, {"e3", "dx3"},
                                                      {"e4", "dx4"}, {"e5", "q1"},  {"e6", "p"},
                                                      {"s1", "y1"},  {"s2", "y2"},  {"s3", "y3"}};
    return m;
}

inline constexpr const char* benchmark_model_text = R"(# Two-tank cascade feeding a level-coupled heater stage.
#
#   q1  = k1 sqrt(x1)                        e5
#   x1' = (u1 - q1 - leak) / A1              e1   (leak fault)
#   x2' = (q1 - k2 sqrt(x2)) / A2            e2
#   x3' = (1 + u2 (1 + c x2) - x3) / tau3    e3
#   x4' = (x3 - x4) / tau4                   e4
#   p   = x1 + 0.1 u1                        e6   (unmeasured, not redundant)
#   y1 = x2, y2 = x4, y3 = q1                s1 s2 s3
@variables
x1 state
dx1 derivative
x2 state
dx2 derivative
x3 state
dx3 derivative
x4 state
dx4 derivative
q1 unknown
p unknown
u1 known
u2 known
y1 known
y2 known
y3 known
f_leak fault
f_y1 fault
f_y2 fault
f_y3 fault
@equations
e1 : dx1 q1 u1
e2 : dx2 x2 q1
e3 : dx3 x2 x3 u2
e4 : dx4 x3 x4
e5 : x1 q1
e6 : x1 p u1
d1 : x1 dx1
d2 : x2 dx2
d3 : x3 dx3
d4 : x4 dx4
s1 : x2 y1
s2 : x4 y2
s3 : q1 y3
@links
x1 dx1 via d1
x2 dx2 via d2
x3 dx3 via d3
x4 dx4 via d4
@faults
f_leak in e1
f_y1 in s1
f_y2 in s2
f_y3 in s3
@sensors
s1 measures y1
s2 measures y2
s3 measures y3
)";

inline StructuralModel reference_structural_model() { return parse_model(benchmark_model_text); }

struct InputProfileOptions {
    std::size_t samples = 600;
    std::size_t hold = 100;      // samples held at the reference point first
    double min_segment = 2.0;    // seconds
    double max_segment = 8.0;
    double step_probability = 0.4;  // otherwise a ramp
};

/// Seeded excitation: reference hold, then a chain of steps and ramps to
/// random levels inside the input ranges.
inline SignalMatrix generate_inputs(const PlantSpec& s, std::uint64_t seed, const InputProfileOptions& opt = {}) {
    s.validate();
    Rng rng(seed);
    SignalMatrix u(opt.samples, 2);
    const std::array<double, 2> lo{s.u1_min, s.u2_min}, hi{s.u1_max, s.u2_max};
    for (std::size_t k = 0; k < 2; ++k) {
        double level = k == 0 ? s.u1_ref : s.u2_ref;
        std::size_t t = 0;
        for (; t < std::min(opt.hold, opt.samples); ++t) u(t, k) = level;
        while (t < opt.samples) {
            const double secs = rng.uniform(opt.min_segment, opt.max_segment);
            const auto len = std::max<std::size_t>(1, static_cast<std::size_t>(secs / s.sampling_time));
            const double target = rng.uniform(lo[k], hi[k]);
            const bool step = rng.uniform() < opt.step_probability;
            for (std::size_t i = 0; i < len && t < opt.samples; ++i, ++t) {
                u(t, k) = step ? target : level + (target - level) * static_cast<double>(i + 1) / len;
            }
            level = target;
        }
    }
    return u;
}

struct PlantTrace {
    TimeSeries data;       // u1 u2 y1 y2 y3
    SignalMatrix states;   // x1..x4 at each sample
    std::vector<double> q1;
};

/// RK4 with `substeps` per sample and zero-order-hold inputs. The plant starts
/// at the equilibrium of the reference inputs. Sensor noise is drawn from
/// `seed`; the fault acts from `onset` on.
inline PlantTrace simulate_plant(const PlantSpec& s, const SignalMatrix& inputs,
                                 const std::optional<FaultScenario>& scenario, std::uint64_t seed) {
    s.validate();
    if (inputs.cols != 2) throw std::invalid_argument("the plant takes two inputs");
    if (scenario) {
        const auto& f = plant_faults();
        if (std::find(f.begin(), f.end(), scenario->fault) == f.end()) {
            throw std::invalid_argument("unknown fault '" + scenario->fault + "'");
        }
        if (scenario->onset < 0.0 || scenario->onset > s.sampling_time * static_cast<double>(inputs.rows)) {
            throw std::invalid_argument("fault onset outside the simulated horizon");
        }
    }
    const auto n = inputs.rows;
    PlantTrace out;
    out.data.names = {"u1", "u2", "y1", "y2", "y3"};
    out.data.data = SignalMatrix(n, 5);
    out.states = SignalMatrix(n, 4);
    out.q1.resize(n);
    Rng noise(seed);
    PlantState x = plant_fixed_point(s, s.u1_ref, s.u2_ref);
    const double h = s.sampling_time / static_cast<double>(s.substeps);
    auto add = [](const PlantState& a, const PlantState& b, double k) {
        PlantState r;
        for (std::size_t i = 0; i < 4; ++i) r[i] = a[i] + k * b[i];
        return r;
    };
    for (std::size_t t = 0; t < n; ++t) {
        const double time = s.sampling_time * static_cast<double>(t);
        const bool active = scenario && time >= scenario->onset;
        const double f = active ? scenario->magnitude : 0.0;
        const double u1 = inputs(t, 0), u2 = inputs(t, 1);
        const double q1 = s.k1 * std::sqrt(std::max(x[0], 0.0));
        std::array<double, 3> y{x[1], x[3], q1};
        if (active && scenario->kind() == FaultKind::sensor_multiplicative) {
            const auto k = static_cast<std::size_t>(scenario->fault.back() - '1');
            y[k] *= 1.0 + f;
        }
        for (std::size_t k = 0; k < 3; ++k) y[k] += s.noise_std[k] * noise.normal();
        out.data.data(t, 0) = u1;
        out.data.data(t, 1) = u2;
        for (std::size_t k = 0; k < 3; ++k) out.data.data(t, 2 + k) = y[k];
        for (std::size_t i = 0; i < 4; ++i) out.states(t, i) = x[i];
        out.q1[t] = q1;

        const double leak = active && scenario->kind() == FaultKind::leak ? f : 0.0;
        for (std::size_t k = 0; k < s.substeps; ++k) {
            auto k1 = plant_derivative(s, x, u1, u2, leak);
            auto k2 = plant_derivative(s, add(x, k1, h / 2), u1, u2, leak);
            auto k3 = plant_derivative(s, add(x, k2, h / 2), u1, u2, leak);
            auto k4 = plant_derivative(s, add(x, k3, h), u1, u2, leak);
            for (std::size_t i = 0; i < 4; ++i) x[i] += h / 6.0 * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i]);
        }
        for (double v : x) {
            if (!std::isfinite(v)) throw std::runtime_error("plant simulation became unstable at sample " + std::to_string(t));
        }
    }
    return out;
}

}  // namespace greybox
