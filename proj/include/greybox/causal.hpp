#pragma once

// Computational graphs of MSO sets: matching of the exactly determined
// remainder, causality classification and extraction of the state-space
// argument structure used to shape a grey-box RNN.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <tuple>
#include <string>
#include <vector>

#include "greybox/dm.hpp"
#include "greybox/mso.hpp"
#include "greybox/structural_model.hpp"

namespace greybox {

class CausalityError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class AlgebraicLoopError : public CausalityError {
public:
    using CausalityError::CausalityError;
};

enum class Causality { integral, derivative, mixed, algebraic };

inline std::string_view to_string(Causality c) {
    switch (c) {
    case Causality::integral: return "integral";
    case Causality::derivative: return "derivative";
    case Causality::mixed: return "mixed";
    case Causality::algebraic: return "algebraic";
    }
    return "algebraic";
}

struct ComputationalGraph {
    const StructuralModel* model = nullptr;
    std::size_t mso_id = 0;
    std::vector<std::size_t> equations;  // whole MSO, sorted
    std::size_t residual_equation = 0;
    Matching matching;                   // remainder equation -> computed variable
    std::vector<std::size_t> integration_nodes;
    std::vector<std::size_t> differentiation_nodes;
    std::vector<std::size_t> evaluation_order;  // remainder equations, inputs before consumers

    /// Equation computing `variable`, or `unmatched` for known signals.
    std::size_t producer_of(std::size_t variable) const { return matching.equation_of(variable); }

    std::size_t output_of(std::size_t equation) const { return matching.variable_of(equation); }

    /// Variables feeding an equation node; the residual node consumes all of
    /// its variables.
    std::vector<std::size_t> inputs_of(std::size_t equation) const {
        std::vector<std::size_t> out;
        auto produced = equation == residual_equation ? unmatched : output_of(equation);
        for (auto v : model->variables_of(equation)) {
            if (v != produced) out.push_back(v);
        }
        return out;
    }

    bool is_integration(std::size_t equation) const {
        return std::find(integration_nodes.begin(), integration_nodes.end(), equation) != integration_nodes.end();
    }
};

namespace detail {

struct RemainderProblem {
    std::vector<std::size_t> equations;  // remainder, sorted
    std::vector<std::size_t> unknowns;   // of the whole MSO
};

/// Integration nodes of a matching: link equations that produce the state.
inline void classify_links(const StructuralModel& m, const Matching& matching, std::vector<std::size_t>& integ,
                           std::vector<std::size_t>& diff) {
    integ.clear();
    diff.clear();
    for (const auto& [e, v] : matching.pairs) {
        if (auto link = m.link_of_equation(e)) {
            (v == link->state ? integ : diff).push_back(e);
        }
    }
    std::sort(integ.begin(), integ.end());
    std::sort(diff.begin(), diff.end());
}

/// Kahn ordering of remainder equations. An integrated state is available
/// from the previous time step, so integration outputs impose no ordering.
inline std::optional<std::vector<std::size_t>> evaluation_order(const StructuralModel& m,
                                                                const std::vector<std::size_t>& equations,
                                                                const Matching& matching) {
    std::vector<std::size_t> integ, diff;
    classify_links(m, matching, integ, diff);
    std::map<std::size_t, std::size_t> indegree;
    std::map<std::size_t, std::vector<std::size_t>> consumers;
    for (auto e : equations) indegree[e] = 0;
    for (auto e : equations) {
        auto out = matching.variable_of(e);
        for (auto v : m.variables_of(e)) {
            if (v == out || !m.is_unknown(v)) continue;
            auto p = matching.equation_of(v);
            if (p == unmatched || std::binary_search(integ.begin(), integ.end(), p)) continue;
            consumers[p].push_back(e);
            ++indegree[e];
        }
    }
    std::set<std::size_t> ready;
    for (const auto& [e, d] : indegree) {
        if (d == 0) ready.insert(e);
    }
    std::vector<std::size_t> order;
    while (!ready.empty()) {
        auto e = *ready.begin();
        ready.erase(ready.begin());
        order.push_back(e);
        for (auto c : consumers[e]) {
            if (--indegree[c] == 0) ready.insert(c);
        }
    }
    if (order.size() != equations.size()) return std::nullopt;
    return order;
}

inline RemainderProblem remainder_of(const StructuralModel& m, const std::vector<std::size_t>& mso,
                                     std::size_t residual) {
    if (!std::binary_search(mso.begin(), mso.end(), residual)) {
        throw CausalityError("residual equation '" + m.equation_name(residual) + "' is not in the set");
    }
    RemainderProblem p;
    for (auto e : mso) {
        if (e != residual) p.equations.push_back(e);
    }
    p.unknowns = SubModel(m, mso).unknowns();
    return p;
}

struct MatchingChoice {
    Matching matching;
    bool has_loop = false;
};

/// Picks, among all perfect matchings of the remainder, the one with the
/// fewest differentiation nodes, then without algebraic loops, then the
/// lexicographically smallest list of matched variable names.
inline std::optional<MatchingChoice> choose_matching(const StructuralModel& m, const RemainderProblem& p,
                                                      std::size_t enumeration_cap = 200000) {
    const auto n = p.equations.size();
    if (n != p.unknowns.size()) return std::nullopt;

    std::vector<std::vector<std::size_t>> options(n);
    for (std::size_t r = 0; r < n; ++r) options[r] = m.unknowns_of(p.equations[r]);

    std::vector<std::size_t> assign(n, unmatched);
    std::set<std::size_t> used;
    std::optional<MatchingChoice> best;
    std::tuple<std::size_t, bool, std::vector<std::string>> best_key;
    std::size_t visited = 0;

    auto to_matching = [&]() {
        Matching mt;
        for (std::size_t r = 0; r < n; ++r) mt.pairs.emplace_back(p.equations[r], assign[r]);
        return mt;
    };

    auto recurse = [&](auto&& self, std::size_t r, std::size_t diffs) -> void {
        if (visited >= enumeration_cap) return;
        if (best && diffs > std::get<0>(best_key)) return;
        if (r == n) {
            ++visited;
            auto mt = to_matching();
            bool loop = !evaluation_order(m, p.equations, mt).has_value();
            std::vector<std::string> names;
            for (auto v : assign) names.push_back(m.variable(v).name);
            auto key = std::make_tuple(diffs, loop, std::move(names));
            if (!best || key < best_key) {
                best_key = std::move(key);
                best = MatchingChoice{std::move(mt), loop};
            }
            return;
        }
        auto link = m.link_of_equation(p.equations[r]);
        for (auto v : options[r]) {
            if (used.count(v)) continue;
            used.insert(v);
            assign[r] = v;
            bool is_diff = link && v == link->derivative;
            self(self, r + 1, diffs + (is_diff ? 1 : 0));
            used.erase(v);
            assign[r] = unmatched;
        }
    };
    recurse(recurse, 0, 0);
    return best;
}

}  // namespace detail

/// Perfect matching of the MSO minus the residual equation onto the MSO's
/// unknowns, chosen to minimise differentiation nodes.
inline Matching match_remainder(const MSOSet& mso, std::size_t residual_equation, const StructuralModel& m) {
    auto problem = detail::remainder_of(m, mso.equations, residual_equation);
    auto choice = detail::choose_matching(m, problem);
    if (!choice) {
        throw CausalityError("no perfect matching of the remainder for residual '" +
                             m.equation_name(residual_equation) + "'");
    }
    return choice->matching;
}

inline ComputationalGraph build_comp_graph(const MSOSet& mso, std::size_t residual_equation,
                                           const StructuralModel& m) {
    auto problem = detail::remainder_of(m, mso.equations, residual_equation);
    auto choice = detail::choose_matching(m, problem);
    if (!choice) {
        throw CausalityError("no perfect matching of the remainder for residual '" +
                             m.equation_name(residual_equation) + "'");
    }
    auto order = detail::evaluation_order(m, problem.equations, choice->matching);
    if (!order) {
        throw AlgebraicLoopError("algebraic loop in the computational graph of MSO " + std::to_string(mso.id) +
                                 " with residual '" + m.equation_name(residual_equation) + "'");
    }
    ComputationalGraph g;
    g.model = &m;
    g.mso_id = mso.id;
    g.equations = mso.equations;
    g.residual_equation = residual_equation;
    g.matching = std::move(choice->matching);
    detail::classify_links(m, g.matching, g.integration_nodes, g.differentiation_nodes);
    g.evaluation_order = std::move(*order);
    return g;
}

inline Causality causality_of(const ComputationalGraph& g) {
    bool integ = !g.integration_nodes.empty();
    bool diff = !g.differentiation_nodes.empty();
    if (integ && diff) return Causality::mixed;
    if (integ) return Causality::integral;
    if (diff) return Causality::derivative;
    return Causality::algebraic;
}

struct IntegralCandidate {
    MSOSet mso;
    std::size_t residual_equation = 0;
};

/// Sensor-equation residuals whose computational graph has integral
/// causality. `sensor_filter`, when given, lists allowed residual equations
/// or measured signals by name.
inline std::vector<IntegralCandidate> enumerate_integral_candidates(
    const std::vector<MSOSet>& msos, const StructuralModel& m,
    const std::optional<std::vector<std::string>>& sensor_filter = std::nullopt) {
    auto allowed = [&](const SensorEquation& s) {
        if (!sensor_filter) return true;
        const auto& f = *sensor_filter;
        return std::find(f.begin(), f.end(), m.equation_name(s.equation)) != f.end() ||
               std::find(f.begin(), f.end(), m.variable(s.measured).name) != f.end();
    };
    std::vector<IntegralCandidate> out;
    for (const auto& mso : msos) {
        for (auto e : mso.equations) {
            auto sensor = std::find_if(m.sensors().begin(), m.sensors().end(),
                                       [&](const SensorEquation& s) { return s.equation == e; });
            if (sensor == m.sensors().end() || !allowed(*sensor)) continue;
            try {
                auto g = build_comp_graph(mso, e, m);
                if (causality_of(g) == Causality::integral) out.push_back({mso, e});
            } catch (const CausalityError&) {
                // no perfect matching or algebraic loop: not a usable generator
            }
        }
    }
    return out;
}

/// Argument structure of x' = g(x, u), r = y - h(x, u). All ids are names so
/// the structure is self-contained once written to disk.
struct StateSpaceStructure {
    std::size_t mso_id = 0;
    std::string residual_equation;
    std::string output;  // measured signal y
    std::vector<std::string> states;
    std::vector<std::string> inputs;
    std::vector<std::vector<std::string>> g_args;  // per state
    std::vector<std::string> h_args;

    bool operator==(const StateSpaceStructure&) const = default;

    std::string name() const { return "mso" + std::to_string(mso_id) + "_" + residual_equation; }

    std::string to_text() const {
        std::ostringstream out;
        auto list = [&](const std::vector<std::string>& xs) {
            for (const auto& x : xs) out << ' ' << x;
        };
        out << "structure 1\n";
        out << "mso " << mso_id << '\n';
        out << "residual " << residual_equation << '\n';
        out << "output " << output << '\n';
        out << "states";
        list(states);
        out << "\ninputs";
        list(inputs);
        out << '\n';
        for (std::size_t i = 0; i < states.size(); ++i) {
            out << "g " << states[i] << " :";
            list(g_args[i]);
            out << '\n';
        }
        out << "h :";
        list(h_args);
        out << '\n';
        return out.str();
    }

    static StateSpaceStructure parse(std::string_view text) {
        StateSpaceStructure s;
        std::istringstream in{std::string(text)};
        std::string line;
        bool header = false;
        std::map<std::string, std::vector<std::string>> g;
        bool have_h = false;
        while (std::getline(in, line)) {
            auto tok = detail::split_ws(detail::trim(line));
            if (tok.empty()) continue;
            const auto& key = tok[0];
            std::vector<std::string> rest(tok.begin() + 1, tok.end());
            if (key == "structure") {
                if (rest != std::vector<std::string>{"1"}) throw ModelError("unsupported structure version");
                header = true;
            } else if (key == "mso" && rest.size() == 1) {
                s.mso_id = std::stoul(rest[0]);
            } else if (key == "residual" && rest.size() == 1) {
                s.residual_equation = rest[0];
            } else if (key == "output" && rest.size() == 1) {
                s.output = rest[0];
            } else if (key == "states") {
                s.states = rest;
            } else if (key == "inputs") {
                s.inputs = rest;
            } else if (key == "g" && rest.size() >= 2 && rest[1] == ":") {
                g[rest[0]] = std::vector<std::string>(rest.begin() + 2, rest.end());
            } else if (key == "h" && !rest.empty() && rest[0] == ":") {
                s.h_args = std::vector<std::string>(rest.begin() + 1, rest.end());
                have_h = true;
            } else {
                throw ModelError("malformed structure line '" + line + "'");
            }
        }
        if (!header || !have_h || s.output.empty()) throw ModelError("incomplete structure text");
        for (const auto& x : s.states) {
            auto it = g.find(x);
            if (it == g.end()) throw ModelError("structure lacks arguments of g for state '" + x + "'");
            s.g_args.push_back(it->second);
        }
        s.validate();
        return s;
    }

    void validate() const {
        if (g_args.size() != states.size()) throw ModelError("one argument list per state required");
        auto known = [&](const std::string& a) {
            return std::find(states.begin(), states.end(), a) != states.end() ||
                   std::find(inputs.begin(), inputs.end(), a) != inputs.end();
        };
        for (const auto& args : g_args) {
            for (const auto& a : args) {
                if (!known(a)) throw ModelError("argument '" + a + "' is neither a state nor an input");
            }
        }
        for (const auto& a : h_args) {
            if (!known(a)) throw ModelError("argument '" + a + "' is neither a state nor an input");
        }
    }

    /// FNV-1a over the canonical text.
    std::uint64_t hash() const {
        std::uint64_t h = 14695981039346656037ULL;
        for (unsigned char c : to_text()) {
            h ^= c;
            h *= 1099511628211ULL;
        }
        return h;
    }
};

/// Backtracks from every integrated state's derivative (and from the
/// residual node) to the states and known signals it depends on.
inline StateSpaceStructure extract_state_space(const ComputationalGraph& g) {
    if (causality_of(g) != Causality::integral) {
        throw CausalityError("state-space extraction requires integral causality, graph is " +
                             std::string(to_string(causality_of(g))));
    }
    const auto& m = *g.model;
    auto measured = m.sensor_measured_by(g.residual_equation);
    if (!measured) {
        throw CausalityError("residual equation '" + m.equation_name(g.residual_equation) +
                             "' is not a sensor equation");
    }

    std::vector<std::size_t> states, derivatives;
    for (auto e : g.integration_nodes) {
        auto link = *m.link_of_equation(e);
        states.push_back(link.state);
    }
    std::sort(states.begin(), states.end());
    for (auto x : states) {
        for (const auto& l : m.links()) {
            if (l.state == x) derivatives.push_back(l.derivative);
        }
    }
    auto is_state = [&](std::size_t v) { return std::binary_search(states.begin(), states.end(), v); };

    // Returns the set of states and known signals reachable backwards from
    // the inputs of `equation`.
    auto backtrack = [&](std::size_t equation, std::optional<std::size_t> skip) {
        std::set<std::size_t> reached, seen_eq;
        std::vector<std::size_t> stack{equation};
        while (!stack.empty()) {
            auto e = stack.back();
            stack.pop_back();
            if (!seen_eq.insert(e).second) continue;
            for (auto v : g.inputs_of(e)) {
                if (skip && e == equation && v == *skip) continue;
                if (m.is_known(v) || is_state(v)) {
                    reached.insert(v);
                } else {
                    auto p = g.producer_of(v);
                    if (p == unmatched) throw CausalityError("variable '" + m.variable(v).name + "' has no producer");
                    stack.push_back(p);
                }
            }
        }
        return reached;
    };

    std::vector<std::set<std::size_t>> g_sets;
    std::set<std::size_t> all_inputs;
    for (auto d : derivatives) {
        auto p = g.producer_of(d);
        if (p == unmatched) throw CausalityError("derivative '" + m.variable(d).name + "' has no producer");
        g_sets.push_back(backtrack(p, std::nullopt));
    }
    auto h_set = backtrack(g.residual_equation, *measured);
    for (const auto& s : g_sets) {
        for (auto v : s) {
            if (!is_state(v)) all_inputs.insert(v);
        }
    }
    for (auto v : h_set) {
        if (!is_state(v)) all_inputs.insert(v);
    }

    auto ordered = [&](const std::set<std::size_t>& s) {
        std::vector<std::string> out;
        for (auto x : states) {
            if (s.count(x)) out.push_back(m.variable(x).name);
        }
        for (auto u : all_inputs) {
            if (s.count(u)) out.push_back(m.variable(u).name);
        }
        return out;
    };

    StateSpaceStructure out;
    out.mso_id = g.mso_id;
    out.residual_equation = m.equation_name(g.residual_equation);
    out.output = m.variable(*measured).name;
    for (auto x : states) out.states.push_back(m.variable(x).name);
    for (auto u : all_inputs) out.inputs.push_back(m.variable(u).name);
    for (const auto& s : g_sets) out.g_args.push_back(ordered(s));
    out.h_args = ordered(h_set);

    for (auto x : states) {
        bool used = h_set.count(x) > 0;
        for (const auto& s : g_sets) used = used || s.count(x) > 0;
        if (!used) throw CausalityError("state '" + m.variable(x).name + "' never reaches the residual");
    }
    return out;
}

/// DOT text of a computational graph: plain nodes for variables, circles for
/// equations, integration and differentiation nodes annotated.
inline std::string to_dot(const ComputationalGraph& g) {
    const auto& m = *g.model;
    std::ostringstream out;
    out << "digraph \"mso" << g.mso_id << "_" << m.equation_name(g.residual_equation) << "\" {\n";
    out << "  rankdir=LR;\n";
    out << "  // causality: " << to_string(causality_of(g)) << "\n";
    std::set<std::size_t> vars;
    for (auto e : g.equations) {
        for (auto v : m.variables_of(e)) vars.insert(v);
    }
    for (auto v : vars) out << "  \"" << m.variable(v).name << "\" [shape=plaintext];\n";
    for (auto e : g.equations) {
        std::string label = m.equation_name(e);
        if (std::find(g.integration_nodes.begin(), g.integration_nodes.end(), e) != g.integration_nodes.end()) {
            label += " (int)";
        } else if (std::find(g.differentiation_nodes.begin(), g.differentiation_nodes.end(), e) !=
                   g.differentiation_nodes.end()) {
            label += " (d/dt)";
        }
        out << "  \"" << m.equation_name(e) << "\" [shape=circle, label=\"" << label << "\"];\n";
    }
    out << "  \"r\" [shape=plaintext];\n";
    for (auto e : g.evaluation_order) {
        for (auto v : g.inputs_of(e)) out << "  \"" << m.variable(v).name << "\" -> \"" << m.equation_name(e) << "\";\n";
        out << "  \"" << m.equation_name(e) << "\" -> \"" << m.variable(g.output_of(e)).name << "\";\n";
    }
    for (auto v : g.inputs_of(g.residual_equation)) {
        out << "  \"" << m.variable(v).name << "\" -> \"" << m.equation_name(g.residual_equation) << "\";\n";
    }
    out << "  \"" << m.equation_name(g.residual_equation) << "\" -> \"r\";\n";
    out << "}\n";
    return out.str();
}

}  // namespace greybox
