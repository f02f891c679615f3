#pragma once

// Structural (bipartite equation/variable) models with differential links,
// fault annotations and sensor equations, plus the line-oriented model file
// format used by every other stage of the toolkit.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace greybox {

class ModelError : public std::runtime_error {
public:
    explicit ModelError(const std::string& what, std::size_t line = 0)
        : std::runtime_error(line == 0 ? what : "line " + std::to_string(line) + ": " + what),
          line_(line) {}

    /// Source line of a parse error, 0 when the error is not tied to a line.
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

enum class VariableKind { unknown, state, derivative, known, fault };

inline std::string_view to_string(VariableKind kind) {
    switch (kind) {
    case VariableKind::unknown: return "unknown";
    case VariableKind::state: return "state";
    case VariableKind::derivative: return "derivative";
    case VariableKind::known: return "known";
    case VariableKind::fault: return "fault";
    }
    return "unknown";
}

inline std::optional<VariableKind> parse_variable_kind(std::string_view text) {
    if (text == "unknown") return VariableKind::unknown;
    if (text == "state") return VariableKind::state;
    if (text == "derivative") return VariableKind::derivative;
    if (text == "known") return VariableKind::known;
    if (text == "fault") return VariableKind::fault;
    return std::nullopt;
}

struct Variable {
    std::string name;
    VariableKind kind = VariableKind::unknown;

    bool operator==(const Variable&) const = default;
};

/// x' = dx/dt encoded as an explicit equation incident to exactly the state
/// and its derivative.
struct DifferentialLink {
    std::size_t state = 0;
    std::size_t derivative = 0;
    std::size_t equation = 0;

    bool operator==(const DifferentialLink&) const = default;
};

struct FaultLocation {
    std::size_t fault = 0;     // variable index, kind == fault
    std::size_t equation = 0;

    bool operator==(const FaultLocation&) const = default;
};

struct SensorEquation {
    std::size_t equation = 0;
    std::size_t measured = 0;  // variable index, kind == known

    bool operator==(const SensorEquation&) const = default;
};

inline bool is_unknown_kind(VariableKind kind) {
    return kind == VariableKind::unknown || kind == VariableKind::state ||
           kind == VariableKind::derivative;
}

/// Immutable, validated structural model. Equations and variables are kept in
/// declaration order; all cross references are indices into those lists.
class StructuralModel {
public:
    StructuralModel() = default;

    /// `incidence[e]` lists the (non-fault) variables of equation e. Faults
    /// enter only through `faults`. Throws ModelError when any invariant fails.
    StructuralModel(std::vector<std::string> equations, std::vector<Variable> variables,
                    std::vector<std::vector<std::size_t>> incidence,
                    std::vector<DifferentialLink> links, std::vector<FaultLocation> faults,
                    std::vector<SensorEquation> sensors)
        : equations_(std::move(equations)),
          variables_(std::move(variables)),
          incidence_(std::move(incidence)),
          links_(std::move(links)),
          faults_(std::move(faults)),
          sensors_(std::move(sensors)) {
        for (auto& row : incidence_) {
            std::sort(row.begin(), row.end());
        }
        validate();
    }

    std::size_t equation_count() const { return equations_.size(); }
    std::size_t variable_count() const { return variables_.size(); }

    const std::string& equation_name(std::size_t e) const { return equations_.at(e); }
    const std::vector<std::string>& equation_names() const { return equations_; }
    const Variable& variable(std::size_t v) const { return variables_.at(v); }
    const std::vector<Variable>& variables() const { return variables_; }

    /// Sorted variable indices (unknown and known, never faults) of equation e.
    const std::vector<std::size_t>& variables_of(std::size_t e) const { return incidence_.at(e); }

    std::vector<std::size_t> unknowns_of(std::size_t e) const {
        std::vector<std::size_t> out;
        for (auto v : incidence_.at(e)) {
            if (is_unknown(v)) out.push_back(v);
        }
        return out;
    }

    std::vector<std::size_t> knowns_of(std::size_t e) const {
        std::vector<std::size_t> out;
        for (auto v : incidence_.at(e)) {
            if (variables_[v].kind == VariableKind::known) out.push_back(v);
        }
        return out;
    }

    bool is_unknown(std::size_t v) const { return is_unknown_kind(variables_.at(v).kind); }
    bool is_known(std::size_t v) const { return variables_.at(v).kind == VariableKind::known; }

    bool incident(std::size_t e, std::size_t v) const {
        const auto& row = incidence_.at(e);
        return std::binary_search(row.begin(), row.end(), v);
    }

    const std::vector<DifferentialLink>& links() const { return links_; }
    const std::vector<FaultLocation>& faults() const { return faults_; }
    const std::vector<SensorEquation>& sensors() const { return sensors_; }

    std::optional<DifferentialLink> link_of_equation(std::size_t e) const {
        for (const auto& l : links_) {
            if (l.equation == e) return l;
        }
        return std::nullopt;
    }

    std::optional<std::size_t> sensor_measured_by(std::size_t e) const {
        for (const auto& s : sensors_) {
            if (s.equation == e) return s.measured;
        }
        return std::nullopt;
    }

    bool is_sensor_equation(std::size_t e) const { return sensor_measured_by(e).has_value(); }

    std::optional<std::size_t> find_equation(std::string_view name) const {
        for (std::size_t i = 0; i < equations_.size(); ++i) {
            if (equations_[i] == name) return i;
        }
        return std::nullopt;
    }

    std::optional<std::size_t> find_variable(std::string_view name) const {
        for (std::size_t i = 0; i < variables_.size(); ++i) {
            if (variables_[i].name == name) return i;
        }
        return std::nullopt;
    }

    std::size_t equation_index(std::string_view name) const {
        if (auto e = find_equation(name)) return *e;
        throw ModelError("unknown equation '" + std::string(name) + "'");
    }

    std::size_t variable_index(std::string_view name) const {
        if (auto v = find_variable(name)) return *v;
        throw ModelError("unknown variable '" + std::string(name) + "'");
    }

    std::vector<std::size_t> unknown_variables() const { return variables_of_kind(true); }

    std::vector<std::size_t> known_variables() const {
        std::vector<std::size_t> out;
        for (std::size_t v = 0; v < variables_.size(); ++v) {
            if (variables_[v].kind == VariableKind::known) out.push_back(v);
        }
        return out;
    }

    std::vector<std::size_t> fault_variables() const {
        std::vector<std::size_t> out;
        for (std::size_t v = 0; v < variables_.size(); ++v) {
            if (variables_[v].kind == VariableKind::fault) out.push_back(v);
        }
        return out;
    }

    /// Equation where the fault enters (e_f).
    std::size_t fault_equation(std::size_t fault) const {
        for (const auto& f : faults_) {
            if (f.fault == fault) return f.equation;
        }
        throw ModelError("variable '" + variables_.at(fault).name + "' is not a fault");
    }

    bool operator==(const StructuralModel&) const = default;

private:
    std::vector<std::size_t> variables_of_kind(bool unknown) const {
        std::vector<std::size_t> out;
        for (std::size_t v = 0; v < variables_.size(); ++v) {
            if (is_unknown(v) == unknown && variables_[v].kind != VariableKind::fault) out.push_back(v);
        }
        return out;
    }

    void validate() const {
        std::map<std::string, int, std::less<>> seen;
        for (const auto& name : equations_) {
            if (name.empty()) throw ModelError("empty equation name");
            if (seen[name]++) throw ModelError("duplicate equation '" + name + "'");
        }
        seen.clear();
        for (const auto& var : variables_) {
            if (var.name.empty()) throw ModelError("empty variable name");
            if (seen[var.name]++) throw ModelError("duplicate variable '" + var.name + "'");
        }
        if (incidence_.size() != equations_.size()) {
            throw ModelError("incidence has " + std::to_string(incidence_.size()) + " rows for " +
                             std::to_string(equations_.size()) + " equations");
        }
        for (std::size_t e = 0; e < incidence_.size(); ++e) {
            const auto& row = incidence_[e];
            for (std::size_t k = 0; k < row.size(); ++k) {
                if (row[k] >= variables_.size()) {
                    throw ModelError("equation '" + equations_[e] + "' references an undeclared variable");
                }
                if (k > 0 && row[k] == row[k - 1]) {
                    throw ModelError("equation '" + equations_[e] + "' lists '" + variables_[row[k]].name +
                                     "' twice");
                }
                if (variables_[row[k]].kind == VariableKind::fault) {
                    throw ModelError("fault '" + variables_[row[k]].name + "' listed in equation '" +
                                     equations_[e] + "'; declare it under @faults instead");
                }
            }
        }

        std::vector<int> state_links(variables_.size(), 0), derivative_links(variables_.size(), 0);
        for (const auto& l : links_) {
            if (l.state >= variables_.size() || l.derivative >= variables_.size() ||
                l.equation >= equations_.size()) {
                throw ModelError("link references an undeclared id");
            }
            const auto& s = variables_[l.state];
            const auto& d = variables_[l.derivative];
            if (s.kind != VariableKind::state) throw ModelError("link source '" + s.name + "' is not a state");
            if (d.kind != VariableKind::derivative) {
                throw ModelError("link target '" + d.name + "' is not a derivative");
            }
            const auto& row = incidence_[l.equation];
            std::vector<std::size_t> expected{l.state, l.derivative};
            std::sort(expected.begin(), expected.end());
            if (row != expected) {
                throw ModelError("link equation '" + equations_[l.equation] + "' must be incident to exactly '" +
                                 s.name + "' and '" + d.name + "'");
            }
            if (state_links[l.state]++) throw ModelError("state '" + s.name + "' linked twice");
            if (derivative_links[l.derivative]++) throw ModelError("derivative '" + d.name + "' linked twice");
        }
        for (std::size_t i = 0; i < links_.size(); ++i) {
            for (std::size_t j = i + 1; j < links_.size(); ++j) {
                if (links_[i].equation == links_[j].equation) {
                    throw ModelError("equation '" + equations_[links_[i].equation] + "' defines two links");
                }
            }
        }
        for (std::size_t v = 0; v < variables_.size(); ++v) {
            if (variables_[v].kind == VariableKind::state && state_links[v] == 0) {
                throw ModelError("unlinked state '" + variables_[v].name + "'");
            }
            if (variables_[v].kind == VariableKind::derivative && derivative_links[v] == 0) {
                throw ModelError("unlinked derivative '" + variables_[v].name + "'");
            }
        }

        std::vector<int> fault_count(variables_.size(), 0);
        for (const auto& f : faults_) {
            if (f.fault >= variables_.size() || f.equation >= equations_.size()) {
                throw ModelError("fault location references an undeclared id");
            }
            if (variables_[f.fault].kind != VariableKind::fault) {
                throw ModelError("'" + variables_[f.fault].name + "' is not declared as a fault");
            }
            if (fault_count[f.fault]++) {
                throw ModelError("fault '" + variables_[f.fault].name + "' mapped to more than one equation");
            }
        }
        for (std::size_t v = 0; v < variables_.size(); ++v) {
            if (variables_[v].kind == VariableKind::fault && fault_count[v] == 0) {
                throw ModelError("fault '" + variables_[v].name + "' has no equation");
            }
        }

        std::vector<int> sensor_eq(equations_.size(), 0);
        for (const auto& s : sensors_) {
            if (s.equation >= equations_.size() || s.measured >= variables_.size()) {
                throw ModelError("sensor references an undeclared id");
            }
            const auto& eq = equations_[s.equation];
            if (sensor_eq[s.equation]++) throw ModelError("equation '" + eq + "' declared as sensor twice");
            if (variables_[s.measured].kind != VariableKind::known) {
                throw ModelError("sensor equation '" + eq + "' measures '" + variables_[s.measured].name +
                                 "', which is not a known variable");
            }
            if (knowns_of(s.equation) != std::vector<std::size_t>{s.measured}) {
                throw ModelError("sensor equation '" + eq + "' must be incident to exactly one known variable, '" +
                                 variables_[s.measured].name + "'");
            }
        }
    }

    std::vector<std::string> equations_;
    std::vector<Variable> variables_;
    std::vector<std::vector<std::size_t>> incidence_;
    std::vector<DifferentialLink> links_;
    std::vector<FaultLocation> faults_;
    std::vector<SensorEquation> sensors_;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
    const auto* ws = " \t\r";
    auto b = s.find_first_not_of(ws);
    if (b == std::string_view::npos) return {};
    auto e = s.find_last_not_of(ws);
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_ws(std::string_view s) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
        std::size_t j = i;
        while (j < s.size() && s[j] != ' ' && s[j] != '\t') ++j;
        if (j > i) out.emplace_back(s.substr(i, j - i));
        i = j;
    }
    return out;
}

}  // namespace detail

/// Parses the model file format:
///
///     @variables        name kind        (kind: unknown|state|derivative|known|fault)
///     @equations        eq : v1 v2 ...
///     @links            state derivative via eq
///     @faults           fault in eq
///     @sensors          eq measures knownvar
///
/// `#` starts a comment. Errors carry the offending line number.
inline StructuralModel parse_model(std::string_view text) {
    enum class Section { none, variables, equations, links, faults, sensors };
    Section section = Section::none;

    std::vector<Variable> variables;
    std::map<std::string, std::size_t, std::less<>> var_index;
    std::vector<std::string> equations;
    std::map<std::string, std::size_t, std::less<>> eq_index;
    std::vector<std::vector<std::string>> eq_vars;
    std::vector<std::size_t> eq_lines;

    struct Pending {
        std::vector<std::string> tokens;
        std::size_t line;
    };
    std::vector<Pending> links, faults, sensors;

    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        auto nl = text.find('\n', pos);
        auto raw = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
        ++line_no;

        if (auto hash = raw.find('#'); hash != std::string_view::npos) raw = raw.substr(0, hash);
        auto line = detail::trim(raw);
        if (line.empty()) continue;

        if (line.front() == '@') {
            if (line == "@variables") section = Section::variables;
            else if (line == "@equations") section = Section::equations;
            else if (line == "@links") section = Section::links;
            else if (line == "@faults") section = Section::faults;
            else if (line == "@sensors") section = Section::sensors;
            else throw ModelError("unknown section header '" + std::string(line) + "'", line_no);
            continue;
        }

        switch (section) {
        case Section::none:
            throw ModelError("content before first section header", line_no);
        case Section::variables: {
            auto tok = detail::split_ws(line);
            if (tok.size() != 2) throw ModelError("expected 'name kind'", line_no);
            auto kind = parse_variable_kind(tok[1]);
            if (!kind) throw ModelError("unknown variable kind '" + tok[1] + "'", line_no);
            if (var_index.count(tok[0])) throw ModelError("duplicate variable '" + tok[0] + "'", line_no);
            var_index.emplace(tok[0], variables.size());
            variables.push_back({tok[0], *kind});
            break;
        }
        case Section::equations: {
            auto colon = line.find(':');
            if (colon == std::string_view::npos) throw ModelError("expected 'name : variables'", line_no);
            auto name = detail::split_ws(line.substr(0, colon));
            if (name.size() != 1) throw ModelError("equation name must be a single token", line_no);
            if (eq_index.count(name[0])) throw ModelError("duplicate equation '" + name[0] + "'", line_no);
            eq_index.emplace(name[0], equations.size());
            equations.push_back(name[0]);
            eq_vars.push_back(detail::split_ws(line.substr(colon + 1)));
            eq_lines.push_back(line_no);
            break;
        }
        case Section::links: {
            auto tok = detail::split_ws(line);
            if (tok.size() != 4 || tok[2] != "via") throw ModelError("expected 'state derivative via eq'", line_no);
            links.push_back({std::move(tok), line_no});
            break;
        }
        case Section::faults: {
            auto tok = detail::split_ws(line);
            if (tok.size() != 3 || tok[1] != "in") throw ModelError("expected 'fault in eq'", line_no);
            faults.push_back({std::move(tok), line_no});
            break;
        }
        case Section::sensors: {
            auto tok = detail::split_ws(line);
            if (tok.size() != 3 || tok[1] != "measures") throw ModelError("expected 'eq measures var'", line_no);
            sensors.push_back({std::move(tok), line_no});
            break;
        }
        }
    }

    auto lookup_var = [&](const std::string& name, std::size_t line) {
        auto it = var_index.find(name);
        if (it == var_index.end()) throw ModelError("undeclared variable '" + name + "'", line);
        return it->second;
    };
    auto lookup_eq = [&](const std::string& name, std::size_t line) {
        auto it = eq_index.find(name);
        if (it == eq_index.end()) throw ModelError("undeclared equation '" + name + "'", line);
        return it->second;
    };

    std::vector<std::vector<std::size_t>> incidence(equations.size());
    for (std::size_t e = 0; e < equations.size(); ++e) {
        for (const auto& name : eq_vars[e]) {
            auto v = lookup_var(name, eq_lines[e]);
            if (std::find(incidence[e].begin(), incidence[e].end(), v) != incidence[e].end()) {
                throw ModelError("variable '" + name + "' listed twice", eq_lines[e]);
            }
            incidence[e].push_back(v);
        }
    }

    std::vector<DifferentialLink> link_list;
    for (const auto& p : links) {
        link_list.push_back({lookup_var(p.tokens[0], p.line), lookup_var(p.tokens[1], p.line),
                             lookup_eq(p.tokens[3], p.line)});
    }
    std::vector<FaultLocation> fault_list;
    for (const auto& p : faults) {
        fault_list.push_back({lookup_var(p.tokens[0], p.line), lookup_eq(p.tokens[2], p.line)});
    }
    std::vector<SensorEquation> sensor_list;
    for (const auto& p : sensors) {
        sensor_list.push_back({lookup_eq(p.tokens[0], p.line), lookup_var(p.tokens[2], p.line)});
    }

    return StructuralModel(std::move(equations), std::move(variables), std::move(incidence),
                           std::move(link_list), std::move(fault_list), std::move(sensor_list));
}

/// Canonical text: every section header is always present, entries follow
/// declaration order.
inline std::string serialize_model(const StructuralModel& m) {
    std::ostringstream out;
    out << "@variables\n";
    for (const auto& v : m.variables()) out << v.name << ' ' << to_string(v.kind) << '\n';
    out << "@equations\n";
    for (std::size_t e = 0; e < m.equation_count(); ++e) {
        out << m.equation_name(e) << " :";
        for (auto v : m.variables_of(e)) out << ' ' << m.variable(v).name;
        out << '\n';
    }
    out << "@links\n";
    for (const auto& l : m.links()) {
        out << m.variable(l.state).name << ' ' << m.variable(l.derivative).name << " via "
            << m.equation_name(l.equation) << '\n';
    }
    out << "@faults\n";
    for (const auto& f : m.faults()) {
        out << m.variable(f.fault).name << " in " << m.equation_name(f.equation) << '\n';
    }
    out << "@sensors\n";
    for (const auto& s : m.sensors()) {
        out << m.equation_name(s.equation) << " measures " << m.variable(s.measured).name << '\n';
    }
    return out.str();
}

/// Boolean equations x variables matrix with columns grouped unknowns (X),
/// faults (F), knowns (Z).
struct IncidenceMatrix {
    std::vector<std::string> row_labels;
    std::vector<std::string> column_labels;
    std::size_t unknown_columns = 0;
    std::size_t fault_columns = 0;
    std::size_t known_columns = 0;
    std::vector<std::uint8_t> cells;

    std::size_t rows() const { return row_labels.size(); }
    std::size_t cols() const { return column_labels.size(); }
    bool operator()(std::size_t r, std::size_t c) const { return cells[r * cols() + c] != 0; }

    std::size_t count() const {
        return static_cast<std::size_t>(std::count(cells.begin(), cells.end(), std::uint8_t{1}));
    }
};

inline IncidenceMatrix incidence_matrix(const StructuralModel& m) {
    IncidenceMatrix out;
    std::vector<std::size_t> columns;
    auto unknowns = m.unknown_variables();
    auto faults = m.fault_variables();
    auto knowns = m.known_variables();
    columns.insert(columns.end(), unknowns.begin(), unknowns.end());
    columns.insert(columns.end(), faults.begin(), faults.end());
    columns.insert(columns.end(), knowns.begin(), knowns.end());
    out.unknown_columns = unknowns.size();
    out.fault_columns = faults.size();
    out.known_columns = knowns.size();
    for (auto v : columns) out.column_labels.push_back(m.variable(v).name);
    out.row_labels = m.equation_names();
    out.cells.assign(out.rows() * out.cols(), 0);
    for (std::size_t e = 0; e < m.equation_count(); ++e) {
        for (std::size_t c = 0; c < columns.size(); ++c) {
            auto v = columns[c];
            bool hit = m.variable(v).kind == VariableKind::fault ? m.fault_equation(v) == e : m.incident(e, v);
            out.cells[e * out.cols() + c] = hit ? 1 : 0;
        }
    }
    return out;
}

/// Equation subset of a parent model. The parent must outlive the submodel;
/// induced variables are recomputed on every call.
class SubModel {
public:
    SubModel(const StructuralModel& parent, std::vector<std::size_t> equations)
        : parent_(&parent), equations_(std::move(equations)) {
        std::sort(equations_.begin(), equations_.end());
        equations_.erase(std::unique(equations_.begin(), equations_.end()), equations_.end());
        if (!equations_.empty() && equations_.back() >= parent.equation_count()) {
            throw ModelError("equation index " + std::to_string(equations_.back()) + " out of range");
        }
    }

    static SubModel full(const StructuralModel& parent) {
        std::vector<std::size_t> all(parent.equation_count());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        return SubModel(parent, std::move(all));
    }

    const StructuralModel& parent() const { return *parent_; }
    const std::vector<std::size_t>& equations() const { return equations_; }
    std::size_t size() const { return equations_.size(); }
    bool empty() const { return equations_.empty(); }

    bool contains(std::size_t e) const { return std::binary_search(equations_.begin(), equations_.end(), e); }

    std::vector<std::size_t> unknowns() const {
        std::vector<std::size_t> out;
        for (auto e : equations_) {
            for (auto v : parent_->variables_of(e)) {
                if (parent_->is_unknown(v)) out.push_back(v);
            }
        }
        std::sort(out.begin(), out.end());
        out.erase(std::unique(out.begin(), out.end()), out.end());
        return out;
    }

    /// Links whose state and derivative both remain among the induced unknowns.
    std::vector<DifferentialLink> links() const {
        auto vars = unknowns();
        std::vector<DifferentialLink> out;
        for (const auto& l : parent_->links()) {
            if (std::binary_search(vars.begin(), vars.end(), l.state) &&
                std::binary_search(vars.begin(), vars.end(), l.derivative)) {
                out.push_back(l);
            }
        }
        return out;
    }

    SubModel without(std::size_t e) const {
        std::vector<std::size_t> rest;
        rest.reserve(equations_.size());
        for (auto x : equations_) {
            if (x != e) rest.push_back(x);
        }
        return SubModel(*parent_, std::move(rest));
    }

    std::vector<std::string> equation_names() const {
        std::vector<std::string> out;
        for (auto e : equations_) out.push_back(parent_->equation_name(e));
        return out;
    }

    bool operator==(const SubModel& other) const {
        return parent_ == other.parent_ && equations_ == other.equations_;
    }

private:
    const StructuralModel* parent_;
    std::vector<std::size_t> equations_;
};

inline SubModel submodel(const StructuralModel& m, const std::vector<std::size_t>& equations) {
    return SubModel(m, equations);
}

inline SubModel submodel(const StructuralModel& m, const std::vector<std::string>& equation_names) {
    std::vector<std::size_t> idx;
    idx.reserve(equation_names.size());
    for (const auto& n : equation_names) idx.push_back(m.equation_index(n));
    return SubModel(m, std::move(idx));
}

}  // namespace greybox
