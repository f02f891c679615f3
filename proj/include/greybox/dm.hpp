#pragma once

// Maximum matching and coarse Dulmage-Mendelsohn decomposition, plus the
// structural detectability/isolability analyses built on top of them.

#include <algorithm>
#include <cstddef>
#include <limits>
#include <utility>
#include <vector>

#include "greybox/structural_model.hpp"

namespace greybox {

inline constexpr std::size_t unmatched = std::numeric_limits<std::size_t>::max();

/// Plain bipartite graph: rows are equations, columns are unknowns.
struct Bipartite {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::vector<std::size_t>> adjacency;  // row -> sorted columns
};

struct BipartiteMatching {
    std::vector<std::size_t> row_to_col;
    std::vector<std::size_t> col_to_row;

    std::size_t size() const {
        return static_cast<std::size_t>(
            std::count_if(row_to_col.begin(), row_to_col.end(), [](auto c) { return c != unmatched; }));
    }
};

namespace detail {

inline bool augment(const Bipartite& g, std::size_t row, std::vector<char>& visited, BipartiteMatching& m) {
    for (auto c : g.adjacency[row]) {
        if (visited[c]) continue;
        visited[c] = 1;
        if (m.col_to_row[c] == unmatched || augment(g, m.col_to_row[c], visited, m)) {
            m.row_to_col[row] = c;
            m.col_to_row[c] = row;
            return true;
        }
    }
    return false;
}

}  // namespace detail

/// Augmenting-path maximum matching. Deterministic for a given graph.
inline BipartiteMatching maximum_matching(const Bipartite& g) {
    BipartiteMatching m{std::vector<std::size_t>(g.rows, unmatched), std::vector<std::size_t>(g.cols, unmatched)};
    std::vector<char> visited(g.cols);
    for (std::size_t r = 0; r < g.rows; ++r) {
        std::fill(visited.begin(), visited.end(), 0);
        detail::augment(g, r, visited, m);
    }
    return m;
}

/// Row/column index sets of the three DM blocks of a bipartite graph.
struct BipartiteDM {
    std::vector<std::size_t> under_rows, under_cols;
    std::vector<std::size_t> exact_rows, exact_cols;
    std::vector<std::size_t> over_rows, over_cols;
    BipartiteMatching matching;
};

/// Free rows reach the over-determined block through alternating paths, free
/// columns reach the under-determined block; the remainder is exactly
/// determined.
inline BipartiteDM dm_decompose(const Bipartite& g) {
    BipartiteDM out;
    out.matching = maximum_matching(g);
    const auto& m = out.matching;

    std::vector<std::vector<std::size_t>> col_adj(g.cols);
    for (std::size_t r = 0; r < g.rows; ++r) {
        for (auto c : g.adjacency[r]) col_adj[c].push_back(r);
    }

    std::vector<char> over_row(g.rows, 0), over_col(g.cols, 0);
    std::vector<std::size_t> stack;
    for (std::size_t r = 0; r < g.rows; ++r) {
        if (m.row_to_col[r] == unmatched) {
            over_row[r] = 1;
            stack.push_back(r);
        }
    }
    while (!stack.empty()) {
        auto r = stack.back();
        stack.pop_back();
        for (auto c : g.adjacency[r]) {
            if (over_col[c]) continue;
            over_col[c] = 1;
            auto next = m.col_to_row[c];
            if (next != unmatched && !over_row[next]) {
                over_row[next] = 1;
                stack.push_back(next);
            }
        }
    }

    std::vector<char> under_row(g.rows, 0), under_col(g.cols, 0);
    for (std::size_t c = 0; c < g.cols; ++c) {
        if (m.col_to_row[c] == unmatched) {
            under_col[c] = 1;
            stack.push_back(c);
        }
    }
    while (!stack.empty()) {
        auto c = stack.back();
        stack.pop_back();
        for (auto r : col_adj[c]) {
            if (under_row[r]) continue;
            under_row[r] = 1;
            auto next = m.row_to_col[r];
            if (next != unmatched && !under_col[next]) {
                under_col[next] = 1;
                stack.push_back(next);
            }
        }
    }

    for (std::size_t r = 0; r < g.rows; ++r) {
        (over_row[r] ? out.over_rows : under_row[r] ? out.under_rows : out.exact_rows).push_back(r);
    }
    for (std::size_t c = 0; c < g.cols; ++c) {
        (over_col[c] ? out.over_cols : under_col[c] ? out.under_cols : out.exact_cols).push_back(c);
    }
    return out;
}

/// Local bipartite view of a submodel: rows follow `sub.equations()`,
/// columns follow `sub.unknowns()`.
struct SubModelGraph {
    Bipartite graph;
    std::vector<std::size_t> equations;
    std::vector<std::size_t> unknowns;
};

inline SubModelGraph bipartite_of(const SubModel& sub) {
    SubModelGraph out;
    out.equations = sub.equations();
    out.unknowns = sub.unknowns();
    out.graph.rows = out.equations.size();
    out.graph.cols = out.unknowns.size();
    out.graph.adjacency.resize(out.graph.rows);
    const auto& m = sub.parent();
    for (std::size_t r = 0; r < out.equations.size(); ++r) {
        for (auto v : m.unknowns_of(out.equations[r])) {
            auto it = std::lower_bound(out.unknowns.begin(), out.unknowns.end(), v);
            out.graph.adjacency[r].push_back(static_cast<std::size_t>(it - out.unknowns.begin()));
        }
    }
    return out;
}

/// Equation/variable pairs in parent-model indices.
struct Matching {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;

    std::size_t size() const { return pairs.size(); }

    std::size_t variable_of(std::size_t equation) const {
        for (const auto& [e, v] : pairs) {
            if (e == equation) return v;
        }
        return unmatched;
    }

    std::size_t equation_of(std::size_t variable) const {
        for (const auto& [e, v] : pairs) {
            if (v == variable) return e;
        }
        return unmatched;
    }
};

inline Matching to_matching(const SubModelGraph& g, const BipartiteMatching& bm) {
    Matching out;
    for (std::size_t r = 0; r < bm.row_to_col.size(); ++r) {
        if (bm.row_to_col[r] != unmatched) out.pairs.emplace_back(g.equations[r], g.unknowns[bm.row_to_col[r]]);
    }
    return out;
}

inline Matching maximum_matching(const SubModel& sub) {
    auto g = bipartite_of(sub);
    return to_matching(g, maximum_matching(g.graph));
}

struct DMPartition {
    std::vector<std::size_t> under_equations, under_variables;
    std::vector<std::size_t> exact_equations, exact_variables;
    std::vector<std::size_t> over_equations, over_variables;
    Matching matching;

    /// |E+| - |X+|
    std::size_t redundancy() const { return over_equations.size() - over_variables.size(); }
};

inline DMPartition dm_decompose(const SubModel& sub) {
    auto g = bipartite_of(sub);
    auto dm = dm_decompose(g.graph);
    DMPartition out;
    auto map_rows = [&](const std::vector<std::size_t>& rows) {
        std::vector<std::size_t> r;
        for (auto i : rows) r.push_back(g.equations[i]);
        return r;
    };
    auto map_cols = [&](const std::vector<std::size_t>& cols) {
        std::vector<std::size_t> c;
        for (auto i : cols) c.push_back(g.unknowns[i]);
        return c;
    };
    out.under_equations = map_rows(dm.under_rows);
    out.under_variables = map_cols(dm.under_cols);
    out.exact_equations = map_rows(dm.exact_rows);
    out.exact_variables = map_cols(dm.exact_cols);
    out.over_equations = map_rows(dm.over_rows);
    out.over_variables = map_cols(dm.over_cols);
    out.matching = to_matching(g, dm.matching);
    return out;
}

/// Structural redundancy phi = |E+| - |X+|.
inline std::size_t redundancy(const SubModel& sub) { return dm_decompose(sub).redundancy(); }

inline SubModel overdetermined_part(const SubModel& sub) {
    return SubModel(sub.parent(), dm_decompose(sub).over_equations);
}

/// Faults whose equation lies in the over-determined part of the full model.
inline std::vector<std::size_t> detectable_faults(const StructuralModel& m) {
    auto over = overdetermined_part(SubModel::full(m));
    std::vector<std::size_t> out;
    for (const auto& f : m.faults()) {
        if (over.contains(f.equation)) out.push_back(f.fault);
    }
    std::sort(out.begin(), out.end());
    return out;
}

/// Square boolean matrix over the model's faults (order of `fault_variables()`).
struct FaultMatrix {
    std::vector<std::string> row_labels;
    std::vector<std::string> column_labels;
    std::vector<std::uint8_t> cells;

    std::size_t rows() const { return row_labels.size(); }
    std::size_t cols() const { return column_labels.size(); }
    bool operator()(std::size_t r, std::size_t c) const { return cells[r * cols() + c] != 0; }
    std::vector<bool> row(std::size_t r) const {
        std::vector<bool> out(cols());
        for (std::size_t c = 0; c < cols(); ++c) out[c] = (*this)(r, c);
        return out;
    }
    std::vector<bool> column(std::size_t c) const {
        std::vector<bool> out(rows());
        for (std::size_t r = 0; r < rows(); ++r) out[r] = (*this)(r, c);
        return out;
    }
};

/// Entry (i,j): f_i stays detectable once e_{f_j} is removed. The diagonal is
/// plain detectability of f_i.
inline FaultMatrix isolability_matrix(const StructuralModel& m) {
    auto faults = m.fault_variables();
    FaultMatrix out;
    for (auto f : faults) {
        out.row_labels.push_back(m.variable(f).name);
        out.column_labels.push_back(m.variable(f).name);
    }
    const auto n = faults.size();
    out.cells.assign(n * n, 0);
    auto full = SubModel::full(m);
    auto over_full = overdetermined_part(full);
    for (std::size_t j = 0; j < n; ++j) {
        auto over = overdetermined_part(full.without(m.fault_equation(faults[j])));
        for (std::size_t i = 0; i < n; ++i) {
            auto ei = m.fault_equation(faults[i]);
            out.cells[i * n + j] = (i == j ? over_full.contains(ei) : over.contains(ei)) ? 1 : 0;
        }
    }
    return out;
}

/// Residual candidates x faults sensitivity table. Entry (i,j) is set iff the
/// equation of fault j belongs to candidate i.
inline FaultMatrix fault_signature(const std::vector<SubModel>& candidates, const StructuralModel& m,
                                   std::vector<std::string> row_labels = {}) {
    auto faults = m.fault_variables();
    FaultMatrix out;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        if (&candidates[i].parent() != &m) throw ModelError("candidate belongs to a different model");
        out.row_labels.push_back(i < row_labels.size() ? row_labels[i] : "R" + std::to_string(i));
    }
    for (auto f : faults) out.column_labels.push_back(m.variable(f).name);
    out.cells.assign(candidates.size() * faults.size(), 0);
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        for (std::size_t j = 0; j < faults.size(); ++j) {
            out.cells[i * faults.size() + j] = candidates[i].contains(m.fault_equation(faults[j])) ? 1 : 0;
        }
    }
    return out;
}

}  // namespace greybox
