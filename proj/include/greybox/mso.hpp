#pragma once

// PSO/MSO tests and enumeration of all MSO sets by top-down equation removal.

#include <algorithm>
#include <cstddef>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "greybox/dm.hpp"
#include "greybox/structural_model.hpp"

namespace greybox {

/// The empty model is vacuously PSO.
inline bool is_pso(const SubModel& sub) {
    auto dm = dm_decompose(sub);
    return dm.exact_equations.empty() && dm.under_equations.empty();
}

inline bool is_mso(const SubModel& sub) {
    if (sub.empty() || !is_pso(sub) || redundancy(sub) != 1) return false;
    for (auto e : sub.equations()) {
        if (!overdetermined_part(sub.without(e)).empty()) return false;
    }
    return true;
}

struct MSOSet {
    std::size_t id = 0;
    std::vector<std::size_t> equations;  // sorted parent indices
    std::size_t redundancy = 1;

    bool operator==(const MSOSet&) const = default;
};

class MsoOverflowError : public std::runtime_error {
public:
    explicit MsoOverflowError(std::size_t cap)
        : std::runtime_error("MSO enumeration exceeded the cap of " + std::to_string(cap) + " sets") {}
};

struct MsoOptions {
    std::size_t max_sets = 10000;
};

namespace detail {

class MsoSearch {
public:
    explicit MsoSearch(std::size_t cap) : cap_(cap) {}

    void explore(const SubModel& pso) {
        if (pso.empty() || !visited_.insert(pso.equations()).second) return;
        if (redundancy(pso) == 1) {
            found_.push_back(pso.equations());
            if (found_.size() > cap_) throw MsoOverflowError(cap_);
            return;
        }
        for (auto e : pso.equations()) {
            explore(overdetermined_part(pso.without(e)));
        }
    }

    std::vector<std::vector<std::size_t>> take() { return std::move(found_); }

private:
    std::size_t cap_;
    std::set<std::vector<std::size_t>> visited_;
    std::vector<std::vector<std::size_t>> found_;
};

}  // namespace detail

/// All MSO sets of the model's over-determined part, ordered by their sorted
/// equation names so the result does not depend on declaration order. Ids
/// are positions in that order.
inline std::vector<MSOSet> find_msos(const StructuralModel& m, const MsoOptions& opts = {}) {
    detail::MsoSearch search(opts.max_sets);
    search.explore(overdetermined_part(SubModel::full(m)));
    auto sets = search.take();

    auto key = [&](const std::vector<std::size_t>& eqs) {
        std::vector<std::string> names;
        for (auto e : eqs) names.push_back(m.equation_name(e));
        std::sort(names.begin(), names.end());
        return names;
    };
    std::vector<std::pair<std::vector<std::string>, std::vector<std::size_t>>> keyed;
    keyed.reserve(sets.size());
    for (auto& s : sets) keyed.emplace_back(key(s), std::move(s));
    std::sort(keyed.begin(), keyed.end());

    std::vector<MSOSet> out;
    out.reserve(keyed.size());
    for (auto& [k, eqs] : keyed) out.push_back({out.size(), std::move(eqs), 1});
    return out;
}

inline SubModel as_submodel(const MSOSet& mso, const StructuralModel& m) { return SubModel(m, mso.equations); }

}  // namespace greybox
