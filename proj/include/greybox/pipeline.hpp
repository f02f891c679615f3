#pragma once

// End-to-end design procedure: structural analysis -> MSO sets -> integral
// computational graphs -> grey-box RNN training -> residuals -> detection.
// Every stage writes re-loadable files and a stamp keyed by its inputs; a
// stage whose stamp matches is skipped.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "greybox/benchplant.hpp"
#include "greybox/causal.hpp"
#include "greybox/config.hpp"
#include "greybox/detection.hpp"
#include "greybox/dm.hpp"
#include "greybox/mso.hpp"
#include "greybox/structural_model.hpp"
#include "greybox/timeseries.hpp"
#include "greybox/training.hpp"

namespace greybox {

namespace fs = std::filesystem;

class StageError : public std::runtime_error {
public:
    StageError(const std::string& stage, const std::string& what)
        : std::runtime_error("[" + stage + "] " + what), stage_(stage) {}

    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

inline std::uint64_t fnv1a(std::string_view text, std::uint64_t h = 14695981039346656037ULL) {
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::string hash_hex(std::uint64_t h) { return detail::hex64(h); }

inline std::string fmt(double v) { return detail::format_double(v); }

/// Runs `fn` for indices 0..n-1 on up to `workers` threads. Each index writes
/// only its own result slot, so output is independent of scheduling.
inline void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
    workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(n, 1));
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(n);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

// ---------------------------------------------------------------------------
// Candidates

struct Candidate {
    std::string name;  // mso<id>_<residual>
    MSOSet mso;
    std::size_t residual_equation = 0;
    StateSpaceStructure structure;
};

/// Integral-causality sensor residuals, narrowed by the sensor filter and the
/// optional explicit selection.
inline std::vector<Candidate> select_candidates(const StructuralModel& m, const std::vector<MSOSet>& msos,
                                                const PipelineConfig& cfg) {
    std::vector<Candidate> out;
    for (const auto& c : enumerate_integral_candidates(msos, m, cfg.sensors)) {
        const auto& res = m.equation_name(c.residual_equation);
        if (!cfg.select.empty() &&
            std::find(cfg.select.begin(), cfg.select.end(), std::make_pair(c.mso.id, res)) == cfg.select.end()) {
            continue;
        }
        auto g = build_comp_graph(c.mso, c.residual_equation, m);
        auto s = extract_state_space(g);
        out.push_back({s.name(), c.mso, c.residual_equation, s});
    }
    return out;
}

inline FaultMatrix candidate_signature(const StructuralModel& m, const std::vector<Candidate>& cands) {
    std::vector<SubModel> subs;
    std::vector<std::string> labels;
    for (const auto& c : cands) {
        subs.push_back(as_submodel(c.mso, m));
        labels.push_back(c.name);
    }
    return fault_signature(subs, m, labels);
}

inline std::string signature_csv(const FaultMatrix& sig) {
    std::string out = "generator";
    for (const auto& c : sig.column_labels) out += "," + c;
    out += '\n';
    for (std::size_t r = 0; r < sig.rows(); ++r) {
        out += sig.row_labels[r];
        for (std::size_t c = 0; c < sig.cols(); ++c) out += sig(r, c) ? ",1" : ",0";
        out += '\n';
    }
    return out;
}

inline FaultMatrix parse_signature_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    FaultMatrix sig;
    bool header = true;
    while (std::getline(in, line)) {
        if (detail::trim(line).empty()) continue;
        auto cells = detail::split_list(line);
        if (header) {
            if (cells.empty() || cells[0] != "generator") throw DataError("signature file lacks its header");
            sig.column_labels.assign(cells.begin() + 1, cells.end());
            header = false;
            continue;
        }
        if (cells.size() != sig.cols() + 1) throw DataError("ragged signature row");
        sig.row_labels.push_back(cells[0]);
        for (std::size_t c = 1; c < cells.size(); ++c) {
            if (cells[c] != "0" && cells[c] != "1") throw DataError("signature cells are 0 or 1");
            sig.cells.push_back(cells[c] == "1");
        }
    }
    return sig;
}

// ---------------------------------------------------------------------------
// Data sets

struct Scenario {
    std::string name;
    std::string kind;   // validation, holdout, nominal or fault
    std::string fault;  // "none" for nominal episodes
    double magnitude = 0.0;
    std::size_t onset = 0;  // sample index
    TimeSeries data;
    std::string reference;  // fault-free scenario with the same inputs and noise, if any
};

struct Datasets {
    std::vector<TimeSeries> train;
    std::vector<Scenario> evaluation;  // validation, holdout and fault scenarios
};

inline std::string episode_name(const std::string& kind, std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s_%03zu", kind.c_str(), i);
    return buf;
}

inline std::string scenario_name(const std::string& fault, double magnitude, std::size_t repeat) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%s_%+.3f_r%zu", fault.c_str(), magnitude, repeat);
    return buf;
}

/// Benchmark plant data: training episodes, nominal validation and held-out
/// episodes, and a fault x magnitude x repeat scenario grid. Each repeat
/// has one input profile and noise stream, shared by a fault-free run
/// ("nominal_rN") and all of its fault scenarios.
inline Datasets generate_benchmark_datasets(const DataConfig& d, std::uint64_t root, const PlantSpec& spec = {}) {
    Datasets out;
    InputProfileOptions train_opt;
    train_opt.samples = d.train_samples;
    InputProfileOptions eval_opt;
    eval_opt.samples = d.eval_samples;
    const auto onset = static_cast<std::size_t>(std::llround(d.onset / spec.sampling_time));
    if (onset >= d.eval_samples) throw std::invalid_argument("fault onset lies beyond the evaluation horizon");

    auto train_spec = spec;
    if (d.train_u1_range) std::tie(train_spec.u1_min, train_spec.u1_max) = *d.train_u1_range;
    if (d.train_u2_range) std::tie(train_spec.u2_min, train_spec.u2_max) = *d.train_u2_range;
    if (d.train_segment) std::tie(train_opt.min_segment, train_opt.max_segment) = *d.train_segment;
    for (std::size_t i = 0; i < d.train_episodes; ++i) {
        auto u = generate_inputs(train_spec, derive_seed(root, "train-inputs", i), train_opt);
        out.train.push_back(simulate_plant(spec, u, std::nullopt, derive_seed(root, "train-noise", i)).data);
    }
    for (const std::string kind : {"validation", "holdout"}) {
        const auto n = kind == "validation" ? d.validation_episodes : d.holdout_episodes;
        for (std::size_t i = 0; i < n; ++i) {
            auto u = generate_inputs(spec, derive_seed(root, kind + "-inputs", i), eval_opt);
            out.evaluation.push_back({episode_name(kind, i), kind, "none", 0.0, onset,
                                      simulate_plant(spec, u, std::nullopt, derive_seed(root, kind + "-noise", i)).data, ""});
        }
    }
    auto faults = d.faults.empty() ? plant_faults() : d.faults;
    for (std::size_t r = 0; r < d.scenario_repeats; ++r) {
        auto u = generate_inputs(spec, derive_seed(root, "scenario-inputs", r), eval_opt);
        const auto noise = derive_seed(root, "scenario-noise", r);
        const auto nominal = "nominal_r" + std::to_string(r);
        out.evaluation.push_back(
            {nominal, "nominal", "none", 0.0, onset, simulate_plant(spec, u, std::nullopt, noise).data, ""});
        for (const auto& f : faults) {
            for (auto mag : d.magnitudes) {
                FaultScenario fs{f, mag, static_cast<double>(onset) * spec.sampling_time};
                out.evaluation.push_back({scenario_name(f, mag, r), "fault", f, mag, onset,
                                          simulate_plant(spec, u, fs, noise).data, nominal});
            }
        }
    }
    return out;
}

inline std::string scenario_index_csv(const std::vector<Scenario>& sc) {
    std::string out = "name,kind,fault,magnitude,onset_sample,file,reference\n";
    for (const auto& s : sc) {
        out += s.name + "," + s.kind + "," + s.fault + "," + fmt(s.magnitude) + "," + std::to_string(s.onset) + "," +
               s.name + ".csv," + s.reference + "\n";
    }
    return out;
}

/// Reads a scenario index; data files are resolved next to the index. The
/// trailing reference column is optional.
inline std::vector<Scenario> load_scenario_index(const std::string& path, bool with_data = true) {
    std::istringstream in(read_text_file(path));
    std::string line;
    std::getline(in, line);
    auto header = detail::split_list(line);
    std::vector<std::string> expected{"name", "kind", "fault", "magnitude", "onset_sample", "file"};
    const bool with_reference = header.size() == 7 && header.back() == "reference";
    if (with_reference) header.pop_back();
    if (header != expected) throw DataError("'" + path + "' is not a scenario index");
    std::vector<Scenario> out;
    while (std::getline(in, line)) {
        if (detail::trim(line).empty()) continue;
        std::vector<std::string> c;
        std::stringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) c.push_back(std::string(detail::trim(cell)));
        if (!line.empty() && line.back() == ',') c.emplace_back();
        if (c.size() != (with_reference ? 7u : 6u)) throw DataError("malformed scenario index row '" + line + "'");
        Scenario s;
        s.name = c[0];
        s.kind = c[1];
        s.fault = c[2];
        s.magnitude = detail::parse_double(c[3]);
        s.onset = std::stoul(c[4]);
        if (with_reference) s.reference = c[6];
        if (with_data) s.data = parse_csv(read_text_file((fs::path(path).parent_path() / c[5]).string()));
        out.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Generators

struct GeneratorModel {
    Candidate candidate;
    std::vector<TrainResult> members;

    std::vector<double> residual(const TimeSeries& normalized) const {
        const auto& s = candidate.structure;
        auto u = normalized.select(s.inputs);
        auto y = normalized.column(s.output);
        if (members.size() == 1) return rnn_simulate(members[0].rnn, u, y).residual;
        std::vector<GreyBoxRNN> nets;
        for (const auto& m : members) nets.push_back(m.rnn);
        return ensemble_predict(EnsembleModel(std::move(nets)), u, y).residual;
    }
};

/// The first batch_length samples of every episode, so each batch starts at
/// the shared initial condition.
inline std::vector<Batch> episode_batches(const std::vector<TimeSeries>& normalized, const StateSpaceStructure& s,
                                          std::size_t batch_length) {
    std::vector<Batch> out;
    for (const auto& ep : normalized) {
        if (ep.length() < batch_length) {
            throw DataError("training episode has " + std::to_string(ep.length()) + " samples, batch length is " +
                            std::to_string(batch_length));
        }
        auto u = ep.select(s.inputs);
        auto y = ep.column(s.output);
        auto b = make_batches(u, y, batch_length, 1);
        out.push_back(std::move(b[0]));
    }
    return out;
}

inline std::uint64_t member_seed(std::uint64_t root, const std::string& generator, std::size_t member) {
    return derive_seed(root, "init:" + generator, member);
}

/// Trains every (candidate, member) pair, spreading the jobs over `workers`.
inline std::vector<GeneratorModel> train_generators(const std::vector<Candidate>& cands,
                                                    const std::vector<TimeSeries>& normalized_train,
                                                    const PipelineConfig& cfg) {
    std::vector<GeneratorModel> out(cands.size());
    std::vector<std::vector<Batch>> batches(cands.size());
    for (std::size_t c = 0; c < cands.size(); ++c) {
        out[c].candidate = cands[c];
        out[c].members.resize(cfg.ensemble);
        batches[c] = episode_batches(normalized_train, cands[c].structure, cfg.train.batch_length);
    }
    parallel_for(cands.size() * cfg.ensemble, cfg.workers, [&](std::size_t job) {
        const auto c = job / cfg.ensemble, k = job % cfg.ensemble;
        auto hp = cfg.rnn;
        hp.hidden = cfg.train.hidden;
        hp.seed = member_seed(cfg.seed, cands[c].name, k);
        auto tc = cfg.train;
        tc.seed = hp.seed;
        out[c].members[k] = train(build_rnn(cands[c].structure, hp), batches[c], tc);
    });
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation

struct ScenarioOutcome {
    std::string scenario;
    std::string kind;
    std::string fault;
    double magnitude = 0.0;
    std::size_t onset = 0;
    std::vector<std::optional<std::size_t>> alarm;  // first alarm per generator
    std::vector<bool> pattern;                      // alarm at or after onset
    std::vector<bool> false_alarm;                  // alarm before onset
    std::vector<Hypothesis> diagnosis;
};

struct AucEntry {
    std::string generator;
    std::string fault;
    double magnitude = 0.0;
    AucResult auc;
};

struct DetectionReport {
    std::vector<std::string> generators;
    FaultMatrix signature;
    std::vector<CusumTuning> tuning;
    std::vector<double> validation_rmse;  // raw residual, normalised units
    std::vector<AucEntry> auc;
    std::vector<ScenarioOutcome> outcomes;
    double sampling_time = 0.05;

    const ScenarioOutcome* find(const std::string& scenario) const {
        for (const auto& o : outcomes) {
            if (o.scenario == scenario) return &o;
        }
        return nullptr;
    }
};

/// Residual table per scenario: one column per generator, raw (not debiased).
using ResidualTable = TimeSeries;

struct EvaluationOptions {
    std::size_t debias_window = 100;
    CusumTuningOptions cusum;
    double sampling_time = 0.05;
};

/// CUSUM alarm on a debiased residual; the test starts after the debias window.
inline std::optional<std::size_t> alarm_after_window(const std::vector<double>& debiased, const CusumTuning& tuning,
                                                     std::size_t window) {
    if (debiased.size() <= window) return std::nullopt;
    auto a = first_alarm(std::span(debiased).subspan(window), tuning);
    if (a) *a += window;
    return a;
}

/// Detection analysis from residual tables. Nominal validation residuals tune
/// the CUSUM tests; every other scenario is tested with them. The debias
/// window is a calibration period: the tests start right after it. The AUC
/// reference of a fault scenario is its paired fault-free run when the index
/// names one, else the pooled validation residuals.
inline DetectionReport evaluate_residuals(const std::vector<Scenario>& index,
                                          const std::vector<ResidualTable>& residuals, const FaultMatrix& signature,
                                          const EvaluationOptions& opt) {
    if (index.size() != residuals.size()) throw std::invalid_argument("one residual table per scenario required");
    DetectionReport rep;
    rep.signature = signature;
    rep.generators = signature.row_labels;
    rep.sampling_time = opt.sampling_time;
    const auto ng = rep.generators.size();

    std::vector<std::vector<double>> debiased(index.size() * ng);
    for (std::size_t s = 0; s < index.size(); ++s) {
        for (std::size_t g = 0; g < ng; ++g) {
            debiased[s * ng + g] = debias(residuals[s].column(rep.generators[g]), opt.debias_window);
        }
    }

    std::vector<std::vector<double>> tuning_data(ng), reference(ng);
    rep.validation_rmse.assign(ng, 0.0);
    std::vector<std::size_t> val_count(ng, 0);
    for (std::size_t s = 0; s < index.size(); ++s) {
        if (index[s].kind != "validation") continue;
        for (std::size_t g = 0; g < ng; ++g) {
            const auto& r = debiased[s * ng + g];
            tuning_data[g].insert(tuning_data[g].end(), r.begin() + opt.debias_window, r.end());
            reference[g].insert(reference[g].end(), r.begin() + index[s].onset, r.end());
            for (auto v : residuals[s].column(rep.generators[g])) rep.validation_rmse[g] += v * v;
            val_count[g] += residuals[s].length();
        }
    }
    for (std::size_t g = 0; g < ng; ++g) {
        if (val_count[g] == 0) throw std::invalid_argument("no validation residuals to tune on");
        rep.validation_rmse[g] = std::sqrt(rep.validation_rmse[g] / static_cast<double>(val_count[g]));
        rep.tuning.push_back(tune_cusum(tuning_data[g], opt.cusum));
    }

    auto position = [&](const std::string& name) {
        for (std::size_t s = 0; s < index.size(); ++s) {
            if (index[s].name == name) return s;
        }
        throw DataError("scenario reference '" + name + "' is not in the index");
    };
    for (std::size_t s = 0; s < index.size(); ++s) {
        const auto& sc = index[s];
        if (sc.kind == "validation") continue;
        if (sc.onset < opt.debias_window || sc.onset >= residuals[s].length()) {
            throw DataError("scenario '" + sc.name + "' has its onset inside the debias window or past the end");
        }
        ScenarioOutcome o{sc.name, sc.kind, sc.fault, sc.magnitude, sc.onset, {}, {}, {}, {}};
        for (std::size_t g = 0; g < ng; ++g) {
            const auto& r = debiased[s * ng + g];
            auto a = alarm_after_window(r, rep.tuning[g], opt.debias_window);
            o.alarm.push_back(a);
            o.false_alarm.push_back(a && *a < sc.onset);
            // a test that fired before onset stays latched, so it shows in the pattern
            o.pattern.push_back(a.has_value());
            if (sc.kind == "fault") {
                std::vector<double> post(r.begin() + sc.onset, r.end());
                if (sc.reference.empty()) {
                    rep.auc.push_back({rep.generators[g], sc.fault, sc.magnitude, roc_auc(reference[g], post)});
                } else {
                    const auto ref = position(sc.reference);
                    const auto& rr = debiased[ref * ng + g];
                    std::vector<double> nominal(rr.begin() + index[ref].onset, rr.end());
                    rep.auc.push_back({rep.generators[g], sc.fault, sc.magnitude, roc_auc(nominal, post)});
                }
            }
        }
        o.diagnosis = diagnose(o.pattern, signature);
        rep.outcomes.push_back(std::move(o));
    }
    return rep;
}

inline std::string auc_csv(const DetectionReport& rep) {
    std::string out = "generator,fault,magnitude,auc,normalized,mirrored\n";
    for (const auto& e : rep.auc) {
        out += e.generator + "," + e.fault + "," + fmt(e.magnitude) + "," + fmt(e.auc.auc) + "," +
               fmt(e.auc.normalized) + "," + fmt(e.auc.mirrored) + "\n";
    }
    return out;
}

inline std::string alarms_csv(const DetectionReport& rep) {
    std::string out = "scenario,kind,fault,magnitude,generator,alarm_sample,delay_s,false_alarm\n";
    for (const auto& o : rep.outcomes) {
        for (std::size_t g = 0; g < rep.generators.size(); ++g) {
            out += o.scenario + "," + o.kind + "," + o.fault + "," + fmt(o.magnitude) + "," + rep.generators[g] + ",";
            if (o.alarm[g]) {
                out += std::to_string(*o.alarm[g]) + ",";
                out += *o.alarm[g] >= o.onset
                           ? fmt(static_cast<double>(*o.alarm[g] - o.onset) * rep.sampling_time)
                           : std::string("");
            } else {
                out += ",";
            }
            out += o.false_alarm[g] ? ",1\n" : ",0\n";
        }
    }
    return out;
}

inline std::string diagnosis_csv(const DetectionReport& rep) {
    std::string out = "scenario,fault,magnitude,pattern,top,candidates\n";
    for (const auto& o : rep.outcomes) {
        std::string pattern, cands;
        for (bool b : o.pattern) pattern += b ? '1' : '0';
        for (const auto& h : o.diagnosis) cands += (cands.empty() ? "" : " ") + h.fault;
        out += o.scenario + "," + o.fault + "," + fmt(o.magnitude) + "," + pattern + "," +
               (o.diagnosis.empty() ? std::string("unknown") : o.diagnosis[0].fault) + "," + cands + "\n";
    }
    return out;
}

inline std::string report_text(const DetectionReport& rep) {
    std::ostringstream out;
    out << "detection report\n\ngenerators\n";
    for (std::size_t g = 0; g < rep.generators.size(); ++g) {
        const auto& t = rep.tuning[g];
        out << "  " << rep.generators[g] << "  validation_rmse " << fmt(rep.validation_rmse[g]) << "  drift+ "
            << fmt(t.drift_positive) << "  drift- " << fmt(t.drift_negative) << "  threshold " << fmt(t.threshold)
            << "  tuning_holdout_alarm_rate " << fmt(t.held_out_alarm_rate) << '\n';
    }
    out << "\nfault signature\n  " << std::string(20, ' ');
    for (const auto& c : rep.signature.column_labels) out << ' ' << c;
    out << '\n';
    for (std::size_t r = 0; r < rep.signature.rows(); ++r) {
        out << "  " << rep.signature.row_labels[r] << std::string(20 - std::min<std::size_t>(20, rep.signature.row_labels[r].size()), ' ');
        for (std::size_t c = 0; c < rep.signature.cols(); ++c) {
            out << ' ' << (rep.signature(r, c) ? "X" : ".")
                << std::string(rep.signature.column_labels[c].size() - 1, ' ');
        }
        out << '\n';
    }
    out << "\nscenarios\n";
    for (const auto& o : rep.outcomes) {
        out << "  " << o.scenario << "  pattern ";
        for (bool b : o.pattern) out << (b ? '1' : '0');
        out << "  diagnosis";
        if (o.diagnosis.empty()) out << " unknown";
        for (const auto& h : o.diagnosis) out << ' ' << h.fault;
        bool fa = std::any_of(o.false_alarm.begin(), o.false_alarm.end(), [](bool b) { return b; });
        if (fa) out << "  FALSE-ALARM";
        out << '\n';
    }
    return out.str();
}

/// CUSUM statistics of one scenario: T+ and T- per generator, zero during
/// the debias window.
inline TimeSeries cusum_traces(const ResidualTable& residual, const DetectionReport& rep, std::size_t window) {
    TimeSeries out;
    for (std::size_t g = 0; g < rep.generators.size(); ++g) {
        auto r = debias(residual.column(rep.generators[g]), window);
        std::fill(r.begin(), r.begin() + window, 0.0);
        out.add_column(rep.generators[g] + "_pos", cusum(r, rep.tuning[g].drift_positive, Direction::positive));
        out.add_column(rep.generators[g] + "_neg", cusum(r, rep.tuning[g].drift_negative, Direction::negative));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Structural reports

inline std::string analysis_text(const StructuralModel& m) {
    auto full = SubModel::full(m);
    auto dm = dm_decompose(full);
    std::ostringstream o;
    auto names = [&](const std::vector<std::size_t>& eqs) {
        std::string s;
        for (auto e : eqs) s += " " + m.equation_name(e);
        return s;
    };
    auto vars = [&](const std::vector<std::size_t>& vs) {
        std::string s;
        for (auto v : vs) s += " " + m.variable(v).name;
        return s;
    };
    o << "equations " << m.equation_count() << "\nvariables " << m.variable_count() << "\n";
    o << "redundancy " << dm.redundancy() << "\n";
    o << "under equations" << names(dm.under_equations) << "\nunder variables" << vars(dm.under_variables) << "\n";
    o << "exact equations" << names(dm.exact_equations) << "\nexact variables" << vars(dm.exact_variables) << "\n";
    o << "over equations" << names(dm.over_equations) << "\nover variables" << vars(dm.over_variables) << "\n";
    o << "detectable faults" << vars(detectable_faults(m)) << "\n";
    auto iso = isolability_matrix(m);
    o << "isolability (row fault stays detectable without the column fault's equation)\n";
    for (std::size_t r = 0; r < iso.rows(); ++r) {
        o << "  " << iso.row_labels[r] << ":";
        for (std::size_t c = 0; c < iso.cols(); ++c) o << ' ' << (iso(r, c) ? 1 : 0);
        o << '\n';
    }
    return o.str();
}

inline std::string msos_text(const StructuralModel& m, const std::vector<MSOSet>& msos) {
    std::ostringstream o;
    for (const auto& s : msos) {
        o << "mso " << s.id << ":";
        for (auto e : s.equations) o << ' ' << m.equation_name(e);
        o << '\n';
    }
    return o.str();
}

inline std::string support_csv(const StructuralModel& m, const std::vector<MSOSet>& msos) {
    std::string out = "mso";
    for (std::size_t e = 0; e < m.equation_count(); ++e) out += "," + m.equation_name(e);
    out += '\n';
    for (const auto& s : msos) {
        out += std::to_string(s.id);
        for (std::size_t e = 0; e < m.equation_count(); ++e) {
            out += std::binary_search(s.equations.begin(), s.equations.end(), e) ? ",1" : ",0";
        }
        out += '\n';
    }
    return out;
}

// ---------------------------------------------------------------------------
// Stage driver

struct PipelineStatus {
    int exit_code = 0;
    std::string message;
    std::vector<std::string> ran;      // stages executed
    std::vector<std::string> skipped;  // stages whose stamp matched
};

inline std::string training_text(const PipelineConfig& c) {
    std::ostringstream o;
    o << "epochs " << c.train.epochs << " lr " << fmt(c.train.learning_rate) << " decay " << fmt(c.train.decay)
      << " every " << c.train.decay_every << " batch " << c.train.batch_length << " count " << c.train.batch_count
      << " trunc " << c.train.truncation << " shuffle " << c.train.shuffle << " hidden";
    for (auto h : c.train.hidden) o << ' ' << h;
    o << " T " << fmt(c.rnn.sampling_time) << " scale " << fmt(c.rnn.g_output_scale) << " limit "
      << fmt(c.rnn.state_limit) << " ensemble " << c.ensemble << " seed " << c.seed;
    return o.str();
}

inline std::string data_text(const PipelineConfig& c) {
    const auto& d = c.data;
    std::ostringstream o;
    o << "source " << d.source << " seed " << c.seed << " train " << d.train_episodes << ' ' << d.train_samples
      << " val " << d.validation_episodes << " hold " << d.holdout_episodes << " eval " << d.eval_samples
      << " onset " << fmt(d.onset) << " repeats " << d.scenario_repeats << " mags";
    for (auto m : d.magnitudes) o << ' ' << fmt(m);
    auto range = [&](const char* tag, const std::optional<std::pair<double, double>>& r) {
        if (r) o << ' ' << tag << ' ' << fmt(r->first) << ' ' << fmt(r->second);
    };
    range("tu1", d.train_u1_range);
    range("tu2", d.train_u2_range);
    range("tseg", d.train_segment);
    o << " faults";
    for (const auto& f : d.faults) o << ' ' << f;
    o << " ds " << d.downsample << ' ' << static_cast<int>(d.downsample_mode) << " norm "
      << static_cast<int>(d.normalization);
    for (const auto& p : d.train) o << " T:" << hash_hex(fnv1a(read_text_file(p)));
    for (const auto& p : d.validation) o << " V:" << hash_hex(fnv1a(read_text_file(p)));
    for (const auto& p : d.holdout) o << " H:" << hash_hex(fnv1a(read_text_file(p)));
    if (!d.scenarios.empty()) o << " S:" << hash_hex(fnv1a(read_text_file(d.scenarios)));
    return o.str();
}

class Pipeline {
public:
    explicit Pipeline(PipelineConfig cfg, std::ostream* log = &std::cerr)
        : cfg_(std::move(cfg)), log_(log), out_(cfg_.out_dir) {}

    const fs::path& out() const { return out_; }

    PipelineStatus run() {
        PipelineStatus st;
        out_ = cfg_.out_dir;
        fs::create_directories(out_ / "stamps");
        std::string stage = "analyze";
        try {
            // analyze
            auto model_text = read_text_file(cfg_.model_path);
            auto model = parse_model(model_text);
            std::string key = hash_hex(fnv1a(model_text));
            step(st, "analyze", key, {"analysis.txt"}, [&] { write("analysis.txt", analysis_text(model)); });

            // msos
            stage = "msos";
            auto msos = find_msos(model);
            step(st, "msos", key, {"msos.txt", "support.csv"}, [&] {
                write("msos.txt", msos_text(model, msos));
                write("support.csv", support_csv(model, msos));
            });

            // graphs
            stage = "graphs";
            auto cands = select_candidates(model, msos, cfg_);
            std::string sel;
            if (cfg_.sensors) {
                sel += "sensors";
                for (const auto& s : *cfg_.sensors) sel += " " + s;
            }
            for (const auto& [id, r] : cfg_.select) sel += " " + std::to_string(id) + ":" + r;
            key = hash_hex(fnv1a(key + sel));
            std::vector<std::string> graph_files{"candidates.txt", "signature.csv"};
            for (const auto& c : cands) {
                graph_files.push_back("graphs/" + c.name + ".dot");
                graph_files.push_back("graphs/" + c.name + ".structure");
            }
            step(st, "graphs", key, graph_files, [&] {
                fs::create_directories(out_ / "graphs");
                std::string list;
                for (const auto& c : cands) {
                    auto g = build_comp_graph(c.mso, c.residual_equation, model);
                    write("graphs/" + c.name + ".dot", to_dot(g));
                    write("graphs/" + c.name + ".structure", c.structure.to_text());
                    list += c.name + "\n";
                }
                write("candidates.txt", list);
                write("signature.csv", signature_csv(candidate_signature(model, cands)));
            });
            if (cands.empty()) {
                st.exit_code = 3;
                st.message = "no candidates";
                return st;
            }

            // data
            stage = "data";
            const auto data_key = hash_hex(fnv1a(data_text(cfg_)));
            step(st, "data", data_key, {"data/scenarios.csv", "data/train.txt", "normalization.txt"},
                 [&] { prepare_data(); });

            // train
            stage = "train";
            const auto train_key = hash_hex(fnv1a(key + data_key + training_text(cfg_)));
            std::vector<std::string> weight_files;
            for (const auto& c : cands) {
                for (std::size_t k = 0; k < cfg_.ensemble; ++k) weight_files.push_back(weights_file(c.name, k));
            }
            step(st, "train", train_key, weight_files, [&] { train_stage(cands); });

            // residuals
            stage = "residuals";
            // keyed by the weights themselves: a retrain that reproduces them changes nothing downstream
            auto res_hash = fnv1a(data_key);
            for (const auto& w : weight_files) res_hash = fnv1a(read_text_file((out_ / w).string()), res_hash);
            const auto res_key = hash_hex(res_hash);
            step(st, "residuals", res_key, {"residuals/index.csv"}, [&] { residual_stage(cands); });

            // evaluate
            stage = "evaluate";
            std::ostringstream det;
            det << cfg_.debias_window << ' ' << fmt(cfg_.cusum.margin) << ' ' << fmt(cfg_.cusum.safety) << ' '
                << fmt(cfg_.cusum.min_drift) << ' ' << fmt(cfg_.cusum.min_threshold) << ' '
                << fmt(cfg_.cusum.min_threshold_std);
            const auto eval_key = hash_hex(fnv1a(res_key + det.str()));
            step(st, "evaluate", eval_key, {"report/report.txt"}, [&] { evaluate_stage(); });
        } catch (const StageError&) {
            throw;
        } catch (const std::exception& e) {
            throw StageError(stage, e.what());
        }
        st.message = "ok";
        return st;
    }

    static std::string weights_file(const std::string& gen, std::size_t k) {
        return "weights/" + gen + "_m" + std::to_string(k) + ".weights";
    }

    /// Loads the persisted evaluation for inspection.
    DetectionReport evaluate_from_disk() const {
        auto index = load_scenario_index((out_ / "residuals" / "index.csv").string());
        std::vector<ResidualTable> tables;
        for (auto& s : index) tables.push_back(std::move(s.data));
        auto sig = parse_signature_csv(read_text_file((out_ / "signature.csv").string()));
        EvaluationOptions opt{cfg_.debias_window, cfg_.cusum, cfg_.rnn.sampling_time};
        return evaluate_residuals(index, tables, sig, opt);
    }

    /// Generators of a finished run, reloaded from their weight files.
    std::vector<GeneratorModel> trained_generators() const {
        auto model = parse_model(read_text_file(cfg_.model_path));
        return load_generators(select_candidates(model, find_msos(model), cfg_));
    }

    Normalization normalization() const {
        return load_normalization(read_text_file((out_ / "normalization.txt").string()));
    }

private:
    template <class F>
    void step(PipelineStatus& st, const std::string& name, const std::string& key,
              const std::vector<std::string>& outputs, F&& body) {
        const auto stamp = out_ / "stamps" / (name + ".stamp");
        bool fresh = fs::exists(stamp) && read_text_file(stamp.string()) == key + "\n";
        for (const auto& o : outputs) fresh = fresh && fs::exists(out_ / o);
        if (fresh) {
            st.skipped.push_back(name);
            if (log_) *log_ << "[" << name << "] up to date\n";
            return;
        }
        if (log_) *log_ << "[" << name << "] running\n";
        fs::remove(stamp);
        body();
        write_text_file(stamp.string(), key + "\n");
        st.ran.push_back(name);
    }

    void write(const std::string& rel, const std::string& text) const {
        fs::create_directories((out_ / rel).parent_path());
        write_text_file((out_ / rel).string(), text);
    }

    TimeSeries prepare(const TimeSeries& raw) const {
        return cfg_.data.downsample > 1 ? downsample(raw, cfg_.data.downsample, cfg_.data.downsample_mode) : raw;
    }

    void prepare_data() {
        fs::remove_all(out_ / "data");
        fs::create_directories(out_ / "data");
        Datasets ds;
        if (cfg_.data.source == "benchplant") {
            ds = generate_benchmark_datasets(cfg_.data, cfg_.seed);
        } else {
            for (const auto& p : cfg_.data.train) ds.train.push_back(parse_csv(read_text_file(p)));
            // nominal episodes: the "onset" marks where the AUC reference starts
            const auto start = cfg_.debias_window * cfg_.data.downsample;
            std::size_t i = 0;
            for (const auto& p : cfg_.data.validation) {
                ds.evaluation.push_back({episode_name("validation", i++), "validation", "none", 0.0, start,
                                         parse_csv(read_text_file(p)), ""});
            }
            i = 0;
            for (const auto& p : cfg_.data.holdout) {
                ds.evaluation.push_back(
                    {episode_name("holdout", i++), "holdout", "none", 0.0, start, parse_csv(read_text_file(p)), ""});
            }
            if (!cfg_.data.scenarios.empty()) {
                for (auto& s : load_scenario_index(cfg_.data.scenarios)) {
                    if (s.kind != "nominal" && s.kind != "fault") {
                        throw DataError("scenario '" + s.name + "' must be of kind nominal or fault");
                    }
                    ds.evaluation.push_back(std::move(s));
                }
            }
        }
        const auto f = cfg_.data.downsample;
        std::string train_list;
        TimeSeries pooled;
        for (std::size_t i = 0; i < ds.train.size(); ++i) {
            auto ts = prepare(ds.train[i]);
            const auto name = episode_name("train", i);
            write("data/" + name + ".csv", to_csv(ts));
            train_list += name + ".csv\n";
            if (pooled.names.empty()) pooled.names = ts.names, pooled.data.cols = ts.data.cols;
            if (ts.names != pooled.names) throw DataError("training episodes have different columns");
            pooled.data.data.insert(pooled.data.data.end(), ts.data.data.begin(), ts.data.data.end());
            pooled.data.rows += ts.length();
        }
        for (auto& s : ds.evaluation) {
            s.data = prepare(s.data);
            s.onset /= f;
            write("data/" + s.name + ".csv", to_csv(s.data));
        }
        write("data/train.txt", train_list);
        write("data/scenarios.csv", scenario_index_csv(ds.evaluation));
        write("normalization.txt", save_normalization(fit_normalization(pooled, cfg_.data.normalization)));
    }

    std::vector<TimeSeries> normalized_train(const Normalization& norm) const {
        std::istringstream list(read_text_file((out_ / "data" / "train.txt").string()));
        std::string line;
        std::vector<TimeSeries> out;
        while (std::getline(list, line)) {
            if (!line.empty()) out.push_back(normalize(parse_csv(read_text_file((out_ / "data" / line).string())), norm));
        }
        return out;
    }

    void train_stage(const std::vector<Candidate>& cands) {
        auto norm = load_normalization(read_text_file((out_ / "normalization.txt").string()));
        auto models = train_generators(cands, normalized_train(norm), cfg_);
        fs::remove_all(out_ / "weights");
        fs::remove_all(out_ / "loss");
        for (const auto& g : models) {
            for (std::size_t k = 0; k < g.members.size(); ++k) {
                write(weights_file(g.candidate.name, k), save_weights(g.members[k].rnn));
                std::string loss = "epoch,loss,learning_rate\n";
                const auto& m = g.members[k];
                for (std::size_t e = 0; e < m.loss_curve.size(); ++e) {
                    loss += std::to_string(e) + "," + fmt(m.loss_curve[e]) + "," + fmt(m.learning_rates[e]) + "\n";
                }
                write("loss/" + g.candidate.name + "_m" + std::to_string(k) + ".csv", loss);
            }
        }
    }

    std::vector<GeneratorModel> load_generators(const std::vector<Candidate>& cands) const {
        std::vector<GeneratorModel> out;
        for (const auto& c : cands) {
            GeneratorModel g{c, {}};
            for (std::size_t k = 0; k < cfg_.ensemble; ++k) {
                TrainResult r;
                r.rnn = load_weights(read_text_file((out_ / weights_file(c.name, k)).string()), &c.structure);
                g.members.push_back(std::move(r));
            }
            out.push_back(std::move(g));
        }
        return out;
    }

    void residual_stage(const std::vector<Candidate>& cands) {
        auto norm = load_normalization(read_text_file((out_ / "normalization.txt").string()));
        auto gens = load_generators(cands);
        auto index = load_scenario_index((out_ / "data" / "scenarios.csv").string(), false);
        fs::remove_all(out_ / "residuals");
        std::vector<std::string> tables(index.size());
        parallel_for(index.size(), cfg_.workers, [&](std::size_t s) {
            auto data = normalize(parse_csv(read_text_file((out_ / "data" / (index[s].name + ".csv")).string())), norm);
            TimeSeries r;
            for (const auto& g : gens) r.add_column(g.candidate.name, g.residual(data));
            tables[s] = to_csv(r);
        });
        for (std::size_t s = 0; s < index.size(); ++s) write("residuals/" + index[s].name + ".csv", tables[s]);
        write("residuals/index.csv", scenario_index_csv(index));
    }

    void evaluate_stage() {
        auto rep = evaluate_from_disk();
        fs::remove_all(out_ / "report");
        write("report/report.txt", report_text(rep));
        write("report/auc.csv", auc_csv(rep));
        write("report/alarms.csv", alarms_csv(rep));
        write("report/diagnosis.csv", diagnosis_csv(rep));
        auto index = load_scenario_index((out_ / "residuals" / "index.csv").string());
        for (const auto& s : index) {
            write("report/cusum/" + s.name + ".csv", to_csv(cusum_traces(s.data, rep, cfg_.debias_window)));
        }
    }

    PipelineConfig cfg_;
    std::ostream* log_;
    fs::path out_;
};

}  // namespace greybox
