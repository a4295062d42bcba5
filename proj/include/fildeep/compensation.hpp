#pragma once

// Inner-loop mold design: start from the target shape, derive the clamp
// motion from the mold by the involute construction, and move the mold
// point-wise against the predicted shape error until it is within tolerance.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <string>
#include <vector>

#include <json.hpp>

#include "fildeep/errors.hpp"
#include "fildeep/geometry.hpp"
#include "fildeep/metrics.hpp"
#include "fildeep/simulator.hpp"

namespace fildeep {

/// Predicted final line for a mold line and clamp motion.
using Predictor = std::function<CharLine(const CharLine& mold_line, const MotionParams& p)>;

struct CompensationOptions {
    double alpha = 0.8;
    double tau = 0.5;  // mm
    int max_iter = 50;
    double unwind_len = 0.0;  // involute unwind length in mm; must be set
    bool resample = true;     // re-spread the mold to equal arc length after each update

    void validate() const {
        if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in (0, 1]");
        if (!(tau > 0.0)) throw ConfigError("tau must be positive");
        if (max_iter < 0) throw ConfigError("max_iter must be >= 0");
        if (!(unwind_len > 0.0)) throw ConfigError("unwind_len must be positive");
    }
};

struct CompensationStep {
    CharLine mold;
    MotionParams motion;
    CharLine predicted;
    double mad_mm = 0.0;
};

struct CompensationTrace {
    std::vector<CompensationStep> iterations;  // iterations[0] is the initial design
    bool converged = false;
    std::string status;  // converged | max_iter | non_finite
    double tau = 0.0;
    double alpha = 0.0;

    std::vector<double> mad_sequence() const {
        std::vector<double> v;
        for (const auto& s : iterations) v.push_back(s.mad_mm);
        return v;
    }
    const CompensationStep& final() const { return iterations.back(); }

    nlohmann::json to_json() const {
        nlohmann::json it = nlohmann::json::array();
        for (std::size_t k = 0; k < iterations.size(); ++k)
            it.push_back({{"iteration", k}, {"mad_mm", iterations[k].mad_mm}, {"motion", iterations[k].motion.p}});
        return {{"converged", converged}, {"status", status}, {"tau", tau}, {"alpha", alpha},
                {"iterations", it}, {"final_mad_mm", iterations.empty() ? 0.0 : final().mad_mm}};
    }

    /// trace.json, mad.csv and per-iteration mold_<k>.csv / pred_<k>.csv.
    void write(const std::string& dir, const nlohmann::json& echo = nlohmann::json::object()) const {
        namespace fs = std::filesystem;
        fs::create_directories(dir);
        auto j = to_json();
        j["config_echo"] = echo;
        std::ofstream(fs::path(dir) / "trace.json") << j.dump(2) << '\n';
        std::ofstream mc(fs::path(dir) / "mad.csv");
        mc << "iteration,mad_mm\n" << std::setprecision(10);
        for (std::size_t k = 0; k < iterations.size(); ++k) {
            mc << k << ',' << iterations[k].mad_mm << '\n';
            write_line_csv((fs::path(dir) / ("mold_" + std::to_string(k) + ".csv")).string(), iterations[k].mold);
            write_line_csv((fs::path(dir) / ("pred_" + std::to_string(k) + ".csv")).string(), iterations[k].predicted);
        }
    }
};

/// Clamp motion for a mold line.
inline MotionParams motion_for_mold(const CharLine& mold, double unwind_len) {
    return involute_init(MoldCurve::from_line(mold), unwind_len);
}

/// Runs the loop from `init_mold` (the target itself when empty).
inline CompensationTrace compensate(const CharLine& target, const Predictor& predictor, const CompensationOptions& o,
                                    CharLine init_mold = {}) {
    o.validate();
    if (target.size() < 3 || !target.points.allFinite()) throw DataError("compensation target must be a finite line");
    if (init_mold.size() == 0) init_mold = target;
    if (init_mold.size() != target.size()) throw DataError("initial mold and target differ in point count");
    const int M = target.size();
    CompensationTrace tr;
    tr.tau = o.tau;
    tr.alpha = o.alpha;
    CharLine mold = init_mold;
    for (int k = 0;; ++k) {
        CompensationStep st;
        st.mold = mold;
        st.motion = motion_for_mold(mold, o.unwind_len);
        st.predicted = predictor(mold, st.motion);
        if (st.predicted.size() != M) throw DataError("predictor returned " + std::to_string(st.predicted.size()) + " points, expected " + std::to_string(M));
        if (!st.predicted.points.allFinite() || !st.motion.finite()) {
            st.mad_mm = std::nan("");
            tr.iterations.push_back(std::move(st));
            tr.status = "non_finite";
            return tr;
        }
        st.mad_mm = mad(st.predicted, target);
        const Points3 err = st.predicted.points - target.points;
        tr.iterations.push_back(std::move(st));
        if (tr.iterations.back().mad_mm < o.tau) {
            tr.converged = true;
            tr.status = "converged";
            return tr;
        }
        if (k >= o.max_iter) {
            tr.status = "max_iter";
            return tr;
        }
        Points3 next = mold.points - o.alpha * err;
        if (!next.allFinite()) {
            tr.status = "non_finite";
            return tr;
        }
        mold = o.resample ? resample_line(CharLine(next), M) : CharLine(next);
    }
}

/// A reachable target: the HF result of a sampled instance whose motion is
/// the involute of its own mold.
struct CompensationCase {
    ProblemInstance instance;
    CharLine target;
    double unwind_len = 0.0;
};

inline CompensationCase make_compensation_case(std::uint64_t seed, const GeneratorConfig& gen, double unwind_factor = 2.0) {
    CompensationCase c;
    c.instance = sample_instance(seed, gen);
    c.unwind_len = unwind_factor * c.instance.L0;
    c.instance.motion = involute_init(c.instance.mold, c.unwind_len);
    c.target = simulate(c.instance, gen.hf, gen);
    return c;
}

/// The HF simulator as a predictor: the instance's mold is replaced by the
/// profile read off the candidate mold line.
inline Predictor simulator_predictor(const ProblemInstance& base, const GeneratorConfig& gen, FidelityLevel fid) {
    return [base, gen, fid](const CharLine& mold_line, const MotionParams& p) {
        ProblemInstance inst = base;
        inst.mold = MoldCurve::from_line(mold_line);
        inst.mold_line = mold_line;
        inst.motion = p;
        return simulate(inst, fid, gen);
    };
}

} // namespace fildeep
