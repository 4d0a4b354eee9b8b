#include "tsmon/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include <nlohmann/json.hpp>

namespace tsmon {

namespace {

constexpr double kGrowth = 1.25;
constexpr int kMaxBracketSteps = 60;
constexpr double kHWidthFloor = 1e-3;
constexpr double kCWidthFloor = 1e-6;
constexpr double kQRelativeWidthFloor = 1e-6;
constexpr int kMaxEpisodeRedraws = 20;

/// Record values of one IC run's alarm statistic. For the two-stage monitor
/// these are the successive strict maxima of G_t; for the step-up monitor
/// the successive strict minima of its level. The run length at any limit
/// that the run was simulated past is the time of the first record that
/// crosses it.
struct Ladder {
    std::vector<std::int64_t> times;
    std::vector<double> levels;
    std::int64_t length = 0;
    bool censored = false;
};

bool crosses(Procedure procedure, double level, double limit)
{
    return procedure == Procedure::two_stage ? level > limit : level <= limit;
}

MonitorConfig ic_config(Procedure procedure, double limit, const CalibrationSpec& spec)
{
    MonitorConfig cfg;
    cfg.m = spec.m;
    cfg.params = spec.params;
    cfg.procedure = procedure;
    if (procedure == Procedure::two_stage) {
        cfg.h = limit;
        cfg.c_h = 0.5;
    } else {
        cfg.q = limit;
    }
    return cfg;
}

Ladder simulate_ladder(Procedure procedure, double stop_limit, const CalibrationSpec& spec,
                       const SteadyStateSample& sample, std::uint64_t seed, std::size_t rep)
{
    Rng rng = make_rng(seed, rep);
    Monitor monitor(ic_config(procedure, stop_limit, spec), sample, rng);
    std::normal_distribution<double> noise(spec.params.mu0, 1.0);
    std::vector<double> obs(spec.m);

    Ladder ladder;
    double best = procedure == Procedure::two_stage ? 0.0 : std::numeric_limits<double>::infinity();
    const std::int64_t cap = spec.run_cap();
    for (std::int64_t t = 1; t <= cap; ++t) {
        for (auto& x : obs) {
            x = noise(rng);
        }
        const StepResult& r = monitor.step(obs);
        const double level = procedure == Procedure::two_stage ? *r.g : *r.lt_level;
        const bool improved = procedure == Procedure::two_stage ? level > best : level < best;
        if (improved) {
            best = level;
            ladder.times.push_back(t);
            ladder.levels.push_back(level);
        }
        if (crosses(procedure, level, stop_limit)) {
            ladder.length = t;
            return ladder;
        }
    }
    ladder.length = cap;
    ladder.censored = true;
    return ladder;
}

std::vector<Ladder> simulate_ladders(Procedure procedure, double stop_limit, const CalibrationSpec& spec,
                                     const SteadyStateSample& sample, std::uint64_t seed)
{
    std::vector<Ladder> ladders(spec.reps);
    parallel_for(spec.reps, spec.workers, [&](std::size_t r) {
        ladders[r] = simulate_ladder(procedure, stop_limit, spec, sample, seed, r);
    });
    return ladders;
}

/// Valid for two-stage limits <= the stop limit the ladders were built at
/// (step-up: q >= the stop q).
ArlEstimate evaluate(Procedure procedure, const std::vector<Ladder>& ladders, double limit, std::int64_t cap)
{
    ArlEstimate est;
    est.reps = ladders.size();
    double sum = 0.0;
    double sum_sq = 0.0;
    for (const auto& ladder : ladders) {
        std::int64_t run = cap;
        bool crossed = false;
        for (std::size_t j = 0; j < ladder.levels.size(); ++j) {
            if (crosses(procedure, ladder.levels[j], limit)) {
                run = ladder.times[j];
                crossed = true;
                break;
            }
        }
        if (!crossed) {
            ++est.censored;
        }
        const double x = static_cast<double>(run);
        sum += x;
        sum_sq += x * x;
    }
    const double n = static_cast<double>(ladders.size());
    est.mean = sum / n;
    const double var = n > 1 ? std::max(0.0, (sum_sq - n * est.mean * est.mean) / (n - 1.0)) : 0.0;
    est.std_error = std::sqrt(var / n);
    return est;
}

void require_uncensored(const ArlEstimate& est)
{
    if (est.censored == est.reps) {
        throw CalibrationInfeasible("every replication reached the run cap");
    }
}

} // namespace

void CalibrationSpec::validate() const
{
    params.validate();
    if (m == 0) {
        throw InvalidInput("calibration: m must be positive");
    }
    if (!(target_ic_arl >= 1.0)) {
        throw InvalidInput("calibration: target IC-ARL must be at least 1");
    }
    if (reps < 2) {
        throw InvalidInput("calibration: need at least two replications");
    }
    if (!(tolerance > 0.0 && tolerance < 0.2)) {
        throw InvalidInput("calibration: tolerance must lie in (0, 0.2)");
    }
    if (max_run_cap != 0 && static_cast<double>(max_run_cap) < 10.0 * target_ic_arl) {
        throw InvalidInput("calibration: run cap must be at least 10 x target IC-ARL");
    }
}

std::int64_t CalibrationSpec::run_cap() const
{
    return max_run_cap != 0 ? max_run_cap : static_cast<std::int64_t>(std::ceil(50.0 * target_ic_arl));
}

void StageTwoSpec::validate() const
{
    if (!(alpha > 0.0 && alpha < 1.0)) {
        throw InvalidInput("stage two: alpha must lie in (0, 1)");
    }
    if (B == 0) {
        throw InvalidInput("stage two: B must be positive");
    }
}

ArlEstimate estimate_ic_arl(double h, const CalibrationSpec& spec, const SteadyStateSample& sample,
                            std::uint64_t seed)
{
    spec.validate();
    if (!(h >= 0.0)) {
        throw InvalidInput("estimate_ic_arl: h must be nonnegative");
    }
    auto ladders = simulate_ladders(Procedure::two_stage, h, spec, sample, seed);
    auto est = evaluate(Procedure::two_stage, ladders, h, spec.run_cap());
    require_uncensored(est);
    return est;
}

ArlEstimate estimate_lt_ic_arl(double q, const CalibrationSpec& spec, const SteadyStateSample& sample,
                               std::uint64_t seed)
{
    spec.validate();
    if (!(q > 0.0 && q < 1.0)) {
        throw InvalidInput("estimate_lt_ic_arl: q must lie in (0, 1)");
    }
    auto ladders = simulate_ladders(Procedure::lt, q, spec, sample, seed);
    auto est = evaluate(Procedure::lt, ladders, q, spec.run_cap());
    require_uncensored(est);
    return est;
}

LimitCalibration calibrate_h(const CalibrationSpec& spec, const SteadyStateSample& sample, std::uint64_t seed,
                             double initial_h)
{
    spec.validate();
    if (!(initial_h > 0.0)) {
        throw InvalidInput("calibrate_h: initial guess must be positive");
    }
    const double target = spec.target_ic_arl;
    const std::int64_t cap = spec.run_cap();
    LimitCalibration out;

    // Grow until the simulated runs reach the target; the last ladders then
    // cover every h below the upper bracket.
    double hi = initial_h;
    std::optional<double> lo;
    auto ladders = simulate_ladders(Procedure::two_stage, hi, spec, sample, seed);
    ++out.evaluations;
    while (evaluate(Procedure::two_stage, ladders, hi, cap).mean < target) {
        if (out.evaluations >= kMaxBracketSteps) {
            throw CalibrationInfeasible("calibrate_h: could not bracket the target IC-ARL");
        }
        lo = hi;
        hi *= kGrowth;
        ladders = simulate_ladders(Procedure::two_stage, hi, spec, sample, seed);
        ++out.evaluations;
    }
    if (!lo) {
        double candidate = hi;
        for (int i = 0;; ++i) {
            if (i >= kMaxBracketSteps) {
                throw CalibrationInfeasible("calibrate_h: could not bracket the target IC-ARL");
            }
            candidate /= kGrowth;
            if (evaluate(Procedure::two_stage, ladders, candidate, cap).mean < target) {
                lo = candidate;
                break;
            }
        }
    }

    double a = *lo;
    double b = hi;
    while (b - a > kHWidthFloor) {
        const double mid = 0.5 * (a + b);
        if (evaluate(Procedure::two_stage, ladders, mid, cap).mean < target) {
            a = mid;
        } else {
            b = mid;
        }
    }
    out.limit = 0.5 * (a + b);
    out.arl = evaluate(Procedure::two_stage, ladders, out.limit, cap);
    require_uncensored(out.arl);
    if (std::abs(out.arl.mean - target) > spec.tolerance * target) {
        throw CalibrationInfeasible("calibrate_h: IC-ARL " + std::to_string(out.arl.mean) +
                                    " outside tolerance of target " + std::to_string(target));
    }
    return out;
}

LimitCalibration calibrate_q_lt(const CalibrationSpec& spec, const SteadyStateSample& sample,
                                std::uint64_t seed, double initial_q)
{
    spec.validate();
    if (!(initial_q > 0.0 && initial_q < 1.0)) {
        throw InvalidInput("calibrate_q_lt: initial guess must lie in (0, 1)");
    }
    const double target = spec.target_ic_arl;
    const std::int64_t cap = spec.run_cap();
    LimitCalibration out;

    // Smaller q means fewer alarms. Shrink until the runs reach the target;
    // the ladders at the smallest q cover every larger q.
    double q_low = initial_q;
    std::optional<double> q_high;
    auto ladders = simulate_ladders(Procedure::lt, q_low, spec, sample, seed);
    ++out.evaluations;
    while (evaluate(Procedure::lt, ladders, q_low, cap).mean < target) {
        if (out.evaluations >= kMaxBracketSteps) {
            throw CalibrationInfeasible("calibrate_q_lt: could not bracket the target IC-ARL");
        }
        q_high = q_low;
        q_low /= kGrowth;
        ladders = simulate_ladders(Procedure::lt, q_low, spec, sample, seed);
        ++out.evaluations;
    }
    if (!q_high) {
        double candidate = q_low;
        for (int i = 0;; ++i) {
            candidate = std::min(candidate * kGrowth, 1.0 - 1e-12);
            if (evaluate(Procedure::lt, ladders, candidate, cap).mean < target) {
                q_high = candidate;
                break;
            }
            if (i >= kMaxBracketSteps || candidate >= 1.0 - 1e-12) {
                throw CalibrationInfeasible("calibrate_q_lt: could not bracket the target IC-ARL");
            }
        }
    }

    double a = q_low;
    double b = *q_high;
    while (b / a - 1.0 > kQRelativeWidthFloor) {
        const double mid = std::sqrt(a * b);
        if (evaluate(Procedure::lt, ladders, mid, cap).mean < target) {
            b = mid;
        } else {
            a = mid;
        }
    }
    out.limit = std::sqrt(a * b);
    out.arl = evaluate(Procedure::lt, ladders, out.limit, cap);
    require_uncensored(out.arl);
    if (std::abs(out.arl.mean - target) > spec.tolerance * target) {
        throw CalibrationInfeasible("calibrate_q_lt: IC-ARL " + std::to_string(out.arl.mean) +
                                    " outside tolerance of target " + std::to_string(target));
    }
    return out;
}

AlarmSnapshots AlarmSnapshots::collect(double h, const CalibrationSpec& spec, std::size_t B,
                                       const SteadyStateSample& sample, std::uint64_t seed)
{
    spec.validate();
    if (B == 0) {
        throw InvalidInput("alarm snapshots: B must be positive");
    }
    AlarmSnapshots out;
    out.snapshots_.resize(B);
    std::vector<std::size_t> redraws(B, 0);
    const std::int64_t cap = spec.run_cap();
    const MonitorConfig cfg = ic_config(Procedure::two_stage, h, spec);

    parallel_for(B, spec.workers, [&](std::size_t b) {
        const std::uint64_t episode_seed = derive_seed(seed, b);
        for (int attempt = 0; attempt <= kMaxEpisodeRedraws; ++attempt) {
            Rng rng = make_rng(episode_seed, static_cast<std::uint64_t>(attempt));
            Monitor monitor(cfg, sample, rng);
            std::normal_distribution<double> noise(spec.params.mu0, 1.0);
            std::vector<double> obs(spec.m);
            for (std::int64_t t = 1; t <= cap; ++t) {
                for (auto& x : obs) {
                    x = noise(rng);
                }
                const StepResult& r = monitor.step(obs);
                if (r.alarm) {
                    auto& w = out.snapshots_[b];
                    w.resize(spec.m);
                    std::transform(r.pvalues.begin(), r.pvalues.end(), w.begin(),
                                   [](double p) { return 1.0 - p; });
                    std::sort(w.begin(), w.end());
                    return;
                }
            }
            ++redraws[b];
        }
        throw CalibrationInfeasible("alarm snapshots: episode exceeded the run cap too many times");
    });
    out.redraws_ = std::accumulate(redraws.begin(), redraws.end(), std::size_t{0});
    return out;
}

ExceedanceEstimate AlarmSnapshots::exceedance(double c) const
{
    ExceedanceEstimate est;
    if (snapshots_.empty()) {
        return est;
    }
    double sum = 0.0;
    double sum_sq = 0.0;
    for (const auto& w : snapshots_) {
        const auto above = static_cast<double>(w.end() - std::upper_bound(w.begin(), w.end(), c));
        const double frac = above / static_cast<double>(w.size());
        sum += frac;
        sum_sq += frac * frac;
    }
    const double n = static_cast<double>(snapshots_.size());
    est.mean = sum / n;
    const double var = n > 1 ? std::max(0.0, (sum_sq - n * est.mean * est.mean) / (n - 1.0)) : 0.0;
    est.std_error = std::sqrt(var / n);
    return est;
}

ExceedanceEstimate estimate_conditional_exceedance(double c, double h, const CalibrationSpec& spec,
                                                   const StageTwoSpec& s2, const SteadyStateSample& sample,
                                                   std::uint64_t seed)
{
    if (!(c >= 0.0 && c <= 1.0)) {
        throw InvalidInput("conditional exceedance: c must lie in [0, 1]");
    }
    return AlarmSnapshots::collect(h, spec, s2.B, sample, seed).exceedance(c);
}

StageTwoLimit calibrate_c(double alpha, const AlarmSnapshots& snapshots)
{
    if (!(alpha > 0.0 && alpha < 1.0)) {
        throw InvalidInput("calibrate_c: alpha must lie in (0, 1)");
    }
    // exceedance(0) == 1 and exceedance(1) == 0 because W is clamped inside
    // (0, 1); the bisection keeps exceedance(lo) > alpha >= exceedance(hi).
    double lo = 0.0;
    double hi = 1.0;
    while (hi - lo > kCWidthFloor) {
        const double mid = 0.5 * (lo + hi);
        if (snapshots.exceedance(mid).mean > alpha) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    return StageTwoLimit{alpha, hi, snapshots.exceedance(hi)};
}

StageTwoLimit calibrate_c(double alpha, double h, const CalibrationSpec& spec, const StageTwoSpec& s2,
                          const SteadyStateSample& sample, std::uint64_t seed)
{
    s2.validate();
    return calibrate_c(alpha, AlarmSnapshots::collect(h, spec, s2.B, sample, seed));
}

MonitorConfig CalibrationResult::two_stage_config(double alpha) const
{
    if (!h) {
        throw ConfigError("calibration has no stage-one limit");
    }
    for (const auto& s : stage_two) {
        if (std::abs(s.alpha - alpha) <= 1e-12 * std::max(1.0, alpha)) {
            MonitorConfig cfg;
            cfg.m = m;
            cfg.params = params;
            cfg.procedure = Procedure::two_stage;
            cfg.h = *h;
            cfg.c_h = s.c_h;
            return cfg;
        }
    }
    throw ConfigError("calibration has no stage-two limit for alpha " + std::to_string(alpha));
}

MonitorConfig CalibrationResult::lt_config() const
{
    if (!q) {
        throw ConfigError("calibration has no point-wise FDR q");
    }
    MonitorConfig cfg;
    cfg.m = m;
    cfg.params = params;
    cfg.procedure = Procedure::lt;
    cfg.q = *q;
    return cfg;
}

namespace {

nlohmann::ordered_json arl_json(const ArlEstimate& e)
{
    return {{"mean", e.mean}, {"std_error", e.std_error}, {"reps", e.reps}, {"censored", e.censored}};
}

ArlEstimate arl_from_json(const nlohmann::json& j)
{
    ArlEstimate e;
    e.mean = j.at("mean").get<double>();
    e.std_error = j.at("std_error").get<double>();
    e.reps = j.value("reps", std::size_t{0});
    e.censored = j.value("censored", std::size_t{0});
    return e;
}

} // namespace

void write_calibration_json(const CalibrationResult& result, const std::filesystem::path& path)
{
    nlohmann::ordered_json doc;
    doc["m"] = result.m;
    doc["mu0"] = result.params.mu0;
    doc["k"] = result.params.k;
    doc["target_ic_arl"] = result.target_ic_arl;
    doc["seed"] = result.seed;
    doc["reps"] = result.reps;
    doc["B"] = result.B;
    doc["h"] = result.h ? nlohmann::ordered_json(*result.h) : nlohmann::ordered_json(nullptr);
    auto stage_two = nlohmann::ordered_json::array();
    for (const auto& s : result.stage_two) {
        stage_two.push_back({{"alpha", s.alpha},
                             {"c_h", s.c_h},
                             {"pcer", s.achieved.mean},
                             {"pcer_std_error", s.achieved.std_error}});
    }
    doc["stage_two"] = stage_two;
    doc["q"] = result.q ? nlohmann::ordered_json(*result.q) : nlohmann::ordered_json(nullptr);
    nlohmann::ordered_json errors;
    if (result.h) {
        errors["h_ic_arl"] = arl_json(result.h_arl);
    }
    if (result.q) {
        errors["q_ic_arl"] = arl_json(result.q_arl);
    }
    doc["std_errors"] = errors;

    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot open " + path.string() + " for writing");
    }
    out << doc.dump(2) << '\n';
}

CalibrationResult read_calibration_json(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open " + path.string());
    }
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
    try {
        CalibrationResult r;
        r.m = doc.at("m").get<std::size_t>();
        r.params.mu0 = doc.value("mu0", 0.0);
        r.params.k = doc.at("k").get<double>();
        r.target_ic_arl = doc.at("target_ic_arl").get<double>();
        r.seed = doc.value("seed", std::uint64_t{0});
        r.reps = doc.value("reps", std::size_t{0});
        r.B = doc.value("B", std::size_t{0});
        if (doc.contains("h") && !doc["h"].is_null()) {
            r.h = doc["h"].get<double>();
        }
        if (doc.contains("q") && !doc["q"].is_null()) {
            r.q = doc["q"].get<double>();
        }
        for (const auto& s : doc.value("stage_two", nlohmann::json::array())) {
            StageTwoLimit lim;
            lim.alpha = s.at("alpha").get<double>();
            lim.c_h = s.at("c_h").get<double>();
            lim.achieved.mean = s.value("pcer", 0.0);
            lim.achieved.std_error = s.value("pcer_std_error", 0.0);
            r.stage_two.push_back(lim);
        }
        if (doc.contains("std_errors")) {
            const auto& e = doc["std_errors"];
            if (e.contains("h_ic_arl")) {
                r.h_arl = arl_from_json(e["h_ic_arl"]);
            }
            if (e.contains("q_ic_arl")) {
                r.q_arl = arl_from_json(e["q_ic_arl"]);
            }
        }
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

} // namespace tsmon
