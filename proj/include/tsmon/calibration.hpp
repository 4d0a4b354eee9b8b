#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "tsmon/cusum.hpp"
#include "tsmon/procedures.hpp"

namespace tsmon {

/// Monte-Carlo setup shared by every IC run-length calibration.
struct CalibrationSpec {
    std::size_t m = 100;
    CusumParams params;
    double target_ic_arl = 200.0;
    std::size_t reps = 2500;
    double tolerance = 0.05;      ///< relative, on the IC-ARL
    std::int64_t max_run_cap = 0; ///< 0 selects 50 * target_ic_arl
    unsigned workers = 1;

    void validate() const;
    std::int64_t run_cap() const;
};

struct StageTwoSpec {
    double alpha = 0.05; ///< target per-comparison error rate
    std::size_t B = 2500;

    void validate() const;
};

struct ArlEstimate {
    double mean = 0.0;
    double std_error = 0.0;
    std::size_t reps = 0;
    std::size_t censored = 0; ///< runs truncated at the cap, counted as the cap
};

/// Mean first time G_t > h over spec.reps steady-state started IC runs.
/// Replication r always uses substream (seed, r), so estimates at different
/// h share random numbers.
ArlEstimate estimate_ic_arl(double h, const CalibrationSpec& spec, const SteadyStateSample& sample,
                            std::uint64_t seed);

/// Same for the step-up monitor at point-wise FDR q.
ArlEstimate estimate_lt_ic_arl(double q, const CalibrationSpec& spec, const SteadyStateSample& sample,
                               std::uint64_t seed);

struct LimitCalibration {
    double limit = 0.0;
    ArlEstimate arl;
    int evaluations = 0; ///< full Monte-Carlo passes used to bracket the target
};

/// Bracket by geometric growth from `initial_h`, then bisect down to a
/// 1e-3 bracket. Throws CalibrationInfeasible if no bracket is found or
/// the final IC-ARL misses the target by more than spec.tolerance.
LimitCalibration calibrate_h(const CalibrationSpec& spec, const SteadyStateSample& sample, std::uint64_t seed,
                             double initial_h = 10.0);

/// Point-wise FDR q of the step-up monitor that meets the IC-ARL target.
LimitCalibration calibrate_q_lt(const CalibrationSpec& spec, const SteadyStateSample& sample,
                                std::uint64_t seed, double initial_q = 0.05);

struct ExceedanceEstimate {
    double mean = 0.0;
    double std_error = 0.0;
};

/// Local statistics W = 1 - p of all m streams at the first alarm of each
/// of B IC episodes. Each snapshot is kept sorted so the exceedance fraction
/// at any c is a binary search.
class AlarmSnapshots {
public:
    static AlarmSnapshots collect(double h, const CalibrationSpec& spec, std::size_t B,
                                  const SteadyStateSample& sample, std::uint64_t seed);

    /// Average over episodes of #{W > c} / m.
    ExceedanceEstimate exceedance(double c) const;

    std::size_t episodes() const { return snapshots_.size(); }
    std::size_t redraws() const { return redraws_; }

private:
    std::vector<std::vector<double>> snapshots_;
    std::size_t redraws_ = 0;
};

/// Monte-Carlo estimate of (1/m) sum_i P_H0(W_i > c | G > h).
ExceedanceEstimate estimate_conditional_exceedance(double c, double h, const CalibrationSpec& spec,
                                                   const StageTwoSpec& s2, const SteadyStateSample& sample,
                                                   std::uint64_t seed);

struct StageTwoLimit {
    double alpha = 0.0;
    double c_h = 0.0;
    ExceedanceEstimate achieved;
};

/// Bisection on c in (0, 1) for exceedance(c) == alpha.
StageTwoLimit calibrate_c(double alpha, const AlarmSnapshots& snapshots);
StageTwoLimit calibrate_c(double alpha, double h, const CalibrationSpec& spec, const StageTwoSpec& s2,
                          const SteadyStateSample& sample, std::uint64_t seed);

/// Everything a monitor needs for one (m, k, IC-ARL) setting.
struct CalibrationResult {
    std::size_t m = 0;
    CusumParams params;
    double target_ic_arl = 0.0;
    std::uint64_t seed = 0;
    std::size_t reps = 0;
    std::size_t B = 0;
    std::optional<double> h;
    ArlEstimate h_arl;
    std::vector<StageTwoLimit> stage_two;
    std::optional<double> q;
    ArlEstimate q_arl;

    /// Two-stage config for the given alpha (must be present in stage_two).
    MonitorConfig two_stage_config(double alpha) const;
    MonitorConfig lt_config() const;
};

void write_calibration_json(const CalibrationResult& result, const std::filesystem::path& path);
CalibrationResult read_calibration_json(const std::filesystem::path& path);

} // namespace tsmon
