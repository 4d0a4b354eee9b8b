#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "tsmon/common.hpp"
#include "tsmon/cusum.hpp"
#include "tsmon/global_stat.hpp"

namespace tsmon {

enum class Procedure {
    two_stage, ///< global alarm on G > h, then flag streams with 1 - p > c_h
    lt,        ///< step-up rule on the p-values at point-wise FDR q
};

std::string_view to_string(Procedure procedure);
Procedure parse_procedure(std::string_view name);

struct MonitorConfig {
    std::size_t m = 0;
    CusumParams params;
    Procedure procedure = Procedure::two_stage;
    double h = 0.0;   // two_stage
    double c_h = 0.0; // two_stage
    double q = 0.0;   // lt

    void validate() const;
};

struct MonitorState {
    std::vector<CusumState> streams;
    std::int64_t t = 0;
};

struct StepResult {
    std::int64_t t = 0;
    std::optional<double> g;        ///< two_stage only
    std::optional<double> lt_level; ///< lt only: min_k m p_(k) / k
    bool alarm = false;
    std::vector<std::size_t> flagged; ///< ascending stream index
    std::vector<double> pvalues;
    std::size_t n_missing = 0;
};

/// Number of rejections of the step-up rule, max{k : p_(k) <= k q / m}
/// (0 if none).
std::size_t step_up_count(std::span<const double> pvalues, double q);

/// min_k m p_(k) / k; the step-up rule rejects something iff this is <= q.
double step_up_level(std::span<const double> pvalues);

/// Tick-driven monitor over m streams with steady-state started CUSUMs.
/// Single writer: step() and restart_stream() mutate the monitor.
///
/// NaN observations are treated as missing: the stream's CUSUM is left
/// unchanged for that tick, so its p-value carries forward.
class Monitor {
public:
    /// Draws every stream's initial CUSUM value from the sample; t = 0.
    /// The sample must outlive the monitor.
    Monitor(MonitorConfig config, const SteadyStateSample& sample, Rng& rng);
    /// Starts from an explicit state (replay, tests).
    Monitor(MonitorConfig config, const SteadyStateSample& sample, MonitorState state);

    const StepResult& step(std::span<const double> observations);
    const StepResult& two_stage_step(std::span<const double> observations);
    const StepResult& lt_step(std::span<const double> observations);

    /// Redraws stream i from the steady-state sample; other streams untouched.
    void restart_stream(std::size_t i, Rng& rng);

    const MonitorConfig& config() const { return config_; }
    const MonitorState& state() const { return state_; }
    const StepResult& last() const { return result_; }
    const SteadyStateSample& sample() const { return *sample_; }

private:
    void advance(std::span<const double> observations);

    MonitorConfig config_;
    const SteadyStateSample* sample_;
    MonitorState state_;
    GlobalStatistic global_;
    StepResult result_;
    std::vector<std::size_t> order_;
};

/// One JSON-lines audit record: {"t":..,"g":..,"alarm":..,"flagged":[..]}.
void write_step_jsonl(std::ostream& out, const StepResult& result);

} // namespace tsmon
