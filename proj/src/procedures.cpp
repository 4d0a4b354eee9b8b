#include "tsmon/procedures.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <string>

#include <nlohmann/json.hpp>

namespace tsmon {

std::string_view to_string(Procedure procedure)
{
    switch (procedure) {
    case Procedure::two_stage:
        return "two_stage";
    case Procedure::lt:
        return "lt";
    }
    return "unknown";
}

Procedure parse_procedure(std::string_view name)
{
    if (name == "two_stage" || name == "two-stage") {
        return Procedure::two_stage;
    }
    if (name == "lt" || name == "LT") {
        return Procedure::lt;
    }
    throw InvalidInput("unknown procedure '" + std::string(name) + "'");
}

void MonitorConfig::validate() const
{
    if (m == 0) {
        throw InvalidInput("monitor: m must be positive");
    }
    params.validate();
    if (procedure == Procedure::two_stage) {
        if (!(h >= 0.0) || !std::isfinite(h)) {
            throw InvalidInput("monitor: two-stage limit h must be finite and nonnegative");
        }
        if (!(c_h > 0.0 && c_h < 1.0)) {
            throw InvalidInput("monitor: stage-two limit c_h must lie in (0, 1)");
        }
    } else if (!(q > 0.0 && q < 1.0)) {
        throw InvalidInput("monitor: point-wise FDR q must lie in (0, 1)");
    }
}

std::size_t step_up_count(std::span<const double> pvalues, double q)
{
    std::vector<double> sorted(pvalues.begin(), pvalues.end());
    std::sort(sorted.begin(), sorted.end());
    const double m = static_cast<double>(sorted.size());
    for (std::size_t k = sorted.size(); k >= 1; --k) {
        if (sorted[k - 1] <= static_cast<double>(k) * q / m) {
            return k;
        }
    }
    return 0;
}

double step_up_level(std::span<const double> pvalues)
{
    std::vector<double> sorted(pvalues.begin(), pvalues.end());
    std::sort(sorted.begin(), sorted.end());
    const double m = static_cast<double>(sorted.size());
    double level = std::numeric_limits<double>::infinity();
    for (std::size_t k = 1; k <= sorted.size(); ++k) {
        level = std::min(level, m * sorted[k - 1] / static_cast<double>(k));
    }
    return level;
}

Monitor::Monitor(MonitorConfig config, const SteadyStateSample& sample, Rng& rng)
    : config_(config)
    , sample_(&sample)
    , global_(config.m == 0 ? 1 : config.m)
{
    config_.validate();
    state_.streams.resize(config_.m);
    for (auto& s : state_.streams) {
        s.value = draw_initial(*sample_, rng);
    }
    order_.resize(config_.m);
}

Monitor::Monitor(MonitorConfig config, const SteadyStateSample& sample, MonitorState state)
    : config_(config)
    , sample_(&sample)
    , state_(std::move(state))
    , global_(config.m == 0 ? 1 : config.m)
{
    config_.validate();
    if (state_.streams.size() != config_.m) {
        throw InvalidInput("monitor: initial state has the wrong number of streams");
    }
    for (const auto& s : state_.streams) {
        if (!(s.value >= 0.0)) {
            throw InvalidInput("monitor: CUSUM values must be nonnegative");
        }
    }
    order_.resize(config_.m);
}

const StepResult& Monitor::step(std::span<const double> observations)
{
    return config_.procedure == Procedure::two_stage ? two_stage_step(observations) : lt_step(observations);
}

void Monitor::advance(std::span<const double> observations)
{
    if (observations.size() != config_.m) {
        throw InvalidInput("monitor: expected " + std::to_string(config_.m) + " observations, got " +
                           std::to_string(observations.size()));
    }
    result_.n_missing = 0;
    for (double x : observations) {
        if (std::isinf(x)) {
            throw InvalidInput("monitor: infinite observation");
        }
    }
    result_.pvalues.resize(config_.m);
    for (std::size_t i = 0; i < config_.m; ++i) {
        const double x = observations[i];
        if (std::isnan(x)) {
            ++result_.n_missing;
        } else {
            state_.streams[i] = cusum_update(state_.streams[i], x, config_.params);
        }
        result_.pvalues[i] = steady_state_pvalue(*sample_, state_.streams[i].value);
    }
    ++state_.t;
    result_.t = state_.t;
    result_.flagged.clear();
}

const StepResult& Monitor::two_stage_step(std::span<const double> observations)
{
    if (config_.procedure != Procedure::two_stage) {
        throw ConfigError("two_stage_step called on a monitor configured for " +
                          std::string(to_string(config_.procedure)));
    }
    advance(observations);
    const double g = global_(result_.pvalues);
    result_.g = g;
    result_.lt_level.reset();
    result_.alarm = g > config_.h;
    if (result_.alarm) {
        for (std::size_t i = 0; i < config_.m; ++i) {
            if (1.0 - result_.pvalues[i] > config_.c_h) {
                result_.flagged.push_back(i);
            }
        }
    }
    return result_;
}

const StepResult& Monitor::lt_step(std::span<const double> observations)
{
    if (config_.procedure != Procedure::lt) {
        throw ConfigError("lt_step called on a monitor configured for " +
                          std::string(to_string(config_.procedure)));
    }
    advance(observations);
    const auto& p = result_.pvalues;
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::stable_sort(order_.begin(), order_.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });

    const double m = static_cast<double>(config_.m);
    std::size_t rejections = 0;
    double level = std::numeric_limits<double>::infinity();
    for (std::size_t k = 1; k <= config_.m; ++k) {
        const double pk = p[order_[k - 1]];
        if (pk <= static_cast<double>(k) * config_.q / m) {
            rejections = k;
        }
        level = std::min(level, m * pk / static_cast<double>(k));
    }
    result_.g.reset();
    result_.lt_level = level;
    result_.alarm = rejections > 0;
    if (result_.alarm) {
        result_.flagged.assign(order_.begin(), order_.begin() + static_cast<std::ptrdiff_t>(rejections));
        std::sort(result_.flagged.begin(), result_.flagged.end());
    }
    return result_;
}

void Monitor::restart_stream(std::size_t i, Rng& rng)
{
    if (i >= config_.m) {
        throw InvalidInput("restart_stream: index " + std::to_string(i) + " out of range");
    }
    state_.streams[i].value = draw_initial(*sample_, rng);
}

void write_step_jsonl(std::ostream& out, const StepResult& result)
{
    nlohmann::ordered_json rec;
    rec["t"] = result.t;
    if (result.g) {
        rec["g"] = *result.g;
    }
    if (result.lt_level) {
        rec["lt_level"] = *result.lt_level;
    }
    rec["alarm"] = result.alarm;
    rec["flagged"] = result.flagged;
    if (result.n_missing > 0) {
        rec["missing"] = result.n_missing;
    }
    out << rec.dump() << '\n';
}

} // namespace tsmon
