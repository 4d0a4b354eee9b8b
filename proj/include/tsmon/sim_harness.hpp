#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tsmon/cusum.hpp"
#include "tsmon/procedures.hpp"

namespace tsmon {

enum class Allocation {
    equal,      ///< delta_i = mu
    increasing, ///< delta_i = mu * log(1 + sqrt(i)), i = 1..m1
};

std::string_view to_string(Allocation allocation);
Allocation parse_allocation(std::string_view name);

/// Which streams start out of control and by how much their mean shifts.
struct OcScenario {
    std::size_t m = 0;
    std::size_t m1 = 0;
    Allocation allocation = Allocation::equal;
    double mu = 0.5;
    std::vector<std::size_t> oc_indices; ///< ascending; i-th entry gets delta_(i+1)

    /// OC streams are 0..m1-1.
    static OcScenario make(std::size_t m, std::size_t m1, Allocation allocation, double mu = 0.5);

    void validate() const;
    /// Mean shift of the j-th OC stream (j is 1-based).
    double shift(std::size_t j) const;
    /// Per-stream shift, zero for IC streams.
    std::vector<double> shifts_by_stream() const;
};

/// One draw per stream: N(mu0, 1), plus the stream's shift when it is still
/// active out of control.
std::vector<double> generate_observations(const OcScenario& scenario, const std::vector<bool>& active_oc,
                                          Rng& rng, double mu0 = 0.0);

struct TickCounts {
    std::int64_t t = 0;
    std::uint32_t V = 0; ///< falsely flagged (currently IC) streams
    std::uint32_t S = 0; ///< correctly flagged active OC streams
    std::uint32_t R = 0; ///< all flagged streams
    bool alarm = false;
};

struct TrialAccounting {
    std::vector<TickCounts> ticks;
    std::optional<std::int64_t> detection_time; ///< tick at which the last OC stream was flagged
    std::vector<std::int64_t> stream_detection; ///< flag tick per OC stream, oc_indices order; 0 = pending
    bool censored = false;

    /// Average flag tick over the OC streams; the trial's time to detect
    /// all OC streams. Absent until every OC stream is flagged.
    std::optional<double> atdoc() const;

    std::int64_t horizon() const { return static_cast<std::int64_t>(ticks.size()); }
    std::uint64_t total_V() const;
    std::uint64_t total_R() const;
    std::uint64_t total_S() const;
    std::uint64_t alarm_ticks() const;
};

struct TrialOptions {
    std::int64_t horizon_if_all_ic = 1000; ///< fixed horizon when m1 == 0
    std::int64_t tick_cap = 1'000'000;     ///< trials reaching this are censored
};

/// One detection trial. Every flagged stream is restarted from the
/// steady-state sample; flagged OC streams are marked detected and generate
/// IC data from then on, flagged IC streams stay IC. Ends once every OC
/// stream has been flagged.
TrialAccounting run_atdoc_trial(const OcScenario& scenario, const MonitorConfig& config,
                                const SteadyStateSample& sample, Rng& rng, const TrialOptions& options = {});

struct ExperimentResult {
    std::optional<double> atdoc_mean; ///< over trials of TrialAccounting::atdoc(); absent when m1 == 0
    std::optional<double> atdoc_sd;
    std::optional<double> last_detection_mean; ///< over trials of detection_time
    double gfdr = 0.0;        ///< sum V / max(1, sum R), pooled over trials and ticks
    double gfdr_trial_mean = 0.0; ///< mean over trials of V / max(1, R)
    double gpcer = 0.0;       ///< sum V / (total ticks * m)
    double gpcer_se = 0.0;    ///< ratio-estimator standard error of gpcer
    double gpcer_alarm = 0.0; ///< sum V / (alarm ticks * m)
    double gpcer_alarm_se = 0.0;
    std::size_t n_trials = 0;
    std::size_t censored = 0;
    std::uint64_t total_ticks = 0;
    std::uint64_t alarm_ticks = 0;
    std::uint64_t sum_V = 0;
    std::uint64_t sum_R = 0;
    std::uint64_t sum_S = 0;

    OcScenario scenario;
    MonitorConfig config;
    std::uint64_t seed = 0;
    std::optional<double> ic_arl;  ///< design IC-ARL, metadata only
    std::optional<double> nominal; ///< nominal PCER (two-stage) or q (lt)
};

/// n_trials independent trials, trial j on substream (seed, j). Censored
/// trials are excluded from the ATDOC moments and counted.
ExperimentResult run_experiment(const OcScenario& scenario, const MonitorConfig& config,
                                const SteadyStateSample& sample, std::size_t n_trials, std::uint64_t seed,
                                unsigned workers = 1, const TrialOptions& options = {});

struct PropositionCheck {
    double p_h1 = 0.0; ///< P(W_ic > c_h | G > h) with the OC stream present
    double se_h1 = 0.0;
    double p_h0 = 0.0; ///< same with every stream IC
    double se_h0 = 0.0;
};

/// Estimates both conditional exceedance probabilities at the first alarm
/// of B episodes each. `scenario` must have exactly one OC stream.
PropositionCheck check_appendix_proposition(const MonitorConfig& config, const SteadyStateSample& sample,
                                            const OcScenario& scenario, std::size_t B, std::uint64_t seed,
                                            unsigned workers = 1, std::int64_t run_cap = 1'000'000);

/// Flat "key = value" file with '#' comments.
class KeyValueConfig {
public:
    static KeyValueConfig read(const std::filesystem::path& path);
    static KeyValueConfig parse(std::string_view text, std::string_view origin = "<string>");

    bool contains(const std::string& key) const { return values_.count(key) != 0; }
    std::optional<std::string> get(const std::string& key) const;
    void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
    const std::map<std::string, std::string>& values() const { return values_; }

private:
    std::map<std::string, std::string> values_;
};

inline constexpr std::string_view kExperimentCsvHeader =
    "ic_arl,m,m1,allocation,procedure,nominal,atdoc_mean,atdoc_sd,gfdr,gpcer,gpcer_alarm,n_trials,censored,seed";

void write_experiment_csv_row(std::ostream& out, const ExperimentResult& result);
std::string experiment_metadata_json(const ExperimentResult& result);

} // namespace tsmon
