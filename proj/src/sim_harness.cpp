#include "tsmon/sim_harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace tsmon {

namespace {

std::string fmt_number(double x)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", x);
    return buf;
}

std::string fmt_optional(const std::optional<double>& x)
{
    return x ? fmt_number(*x) : std::string("NA");
}

std::string trim(std::string_view s)
{
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) {
        return {};
    }
    const auto last = s.find_last_not_of(" \t\r");
    return std::string(s.substr(first, last - first + 1));
}

/// Standard error of the ratio estimator sum(num) / sum(den).
double ratio_std_error(const std::vector<double>& num, const std::vector<double>& den)
{
    const std::size_t n = num.size();
    if (n < 2) {
        return 0.0;
    }
    const double total_den = std::accumulate(den.begin(), den.end(), 0.0);
    if (total_den <= 0.0) {
        return 0.0;
    }
    const double ratio = std::accumulate(num.begin(), num.end(), 0.0) / total_den;
    double ss = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        const double resid = num[j] - ratio * den[j];
        ss += resid * resid;
    }
    const double mean_den = total_den / static_cast<double>(n);
    return std::sqrt(ss / (static_cast<double>(n) * static_cast<double>(n - 1))) / mean_den;
}

} // namespace

std::string_view to_string(Allocation allocation)
{
    return allocation == Allocation::equal ? "equal" : "increasing";
}

Allocation parse_allocation(std::string_view name)
{
    if (name == "equal") {
        return Allocation::equal;
    }
    if (name == "increasing") {
        return Allocation::increasing;
    }
    throw InvalidInput("unknown allocation '" + std::string(name) + "'");
}

OcScenario OcScenario::make(std::size_t m, std::size_t m1, Allocation allocation, double mu)
{
    OcScenario s;
    s.m = m;
    s.m1 = m1;
    s.allocation = allocation;
    s.mu = mu;
    s.oc_indices.resize(m1);
    std::iota(s.oc_indices.begin(), s.oc_indices.end(), std::size_t{0});
    s.validate();
    return s;
}

void OcScenario::validate() const
{
    if (m == 0) {
        throw InvalidInput("scenario: m must be positive");
    }
    if (m1 > m) {
        throw InvalidInput("scenario: m1 exceeds m");
    }
    if (!(mu >= 0.0) || !std::isfinite(mu)) {
        throw InvalidInput("scenario: mu must be finite and nonnegative");
    }
    if (oc_indices.size() != m1) {
        throw InvalidInput("scenario: expected m1 OC indices");
    }
    for (std::size_t j = 0; j < oc_indices.size(); ++j) {
        if (oc_indices[j] >= m || (j > 0 && oc_indices[j] <= oc_indices[j - 1])) {
            throw InvalidInput("scenario: OC indices must be ascending and below m");
        }
    }
}

double OcScenario::shift(std::size_t j) const
{
    if (allocation == Allocation::equal) {
        return mu;
    }
    return mu * std::log(1.0 + std::sqrt(static_cast<double>(j)));
}

std::vector<double> OcScenario::shifts_by_stream() const
{
    std::vector<double> out(m, 0.0);
    for (std::size_t j = 0; j < oc_indices.size(); ++j) {
        out[oc_indices[j]] = shift(j + 1);
    }
    return out;
}

std::vector<double> generate_observations(const OcScenario& scenario, const std::vector<bool>& active_oc,
                                          Rng& rng, double mu0)
{
    if (active_oc.size() != scenario.m) {
        throw InvalidInput("generate_observations: active set has the wrong size");
    }
    const auto shifts = scenario.shifts_by_stream();
    std::normal_distribution<double> noise(mu0, 1.0);
    std::vector<double> out(scenario.m);
    for (std::size_t i = 0; i < scenario.m; ++i) {
        if (active_oc[i] && !std::binary_search(scenario.oc_indices.begin(), scenario.oc_indices.end(), i)) {
            throw InvalidInput("generate_observations: active stream is not an OC stream");
        }
        out[i] = noise(rng) + (active_oc[i] ? shifts[i] : 0.0);
    }
    return out;
}

std::uint64_t TrialAccounting::total_V() const
{
    return std::accumulate(ticks.begin(), ticks.end(), std::uint64_t{0},
                           [](std::uint64_t acc, const TickCounts& c) { return acc + c.V; });
}

std::uint64_t TrialAccounting::total_R() const
{
    return std::accumulate(ticks.begin(), ticks.end(), std::uint64_t{0},
                           [](std::uint64_t acc, const TickCounts& c) { return acc + c.R; });
}

std::uint64_t TrialAccounting::total_S() const
{
    return std::accumulate(ticks.begin(), ticks.end(), std::uint64_t{0},
                           [](std::uint64_t acc, const TickCounts& c) { return acc + c.S; });
}

std::uint64_t TrialAccounting::alarm_ticks() const
{
    return static_cast<std::uint64_t>(
        std::count_if(ticks.begin(), ticks.end(), [](const TickCounts& c) { return c.alarm; }));
}

std::optional<double> TrialAccounting::atdoc() const
{
    if (!detection_time || stream_detection.empty()) {
        return std::nullopt;
    }
    const double sum = static_cast<double>(std::accumulate(stream_detection.begin(), stream_detection.end(),
                                                           std::int64_t{0}));
    return sum / static_cast<double>(stream_detection.size());
}

TrialAccounting run_atdoc_trial(const OcScenario& scenario, const MonitorConfig& config,
                                const SteadyStateSample& sample, Rng& rng, const TrialOptions& options)
{
    scenario.validate();
    if (scenario.m != config.m) {
        throw ConfigError("trial: scenario and monitor disagree on m");
    }
    Monitor monitor(config, sample, rng);
    const auto shifts = scenario.shifts_by_stream();
    std::vector<bool> active(scenario.m, false);
    for (auto i : scenario.oc_indices) {
        active[i] = true;
    }
    std::size_t remaining = scenario.m1;
    std::vector<std::size_t> oc_slot(scenario.m, 0);
    for (std::size_t j = 0; j < scenario.oc_indices.size(); ++j) {
        oc_slot[scenario.oc_indices[j]] = j;
    }
    std::normal_distribution<double> noise(config.params.mu0, 1.0);
    std::vector<double> obs(scenario.m);

    TrialAccounting acc;
    acc.stream_detection.assign(scenario.m1, 0);
    const std::int64_t limit = scenario.m1 == 0 ? options.horizon_if_all_ic : options.tick_cap;
    for (std::int64_t t = 1; t <= limit; ++t) {
        for (std::size_t i = 0; i < scenario.m; ++i) {
            obs[i] = noise(rng) + (active[i] ? shifts[i] : 0.0);
        }
        const StepResult& r = monitor.step(obs);
        const std::size_t ic_now = scenario.m - remaining;

        TickCounts counts;
        counts.t = t;
        counts.alarm = r.alarm;
        counts.R = static_cast<std::uint32_t>(r.flagged.size());
        for (auto i : r.flagged) {
            if (active[i]) {
                ++counts.S;
                active[i] = false;
                acc.stream_detection[oc_slot[i]] = t;
                --remaining;
            } else {
                ++counts.V;
            }
        }
        for (auto i : r.flagged) {
            monitor.restart_stream(i, rng);
        }
        if (counts.V + counts.S != counts.R || counts.V > ic_now) {
            throw std::logic_error("trial accounting identity violated");
        }
        acc.ticks.push_back(counts);

        if (scenario.m1 > 0 && remaining == 0) {
            acc.detection_time = t;
            return acc;
        }
    }
    acc.censored = scenario.m1 > 0;
    return acc;
}

ExperimentResult run_experiment(const OcScenario& scenario, const MonitorConfig& config,
                                const SteadyStateSample& sample, std::size_t n_trials, std::uint64_t seed,
                                unsigned workers, const TrialOptions& options)
{
    if (n_trials == 0) {
        throw InvalidInput("run_experiment: need at least one trial");
    }
    scenario.validate();
    config.validate();

    struct Summary {
        std::optional<double> atdoc;
        std::optional<std::int64_t> detection;
        bool censored = false;
        double ticks = 0, alarms = 0, V = 0, R = 0, S = 0;
    };
    std::vector<Summary> summaries(n_trials);
    parallel_for(n_trials, workers, [&](std::size_t j) {
        Rng rng = make_rng(seed, j);
        const auto acc = run_atdoc_trial(scenario, config, sample, rng, options);
        Summary& s = summaries[j];
        s.atdoc = acc.atdoc();
        s.detection = acc.detection_time;
        s.censored = acc.censored;
        s.ticks = static_cast<double>(acc.horizon());
        s.alarms = static_cast<double>(acc.alarm_ticks());
        s.V = static_cast<double>(acc.total_V());
        s.R = static_cast<double>(acc.total_R());
        s.S = static_cast<double>(acc.total_S());
    });

    ExperimentResult res;
    res.scenario = scenario;
    res.config = config;
    res.seed = seed;
    res.n_trials = n_trials;

    std::vector<double> v_num;
    std::vector<double> tick_den;
    std::vector<double> alarm_den;
    std::vector<double> atdocs;
    std::vector<double> detections;
    double fdp_sum = 0.0;
    const double m = static_cast<double>(scenario.m);
    for (const auto& s : summaries) {
        if (s.censored) {
            ++res.censored;
        }
        if (s.atdoc) {
            atdocs.push_back(*s.atdoc);
            detections.push_back(static_cast<double>(*s.detection));
        }
        res.total_ticks += static_cast<std::uint64_t>(s.ticks);
        res.alarm_ticks += static_cast<std::uint64_t>(s.alarms);
        res.sum_V += static_cast<std::uint64_t>(s.V);
        res.sum_R += static_cast<std::uint64_t>(s.R);
        res.sum_S += static_cast<std::uint64_t>(s.S);
        fdp_sum += s.V / std::max(1.0, s.R);
        v_num.push_back(s.V);
        tick_den.push_back(s.ticks * m);
        alarm_den.push_back(s.alarms * m);
    }

    if (!atdocs.empty()) {
        const double n = static_cast<double>(atdocs.size());
        const double mean = std::accumulate(atdocs.begin(), atdocs.end(), 0.0) / n;
        double ss = 0.0;
        for (double d : atdocs) {
            ss += (d - mean) * (d - mean);
        }
        res.atdoc_mean = mean;
        res.atdoc_sd = atdocs.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
        res.last_detection_mean = std::accumulate(detections.begin(), detections.end(), 0.0) / n;
    }
    const double sum_v = static_cast<double>(res.sum_V);
    res.gfdr = sum_v / std::max(1.0, static_cast<double>(res.sum_R));
    res.gfdr_trial_mean = n_trials > 0 ? fdp_sum / static_cast<double>(n_trials) : 0.0;
    res.gpcer = res.total_ticks > 0 ? sum_v / (static_cast<double>(res.total_ticks) * m) : 0.0;
    res.gpcer_se = ratio_std_error(v_num, tick_den);
    res.gpcer_alarm = res.alarm_ticks > 0 ? sum_v / (static_cast<double>(res.alarm_ticks) * m) : 0.0;
    res.gpcer_alarm_se = ratio_std_error(v_num, alarm_den);
    return res;
}

PropositionCheck check_appendix_proposition(const MonitorConfig& config, const SteadyStateSample& sample,
                                            const OcScenario& scenario, std::size_t B, std::uint64_t seed,
                                            unsigned workers, std::int64_t run_cap)
{
    scenario.validate();
    config.validate();
    if (config.procedure != Procedure::two_stage) {
        throw ConfigError("proposition check needs a two-stage monitor");
    }
    if (scenario.m1 != 1 || scenario.m != config.m || config.m < 2) {
        throw ConfigError("proposition check needs m >= 2 streams with exactly one OC stream");
    }
    if (B < 2) {
        throw InvalidInput("proposition check: B must be at least 2");
    }
    const auto shifts = scenario.shifts_by_stream();
    const std::size_t oc = scenario.oc_indices.front();

    // Fraction of IC streams with W > c_h at the first alarm of one episode.
    auto episode = [&](bool with_shift, std::uint64_t episode_seed) {
        Rng rng(episode_seed);
        Monitor monitor(config, sample, rng);
        std::normal_distribution<double> noise(config.params.mu0, 1.0);
        std::vector<double> obs(config.m);
        for (std::int64_t t = 1; t <= run_cap; ++t) {
            for (std::size_t i = 0; i < config.m; ++i) {
                obs[i] = noise(rng) + (with_shift ? shifts[i] : 0.0);
            }
            const StepResult& r = monitor.step(obs);
            if (!r.alarm) {
                continue;
            }
            std::size_t exceed = 0;
            std::size_t counted = 0;
            for (std::size_t i = 0; i < config.m; ++i) {
                if (with_shift && i == oc) {
                    continue;
                }
                ++counted;
                if (1.0 - r.pvalues[i] > config.c_h) {
                    ++exceed;
                }
            }
            return static_cast<double>(exceed) / static_cast<double>(counted);
        }
        throw CalibrationInfeasible("proposition check: episode reached the run cap without an alarm");
    };

    std::vector<double> h1(B);
    std::vector<double> h0(B);
    parallel_for(B, workers, [&](std::size_t b) {
        h1[b] = episode(true, derive_seed(seed, 2 * b));
        h0[b] = episode(false, derive_seed(seed, 2 * b + 1));
    });

    auto moments = [](const std::vector<double>& x) {
        const double n = static_cast<double>(x.size());
        const double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
        double ss = 0.0;
        for (double v : x) {
            ss += (v - mean) * (v - mean);
        }
        return std::pair{mean, std::sqrt(ss / (n - 1.0) / n)};
    };
    PropositionCheck out;
    std::tie(out.p_h1, out.se_h1) = moments(h1);
    std::tie(out.p_h0, out.se_h0) = moments(h0);
    return out;
}

KeyValueConfig KeyValueConfig::read(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open " + path.string());
    }
    std::stringstream buf;
    buf << in.rdbuf();
    return parse(buf.str(), path.string());
}

KeyValueConfig KeyValueConfig::parse(std::string_view text, std::string_view origin)
{
    KeyValueConfig cfg;
    std::size_t lineno = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const auto end = std::min(text.find('\n', pos), text.size());
        std::string_view line = text.substr(pos, end - pos);
        pos = end + 1;
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) {
            line = line.substr(0, hash);
        }
        const std::string stripped = trim(line);
        if (stripped.empty()) {
            continue;
        }
        const auto eq = stripped.find('=');
        if (eq == std::string::npos) {
            throw ParseError(std::string(origin) + ":" + std::to_string(lineno) + ": expected key = value");
        }
        const std::string key = trim(std::string_view(stripped).substr(0, eq));
        if (key.empty()) {
            throw ParseError(std::string(origin) + ":" + std::to_string(lineno) + ": empty key");
        }
        cfg.values_[key] = trim(std::string_view(stripped).substr(eq + 1));
    }
    return cfg;
}

std::optional<std::string> KeyValueConfig::get(const std::string& key) const
{
    auto it = values_.find(key);
    if (it == values_.end()) {
        return std::nullopt;
    }
    return it->second;
}

void write_experiment_csv_row(std::ostream& out, const ExperimentResult& r)
{
    out << fmt_optional(r.ic_arl) << ',' << r.scenario.m << ',' << r.scenario.m1 << ','
        << to_string(r.scenario.allocation) << ',' << to_string(r.config.procedure) << ','
        << fmt_optional(r.nominal) << ',' << fmt_optional(r.atdoc_mean) << ',' << fmt_optional(r.atdoc_sd) << ','
        << fmt_number(r.gfdr) << ',' << fmt_number(r.gpcer) << ',' << fmt_number(r.gpcer_alarm) << ','
        << r.n_trials << ',' << r.censored << ',' << r.seed << '\n';
}

std::string experiment_metadata_json(const ExperimentResult& r)
{
    nlohmann::ordered_json doc;
    doc["scenario"] = {{"m", r.scenario.m},
                       {"m1", r.scenario.m1},
                       {"allocation", to_string(r.scenario.allocation)},
                       {"mu", r.scenario.mu}};
    nlohmann::ordered_json cfg{{"procedure", to_string(r.config.procedure)},
                               {"mu0", r.config.params.mu0},
                               {"k", r.config.params.k}};
    if (r.config.procedure == Procedure::two_stage) {
        cfg["h"] = r.config.h;
        cfg["c_h"] = r.config.c_h;
    } else {
        cfg["q"] = r.config.q;
    }
    doc["config"] = cfg;
    doc["seed"] = r.seed;
    doc["n_trials"] = r.n_trials;
    doc["censored"] = r.censored;
    doc["pooling"] = "ratio of sums over trials and ticks";
    doc["totals"] = {{"ticks", r.total_ticks},
                     {"alarm_ticks", r.alarm_ticks},
                     {"V", r.sum_V},
                     {"R", r.sum_R},
                     {"S", r.sum_S}};
    if (r.atdoc_mean) {
        doc["atdoc_mean"] = *r.atdoc_mean;
        doc["atdoc_sd"] = *r.atdoc_sd;
        doc["last_detection_mean"] = *r.last_detection_mean;
    }
    doc["atdoc_definition"] = "per-trial mean of OC stream flag ticks";
    doc["gfdr"] = r.gfdr;
    doc["gfdr_trial_mean"] = r.gfdr_trial_mean;
    doc["gpcer"] = r.gpcer;
    doc["gpcer_se"] = r.gpcer_se;
    doc["gpcer_alarm"] = r.gpcer_alarm;
    doc["gpcer_alarm_se"] = r.gpcer_alarm_se;
    return doc.dump(2);
}

} // namespace tsmon
