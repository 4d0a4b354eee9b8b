#include "cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <ostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "tsmon/data_pipeline.hpp"
#include "tsmon/sim_harness.hpp"

namespace tsmon::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr std::uint64_t kSampleStream = 0x5a3e;
constexpr std::uint64_t kProposition = 0x9f02;

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Settings {
    std::string config;
    std::string out_dir;
    std::uint64_t seed = 20240601;
    unsigned workers = 1;

    std::string sample_path;
    std::uint64_t sample_size = 1'000'000;
    std::uint64_t sample_len = 2000;

    std::size_t m = 100;
    double mu0 = 0.0;
    double k = 0.25;
    double arl = 200.0;
    std::vector<double> pcer{0.01, 0.03, 0.05};
    std::string procedure = "both";
    std::size_t reps = 2500;
    std::size_t B = 2500;
    double tolerance = 0.05;
    double initial_h = 10.0;
    std::string calibration;
    std::optional<double> h;
    std::optional<double> c_h;
    std::optional<double> q;
    std::string out;

    // steady-state
    std::uint64_t n = 1'000'000;
    std::uint64_t len = 2000;

    // simulate
    std::size_t m1 = 5;
    std::string alloc = "equal";
    double mu = 0.5;
    std::size_t trials = 1000;
    std::int64_t horizon = 1000;
    bool check_proposition = false;
    std::size_t prop_m = 5;
    double delta = 1.0;

    // replay
    std::string historical;
    std::string monitor;
    std::string secom_data;
    std::string secom_labels;
    std::string emit_steps;
    bool restart_flagged = false;
    bool keep_constant = false;

    // report
    std::vector<std::string> results;
    std::vector<std::string> calibrations;
};

void add_common(CLI::App* sub, Settings& s)
{
    sub->set_help_flag("--help", "print this help and exit");
    sub->add_option("--config", s.config, "key = value file; command-line flags take precedence");
    sub->add_option("--out-dir", s.out_dir, std::string("output directory (default $") + kOutDirEnv + " or .)");
    sub->add_option("--seed", s.seed, "master seed")->capture_default_str();
    sub->add_option("--workers", s.workers, "worker threads, 0 = all cores; results do not depend on it")
        ->capture_default_str();
}

void add_sample(CLI::App* sub, Settings& s)
{
    sub->add_option("--sample", s.sample_path, "steady-state sample file (built from --seed if absent)");
    sub->add_option("--sample-size", s.sample_size, "sequences in a freshly built sample")->capture_default_str();
    sub->add_option("--sample-len", s.sample_len, "sequence length for a freshly built sample")->capture_default_str();
}

void add_cusum(CLI::App* sub, Settings& s)
{
    sub->add_option("--mu0", s.mu0, "in-control mean")->capture_default_str();
    sub->add_option("--k", s.k, "CUSUM reference value")->capture_default_str();
}

void add_limits(CLI::App* sub, Settings& s)
{
    sub->add_option("--calibration", s.calibration, "calibration JSON from `calibrate`");
    sub->add_option("--h", s.h, "stage-one limit");
    sub->add_option("--c-h", s.c_h, "stage-two limit");
    sub->add_option("--q", s.q, "point-wise FDR of the step-up monitor");
    sub->add_option("--reps", s.reps, "replications when limits must be calibrated")->capture_default_str();
    sub->add_option("--B", s.B, "alarm episodes for stage-two calibration")->capture_default_str();
}

std::unique_ptr<CLI::App> make_app(Settings& s)
{
    auto app = std::make_unique<CLI::App>("Two-stage and step-up monitoring of many CUSUM streams", "tsmon");
    app->set_help_flag("--help", "print this help and exit");
    app->require_subcommand(1);
    app->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

    auto* steady = app->add_subcommand("steady-state", "build a steady-state CUSUM sample");
    add_common(steady, s);
    add_cusum(steady, s);
    steady->add_option("--n", s.n, "number of sequences")->capture_default_str();
    steady->add_option("--len", s.len, "sequence length")->capture_default_str();
    steady->add_option("--out", s.out, "output file (default steady_state.csv)");

    auto* calibrate = app->add_subcommand("calibrate", "calibrate h, c_h and q for an IC-ARL target");
    add_common(calibrate, s);
    add_sample(calibrate, s);
    add_cusum(calibrate, s);
    calibrate->add_option("--m", s.m, "number of streams")->capture_default_str();
    calibrate->add_option("--arl", s.arl, "target IC-ARL")->capture_default_str();
    calibrate->add_option("--pcer", s.pcer, "stage-two PCER levels")->delimiter(',');
    calibrate->add_option("--procedure", s.procedure, "two-stage, lt or both")->capture_default_str();
    calibrate->add_option("--reps", s.reps, "IC runs per ARL estimate")->capture_default_str();
    calibrate->add_option("--B", s.B, "alarm episodes for stage two")->capture_default_str();
    calibrate->add_option("--tolerance", s.tolerance, "relative IC-ARL tolerance")->capture_default_str();
    calibrate->add_option("--initial-h", s.initial_h, "starting guess for h")->capture_default_str();
    calibrate->add_option("--out", s.out, "output file (default calibration.json)");

    auto* simulate = app->add_subcommand("simulate", "run detection experiments");
    add_common(simulate, s);
    add_sample(simulate, s);
    add_cusum(simulate, s);
    add_limits(simulate, s);
    simulate->add_option("--m", s.m, "number of streams")->capture_default_str();
    simulate->add_option("--m1", s.m1, "out-of-control streams")->capture_default_str();
    simulate->add_option("--alloc", s.alloc, "equal or increasing")->capture_default_str();
    simulate->add_option("--mu", s.mu, "shift scale")->capture_default_str();
    simulate->add_option("--arl", s.arl, "IC-ARL the limits are designed for")->capture_default_str();
    simulate->add_option("--pcer", s.pcer, "stage-two PCER levels")->delimiter(',');
    simulate->add_option("--procedure", s.procedure, "two-stage, lt or both")->capture_default_str();
    simulate->add_option("--trials", s.trials, "trials per setting")->capture_default_str();
    simulate->add_option("--horizon", s.horizon, "ticks per trial when m1 = 0")->capture_default_str();
    simulate->add_flag("--check-proposition", s.check_proposition,
                       "compare IC exceedance at alarms with and without one OC stream");
    simulate->add_option("--prop-m", s.prop_m, "streams in the proposition check")->capture_default_str();
    simulate->add_option("--delta", s.delta, "OC shift in the proposition check")->capture_default_str();
    simulate->add_option("--out", s.out, "output CSV (default simulate.csv)");

    auto* replay_cmd = app->add_subcommand("replay", "replay a monitor over historical and monitoring data");
    add_common(replay_cmd, s);
    add_sample(replay_cmd, s);
    add_limits(replay_cmd, s);
    replay_cmd->add_option("--historical", s.historical, "in-control reference CSV");
    replay_cmd->add_option("--monitor", s.monitor, "monitoring CSV");
    replay_cmd->add_option("--secom-data", s.secom_data, "secom.data");
    replay_cmd->add_option("--secom-labels", s.secom_labels, "secom_labels.data");
    replay_cmd->add_option("--k", s.k, "CUSUM reference value on the transformed scale")->capture_default_str();
    replay_cmd->add_option("--arl", s.arl, "target IC-ARL")->capture_default_str();
    replay_cmd->add_option("--pcer", s.pcer, "stage-two PCER levels")->delimiter(',');
    replay_cmd->add_option("--procedure", s.procedure, "two-stage, lt or both")->capture_default_str();
    replay_cmd->add_option("--emit-steps", s.emit_steps, "JSON-lines file with one record per row");
    replay_cmd->add_flag("--restart-flagged", s.restart_flagged, "redraw flagged streams from the sample");
    replay_cmd->add_flag("--keep-constant", s.keep_constant, "do not drop constant features");
    replay_cmd->add_option("--out", s.out, "summary JSON (default replay_summary.json)");

    auto* report = app->add_subcommand("report", "tabulate simulate and calibrate outputs");
    add_common(report, s);
    report->add_option("--results", s.results, "CSV files written by simulate")->delimiter(',');
    report->add_option("--calibration", s.calibrations, "JSON files written by calibrate")->delimiter(',');
    report->add_option("--out", s.out, "output file (default report.txt)");

    for (auto* sub : app->get_subcommands({})) {
        sub->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    }
    return app;
}

std::string fmt(double v, int digits = 6)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*g", digits, v);
    return buf;
}

fs::path out_dir(const Settings& s)
{
    fs::path dir = ".";
    if (!s.out_dir.empty()) {
        dir = s.out_dir;
    } else if (const char* env = std::getenv(kOutDirEnv); env != nullptr && *env != '\0') {
        dir = env;
    }
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
    }
    return dir;
}

fs::path output_path(const Settings& s, const std::string& fallback)
{
    const fs::path p = s.out.empty() ? fs::path(fallback) : fs::path(s.out);
    return p.is_absolute() ? p : out_dir(s) / p;
}

std::ofstream open_out(const fs::path& path)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    return out;
}

void require_file(const std::string& path, const char* what)
{
    if (path.empty()) {
        throw InvalidInput(std::string("missing ") + what);
    }
    if (!fs::exists(path)) {
        throw IoError(std::string(what) + " not found: " + path);
    }
}

json manifest(const std::string& subcommand, const Settings& s)
{
    json j;
    j["subcommand"] = subcommand;
    j["config"] = s.config.empty() ? json(nullptr) : json(fs::path(s.config).filename().string());
    j["seed"] = s.seed;
    return j;
}

void write_run_record(const std::string& subcommand, const Settings& s)
{
    json j = manifest(subcommand, s);
    j["out_dir"] = out_dir(s).string();
    j["workers"] = s.workers;
    auto out = open_out(out_dir(s) / ("manifest_" + subcommand + ".json"));
    out << j.dump(2) << '\n';
}

bool wants(const Settings& s, Procedure p)
{
    if (s.procedure == "both") {
        return true;
    }
    return parse_procedure(s.procedure) == p;
}

SteadyStateSample obtain_sample(const Settings& s, const CusumParams& params, std::ostream& err)
{
    if (!s.sample_path.empty()) {
        require_file(s.sample_path, "sample file");
        auto sample = read_steady_state_sample(s.sample_path);
        const auto& prov = sample.provenance();
        if (prov.params.k != params.k) {
            throw ConfigError("sample " + s.sample_path + " was built with k = " + fmt(prov.params.k) +
                              " but k = " + fmt(params.k) + " was requested");
        }
        return sample;
    }
    err << "building steady-state sample: " << s.sample_size << " sequences of length " << s.sample_len << '\n';
    return build_steady_state_sample(params, s.sample_size, s.sample_len, derive_seed(s.seed, kSampleStream),
                                     s.workers);
}

CalibrationSpec spec_for(const Settings& s, std::size_t m, const CusumParams& params)
{
    CalibrationSpec spec;
    spec.m = m;
    spec.params = params;
    spec.target_ic_arl = s.arl;
    spec.reps = s.reps;
    spec.tolerance = s.tolerance;
    spec.workers = s.workers;
    return spec;
}

/// Where the monitor limits come from, in order: explicit flags, a
/// calibration file, the reference table, a fresh calibration.
struct Limits {
    CalibrationResult cal;
    std::string source;
};

Limits resolve_limits(const Settings& s, std::size_t m, const CusumParams& params, const SteadyStateSample& sample,
                      bool need_two_stage, bool need_lt, std::ostream& err)
{
    Limits out;
    out.cal.m = m;
    out.cal.params = params;
    out.cal.target_ic_arl = s.arl;
    out.cal.seed = s.seed;

    if (s.h || s.c_h || s.q) {
        if (need_two_stage && (!s.h || !s.c_h)) {
            throw InvalidInput("--h and --c-h must be given together");
        }
        if (need_lt && !s.q) {
            throw InvalidInput("--q is required for the step-up monitor");
        }
        out.cal.h = s.h;
        if (s.c_h) {
            out.cal.stage_two.push_back({s.pcer.empty() ? 0.0 : s.pcer.front(), *s.c_h, {}});
        }
        out.cal.q = s.q;
        out.source = "flags";
        return out;
    }
    if (!s.calibration.empty()) {
        require_file(s.calibration, "calibration file");
        out.cal = read_calibration_json(s.calibration);
        if (out.cal.m != m || out.cal.params.k != params.k) {
            throw ConfigError("calibration " + s.calibration + " is for m = " + std::to_string(out.cal.m) +
                              ", k = " + fmt(out.cal.params.k));
        }
        out.source = "calibration file";
        return out;
    }
    if (params.k == 0.25) {
        if (auto ref = reference_limits(m, s.arl)) {
            const bool have_all = std::all_of(s.pcer.begin(), s.pcer.end(), [&](double a) {
                return std::any_of(ref->stage_two.begin(), ref->stage_two.end(),
                                   [&](const StageTwoLimit& l) { return l.alpha == a; });
            });
            if (have_all || !need_two_stage) {
                ref->params = params;
                ref->seed = s.seed;
                out.cal = *ref;
                out.source = "reference table";
                return out;
            }
        }
    }

    err << "calibrating limits for m = " << m << ", IC-ARL " << s.arl << '\n';
    const auto spec = spec_for(s, m, params);
    out.cal.reps = s.reps;
    out.cal.B = s.B;
    if (need_two_stage) {
        const auto h = calibrate_h(spec, sample, s.seed, s.initial_h);
        out.cal.h = h.limit;
        out.cal.h_arl = h.arl;
        const auto snaps = AlarmSnapshots::collect(h.limit, spec, s.B, sample, derive_seed(s.seed, 1));
        for (double alpha : s.pcer) {
            out.cal.stage_two.push_back(calibrate_c(alpha, snaps));
        }
    }
    if (need_lt) {
        const auto q = calibrate_q_lt(spec, sample, s.seed);
        out.cal.q = q.limit;
        out.cal.q_arl = q.arl;
    }
    out.source = "calibrated";
    return out;
}

int cmd_steady_state(const Settings& s, std::ostream& out, std::ostream& err)
{
    const CusumParams params{s.mu0, s.k};
    params.validate();
    const auto path = output_path(s, "steady_state.csv");
    err << "building " << s.n << " sequences of length " << s.len << '\n';
    const auto sample = build_steady_state_sample(params, s.n, s.len, s.seed, s.workers);
    write_steady_state_sample(sample, path);
    write_run_record("steady-state", s);
    out << "wrote " << path.string() << " (" << sample.size() << " values)\n";
    return kOk;
}

int cmd_calibrate(const Settings& s, std::ostream& out, std::ostream& err)
{
    const CusumParams params{s.mu0, s.k};
    params.validate();
    const bool two = wants(s, Procedure::two_stage);
    const bool lt = wants(s, Procedure::lt);
    const auto path = output_path(s, "calibration.json");
    const auto sample = obtain_sample(s, params, err);
    const auto spec = spec_for(s, s.m, params);
    spec.validate();

    CalibrationResult res;
    res.m = s.m;
    res.params = params;
    res.target_ic_arl = s.arl;
    res.seed = s.seed;
    res.reps = s.reps;
    res.B = two ? s.B : 0;
    if (two) {
        err << "calibrating h\n";
        const auto h = calibrate_h(spec, sample, s.seed, s.initial_h);
        res.h = h.limit;
        res.h_arl = h.arl;
        out << "h = " << fmt(h.limit) << "  (IC-ARL " << fmt(h.arl.mean, 5) << " +- " << fmt(h.arl.std_error, 3)
            << ")\n";
        err << "collecting " << s.B << " alarm snapshots\n";
        const auto snaps = AlarmSnapshots::collect(h.limit, spec, s.B, sample, derive_seed(s.seed, 1));
        for (double alpha : s.pcer) {
            const auto c = calibrate_c(alpha, snaps);
            res.stage_two.push_back(c);
            out << "PCER " << fmt(alpha) << ": c_h = " << fmt(c.c_h) << "  (achieved " << fmt(c.achieved.mean, 4)
                << " +- " << fmt(c.achieved.std_error, 2) << ")\n";
        }
    }
    if (lt) {
        err << "calibrating q\n";
        const auto q = calibrate_q_lt(spec, sample, s.seed);
        res.q = q.limit;
        res.q_arl = q.arl;
        out << "q = " << fmt(q.limit) << "  (IC-ARL " << fmt(q.arl.mean, 5) << " +- " << fmt(q.arl.std_error, 3)
            << ")\n";
    }
    write_calibration_json(res, path);
    write_run_record("calibrate", s);
    out << "wrote " << path.string() << '\n';
    return kOk;
}

int cmd_simulate(const Settings& s, std::ostream& out, std::ostream& err)
{
    const CusumParams params{s.mu0, s.k};
    params.validate();
    const auto sample = obtain_sample(s, params, err);

    if (s.check_proposition) {
        Settings ps = s;
        ps.h.reset();
        ps.c_h.reset();
        ps.q.reset();
        ps.calibration.clear();
        ps.pcer = {s.pcer.empty() ? 0.05 : s.pcer.front()};
        const auto lim = resolve_limits(ps, s.prop_m, params, sample, true, false, err);
        const auto cfg = lim.cal.two_stage_config(ps.pcer.front());
        const auto sc = OcScenario::make(s.prop_m, 1, Allocation::equal, s.delta);
        const auto res =
            check_appendix_proposition(cfg, sample, sc, s.B, derive_seed(s.seed, kProposition), s.workers);
        const double se = std::hypot(res.se_h1, res.se_h0);
        out << "p_h1 = " << fmt(res.p_h1) << " +- " << fmt(res.se_h1, 3) << '\n';
        out << "p_h0 = " << fmt(res.p_h0) << " +- " << fmt(res.se_h0, 3) << '\n';
        out << (res.p_h1 <= res.p_h0 + 2.0 * se ? "p_h1 <= p_h0 + 2 SE\n" : "p_h1 exceeds p_h0 + 2 SE\n");
        json j = manifest("simulate", s);
        j["m"] = s.prop_m;
        j["delta"] = s.delta;
        j["B"] = s.B;
        j["h"] = cfg.h;
        j["c_h"] = cfg.c_h;
        j["p_h1"] = res.p_h1;
        j["se_h1"] = res.se_h1;
        j["p_h0"] = res.p_h0;
        j["se_h0"] = res.se_h0;
        auto f = open_out(output_path(s, "proposition.json"));
        f << j.dump(2) << '\n';
        write_run_record("simulate", s);
        return kOk;
    }

    const bool two = wants(s, Procedure::two_stage);
    const bool lt = wants(s, Procedure::lt);
    const auto lim = resolve_limits(s, s.m, params, sample, two, lt, err);
    err << "limits from " << lim.source << '\n';
    const auto scenario = OcScenario::make(s.m, s.m1, parse_allocation(s.alloc), s.mu);
    TrialOptions opts;
    opts.horizon_if_all_ic = s.horizon;

    std::vector<ExperimentResult> results;
    auto run_one = [&](const MonitorConfig& cfg, double nominal) {
        err << "simulating " << to_string(cfg.procedure) << " nominal " << fmt(nominal) << '\n';
        auto r = run_experiment(scenario, cfg, sample, s.trials, s.seed, s.workers, opts);
        r.ic_arl = s.arl;
        r.nominal = nominal;
        results.push_back(std::move(r));
    };
    if (lt) {
        run_one(lim.cal.lt_config(), *lim.cal.q);
    }
    if (two) {
        if (s.c_h) {
            run_one(lim.cal.two_stage_config(lim.cal.stage_two.front().alpha), lim.cal.stage_two.front().alpha);
        } else {
            for (double alpha : s.pcer) {
                run_one(lim.cal.two_stage_config(alpha), alpha);
            }
        }
    }

    const auto csv_path = output_path(s, "simulate.csv");
    {
        auto f = open_out(csv_path);
        f << kExperimentCsvHeader << '\n';
        for (const auto& r : results) {
            write_experiment_csv_row(f, r);
        }
    }
    json meta;
    meta["manifest"] = manifest("simulate", s);
    meta["limits_source"] = lim.source;
    meta["experiments"] = json::array();
    for (const auto& r : results) {
        meta["experiments"].push_back(json::parse(experiment_metadata_json(r)));
    }
    fs::path meta_path = csv_path;
    meta_path.replace_extension(".json");
    auto mf = open_out(meta_path);
    mf << meta.dump(2) << '\n';
    write_run_record("simulate", s);

    out << kExperimentCsvHeader << '\n';
    for (const auto& r : results) {
        write_experiment_csv_row(out, r);
    }
    return kOk;
}

std::string with_label(const fs::path& path, const std::string& label)
{
    fs::path p = path;
    const auto ext = p.extension().string();
    p.replace_extension();
    return p.string() + "_" + label + ext;
}

int cmd_replay(const Settings& s, std::ostream& out, std::ostream& err)
{
    Dataset raw;
    if (!s.secom_data.empty() || !s.secom_labels.empty()) {
        require_file(s.secom_data, "SECOM data file");
        require_file(s.secom_labels, "SECOM labels file");
        raw = load_secom(s.secom_data, s.secom_labels);
    } else {
        require_file(s.historical, "historical file");
        require_file(s.monitor, "monitoring file");
        raw = load_dataset(s.historical, s.monitor);
    }
    const Dataset ds = s.keep_constant ? raw : drop_constant_features(raw);
    err << ds.features() << " features (" << ds.removed_features.size() << " constant removed), "
        << ds.historical.rows() << " historical rows, " << ds.monitoring.rows() << " monitoring rows\n";
    const auto transform = EmpiricalTransform::fit(ds);

    const CusumParams params{0.0, s.k};
    params.validate();
    const auto sample = obtain_sample(s, params, err);
    const bool two = wants(s, Procedure::two_stage);
    const bool lt = wants(s, Procedure::lt);
    const auto lim = resolve_limits(s, ds.features(), params, sample, two, lt, err);
    err << "limits from " << lim.source << '\n';

    std::vector<std::pair<std::string, MonitorConfig>> runs;
    if (two) {
        if (s.c_h) {
            runs.emplace_back("two_stage", lim.cal.two_stage_config(lim.cal.stage_two.front().alpha));
        } else {
            for (double alpha : s.pcer) {
                runs.emplace_back("two_stage_pcer" + fmt(alpha), lim.cal.two_stage_config(alpha));
            }
        }
    }
    if (lt) {
        runs.emplace_back("lt", lim.cal.lt_config());
    }

    const auto summary_path = output_path(s, "replay_summary.json");
    json summary;
    summary["manifest"] = manifest("replay", s);
    summary["limits_source"] = lim.source;
    summary["features"] = ds.features();
    summary["removed_features"] = ds.removed_features.size();
    summary["runs"] = json::array();
    for (const auto& [label, cfg] : runs) {
        const auto rep = replay(ds, transform, cfg, sample, {s.seed, s.restart_flagged});
        json run = json::parse(replay_summary_json(rep, ds, cfg));
        run["label"] = label;
        summary["runs"].push_back(run);

        fs::path flags_path = summary_path.parent_path() / ("replay_flags_" + label + ".csv");
        auto ff = open_out(flags_path);
        write_replay_flags_csv(ff, rep, ds);
        if (!s.emit_steps.empty()) {
            fs::path steps = s.emit_steps;
            if (!steps.is_absolute()) {
                steps = out_dir(s) / steps;
            }
            auto sf = open_out(runs.size() == 1 ? steps : fs::path(with_label(steps, label)));
            write_replay_steps_jsonl(sf, rep);
        }
        out << label << ": " << rep.alarmed_rows << "/" << rep.rows << " rows alarmed, " << rep.flag_events
            << " flag events\n";
    }
    auto f = open_out(summary_path);
    f << summary.dump(2) << '\n';
    write_run_record("replay", s);
    return kOk;
}

std::vector<std::string> split_csv_line(const std::string& line)
{
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
        cells.push_back(cell);
    }
    if (!line.empty() && line.back() == ',') {
        cells.emplace_back();
    }
    return cells;
}

int cmd_report(const Settings& s, std::ostream& out, std::ostream&)
{
    if (s.results.empty() && s.calibrations.empty()) {
        throw InvalidInput("report needs --results and/or --calibration");
    }
    std::ostringstream text;

    for (const auto& path : s.calibrations) {
        require_file(path, "calibration file");
        const auto cal = read_calibration_json(path);
        text << "Control limits: m = " << cal.m << ", k = " << fmt(cal.params.k) << ", IC-ARL "
             << fmt(cal.target_ic_arl) << ", seed " << cal.seed << '\n';
        if (cal.q) {
            text << "  q    " << fmt(*cal.q, 5) << "   (IC-ARL " << fmt(cal.q_arl.mean, 5) << ")\n";
        }
        if (cal.h) {
            text << "  h    " << fmt(*cal.h, 5) << "   (IC-ARL " << fmt(cal.h_arl.mean, 5) << ")\n";
        }
        for (const auto& st : cal.stage_two) {
            text << "  PCER " << fmt(st.alpha) << "  c_h " << fmt(st.c_h, 5) << '\n';
        }
        text << '\n';
    }

    // (ic_arl, allocation, m1) -> column -> row
    using Key = std::tuple<std::string, std::string, int>;
    std::map<Key, std::map<std::string, std::map<std::string, std::string>>> table;
    std::set<std::string> columns;
    for (const auto& path : s.results) {
        require_file(path, "results file");
        std::ifstream in(path);
        std::string line;
        std::getline(in, line);
        if (line != kExperimentCsvHeader) {
            throw ParseError(path + ": not a simulate results file");
        }
        const auto names = split_csv_line(line);
        std::size_t lineno = 1;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty()) {
                continue;
            }
            const auto cells = split_csv_line(line);
            if (cells.size() != names.size()) {
                throw ParseError(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(names.size()) +
                                 " cells");
            }
            std::map<std::string, std::string> row;
            for (std::size_t i = 0; i < names.size(); ++i) {
                row[names[i]] = cells[i];
            }
            const std::string col = row["procedure"] == "lt" ? "LT" : "PCER=" + row["nominal"];
            columns.insert(col);
            table[{row["ic_arl"], row["allocation"], std::stoi(row["m1"])}][col] = row;
        }
    }

    if (!table.empty()) {
        std::vector<std::string> cols(columns.begin(), columns.end());
        std::stable_partition(cols.begin(), cols.end(), [](const std::string& c) { return c == "LT"; });
        auto header = [&](const char* title) {
            text << title << '\n';
            char buf[64];
            std::snprintf(buf, sizeof buf, "%-11s %-8s %5s", "allocation", "IC-ARL", "m1");
            text << buf;
            for (const auto& c : cols) {
                std::snprintf(buf, sizeof buf, " %16s", c.c_str());
                text << buf;
            }
            text << '\n';
        };
        auto body = [&](auto cell) {
            for (const auto& [key, byc] : table) {
                char buf[64];
                std::snprintf(buf, sizeof buf, "%-11s %-8s %5d", std::get<1>(key).c_str(), std::get<0>(key).c_str(),
                              std::get<2>(key));
                text << buf;
                for (const auto& c : cols) {
                    auto it = byc.find(c);
                    std::snprintf(buf, sizeof buf, " %16s", it == byc.end() ? "-" : cell(it->second).c_str());
                    text << buf;
                }
                text << '\n';
            }
            text << '\n';
        };
        header("ATDOC mean (sd)");
        body([](const std::map<std::string, std::string>& r) {
            const auto& mean = r.at("atdoc_mean");
            if (mean == "NA") {
                return std::string("NA");
            }
            return fmt(std::stod(mean), 3) + " (" + fmt(std::stod(r.at("atdoc_sd")), 2) + ")";
        });
        header("Global rates: GFDR for LT, GPCER over all ticks for two-stage");
        body([](const std::map<std::string, std::string>& r) {
            return r.at("procedure") == "lt" ? fmt(std::stod(r.at("gfdr")), 4) : fmt(std::stod(r.at("gpcer")), 4);
        });
        header("Global rates: GFDR for LT, GPCER over alarm ticks for two-stage");
        body([](const std::map<std::string, std::string>& r) {
            return fmt(std::stod(r.at(r.at("procedure") == "lt" ? "gfdr" : "gpcer_alarm")), 4);
        });
    }

    const auto path = output_path(s, "report.txt");
    auto f = open_out(path);
    f << text.str();
    out << text.str();
    return kOk;
}

/// Flags the user typed, per subcommand, so config values only fill gaps.
std::vector<std::string> merge_config(const std::vector<std::string>& args, CLI::App& parsed, const Settings& s)
{
    CLI::App* sub = parsed.get_subcommands().front();
    const auto cfg = KeyValueConfig::read(s.config);
    std::vector<std::string> merged{args.front(), sub->get_name()};
    for (const auto& [key, value] : cfg.values()) {
        const CLI::Option* opt = sub->get_option_no_throw("--" + key);
        if (opt == nullptr) {
            throw ConfigError(s.config + ": unknown key '" + key + "' for " + sub->get_name());
        }
        if (key == "config" || opt->count() > 0) {
            continue;
        }
        if (opt->get_type_size() == 0) {
            if (value == "true" || value == "1" || value == "yes") {
                merged.push_back("--" + key);
            }
            continue;
        }
        merged.push_back("--" + key + "=" + value);
    }
    merged.insert(merged.end(), args.begin() + 2, args.end());
    return merged;
}

int parse(CLI::App& app, const std::vector<std::string>& args)
{
    std::vector<const char*> argv;
    argv.reserve(args.size());
    for (const auto& a : args) {
        argv.push_back(a.c_str());
    }
    app.parse(static_cast<int>(argv.size()), argv.data());
    return 0;
}

} // namespace

std::optional<CalibrationResult> reference_limits(std::size_t m, double ic_arl)
{
    struct Row {
        std::size_t m;
        double arl;
        double q;
        double h;
        std::vector<std::pair<double, double>> c;
    };
    static const std::vector<Row> rows{
        {100, 200, .04865, 16.546, {{.01, .99577}, {.03, .98428}, {.05, .97039}}},
        {100, 500, .02087, 22.900, {{.01, .99716}, {.03, .98710}, {.05, .97472}}},
        {100, 1000, .01034, 28.570, {{.01, .99802}, {.03, .98863}, {.05, .97746}}},
        {100, 10000, .00108, 49.119, {{.01, .99947}, {.03, .99225}, {.05, .98097}}},
        {400, 1000, .01055, 30.536, {{.005, .99832}, {.01, .99548}, {.02, .98859}}},
        {1000, 1000, .01045, 32.593, {{.005, .99737}, {.01, .99379}, {.02, .98576}}},
    };
    for (const auto& r : rows) {
        if (r.m == m && r.arl == ic_arl) {
            CalibrationResult cal;
            cal.m = m;
            cal.target_ic_arl = ic_arl;
            cal.q = r.q;
            cal.h = r.h;
            for (const auto& [alpha, c] : r.c) {
                cal.stage_two.push_back({alpha, c, {}});
            }
            return cal;
        }
    }
    return std::nullopt;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    Settings s;
    auto app = make_app(s);
    try {
        parse(*app, args);
        if (!s.config.empty()) {
            require_file(s.config, "config file");
            const auto merged = merge_config(args, *app, s);
            s = Settings{};
            app = make_app(s);
            parse(*app, merged);
        }
    } catch (const CLI::ParseError& e) {
        std::ostringstream msg;
        const int code = app->exit(e, out, msg);
        err << msg.str();
        return code == 0 ? kOk : kUsage;
    } catch (const ParseError& e) {
        err << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const IoError& e) {
        err << "error: " << e.what() << '\n';
        return kIo;
    }

    const std::string name = app->get_subcommands().front()->get_name();
    try {
        if (name == "steady-state") {
            return cmd_steady_state(s, out, err);
        }
        if (name == "calibrate") {
            return cmd_calibrate(s, out, err);
        }
        if (name == "simulate") {
            return cmd_simulate(s, out, err);
        }
        if (name == "replay") {
            return cmd_replay(s, out, err);
        }
        return cmd_report(s, out, err);
    } catch (const CalibrationInfeasible& e) {
        err << "calibration infeasible: " << e.what() << '\n';
        return kInfeasible;
    } catch (const IoError& e) {
        err << "error: " << e.what() << '\n';
        return kIo;
    } catch (const ParseError& e) {
        err << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const InvalidInput& e) {
        err << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const std::exception& e) {
        const std::string what = e.what();
        err << "error: " << what << '\n';
        return what.rfind("cannot open", 0) == 0 ? kIo : kFailure;
    }
}

} // namespace tsmon::cli
