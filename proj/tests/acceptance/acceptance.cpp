#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cli.hpp"
#include "oracles.hpp"
#include "test_support.hpp"
#include "tsmon/calibration.hpp"
#include "tsmon/data_pipeline.hpp"
#include "tsmon/global_stat.hpp"
#include "tsmon/sim_harness.hpp"

using namespace tsmon;
namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

struct Options {
    std::uint64_t seed = 20240601;
    unsigned workers = 1;
    std::size_t calibration_reps = 2000;
    std::size_t trials = 500;
    std::size_t planted_runs = 200;
    std::string secom_dir;
    std::string out_dir = ".";
    bool strict = false;
};

struct Outcome {
    int id = 0;
    std::string name;
    bool pass = true;
    std::string detail;
};

std::string fmt(double v, int digits = 5)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*g", digits, v);
    return buf;
}

std::string pct(double value, double ref)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%+.1f%%", 100.0 * (value / ref - 1.0));
    return buf;
}

bool within(double value, double ref, double rel) { return std::abs(value / ref - 1.0) <= rel; }

class Clock {
public:
    double seconds() const
    {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

const CusumParams kParams{0.0, 0.25};

struct Context {
    Options opt;
    json results;
    SteadyStateSample sample_small{std::vector<double>{0.0}};
    SteadyStateSample sample_large{std::vector<double>{0.0}};
    CalibrationResult table; ///< m = 100, IC-ARL 200 reference limits
    std::map<std::string, ExperimentResult> experiments;

    std::uint64_t seed(std::uint64_t index) const { return derive_seed(opt.seed, index); }

    CalibrationSpec spec(std::size_t m, double arl, std::size_t reps) const
    {
        CalibrationSpec s;
        s.m = m;
        s.params = kParams;
        s.target_ic_arl = arl;
        s.reps = reps;
        s.workers = opt.workers;
        return s;
    }
};

void log(const std::string& msg) { std::cerr << "  " << msg << std::endl; }

Outcome control_limits(Context& ctx)
{
    Outcome o{1, "control limits"};
    const auto reps = ctx.opt.calibration_reps;
    std::ostringstream d;

    const auto h200 = calibrate_h(ctx.spec(100, 200, reps), ctx.sample_large, ctx.seed(10), 10.0);
    const auto h500 = calibrate_h(ctx.spec(100, 500, reps), ctx.sample_large, ctx.seed(11), 16.0);
    const bool h_ok = within(h200.limit, 16.546, 0.02) && within(h500.limit, 22.900, 0.02);
    d << "h(200) " << fmt(h200.limit) << " (" << pct(h200.limit, 16.546) << "), h(500) " << fmt(h500.limit) << " ("
      << pct(h500.limit, 22.900) << ")";
    log("h(200) = " + fmt(h200.limit) + ", h(500) = " + fmt(h500.limit));

    const auto q200 = calibrate_q_lt(ctx.spec(100, 200, reps), ctx.sample_large, ctx.seed(12));
    const bool q_ok = within(q200.limit, 0.04865, 0.05);
    d << "; q(200) " << fmt(q200.limit) << " (" << pct(q200.limit, 0.04865) << ")";
    log("q(200) = " + fmt(q200.limit));

    const auto arl1000 = estimate_ic_arl(28.570, ctx.spec(100, 1000, 1000), ctx.sample_large, ctx.seed(13));
    const auto arl10000 = estimate_ic_arl(49.119, ctx.spec(100, 10000, 300), ctx.sample_large, ctx.seed(14));
    const bool arl_ok = within(arl1000.mean, 1000, 0.10) && within(arl10000.mean, 10000, 0.10);
    d << "; IC-ARL at h 28.570 " << fmt(arl1000.mean) << " (" << pct(arl1000.mean, 1000) << "), at h 49.119 "
      << fmt(arl10000.mean) << " (" << pct(arl10000.mean, 10000) << ")";
    log("IC-ARL(28.570) = " + fmt(arl1000.mean) + ", IC-ARL(49.119) = " + fmt(arl10000.mean));

    o.pass = h_ok && q_ok && arl_ok;
    o.detail = d.str();
    ctx.results["control_limits"] = {
        {"h200", h200.limit},          {"h200_arl", h200.arl.mean},   {"h500", h500.limit},
        {"h500_arl", h500.arl.mean},   {"q200", q200.limit},          {"q200_arl", q200.arl.mean},
        {"arl_at_28.570", arl1000.mean}, {"arl_at_28.570_se", arl1000.std_error},
        {"arl_at_49.119", arl10000.mean}, {"arl_at_49.119_se", arl10000.std_error},
    };
    return o;
}

Outcome stage_two_limits(Context& ctx)
{
    Outcome o{2, "stage-two limits"};
    std::ostringstream d;
    const auto spec = ctx.spec(100, 200, ctx.opt.calibration_reps);
    json rows = json::array();
    for (const auto& st : ctx.table.stage_two) {
        StageTwoSpec s2{st.alpha, 2500};
        const auto est =
            estimate_conditional_exceedance(st.c_h, *ctx.table.h, spec, s2, ctx.sample_small, ctx.seed(20));
        const double z = (est.mean - st.alpha) / est.std_error;
        const bool ok = std::abs(z) <= 3.0;
        o.pass = o.pass && ok;
        d << (rows.empty() ? "" : "; ") << "c " << fmt(st.c_h) << ": " << fmt(est.mean, 4) << " vs " << st.alpha
          << " (" << (z >= 0 ? "+" : "") << fmt(z, 2) << " SE)";
        log("exceedance at c " + fmt(st.c_h) + " = " + fmt(est.mean, 4) + " +- " + fmt(est.std_error, 2));
        rows.push_back({{"alpha", st.alpha}, {"c_h", st.c_h}, {"exceedance", est.mean}, {"se", est.std_error}});
    }
    o.detail = d.str();
    ctx.results["stage_two_limits"] = rows;
    return o;
}

std::string key(const std::string& proc, std::size_t m1) { return proc + "/" + std::to_string(m1); }

void run_experiments(Context& ctx)
{
    const std::vector<std::size_t> m1s{1, 5, 10, 50, 100};
    json rows = json::array();
    for (std::size_t m1 : m1s) {
        const auto sc = OcScenario::make(100, m1, Allocation::equal, 0.5);
        std::vector<std::pair<std::string, MonitorConfig>> cfgs{{"lt", ctx.table.lt_config()}};
        for (const auto& st : ctx.table.stage_two) {
            cfgs.emplace_back("pcer" + fmt(st.alpha), ctx.table.two_stage_config(st.alpha));
        }
        for (const auto& [name, cfg] : cfgs) {
            auto r = run_experiment(sc, cfg, ctx.sample_small, ctx.opt.trials, ctx.seed(30), ctx.opt.workers);
            r.ic_arl = 200;
            r.nominal = cfg.procedure == Procedure::lt ? cfg.q : std::stod(name.substr(4));
            log(key(name, m1) + ": ATDOC " + fmt(*r.atdoc_mean, 4) + " (" + fmt(*r.atdoc_sd, 3) + "), GFDR " +
                fmt(r.gfdr, 3) + ", GPCER " + fmt(r.gpcer, 3));
            std::ostringstream row;
            write_experiment_csv_row(row, r);
            rows.push_back(row.str());
            ctx.experiments.emplace(key(name, m1), std::move(r));
        }
    }
    ctx.results["experiments_csv"] = rows;
}

double atdoc_se(const ExperimentResult& r)
{
    return *r.atdoc_sd / std::sqrt(static_cast<double>(r.n_trials - r.censored));
}

Outcome atdoc_reproduction(Context& ctx)
{
    Outcome o{3, "ATDOC"};
    std::ostringstream d;
    const std::vector<std::tuple<std::string, std::size_t, double>> refs{
        {"pcer0.05", 5, 38.8}, {"pcer0.05", 50, 23.5}, {"pcer0.05", 100, 21.2},
        {"lt", 5, 49.4},       {"lt", 50, 41.1},       {"lt", 100, 36.6},
    };
    for (const auto& [proc, m1, ref] : refs) {
        const double v = *ctx.experiments.at(key(proc, m1)).atdoc_mean;
        const bool ok = within(v, ref, 0.05);
        o.pass = o.pass && ok;
        d << (d.tellp() > 0 ? ", " : "") << (proc == "lt" ? "LT" : "two-stage") << " m1=" << m1 << " " << fmt(v, 4)
          << " vs " << ref << " (" << pct(v, ref) << (ok ? "" : " out") << ")";
    }
    o.detail = d.str();
    return o;
}

Outcome global_rates(Context& ctx)
{
    Outcome o{4, "global rates"};
    std::ostringstream d;
    const auto& lt1 = ctx.experiments.at(key("lt", 1));
    const double q = ctx.table.lt_config().q;
    const bool gfdr_ok = lt1.gfdr >= 2.0 * q;
    d << "LT m1=1 GFDR " << fmt(lt1.gfdr, 4) << " (needs >= " << fmt(2.0 * q, 4) << "; per-trial mean "
      << fmt(lt1.gfdr_trial_mean, 4) << ")";
    bool gpcer_ok = true;
    std::ostringstream all;
    std::ostringstream alarm;
    for (const auto& st : ctx.table.stage_two) {
        for (std::size_t m1 : {1, 10, 100}) {
            const auto& r = ctx.experiments.at(key("pcer" + fmt(st.alpha), m1));
            gpcer_ok = gpcer_ok && r.gpcer <= st.alpha + 2.0 * r.gpcer_se;
            gpcer_ok = gpcer_ok && r.gpcer_alarm <= st.alpha + 2.0 * r.gpcer_alarm_se;
            all << (all.tellp() > 0 ? " " : "") << fmt(r.gpcer, 2);
            alarm << (alarm.tellp() > 0 ? " " : "") << fmt(r.gpcer_alarm, 3);
        }
    }
    d << "; two-stage GPCER for alpha .01/.03/.05 x m1 1/10/100, over all ticks: " << all.str()
      << "; over alarm ticks: " << alarm.str();
    o.pass = gfdr_ok && gpcer_ok;
    o.detail = d.str();
    return o;
}

Outcome orderings(Context& ctx)
{
    Outcome o{5, "orderings"};
    std::ostringstream d;
    int checks = 0;
    for (std::size_t m1 : {1, 5, 10, 50, 100}) {
        const double a01 = *ctx.experiments.at(key("pcer0.01", m1)).atdoc_mean;
        const double a03 = *ctx.experiments.at(key("pcer0.03", m1)).atdoc_mean;
        const double a05 = *ctx.experiments.at(key("pcer0.05", m1)).atdoc_mean;
        ++checks;
        if (!(a01 > a03 && a03 > a05)) {
            o.pass = false;
            d << "PCER order broken at m1=" << m1 << " (" << fmt(a01, 4) << ", " << fmt(a03, 4) << ", " << fmt(a05, 4)
              << "); ";
        }
        if (m1 < 3) {
            continue;
        }
        const auto& lt = ctx.experiments.at(key("lt", m1));
        for (const char* p : {"pcer0.01", "pcer0.03", "pcer0.05"}) {
            const auto& ts = ctx.experiments.at(key(p, m1));
            const double slack = 2.0 * std::hypot(atdoc_se(ts), atdoc_se(lt));
            ++checks;
            if (*ts.atdoc_mean > *lt.atdoc_mean + slack) {
                o.pass = false;
                d << "LT beats two-stage " << p << " at m1=" << m1 << " (" << fmt(*lt.atdoc_mean, 4) << " vs "
                  << fmt(*ts.atdoc_mean, 4) << "); ";
            }
        }
    }
    const auto& lt1 = ctx.experiments.at(key("lt", 1));
    const auto& ts1 = ctx.experiments.at(key("pcer0.05", 1));
    d << checks << " comparisons over m1 in {1,5,10,50,100}; m1=1 LT " << fmt(*lt1.atdoc_mean, 4)
      << " vs two-stage .05 " << fmt(*ts1.atdoc_mean, 4);
    o.detail = d.str();
    return o;
}

Outcome proposition(Context& ctx)
{
    Outcome o{6, "proposition"};
    const auto spec = ctx.spec(5, 200, ctx.opt.calibration_reps);
    const auto h = calibrate_h(spec, ctx.sample_small, ctx.seed(40), 5.0);
    const auto snaps = AlarmSnapshots::collect(h.limit, spec, 2500, ctx.sample_small, ctx.seed(41));
    const auto c = calibrate_c(0.05, snaps);
    MonitorConfig cfg;
    cfg.m = 5;
    cfg.params = kParams;
    cfg.procedure = Procedure::two_stage;
    cfg.h = h.limit;
    cfg.c_h = c.c_h;

    const auto one_shifted = OcScenario::make(5, 1, Allocation::equal, 1.0);
    const auto none_shifted = OcScenario::make(5, 1, Allocation::equal, 0.0);
    const auto shifted =
        check_appendix_proposition(cfg, ctx.sample_small, one_shifted, 2000, ctx.seed(42), ctx.opt.workers);
    const auto flat =
        check_appendix_proposition(cfg, ctx.sample_small, none_shifted, 2000, ctx.seed(43), ctx.opt.workers);
    const double se1 = std::hypot(shifted.se_h1, shifted.se_h0);
    const double se0 = std::hypot(flat.se_h1, flat.se_h0);
    const bool ok1 = shifted.p_h1 <= shifted.p_h0 + 2.0 * se1;
    const bool ok0 = std::abs(flat.p_h1 - flat.p_h0) <= 2.0 * se0;
    o.pass = ok1 && ok0;
    o.detail = "h " + fmt(h.limit) + ", c_h " + fmt(c.c_h) + "; delta 1: p_h1 " + fmt(shifted.p_h1, 4) + " vs p_h0 " +
               fmt(shifted.p_h0, 4) + " (SE " + fmt(se1, 2) + "); delta 0: " + fmt(flat.p_h1, 4) + " vs " +
               fmt(flat.p_h0, 4) + " (SE " + fmt(se0, 2) + ")";
    ctx.results["proposition"] = {{"h", h.limit},          {"c_h", c.c_h},          {"p_h1", shifted.p_h1},
                                  {"p_h0", shifted.p_h0},  {"se", se1},             {"p_h1_flat", flat.p_h1},
                                  {"p_h0_flat", flat.p_h0}, {"se_flat", se0}};
    return o;
}

Outcome oracles(Context& ctx)
{
    Outcome o{7, "oracles"};
    Rng rng(ctx.seed(50));
    std::uniform_int_distribution<std::size_t> dim(1, 50);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> z(0.3, 1.2);
    const auto values = ctx.sample_small.values();
    std::size_t lt_mismatch = 0;
    std::size_t lt_alarms = 0;
    for (int n = 0; n < 10000; ++n) {
        MonitorConfig cfg;
        cfg.m = dim(rng);
        cfg.params = kParams;
        cfg.procedure = Procedure::lt;
        cfg.q = 0.2 * unit(rng);
        MonitorState st;
        for (std::size_t i = 0; i < cfg.m; ++i) {
            // A third of the streams sit at zero so tied p-values occur.
            const auto pick = static_cast<std::size_t>(unit(rng) * static_cast<double>(values.size()));
            const double c = unit(rng) < 1.0 / 3.0 ? 0.0 : 3.0 * values[pick];
            st.streams.push_back(CusumState{c});
        }
        Monitor mon(cfg, ctx.sample_small, st);
        std::vector<double> obs(cfg.m);
        for (auto& x : obs) {
            x = z(rng);
        }
        const auto& r = mon.lt_step(obs);
        const auto expect = testing::brute_force_step_up(r.pvalues, cfg.q);
        lt_mismatch += (r.flagged != expect || r.alarm != !expect.empty()) ? 1 : 0;
        lt_alarms += r.alarm ? 1 : 0;
    }

    std::uniform_int_distribution<std::size_t> gdim(1, 500);
    std::size_t g_mismatch = 0;
    double worst = 0.0;
    for (int n = 0; n < 1000; ++n) {
        std::vector<double> p(gdim(rng));
        const double scale = std::pow(10.0, -6.0 * unit(rng));
        for (auto& v : p) {
            v = std::clamp(scale * unit(rng), 1e-8, 1.0 - 1e-8);
        }
        const double got = compute_g(p);
        const double want = testing::oracle_g(p);
        const double rel = want == 0.0 ? std::abs(got) : std::abs(got - want) / std::abs(want);
        worst = std::max(worst, rel);
        g_mismatch += rel <= 1e-10 ? 0 : 1;
    }
    o.pass = lt_mismatch == 0 && g_mismatch == 0;
    o.detail = "lt_step vs brute force: " + std::to_string(10000 - lt_mismatch) + "/10000 equal (" +
               std::to_string(lt_alarms) + " with flags); G vs 50-digit transcription: " +
               std::to_string(1000 - g_mismatch) + "/1000 within 1e-10, worst relative error " + fmt(worst, 2);
    return o;
}

Outcome replay_checks(Context& ctx)
{
    Outcome o{8, "replay"};
    std::ostringstream d;

    const auto lt_limits = cli::reference_limits(100, 10000);
    MonitorConfig lt = lt_limits->lt_config();
    lt.params = kParams;
    MonitorConfig ts = ctx.table.two_stage_config(0.01);
    int lt_ok = 0;
    int ts_ok = 0;
    const auto runs = static_cast<int>(ctx.opt.planted_runs);
    for (int s = 0; s < runs; ++s) {
        const auto ds = testing::planted_shift_dataset(100, 5, 1.0, 1000, 150, 50, ctx.seed(1000 + s));
        const auto tr = EmpiricalTransform::fit(ds);
        const ReplayOptions ro{ctx.seed(5000 + s), true};
        lt_ok += testing::shifted_flagged_first(replay(ds, tr, lt, ctx.sample_small, ro), 5, 50) ? 1 : 0;
        ts_ok += testing::shifted_flagged_first(replay(ds, tr, ts, ctx.sample_small, ro), 5, 50) ? 1 : 0;
    }
    const bool planted_ok = lt_ok >= static_cast<int>(std::ceil(0.95 * runs));
    d << "planted shift found first in " << lt_ok << "/" << runs << " runs (LT q " << fmt(lt.q)
      << "; two-stage IC-ARL 200 PCER .01: " << ts_ok << "/" << runs << ")";
    ctx.results["planted_shift"] = {{"runs", runs}, {"lt_first", lt_ok}, {"two_stage_first", ts_ok}};

    bool secom_ok = true;
    const fs::path dir = ctx.opt.secom_dir;
    if (ctx.opt.secom_dir.empty() || !fs::exists(dir / "secom.data") || !fs::exists(dir / "secom_labels.data")) {
        d << "; SECOM part SKIPPED: set SECOM_DIR to a directory with secom.data and secom_labels.data";
    } else {
        const auto ds = drop_constant_features(load_secom(dir / "secom.data", dir / "secom_labels.data"));
        const std::size_t m = ds.features();
        secom_ok = m == 400;
        d << "; SECOM " << m << " features after filtering (needs 400)";
        const auto tr = EmpiricalTransform::fit(ds);
        auto spec = ctx.spec(m, 1000, 500);
        const auto h = calibrate_h(spec, ctx.sample_large, ctx.seed(60), 25.0);
        const auto snaps = AlarmSnapshots::collect(h.limit, spec, 1000, ctx.sample_large, ctx.seed(61));
        json secom = {{"features", m}, {"h", h.limit}, {"runs", json::array()}};
        const std::vector<std::pair<double, double>> refs{{0.005, 3124}, {0.01, 4221}, {0.02, 5683}};
        for (const auto& [alpha, paper] : refs) {
            MonitorConfig cfg;
            cfg.m = m;
            cfg.params = kParams;
            cfg.procedure = Procedure::two_stage;
            cfg.h = h.limit;
            cfg.c_h = calibrate_c(alpha, snaps).c_h;
            const auto rep = replay(ds, tr, cfg, ctx.sample_large, {ctx.seed(62), false});
            d << ", PCER " << alpha << ": " << rep.alarmed_rows << "/" << rep.rows << " rows alarmed, "
              << rep.flag_events << " flag events (paper 102/104, " << paper << ")";
            secom["runs"].push_back(
                {{"alpha", alpha}, {"alarmed_rows", rep.alarmed_rows}, {"flag_events", rep.flag_events}});
        }
        ctx.results["secom"] = secom;
    }
    o.pass = planted_ok && secom_ok;
    o.detail = d.str();
    return o;
}

std::map<std::string, std::string> read_tree(const fs::path& dir)
{
    std::map<std::string, std::string> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        const auto name = e.path().filename().string();
        if (name.rfind("manifest_", 0) == 0) {
            continue;
        }
        std::ifstream in(e.path(), std::ios::binary);
        std::stringstream ss;
        ss << in.rdbuf();
        files[name] = ss.str();
    }
    return files;
}

Outcome determinism(Context& ctx)
{
    Outcome o{9, "determinism"};
    std::ostringstream d;
    const fs::path root = fs::path(ctx.opt.out_dir) / "determinism";
    fs::remove_all(root);

    const auto ds = testing::planted_shift_dataset(12, 2, 1.5, 300, 80, 30, ctx.seed(70));
    fs::create_directories(root);
    auto dump = [](const fs::path& path, const DataMatrix& x) {
        std::ofstream out(path);
        out.precision(17);
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
            for (Eigen::Index c = 0; c < x.cols(); ++c) {
                out << (c ? "," : "") << x(r, c);
            }
            out << '\n';
        }
    };
    dump(root / "historical.csv", ds.historical);
    dump(root / "monitoring.csv", ds.monitoring);

    std::vector<std::map<std::string, std::string>> trees;
    bool ran = true;
    for (const char* workers : {"1", "3"}) {
        const std::string out = (root / (std::string("workers") + workers)).string();
        const std::string seed = std::to_string(ctx.opt.seed);
        const std::vector<std::vector<std::string>> cmds{
            {"steady-state", "--n", "20000", "--len", "1000"},
            {"calibrate", "--m", "12", "--arl", "100", "--reps", "600", "--B", "600", "--sample",
             out + "/steady_state.csv"},
            {"simulate", "--m", "12", "--m1", "3", "--arl", "100", "--trials", "300", "--calibration",
             out + "/calibration.json", "--sample", out + "/steady_state.csv"},
            {"simulate", "--check-proposition", "--arl", "100", "--reps", "600", "--B", "600", "--out",
             "proposition.json", "--sample", out + "/steady_state.csv"},
            {"replay", "--historical", (root / "historical.csv").string(), "--monitor",
             (root / "monitoring.csv").string(), "--arl", "100", "--calibration", out + "/calibration.json",
             "--emit-steps", "steps.jsonl", "--restart-flagged", "--sample", out + "/steady_state.csv"},
            {"report", "--results", out + "/simulate.csv", "--calibration", out + "/calibration.json"},
        };
        for (auto args : cmds) {
            args.insert(args.begin(), "tsmon");
            args.insert(args.end(), {"--seed", seed, "--workers", workers, "--out-dir", out});
            std::ostringstream sink;
            std::ostringstream err;
            const int code = cli::run(args, sink, err);
            if (code != 0) {
                ran = false;
                d << args[1] << " exited " << code << ": " << err.str() << "; ";
            }
        }
        trees.push_back(read_tree(out));
    }

    const auto sample3 = build_steady_state_sample(kParams, 100000, 2000, ctx.seed(1), 3);
    const bool sample_same = std::equal(sample3.values().begin(), sample3.values().end(),
                                        ctx.sample_small.values().begin(), ctx.sample_small.values().end());
    const auto sc = OcScenario::make(100, 10, Allocation::equal, 0.5);
    const auto cfg = ctx.table.two_stage_config(0.03);
    std::ostringstream e1;
    std::ostringstream e3;
    write_experiment_csv_row(e1, run_experiment(sc, cfg, ctx.sample_small, 100, ctx.seed(80), 1));
    write_experiment_csv_row(e3, run_experiment(sc, cfg, ctx.sample_small, 100, ctx.seed(80), 3));

    std::size_t same = 0;
    for (const auto& [name, bytes] : trees[0]) {
        auto it = trees[1].find(name);
        if (it != trees[1].end() && it->second == bytes) {
            ++same;
        } else {
            d << name << " differs; ";
        }
    }
    const bool rows_same = e1.str() == e3.str();
    o.pass = ran && same == trees[0].size() && trees[0].size() == trees[1].size() && sample_same && rows_same;
    d << same << "/" << trees[0].size() << " CLI output files byte-identical at 1 vs 3 workers; 10^5 sample "
      << (sample_same ? "identical" : "differs") << "; experiment row " << (rows_same ? "identical" : "differs");
    o.detail = d.str();
    return o;
}

} // namespace

int main(int argc, char** argv)
{
    Options opt;
    if (const char* env = std::getenv("SECOM_DIR")) {
        opt.secom_dir = env;
    }
    CLI::App app("Acceptance run: one PASS/FAIL line per criterion", "tsmon_acceptance");
    app.add_option("--seed", opt.seed, "master seed")->capture_default_str();
    app.add_option("--workers", opt.workers, "worker threads")->capture_default_str();
    app.add_option("--reps", opt.calibration_reps, "IC runs per ARL estimate")->capture_default_str();
    app.add_option("--trials", opt.trials, "trials per detection experiment")->capture_default_str();
    app.add_option("--planted-runs", opt.planted_runs, "planted-shift replays")->capture_default_str();
    app.add_option("--secom-dir", opt.secom_dir, "directory with the SECOM files (default $SECOM_DIR)");
    app.add_option("--out-dir", opt.out_dir, "where reports are written")->capture_default_str();
    app.add_flag("--strict", opt.strict, "exit 1 when any criterion fails");
    CLI11_PARSE(app, argc, argv);

    Context ctx;
    ctx.opt = opt;
    fs::create_directories(opt.out_dir);
    Clock total;
    log("building steady-state samples");
    ctx.sample_small = build_steady_state_sample(kParams, 100000, 2000, ctx.seed(1), opt.workers);
    ctx.sample_large = build_steady_state_sample(kParams, 1000000, 2000, ctx.seed(2), opt.workers);
    ctx.table = *cli::reference_limits(100, 200);
    ctx.table.params = kParams;

    std::vector<Outcome> outcomes;
    auto record = [&](Outcome (*fn)(Context&), bool experiments_first = false) {
        Clock c;
        if (experiments_first && ctx.experiments.empty()) {
            run_experiments(ctx);
        }
        Outcome o;
        try {
            o = fn(ctx);
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail = std::string("error: ") + e.what();
        }
        char line[64];
        std::snprintf(line, sizeof line, "%s %d %s", o.pass ? "PASS" : "FAIL", o.id, o.name.c_str());
        std::cout << line << ": " << o.detail << "  [" << fmt(c.seconds(), 3) << " s]" << std::endl;
        outcomes.push_back(o);
    };
    record(control_limits);
    record(stage_two_limits);
    record(atdoc_reproduction, true);
    record(global_rates);
    record(orderings);
    record(proposition);
    record(oracles);
    record(replay_checks);
    record(determinism);

    int passed = 0;
    std::ofstream report(fs::path(opt.out_dir) / "acceptance_report.txt");
    for (const auto& o : outcomes) {
        passed += o.pass ? 1 : 0;
        report << (o.pass ? "PASS " : "FAIL ") << o.id << ' ' << o.name << ": " << o.detail << '\n';
    }
    std::cout << passed << "/" << outcomes.size() << " criteria pass (" << fmt(total.seconds(), 4) << " s)"
              << std::endl;
    report << passed << "/" << outcomes.size() << " criteria pass\n";
    ctx.results["seed"] = opt.seed;
    ctx.results["passed"] = passed;
    std::ofstream(fs::path(opt.out_dir) / "acceptance_results.json") << ctx.results.dump(2) << '\n';
    return opt.strict && passed != static_cast<int>(outcomes.size()) ? 1 : 0;
}
