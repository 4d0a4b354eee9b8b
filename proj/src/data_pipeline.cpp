#include "tsmon/data_pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <ostream>
#include <sstream>

#include <boost/math/distributions/normal.hpp>
#include <nlohmann/json.hpp>

namespace tsmon {

namespace {

constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

std::vector<std::string> split_fields(const std::string& line, char delimiter)
{
    std::vector<std::string> fields;
    if (delimiter == ' ') {
        std::istringstream in(line);
        std::string tok;
        while (in >> tok) {
            fields.push_back(tok);
        }
        return fields;
    }
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char ch = line[i];
        if (quoted) {
            if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur.push_back('"');
                ++i;
            } else if (ch == '"') {
                quoted = false;
            } else {
                cur.push_back(ch);
            }
        } else if (ch == '"') {
            quoted = true;
        } else if (ch == delimiter) {
            fields.push_back(std::move(cur));
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    fields.push_back(std::move(cur));
    return fields;
}

std::string strip(const std::string& s)
{
    const auto first = s.find_first_not_of(" \t");
    if (first == std::string::npos) {
        return {};
    }
    return s.substr(first, s.find_last_not_of(" \t") - first + 1);
}

bool is_missing_token(const std::string& s)
{
    return s.empty() || s == "NaN" || s == "nan" || s == "NA";
}

std::optional<double> parse_number(const std::string& s)
{
    double v = 0.0;
    const char* begin = s.data();
    const char* end = s.data() + s.size();
    if (begin != end && *begin == '+') {
        ++begin;
    }
    auto [ptr, ec] = std::from_chars(begin, end, v);
    if (ec != std::errc() || ptr != end || !std::isfinite(v)) {
        return std::nullopt;
    }
    return v;
}

/// Sorted non-missing values of one column.
std::vector<double> column_values(const DataMatrix& m, Eigen::Index col)
{
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(m.rows()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        const double v = m(r, col);
        if (!std::isnan(v)) {
            out.push_back(v);
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

DataMatrix select_columns(const DataMatrix& m, const std::vector<Eigen::Index>& keep)
{
    DataMatrix out(m.rows(), static_cast<Eigen::Index>(keep.size()));
    for (std::size_t j = 0; j < keep.size(); ++j) {
        out.col(static_cast<Eigen::Index>(j)) = m.col(keep[j]);
    }
    return out;
}

} // namespace

TableFile read_table(const std::filesystem::path& path, char delimiter)
{
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open " + path.string());
    }
    TableFile table;
    std::vector<std::vector<double>> rows;
    std::size_t width = 0;
    std::size_t lineno = 0;
    std::string line;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (strip(line).empty()) {
            continue;
        }
        auto fields = split_fields(line, delimiter);
        for (auto& f : fields) {
            f = strip(f);
        }
        const bool first = rows.empty() && table.header.empty();
        if (first) {
            const bool any_text = std::any_of(fields.begin(), fields.end(), [](const std::string& f) {
                return !is_missing_token(f) && !parse_number(f);
            });
            if (any_text) {
                table.header = fields;
                width = fields.size();
                continue;
            }
        }
        if (width == 0) {
            width = fields.size();
        }
        if (fields.size() != width) {
            throw ParseError(path.string() + ": row " + std::to_string(lineno) + " has " +
                             std::to_string(fields.size()) + " cells, expected " + std::to_string(width));
        }
        std::vector<double> row(width);
        for (std::size_t c = 0; c < width; ++c) {
            if (is_missing_token(fields[c])) {
                row[c] = kMissing;
                continue;
            }
            auto v = parse_number(fields[c]);
            if (!v) {
                throw ParseError(path.string() + ": row " + std::to_string(lineno) + ", column " +
                                 std::to_string(c + 1) + ": not a number: '" + fields[c] + "'");
            }
            row[c] = *v;
        }
        rows.push_back(std::move(row));
    }

    table.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(width));
    for (std::size_t r = 0; r < rows.size(); ++r) {
        for (std::size_t c = 0; c < width; ++c) {
            table.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
        }
    }
    return table;
}

Dataset load_dataset(const std::filesystem::path& historical_path, const std::filesystem::path& monitoring_path)
{
    auto hist = read_table(historical_path);
    auto mon = read_table(monitoring_path);
    if (hist.values.cols() != mon.values.cols()) {
        throw ParseError("historical file has " + std::to_string(hist.values.cols()) +
                         " columns but monitoring file has " + std::to_string(mon.values.cols()));
    }
    Dataset ds;
    ds.historical = std::move(hist.values);
    ds.monitoring = std::move(mon.values);
    if (!hist.header.empty()) {
        ds.feature_names = hist.header;
    } else if (!mon.header.empty()) {
        ds.feature_names = mon.header;
    } else {
        for (Eigen::Index c = 0; c < ds.historical.cols(); ++c) {
            ds.feature_names.push_back("f" + std::to_string(c + 1));
        }
    }
    return ds;
}

Dataset load_secom(const std::filesystem::path& data_path, const std::filesystem::path& labels_path)
{
    auto data = read_table(data_path, ' ');
    std::ifstream in(labels_path);
    if (!in) {
        throw std::runtime_error("cannot open " + labels_path.string());
    }
    std::vector<int> labels;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::istringstream fields(line);
        std::string tok;
        if (!(fields >> tok)) {
            continue;
        }
        auto v = parse_number(tok);
        if (!v || (*v != -1.0 && *v != 1.0)) {
            throw ParseError(labels_path.string() + ": row " + std::to_string(lineno) + ": bad label '" + tok + "'");
        }
        labels.push_back(static_cast<int>(*v));
    }
    if (labels.size() != static_cast<std::size_t>(data.values.rows())) {
        throw ParseError("SECOM label count does not match data rows");
    }
    std::vector<Eigen::Index> conforming;
    std::vector<Eigen::Index> nonconforming;
    for (std::size_t r = 0; r < labels.size(); ++r) {
        (labels[r] < 0 ? conforming : nonconforming).push_back(static_cast<Eigen::Index>(r));
    }
    Dataset ds;
    ds.historical = data.values(conforming, Eigen::all);
    ds.monitoring = data.values(nonconforming, Eigen::all);
    for (Eigen::Index c = 0; c < data.values.cols(); ++c) {
        ds.feature_names.push_back("f" + std::to_string(c + 1));
    }
    return ds;
}

Dataset drop_constant_features(const Dataset& ds)
{
    std::vector<Eigen::Index> keep;
    Dataset out;
    for (Eigen::Index c = 0; c < ds.historical.cols(); ++c) {
        const auto values = column_values(ds.historical, c);
        const bool constant = values.empty() || values.front() == values.back();
        if (constant) {
            out.removed_features.push_back(ds.feature_names[static_cast<std::size_t>(c)]);
        } else {
            keep.push_back(c);
        }
    }
    if (keep.empty()) {
        throw ConfigError("every feature is constant in the historical data");
    }
    out.historical = select_columns(ds.historical, keep);
    out.monitoring = select_columns(ds.monitoring, keep);
    for (auto c : keep) {
        out.feature_names.push_back(ds.feature_names[static_cast<std::size_t>(c)]);
    }
    out.removed_features.insert(out.removed_features.begin(), ds.removed_features.begin(),
                                ds.removed_features.end());
    return out;
}

EmpiricalTransform EmpiricalTransform::fit(const Dataset& ds)
{
    EmpiricalTransform tr;
    tr.sorted_.reserve(ds.features());
    for (Eigen::Index c = 0; c < ds.historical.cols(); ++c) {
        auto values = column_values(ds.historical, c);
        if (values.size() < 2 || values.front() == values.back()) {
            throw InvalidInput("transform: feature '" + ds.feature_names[static_cast<std::size_t>(c)] +
                               "' needs at least two distinct historical values");
        }
        tr.sorted_.push_back(std::move(values));
    }
    return tr;
}

double EmpiricalTransform::apply(double x, std::size_t feature) const
{
    if (feature >= sorted_.size()) {
        throw InvalidInput("transform: feature index out of range");
    }
    if (std::isnan(x)) {
        return x;
    }
    const auto& h = sorted_[feature];
    const auto lo = std::lower_bound(h.begin(), h.end(), x);
    const auto hi = std::upper_bound(lo, h.end(), x);
    const double below = static_cast<double>(lo - h.begin());
    const double equal = static_cast<double>(hi - lo);
    const double n = static_cast<double>(h.size());
    const double F = (below + 0.5 * equal + 0.5) / (n + 1.0);
    static const boost::math::normal_distribution<double> standard;
    return boost::math::quantile(standard, F);
}

DataMatrix EmpiricalTransform::apply(const DataMatrix& rows) const
{
    if (static_cast<std::size_t>(rows.cols()) != sorted_.size()) {
        throw InvalidInput("transform: column count does not match the fitted features");
    }
    DataMatrix out(rows.rows(), rows.cols());
    for (Eigen::Index r = 0; r < rows.rows(); ++r) {
        for (Eigen::Index c = 0; c < rows.cols(); ++c) {
            out(r, c) = apply(rows(r, c), static_cast<std::size_t>(c));
        }
    }
    return out;
}

ReplayReport replay(const Dataset& ds, const EmpiricalTransform& transform, const MonitorConfig& config,
                    const SteadyStateSample& sample, const ReplayOptions& options)
{
    if (config.m != ds.features() || transform.features() != ds.features()) {
        throw ConfigError("replay: monitor is configured for m = " + std::to_string(config.m) +
                          " but the dataset has " + std::to_string(ds.features()) + " features");
    }
    const DataMatrix x = transform.apply(ds.monitoring);
    Rng rng(options.seed);
    Monitor monitor(config, sample, rng);

    ReplayReport rep;
    rep.rows = static_cast<std::size_t>(x.rows());
    rep.first_flag_tick.assign(config.m, std::nullopt);
    double tick_sum = 0.0;
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const auto& step = monitor.step(std::span<const double>(x.row(r).data(), config.m));
        rep.steps.push_back(step);
        if (step.alarm) {
            ++rep.alarmed_rows;
        }
        if (!step.flagged.empty()) {
            ++rep.rows_with_flags;
        }
        for (auto f : step.flagged) {
            rep.flags.push_back({step.t, f});
            tick_sum += static_cast<double>(step.t);
            if (!rep.first_flag_tick[f]) {
                rep.first_flag_tick[f] = step.t;
            }
        }
        if (options.restart_flagged) {
            for (auto f : step.flagged) {
                monitor.restart_stream(f, rng);
            }
        }
    }
    rep.flag_events = rep.flags.size();
    if (rep.flag_events > 0) {
        rep.mean_flag_tick = tick_sum / static_cast<double>(rep.flag_events);
    }
    return rep;
}

void write_replay_steps_jsonl(std::ostream& out, const ReplayReport& report)
{
    for (const auto& s : report.steps) {
        write_step_jsonl(out, s);
    }
}

void write_replay_flags_csv(std::ostream& out, const ReplayReport& report, const Dataset& ds)
{
    out << "row,feature_index,feature\n";
    for (const auto& f : report.flags) {
        std::string name = ds.feature_names.at(f.feature);
        if (name.find_first_of(",\"\n") != std::string::npos) {
            std::string quoted = "\"";
            for (char ch : name) {
                quoted += ch == '"' ? std::string("\"\"") : std::string(1, ch);
            }
            name = quoted + "\"";
        }
        out << f.row << ',' << f.feature << ',' << name << '\n';
    }
}

std::string replay_summary_json(const ReplayReport& report, const Dataset& ds, const MonitorConfig& config)
{
    nlohmann::ordered_json doc;
    doc["procedure"] = to_string(config.procedure);
    doc["m"] = config.m;
    doc["k"] = config.params.k;
    if (config.procedure == Procedure::two_stage) {
        doc["h"] = config.h;
        doc["c_h"] = config.c_h;
    } else {
        doc["q"] = config.q;
    }
    doc["removed_features"] = ds.removed_features.size();
    doc["rows"] = report.rows;
    doc["alarmed_rows"] = report.alarmed_rows;
    doc["rows_with_flags"] = report.rows_with_flags;
    doc["flag_events"] = report.flag_events;
    doc["mean_flag_tick"] = report.mean_flag_tick ? nlohmann::ordered_json(*report.mean_flag_tick)
                                                  : nlohmann::ordered_json(nullptr);
    std::size_t flagged_features = 0;
    for (const auto& f : report.first_flag_tick) {
        flagged_features += f.has_value() ? 1 : 0;
    }
    doc["flagged_features"] = flagged_features;
    return doc.dump(2);
}

} // namespace tsmon
