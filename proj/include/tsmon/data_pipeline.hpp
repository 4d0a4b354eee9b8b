#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tsmon/cusum.hpp"
#include "tsmon/procedures.hpp"

namespace tsmon {

/// Observations x features; NaN marks a missing cell.
using DataMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Dataset {
    DataMatrix historical;
    DataMatrix monitoring;
    std::vector<std::string> feature_names;
    std::vector<std::string> removed_features;

    std::size_t features() const { return static_cast<std::size_t>(historical.cols()); }
};

struct TableFile {
    DataMatrix values;
    std::vector<std::string> header; ///< empty when the file had no header row
};

/// Rectangular numeric table. The delimiter is ',' unless given; a space
/// delimiter splits on runs of whitespace. Empty cells and "NaN"/"NA" are
/// missing. A first row with any non-numeric cell is taken as the header.
/// Ragged rows and non-numeric cells throw ParseError naming row and column.
TableFile read_table(const std::filesystem::path& path, char delimiter = ',');

Dataset load_dataset(const std::filesystem::path& historical_path,
                     const std::filesystem::path& monitoring_path);

/// UCI SECOM layout: secom.data (space separated, NaN for missing) and
/// secom_labels.data (-1 conforming, 1 nonconforming). Conforming rows
/// become the historical sample, nonconforming rows the monitoring data.
Dataset load_secom(const std::filesystem::path& data_path, const std::filesystem::path& labels_path);

/// Removes features whose non-missing historical values are all equal (or
/// absent). Throws ConfigError if nothing would remain.
Dataset drop_constant_features(const Dataset& ds);

/// Per-feature plug-in CDF F(x) = (#{h < x} + #{h == x} / 2 + 1/2) / (n + 1)
/// over the non-missing historical values, followed by the standard normal
/// quantile. Outputs are finite for any finite input.
class EmpiricalTransform {
public:
    static EmpiricalTransform fit(const Dataset& ds);

    std::size_t features() const { return sorted_.size(); }
    /// NaN in, NaN out.
    double apply(double x, std::size_t feature) const;
    DataMatrix apply(const DataMatrix& rows) const;

private:
    std::vector<std::vector<double>> sorted_;
};

struct ReplayOptions {
    std::uint64_t seed = 0;       ///< steady-state initialization draws
    bool restart_flagged = false; ///< redraw flagged streams after each flag
};

struct FlagEvent {
    std::int64_t row = 0; ///< 1-based monitoring row (= tick)
    std::size_t feature = 0;
};

struct ReplayReport {
    std::vector<StepResult> steps;
    std::vector<FlagEvent> flags;
    std::size_t rows = 0;
    std::size_t alarmed_rows = 0;
    std::size_t rows_with_flags = 0;
    std::size_t flag_events = 0;
    std::optional<double> mean_flag_tick;
    std::vector<std::optional<std::int64_t>> first_flag_tick; ///< per feature
};

/// Feeds the transformed monitoring rows tick by tick into a monitor built
/// from `config`. Throws ConfigError if config.m differs from the dataset.
ReplayReport replay(const Dataset& ds, const EmpiricalTransform& transform, const MonitorConfig& config,
                    const SteadyStateSample& sample, const ReplayOptions& options = {});

void write_replay_steps_jsonl(std::ostream& out, const ReplayReport& report);
void write_replay_flags_csv(std::ostream& out, const ReplayReport& report, const Dataset& ds);
std::string replay_summary_json(const ReplayReport& report, const Dataset& ds, const MonitorConfig& config);

} // namespace tsmon
