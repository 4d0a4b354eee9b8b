#pragma once

#include <span>
#include <vector>

namespace tsmon {

/// Order-statistic combination of per-stream p-values into one global
/// monitoring statistic:
///
///   G = sum_i [ log( ((1 - p_[i])^-1 - 1) / ((m - 1/2) / (i - 3/4) - 1) ) ]^2
///             * 1{ p_[i] < 1 - (i - 3/4) / m }
///
/// where p_[1] >= ... >= p_[m] are the p-values in descending order, so
/// 1 - p_[i] runs through the ascending order statistics of 1 - p. A term
/// vanishes when the i-th smallest p-value sits at its null plotting
/// position (i - 3/4) / (m - 1/2); only ranks whose p-value falls below
/// that region contribute. Rank constants are computed once per m.
///
/// Not thread-safe (keeps a sort buffer); use one instance per worker.
class GlobalStatistic {
public:
    explicit GlobalStatistic(std::size_t m);

    std::size_t dimension() const { return gates_.size(); }

    /// Throws InvalidInput if p.size() != m or any p is outside (0, 1).
    double operator()(std::span<const double> pvalues) const;

private:
    std::vector<double> gates_;     // 1 - (i - 3/4) / m
    std::vector<double> log_denom_; // log((m - 1/2) / (i - 3/4) - 1)
    mutable std::vector<double> sorted_;
};

/// One-shot convenience form.
double compute_g(std::span<const double> pvalues);

} // namespace tsmon
