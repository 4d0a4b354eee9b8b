#include "tsmon/global_stat.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "tsmon/common.hpp"

namespace tsmon {

GlobalStatistic::GlobalStatistic(std::size_t m)
    : gates_(m)
    , log_denom_(m)
    , sorted_(m)
{
    if (m == 0) {
        throw InvalidInput("global statistic needs at least one stream");
    }
    const double md = static_cast<double>(m);
    for (std::size_t r = 0; r < m; ++r) {
        const double rank = static_cast<double>(r + 1) - 0.75;
        gates_[r] = 1.0 - rank / md;
        log_denom_[r] = std::log((md - 0.5) / rank - 1.0);
    }
}

double GlobalStatistic::operator()(std::span<const double> pvalues) const
{
    if (pvalues.size() != gates_.size()) {
        throw InvalidInput("global statistic: expected " + std::to_string(gates_.size()) + " p-values, got " +
                           std::to_string(pvalues.size()));
    }
    for (double p : pvalues) {
        if (!(p > 0.0 && p < 1.0)) {
            throw InvalidInput("global statistic: p-value outside (0, 1)");
        }
    }
    std::copy(pvalues.begin(), pvalues.end(), sorted_.begin());
    // Descending: rank i pairs the i-th largest p with 1 - (i - 3/4) / m.
    std::sort(sorted_.begin(), sorted_.end(), std::greater<>());

    double g = 0.0;
    for (std::size_t r = 0; r < sorted_.size(); ++r) {
        const double p = sorted_[r];
        if (p < gates_[r]) {
            const double term = std::log(p) - std::log1p(-p) - log_denom_[r];
            g += term * term;
        }
    }
    return g;
}

double compute_g(std::span<const double> pvalues)
{
    return GlobalStatistic(pvalues.size())(pvalues);
}

} // namespace tsmon
