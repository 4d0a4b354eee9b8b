#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "tsmon/common.hpp"

namespace tsmon {

/// Upper one-sided CUSUM parameters: in-control mean and reference value
/// (half the shift to detect), both in data units.
struct CusumParams {
    double mu0 = 0.0;
    double k = 0.25;

    void validate() const;
};

struct CusumState {
    double value = 0.0;
};

/// max(0, C + x - mu0 - k). Throws InvalidInput on non-finite x.
CusumState cusum_update(CusumState state, double x, const CusumParams& params);

/// Smallest and largest p-values handed out; keeps log(p / (1 - p)) finite.
inline constexpr double kPValueFloor = 1e-8;
inline constexpr double kPValueCeiling = 1.0 - 1e-8;

/// Sorted sample from the null steady-state distribution of the CUSUM
/// statistic. Immutable once built; shared across monitors and workers.
class SteadyStateSample {
public:
    struct Provenance {
        CusumParams params;
        std::uint64_t n_sequences = 0;
        std::uint64_t seq_len = 0;
        std::uint64_t seed = 0;
    };

    /// Sorts `values`; throws InvalidInput if empty or any entry is negative
    /// or non-finite.
    explicit SteadyStateSample(std::vector<double> values);
    SteadyStateSample(std::vector<double> values, Provenance provenance);

    std::span<const double> values() const { return values_; }
    std::size_t size() const { return values_.size(); }
    const Provenance& provenance() const { return provenance_; }

    /// Number of sample values >= c.
    std::size_t count_at_least(double c) const;

private:
    std::vector<double> values_;
    Provenance provenance_;
};

/// Terminal values of n_sequences zero-started CUSUMs run over seq_len
/// in-control N(mu0, 1) observations. Sequences are generated in fixed
/// blocks with seeds derived from `seed`, so the result does not depend on
/// `workers`.
SteadyStateSample build_steady_state_sample(const CusumParams& params, std::uint64_t n_sequences,
                                            std::uint64_t seq_len, std::uint64_t seed,
                                            unsigned workers = 1);

/// Uniform draw with replacement from the sample.
double draw_initial(const SteadyStateSample& sample, Rng& rng);

/// Empirical upper-tail p-value (#{v >= c} + 1) / (N + 2), clamped to
/// [kPValueFloor, kPValueCeiling]. Throws InvalidInput for negative or NaN c.
double steady_state_pvalue(const SteadyStateSample& sample, double c);

/// CSV with '#'-prefixed provenance header and one value per row.
void write_steady_state_sample(const SteadyStateSample& sample, const std::filesystem::path& path);
SteadyStateSample read_steady_state_sample(const std::filesystem::path& path);

} // namespace tsmon
