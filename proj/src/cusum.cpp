#include "tsmon/cusum.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

namespace tsmon {

namespace {

constexpr std::uint64_t kSequencesPerBlock = 4096;

} // namespace

void CusumParams::validate() const
{
    if (!std::isfinite(mu0)) {
        throw InvalidInput("cusum: mu0 must be finite");
    }
    if (!(k > 0.0) || !std::isfinite(k)) {
        throw InvalidInput("cusum: reference value k must be positive");
    }
}

CusumState cusum_update(CusumState state, double x, const CusumParams& params)
{
    if (!std::isfinite(x)) {
        throw InvalidInput("cusum: observation is not finite");
    }
    return CusumState{std::max(0.0, state.value + x - params.mu0 - params.k)};
}

SteadyStateSample::SteadyStateSample(std::vector<double> values)
    : SteadyStateSample(std::move(values), Provenance{})
{
}

SteadyStateSample::SteadyStateSample(std::vector<double> values, Provenance provenance)
    : values_(std::move(values))
    , provenance_(provenance)
{
    if (values_.empty()) {
        throw InvalidInput("steady-state sample is empty");
    }
    for (double v : values_) {
        if (!(v >= 0.0) || !std::isfinite(v)) {
            throw InvalidInput("steady-state sample values must be finite and nonnegative");
        }
    }
    std::sort(values_.begin(), values_.end());
    provenance_.n_sequences = values_.size();
}

std::size_t SteadyStateSample::count_at_least(double c) const
{
    auto first = std::lower_bound(values_.begin(), values_.end(), c);
    return static_cast<std::size_t>(values_.end() - first);
}

SteadyStateSample build_steady_state_sample(const CusumParams& params, std::uint64_t n_sequences,
                                            std::uint64_t seq_len, std::uint64_t seed, unsigned workers)
{
    params.validate();
    if (n_sequences == 0 || seq_len == 0) {
        throw InvalidInput("steady-state sample needs n_sequences >= 1 and seq_len >= 1");
    }

    std::vector<double> values(n_sequences);
    const std::uint64_t n_blocks = (n_sequences + kSequencesPerBlock - 1) / kSequencesPerBlock;
    parallel_for(n_blocks, workers, [&](std::size_t block) {
        Rng rng = make_rng(seed, block);
        std::normal_distribution<double> noise(params.mu0, 1.0);
        const std::uint64_t begin = block * kSequencesPerBlock;
        const std::uint64_t end = std::min(n_sequences, begin + kSequencesPerBlock);
        for (std::uint64_t j = begin; j < end; ++j) {
            CusumState state;
            for (std::uint64_t t = 0; t < seq_len; ++t) {
                state = cusum_update(state, noise(rng), params);
            }
            values[j] = state.value;
        }
    });

    return SteadyStateSample(std::move(values), {params, n_sequences, seq_len, seed});
}

double draw_initial(const SteadyStateSample& sample, Rng& rng)
{
    std::uniform_int_distribution<std::size_t> pick(0, sample.size() - 1);
    return sample.values()[pick(rng)];
}

double steady_state_pvalue(const SteadyStateSample& sample, double c)
{
    if (!(c >= 0.0)) {
        throw InvalidInput("steady_state_pvalue: statistic must be nonnegative");
    }
    const double n = static_cast<double>(sample.size());
    const double p = (static_cast<double>(sample.count_at_least(c)) + 1.0) / (n + 2.0);
    return std::clamp(p, kPValueFloor, kPValueCeiling);
}

void write_steady_state_sample(const SteadyStateSample& sample, const std::filesystem::path& path)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot open " + path.string() + " for writing");
    }
    const auto& prov = sample.provenance();
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", prov.params.mu0);
    out << "# tsmon steady-state sample\n";
    out << "# mu0=" << buf;
    std::snprintf(buf, sizeof buf, "%.17g", prov.params.k);
    out << " k=" << buf << " n=" << prov.n_sequences << " len=" << prov.seq_len << " seed=" << prov.seed
        << "\n";
    out << "value\n";
    for (double v : sample.values()) {
        std::snprintf(buf, sizeof buf, "%.17g\n", v);
        out << buf;
    }
    if (!out) {
        throw std::runtime_error("write failed for " + path.string());
    }
}

SteadyStateSample read_steady_state_sample(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open " + path.string());
    }
    SteadyStateSample::Provenance prov;
    std::vector<double> values;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        if (line[0] == '#') {
            std::istringstream fields(line.substr(1));
            std::string field;
            while (fields >> field) {
                auto eq = field.find('=');
                if (eq == std::string::npos) {
                    continue;
                }
                const std::string key = field.substr(0, eq);
                const std::string val = field.substr(eq + 1);
                if (key == "mu0") {
                    prov.params.mu0 = std::stod(val);
                } else if (key == "k") {
                    prov.params.k = std::stod(val);
                } else if (key == "len") {
                    prov.seq_len = std::stoull(val);
                } else if (key == "seed") {
                    prov.seed = std::stoull(val);
                }
            }
            continue;
        }
        if (line == "value") {
            continue;
        }
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(line, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == 0) {
            throw ParseError(path.string() + ":" + std::to_string(lineno) + ": not a number: " + line);
        }
        values.push_back(v);
    }
    return SteadyStateSample(std::move(values), prov);
}

} // namespace tsmon
