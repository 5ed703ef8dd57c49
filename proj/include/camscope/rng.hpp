#pragma once
#include <cstdint>
#include <random>
#include <string>

namespace camscope {

// splitmix64 step; used to derive independent stream seeds from (seed, index)
// pairs so that per-case / per-tensor streams never depend on generation order.
std::uint64_t mix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);
std::uint64_t derive_seed(std::uint64_t seed, const std::string& name);

// mt19937_64 with explicit output mappings. The std distribution objects are
// implementation-defined, so all mappings from raw 64-bit draws to doubles
// live here and nowhere else.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    // uniform in [0,1)
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // inclusive bounds
    int uniform_int(int lo, int hi) {
        return lo + static_cast<int>(gen_() % static_cast<std::uint64_t>(hi - lo + 1));
    }

    // Box-Muller, pairs cached
    double normal();

    bool bernoulli(double p) { return uniform() < p; }

    std::uint64_t raw() { return gen_(); }

private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace camscope
