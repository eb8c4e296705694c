#pragma once

// Shared plumbing: error types with machine-readable kinds, a portable
// deterministic RNG with named substreams, and small hashing helpers.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace pedgen {

// ---------------------------------------------------------------------------
// Errors. Every failure the CLI can surface carries a stable `kind` string so
// the error JSON emitted on a nonzero exit is machine readable.
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& msg)
        : std::runtime_error(msg), kind_(std::move(kind)) {}
    const std::string& kind() const { return kind_; }

private:
    std::string kind_;
};

struct InvalidArgument : Error {
    explicit InvalidArgument(const std::string& msg) : Error("invalid_argument", msg) {}
};
struct SchemaError : Error {
    explicit SchemaError(const std::string& msg) : Error("schema_error", msg) {}
};
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error("io_error", msg) {}
};
struct InsufficientReferences : Error {
    explicit InsufficientReferences(const std::string& msg)
        : Error("insufficient_references", msg) {}
};
struct TrainingDivergence : Error {
    explicit TrainingDivergence(const std::string& msg) : Error("training_divergence", msg) {}
};
struct InvalidState : Error {
    explicit InvalidState(const std::string& msg) : Error("invalid_state", msg) {}
};
struct StagedDependency : Error {
    explicit StagedDependency(const std::string& msg) : Error("staged_dependency", msg) {}
};
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error("config_error", msg) {}
};

// ---------------------------------------------------------------------------
// Hashing (FNV-1a, 64 bit). Used for config hashes, vocabulary hashes, and
// seeding named RNG substreams.
// ---------------------------------------------------------------------------

inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64_mix(uint64_t seed, std::string_view name) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (int i = 0; i < 8; ++i) {
        h ^= (seed >> (8 * i)) & 0xff;
        h *= 0x100000001b3ull;
    }
    return fnv1a64(name, h);
}

inline std::string hex64(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[i] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

// ---------------------------------------------------------------------------
// Rng: splitmix64 core with Box-Muller normals. Implementation-defined
// library distributions are avoided on purpose: every stream must replay
// bit-identically on any platform. fork() derives an independent substream
// from the *origin* seed and a name, so fork order cannot perturb results.
// ---------------------------------------------------------------------------

class Rng {
public:
    explicit Rng(uint64_t seed = 0) : seed_(seed), state_(seed) {}

    uint64_t seed() const { return seed_; }

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // uniform in [lo, hi)
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // inclusive integer range
    int64_t uniform_int(int64_t lo, int64_t hi) {
        if (hi < lo) throw InvalidArgument("uniform_int: empty range");
        uint64_t span = uint64_t(hi - lo) + 1;
        return lo + int64_t(next_u64() % span);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // standard normal via Box-Muller (cosine branch only; stateless draws)
    double normal() {
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Independent child stream tied to the origin seed and a name, not to the
    // current state: forking is order-insensitive.
    Rng fork(std::string_view name) const { return Rng(fnv1a64_mix(seed_, name)); }

private:
    uint64_t seed_;
    uint64_t state_;
};

}  // namespace pedgen
