#pragma once

// Shared plumbing: error types, deterministic RNG, seed derivation, hashing.
// Everything here must behave identically across platforms; training runs,
// data generation and manifests all promise byte-identical reruns.

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ulab {

// ----------------------------- errors -----------------------------

struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes or bad dimensions.
struct shape_error : error {
    using error::error;
};

// Input outside an op's mathematical domain (log of non-positive, ...).
struct value_error : error {
    using error::error;
};

// An op produced NaN/Inf; fail fast instead of propagating.
struct nonfinite_error : error {
    using error::error;
};

// Misuse of a tape: backward twice, non-scalar loss, foreign tensors.
struct tape_error : error {
    using error::error;
};

struct vocab_error : error {
    using error::error;
};

struct config_error : error {
    using error::error;
};

// Dataset content violates an invariant (empty answer, duplicate option, ...).
struct data_error : error {
    using error::error;
};

struct io_error : error {
    using error::error;
};

// Checkpoint/file failed a checksum, magic or version check.
struct corruption_error : io_error {
    using io_error::io_error;
};

struct stats_error : error {
    using error::error;
};

struct training_error : error {
    std::size_t step;
    training_error(const std::string& msg, std::size_t step_index)
        : error(msg), step(step_index) {}
};

// ----------------------------- hashing -----------------------------

inline std::uint64_t fnv1a64(std::string_view bytes,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a64_u64(std::uint64_t v, std::uint64_t h) {
    for (int i = 0; i < 8; ++i) {
        h ^= (v >> (8 * i)) & 0xffu;
        h *= 0x100000001b3ull;
    }
    return h;
}

// Stable stage/job seed from a root seed and any number of string/int parts.
// Adding a new part (e.g. one more language) never perturbs other seeds.
inline std::uint64_t derive_seed(std::uint64_t root) {
    return fnv1a64_u64(root, 0xcbf29ce484222325ull);
}

template <typename Part, typename... Rest>
std::uint64_t derive_seed(std::uint64_t root, const Part& part, const Rest&... rest) {
    std::uint64_t h = derive_seed(root, rest...);
    if constexpr (std::is_convertible_v<Part, std::string_view>) {
        return fnv1a64(std::string_view(part), h);
    } else {
        return fnv1a64_u64(static_cast<std::uint64_t>(part), h);
    }
}

// ----------------------------- rng -----------------------------

// Counter-based generator (splitmix64). Unlike std::shuffle or
// std::normal_distribution, its output is pinned across standard library
// implementations, which the reproducibility guarantees rely on.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n).
    std::size_t below(std::size_t n) {
        // Rejection-free modulo is fine here: n is tiny versus 2^64.
        return static_cast<std::size_t>(next_u64() % n);
    }

    // Box-Muller; draws two uniforms per call, no cached spare.
    double normal(double mu = 0.0, double sigma = 1.0) {
        double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        return mu + sigma * r * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = below(i);
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::uint64_t state_;
};

template <typename Real>
bool all_finite(const std::vector<Real>& v) {
    for (Real x : v) {
        if (!std::isfinite(static_cast<double>(x))) return false;
    }
    return true;
}

}  // namespace ulab
