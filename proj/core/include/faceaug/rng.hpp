#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace faceaug {

// Deterministic random source. All sampling goes through explicit methods
// (no std::*_distribution state) so that identical seeds reproduce identical
// streams across runs and so engine state can be checkpointed as text.
class Rng {
public:
    explicit Rng(uint64_t seed);

    uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1).
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). n must be > 0.
    int uniform_int(int n);

    // Standard normal via Box-Muller (cosine branch only, no cached spare).
    double normal();
    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    float normal_f() { return static_cast<float>(normal()); }

    // Fisher-Yates with this engine; std::shuffle is implementation-defined.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
            int j = uniform_int(i + 1);
            std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
        }
    }

    // Independent child stream. Forking is a pure function of the original
    // seed and the stream id, not of how much the parent has been consumed.
    Rng fork(uint64_t stream) const;

    uint64_t seed() const { return seed_; }

    std::string save_state() const;
    void load_state(const std::string& text);

private:
    uint64_t seed_ = 0;
    std::mt19937_64 engine_;
};

// SplitMix64 step. Used for seed derivation and config hashing.
uint64_t splitmix64(uint64_t& state);

// FNV-1a over a byte string.
uint64_t fnv1a(const std::string& bytes);

}  // namespace faceaug
