#include "faceaug/rng.hpp"

#include <cmath>
#include <sstream>

#include "faceaug/errors.hpp"

namespace faceaug {

uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

uint64_t fnv1a(const std::string& bytes) {
    uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001B3ull;
    }
    return h;
}

Rng::Rng(uint64_t seed) : seed_(seed) {
    uint64_t s = seed;
    engine_.seed(splitmix64(s));
}

double Rng::uniform() {
    // 53 random bits -> [0,1)
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

int Rng::uniform_int(int n) {
    if (n <= 0) throw ConfigError("uniform_int: n must be positive");
    // Rejection sampling for an unbiased draw.
    uint64_t un = static_cast<uint64_t>(n);
    uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t x;
    do {
        x = engine_();
    } while (x >= limit);
    return static_cast<int>(x % un);
}

double Rng::normal() {
    double u1 = uniform();
    double u2 = uniform();
    // avoid log(0)
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

Rng Rng::fork(uint64_t stream) const {
    uint64_t s = seed_ ^ (0xD1B54A32D192ED03ull * (stream + 1));
    return Rng(splitmix64(s));
}

std::string Rng::save_state() const {
    std::ostringstream os;
    os << seed_ << " " << engine_;
    return os.str();
}

void Rng::load_state(const std::string& text) {
    std::istringstream is(text);
    is >> seed_ >> engine_;
    if (is.fail()) throw IoError("Rng::load_state: malformed state string");
}

}  // namespace faceaug
