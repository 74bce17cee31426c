#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cedual {

// Error taxonomy. Everything user-facing derives from Error so the CLI can
// map categories onto exit codes.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DimensionError : Error {
    using Error::Error;
};
struct ContractError : Error {
    using Error::Error;
};
struct DomainError : Error {
    using Error::Error;
};
struct FormatError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct DivergenceError : Error {
    using Error::Error;
};

using Shape = std::vector<std::int64_t>;

// Reserved vocabulary slots, stable across every corpus and checkpoint.
namespace special_ids {
inline constexpr std::int64_t kPad = 0;
inline constexpr std::int64_t kUnk = 1;
inline constexpr std::int64_t kSos = 2;
inline constexpr std::int64_t kEos = 3;
inline constexpr std::int64_t kSepSpeaker = 4;
inline constexpr std::int64_t kSepListener = 5;
inline constexpr std::int64_t kCount = 6;
}  // namespace special_ids

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << "x";
        os << s[i];
    }
    os << "]";
    return os.str();
}

// Deterministic RNG. mt19937_64 has a standard-specified output sequence;
// the distributions below are hand-rolled so results do not depend on the
// C++ runtime's <random> distribution implementations.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller with a cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        if (u1 < 0x1.0p-53) u1 = 0x1.0p-53;
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    // [0, n)
    std::int64_t uniform_int(std::int64_t n) {
        if (n <= 0) throw DomainError("Rng::uniform_int: n must be positive");
        const std::uint64_t un = static_cast<std::uint64_t>(n);
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        std::uint64_t r = next_u64();
        while (r >= limit) r = next_u64();
        return static_cast<std::int64_t>(r % un);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::int64_t i = static_cast<std::int64_t>(v.size()) - 1; i > 0; --i) {
            const std::int64_t j = uniform_int(i + 1);
            std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
        }
    }

  private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Row-major boolean matrix; true = allowed / kept.
struct BoolMatrix {
    std::int64_t rows = 0;
    std::int64_t cols = 0;
    std::vector<std::uint8_t> v;

    BoolMatrix() = default;
    BoolMatrix(std::int64_t r, std::int64_t c, bool fill = false)
        : rows(r), cols(c), v(static_cast<std::size_t>(r * c), fill ? 1 : 0) {}

    bool at(std::int64_t r, std::int64_t c) const {
        return v[static_cast<std::size_t>(r * cols + c)] != 0;
    }
    void set(std::int64_t r, std::int64_t c, bool b) {
        v[static_cast<std::size_t>(r * cols + c)] = b ? 1 : 0;
    }
};

}  // namespace cedual
