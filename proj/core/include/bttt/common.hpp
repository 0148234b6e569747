#pragma once

#include <cstdint>
#include <cmath>
#include <string>
#include <vector>

namespace bttt {

/// Deterministic PRNG used everywhere randomness is needed.
///
/// splitmix64 core with explicit double mapping, so that identical seeds
/// produce identical streams on every platform and standard library. The
/// standard <random> distributions are implementation-defined and would
/// break byte-identical rerun guarantees.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller (no cached spare, keeps the stream simple).
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    double normal(double mean, double sigma) { return mean + sigma * normal(); }

    /// Uniform integer in [0, n). n must be > 0.
    std::uint64_t below(std::uint64_t n) {
        // multiply-shift; bias is negligible for the n used here (< 2^32)
        return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    /// Derive an independent child stream, e.g. one per cell or per sample.
    [[nodiscard]] Rng fork(std::uint64_t salt) {
        std::uint64_t s = next_u64();
        return Rng(s ^ (salt * 0x9e3779b97f4a7c15ULL + 0xd1b54a32d192ed03ULL));
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::uint64_t state_;
};

enum class LogLevel { Error = 0, Warn = 1, Info = 2, Debug = 3 };

/// Log level parsed once from BATTERYTTT_LOG (error|warn|info|debug). Default warn.
LogLevel log_level();
void log_message(LogLevel level, const std::string& msg);

inline void log_info(const std::string& msg) { log_message(LogLevel::Info, msg); }
inline void log_warn(const std::string& msg) { log_message(LogLevel::Warn, msg); }
inline void log_debug(const std::string& msg) { log_message(LogLevel::Debug, msg); }
inline void log_error(const std::string& msg) { log_message(LogLevel::Error, msg); }

/// Shortest lossless decimal rendering of a double (round-trips exactly).
std::string format_double(double v);

/// Parse a double; throws std::runtime_error mentioning `context` on failure.
double parse_double(const std::string& s, const std::string& context);

}  // namespace bttt
