#pragma once

// Shared utilities: error types, deterministic RNG streams, calendar dates,
// content hashing and small numeric helpers used across the library.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace graphfc {

// ---------------------------------------------------------------------------
// Errors. Thrown by library code; the CLI maps them onto exit codes.
// ---------------------------------------------------------------------------

// Bad or contradictory configuration value.
class ConfigError : public std::runtime_error {
  public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed or inconsistent input data (CSV, checkpoint, ...).
class DataError : public std::runtime_error {
  public:
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Violated internal invariant; indicates a bug, not a user mistake.
class InternalError : public std::runtime_error {
  public:
    explicit InternalError(const std::string& msg) : std::runtime_error(msg) {}
};

// ---------------------------------------------------------------------------
// Deterministic RNG.
//
// All stochastic steps draw from mt19937_64 streams derived from the run seed
// plus a purpose tag, and every distribution below is implemented explicitly
// so sequences are identical across standard libraries and platforms.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Folds an arbitrary list of integer salts into a fresh stream seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> salts) {
    std::uint64_t h = splitmix64(base);
    for (std::uint64_t s : salts) h = splitmix64(h ^ s);
    return h;
}

inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag,
                                 std::initializer_list<std::uint64_t> salts = {}) {
    std::uint64_t h = splitmix64(base ^ fnv1a64(tag));
    for (std::uint64_t s : salts) h = splitmix64(h ^ s);
    return h;
}

class Rng {
  public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // Unbiased integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw InternalError("Rng::below called with n == 0");
        const std::uint64_t threshold = (0 - n) % n;  // 2^64 mod n
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x < threshold);
        return x % n;
    }

    // Uniform double in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller (pair cached; deterministic sequence).
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * 3.141592653589793238462643 * u2;
        spare_ = radius * std::sin(angle);
        have_spare_ = true;
        return radius * std::cos(angle);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // k distinct indices from [0, n), ascending. Robert Floyd's algorithm:
    // O(k) draws, no O(n) scratch.
    std::vector<std::uint32_t> sample_without_replacement(std::uint64_t n, std::uint64_t k) {
        if (k > n) throw InternalError("sample_without_replacement: k > n");
        std::vector<std::uint32_t> chosen;
        chosen.reserve(k);
        for (std::uint64_t j = n - k; j < n; ++j) {
            const std::uint64_t t = below(j + 1);
            const auto candidate = static_cast<std::uint32_t>(t);
            if (std::find(chosen.begin(), chosen.end(), candidate) != chosen.end()) {
                chosen.push_back(static_cast<std::uint32_t>(j));
            } else {
                chosen.push_back(candidate);
            }
        }
        std::sort(chosen.begin(), chosen.end());
        return chosen;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

  private:
    std::mt19937_64 eng_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Calendar dates. Stored as days since 1970-01-01; parsed/printed as ISO.
// ---------------------------------------------------------------------------

using DateDays = std::int32_t;

inline DateDays make_date(int year, unsigned month, unsigned day) {
    using namespace std::chrono;
    year_month_day ymd{std::chrono::year{year}, std::chrono::month{month}, std::chrono::day{day}};
    if (!ymd.ok()) {
        throw DataError("invalid calendar date: " + std::to_string(year) + "-" +
                        std::to_string(month) + "-" + std::to_string(day));
    }
    return static_cast<DateDays>(sys_days{ymd}.time_since_epoch().count());
}

inline DateDays parse_iso_date(std::string_view s) {
    // Strict YYYY-MM-DD.
    if (s.size() != 10 || s[4] != '-' || s[7] != '-') {
        throw DataError("date not in YYYY-MM-DD form: '" + std::string(s) + "'");
    }
    auto digits = [&](std::size_t pos, std::size_t len) -> int {
        int v = 0;
        for (std::size_t i = pos; i < pos + len; ++i) {
            if (s[i] < '0' || s[i] > '9') {
                throw DataError("date not in YYYY-MM-DD form: '" + std::string(s) + "'");
            }
            v = v * 10 + (s[i] - '0');
        }
        return v;
    };
    return make_date(digits(0, 4), static_cast<unsigned>(digits(5, 2)),
                     static_cast<unsigned>(digits(8, 2)));
}

inline std::string format_iso_date(DateDays days) {
    using namespace std::chrono;
    year_month_day ymd{sys_days{std::chrono::days{days}}};
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d-%02u-%02u", static_cast<int>(ymd.year()),
                  static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()));
    return buf;
}

// ---------------------------------------------------------------------------
// Misc numeric / formatting helpers.
// ---------------------------------------------------------------------------

// Round half away from zero for nonnegative x ("round half up" on counts).
inline std::int64_t round_half_up(double x) {
    return static_cast<std::int64_t>(std::floor(x + 0.5));
}

inline double sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// Numerically stable log(sigmoid(x)).
inline double log_sigmoid(double x) {
    if (x >= 0.0) return -std::log1p(std::exp(-x));
    return x - std::log1p(std::exp(x));
}

// Shortest decimal string that round-trips a double exactly via strtod.
inline std::string format_double_exact(double v) {
    char buf[64];
    // Integral values in the exactly-representable range print as plain integers.
    if (std::isfinite(v) && v == std::floor(v) && std::fabs(v) < 1e15) {
        std::snprintf(buf, sizeof(buf), "%.0f", v);
        return buf;
    }
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    // Prefer a shorter representation when it round-trips.
    for (int prec = 1; prec < 17; ++prec) {
        char shorter[64];
        std::snprintf(shorter, sizeof(shorter), "%.*g", prec, v);
        if (std::strtod(shorter, nullptr) == v) return shorter;
    }
    return buf;
}

inline std::string to_hex(std::uint64_t v) {
    char buf[24];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

// Content digest of a byte string (used in run manifests).
inline std::string content_digest(std::string_view bytes) {
    return to_hex(fnv1a64(bytes));
}

inline std::string file_digest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open file for hashing: " + path);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[65536];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        h = fnv1a64(std::string_view(buf, static_cast<std::size_t>(in.gcount())), h);
        if (!in) break;
    }
    return to_hex(h);
}

// Ordinary least squares R^2 of y against x (used by scaling diagnostics).
inline double linear_fit_r2(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) {
        throw InternalError("linear_fit_r2 needs >= 2 paired points");
    }
    const double n = static_cast<double>(x.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sx += x[i];
        sy += y[i];
        sxx += x[i] * x[i];
        sxy += x[i] * y[i];
    }
    const double beta = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    const double alpha = (sy - beta * sx) / n;
    double ss_res = 0, ss_tot = 0;
    const double mean_y = sy / n;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double fit = alpha + beta * x[i];
        ss_res += (y[i] - fit) * (y[i] - fit);
        ss_tot += (y[i] - mean_y) * (y[i] - mean_y);
    }
    if (ss_tot == 0.0) return 1.0;
    return 1.0 - ss_res / ss_tot;
}

}  // namespace graphfc
