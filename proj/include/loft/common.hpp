#pragma once

#include <cstdint>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace loft {

inline constexpr std::string_view kToolVersion = "0.1.0";

// Raised when training math degenerates (non-finite loss or gradient); the
// CLI maps it to its own exit code, distinct from input errors.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// FNV-1a 64-bit. Used for input fingerprints and the adapter/base pairing
// check; not a cryptographic hash.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(std::string_view s) { return fnv1a64(s.data(), s.size()); }

inline std::string to_hex(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline uint64_t file_fingerprint(const std::string& path) {
    const std::string bytes = read_file(path);
    return fnv1a64(bytes.data(), bytes.size());
}

// Deterministic RNG. mt19937_64 output is pinned by the standard; the
// distribution helpers below are hand-rolled because std:: distributions
// are implementation-defined.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // Uniform in [0, n). Rejection sampling keeps it unbiased.
    uint64_t next_below(uint64_t n) {
        if (n == 0) throw std::invalid_argument("next_below(0)");
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v;
        do {
            v = gen_();
        } while (v >= limit);
        return v % n;
    }

    // Uniform in [0, 1).
    double next_double() { return (gen_() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller (one value per call; cached pair).
    double next_normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do {
            u1 = next_double();
        } while (u1 <= 0.0);
        u2 = next_double();
        const double mag = std::sqrt(-2.0 * std::log(u1));
        spare_ = mag * std::sin(2.0 * M_PI * u2);
        has_spare_ = true;
        return mag * std::cos(2.0 * M_PI * u2);
    }

    // Derive an independent stream, e.g. per epoch or per subsystem.
    static uint64_t derive(uint64_t seed, uint64_t salt) {
        uint64_t h = fnv1a64(&seed, sizeof seed);
        h = fnv1a64(&salt, sizeof salt, h);
        return h;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(next_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

inline std::string trim(std::string_view s) {
    size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

// Trim plus collapse of internal whitespace runs to a single space.
inline std::string normalize_whitespace(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    bool in_ws = true;  // leading whitespace is dropped
    for (char c : s) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            in_ws = true;
        } else {
            if (in_ws && !out.empty()) out.push_back(' ');
            in_ws = false;
            out.push_back(c);
        }
    }
    return out;
}

// Count of Unicode code points (non-continuation bytes) in a UTF-8 string.
inline size_t utf8_length(std::string_view s) {
    size_t n = 0;
    for (unsigned char c : s)
        if ((c & 0xC0) != 0x80) ++n;
    return n;
}

inline void write_file_atomic(const std::string& path, std::string_view content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write file: " + tmp);
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!out) throw std::runtime_error("write failed: " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace loft
