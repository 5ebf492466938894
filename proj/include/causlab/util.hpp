#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace causlab {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// A model needs f(A|C) > 0 wherever data (or the experimental measure) puts mass.
class PositivityError : public Error {
  public:
    using Error::Error;
};

/// An iterative solver stopped without meeting its tolerance.
class ConvergenceError : public Error {
  public:
    ConvergenceError(const std::string &what, double final_norm)
        : Error(what), final_norm_(final_norm) {}
    double final_norm() const noexcept { return final_norm_; }

  private:
    double final_norm_;
};

namespace detail {

/// Shortest text for a double that reads back to the same value, at most 17 digits.
inline std::string format_double(double v, int precision = 17) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, precision);
    return {buf, res.ptr};
}

/// Round-trip text for CSV output: the shortest representation that parses back exactly.
inline std::string format_shortest(double v) {
    if (std::isnan(v)) return "NA";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return {buf, res.ptr};
}

/// FNV-1a, 64 bit.
inline std::uint64_t fnv1a(std::string_view text) noexcept {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xF];
        v >>= 4;
    }
    return out;
}

/// Runs body(begin, end) over contiguous chunks of [0, n). Chunks are fixed by
/// `workers` alone; bodies must write only to their own index range.
template <class Body>
void parallel_for(std::size_t n, int workers, Body &&body) {
    const std::size_t k = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(workers, 1)), 1,
                                                  std::max<std::size_t>(n, 1));
    if (k == 1) {
        body(std::size_t{0}, n);
        return;
    }
    std::vector<std::thread> threads;
    threads.reserve(k);
    // One slot per chunk so the reported failure is the lowest-indexed one.
    std::vector<std::exception_ptr> failures(k);
    for (std::size_t w = 0; w < k; ++w) {
        const std::size_t begin = n * w / k;
        const std::size_t end = n * (w + 1) / k;
        threads.emplace_back([&, w, begin, end] {
            try {
                body(begin, end);
            } catch (...) {
                failures[w] = std::current_exception();
            }
        });
    }
    for (auto &t : threads) t.join();
    for (auto &f : failures)
        if (f) std::rethrow_exception(f);
}

inline double logistic(double x) noexcept {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

} // namespace detail
} // namespace causlab
