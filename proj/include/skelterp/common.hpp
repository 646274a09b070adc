/*
 * skelterp - 3D skeleton recovery from 2D keypoint heatmaps.
 *
 * File: include/skelterp/common.hpp
 *
 * Copyright 2026 The skelterp Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#ifndef SKELTERP_COMMON_HPP
#define SKELTERP_COMMON_HPP

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <exception>
#include <functional>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <type_traits>
#include <vector>

#if defined(__SSE__)
#include <xmmintrin.h>
#endif

namespace skelterp {

inline constexpr const char* kVersion = "0.3.0";

/// Invalid argument: wrong dimensions, non-finite values, violated preconditions.
class ArgumentError : public std::invalid_argument
{
public:
    using std::invalid_argument::invalid_argument;
};

/// A point left the valid projection domain (depth at or below the epsilon).
class DomainError : public std::domain_error
{
public:
    DomainError(const std::string& what, int keypoint) : std::domain_error(what), keypoint_(keypoint) {}
    int keypoint() const noexcept { return keypoint_; }

private:
    int keypoint_;
};

/// Malformed documents or unusable sampling configurations.
class ConfigError : public std::runtime_error
{
public:
    using std::runtime_error::runtime_error;
};

/// Missing files and failed reads or writes.
class IoError : public std::runtime_error
{
public:
    using std::runtime_error::runtime_error;
};

/// Corrupt or truncated binary containers.
class IntegrityError : public IoError
{
public:
    using IoError::IoError;
};

/// Training produced a non-finite loss.
class TrainingError : public std::runtime_error
{
public:
    TrainingError(const std::string& what, long step) : std::runtime_error(what), step_(step) {}
    long step() const noexcept { return step_; }

private:
    long step_;
};

/// Raised when too few keypoints are visible to constrain a fit.
class UnderdeterminedError : public std::runtime_error
{
public:
    using std::runtime_error::runtime_error;
};

/// Degenerate input to a metric (for example a shape with zero extent).
class MetricError : public std::runtime_error
{
public:
    using std::runtime_error::runtime_error;
};

struct Interval
{
    double lo = 0.0;
    double hi = 0.0;

    bool contains(double v) const { return v >= lo && v <= hi; }
    bool valid() const { return std::isfinite(lo) && std::isfinite(hi) && lo <= hi; }
    double mid() const { return 0.5 * (lo + hi); }
    friend bool operator==(const Interval&, const Interval&) = default;
};

inline std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

/**
 * @brief Seeded random source with platform-independent draws.
 *
 * The standard distributions are implementation-defined, so uniform and normal
 * variates are derived here directly from the mt19937_64 bit stream.
 */
class Rng
{
public:
    explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

    /// Independent stream for item `index` of a run seeded with `seed`.
    static Rng stream(std::uint64_t seed, std::uint64_t index)
    {
        return Rng(splitmix64(seed) ^ splitmix64(index * 0xD1B54A32D192ED03ull + 0x8CB92BA72F3D8DD7ull));
    }

    std::uint64_t bits() { return engine_(); }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    double uniform(const Interval& iv) { return uniform(iv.lo, iv.hi); }

    /// Uniform integer in [0, n).
    std::size_t index(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }

    double normal()
    {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) {
            u1 = uniform();
        }
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <typename T>
    void shuffle(std::vector<T>& v)
    {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[index(i)]);
        }
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

/// 64-bit FNV-1a, used for container checksums and config hashes.
class Fnv1a
{
public:
    void update(const void* data, std::size_t size)
    {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < size; ++i) {
            hash_ ^= p[i];
            hash_ *= 0x100000001B3ull;
        }
    }
    void update(std::string_view s) { update(s.data(), s.size()); }
    std::uint64_t digest() const { return hash_; }

private:
    std::uint64_t hash_ = 0xCBF29CE484222325ull;
};

inline std::string to_hex(std::uint64_t v)
{
    static constexpr char digits[] = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[v & 0xF];
        v >>= 4;
    }
    return s;
}

inline std::uint64_t fnv1a(std::string_view s)
{
    Fnv1a h;
    h.update(s);
    return h.digest();
}

/// Little-endian byte sink for the binary containers.
class ByteWriter
{
public:
    template <typename T>
    void put(T value)
    {
        static_assert(std::is_arithmetic_v<T>);
        unsigned char buf[sizeof(T)];
        std::memcpy(buf, &value, sizeof(T));
        if constexpr (std::endian::native == std::endian::big) {
            std::reverse(buf, buf + sizeof(T));
        }
        bytes_.insert(bytes_.end(), buf, buf + sizeof(T));
    }

    const std::vector<unsigned char>& bytes() const { return bytes_; }
    std::vector<unsigned char>& bytes() { return bytes_; }

private:
    std::vector<unsigned char> bytes_;
};

class ByteReader
{
public:
    ByteReader(const unsigned char* data, std::size_t size) : data_(data), size_(size) {}

    template <typename T>
    T get()
    {
        static_assert(std::is_arithmetic_v<T>);
        if (pos_ + sizeof(T) > size_) {
            throw IntegrityError("unexpected end of binary body at byte " + std::to_string(pos_));
        }
        unsigned char buf[sizeof(T)];
        std::memcpy(buf, data_ + pos_, sizeof(T));
        if constexpr (std::endian::native == std::endian::big) {
            std::reverse(buf, buf + sizeof(T));
        }
        pos_ += sizeof(T);
        T value;
        std::memcpy(&value, buf, sizeof(T));
        return value;
    }

    std::size_t position() const { return pos_; }
    bool exhausted() const { return pos_ == size_; }

private:
    const unsigned char* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
};

/// Flush-to-zero and denormals-are-zero on the calling thread while alive; a no-op off x86.
class DenormalGuard
{
public:
#if defined(__SSE__)
    DenormalGuard() : saved_(_mm_getcsr()) { _mm_setcsr(saved_ | 0x8040u); }
    ~DenormalGuard() { _mm_setcsr(saved_); }
#else
    DenormalGuard() = default;
#endif
    DenormalGuard(const DenormalGuard&) = delete;
    DenormalGuard& operator=(const DenormalGuard&) = delete;

private:
#if defined(__SSE__)
    unsigned saved_;
#endif
};

/// Shortest decimal form that parses back to the same double.
inline std::string format_exact(double v)
{
    char buf[40];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

/**
 * Runs body(i) for i in [0, count) on up to `threads` workers using a static
 * contiguous partition. Callers must write results to slot i only.
 */
inline void parallel_for(std::size_t count, unsigned threads, const std::function<void(std::size_t)>& body)
{
    if (threads <= 1 || count < 2) {
        for (std::size_t i = 0; i < count; ++i) {
            body(i);
        }
        return;
    }
    const std::size_t workers = std::min<std::size_t>(threads, count);
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            const std::size_t begin = count * w / workers;
            const std::size_t end = count * (w + 1) / workers;
            try {
                for (std::size_t i = begin; i < end; ++i) {
                    body(i);
                }
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) {
        t.join();
    }
    for (auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
}

} // namespace skelterp

#endif // SKELTERP_COMMON_HPP
