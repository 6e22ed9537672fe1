#pragma once

#include <bit>
#include <concepts>
#include <cstdint>
#include <random>
#include <string_view>

namespace jdp {

using Rng = std::mt19937_64;

/// splitmix64 finalizer; used to derive independent sub-seeds.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t hash_combine(std::uint64_t seed, std::uint64_t value) noexcept
{
    return mix64(seed ^ mix64(value));
}

template <std::integral T>
std::uint64_t hash_combine(std::uint64_t seed, T value) noexcept
{
    return hash_combine(seed, static_cast<std::uint64_t>(value));
}

inline std::uint64_t hash_combine(std::uint64_t seed, double value) noexcept
{
    return hash_combine(seed, std::bit_cast<std::uint64_t>(value));
}

inline std::uint64_t hash_combine(std::uint64_t seed, std::string_view s) noexcept
{
    // FNV-1a over the bytes, then mixed in.
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return hash_combine(seed, h);
}

template <class... Rest>
std::uint64_t derive_seed(std::uint64_t seed, Rest... rest) noexcept
{
    ((seed = hash_combine(seed, rest)), ...);
    return seed;
}

} // namespace jdp
