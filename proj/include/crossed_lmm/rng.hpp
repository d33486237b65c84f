#pragma once

// Counter-addressed random streams. A stream is named by a root seed, a tag
// and a list of integer coordinates (replication, user, day, ...), so any
// stream can be regenerated independently of the order in which others were
// consumed.

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace crossed_lmm::rng {

using Engine = std::mt19937_64;

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline constexpr std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline constexpr std::uint64_t derive(std::uint64_t seed, std::string_view tag,
                                      std::initializer_list<std::uint64_t> coords = {}) {
    std::uint64_t h = splitmix64(seed ^ splitmix64(fnv1a(tag)));
    for (std::uint64_t c : coords) h = splitmix64(h ^ splitmix64(c + 0x632be59bd9b4e019ULL));
    return h;
}

inline Engine stream(std::uint64_t seed, std::string_view tag, std::initializer_list<std::uint64_t> coords = {}) {
    const std::uint64_t h = derive(seed, tag, coords);
    std::seed_seq seq{static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
    return Engine(seq);
}

}  // namespace crossed_lmm::rng
