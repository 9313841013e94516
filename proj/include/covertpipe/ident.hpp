#pragma once

#include <cstdint>
#include <istream>
#include <optional>
#include <span>
#include <string>

#include "covertpipe/util.hpp"

namespace covertpipe::ident {

// Entropy input for name derivation: 8 bytes for host names, 16 for file slugs.
struct EntropySeed {
    Bytes bytes;

    static EntropySeed from_bytes(Bytes b);
    static EntropySeed random(std::size_t length);        // OS CSPRNG
    static EntropySeed from_rng(Rng& rng, std::size_t length);
};

// 26-character lowercase base32 file slug.
struct Slug {
    std::string text;
};

// 16-character service host label (the part before ".onion").
struct OnionId {
    std::string text;
};

// 32-character lowercase hex identifier, a pure function of content.
struct SwarmId {
    std::string hex;
};

// 15-digit decimal relay store key, first digit nonzero.
struct RelayKey {
    std::string digits;
};

bool is_valid_slug(std::string_view text);
bool is_valid_onion_id(std::string_view text);
bool is_valid_swarm_id(std::string_view hex);
bool is_valid_relay_key(std::string_view digits);
bool is_valid_short_token(std::string_view text);

// SHA-256 the seed, take the rightmost 16 characters of the lowercase hex
// digest, base32 those 16 ASCII bytes, lowercase, drop the '=' padding.
Slug derive_slug(const EntropySeed& seed);

// Lowercase base32 of the first 10 bytes (80 bits) of SHA-1 over the key.
OnionId derive_onion_id(std::span<const std::uint8_t> identity_key);

// First 32 lowercase hex characters of SHA3-256 over the content.
SwarmId derive_swarm_id(std::span<const std::uint8_t> content);
SwarmId derive_swarm_id(std::istream& content);

// onion scheme: "<host>.onion/<token>"; otherwise "<scheme>://<host>[:port]/<token>"
std::string compose_share_url(const std::string& host, const std::string& token,
                              const std::string& scheme,
                              std::optional<std::uint16_t> port = std::nullopt);

RelayKey generate_relay_key(Rng& rng);

// 5 characters from [a-z0-9]
std::string generate_short_token(Rng& rng);

}  // namespace covertpipe::ident
