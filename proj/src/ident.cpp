#include "covertpipe/ident.hpp"

#include <algorithm>

namespace covertpipe::ident {

EntropySeed EntropySeed::from_bytes(Bytes b) {
    if (b.size() != 8 && b.size() != 16)
        throw Error(Errc::invalid_argument,
                    "entropy seed must be 8 or 16 bytes, got " + std::to_string(b.size()));
    return EntropySeed{std::move(b)};
}

EntropySeed EntropySeed::random(std::size_t length) {
    Bytes b(length);
    os_random_bytes(b);
    return from_bytes(std::move(b));
}

EntropySeed EntropySeed::from_rng(Rng& rng, std::size_t length) {
    Bytes b(length);
    rng.fill(b);
    return from_bytes(std::move(b));
}

static bool all_in(std::string_view text, bool (*ok)(char)) {
    return std::all_of(text.begin(), text.end(), ok);
}

static bool is_base32_lower(char c) { return (c >= 'a' && c <= 'z') || (c >= '2' && c <= '7'); }
static bool is_hex_lower(char c) { return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'f'); }
static bool is_digit(char c) { return c >= '0' && c <= '9'; }
static bool is_token_char(char c) { return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9'); }

bool is_valid_slug(std::string_view text) {
    return text.size() == 26 && all_in(text, is_base32_lower);
}

bool is_valid_onion_id(std::string_view text) {
    return text.size() == 16 && all_in(text, is_base32_lower);
}

bool is_valid_swarm_id(std::string_view hex) {
    return hex.size() == 32 && all_in(hex, is_hex_lower);
}

bool is_valid_relay_key(std::string_view digits) {
    return digits.size() == 15 && digits[0] != '0' && all_in(digits, is_digit);
}

bool is_valid_short_token(std::string_view text) {
    return text.size() == 5 && all_in(text, is_token_char);
}

Slug derive_slug(const EntropySeed& seed) {
    if (seed.bytes.size() != 16)
        throw Error(Errc::invalid_argument, "slug derivation needs a 16-byte seed");
    std::string hex = hex_encode(sha256(seed.bytes));
    std::string right16 = hex.substr(hex.size() - 16);
    // the hex characters themselves are the base32 input
    std::span<const std::uint8_t> ascii(reinterpret_cast<const std::uint8_t*>(right16.data()),
                                        right16.size());
    return Slug{base32_encode_lower(ascii, /*strip_padding=*/true)};
}

OnionId derive_onion_id(std::span<const std::uint8_t> identity_key) {
    if (identity_key.empty()) throw Error(Errc::invalid_argument, "empty identity key");
    auto digest = sha1(identity_key);
    return OnionId{base32_encode_lower(std::span(digest).first(10), /*strip_padding=*/true)};
}

SwarmId derive_swarm_id(std::span<const std::uint8_t> content) {
    return SwarmId{hex_encode(sha3_256(content)).substr(0, 32)};
}

SwarmId derive_swarm_id(std::istream& content) {
    StreamingDigest digest(StreamingDigest::Algo::sha3_256);
    char buf[65536];
    while (content.good()) {
        content.read(buf, sizeof buf);
        std::streamsize n = content.gcount();
        if (n > 0)
            digest.update(std::span(reinterpret_cast<const std::uint8_t*>(buf),
                                    static_cast<std::size_t>(n)));
    }
    if (content.bad()) throw Error(Errc::io, "content stream read failure");
    return SwarmId{hex_encode(digest.finish()).substr(0, 32)};
}

std::string compose_share_url(const std::string& host, const std::string& token,
                              const std::string& scheme, std::optional<std::uint16_t> port) {
    if (host.empty()) throw Error(Errc::invalid_argument, "empty host");
    if (token.empty()) throw Error(Errc::invalid_argument, "empty token");
    if (scheme == "onion") return host + ".onion/" + token;
    std::string url = scheme + "://" + host;
    if (port) url += ":" + std::to_string(*port);
    return url + "/" + token;
}

RelayKey generate_relay_key(Rng& rng) {
    std::string digits;
    digits.reserve(15);
    digits.push_back(static_cast<char>('1' + rng.below(9)));
    for (int i = 1; i < 15; ++i) digits.push_back(static_cast<char>('0' + rng.below(10)));
    return RelayKey{std::move(digits)};
}

std::string generate_short_token(Rng& rng) {
    static constexpr char kAlphabet[] = "abcdefghijklmnopqrstuvwxyz0123456789";
    std::string token;
    token.reserve(5);
    for (int i = 0; i < 5; ++i) token.push_back(kAlphabet[rng.below(36)]);
    return token;
}

}  // namespace covertpipe::ident
