#include "covertpipe/util.hpp"

#include <openssl/evp.h>
#include <openssl/hmac.h>
#include <openssl/rand.h>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstring>

namespace covertpipe {

const char* errc_name(Errc c) {
    switch (c) {
        case Errc::invalid_argument: return "invalid_argument";
        case Errc::io: return "io";
        case Errc::capacity: return "capacity";
        case Errc::conflict: return "conflict";
        case Errc::path_failure: return "path_failure";
        case Errc::handshake_failure: return "handshake_failure";
        case Errc::authentication: return "authentication";
        case Errc::replay: return "replay";
        case Errc::verification: return "verification";
        case Errc::invalid_token: return "invalid_token";
        case Errc::scenario: return "scenario";
        case Errc::ingest: return "ingest";
        case Errc::correlation: return "correlation";
        case Errc::not_found: return "not_found";
        case Errc::integrity: return "integrity";
        case Errc::insufficient_relays: return "insufficient_relays";
        case Errc::introduction_failure: return "introduction_failure";
        case Errc::config: return "config";
        case Errc::network: return "network";
    }
    return "unknown";
}

// --- encoding ---

static constexpr char kHexDigits[] = "0123456789abcdef";

std::string hex_encode(std::span<const std::uint8_t> data) {
    std::string out;
    out.reserve(data.size() * 2);
    for (std::uint8_t b : data) {
        out.push_back(kHexDigits[b >> 4]);
        out.push_back(kHexDigits[b & 0x0f]);
    }
    return out;
}

static int hex_nibble(char c) {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    return -1;
}

Bytes hex_decode(std::string_view hex) {
    if (hex.size() % 2 != 0) throw Error(Errc::invalid_argument, "odd hex length");
    Bytes out(hex.size() / 2);
    for (std::size_t i = 0; i < out.size(); ++i) {
        int hi = hex_nibble(hex[2 * i]);
        int lo = hex_nibble(hex[2 * i + 1]);
        if (hi < 0 || lo < 0) throw Error(Errc::invalid_argument, "bad hex digit");
        out[i] = static_cast<std::uint8_t>(hi << 4 | lo);
    }
    return out;
}

static constexpr char kBase32Alphabet[] = "abcdefghijklmnopqrstuvwxyz234567";

std::string base32_encode_lower(std::span<const std::uint8_t> data, bool strip_padding) {
    std::string out;
    out.reserve((data.size() + 4) / 5 * 8);
    std::size_t i = 0;
    while (i < data.size()) {
        std::uint64_t group = 0;
        std::size_t n = std::min<std::size_t>(5, data.size() - i);
        for (std::size_t j = 0; j < 5; ++j) {
            group <<= 8;
            if (j < n) group |= data[i + j];
        }
        // ceil(n * 8 / 5) output characters carry data, the rest is padding
        std::size_t chars = (n * 8 + 4) / 5;
        for (std::size_t j = 0; j < 8; ++j) {
            if (j < chars)
                out.push_back(kBase32Alphabet[(group >> (35 - 5 * j)) & 0x1f]);
            else if (!strip_padding)
                out.push_back('=');
        }
        i += n;
    }
    return out;
}

static constexpr char kBase64Alphabet[] =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::string base64_encode(std::span<const std::uint8_t> data) {
    std::string out;
    out.reserve((data.size() + 2) / 3 * 4);
    std::size_t i = 0;
    for (; i + 2 < data.size(); i += 3) {
        std::uint32_t v = data[i] << 16 | data[i + 1] << 8 | data[i + 2];
        out.push_back(kBase64Alphabet[v >> 18]);
        out.push_back(kBase64Alphabet[(v >> 12) & 0x3f]);
        out.push_back(kBase64Alphabet[(v >> 6) & 0x3f]);
        out.push_back(kBase64Alphabet[v & 0x3f]);
    }
    if (i + 1 == data.size()) {
        std::uint32_t v = data[i] << 16;
        out.push_back(kBase64Alphabet[v >> 18]);
        out.push_back(kBase64Alphabet[(v >> 12) & 0x3f]);
        out.append("==");
    } else if (i + 2 == data.size()) {
        std::uint32_t v = data[i] << 16 | data[i + 1] << 8;
        out.push_back(kBase64Alphabet[v >> 18]);
        out.push_back(kBase64Alphabet[(v >> 12) & 0x3f]);
        out.push_back(kBase64Alphabet[(v >> 6) & 0x3f]);
        out.push_back('=');
    }
    return out;
}

static int base64_value(char c) {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
}

Bytes base64_decode(std::string_view text) {
    while (!text.empty() && text.back() == '=') text.remove_suffix(1);
    Bytes out;
    out.reserve(text.size() * 3 / 4);
    std::uint32_t acc = 0;
    int bits = 0;
    for (char c : text) {
        int v = base64_value(c);
        if (v < 0) throw Error(Errc::invalid_argument, "bad base64 character");
        acc = acc << 6 | static_cast<std::uint32_t>(v);
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out.push_back(static_cast<std::uint8_t>(acc >> bits));
        }
    }
    return out;
}

// --- digests ---

static void evp_digest(const EVP_MD* md, std::span<const std::uint8_t> data, std::uint8_t* out,
                       unsigned expect_len) {
    unsigned len = 0;
    if (EVP_Digest(data.data(), data.size(), out, &len, md, nullptr) != 1 || len != expect_len)
        throw Error(Errc::io, "digest failure");
}

std::array<std::uint8_t, 20> sha1(std::span<const std::uint8_t> data) {
    std::array<std::uint8_t, 20> out{};
    evp_digest(EVP_sha1(), data, out.data(), 20);
    return out;
}

Digest32 sha256(std::span<const std::uint8_t> data) {
    Digest32 out{};
    evp_digest(EVP_sha256(), data, out.data(), 32);
    return out;
}

Digest32 sha3_256(std::span<const std::uint8_t> data) {
    Digest32 out{};
    evp_digest(EVP_sha3_256(), data, out.data(), 32);
    return out;
}

Digest32 hmac_sha256(std::span<const std::uint8_t> key, std::span<const std::uint8_t> data) {
    Digest32 out{};
    unsigned len = 0;
    if (!HMAC(EVP_sha256(), key.data(), static_cast<int>(key.size()), data.data(), data.size(),
              out.data(), &len) ||
        len != 32)
        throw Error(Errc::io, "hmac failure");
    return out;
}

StreamingDigest::StreamingDigest(Algo algo) {
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (!ctx) throw Error(Errc::io, "digest ctx alloc");
    const EVP_MD* md = algo == Algo::sha256 ? EVP_sha256() : EVP_sha3_256();
    if (EVP_DigestInit_ex(ctx, md, nullptr) != 1) {
        EVP_MD_CTX_free(ctx);
        throw Error(Errc::io, "digest init");
    }
    ctx_ = ctx;
}

StreamingDigest::~StreamingDigest() {
    if (ctx_) EVP_MD_CTX_free(static_cast<EVP_MD_CTX*>(ctx_));
}

void StreamingDigest::update(std::span<const std::uint8_t> data) {
    if (EVP_DigestUpdate(static_cast<EVP_MD_CTX*>(ctx_), data.data(), data.size()) != 1)
        throw Error(Errc::io, "digest update");
}

Digest32 StreamingDigest::finish() {
    Digest32 out{};
    unsigned len = 0;
    if (EVP_DigestFinal_ex(static_cast<EVP_MD_CTX*>(ctx_), out.data(), &len) != 1 || len != 32)
        throw Error(Errc::io, "digest final");
    return out;
}

void os_random_bytes(std::span<std::uint8_t> out) {
    if (!out.empty() && RAND_bytes(out.data(), static_cast<int>(out.size())) != 1)
        throw Error(Errc::io, "RAND_bytes failure");
}

Rng Rng::from_entropy() {
    std::uint8_t seed[8];
    os_random_bytes(seed);
    std::uint64_t v = 0;
    std::memcpy(&v, seed, sizeof v);
    return Rng(v);
}

std::uint64_t Rng::below(std::uint64_t n) {
    if (n == 0) throw Error(Errc::invalid_argument, "below(0)");
    // rejection sampling keeps the draw unbiased
    std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t v;
    do {
        v = engine_();
    } while (v >= limit);
    return v % n;
}

void Rng::fill(std::span<std::uint8_t> out) {
    std::size_t i = 0;
    while (i < out.size()) {
        std::uint64_t v = engine_();
        for (int j = 0; j < 8 && i < out.size(); ++j, ++i) {
            out[i] = static_cast<std::uint8_t>(v & 0xff);
            v >>= 8;
        }
    }
}

Bytes random_bytes(std::size_t n, std::uint64_t seed) {
    Bytes out(n);
    Rng rng(seed);
    rng.fill(out);
    return out;
}

std::string to_lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

std::pair<std::string, std::uint16_t> parse_host_port(const std::string& s) {
    auto pos = s.rfind(':');
    if (pos == std::string::npos || pos == 0 || pos + 1 == s.size())
        throw Error(Errc::invalid_argument, "expected host:port, got '" + s + "'");
    std::string host = s.substr(0, pos);
    std::uint32_t port = 0;
    auto first = s.data() + pos + 1;
    auto last = s.data() + s.size();
    auto [p, ec] = std::from_chars(first, last, port);
    if (ec != std::errc() || p != last || port == 0 || port > 65535)
        throw Error(Errc::invalid_argument, "bad port in '" + s + "'");
    return {host, static_cast<std::uint16_t>(port)};
}

}  // namespace covertpipe
