#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace covertpipe {

using Bytes = std::vector<std::uint8_t>;
using Digest32 = std::array<std::uint8_t, 32>;

enum class Errc {
    invalid_argument,
    io,
    capacity,
    conflict,
    path_failure,
    handshake_failure,
    authentication,
    replay,
    verification,
    invalid_token,
    scenario,
    ingest,
    correlation,
    not_found,
    integrity,
    insufficient_relays,
    introduction_failure,
    config,
    network,
};

class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
    Errc code() const { return code_; }

private:
    Errc code_;
};

const char* errc_name(Errc c);

// --- encoding ---

std::string hex_encode(std::span<const std::uint8_t> data);  // lowercase
Bytes hex_decode(std::string_view hex);

// RFC 4648 base32, lowercase alphabet [a-z2-7]. strip_padding removes trailing '='.
std::string base32_encode_lower(std::span<const std::uint8_t> data, bool strip_padding);

std::string base64_encode(std::span<const std::uint8_t> data);
Bytes base64_decode(std::string_view text);  // throws Errc::invalid_argument

// --- digests (OpenSSL-backed) ---

std::array<std::uint8_t, 20> sha1(std::span<const std::uint8_t> data);
Digest32 sha256(std::span<const std::uint8_t> data);
Digest32 sha3_256(std::span<const std::uint8_t> data);
Digest32 hmac_sha256(std::span<const std::uint8_t> key, std::span<const std::uint8_t> data);

// Incremental digest for streamed content.
class StreamingDigest {
public:
    enum class Algo { sha256, sha3_256 };
    explicit StreamingDigest(Algo algo);
    ~StreamingDigest();
    StreamingDigest(const StreamingDigest&) = delete;
    StreamingDigest& operator=(const StreamingDigest&) = delete;
    void update(std::span<const std::uint8_t> data);
    Digest32 finish();

private:
    void* ctx_;
};

// OS entropy via the crypto library's CSPRNG.
void os_random_bytes(std::span<std::uint8_t> out);

// Deterministic RNG used everywhere randomness is injectable. All helpers
// derive from the raw mt19937_64 stream so output is identical across
// platforms (std:: distributions are not portable).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    static Rng from_entropy();

    std::uint64_t next_u64() { return engine_(); }

    // uniform in [0, n); n > 0
    std::uint64_t below(std::uint64_t n);

    // uniform double in [0, 1) with 53 bits
    double canonical() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    void fill(std::span<std::uint8_t> out);

    template <typename T>
    const T& pick(const std::vector<T>& pool) {
        if (pool.empty()) throw Error(Errc::invalid_argument, "pick from empty pool");
        return pool[below(pool.size())];
    }

private:
    std::mt19937_64 engine_;
};

// Deterministic pseudo-content for scenarios and tests.
Bytes random_bytes(std::size_t n, std::uint64_t seed);

std::string to_lower(std::string s);

// Split "host:port"; throws Errc::invalid_argument on malformed input.
std::pair<std::string, std::uint16_t> parse_host_port(const std::string& s);

}  // namespace covertpipe
