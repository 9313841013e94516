#pragma once

#include <array>
#include <cstdint>
#include <span>

#include "covertpipe/util.hpp"

namespace covertpipe::chan {

// Established channel state. Counters start at zero and advance once per
// sealed/opened frame; a counter value is never accepted twice.
struct SessionKeys {
    std::array<std::uint8_t, 32> shared_secret{};
    std::uint64_t send_counter = 0;
    std::uint64_t recv_counter = 0;
    bool initiator = false;
};

/*
    Three-message establishment over an untrusted path:

      1. init -> resp   ephemeral X25519 public key A
      2. resp -> init   ephemeral X25519 public key B || confirm_r
      3. init -> resp   confirm_i

    secret    = SHA-256("covertpipe-hs-v1" || A || B || X25519(a, B))
    confirm_r = HMAC-SHA-256(secret, "responder-confirm")
    confirm_i = HMAC-SHA-256(secret, "initiator-confirm")

    Either side rejects a bad confirm tag, so any in-flight tampering of the
    public keys fails the exchange instead of silently diverging.
*/

constexpr std::size_t kHandshakeMsg1Size = 32;
constexpr std::size_t kHandshakeMsg2Size = 64;
constexpr std::size_t kHandshakeMsg3Size = 32;

class HandshakeInitiator {
public:
    explicit HandshakeInitiator(Rng& rng);
    Bytes message1() const;
    // consumes msg2, returns msg3; throws Errc::handshake_failure on a bad tag
    Bytes consume_response(std::span<const std::uint8_t> msg2);
    SessionKeys session() const;

private:
    std::array<std::uint8_t, 32> secret_key_{};
    std::array<std::uint8_t, 32> public_key_{};
    std::array<std::uint8_t, 32> shared_{};
    bool complete_ = false;
};

class HandshakeResponder {
public:
    explicit HandshakeResponder(Rng& rng);
    // consumes msg1, returns msg2
    Bytes consume_init(std::span<const std::uint8_t> msg1);
    // throws Errc::handshake_failure on a bad tag
    void consume_finish(std::span<const std::uint8_t> msg3);
    SessionKeys session() const;

private:
    std::array<std::uint8_t, 32> secret_key_{};
    std::array<std::uint8_t, 32> public_key_{};
    std::array<std::uint8_t, 32> shared_{};
    bool complete_ = false;
};

// Frame layout: 8-byte big-endian counter || ChaCha20-Poly1305 ciphertext+tag.
// seal advances keys.send_counter; open enforces strictly increasing counters
// (Errc::replay) and authenticates (Errc::authentication).
Bytes seal(SessionKeys& keys, std::span<const std::uint8_t> plaintext);
Bytes open(SessionKeys& keys, std::span<const std::uint8_t> frame);

constexpr std::size_t kSealOverhead = 8 + 16;

}  // namespace covertpipe::chan
