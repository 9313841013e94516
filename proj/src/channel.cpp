#include "covertpipe/channel.hpp"

#include <openssl/evp.h>

#include <cstring>

namespace covertpipe::chan {

namespace {

struct EvpPkey {
    EVP_PKEY* p = nullptr;
    ~EvpPkey() { EVP_PKEY_free(p); }
};

struct EvpPkeyCtx {
    EVP_PKEY_CTX* p = nullptr;
    ~EvpPkeyCtx() { EVP_PKEY_CTX_free(p); }
};

std::array<std::uint8_t, 32> x25519_public(const std::array<std::uint8_t, 32>& secret) {
    EvpPkey key{EVP_PKEY_new_raw_private_key(EVP_PKEY_X25519, nullptr, secret.data(), 32)};
    if (!key.p) throw Error(Errc::handshake_failure, "x25519 key import");
    std::array<std::uint8_t, 32> pub{};
    std::size_t len = 32;
    if (EVP_PKEY_get_raw_public_key(key.p, pub.data(), &len) != 1 || len != 32)
        throw Error(Errc::handshake_failure, "x25519 public export");
    return pub;
}

std::array<std::uint8_t, 32> x25519_shared(const std::array<std::uint8_t, 32>& secret,
                                           std::span<const std::uint8_t> peer_public) {
    EvpPkey own{EVP_PKEY_new_raw_private_key(EVP_PKEY_X25519, nullptr, secret.data(), 32)};
    EvpPkey peer{
        EVP_PKEY_new_raw_public_key(EVP_PKEY_X25519, nullptr, peer_public.data(), peer_public.size())};
    if (!own.p || !peer.p) throw Error(Errc::handshake_failure, "x25519 peer key import");
    EvpPkeyCtx ctx{EVP_PKEY_CTX_new(own.p, nullptr)};
    std::array<std::uint8_t, 32> out{};
    std::size_t len = 32;
    if (!ctx.p || EVP_PKEY_derive_init(ctx.p) != 1 ||
        EVP_PKEY_derive_set_peer(ctx.p, peer.p) != 1 ||
        EVP_PKEY_derive(ctx.p, out.data(), &len) != 1 || len != 32)
        throw Error(Errc::handshake_failure, "x25519 derive");
    return out;
}

std::array<std::uint8_t, 32> derive_secret(std::span<const std::uint8_t> init_pub,
                                           std::span<const std::uint8_t> resp_pub,
                                           std::span<const std::uint8_t> shared) {
    Bytes transcript;
    static constexpr char kLabel[] = "covertpipe-hs-v1";
    transcript.insert(transcript.end(), kLabel, kLabel + sizeof kLabel - 1);
    transcript.insert(transcript.end(), init_pub.begin(), init_pub.end());
    transcript.insert(transcript.end(), resp_pub.begin(), resp_pub.end());
    transcript.insert(transcript.end(), shared.begin(), shared.end());
    return sha256(transcript);
}

Digest32 confirm_tag(const std::array<std::uint8_t, 32>& secret, std::string_view label) {
    return hmac_sha256(secret, std::span(reinterpret_cast<const std::uint8_t*>(label.data()),
                                         label.size()));
}

constexpr std::string_view kResponderLabel = "responder-confirm";
constexpr std::string_view kInitiatorLabel = "initiator-confirm";

bool equal_ct(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
    if (a.size() != b.size()) return false;
    unsigned char diff = 0;
    for (std::size_t i = 0; i < a.size(); ++i) diff |= a[i] ^ b[i];
    return diff == 0;
}

}  // namespace

HandshakeInitiator::HandshakeInitiator(Rng& rng) {
    rng.fill(secret_key_);
    public_key_ = x25519_public(secret_key_);
}

Bytes HandshakeInitiator::message1() const {
    return Bytes(public_key_.begin(), public_key_.end());
}

Bytes HandshakeInitiator::consume_response(std::span<const std::uint8_t> msg2) {
    if (msg2.size() != kHandshakeMsg2Size)
        throw Error(Errc::handshake_failure, "bad handshake response size");
    auto resp_pub = msg2.first(32);
    auto their_confirm = msg2.subspan(32, 32);
    shared_ = derive_secret(public_key_, resp_pub, x25519_shared(secret_key_, resp_pub));
    auto expect = confirm_tag(shared_, kResponderLabel);
    if (!equal_ct(their_confirm, expect))
        throw Error(Errc::handshake_failure, "responder confirm mismatch");
    complete_ = true;
    auto mine = confirm_tag(shared_, kInitiatorLabel);
    return Bytes(mine.begin(), mine.end());
}

SessionKeys HandshakeInitiator::session() const {
    if (!complete_) throw Error(Errc::handshake_failure, "handshake incomplete");
    SessionKeys keys;
    keys.shared_secret = shared_;
    keys.initiator = true;
    return keys;
}

HandshakeResponder::HandshakeResponder(Rng& rng) {
    rng.fill(secret_key_);
    public_key_ = x25519_public(secret_key_);
}

Bytes HandshakeResponder::consume_init(std::span<const std::uint8_t> msg1) {
    if (msg1.size() != kHandshakeMsg1Size)
        throw Error(Errc::handshake_failure, "bad handshake init size");
    shared_ = derive_secret(msg1, public_key_, x25519_shared(secret_key_, msg1));
    Bytes out(public_key_.begin(), public_key_.end());
    auto tag = confirm_tag(shared_, kResponderLabel);
    out.insert(out.end(), tag.begin(), tag.end());
    return out;
}

void HandshakeResponder::consume_finish(std::span<const std::uint8_t> msg3) {
    if (msg3.size() != kHandshakeMsg3Size)
        throw Error(Errc::handshake_failure, "bad handshake finish size");
    auto expect = confirm_tag(shared_, kInitiatorLabel);
    if (!equal_ct(msg3, expect))
        throw Error(Errc::handshake_failure, "initiator confirm mismatch");
    complete_ = true;
}

SessionKeys HandshakeResponder::session() const {
    if (!complete_) throw Error(Errc::handshake_failure, "handshake incomplete");
    SessionKeys keys;
    keys.shared_secret = shared_;
    keys.initiator = false;
    return keys;
}

namespace {

// nonce: direction byte, 3 zero bytes, 8-byte big-endian counter
std::array<std::uint8_t, 12> make_nonce(bool sender_is_initiator, std::uint64_t counter) {
    std::array<std::uint8_t, 12> nonce{};
    nonce[0] = sender_is_initiator ? 0x01 : 0x02;
    for (int i = 0; i < 8; ++i)
        nonce[4 + i] = static_cast<std::uint8_t>(counter >> (56 - 8 * i));
    return nonce;
}

struct EvpCipherCtx {
    EVP_CIPHER_CTX* p = EVP_CIPHER_CTX_new();
    ~EvpCipherCtx() { EVP_CIPHER_CTX_free(p); }
};

}  // namespace

Bytes seal(SessionKeys& keys, std::span<const std::uint8_t> plaintext) {
    std::uint64_t counter = keys.send_counter + 1;
    auto nonce = make_nonce(keys.initiator, counter);

    Bytes frame(8 + plaintext.size() + 16);
    for (int i = 0; i < 8; ++i) frame[i] = static_cast<std::uint8_t>(counter >> (56 - 8 * i));

    EvpCipherCtx ctx;
    int len = 0;
    if (!ctx.p ||
        EVP_EncryptInit_ex(ctx.p, EVP_chacha20_poly1305(), nullptr, keys.shared_secret.data(),
                           nonce.data()) != 1)
        throw Error(Errc::io, "aead init");
    if (!plaintext.empty() &&
        EVP_EncryptUpdate(ctx.p, frame.data() + 8, &len, plaintext.data(),
                          static_cast<int>(plaintext.size())) != 1)
        throw Error(Errc::io, "aead encrypt");
    int fin = 0;
    if (EVP_EncryptFinal_ex(ctx.p, frame.data() + 8 + len, &fin) != 1)
        throw Error(Errc::io, "aead finalize");
    if (EVP_CIPHER_CTX_ctrl(ctx.p, EVP_CTRL_AEAD_GET_TAG, 16,
                            frame.data() + 8 + plaintext.size()) != 1)
        throw Error(Errc::io, "aead tag");
    keys.send_counter = counter;
    return frame;
}

Bytes open(SessionKeys& keys, std::span<const std::uint8_t> frame) {
    if (frame.size() < kSealOverhead) throw Error(Errc::authentication, "frame too short");
    std::uint64_t counter = 0;
    for (int i = 0; i < 8; ++i) counter = counter << 8 | frame[i];
    if (counter <= keys.recv_counter) throw Error(Errc::replay, "counter replayed");

    auto nonce = make_nonce(!keys.initiator, counter);
    std::size_t ct_len = frame.size() - kSealOverhead;
    Bytes plaintext(ct_len);
    Bytes tag(frame.end() - 16, frame.end());

    EvpCipherCtx ctx;
    int len = 0;
    if (!ctx.p ||
        EVP_DecryptInit_ex(ctx.p, EVP_chacha20_poly1305(), nullptr, keys.shared_secret.data(),
                           nonce.data()) != 1)
        throw Error(Errc::io, "aead init");
    if (ct_len > 0 &&
        EVP_DecryptUpdate(ctx.p, plaintext.data(), &len, frame.data() + 8,
                          static_cast<int>(ct_len)) != 1)
        throw Error(Errc::authentication, "aead decrypt");
    if (EVP_CIPHER_CTX_ctrl(ctx.p, EVP_CTRL_AEAD_SET_TAG, 16, tag.data()) != 1)
        throw Error(Errc::io, "aead set tag");
    int fin = 0;
    if (EVP_DecryptFinal_ex(ctx.p, plaintext.data() + len, &fin) != 1)
        throw Error(Errc::authentication, "authentication tag mismatch");
    keys.recv_counter = counter;
    return plaintext;
}

}  // namespace covertpipe::chan
