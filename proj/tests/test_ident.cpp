#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>
#include <sstream>

#include "covertpipe/ident.hpp"
#include "support/refhash.hpp"

using namespace covertpipe;
using namespace covertpipe::ident;

namespace {

Bytes seq_bytes(std::size_t n) {
    Bytes out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<std::uint8_t>(i);
    return out;
}

// Slug recipe recomputed with the reference primitives only.
std::string ref_slug(const Bytes& seed) {
    std::string hex = refhash::hex_lower(refhash::sha256(seed));
    std::string tail = hex.substr(hex.size() - 16);
    Bytes ascii(tail.begin(), tail.end());
    return refhash::base32_lower_nopad(ascii);
}

std::string ref_onion(const Bytes& key) {
    auto digest = refhash::sha1(key);
    return refhash::base32_lower_nopad(std::span(digest.data(), 10));
}

std::string ref_swarm(const Bytes& content) {
    return refhash::hex_lower(refhash::sha3_256(content)).substr(0, 32);
}

}  // namespace

TEST_CASE("reference digests match the library primitives") {
    Rng rng(0x1de5701);
    for (int i = 0; i < 50; ++i) {
        Bytes data(rng.below(300));
        rng.fill(data);
        CHECK(refhash::sha1(data) == sha1(data));
        CHECK(refhash::sha256(data) == sha256(data));
        CHECK(refhash::sha3_256(data) == sha3_256(data));
        CHECK(refhash::hex_lower(data) == hex_encode(data));
        CHECK(refhash::base32_lower_nopad(data) == base32_encode_lower(data, true));
    }
}

TEST_CASE("slug derivation: fixed vectors") {
    CHECK(derive_slug(EntropySeed::from_bytes(Bytes(16, 0x00))).text ==
          "gi2tmmzsmfqwemrymvrtgn3cmi");
    CHECK(derive_slug(EntropySeed::from_bytes(seq_bytes(16))).text ==
          "mrrgcnrzhezdqzlfgnqtqojzge");
    CHECK(derive_slug(EntropySeed::from_bytes(Bytes(16, 'a'))).text ==
          "giydinjzmiytemzwha3dazrymm");
}

TEST_CASE("slug derivation matches the reference recipe on random seeds") {
    Rng rng(0x5109);
    for (int i = 0; i < 100; ++i) {
        Bytes seed(16);
        rng.fill(seed);
        Slug slug = derive_slug(EntropySeed::from_bytes(seed));
        CHECK(slug.text == ref_slug(seed));
        CHECK(slug.text.size() == 26);
        CHECK(is_valid_slug(slug.text));
    }
}

TEST_CASE("onion id derivation: fixed vectors and reference agreement") {
    CHECK(derive_onion_id(Bytes(32, 0x00)).text == "32fii677rq2d22ny");
    CHECK(derive_onion_id(Bytes{'k'}).text == "cp55phb5hehf2zmf");
    CHECK(derive_onion_id(seq_bytes(32)).text == "vzn5r37kkmrmjwmy");

    Rng rng(77);
    for (int i = 0; i < 100; ++i) {
        Bytes key(32);
        rng.fill(key);
        OnionId id = derive_onion_id(key);
        CHECK(id.text == ref_onion(key));
        CHECK(id.text.size() == 16);
        CHECK(is_valid_onion_id(id.text));
    }
}

TEST_CASE("swarm id derivation: fixed vectors, reference agreement, streaming") {
    CHECK(derive_swarm_id(Bytes{}).hex == "a7ffc6f8bf1ed76651c14756a061d662");
    CHECK(derive_swarm_id(Bytes{'h', 'e', 'l', 'l', 'o'}).hex ==
          "3338be694f50c5f338814986cdf06864");
    CHECK(derive_swarm_id(seq_bytes(256)).hex == "9b04c091da96b997afb8f2585d608aeb");

    Rng rng(78);
    for (int i = 0; i < 100; ++i) {
        Bytes content(rng.below(5000));
        rng.fill(content);
        SwarmId id = derive_swarm_id(content);
        CHECK(id.hex == ref_swarm(content));
        CHECK(id.hex.size() == 32);
        CHECK(is_valid_swarm_id(id.hex));

        std::istringstream stream(std::string(content.begin(), content.end()));
        CHECK(derive_swarm_id(stream).hex == id.hex);
    }
}

TEST_CASE("same content always yields the same swarm id") {
    Bytes content(100000);
    Rng(123).fill(content);
    CHECK(derive_swarm_id(content).hex == derive_swarm_id(content).hex);
    Bytes altered = content;
    altered[50000] ^= 1;
    CHECK(derive_swarm_id(altered).hex != derive_swarm_id(content).hex);
}

TEST_CASE("share url composition") {
    CHECK(compose_share_url("32fii677rq2d22ny", "abc12", "onion") ==
          "32fii677rq2d22ny.onion/abc12");
    CHECK(compose_share_url("host.example", "tok42", "https") == "https://host.example/tok42");
    CHECK(compose_share_url("127.0.0.1", "tok42", "covert", 9474) ==
          "covert://127.0.0.1:9474/tok42");
}

TEST_CASE("relay keys: 15 digits, nonzero lead, format of the published example") {
    CHECK(is_valid_relay_key("103223658539867"));
    CHECK_FALSE(is_valid_relay_key("003223658539867"));
    CHECK_FALSE(is_valid_relay_key("10322365853986"));
    CHECK_FALSE(is_valid_relay_key("10322365853986a"));

    Rng rng(5);
    std::set<std::string> seen;
    for (int i = 0; i < 200; ++i) {
        RelayKey key = generate_relay_key(rng);
        CHECK(key.digits.size() == 15);
        CHECK(key.digits.front() != '0');
        CHECK(is_valid_relay_key(key.digits));
        seen.insert(key.digits);
    }
    CHECK(seen.size() > 190);  // collisions at this scale would mean a broken generator
}

TEST_CASE("short tokens: 5 chars of [a-z0-9], format of the published example") {
    CHECK(is_valid_short_token("di33x"));
    CHECK_FALSE(is_valid_short_token("di33"));
    CHECK_FALSE(is_valid_short_token("di33X"));
    CHECK_FALSE(is_valid_short_token("di3 x"));

    Rng rng(6);
    for (int i = 0; i < 200; ++i) {
        std::string token = generate_short_token(rng);
        CHECK(token.size() == 5);
        CHECK(is_valid_short_token(token));
    }
}

TEST_CASE("seeded rng derivations are reproducible") {
    Rng a(42), b(42);
    CHECK(EntropySeed::from_rng(a, 16).bytes == EntropySeed::from_rng(b, 16).bytes);
    CHECK(generate_relay_key(a).digits == generate_relay_key(b).digits);
    CHECK(generate_short_token(a) == generate_short_token(b));
}

TEST_CASE("entropy seed length contract") {
    CHECK(EntropySeed::random(8).bytes.size() == 8);
    CHECK(EntropySeed::random(16).bytes.size() == 16);
    CHECK_THROWS_AS(EntropySeed::from_bytes(Bytes{}), Error);
    CHECK_THROWS_AS(EntropySeed::from_bytes(Bytes(12, 0)), Error);
    CHECK_THROWS_AS(derive_slug(EntropySeed::from_bytes(Bytes(8, 0))), Error);
}

TEST_CASE("validator edge cases") {
    CHECK_FALSE(is_valid_slug("short"));
    CHECK_FALSE(is_valid_slug(std::string(26, '1')));  // '1' is outside base32
    CHECK(is_valid_slug(std::string(26, 'a')));
    CHECK_FALSE(is_valid_onion_id(std::string(16, 'A')));
    CHECK_FALSE(is_valid_swarm_id(std::string(32, 'g')));
}
