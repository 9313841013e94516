#include "covertpipe/hs.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "covertpipe/ident.hpp"

namespace covertpipe::hs {

namespace {

struct EvpPkey {
    EVP_PKEY* p = nullptr;
    ~EvpPkey() { EVP_PKEY_free(p); }
};

struct EvpMdCtx {
    EVP_MD_CTX* p = EVP_MD_CTX_new();
    ~EvpMdCtx() { EVP_MD_CTX_free(p); }
};

Bytes descriptor_message(const std::string& onion_id,
                         const std::vector<std::string>& intro_relays,
                         std::int64_t time_period) {
    std::string text = onion_id;
    text += '\n';
    for (std::size_t i = 0; i < intro_relays.size(); ++i) {
        if (i) text += ',';
        text += intro_relays[i];
    }
    text += '\n';
    text += std::to_string(time_period);
    return Bytes(text.begin(), text.end());
}

}  // namespace

std::string ObservationRecord::to_json_line() const {
    nlohmann::json j;
    j["relay_id"] = relay_id;
    j["saw_prev"] = saw_prev;
    j["saw_next"] = saw_next;
    j["ts_ms"] = ts_ms;
    return j.dump();
}

std::int64_t period_index(std::int64_t now_seconds, std::int64_t period_seconds) {
    if (period_seconds <= 0) throw Error(Errc::invalid_argument, "period must be positive");
    if (now_seconds < 0) throw Error(Errc::invalid_argument, "time must be non-negative");
    return now_seconds / period_seconds;
}

HsIdentity gen_identity(Rng& rng) {
    std::array<std::uint8_t, 32> seed{};
    rng.fill(seed);
    EvpPkey key{EVP_PKEY_new_raw_private_key(EVP_PKEY_ED25519, nullptr, seed.data(), seed.size())};
    if (!key.p) throw Error(Errc::io, "ed25519 key import");
    std::array<std::uint8_t, 32> pub{};
    std::size_t len = pub.size();
    if (EVP_PKEY_get_raw_public_key(key.p, pub.data(), &len) != 1 || len != 32)
        throw Error(Errc::io, "ed25519 public export");
    HsIdentity identity;
    identity.secret_seed.assign(seed.begin(), seed.end());
    identity.public_key.assign(pub.begin(), pub.end());
    return identity;
}

std::string onion_of(const HsIdentity& identity) {
    return ident::derive_onion_id(identity.public_key).text;
}

Bytes ed25519_sign(const Bytes& secret_seed, std::span<const std::uint8_t> message) {
    EvpPkey key{EVP_PKEY_new_raw_private_key(EVP_PKEY_ED25519, nullptr, secret_seed.data(),
                                             secret_seed.size())};
    if (!key.p) throw Error(Errc::io, "ed25519 key import");
    EvpMdCtx ctx;
    Bytes sig(64);
    std::size_t sig_len = sig.size();
    if (!ctx.p || EVP_DigestSignInit(ctx.p, nullptr, nullptr, nullptr, key.p) != 1 ||
        EVP_DigestSign(ctx.p, sig.data(), &sig_len, message.data(), message.size()) != 1 ||
        sig_len != 64)
        throw Error(Errc::io, "ed25519 sign");
    return sig;
}

bool ed25519_verify(const Bytes& public_key, std::span<const std::uint8_t> message,
                    std::span<const std::uint8_t> signature) {
    if (public_key.size() != 32 || signature.size() != 64) return false;
    EvpPkey key{EVP_PKEY_new_raw_public_key(EVP_PKEY_ED25519, nullptr, public_key.data(),
                                            public_key.size())};
    if (!key.p) return false;
    EvpMdCtx ctx;
    if (!ctx.p || EVP_DigestVerifyInit(ctx.p, nullptr, nullptr, nullptr, key.p) != 1) return false;
    return EVP_DigestVerify(ctx.p, signature.data(), signature.size(), message.data(),
                            message.size()) == 1;
}

void HsWorld::add_relays(int count) {
    for (int i = 0; i < count; ++i) {
        std::ostringstream name;
        name << "relay-";
        int n = static_cast<int>(relay_pool.size()) + 1;
        if (n < 10) name << '0';
        name << n;
        relay_pool.push_back(name.str());
    }
}

std::vector<Circuit> build_intro_circuits(const std::vector<std::string>& relay_pool, Rng& rng,
                                          bool strict_disjoint) {
    const std::size_t needed = strict_disjoint ? 9 : 3;
    if (relay_pool.size() < needed)
        throw Error(Errc::insufficient_relays,
                    "relay pool has " + std::to_string(relay_pool.size()) + ", need at least " +
                        std::to_string(needed));

    std::vector<std::size_t> order(relay_pool.size());
    std::iota(order.begin(), order.end(), 0);
    // Fisher-Yates from the injected engine: reproducible circuit choice
    for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[rng.below(i)]);

    std::vector<Circuit> circuits;
    if (strict_disjoint) {
        for (int c = 0; c < 3; ++c) {
            Circuit circuit;
            for (int h = 0; h < 3; ++h) circuit.relays[h] = relay_pool[order[c * 3 + h]];
            circuits.push_back(circuit);
        }
        return circuits;
    }
    for (int c = 0; c < 3; ++c) {
        // draw 3 distinct relays per circuit, reshuffling the window start
        Circuit circuit;
        std::vector<std::size_t> pick(order);
        for (std::size_t i = pick.size(); i > 1; --i)
            std::swap(pick[i - 1], pick[rng.below(i)]);
        for (int h = 0; h < 3; ++h) circuit.relays[h] = relay_pool[pick[h]];
        circuits.push_back(circuit);
    }
    return circuits;
}

void SimDht::put(const HsDescriptor& descriptor) {
    HsDescriptor stored = descriptor;
    // an active directory takeover poisons new publications too
    if (impersonated_.contains(descriptor.onion_id))
        std::fill(stored.signature.begin(), stored.signature.end(), 0);
    store_[{descriptor.onion_id, descriptor.time_period}] = std::move(stored);
    publish_log_.emplace_back(descriptor.onion_id, descriptor.time_period);
}

std::optional<HsDescriptor> SimDht::get(const std::string& onion_id, std::int64_t period) const {
    auto it = store_.find({onion_id, period});
    if (it == store_.end()) return std::nullopt;
    return it->second;
}

void SimDht::impersonate(const std::string& onion_id) {
    impersonated_.insert(onion_id);
    for (auto& [key, descriptor] : store_) {
        if (key.first != onion_id) continue;
        // forged copy: same shape, unverifiable signature
        std::fill(descriptor.signature.begin(), descriptor.signature.end(), 0);
    }
}

void SimDht::release(const std::string& onion_id) { impersonated_.erase(onion_id); }

bool SimDht::impersonated(const std::string& onion_id) const {
    return impersonated_.contains(onion_id);
}

std::vector<std::string> SimDht::harvest(int attacker_nodes, std::int64_t from_period,
                                         std::int64_t to_period) const {
    if (attacker_nodes < 1)
        throw Error(Errc::invalid_argument, "harvest needs at least one participating node");
    if (from_period > to_period)
        throw Error(Errc::invalid_argument, "empty harvest window");
    std::set<std::string> ids;
    for (const auto& [onion, period] : publish_log_)
        if (period >= from_period && period <= to_period) ids.insert(onion);
    return {ids.begin(), ids.end()};
}

bool verify_descriptor(const HsDescriptor& descriptor) {
    if (descriptor.identity_public.size() != 32) return false;
    if (ident::derive_onion_id(descriptor.identity_public).text != descriptor.onion_id)
        return false;
    Bytes message =
        descriptor_message(descriptor.onion_id, descriptor.intro_relays, descriptor.time_period);
    return ed25519_verify(descriptor.identity_public, message, descriptor.signature);
}

HsDescriptor publish_descriptor(HsWorld& world, const HsIdentity& identity,
                                const std::vector<Circuit>& intro_circuits,
                                std::int64_t now_seconds) {
    if (intro_circuits.size() != 3)
        throw Error(Errc::invalid_argument, "exactly three introduction circuits required");
    HsDescriptor descriptor;
    descriptor.onion_id = onion_of(identity);
    for (const Circuit& c : intro_circuits) descriptor.intro_relays.push_back(c.relays.back());
    descriptor.time_period = period_index(now_seconds, world.period_seconds);
    descriptor.identity_public = identity.public_key;
    descriptor.signature = ed25519_sign(
        identity.secret_seed,
        descriptor_message(descriptor.onion_id, descriptor.intro_relays, descriptor.time_period));

    world.dht.put(descriptor);
    world.services[descriptor.onion_id] = ServiceRecord{identity, intro_circuits};
    return descriptor;
}

HsDescriptor lookup_descriptor(const HsWorld& world, const std::string& onion_id,
                               std::int64_t now_seconds) {
    auto found = world.dht.get(onion_id, period_index(now_seconds, world.period_seconds));
    if (!found)
        throw Error(Errc::not_found, "no descriptor for " + onion_id + " in the current period");
    if (!verify_descriptor(*found))
        throw Error(Errc::integrity, "descriptor signature for " + onion_id + " does not verify");
    return *found;
}

namespace {

// Picks `count` distinct relays. `hard` exclusions always apply; `soft` ones
// are dropped when the pool cannot otherwise supply enough relays.
std::vector<std::string> pick_relays(const std::vector<std::string>& pool,
                                     const std::set<std::string>& hard,
                                     const std::set<std::string>& soft, std::size_t count,
                                     Rng& rng) {
    std::vector<std::string> strict;
    std::vector<std::string> relaxed;
    for (const auto& r : pool) {
        if (hard.contains(r)) continue;
        relaxed.push_back(r);
        if (!soft.contains(r)) strict.push_back(r);
    }
    const std::vector<std::string>& source = strict.size() >= count ? strict : relaxed;
    if (source.size() < count)
        throw Error(Errc::insufficient_relays, "relay pool too small for a circuit");
    std::vector<std::string> picked;
    std::set<std::size_t> used;
    while (picked.size() < count) {
        std::size_t i = static_cast<std::size_t>(rng.below(source.size()));
        if (used.insert(i).second) picked.push_back(source[i]);
    }
    return picked;
}

}  // namespace

RendezvousResult establish_rendezvous(HsWorld& world, const std::string& client_id,
                                      const HsDescriptor& descriptor, Rng& rng,
                                      std::int64_t now_ms) {
    if (!verify_descriptor(descriptor))
        throw Error(Errc::integrity, "descriptor does not verify");
    auto service_it = world.services.find(descriptor.onion_id);
    if (service_it == world.services.end())
        throw Error(Errc::introduction_failure,
                    "no service is answering for " + descriptor.onion_id);

    const auto& pool = world.relay_pool;
    auto in_pool = [&](const std::string& id) {
        return std::find(pool.begin(), pool.end(), id) != pool.end();
    };

    std::optional<std::string> intro;
    for (const auto& relay : descriptor.intro_relays) {
        if (in_pool(relay)) {
            intro = relay;
            break;
        }
    }
    if (!intro)
        throw Error(Errc::introduction_failure,
                    "no advertised introduction relay is reachable");

    // The rendezvous point avoids every relay the service advertised or uses
    // in its introduction circuits; the five rendezvous relays are distinct.
    std::set<std::string> intro_avoid(descriptor.intro_relays.begin(),
                                      descriptor.intro_relays.end());
    for (const Circuit& c : service_it->second.intro_circuits)
        for (const auto& r : c.relays) intro_avoid.insert(r);
    std::string rp = pick_relays(pool, {}, intro_avoid, 1, rng).front();

    std::set<std::string> hard{rp};
    auto client_hops = pick_relays(pool, hard, intro_avoid, 2, rng);
    hard.insert(client_hops.begin(), client_hops.end());
    auto service_hops = pick_relays(pool, hard, intro_avoid, 2, rng);

    RendezvousResult result;
    result.circuit.rp = rp;
    result.circuit.client_circuit.relays = {client_hops[0], client_hops[1], rp};
    result.circuit.service_circuit.relays = {service_hops[0], service_hops[1], rp};

    const std::string service_id = "svc:" + descriptor.onion_id;
    auto observe = [&](const std::string& relay, const std::string& prev,
                       const std::string& next) {
        result.observations.push_back({relay, prev, next, now_ms});
    };
    observe(client_hops[0], client_id, client_hops[1]);
    observe(client_hops[1], client_hops[0], rp);
    observe(rp, client_hops[1], service_hops[1]);
    observe(service_hops[1], service_hops[0], rp);
    observe(service_hops[0], service_id, service_hops[1]);

    result.probe_delivered = true;
    return result;
}

RendezvousResult connect_service(HsWorld& world, const std::string& client_id,
                                 const std::string& onion_id, std::int64_t now_seconds, Rng& rng) {
    HsDescriptor descriptor;
    try {
        descriptor = lookup_descriptor(world, onion_id, now_seconds);
    } catch (const Error& err) {
        throw Error(Errc::introduction_failure,
                    std::string("cannot introduce to ") + onion_id + ": " + err.what());
    }
    return establish_rendezvous(world, client_id, descriptor, rng, now_seconds * 1000);
}

std::vector<std::string> harvest_dht(const HsWorld& world, int attacker_nodes,
                                     std::int64_t from_period, std::int64_t to_period) {
    return world.dht.harvest(attacker_nodes, from_period, to_period);
}

void ImpersonationHandle::release() {
    if (world_) world_->dht.release(onion_id_);
}

ImpersonationHandle impersonate_directories(HsWorld& world, const std::string& onion_id) {
    world.dht.impersonate(onion_id);
    return ImpersonationHandle(world, onion_id);
}

// ---------------------------------------------------------------------------
// CLI state persistence

void save_world(const HsWorld& world, const std::string& path) {
    nlohmann::json j;
    j["period_seconds"] = world.period_seconds;
    j["relays"] = world.relay_pool;

    nlohmann::json services = nlohmann::json::object();
    for (const auto& [onion, record] : world.services) {
        nlohmann::json circuits = nlohmann::json::array();
        for (const Circuit& c : record.intro_circuits)
            circuits.push_back(std::vector<std::string>(c.relays.begin(), c.relays.end()));
        services[onion] = {
            {"public_key", base64_encode(record.identity.public_key)},
            {"secret_seed", base64_encode(record.identity.secret_seed)},
            {"intro_circuits", circuits},
        };
    }
    j["services"] = services;

    nlohmann::json entries = nlohmann::json::array();
    for (const auto& [onion, period] : world.dht.publish_log()) {
        auto descriptor = world.dht.get(onion, period);
        if (!descriptor) continue;
        entries.push_back({
            {"onion_id", descriptor->onion_id},
            {"time_period", descriptor->time_period},
            {"intro_relays", descriptor->intro_relays},
            {"identity_public", base64_encode(descriptor->identity_public)},
            {"signature", base64_encode(descriptor->signature)},
        });
    }
    j["dht"] = entries;

    nlohmann::json log = nlohmann::json::array();
    for (const auto& [onion, period] : world.dht.publish_log())
        log.push_back({{"onion_id", onion}, {"time_period", period}});
    j["publish_log"] = log;

    j["impersonated"] = std::vector<std::string>(world.dht.impersonated_set().begin(),
                                                 world.dht.impersonated_set().end());

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::io, "cannot write state file: " + path);
    out << j.dump(2) << '\n';
}

HsWorld load_world(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(Errc::io, "cannot read state file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& err) {
        throw Error(Errc::config, std::string("state file is not valid JSON: ") + err.what());
    }

    HsWorld world;
    try {
        world.period_seconds = j.at("period_seconds").get<std::int64_t>();
        world.relay_pool = j.at("relays").get<std::vector<std::string>>();

        for (const auto& [onion, rec] : j.at("services").items()) {
            ServiceRecord record;
            record.identity.public_key = base64_decode(rec.at("public_key").get<std::string>());
            record.identity.secret_seed = base64_decode(rec.at("secret_seed").get<std::string>());
            for (const auto& circuit : rec.at("intro_circuits")) {
                Circuit c;
                for (std::size_t h = 0; h < 3; ++h) c.relays[h] = circuit.at(h).get<std::string>();
                record.intro_circuits.push_back(c);
            }
            world.services[onion] = std::move(record);
        }

        // replay publishes in order so the log and store match the save
        std::map<std::pair<std::string, std::int64_t>, HsDescriptor> descriptors;
        for (const auto& entry : j.at("dht")) {
            HsDescriptor d;
            d.onion_id = entry.at("onion_id").get<std::string>();
            d.time_period = entry.at("time_period").get<std::int64_t>();
            d.intro_relays = entry.at("intro_relays").get<std::vector<std::string>>();
            d.identity_public = base64_decode(entry.at("identity_public").get<std::string>());
            d.signature = base64_decode(entry.at("signature").get<std::string>());
            descriptors[{d.onion_id, d.time_period}] = d;
        }
        for (const auto& entry : j.at("publish_log")) {
            auto key = std::make_pair(entry.at("onion_id").get<std::string>(),
                                      entry.at("time_period").get<std::int64_t>());
            auto it = descriptors.find(key);
            if (it != descriptors.end()) world.dht.put(it->second);
        }
        for (const auto& onion : j.at("impersonated"))
            world.dht.impersonate(onion.get<std::string>());
    } catch (const nlohmann::json::exception& err) {
        throw Error(Errc::config, std::string("malformed state file: ") + err.what());
    }
    return world;
}

}  // namespace covertpipe::hs
