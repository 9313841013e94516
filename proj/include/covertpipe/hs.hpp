#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "covertpipe/util.hpp"

namespace covertpipe::hs {

// Ed25519 raw keys: 32-byte public, 32-byte secret seed, 64-byte signatures.
struct HsIdentity {
    Bytes public_key;
    Bytes secret_seed;
};

struct Circuit {
    std::array<std::string, 3> relays;  // distinct within a circuit
};

struct HsDescriptor {
    std::string onion_id;
    std::vector<std::string> intro_relays;  // final relay of each intro circuit
    std::int64_t time_period = 0;
    Bytes identity_public;
    Bytes signature;
};

struct ObservationRecord {
    std::string relay_id;
    std::string saw_prev;
    std::string saw_next;
    std::int64_t ts_ms = 0;

    std::string to_json_line() const;
};

struct RendezvousCircuit {
    std::string rp;
    Circuit client_circuit;   // last hop is rp
    Circuit service_circuit;  // last hop is rp
};

struct RendezvousResult {
    RendezvousCircuit circuit;
    std::vector<ObservationRecord> observations;
    bool probe_delivered = false;
};

// Directory state: (onion id, period) → descriptor, plus the publish history
// that a crawling participant can observe.
class SimDht {
  public:
    void put(const HsDescriptor& descriptor);
    std::optional<HsDescriptor> get(const std::string& onion_id, std::int64_t period) const;

    // Directory impersonation: stored entries for the target are replaced
    // with non-verifying copies until the owner republishes.
    void impersonate(const std::string& onion_id);
    void release(const std::string& onion_id);
    bool impersonated(const std::string& onion_id) const;

    // Full-visibility crawl over [from_period, to_period]; requires at least
    // one participating attacker node.
    std::vector<std::string> harvest(int attacker_nodes, std::int64_t from_period,
                                     std::int64_t to_period) const;

    const std::vector<std::pair<std::string, std::int64_t>>& publish_log() const {
        return publish_log_;
    }
    const std::set<std::string>& impersonated_set() const { return impersonated_; }

  private:
    std::map<std::pair<std::string, std::int64_t>, HsDescriptor> store_;
    std::vector<std::pair<std::string, std::int64_t>> publish_log_;
    std::set<std::string> impersonated_;
};

struct ServiceRecord {
    HsIdentity identity;
    std::vector<Circuit> intro_circuits;
};

struct HsWorld {
    std::int64_t period_seconds = 3600;
    std::vector<std::string> relay_pool;
    SimDht dht;
    std::map<std::string, ServiceRecord> services;  // onion id → record

    void add_relays(int count);  // "relay-01", "relay-02", ...
};

std::int64_t period_index(std::int64_t now_seconds, std::int64_t period_seconds);

HsIdentity gen_identity(Rng& rng);
std::string onion_of(const HsIdentity& identity);

Bytes ed25519_sign(const Bytes& secret_seed, std::span<const std::uint8_t> message);
bool ed25519_verify(const Bytes& public_key, std::span<const std::uint8_t> message,
                    std::span<const std::uint8_t> signature);

// Three circuits of three distinct relays; strict_disjoint forbids sharing
// relays across circuits (needs a pool of at least 9).
std::vector<Circuit> build_intro_circuits(const std::vector<std::string>& relay_pool, Rng& rng,
                                          bool strict_disjoint = false);

// Signature covers (onion_id, intro_relays, time_period); the descriptor
// verifies only if the onion id is derivable from the embedded public key.
bool verify_descriptor(const HsDescriptor& descriptor);

// Signs and stores the descriptor under floor(now / period); records the
// service so it can answer rendezvous.
HsDescriptor publish_descriptor(HsWorld& world, const HsIdentity& identity,
                                const std::vector<Circuit>& intro_circuits,
                                std::int64_t now_seconds);

// Throws Errc::not_found on a miss, Errc::integrity on a bad signature.
HsDescriptor lookup_descriptor(const HsWorld& world, const std::string& onion_id,
                               std::int64_t now_seconds);

// Client picks the rendezvous point, the introduction relay passes it to the
// service, both sides build circuits to it, a probe message round-trips.
// Throws Errc::introduction_failure when no advertised intro relay is in the
// pool.
RendezvousResult establish_rendezvous(HsWorld& world, const std::string& client_id,
                                      const HsDescriptor& descriptor, Rng& rng,
                                      std::int64_t now_ms = 0);

// lookup + establish; lookup failures surface as introduction failures.
RendezvousResult connect_service(HsWorld& world, const std::string& client_id,
                                 const std::string& onion_id, std::int64_t now_seconds, Rng& rng);

std::vector<std::string> harvest_dht(const HsWorld& world, int attacker_nodes,
                                     std::int64_t from_period, std::int64_t to_period);

class ImpersonationHandle {
  public:
    ImpersonationHandle(HsWorld& world, std::string onion_id)
        : world_(&world), onion_id_(std::move(onion_id)) {}
    void release();
    const std::string& onion_id() const { return onion_id_; }

  private:
    HsWorld* world_;
    std::string onion_id_;
};

ImpersonationHandle impersonate_directories(HsWorld& world, const std::string& onion_id);

// CLI state persistence (plain JSON, secrets included: simulation only).
void save_world(const HsWorld& world, const std::string& path);
HsWorld load_world(const std::string& path);

}  // namespace covertpipe::hs
