#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "covertpipe/channel.hpp"
#include "covertpipe/registry.hpp"
#include "covertpipe/trace.hpp"
#include "covertpipe/util.hpp"

namespace covertpipe::sim {

using rendezvous::Registry;
using rendezvous::RegistryOptions;

enum class NatKind { none, full_cone, symmetric };

std::string_view nat_kind_name(NatKind k);
NatKind nat_kind_from_name(std::string_view name);

struct Address {
    std::string host;
    std::uint16_t port = 0;

    std::string str() const { return host + ":" + std::to_string(port); }
    bool operator==(const Address&) const = default;
};

struct Path {
    enum class Kind { direct, relayed };
    Kind kind = Kind::direct;
    std::string a;
    std::string b;
    std::optional<std::string> relay;
    int keepalive_interval_ms = 200;
    std::int64_t established_ms = 0;
    std::int64_t last_keepalive_ms = 0;
};

// Single-threaded discrete-event network: endpoints behind NAT boxes, one
// logical clock, every emitted event appended to an in-memory trace.
// Instances are independent; nothing here touches real sockets.
class Simulation {
  public:
    explicit Simulation(std::uint64_t seed);

    // nat applies to clients; infrastructure endpoints register with none.
    void add_endpoint(const std::string& id, NatKind nat);
    bool has_endpoint(const std::string& id) const;

    void set_stun_server(const std::string& id);
    void set_turn_relay(const std::string& id);
    // The signaling host owns a registry with tokens drawn from the
    // simulation seed.
    void set_signaling_host(const std::string& id);
    void set_loss(double drop_probability);

    // Emits a bind/confirm pair and returns the NAT-mapped public address.
    Address stun_bind(const std::string& endpoint, const std::string& stun_server);

    // Direct when at least one side's NAT is none or full_cone; otherwise
    // relayed through the TURN relay. Emits signaling plus STUN discovery
    // events. Throws Errc::path_failure when relay fallback is needed but no
    // relay is configured.
    Path establish_path(const std::string& a, const std::string& b);

    // Emits one bind/confirm pair per keepalive interval elapsed since the
    // last tick, advancing path.last_keepalive_ms.
    int keepalive_tick(Path& path, std::int64_t now_ms);

    // Runs the three-message exchange over the path, emitting handshake
    // events. Per-message transmissions drop with the configured loss
    // probability; budget of 3 sends per message, exhaustion throws
    // Errc::handshake_failure. tamper flips one byte of the second message.
    std::pair<chan::SessionKeys, chan::SessionKeys> handshake(const Path& path,
                                                              bool tamper = false);

    // Emits a data event (two when the path is relayed) of the given wire
    // length at the current clock.
    void send_data(const Path& path, bool from_a, std::size_t len,
                   std::optional<std::string> meta = std::nullopt);

    Registry& registry(const std::string& signaling_host);

    std::int64_t now_ms() const { return now_ms_; }
    void advance_ms(std::int64_t delta);

    TraceLog& trace() { return trace_; }
    const TraceLog& trace() const { return trace_; }
    Rng& rng() { return rng_; }

    void emit(const std::string& src, const std::string& dst, Transport transport,
              EventKind kind, std::size_t len, std::optional<std::string> meta = std::nullopt);

  private:
    struct Endpoint {
        NatKind nat = NatKind::none;
        Address private_address;
        std::string public_host;
        std::optional<std::uint16_t> cone_port;
        std::map<std::string, std::uint16_t> symmetric_ports;
    };

    Endpoint& require(const std::string& id);
    bool transmit_ok();

    std::map<std::string, Endpoint> endpoints_;
    std::map<std::string, std::unique_ptr<Registry>> registries_;
    std::optional<std::string> stun_server_;
    std::optional<std::string> turn_relay_;
    double loss_ = 0.0;
    std::int64_t now_ms_ = 0;
    std::uint16_t next_nat_port_ = 40000;
    int next_host_octet_ = 1;
    Rng rng_;
    TraceLog trace_;
};

// Parses and executes a scenario document; returns the finished trace.
// Validation failures throw Errc::scenario with a JSON-pointer path (or a
// line number for parse errors).
TraceLog run_scenario(const std::string& script_json);
TraceLog run_scenario_file(const std::string& path);

}  // namespace covertpipe::sim
