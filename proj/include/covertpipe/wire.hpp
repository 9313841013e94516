#pragma once

#include <atomic>
#include <cstdint>
#include <mutex>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "covertpipe/net.hpp"
#include "covertpipe/peer.hpp"
#include "covertpipe/registry.hpp"

namespace covertpipe::wire {

// Control-plane message types. Every request is one frame; the reply is one
// frame of the same type, or kMsgError carrying {code, message}.
constexpr std::uint8_t kMsgRegister = 0x01;
constexpr std::uint8_t kMsgResolve = 0x02;
constexpr std::uint8_t kMsgConsume = 0x03;
constexpr std::uint8_t kMsgStatus = 0x04;
constexpr std::uint8_t kMsgJoinSwarm = 0x05;
constexpr std::uint8_t kMsgRelayPut = 0x06;
constexpr std::uint8_t kMsgRelayGet = 0x07;
constexpr std::uint8_t kMsgError = 0x7F;

std::optional<Errc> errc_from_name(std::string_view name);

struct ServerOptions {
    std::uint16_t port = 0;  // 0 picks a free port
    std::ostream* log = nullptr;
};

// Framed TCP front end for a Registry. Thread per connection; connections may
// pipeline any number of request/response exchanges.
class Server {
  public:
    Server(rendezvous::Registry& registry, ServerOptions opts = {},
           rendezvous::Registry::Clock clock = nullptr);
    ~Server();

    Server(const Server&) = delete;
    Server& operator=(const Server&) = delete;

    void start();
    // Serves an already-bound listener, letting the caller learn the port
    // (and build URLs from it) before the registry exists.
    void start(net::TcpListener bound);
    void stop();

    std::uint16_t port() const { return listener_.port(); }
    std::string endpoint() const;

  private:
    void accept_loop();
    void serve(net::TcpStream stream);
    net::Frame handle(const net::Frame& request);
    void log_line(const std::string& line);

    rendezvous::Registry& registry_;
    ServerOptions opts_;
    rendezvous::Registry::Clock clock_;
    net::TcpListener listener_;
    std::thread accept_thread_;
    std::mutex conn_mu_;
    std::vector<std::thread> conn_threads_;
    std::mutex log_mu_;
    std::atomic<bool> running_{false};
};

// RendezvousClient over the wire protocol. Each operation opens a fresh
// connection, so one client may be shared across threads.
class TcpRendezvous : public peer::RendezvousClient {
  public:
    TcpRendezvous(std::string host, std::uint16_t port);

    peer::RegisterResult register_share(const peer::FileDescriptor& descriptor,
                                        const peer::SharePolicy& policy, peer::ShareMode mode,
                                        const std::optional<std::string>& seeder_endpoint) override;
    peer::ResolveResult resolve(const std::string& token) override;
    peer::ConsumeResult consume(const std::string& token) override;
    peer::Status poll(const std::string& token) override;
    peer::JoinResult join_swarm(const std::string& swarm_id, const std::string& endpoint,
                                const std::vector<bool>& availability,
                                const std::optional<peer::SwarmMeta>& meta) override;
    void relay_put(const std::string& key, Bytes blob) override;
    peer::RelayGetResult relay_get(const std::string& key) override;

  private:
    net::Frame roundtrip(std::uint8_t type, const std::string& body);

    std::string host_;
    std::uint16_t port_;
};

}  // namespace covertpipe::wire
