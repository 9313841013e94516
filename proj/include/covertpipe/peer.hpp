#pragma once

#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "covertpipe/net.hpp"
#include "covertpipe/registry.hpp"
#include "covertpipe/util.hpp"

namespace covertpipe::peer {

using rendezvous::ConsumeResult;
using rendezvous::FileDescriptor;
using rendezvous::JoinResult;
using rendezvous::RegisterResult;
using rendezvous::RelayGetResult;
using rendezvous::ResolveResult;
using rendezvous::ShareMode;
using rendezvous::SharePolicy;
using rendezvous::Status;
using rendezvous::SwarmMeta;
using rendezvous::SwarmPeer;

constexpr std::uint32_t kDefaultChunkSize = 65536;

struct ChunkMap {
    std::uint32_t chunk_size = kDefaultChunkSize;
    std::uint64_t file_size = 0;
    std::uint64_t total_chunks = 0;
    std::vector<bool> have;
    std::vector<Digest32> chunk_digests;  // empty until known

    // total_chunks = ceil(file_size / chunk_size); have all false.
    static ChunkMap plan(std::uint64_t file_size, std::uint32_t chunk_size = kDefaultChunkSize);
    // Digests computed, have all true.
    static ChunkMap of_content(std::span<const std::uint8_t> content,
                               std::uint32_t chunk_size = kDefaultChunkSize);

    std::size_t chunk_len(std::uint64_t index) const;
    bool complete() const;
};

enum class UploadState : std::uint8_t {
    idle,
    registered,
    waiting_peer,
    transferring,
    complete,
    expired,
};
enum class DownloadState : std::uint8_t {
    resolving,
    granted,
    connecting,
    transferring,
    verifying,
    done,
    failed,
};

const char* upload_state_name(UploadState s);
const char* download_state_name(DownloadState s);

// Transitions follow the declared order; any state may jump to expired.
class UploadSession {
  public:
    UploadState state() const { return state_; }
    void advance(UploadState next);

    std::string token;
    ShareMode mode = ShareMode::direct;

  private:
    UploadState state_ = UploadState::idle;
};

// Transitions follow the declared order; any non-terminal state may jump to
// failed, which is terminal.
class DownloadSession {
  public:
    DownloadState state() const { return state_; }
    void advance(DownloadState next);

    std::string url;
    ChunkMap map;
    Bytes buffer;

  private:
    DownloadState state_ = DownloadState::resolving;
};

struct ChunkAssignment {
    std::map<std::uint64_t, std::string> by_chunk;  // chunk index → peer id
    std::vector<std::uint64_t> unassigned;
};

// Rarest chunk first (fewest holders), ties by lowest index; each chunk goes
// to the lexicographically smallest peer id that holds it.
ChunkAssignment schedule_chunks(const std::vector<SwarmPeer>& peers, const ChunkMap& map);

enum class IngestOutcome : std::uint8_t { accepted, duplicate, rejected };

// Verifies the per-chunk digest before writing into session.buffer and
// setting the bitmap; rejected chunks leave the session unchanged.
IngestOutcome ingest_chunk(DownloadSession& session, std::uint64_t index,
                           std::span<const std::uint8_t> bytes);

// Abstract rendezvous access so sessions run identically against an
// in-process registry or the framed TCP wire protocol.
class RendezvousClient {
  public:
    virtual ~RendezvousClient() = default;
    virtual RegisterResult register_share(const FileDescriptor& descriptor,
                                          const SharePolicy& policy, ShareMode mode,
                                          const std::optional<std::string>& seeder_endpoint) = 0;
    virtual ResolveResult resolve(const std::string& token) = 0;
    virtual ConsumeResult consume(const std::string& token) = 0;
    virtual Status poll(const std::string& token) = 0;
    virtual JoinResult join_swarm(const std::string& swarm_id, const std::string& endpoint,
                                  const std::vector<bool>& availability,
                                  const std::optional<SwarmMeta>& meta) = 0;
    virtual void relay_put(const std::string& key, Bytes blob) = 0;
    virtual RelayGetResult relay_get(const std::string& key) = 0;
};

class LocalRendezvous : public RendezvousClient {
  public:
    explicit LocalRendezvous(rendezvous::Registry& registry,
                             rendezvous::Registry::Clock clock = nullptr);

    RegisterResult register_share(const FileDescriptor& descriptor, const SharePolicy& policy,
                                  ShareMode mode,
                                  const std::optional<std::string>& seeder_endpoint) override;
    ResolveResult resolve(const std::string& token) override;
    ConsumeResult consume(const std::string& token) override;
    Status poll(const std::string& token) override;
    JoinResult join_swarm(const std::string& swarm_id, const std::string& endpoint,
                          const std::vector<bool>& availability,
                          const std::optional<SwarmMeta>& meta) override;
    void relay_put(const std::string& key, Bytes blob) override;
    RelayGetResult relay_get(const std::string& key) override;

  private:
    rendezvous::Registry& registry_;
    rendezvous::Registry::Clock clock_;
};

// Loopback chunk server for direct-mode shares: responder side of the session
// handshake, then encrypted meta/chunk frames. One thread per connection.
class SeedServer {
  public:
    SeedServer(Bytes content, ChunkMap map, std::string token);
    ~SeedServer();

    SeedServer(const SeedServer&) = delete;
    SeedServer& operator=(const SeedServer&) = delete;

    void start();
    void stop();
    // The share token is known only after registration; set it before the
    // URL is handed out.
    void set_token(std::string token);
    std::string endpoint() const;
    std::uint16_t port() const { return listener_.port(); }

  private:
    void accept_loop();
    void serve(net::TcpStream stream);
    std::string current_token() const;

    Bytes content_;
    ChunkMap map_;
    mutable std::mutex token_mu_;
    std::string token_;
    net::TcpListener listener_;
    std::thread accept_thread_;
    std::mutex conn_mu_;
    std::vector<std::thread> conn_threads_;
    std::atomic<bool> stopping_{false};
};

struct Offer {
    std::string url;
    std::string token;
    std::string swarm_id;  // direct mode
    std::optional<std::string> relay_key;
    std::shared_ptr<SeedServer> server;  // null in relay mode

    void stop();
};

struct OfferOptions {
    std::uint32_t chunk_size = kDefaultChunkSize;
};

// Registers the share; direct mode starts a seed server and joins the swarm
// with a full bitmap, relay mode stages the blob.
Offer offer_file(const Bytes& content, const SharePolicy& policy, ShareMode mode,
                 RendezvousClient& rendezvous, const OfferOptions& opts = {});

struct FetchOptions {
    int chunk_retry_limit = 3;
    bool tamper = false;  // fault injection: corrupt one received frame
};

// resolve → consume → (direct: join swarm, connect, handshake, chunks;
// relay: relay_get) → verify digests → bytes.
Bytes fetch(const std::string& url, RendezvousClient& rendezvous, const FetchOptions& opts = {});

// Extracts the token (final path segment) from a share url or bare token.
std::string token_from_url(const std::string& url);

}  // namespace covertpipe::peer
