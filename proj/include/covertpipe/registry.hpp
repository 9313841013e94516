#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "covertpipe/ident.hpp"
#include "covertpipe/util.hpp"

namespace covertpipe::rendezvous {

enum class ShareMode : std::uint8_t { direct, relay };
enum class ShareState : std::uint8_t { active, exhausted, expired };
enum class Status : std::uint8_t { upload_waiting, ready, exhausted, expired, unknown };

const char* share_mode_name(ShareMode m);
const char* status_name(Status s);
std::optional<ShareMode> share_mode_from_name(std::string_view name);
std::optional<Status> status_from_name(std::string_view name);

struct FileDescriptor {
    std::string name;
    std::uint64_t size = 0;
    std::string extension;
    Digest32 content_digest{};
};

struct SharePolicy {
    std::int64_t ttl_seconds = 0;
    std::uint32_t max_downloads = 0;

    // direct: 24 h, one download. relay: 1000 s window, one download.
    static SharePolicy defaults(ShareMode mode);
};

struct ShareRecord {
    std::string token;
    FileDescriptor descriptor;
    SharePolicy policy;
    std::int64_t created_at = 0;
    std::uint32_t downloads_initiated = 0;
    ShareState state = ShareState::active;
    ShareMode mode = ShareMode::direct;
    std::optional<std::string> swarm_id;
    std::optional<std::string> relay_key;
    std::optional<std::string> seeder_endpoint;
};

struct SwarmPeer {
    std::string endpoint;
    std::vector<bool> have;
};

// Chunk metadata is fixed by the first joiner that supplies it.
struct SwarmMeta {
    std::uint32_t chunk_size = 0;
    std::uint64_t total_chunks = 0;
    std::vector<Digest32> chunk_digests;
};

struct RegisterResult {
    std::string token;
    std::string url;
    std::optional<std::string> relay_key;  // relay mode only
    std::optional<std::string> swarm_id;   // direct mode only
};

struct ResolveResult {
    Status status = Status::unknown;
    std::optional<FileDescriptor> descriptor;
    std::optional<ShareMode> mode;
    std::optional<std::string> swarm_id;
    std::optional<std::string> relay_key;
};

struct ConsumeResult {
    bool granted = false;
    Status refusal = Status::unknown;  // exhausted / expired / unknown when !granted
    std::uint32_t remaining = 0;
};

struct JoinResult {
    std::vector<SwarmPeer> peers;  // excludes the caller
    SwarmMeta meta;
};

struct RelayGetResult {
    bool granted = false;
    Status refusal = Status::unknown;
    std::shared_ptr<const Bytes> blob;
};

struct RegistryOptions {
    std::string url_scheme = "covert";
    std::string url_host = "127.0.0.1";
    std::optional<std::uint16_t> url_port;
    std::uint64_t relay_spill_threshold = 64ull << 20;
    std::filesystem::path spill_dir;  // empty: system temp
    int token_retry_limit = 16;
};

// Shared coordination service. Every public operation takes the registry
// mutex; blob payloads are handed out as shared_ptr so transfers never run
// under the lock.
class Registry {
public:
    using Clock = std::function<std::int64_t()>;

    explicit Registry(RegistryOptions opts = {}, std::optional<Rng> rng = std::nullopt,
                      Clock clock = nullptr);
    ~Registry();

    Registry(const Registry&) = delete;
    Registry& operator=(const Registry&) = delete;

    RegisterResult register_share(const FileDescriptor& descriptor, const SharePolicy& policy,
                                  ShareMode mode, std::int64_t now);

    // Read-only: reports effective status at `now` without touching counters.
    ResolveResult resolve_token(const std::string& token, std::int64_t now) const;

    ConsumeResult consume_download(const std::string& token, std::int64_t now);

    // Marks aged-out active records expired; returns how many changed.
    std::size_t expire_sweep(std::int64_t now);

    JoinResult join_swarm(const std::string& swarm_id, const std::string& endpoint,
                          const std::vector<bool>& availability,
                          const std::optional<SwarmMeta>& meta = std::nullopt);

    void relay_put(const std::string& key, Bytes blob, std::int64_t now);
    RelayGetResult relay_get(const std::string& key, std::int64_t now);

    // Same vocabulary as resolve_token, evaluated at the injected clock.
    Status poll_status(const std::string& token) const;

    // Associates a dialable endpoint with a direct share (the CLI seeder).
    void set_seeder_endpoint(const std::string& token, const std::string& endpoint);

    std::optional<ShareRecord> find_record(const std::string& token) const;
    std::optional<std::string> token_for_relay_key(const std::string& key) const;

    // Digest over all observable state; read-only ops must leave it unchanged.
    std::string state_digest() const;

    const RegistryOptions& options() const { return opts_; }

private:
    struct RelayEntry;

    Status effective_status_locked(const ShareRecord& rec, std::int64_t now) const;
    std::string fresh_token_locked(ShareMode mode);
    std::string fresh_relay_key_locked();

    RegistryOptions opts_;
    mutable std::mutex mu_;
    Rng rng_;
    bool rng_injected_ = false;
    Clock clock_;
    std::map<std::string, ShareRecord> records_;
    std::map<std::string, std::string> relay_key_to_token_;
    std::map<std::string, std::unique_ptr<RelayEntry>> relay_store_;
    std::map<std::string, std::pair<SwarmMeta, std::vector<SwarmPeer>>> swarms_;
    std::uint64_t spill_counter_ = 0;
};

}  // namespace covertpipe::rendezvous
