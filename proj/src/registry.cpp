#include "covertpipe/registry.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>

namespace covertpipe::rendezvous {

const char* share_mode_name(ShareMode m) { return m == ShareMode::direct ? "direct" : "relay"; }

const char* status_name(Status s) {
    switch (s) {
        case Status::upload_waiting: return "upload_waiting";
        case Status::ready: return "ready";
        case Status::exhausted: return "exhausted";
        case Status::expired: return "expired";
        case Status::unknown: return "unknown";
    }
    return "unknown";
}

std::optional<ShareMode> share_mode_from_name(std::string_view name) {
    if (name == "direct") return ShareMode::direct;
    if (name == "relay") return ShareMode::relay;
    return std::nullopt;
}

std::optional<Status> status_from_name(std::string_view name) {
    static constexpr std::pair<std::string_view, Status> kTable[] = {
        {"upload_waiting", Status::upload_waiting}, {"ready", Status::ready},
        {"exhausted", Status::exhausted},           {"expired", Status::expired},
        {"unknown", Status::unknown},
    };
    for (auto [n, s] : kTable)
        if (n == name) return s;
    return std::nullopt;
}

SharePolicy SharePolicy::defaults(ShareMode mode) {
    if (mode == ShareMode::relay) return SharePolicy{1000, 1};
    return SharePolicy{86400, 1};
}

struct Registry::RelayEntry {
    std::shared_ptr<const Bytes> mem;   // null when spilled
    std::filesystem::path spill_path;   // empty when in memory
    std::uint64_t size = 0;
    std::int64_t created_at = 0;
};

Registry::Registry(RegistryOptions opts, std::optional<Rng> rng, Clock clock)
    : opts_(std::move(opts)),
      rng_(rng ? std::move(*rng) : Rng::from_entropy()),
      rng_injected_(rng.has_value()),
      clock_(std::move(clock)) {
    if (!clock_) {
        clock_ = [] {
            return std::chrono::duration_cast<std::chrono::seconds>(
                       std::chrono::system_clock::now().time_since_epoch())
                .count();
        };
    }
    if (opts_.spill_dir.empty()) opts_.spill_dir = std::filesystem::temp_directory_path();
}

Registry::~Registry() {
    std::error_code ec;
    for (auto& [key, entry] : relay_store_)
        if (!entry->spill_path.empty()) std::filesystem::remove(entry->spill_path, ec);
}

Status Registry::effective_status_locked(const ShareRecord& rec, std::int64_t now) const {
    // expiry takes precedence over exhaustion
    if (rec.state == ShareState::expired || now > rec.created_at + rec.policy.ttl_seconds)
        return Status::expired;
    if (rec.state == ShareState::exhausted || rec.downloads_initiated >= rec.policy.max_downloads)
        return Status::exhausted;
    if (rec.mode == ShareMode::relay) {
        auto it = rec.relay_key ? relay_store_.find(*rec.relay_key) : relay_store_.end();
        return it == relay_store_.end() ? Status::upload_waiting : Status::ready;
    }
    return rec.seeder_endpoint ? Status::ready : Status::upload_waiting;
}

std::string Registry::fresh_token_locked(ShareMode mode) {
    for (int attempt = 0; attempt < opts_.token_retry_limit; ++attempt) {
        std::string token;
        if (mode == ShareMode::direct) {
            auto seed = rng_injected_ ? ident::EntropySeed::from_rng(rng_, 16)
                                      : ident::EntropySeed::random(16);
            token = ident::derive_slug(seed).text;
        } else if (rng_injected_) {
            token = ident::generate_short_token(rng_);
        } else {
            Rng local = Rng::from_entropy();
            token = ident::generate_short_token(local);
        }
        if (!records_.contains(token)) return token;
    }
    throw Error(Errc::capacity, "token namespace exhausted after retries");
}

std::string Registry::fresh_relay_key_locked() {
    for (int attempt = 0; attempt < opts_.token_retry_limit; ++attempt) {
        ident::RelayKey key;
        if (rng_injected_) {
            key = ident::generate_relay_key(rng_);
        } else {
            Rng local = Rng::from_entropy();
            key = ident::generate_relay_key(local);
        }
        if (!relay_key_to_token_.contains(key.digits)) return key.digits;
    }
    throw Error(Errc::capacity, "relay key namespace exhausted after retries");
}

RegisterResult Registry::register_share(const FileDescriptor& descriptor,
                                        const SharePolicy& policy, ShareMode mode,
                                        std::int64_t now) {
    if (policy.ttl_seconds <= 0 || policy.max_downloads == 0)
        throw Error(Errc::invalid_argument, "policy values must be positive");
    std::lock_guard lock(mu_);
    ShareRecord rec;
    rec.token = fresh_token_locked(mode);
    rec.descriptor = descriptor;
    rec.policy = policy;
    rec.created_at = now;
    rec.mode = mode;

    RegisterResult result;
    result.token = rec.token;
    if (mode == ShareMode::relay) {
        rec.relay_key = fresh_relay_key_locked();
        relay_key_to_token_[*rec.relay_key] = rec.token;
        result.relay_key = rec.relay_key;
    } else {
        rec.swarm_id = hex_encode(descriptor.content_digest).substr(0, 32);
        result.swarm_id = rec.swarm_id;
    }
    result.url = ident::compose_share_url(opts_.url_host, rec.token, opts_.url_scheme,
                                          opts_.url_port);
    records_.emplace(rec.token, std::move(rec));
    return result;
}

ResolveResult Registry::resolve_token(const std::string& token, std::int64_t now) const {
    std::lock_guard lock(mu_);
    auto it = records_.find(token);
    if (it == records_.end()) return ResolveResult{};
    const ShareRecord& rec = it->second;
    ResolveResult out;
    out.status = effective_status_locked(rec, now);
    out.descriptor = rec.descriptor;
    out.mode = rec.mode;
    out.swarm_id = rec.swarm_id;
    out.relay_key = rec.relay_key;
    return out;
}

ConsumeResult Registry::consume_download(const std::string& token, std::int64_t now) {
    std::lock_guard lock(mu_);
    auto it = records_.find(token);
    if (it == records_.end()) return ConsumeResult{false, Status::unknown, 0};
    ShareRecord& rec = it->second;
    Status st = effective_status_locked(rec, now);
    if (st == Status::expired) {
        rec.state = ShareState::expired;
        return ConsumeResult{false, Status::expired, 0};
    }
    if (st == Status::exhausted) return ConsumeResult{false, Status::exhausted, 0};
    rec.downloads_initiated += 1;
    if (rec.downloads_initiated >= rec.policy.max_downloads) rec.state = ShareState::exhausted;
    return ConsumeResult{true, Status::unknown, rec.policy.max_downloads - rec.downloads_initiated};
}

std::size_t Registry::expire_sweep(std::int64_t now) {
    std::lock_guard lock(mu_);
    std::size_t flipped = 0;
    for (auto& [token, rec] : records_) {
        if (rec.state != ShareState::expired && now > rec.created_at + rec.policy.ttl_seconds) {
            rec.state = ShareState::expired;
            ++flipped;
        }
    }
    return flipped;
}

JoinResult Registry::join_swarm(const std::string& swarm_id, const std::string& endpoint,
                                const std::vector<bool>& availability,
                                const std::optional<SwarmMeta>& meta) {
    if (endpoint.empty()) throw Error(Errc::invalid_argument, "empty swarm endpoint");
    std::lock_guard lock(mu_);
    auto it = swarms_.find(swarm_id);
    if (it == swarms_.end()) {
        // first joiner fixes the chunk geometry
        SwarmMeta m = meta.value_or(SwarmMeta{0, availability.size(), {}});
        if (meta && !availability.empty() && availability.size() != meta->total_chunks)
            throw Error(Errc::invalid_argument, "availability length does not match chunk count");
        it = swarms_.emplace(swarm_id, std::make_pair(std::move(m), std::vector<SwarmPeer>{}))
                 .first;
    }
    auto& [swarm_meta, peers] = it->second;
    std::vector<bool> have = availability;
    if (have.empty())
        have.assign(swarm_meta.total_chunks, false);
    else if (have.size() != swarm_meta.total_chunks)
        throw Error(Errc::invalid_argument, "availability length does not match chunk count");

    JoinResult out;
    bool replaced = false;
    for (auto& peer : peers) {
        if (peer.endpoint == endpoint) {
            peer.have = have;  // rejoin replaces, never duplicates
            replaced = true;
        } else {
            out.peers.push_back(peer);
        }
    }
    if (!replaced) peers.push_back(SwarmPeer{endpoint, std::move(have)});
    out.meta = swarm_meta;
    return out;
}

void Registry::relay_put(const std::string& key, Bytes blob, std::int64_t now) {
    std::unique_lock lock(mu_);
    auto owner = relay_key_to_token_.find(key);
    if (owner == relay_key_to_token_.end())
        throw Error(Errc::not_found, "relay key not allocated");
    if (relay_store_.contains(key)) throw Error(Errc::conflict, "relay key already staged");
    auto rec_it = records_.find(owner->second);
    if (rec_it == records_.end()) throw Error(Errc::not_found, "relay record vanished");
    Status st = effective_status_locked(rec_it->second, now);
    if (st == Status::expired) {
        rec_it->second.state = ShareState::expired;
        throw Error(Errc::invalid_token, "relay share expired");
    }
    if (rec_it->second.descriptor.size != blob.size())
        throw Error(Errc::invalid_argument, "blob size does not match descriptor");

    auto entry = std::make_unique<RelayEntry>();
    entry->size = blob.size();
    entry->created_at = now;
    if (blob.size() > opts_.relay_spill_threshold) {
        auto path = opts_.spill_dir /
                    ("covertpipe-relay-" + key + "-" + std::to_string(spill_counter_++) + ".blob");
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(reinterpret_cast<const char*>(blob.data()),
                  static_cast<std::streamsize>(blob.size()));
        if (!out) throw Error(Errc::io, "relay spill write failed");
        entry->spill_path = path;
    } else {
        entry->mem = std::make_shared<const Bytes>(std::move(blob));
    }
    relay_store_.emplace(key, std::move(entry));
}

RelayGetResult Registry::relay_get(const std::string& key, std::int64_t now) {
    std::shared_ptr<const Bytes> mem;
    std::filesystem::path spill;
    {
        std::lock_guard lock(mu_);
        auto owner = relay_key_to_token_.find(key);
        if (owner == relay_key_to_token_.end()) return RelayGetResult{false, Status::unknown, {}};
        auto rec_it = records_.find(owner->second);
        if (rec_it == records_.end()) return RelayGetResult{false, Status::unknown, {}};
        ShareRecord& rec = rec_it->second;
        Status st = effective_status_locked(rec, now);
        if (st == Status::expired) {
            rec.state = ShareState::expired;
            return RelayGetResult{false, Status::expired, {}};
        }
        if (st == Status::exhausted) return RelayGetResult{false, Status::exhausted, {}};
        if (st == Status::upload_waiting) return RelayGetResult{false, Status::upload_waiting, {}};
        // grant is burned here, under the same lock as the state check
        rec.downloads_initiated += 1;
        if (rec.downloads_initiated >= rec.policy.max_downloads) rec.state = ShareState::exhausted;
        auto& entry = relay_store_.at(key);
        mem = entry->mem;
        spill = entry->spill_path;
    }
    if (mem) return RelayGetResult{true, Status::unknown, std::move(mem)};
    // spilled blob: read outside the lock, entries are immutable once staged
    std::ifstream in(spill, std::ios::binary);
    if (!in) throw Error(Errc::io, "relay spill read failed");
    auto blob = std::make_shared<Bytes>();
    in.seekg(0, std::ios::end);
    blob->resize(static_cast<std::size_t>(in.tellg()));
    in.seekg(0);
    in.read(reinterpret_cast<char*>(blob->data()), static_cast<std::streamsize>(blob->size()));
    if (!in) throw Error(Errc::io, "relay spill read failed");
    return RelayGetResult{true, Status::unknown, std::move(blob)};
}

Status Registry::poll_status(const std::string& token) const {
    std::int64_t now = clock_();
    std::lock_guard lock(mu_);
    auto it = records_.find(token);
    if (it == records_.end()) return Status::unknown;
    return effective_status_locked(it->second, now);
}

void Registry::set_seeder_endpoint(const std::string& token, const std::string& endpoint) {
    std::lock_guard lock(mu_);
    auto it = records_.find(token);
    if (it == records_.end()) throw Error(Errc::not_found, "unknown token");
    if (it->second.mode != ShareMode::direct)
        throw Error(Errc::invalid_argument, "seeder endpoint applies to direct shares");
    it->second.seeder_endpoint = endpoint;
}

std::optional<ShareRecord> Registry::find_record(const std::string& token) const {
    std::lock_guard lock(mu_);
    auto it = records_.find(token);
    if (it == records_.end()) return std::nullopt;
    return it->second;
}

std::optional<std::string> Registry::token_for_relay_key(const std::string& key) const {
    std::lock_guard lock(mu_);
    auto it = relay_key_to_token_.find(key);
    if (it == relay_key_to_token_.end()) return std::nullopt;
    return it->second;
}

std::string Registry::state_digest() const {
    std::lock_guard lock(mu_);
    StreamingDigest digest(StreamingDigest::Algo::sha256);
    auto feed = [&digest](const std::string& s) {
        digest.update(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
    };
    for (const auto& [token, rec] : records_) {
        feed(token);
        feed("|" + std::to_string(rec.downloads_initiated) + "|" +
             std::to_string(static_cast<int>(rec.state)) + "|" +
             std::to_string(rec.created_at) + "|" + std::to_string(rec.policy.ttl_seconds) + "|" +
             std::to_string(rec.policy.max_downloads) + "|" + share_mode_name(rec.mode) + "|" +
             rec.swarm_id.value_or("-") + "|" + rec.relay_key.value_or("-") + "|" +
             rec.seeder_endpoint.value_or("-") + "\n");
    }
    for (const auto& [key, entry] : relay_store_)
        feed(key + "|" + std::to_string(entry->size) + "\n");
    for (const auto& [sid, swarm] : swarms_) {
        feed(sid + "|" + std::to_string(swarm.first.total_chunks) + "\n");
        for (const auto& peer : swarm.second) {
            std::string bits;
            for (bool b : peer.have) bits.push_back(b ? '1' : '0');
            feed(peer.endpoint + ":" + bits + "\n");
        }
    }
    return hex_encode(digest.finish());
}

}  // namespace covertpipe::rendezvous
