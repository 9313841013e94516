#include "covertpipe/peer.hpp"

#include <algorithm>
#include <chrono>
#include <cstring>
#include <set>

#include "covertpipe/channel.hpp"
#include "covertpipe/ident.hpp"

namespace covertpipe::peer {

namespace {

std::int64_t system_now_seconds() {
    return std::chrono::duration_cast<std::chrono::seconds>(
               std::chrono::system_clock::now().time_since_epoch())
        .count();
}

// Data-plane frame types, carried over the shared length-prefixed framing.
constexpr std::uint8_t kFrameHs1 = 0x11;
constexpr std::uint8_t kFrameHs2 = 0x12;
constexpr std::uint8_t kFrameHs3 = 0x13;
constexpr std::uint8_t kFrameEnc = 0x14;

// First plaintext byte inside an encrypted frame.
constexpr std::uint8_t kOpMetaReq = 1;
constexpr std::uint8_t kOpMetaResp = 2;
constexpr std::uint8_t kOpChunkReq = 3;
constexpr std::uint8_t kOpChunkData = 4;
constexpr std::uint8_t kOpErr = 5;

constexpr std::uint8_t kErrBadToken = 1;
constexpr std::uint8_t kErrBadIndex = 2;

void put_u64(Bytes& out, std::uint64_t v) {
    for (int i = 7; i >= 0; --i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(std::span<const std::uint8_t> in, std::size_t off) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v = v << 8 | in[off + i];
    return v;
}

}  // namespace

ChunkMap ChunkMap::plan(std::uint64_t file_size, std::uint32_t chunk_size) {
    if (chunk_size == 0) throw Error(Errc::invalid_argument, "chunk size must be positive");
    ChunkMap map;
    map.chunk_size = chunk_size;
    map.file_size = file_size;
    map.total_chunks = (file_size + chunk_size - 1) / chunk_size;
    map.have.assign(map.total_chunks, false);
    return map;
}

ChunkMap ChunkMap::of_content(std::span<const std::uint8_t> content, std::uint32_t chunk_size) {
    ChunkMap map = plan(content.size(), chunk_size);
    map.have.assign(map.total_chunks, true);
    map.chunk_digests.reserve(map.total_chunks);
    for (std::uint64_t i = 0; i < map.total_chunks; ++i) {
        std::size_t off = static_cast<std::size_t>(i) * chunk_size;
        map.chunk_digests.push_back(
            sha3_256(content.subspan(off, map.chunk_len(i))));
    }
    return map;
}

std::size_t ChunkMap::chunk_len(std::uint64_t index) const {
    if (index >= total_chunks) throw Error(Errc::invalid_argument, "chunk index out of range");
    std::uint64_t off = index * chunk_size;
    return static_cast<std::size_t>(std::min<std::uint64_t>(chunk_size, file_size - off));
}

bool ChunkMap::complete() const {
    return std::all_of(have.begin(), have.end(), [](bool b) { return b; });
}

const char* upload_state_name(UploadState s) {
    switch (s) {
        case UploadState::idle: return "idle";
        case UploadState::registered: return "registered";
        case UploadState::waiting_peer: return "waiting_peer";
        case UploadState::transferring: return "transferring";
        case UploadState::complete: return "complete";
        case UploadState::expired: return "expired";
    }
    return "?";
}

const char* download_state_name(DownloadState s) {
    switch (s) {
        case DownloadState::resolving: return "resolving";
        case DownloadState::granted: return "granted";
        case DownloadState::connecting: return "connecting";
        case DownloadState::transferring: return "transferring";
        case DownloadState::verifying: return "verifying";
        case DownloadState::done: return "done";
        case DownloadState::failed: return "failed";
    }
    return "?";
}

void UploadSession::advance(UploadState next) {
    if (next == UploadState::expired) {
        state_ = next;
        return;
    }
    bool legal = static_cast<int>(next) == static_cast<int>(state_) + 1 &&
                 state_ != UploadState::expired;
    if (!legal)
        throw Error(Errc::invalid_argument,
                    std::string("illegal upload transition ") + upload_state_name(state_) +
                        " -> " + upload_state_name(next));
    state_ = next;
}

void DownloadSession::advance(DownloadState next) {
    if (state_ == DownloadState::failed || state_ == DownloadState::done) {
        throw Error(Errc::invalid_argument,
                    std::string("download session is terminal in state ") +
                        download_state_name(state_));
    }
    if (next == DownloadState::failed) {
        state_ = next;
        return;
    }
    if (static_cast<int>(next) != static_cast<int>(state_) + 1)
        throw Error(Errc::invalid_argument,
                    std::string("illegal download transition ") + download_state_name(state_) +
                        " -> " + download_state_name(next));
    state_ = next;
}

ChunkAssignment schedule_chunks(const std::vector<SwarmPeer>& peers, const ChunkMap& map) {
    ChunkAssignment out;
    std::vector<std::uint64_t> missing;
    for (std::uint64_t i = 0; i < map.total_chunks; ++i)
        if (!map.have[i]) missing.push_back(i);

    auto holder_count = [&](std::uint64_t chunk) {
        std::size_t n = 0;
        for (const auto& p : peers)
            if (chunk < p.have.size() && p.have[chunk]) ++n;
        return n;
    };

    std::stable_sort(missing.begin(), missing.end(), [&](std::uint64_t l, std::uint64_t r) {
        auto cl = holder_count(l), cr = holder_count(r);
        if (cl != cr) return cl < cr;
        return l < r;
    });

    for (std::uint64_t chunk : missing) {
        const std::string* best = nullptr;
        for (const auto& p : peers) {
            if (chunk < p.have.size() && p.have[chunk] &&
                (best == nullptr || p.endpoint < *best))
                best = &p.endpoint;
        }
        if (best)
            out.by_chunk.emplace(chunk, *best);
        else
            out.unassigned.push_back(chunk);
    }
    std::sort(out.unassigned.begin(), out.unassigned.end());
    return out;
}

IngestOutcome ingest_chunk(DownloadSession& session, std::uint64_t index,
                           std::span<const std::uint8_t> bytes) {
    ChunkMap& map = session.map;
    if (index >= map.total_chunks)
        throw Error(Errc::invalid_argument, "chunk index out of range");
    if (map.have[index]) return IngestOutcome::duplicate;
    if (bytes.size() != map.chunk_len(index)) return IngestOutcome::rejected;
    if (index < map.chunk_digests.size() && sha3_256(bytes) != map.chunk_digests[index])
        return IngestOutcome::rejected;
    std::size_t off = static_cast<std::size_t>(index) * map.chunk_size;
    if (session.buffer.size() < off + bytes.size())
        throw Error(Errc::invalid_argument, "download buffer not sized for file");
    std::copy(bytes.begin(), bytes.end(), session.buffer.begin() + off);
    map.have[index] = true;
    return IngestOutcome::accepted;
}

LocalRendezvous::LocalRendezvous(rendezvous::Registry& registry, rendezvous::Registry::Clock clock)
    : registry_(registry), clock_(clock ? std::move(clock) : system_now_seconds) {}

RegisterResult LocalRendezvous::register_share(const FileDescriptor& descriptor,
                                               const SharePolicy& policy, ShareMode mode,
                                               const std::optional<std::string>& seeder_endpoint) {
    auto result = registry_.register_share(descriptor, policy, mode, clock_());
    if (seeder_endpoint) registry_.set_seeder_endpoint(result.token, *seeder_endpoint);
    return result;
}

ResolveResult LocalRendezvous::resolve(const std::string& token) {
    return registry_.resolve_token(token, clock_());
}

ConsumeResult LocalRendezvous::consume(const std::string& token) {
    return registry_.consume_download(token, clock_());
}

Status LocalRendezvous::poll(const std::string& token) { return registry_.poll_status(token); }

JoinResult LocalRendezvous::join_swarm(const std::string& swarm_id, const std::string& endpoint,
                                       const std::vector<bool>& availability,
                                       const std::optional<SwarmMeta>& meta) {
    return registry_.join_swarm(swarm_id, endpoint, availability, meta);
}

void LocalRendezvous::relay_put(const std::string& key, Bytes blob) {
    registry_.relay_put(key, std::move(blob), clock_());
}

RelayGetResult LocalRendezvous::relay_get(const std::string& key) {
    return registry_.relay_get(key, clock_());
}

// ---------------------------------------------------------------------------
// SeedServer

SeedServer::SeedServer(Bytes content, ChunkMap map, std::string token)
    : content_(std::move(content)), map_(std::move(map)), token_(std::move(token)) {}

SeedServer::~SeedServer() { stop(); }

void SeedServer::start() {
    listener_ = net::TcpListener::bind(0);
    accept_thread_ = std::thread([this] { accept_loop(); });
}

void SeedServer::stop() {
    bool expected = false;
    if (!stopping_.compare_exchange_strong(expected, true)) {
        return;
    }
    listener_.close();
    if (accept_thread_.joinable()) accept_thread_.join();
    std::vector<std::thread> conns;
    {
        std::lock_guard lock(conn_mu_);
        conns.swap(conn_threads_);
    }
    for (auto& t : conns)
        if (t.joinable()) t.join();
}

void SeedServer::set_token(std::string token) {
    std::lock_guard lock(token_mu_);
    token_ = std::move(token);
}

std::string SeedServer::current_token() const {
    std::lock_guard lock(token_mu_);
    return token_;
}

std::string SeedServer::endpoint() const {
    return "127.0.0.1:" + std::to_string(listener_.port());
}

void SeedServer::accept_loop() {
    while (true) {
        auto stream = listener_.accept();
        if (!stream) return;
        std::lock_guard lock(conn_mu_);
        conn_threads_.emplace_back(
            [this, s = std::move(*stream)]() mutable { serve(std::move(s)); });
    }
}

void SeedServer::serve(net::TcpStream stream) {
    try {
        auto hs1 = net::read_frame(stream);
        if (hs1.type != kFrameHs1) return;
        Rng rng = Rng::from_entropy();
        chan::HandshakeResponder responder(rng);
        Bytes hs2 = responder.consume_init(hs1.payload);
        net::write_frame(stream, kFrameHs2, hs2);
        auto hs3 = net::read_frame(stream);
        if (hs3.type != kFrameHs3) return;
        responder.consume_finish(hs3.payload);
        chan::SessionKeys keys = responder.session();

        bool authorized = false;
        while (true) {
            auto frame = net::read_frame(stream);
            if (frame.type != kFrameEnc) return;
            Bytes plain = chan::open(keys, frame.payload);
            if (plain.empty()) return;
            Bytes reply;
            switch (plain[0]) {
                case kOpMetaReq: {
                    std::string token(plain.begin() + 1, plain.end());
                    if (token.empty() || token != current_token()) {
                        reply.push_back(kOpErr);
                        reply.push_back(kErrBadToken);
                    } else {
                        authorized = true;
                        reply.push_back(kOpMetaResp);
                        put_u64(reply, map_.file_size);
                        put_u64(reply, map_.chunk_size);
                        put_u64(reply, map_.total_chunks);
                    }
                    break;
                }
                case kOpChunkReq: {
                    std::uint64_t index = get_u64(plain, 1);
                    if (!authorized || index >= map_.total_chunks) {
                        reply.push_back(kOpErr);
                        reply.push_back(authorized ? kErrBadIndex : kErrBadToken);
                        break;
                    }
                    std::size_t off = static_cast<std::size_t>(index) * map_.chunk_size;
                    std::size_t n = map_.chunk_len(index);
                    reply.push_back(kOpChunkData);
                    put_u64(reply, index);
                    reply.insert(reply.end(), content_.begin() + off, content_.begin() + off + n);
                    break;
                }
                default:
                    return;
            }
            Bytes sealed = chan::seal(keys, reply);
            net::write_frame(stream, kFrameEnc, sealed);
        }
    } catch (const Error&) {
        // connection-scoped failure; the peer retries or reschedules
    } catch (const std::exception&) {
    }
}

void Offer::stop() {
    if (server) server->stop();
}

Offer offer_file(const Bytes& content, const SharePolicy& policy, ShareMode mode,
                 RendezvousClient& rendezvous, const OfferOptions& opts) {
    UploadSession session;
    session.mode = mode;

    FileDescriptor desc;
    desc.name = "file";
    desc.size = content.size();
    desc.extension = "bin";
    desc.content_digest = sha3_256(content);

    Offer offer;
    if (mode == ShareMode::direct) {
        ChunkMap map = ChunkMap::of_content(content, opts.chunk_size);
        auto server = std::make_shared<SeedServer>(content, map, std::string());
        server->start();

        auto reg = rendezvous.register_share(desc, policy, mode, server->endpoint());
        session.token = reg.token;
        session.advance(UploadState::registered);
        server->set_token(reg.token);

        SwarmMeta meta;
        meta.chunk_size = map.chunk_size;
        meta.total_chunks = map.total_chunks;
        meta.chunk_digests = map.chunk_digests;
        rendezvous.join_swarm(*reg.swarm_id, server->endpoint(),
                              std::vector<bool>(map.total_chunks, true), meta);
        session.advance(UploadState::waiting_peer);

        offer.url = reg.url;
        offer.token = reg.token;
        offer.swarm_id = *reg.swarm_id;
        offer.server = std::move(server);
    } else {
        auto reg = rendezvous.register_share(desc, policy, mode, std::nullopt);
        session.token = reg.token;
        session.advance(UploadState::registered);
        rendezvous.relay_put(*reg.relay_key, content);
        offer.url = reg.url;
        offer.token = reg.token;
        offer.relay_key = reg.relay_key;
    }
    return offer;
}

std::string token_from_url(const std::string& url) {
    std::string tail = url;
    auto slash = tail.find_last_of('/');
    if (slash != std::string::npos) tail = tail.substr(slash + 1);
    if (ident::is_valid_slug(tail) || ident::is_valid_short_token(tail)) return tail;
    throw Error(Errc::invalid_argument, "malformed share url: " + url);
}

namespace {

struct PeerConnection {
    net::TcpStream stream;
    chan::SessionKeys keys;
};

PeerConnection connect_peer(const std::string& endpoint, const std::string& token,
                            std::uint64_t expect_size, std::uint32_t expect_chunk) {
    auto [host, port] = parse_host_port(endpoint);
    PeerConnection conn;
    conn.stream = net::TcpStream::connect(host, port);
    conn.stream.set_read_timeout_ms(10000);

    Rng rng = Rng::from_entropy();
    chan::HandshakeInitiator initiator(rng);
    net::write_frame(conn.stream, kFrameHs1, initiator.message1());
    auto hs2 = net::read_frame(conn.stream);
    if (hs2.type != kFrameHs2) throw Error(Errc::handshake_failure, "unexpected frame in handshake");
    Bytes hs3 = initiator.consume_response(hs2.payload);
    net::write_frame(conn.stream, kFrameHs3, hs3);
    conn.keys = initiator.session();

    Bytes req;
    req.push_back(kOpMetaReq);
    req.insert(req.end(), token.begin(), token.end());
    net::write_frame(conn.stream, kFrameEnc, chan::seal(conn.keys, req));
    auto frame = net::read_frame(conn.stream);
    if (frame.type != kFrameEnc) throw Error(Errc::path_failure, "unexpected meta frame");
    Bytes plain = chan::open(conn.keys, frame.payload);
    if (plain.empty() || plain[0] != kOpMetaResp)
        throw Error(Errc::invalid_token, "seeder refused the share token");
    if (plain.size() != 25 || get_u64(plain, 1) != expect_size ||
        get_u64(plain, 9) != expect_chunk)
        throw Error(Errc::verification, "seeder metadata disagrees with the registry");
    return conn;
}

}  // namespace

Bytes fetch(const std::string& url, RendezvousClient& rendezvous, const FetchOptions& opts) {
    DownloadSession session;
    session.url = url;
    const std::string token = token_from_url(url);

    auto resolved = rendezvous.resolve(token);
    if (resolved.status == Status::unknown || resolved.status == Status::expired ||
        resolved.status == Status::exhausted)
        throw Error(Errc::invalid_token,
                    std::string("share not available: ") + rendezvous::status_name(resolved.status));
    if (resolved.status == Status::upload_waiting)
        throw Error(Errc::path_failure, "share registered but content not yet available");

    if (resolved.mode == ShareMode::relay) {
        session.advance(DownloadState::granted);  // grant happens inside relay_get
        auto got = rendezvous.relay_get(*resolved.relay_key);
        if (!got.granted)
            throw Error(Errc::invalid_token, std::string("download refused: ") +
                                                 rendezvous::status_name(got.refusal));
        session.advance(DownloadState::connecting);
        session.advance(DownloadState::transferring);
        Bytes content = *got.blob;
        session.advance(DownloadState::verifying);
        if (sha3_256(content) != resolved.descriptor->content_digest)
            throw Error(Errc::verification, "content digest mismatch");
        session.advance(DownloadState::done);
        return content;
    }

    auto grant = rendezvous.consume(token);
    if (!grant.granted)
        throw Error(Errc::invalid_token, std::string("download refused: ") +
                                             rendezvous::status_name(grant.refusal));
    session.advance(DownloadState::granted);

    Rng id_rng = Rng::from_entropy();
    std::string self = "sink-" + hex_encode(random_bytes(4, id_rng.next_u64()));
    auto join = rendezvous.join_swarm(*resolved.swarm_id, self, {}, std::nullopt);

    session.map = ChunkMap::plan(resolved.descriptor->size, join.meta.chunk_size);
    session.map.chunk_digests = join.meta.chunk_digests;
    if (session.map.total_chunks != join.meta.total_chunks)
        throw Error(Errc::verification, "swarm chunk count disagrees with file size");
    session.buffer.assign(static_cast<std::size_t>(resolved.descriptor->size), 0);

    session.advance(DownloadState::connecting);
    std::vector<SwarmPeer> peers;
    for (auto& p : join.peers)
        if (p.endpoint != self) peers.push_back(std::move(p));

    session.advance(DownloadState::transferring);
    std::set<std::string> failed_peers;
    bool tamper_pending = opts.tamper;

    while (!session.map.complete()) {
        std::vector<SwarmPeer> usable;
        for (const auto& p : peers)
            if (!failed_peers.contains(p.endpoint)) usable.push_back(p);
        auto plan = schedule_chunks(usable, session.map);
        if (plan.by_chunk.empty())
            throw Error(Errc::path_failure, "no reachable peer serves the remaining chunks");

        // group assignment by peer, one connection each
        std::map<std::string, std::vector<std::uint64_t>> by_peer;
        for (const auto& [chunk, peer] : plan.by_chunk) by_peer[peer].push_back(chunk);

        for (const auto& [endpoint, chunks] : by_peer) {
            try {
                PeerConnection conn =
                    connect_peer(endpoint, token, session.map.file_size, session.map.chunk_size);
                for (std::uint64_t index : chunks) {
                    int attempts = 0;
                    while (!session.map.have[index]) {
                        if (attempts++ >= opts.chunk_retry_limit)
                            throw Error(Errc::verification,
                                        "chunk " + std::to_string(index) +
                                            " failed verification after retries");
                        Bytes req;
                        req.push_back(kOpChunkReq);
                        put_u64(req, index);
                        net::write_frame(conn.stream, kFrameEnc, chan::seal(conn.keys, req));
                        auto frame = net::read_frame(conn.stream);
                        if (frame.type != kFrameEnc)
                            throw Error(Errc::path_failure, "unexpected chunk frame");
                        if (tamper_pending && frame.payload.size() > 8) {
                            frame.payload[8] ^= 0x01;
                            tamper_pending = false;
                        }
                        Bytes plain = chan::open(conn.keys, frame.payload);
                        if (plain.size() < 9 || plain[0] != kOpChunkData || get_u64(plain, 1) != index)
                            continue;
                        ingest_chunk(session, index,
                                     std::span(plain.data() + 9, plain.size() - 9));
                    }
                }
            } catch (const Error& err) {
                if (err.code() == Errc::authentication || err.code() == Errc::replay ||
                    err.code() == Errc::invalid_token)
                    throw;
                failed_peers.insert(endpoint);
                break;  // re-plan with the remaining peers
            }
        }
    }

    session.advance(DownloadState::verifying);
    if (sha3_256(session.buffer) != resolved.descriptor->content_digest)
        throw Error(Errc::verification, "content digest mismatch");
    session.advance(DownloadState::done);
    return std::move(session.buffer);
}

}  // namespace covertpipe::peer
