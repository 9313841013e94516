#include "covertpipe/wire.hpp"

#include <chrono>
#include <sstream>

#include <json.hpp>

namespace covertpipe::wire {

using nlohmann::json;
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

std::optional<Errc> errc_from_name(std::string_view name) {
    for (int i = 0;; ++i) {
        auto code = static_cast<Errc>(i);
        if (code > Errc::network) return std::nullopt;
        if (errc_name(code) == name) return code;
    }
}

namespace {

std::int64_t system_seconds() {
    return std::chrono::duration_cast<std::chrono::seconds>(
               std::chrono::system_clock::now().time_since_epoch())
        .count();
}

json parse_body(const net::Frame& frame) {
    json j = json::parse(frame.payload.begin(), frame.payload.end(), nullptr, false);
    if (j.is_discarded() || !j.is_object())
        throw Error(Errc::invalid_argument, "malformed request payload");
    return j;
}

template <typename T>
T field(const json& j, const char* key) {
    auto it = j.find(key);
    if (it == j.end()) throw Error(Errc::invalid_argument, std::string("missing field: ") + key);
    try {
        return it->get<T>();
    } catch (const json::exception&) {
        throw Error(Errc::invalid_argument, std::string("bad field: ") + key);
    }
}

net::Frame json_frame(std::uint8_t type, const json& body) {
    std::string text = body.dump();
    net::Frame frame;
    frame.type = type;
    frame.payload.assign(text.begin(), text.end());
    return frame;
}

json descriptor_to_json(const FileDescriptor& d) {
    return json{{"name", d.name},
                {"size", d.size},
                {"extension", d.extension},
                {"content_digest", hex_encode(d.content_digest)}};
}

FileDescriptor descriptor_from_json(const json& j) {
    FileDescriptor d;
    d.name = field<std::string>(j, "name");
    d.size = field<std::uint64_t>(j, "size");
    d.extension = field<std::string>(j, "extension");
    Bytes digest = hex_decode(field<std::string>(j, "content_digest"));
    if (digest.size() != d.content_digest.size())
        throw Error(Errc::invalid_argument, "content_digest must be 32 bytes of hex");
    std::copy(digest.begin(), digest.end(), d.content_digest.begin());
    return d;
}

json meta_to_json(const SwarmMeta& m) {
    json digests = json::array();
    for (const auto& d : m.chunk_digests) digests.push_back(hex_encode(d));
    return json{{"chunk_size", m.chunk_size},
                {"total_chunks", m.total_chunks},
                {"chunk_digests", std::move(digests)}};
}

SwarmMeta meta_from_json(const json& j) {
    SwarmMeta m;
    m.chunk_size = field<std::uint32_t>(j, "chunk_size");
    m.total_chunks = field<std::uint64_t>(j, "total_chunks");
    for (const auto& entry : field<std::vector<std::string>>(j, "chunk_digests")) {
        Bytes raw = hex_decode(entry);
        Digest32 d{};
        if (raw.size() != d.size())
            throw Error(Errc::invalid_argument, "chunk digest must be 32 bytes of hex");
        std::copy(raw.begin(), raw.end(), d.begin());
        m.chunk_digests.push_back(d);
    }
    return m;
}

std::string availability_to_string(const std::vector<bool>& have) {
    std::string s(have.size(), '0');
    for (std::size_t i = 0; i < have.size(); ++i)
        if (have[i]) s[i] = '1';
    return s;
}

std::vector<bool> availability_from_string(const std::string& s) {
    std::vector<bool> have(s.size(), false);
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == '1')
            have[i] = true;
        else if (s[i] != '0')
            throw Error(Errc::invalid_argument, "availability must be a string of 0/1");
    }
    return have;
}

}  // namespace

Server::Server(rendezvous::Registry& registry, ServerOptions opts,
               rendezvous::Registry::Clock clock)
    : registry_(registry), opts_(opts), clock_(clock ? std::move(clock) : system_seconds) {}

Server::~Server() { stop(); }

void Server::start() { start(net::TcpListener::bind(opts_.port)); }

void Server::start(net::TcpListener bound) {
    bool expected = false;
    if (!running_.compare_exchange_strong(expected, true)) return;
    listener_ = std::move(bound);
    accept_thread_ = std::thread([this] { accept_loop(); });
}

void Server::stop() {
    bool expected = true;
    if (!running_.compare_exchange_strong(expected, false)) return;
    listener_.close();
    if (accept_thread_.joinable()) accept_thread_.join();
    std::vector<std::thread> pending;
    {
        std::lock_guard lock(conn_mu_);
        pending.swap(conn_threads_);
    }
    for (auto& t : pending)
        if (t.joinable()) t.join();
}

std::string Server::endpoint() const { return "127.0.0.1:" + std::to_string(port()); }

void Server::log_line(const std::string& line) {
    if (!opts_.log) return;
    std::lock_guard lock(log_mu_);
    (*opts_.log) << line << '\n';
    opts_.log->flush();
}

void Server::accept_loop() {
    while (running_.load()) {
        auto stream = listener_.accept();
        if (!stream) break;
        std::lock_guard lock(conn_mu_);
        conn_threads_.emplace_back(
            [this, s = std::move(*stream)]() mutable { serve(std::move(s)); });
    }
}

void Server::serve(net::TcpStream stream) {
    try {
        while (true) {
            net::Frame request = net::read_frame(stream);
            net::Frame reply = handle(request);
            net::write_frame(stream, reply.type, reply.payload);
        }
    } catch (const Error&) {
        // connection closed or unusable; per-request errors were answered
    } catch (const std::exception&) {
    }
}

net::Frame Server::handle(const net::Frame& request) {
    try {
        const std::int64_t now = clock_();
        switch (request.type) {
            case kMsgRegister: {
                json j = parse_body(request);
                FileDescriptor desc = descriptor_from_json(j);
                auto mode = rendezvous::share_mode_from_name(field<std::string>(j, "mode"));
                if (!mode) throw Error(Errc::invalid_argument, "unknown share mode");
                SharePolicy policy = SharePolicy::defaults(*mode);
                if (j.contains("ttl_seconds")) policy.ttl_seconds = field<std::int64_t>(j, "ttl_seconds");
                if (j.contains("max_downloads"))
                    policy.max_downloads = field<std::uint32_t>(j, "max_downloads");
                RegisterResult r = registry_.register_share(desc, policy, *mode, now);
                if (j.contains("seeder_endpoint"))
                    registry_.set_seeder_endpoint(r.token, field<std::string>(j, "seeder_endpoint"));
                log_line("register token=" + r.token +
                         " mode=" + rendezvous::share_mode_name(*mode) +
                         " size=" + std::to_string(desc.size));
                json body{{"token", r.token}, {"url", r.url}};
                if (r.relay_key) body["relay_key"] = *r.relay_key;
                if (r.swarm_id) body["swarm_id"] = *r.swarm_id;
                return json_frame(kMsgRegister, body);
            }
            case kMsgResolve: {
                json j = parse_body(request);
                ResolveResult r = registry_.resolve_token(field<std::string>(j, "token"), now);
                json body{{"status", rendezvous::status_name(r.status)}};
                if (r.descriptor) body["descriptor"] = descriptor_to_json(*r.descriptor);
                if (r.mode) body["mode"] = rendezvous::share_mode_name(*r.mode);
                if (r.swarm_id) body["swarm_id"] = *r.swarm_id;
                if (r.relay_key) body["relay_key"] = *r.relay_key;
                return json_frame(kMsgResolve, body);
            }
            case kMsgConsume: {
                json j = parse_body(request);
                std::string token = field<std::string>(j, "token");
                ConsumeResult r = registry_.consume_download(token, now);
                log_line(r.granted
                             ? "grant token=" + token + " remaining=" + std::to_string(r.remaining)
                             : "refuse token=" + token + " status=" +
                                   rendezvous::status_name(r.refusal));
                return json_frame(kMsgConsume, json{{"granted", r.granted},
                                                    {"refusal", rendezvous::status_name(r.refusal)},
                                                    {"remaining", r.remaining}});
            }
            case kMsgStatus: {
                json j = parse_body(request);
                Status s = registry_.poll_status(field<std::string>(j, "token"));
                return json_frame(kMsgStatus, json{{"status", rendezvous::status_name(s)}});
            }
            case kMsgJoinSwarm: {
                json j = parse_body(request);
                std::optional<SwarmMeta> meta;
                if (j.contains("meta")) meta = meta_from_json(j.at("meta"));
                JoinResult r = registry_.join_swarm(
                    field<std::string>(j, "swarm_id"), field<std::string>(j, "endpoint"),
                    availability_from_string(field<std::string>(j, "availability")), meta);
                json peers = json::array();
                for (const auto& p : r.peers)
                    peers.push_back(json{{"endpoint", p.endpoint},
                                         {"availability", availability_to_string(p.have)}});
                return json_frame(kMsgJoinSwarm,
                                  json{{"peers", std::move(peers)}, {"meta", meta_to_json(r.meta)}});
            }
            case kMsgRelayPut: {
                json j = parse_body(request);
                std::string key = field<std::string>(j, "key");
                Bytes blob = base64_decode(field<std::string>(j, "blob_b64"));
                registry_.relay_put(key, std::move(blob), now);
                log_line("relay_put key=" + key);
                return json_frame(kMsgRelayPut, json::object());
            }
            case kMsgRelayGet: {
                json j = parse_body(request);
                std::string key = field<std::string>(j, "key");
                RelayGetResult r = registry_.relay_get(key, now);
                log_line(r.granted ? "relay_get key=" + key + " granted"
                                   : "relay_get key=" + key + " refused status=" +
                                         rendezvous::status_name(r.refusal));
                json body{{"granted", r.granted},
                          {"refusal", rendezvous::status_name(r.refusal)}};
                if (r.granted && r.blob) body["blob_b64"] = base64_encode(*r.blob);
                return json_frame(kMsgRelayGet, body);
            }
            default:
                throw Error(Errc::invalid_argument,
                            "unknown message type " + std::to_string(request.type));
        }
    } catch (const Error& err) {
        return json_frame(kMsgError, json{{"code", errc_name(err.code())}, {"message", err.what()}});
    } catch (const std::exception& err) {
        return json_frame(kMsgError,
                          json{{"code", errc_name(Errc::invalid_argument)}, {"message", err.what()}});
    }
}

TcpRendezvous::TcpRendezvous(std::string host, std::uint16_t port)
    : host_(std::move(host)), port_(port) {}

net::Frame TcpRendezvous::roundtrip(std::uint8_t type, const std::string& body) {
    net::TcpStream stream = net::TcpStream::connect(host_, port_);
    stream.set_read_timeout_ms(10000);
    net::write_frame(stream, type,
                     std::span(reinterpret_cast<const std::uint8_t*>(body.data()), body.size()));
    net::Frame reply = net::read_frame(stream);
    if (reply.type == kMsgError) {
        json j = parse_body(reply);
        auto code = errc_from_name(field<std::string>(j, "code"));
        throw Error(code.value_or(Errc::network), field<std::string>(j, "message"));
    }
    if (reply.type != type) throw Error(Errc::network, "mismatched reply type");
    return reply;
}

RegisterResult TcpRendezvous::register_share(const FileDescriptor& descriptor,
                                             const SharePolicy& policy, ShareMode mode,
                                             const std::optional<std::string>& seeder_endpoint) {
    json body = descriptor_to_json(descriptor);
    body["mode"] = rendezvous::share_mode_name(mode);
    body["ttl_seconds"] = policy.ttl_seconds;
    body["max_downloads"] = policy.max_downloads;
    if (seeder_endpoint) body["seeder_endpoint"] = *seeder_endpoint;
    json j = parse_body(roundtrip(kMsgRegister, body.dump()));
    RegisterResult r;
    r.token = field<std::string>(j, "token");
    r.url = field<std::string>(j, "url");
    if (j.contains("relay_key")) r.relay_key = field<std::string>(j, "relay_key");
    if (j.contains("swarm_id")) r.swarm_id = field<std::string>(j, "swarm_id");
    return r;
}

ResolveResult TcpRendezvous::resolve(const std::string& token) {
    json j = parse_body(roundtrip(kMsgResolve, json{{"token", token}}.dump()));
    ResolveResult r;
    auto status = rendezvous::status_from_name(field<std::string>(j, "status"));
    if (!status) throw Error(Errc::network, "unknown status in reply");
    r.status = *status;
    if (j.contains("descriptor")) r.descriptor = descriptor_from_json(j.at("descriptor"));
    if (j.contains("mode")) {
        auto mode = rendezvous::share_mode_from_name(field<std::string>(j, "mode"));
        if (!mode) throw Error(Errc::network, "unknown mode in reply");
        r.mode = *mode;
    }
    if (j.contains("swarm_id")) r.swarm_id = field<std::string>(j, "swarm_id");
    if (j.contains("relay_key")) r.relay_key = field<std::string>(j, "relay_key");
    return r;
}

ConsumeResult TcpRendezvous::consume(const std::string& token) {
    json j = parse_body(roundtrip(kMsgConsume, json{{"token", token}}.dump()));
    ConsumeResult r;
    r.granted = field<bool>(j, "granted");
    auto refusal = rendezvous::status_from_name(field<std::string>(j, "refusal"));
    if (!refusal) throw Error(Errc::network, "unknown refusal in reply");
    r.refusal = *refusal;
    r.remaining = field<std::uint32_t>(j, "remaining");
    return r;
}

Status TcpRendezvous::poll(const std::string& token) {
    json j = parse_body(roundtrip(kMsgStatus, json{{"token", token}}.dump()));
    auto status = rendezvous::status_from_name(field<std::string>(j, "status"));
    if (!status) throw Error(Errc::network, "unknown status in reply");
    return *status;
}

JoinResult TcpRendezvous::join_swarm(const std::string& swarm_id, const std::string& endpoint,
                                     const std::vector<bool>& availability,
                                     const std::optional<SwarmMeta>& meta) {
    json body{{"swarm_id", swarm_id},
              {"endpoint", endpoint},
              {"availability", availability_to_string(availability)}};
    if (meta) body["meta"] = meta_to_json(*meta);
    json j = parse_body(roundtrip(kMsgJoinSwarm, body.dump()));
    JoinResult r;
    for (const auto& entry : field<std::vector<json>>(j, "peers")) {
        SwarmPeer p;
        p.endpoint = field<std::string>(entry, "endpoint");
        p.have = availability_from_string(field<std::string>(entry, "availability"));
        r.peers.push_back(std::move(p));
    }
    r.meta = meta_from_json(j.at("meta"));
    return r;
}

void TcpRendezvous::relay_put(const std::string& key, Bytes blob) {
    roundtrip(kMsgRelayPut, json{{"key", key}, {"blob_b64", base64_encode(blob)}}.dump());
}

RelayGetResult TcpRendezvous::relay_get(const std::string& key) {
    json j = parse_body(roundtrip(kMsgRelayGet, json{{"key", key}}.dump()));
    RelayGetResult r;
    r.granted = field<bool>(j, "granted");
    auto refusal = rendezvous::status_from_name(field<std::string>(j, "refusal"));
    if (!refusal) throw Error(Errc::network, "unknown refusal in reply");
    r.refusal = *refusal;
    if (j.contains("blob_b64"))
        r.blob = std::make_shared<const Bytes>(base64_decode(field<std::string>(j, "blob_b64")));
    return r;
}

}  // namespace covertpipe::wire
