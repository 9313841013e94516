#include "covertpipe/sim.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace covertpipe::sim {

namespace {

constexpr std::size_t kStunBindLen = 20;
constexpr std::size_t kStunConfirmLen = 32;

std::uint64_t ceil_div(std::uint64_t n, std::uint64_t d) { return d == 0 ? 0 : (n + d - 1) / d; }

}  // namespace

std::string_view nat_kind_name(NatKind k) {
    switch (k) {
        case NatKind::none: return "none";
        case NatKind::full_cone: return "full_cone";
        case NatKind::symmetric: return "symmetric";
    }
    return "none";
}

NatKind nat_kind_from_name(std::string_view name) {
    if (name == "none") return NatKind::none;
    if (name == "full_cone") return NatKind::full_cone;
    if (name == "symmetric") return NatKind::symmetric;
    throw Error(Errc::invalid_argument, "unknown nat kind: " + std::string(name));
}

Simulation::Simulation(std::uint64_t seed) : rng_(seed) {}

void Simulation::add_endpoint(const std::string& id, NatKind nat) {
    if (id.empty()) throw Error(Errc::invalid_argument, "empty endpoint id");
    if (endpoints_.contains(id)) throw Error(Errc::conflict, "duplicate endpoint id: " + id);
    Endpoint ep;
    ep.nat = nat;
    ep.private_address = {"10.0.0." + std::to_string(next_host_octet_), 5000};
    ep.public_host = "203.0.113." + std::to_string(next_host_octet_);
    ++next_host_octet_;
    endpoints_.emplace(id, std::move(ep));
}

bool Simulation::has_endpoint(const std::string& id) const { return endpoints_.contains(id); }

Simulation::Endpoint& Simulation::require(const std::string& id) {
    auto it = endpoints_.find(id);
    if (it == endpoints_.end())
        throw Error(Errc::invalid_argument, "endpoint not registered: " + id);
    return it->second;
}

void Simulation::set_stun_server(const std::string& id) {
    require(id);
    stun_server_ = id;
}

void Simulation::set_turn_relay(const std::string& id) {
    require(id);
    turn_relay_ = id;
}

void Simulation::set_signaling_host(const std::string& id) {
    require(id);
    if (!registries_.contains(id)) {
        RegistryOptions opts;
        opts.url_host = id;
        registries_.emplace(id, std::make_unique<Registry>(
                                    opts, Rng(rng_.next_u64()),
                                    [this] { return now_ms_ / 1000; }));
    }
}

void Simulation::set_loss(double drop_probability) {
    if (drop_probability < 0.0 || drop_probability >= 1.0)
        throw Error(Errc::invalid_argument, "loss probability must be in [0, 1)");
    loss_ = drop_probability;
}

Registry& Simulation::registry(const std::string& signaling_host) {
    auto it = registries_.find(signaling_host);
    if (it == registries_.end())
        throw Error(Errc::invalid_argument, "no registry for host: " + signaling_host);
    return *it->second;
}

void Simulation::advance_ms(std::int64_t delta) {
    if (delta < 0) throw Error(Errc::invalid_argument, "clock cannot move backwards");
    now_ms_ += delta;
}

void Simulation::emit(const std::string& src, const std::string& dst, Transport transport,
                      EventKind kind, std::size_t len, std::optional<std::string> meta) {
    FlowEvent ev;
    ev.ts_ms = now_ms_;
    ev.src = src;
    ev.dst = dst;
    ev.transport = transport;
    ev.kind = kind;
    ev.len = static_cast<std::int64_t>(len);
    ev.meta = std::move(meta);
    trace_.events.push_back(std::move(ev));
}

Address Simulation::stun_bind(const std::string& endpoint, const std::string& stun_server) {
    Endpoint& ep = require(endpoint);
    if (!endpoints_.contains(stun_server))
        throw Error(Errc::network, "stun timeout: server unreachable: " + stun_server);

    emit(endpoint, stun_server, Transport::udp, EventKind::stun_bind, kStunBindLen);
    advance_ms(1);
    emit(stun_server, endpoint, Transport::udp, EventKind::stun_confirm, kStunConfirmLen);

    switch (ep.nat) {
        case NatKind::none:
            return ep.private_address;
        case NatKind::full_cone:
            if (!ep.cone_port) ep.cone_port = next_nat_port_++;
            return {ep.public_host, *ep.cone_port};
        case NatKind::symmetric: {
            auto [it, inserted] = ep.symmetric_ports.try_emplace(stun_server, 0);
            if (inserted) it->second = next_nat_port_++;
            return {ep.public_host, it->second};
        }
    }
    return ep.private_address;
}

Path Simulation::establish_path(const std::string& a, const std::string& b) {
    const Endpoint& ea = require(a);
    const Endpoint& eb = require(b);

    if (!registries_.empty()) {
        const std::string& sig = registries_.begin()->first;
        emit(a, sig, Transport::tcp, EventKind::signal, 180, "offer");
        advance_ms(1);
        emit(sig, b, Transport::tcp, EventKind::signal, 180, "offer");
        advance_ms(1);
        emit(b, sig, Transport::tcp, EventKind::signal, 140, "answer");
        advance_ms(1);
        emit(sig, a, Transport::tcp, EventKind::signal, 140, "answer");
        advance_ms(1);
    }
    if (stun_server_) {
        stun_bind(a, *stun_server_);
        advance_ms(1);
        stun_bind(b, *stun_server_);
        advance_ms(1);
    }

    auto admits_inbound = [](NatKind k) { return k == NatKind::none || k == NatKind::full_cone; };

    Path path;
    path.a = a;
    path.b = b;
    path.established_ms = now_ms_;
    path.last_keepalive_ms = now_ms_;
    if (admits_inbound(ea.nat) || admits_inbound(eb.nat)) {
        path.kind = Path::Kind::direct;
        return path;
    }
    if (!turn_relay_)
        throw Error(Errc::path_failure,
                    "both endpoints symmetric and no relay configured: " + a + ", " + b);
    path.kind = Path::Kind::relayed;
    path.relay = *turn_relay_;
    return path;
}

int Simulation::keepalive_tick(Path& path, std::int64_t now_ms) {
    if (path.keepalive_interval_ms <= 0)
        throw Error(Errc::invalid_argument, "keepalive interval must be positive");
    const std::int64_t interval = path.keepalive_interval_ms;
    const std::int64_t done = (path.last_keepalive_ms - path.established_ms) / interval;
    const std::int64_t due = (now_ms - path.established_ms) / interval;
    int pairs = 0;
    for (std::int64_t k = done + 1; k <= due; ++k) {
        now_ms_ = path.established_ms + k * interval;
        if (path.kind == Path::Kind::direct) {
            emit(path.a, path.b, Transport::udp, EventKind::stun_bind, kStunBindLen);
            emit(path.b, path.a, Transport::udp, EventKind::stun_confirm, kStunConfirmLen);
        } else {
            emit(path.a, *path.relay, Transport::udp, EventKind::stun_bind, kStunBindLen);
            emit(*path.relay, path.a, Transport::udp, EventKind::stun_confirm, kStunConfirmLen);
            emit(path.b, *path.relay, Transport::udp, EventKind::stun_bind, kStunBindLen);
            emit(*path.relay, path.b, Transport::udp, EventKind::stun_confirm, kStunConfirmLen);
        }
        ++pairs;
    }
    path.last_keepalive_ms = std::max(path.last_keepalive_ms, now_ms);
    now_ms_ = std::max(now_ms_, now_ms);
    return pairs;
}

bool Simulation::transmit_ok() {
    if (loss_ <= 0.0) return true;
    return rng_.canonical() >= loss_;
}

std::pair<chan::SessionKeys, chan::SessionKeys> Simulation::handshake(const Path& path,
                                                                      bool tamper) {
    auto deliver = [&](const std::string& from, const std::string& to, std::size_t len) {
        for (int attempt = 0; attempt < 3; ++attempt) {
            bool ok = transmit_ok();
            if (ok && path.kind == Path::Kind::relayed) ok = transmit_ok();
            if (ok) {
                if (path.kind == Path::Kind::direct) {
                    emit(from, to, Transport::udp, EventKind::handshake, len);
                } else {
                    emit(from, *path.relay, Transport::udp, EventKind::handshake, len);
                    emit(*path.relay, to, Transport::udp, EventKind::handshake, len);
                }
                advance_ms(1);
                return;
            }
            advance_ms(1);
        }
        throw Error(Errc::handshake_failure, "handshake message lost beyond retry budget");
    };

    chan::HandshakeInitiator initiator(rng_);
    chan::HandshakeResponder responder(rng_);

    Bytes msg1 = initiator.message1();
    deliver(path.a, path.b, msg1.size());
    Bytes msg2 = responder.consume_init(msg1);
    deliver(path.b, path.a, msg2.size());
    if (tamper) msg2[0] ^= 0x01;
    Bytes msg3 = initiator.consume_response(msg2);
    deliver(path.a, path.b, msg3.size());
    responder.consume_finish(msg3);

    return {initiator.session(), responder.session()};
}

void Simulation::send_data(const Path& path, bool from_a, std::size_t len,
                           std::optional<std::string> meta) {
    const std::string& from = from_a ? path.a : path.b;
    const std::string& to = from_a ? path.b : path.a;
    if (path.kind == Path::Kind::direct) {
        emit(from, to, Transport::udp, EventKind::data, len, std::move(meta));
    } else {
        emit(from, *path.relay, Transport::udp, EventKind::data, len, meta);
        emit(*path.relay, to, Transport::udp, EventKind::data, len, std::move(meta));
    }
}

// ---------------------------------------------------------------------------
// Scenario runner

namespace {

using nlohmann::json;

[[noreturn]] void fail_at(const std::string& ptr, const std::string& msg) {
    throw Error(Errc::scenario, ptr + ": " + msg);
}

void check_keys(const json& obj, const std::string& ptr,
                const std::set<std::string>& allowed) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        if (!allowed.contains(it.key())) fail_at(ptr + "/" + it.key(), "unknown key");
    }
}

std::string req_string(const json& obj, const std::string& key, const std::string& ptr) {
    if (!obj.contains(key)) fail_at(ptr, "missing required key '" + key + "'");
    if (!obj[key].is_string()) fail_at(ptr + "/" + key, "expected a string");
    return obj[key].get<std::string>();
}

std::int64_t opt_int(const json& obj, const std::string& key, std::int64_t fallback,
                     const std::string& ptr) {
    if (!obj.contains(key)) return fallback;
    if (!obj[key].is_number_integer()) fail_at(ptr + "/" + key, "expected an integer");
    return obj[key].get<std::int64_t>();
}

std::string errc_label(Errc code) {
    switch (code) {
        case Errc::invalid_token: return "invalid_token";
        case Errc::handshake_failure: return "handshake_failure";
        case Errc::path_failure: return "path_failure";
        case Errc::verification: return "verification";
        default: return "error";
    }
}

struct ShareInfo {
    std::string owner;
    rendezvous::ShareMode mode = rendezvous::ShareMode::direct;
    Bytes content;
    std::uint32_t chunk_size = 65536;
    std::string token;
    std::string url;
    std::optional<std::string> relay_key;
    std::string relay_style = "pipebytes";
};

class ScenarioRunner {
  public:
    explicit ScenarioRunner(const json& doc) : doc_(doc), simulation_(seed_of(doc)) {}

    TraceLog run() {
        load_topology();
        const json actions = doc_.value("actions", json::array());
        if (!actions.is_array()) fail_at("/actions", "expected an array");
        for (std::size_t i = 0; i < actions.size(); ++i)
            run_action(actions[i], "/actions/" + std::to_string(i));
        return std::move(simulation_.trace());
    }

  private:
    static std::uint64_t seed_of(const json& doc) {
        if (!doc.is_object()) fail_at("", "scenario must be a JSON object");
        if (doc.contains("seed") && !doc["seed"].is_number_integer())
            fail_at("/seed", "expected an integer");
        return doc.value("seed", 0ull);
    }

    void load_topology() {
        check_keys(doc_, "", {"seed", "signaling_host", "stun_server", "turn_relay",
                              "web_hosts", "loss", "endpoints", "actions"});

        const json endpoints = doc_.value("endpoints", json::array());
        if (!endpoints.is_array()) fail_at("/endpoints", "expected an array");
        for (std::size_t i = 0; i < endpoints.size(); ++i) {
            const std::string ptr = "/endpoints/" + std::to_string(i);
            const json& ep = endpoints[i];
            if (!ep.is_object()) fail_at(ptr, "expected an object");
            check_keys(ep, ptr, {"id", "nat"});
            std::string id = req_string(ep, "id", ptr);
            std::string nat = ep.value("nat", "none");
            if (simulation_.has_endpoint(id)) fail_at(ptr + "/id", "duplicate endpoint id");
            NatKind kind;
            try {
                kind = nat_kind_from_name(nat);
            } catch (const Error&) {
                fail_at(ptr + "/nat", "expected none|full_cone|symmetric");
            }
            simulation_.add_endpoint(id, kind);
        }

        auto add_infra = [&](const std::string& key) -> std::optional<std::string> {
            if (!doc_.contains(key)) return std::nullopt;
            if (!doc_[key].is_string()) fail_at("/" + key, "expected a string");
            std::string id = doc_[key].get<std::string>();
            if (!simulation_.has_endpoint(id)) simulation_.add_endpoint(id, NatKind::none);
            return id;
        };
        if (auto id = add_infra("signaling_host")) {
            signaling_ = *id;
            simulation_.set_signaling_host(*id);
        }
        if (auto id = add_infra("stun_server")) simulation_.set_stun_server(*id);
        if (auto id = add_infra("turn_relay")) simulation_.set_turn_relay(*id);

        const json web = doc_.value("web_hosts", json::array());
        if (!web.is_array()) fail_at("/web_hosts", "expected an array");
        for (std::size_t i = 0; i < web.size(); ++i) {
            if (!web[i].is_string()) fail_at("/web_hosts/" + std::to_string(i), "expected a string");
            std::string id = web[i].get<std::string>();
            if (!simulation_.has_endpoint(id)) simulation_.add_endpoint(id, NatKind::none);
            web_hosts_.insert(id);
        }

        if (doc_.contains("loss")) {
            if (!doc_["loss"].is_number()) fail_at("/loss", "expected a number");
            simulation_.set_loss(doc_["loss"].get<double>());
        }
    }

    void run_action(const json& action, const std::string& ptr) {
        if (!action.is_object()) fail_at(ptr, "expected an object");
        std::string op = req_string(action, "op", ptr);
        if (op == "offer")
            run_offer(action, ptr);
        else if (op == "fetch")
            run_fetch(action, ptr);
        else if (op == "browse")
            run_browse(action, ptr);
        else if (op == "wait")
            run_wait(action, ptr);
        else
            fail_at(ptr + "/op", "unknown op '" + op + "'");
    }

    Bytes load_content(const json& action, const std::string& ptr) {
        if (!action.contains("content")) fail_at(ptr, "missing required key 'content'");
        const json& c = action["content"];
        if (!c.is_object()) fail_at(ptr + "/content", "expected an object");
        check_keys(c, ptr + "/content", {"kind", "size", "seed", "base64"});
        std::string kind = c.value("kind", "random");
        if (kind == "random") {
            std::int64_t size = opt_int(c, "size", -1, ptr + "/content");
            if (size < 0) fail_at(ptr + "/content/size", "required non-negative integer");
            std::uint64_t seed = static_cast<std::uint64_t>(opt_int(c, "seed", 0, ptr + "/content"));
            return random_bytes(static_cast<std::size_t>(size), seed);
        }
        if (kind == "literal") {
            if (!c.contains("base64") || !c["base64"].is_string())
                fail_at(ptr + "/content/base64", "required string for literal content");
            try {
                return base64_decode(c["base64"].get<std::string>());
            } catch (const Error&) {
                fail_at(ptr + "/content/base64", "invalid base64");
            }
        }
        fail_at(ptr + "/content/kind", "expected random|literal");
    }

    std::string require_actor(const json& action, const std::string& ptr) {
        std::string actor = req_string(action, "actor", ptr);
        if (!simulation_.has_endpoint(actor)) fail_at(ptr + "/actor", "unknown endpoint '" + actor + "'");
        return actor;
    }

    void require_signaling(const std::string& ptr) {
        if (signaling_.empty()) fail_at(ptr, "action requires a signaling_host");
    }

    void signal(const std::string& from, const std::string& to, std::size_t len,
                const std::string& meta) {
        simulation_.emit(from, to, Transport::tcp, EventKind::signal, len, meta);
        simulation_.advance_ms(1);
    }

    void run_offer(const json& action, const std::string& ptr) {
        check_keys(action, ptr,
                   {"op", "actor", "share", "mode", "content", "ttl", "max_downloads",
                    "chunk_size", "relay_style", "transfer_ms"});
        require_signaling(ptr);
        std::string actor = require_actor(action, ptr);
        std::string share = req_string(action, "share", ptr);
        if (shares_.contains(share)) fail_at(ptr + "/share", "duplicate share name");
        std::string mode_name = action.value("mode", "direct");
        auto mode = rendezvous::share_mode_from_name(mode_name);
        if (!mode) fail_at(ptr + "/mode", "expected direct|relay");

        ShareInfo info;
        info.owner = actor;
        info.mode = *mode;
        info.content = load_content(action, ptr);
        std::int64_t chunk_size = opt_int(action, "chunk_size", 65536, ptr);
        if (chunk_size <= 0) fail_at(ptr + "/chunk_size", "must be positive");
        info.chunk_size = static_cast<std::uint32_t>(chunk_size);
        info.relay_style = action.value("relay_style", "pipebytes");
        if (info.relay_style != "pipebytes" && info.relay_style != "justbeamit")
            fail_at(ptr + "/relay_style", "expected pipebytes|justbeamit");

        rendezvous::SharePolicy policy = rendezvous::SharePolicy::defaults(*mode);
        policy.ttl_seconds = opt_int(action, "ttl", policy.ttl_seconds, ptr);
        std::int64_t maxdl = opt_int(action, "max_downloads", policy.max_downloads, ptr);
        if (maxdl <= 0) fail_at(ptr + "/max_downloads", "must be positive");
        policy.max_downloads = static_cast<std::uint32_t>(maxdl);

        rendezvous::FileDescriptor desc;
        desc.name = share;
        desc.size = info.content.size();
        desc.extension = "bin";
        desc.content_digest = sha3_256(info.content);

        auto& registry = simulation_.registry(signaling_);
        auto reg = registry.register_share(desc, policy, *mode, simulation_.now_ms() / 1000);
        info.token = reg.token;
        info.url = reg.url;
        info.relay_key = reg.relay_key;

        if (*mode == rendezvous::ShareMode::direct) {
            signal(actor, signaling_, 220, "register " + reg.token);
            signal(signaling_, actor, 120, "registered");
            const std::uint64_t chunks = ceil_div(info.content.size(), info.chunk_size);
            rendezvous::SwarmMeta meta;
            meta.chunk_size = info.chunk_size;
            meta.total_chunks = chunks;
            for (std::uint64_t i = 0; i < chunks; ++i) {
                std::size_t off = static_cast<std::size_t>(i) * info.chunk_size;
                std::size_t n = std::min<std::size_t>(info.chunk_size, info.content.size() - off);
                meta.chunk_digests.push_back(
                    sha3_256(std::span(info.content.data() + off, n)));
            }
            registry.set_seeder_endpoint(reg.token, actor);
            registry.join_swarm(*reg.swarm_id, actor,
                                std::vector<bool>(chunks, true), meta);
            signal(actor, signaling_, 96 + 32 * chunks, "join " + *reg.swarm_id);
            signal(signaling_, actor, 80, "joined");
        } else {
            upload_relay_blob(action, ptr, actor, info, registry);
        }
        shares_.emplace(share, std::move(info));
    }

    void upload_relay_blob(const json& action, const std::string& ptr, const std::string& actor,
                           const ShareInfo& info, rendezvous::Registry& registry) {
        const std::uint64_t chunks = ceil_div(info.content.size(), info.chunk_size);
        std::string line = info.relay_style == "pipebytes"
                               ? "POST /put.php?key=" + *info.relay_key
                               : "POST /upload";
        simulation_.emit(actor, signaling_, Transport::tcp, EventKind::http_post,
                         line.size() + 140, line);
        simulation_.advance_ms(1);
        std::int64_t transfer_ms = opt_int(action, "transfer_ms",
                                           static_cast<std::int64_t>(chunks) * 5, ptr);
        if (transfer_ms < 0) fail_at(ptr + "/transfer_ms", "must be non-negative");
        const std::int64_t start = simulation_.now_ms();
        for (std::uint64_t i = 0; i < chunks; ++i) {
            std::size_t off = static_cast<std::size_t>(i) * info.chunk_size;
            std::size_t n = std::min<std::size_t>(info.chunk_size, info.content.size() - off);
            std::int64_t ts = chunks ? start + ((i + 1) * transfer_ms) / chunks : start;
            simulation_.advance_ms(ts - simulation_.now_ms());
            simulation_.emit(actor, signaling_, Transport::tcp, EventKind::data, n,
                             std::to_string(i) + ":" +
                                 base64_encode(std::span(info.content.data() + off, n)));
        }
        simulation_.advance_ms(std::max<std::int64_t>(0, start + transfer_ms - simulation_.now_ms()));
        registry.relay_put(*info.relay_key, info.content, simulation_.now_ms() / 1000);
        simulation_.advance_ms(1);
    }

    void run_fetch(const json& action, const std::string& ptr) {
        check_keys(action, ptr,
                   {"op", "actor", "share", "transfer_ms", "tamper_handshake", "expect"});
        require_signaling(ptr);
        std::string actor = require_actor(action, ptr);
        std::string share = req_string(action, "share", ptr);
        auto it = shares_.find(share);
        if (it == shares_.end()) fail_at(ptr + "/share", "unknown share '" + share + "'");
        std::string expect = action.value("expect", "ok");

        try {
            if (it->second.mode == rendezvous::ShareMode::direct)
                fetch_direct(action, ptr, actor, it->second);
            else
                fetch_relay(action, ptr, actor, it->second);
        } catch (const Error& err) {
            std::string label = errc_label(err.code());
            if (expect == label) return;
            throw;
        }
        if (expect != "ok")
            fail_at(ptr + "/expect", "expected failure '" + expect + "' did not occur");
    }

    void fetch_direct(const json& action, const std::string& ptr, const std::string& actor,
                      const ShareInfo& info) {
        auto& registry = simulation_.registry(signaling_);
        signal(actor, signaling_, 80, "resolve " + info.token);
        auto resolved = registry.resolve_token(info.token, simulation_.now_ms() / 1000);
        signal(signaling_, actor, 140, "status " + std::string(rendezvous::status_name(resolved.status)));
        signal(actor, signaling_, 72, "consume " + info.token);
        auto grant = registry.consume_download(info.token, simulation_.now_ms() / 1000);
        if (!grant.granted) {
            signal(signaling_, actor, 64, "refused " + std::string(rendezvous::status_name(grant.refusal)));
            throw Error(Errc::invalid_token,
                        "download refused: " + std::string(rendezvous::status_name(grant.refusal)));
        }
        signal(signaling_, actor, 64, "granted");

        Path path = simulation_.establish_path(actor, info.owner);
        bool tamper = action.value("tamper_handshake", false);
        simulation_.handshake(path, tamper);

        const std::uint64_t chunks = ceil_div(info.content.size(), info.chunk_size);
        simulation_.send_data(path, true, chan::kSealOverhead + 1);
        simulation_.advance_ms(1);
        simulation_.send_data(path, false, chan::kSealOverhead + 17 + 32 * chunks);
        simulation_.advance_ms(1);

        std::int64_t transfer_ms = opt_int(action, "transfer_ms",
                                           static_cast<std::int64_t>(chunks) * 5, ptr);
        if (transfer_ms < 0) fail_at(ptr + "/transfer_ms", "must be non-negative");
        const std::int64_t start = simulation_.now_ms();
        for (std::uint64_t i = 0; i < chunks; ++i) {
            std::size_t off = static_cast<std::size_t>(i) * info.chunk_size;
            std::size_t n = std::min<std::size_t>(info.chunk_size, info.content.size() - off);
            std::int64_t ts = start + ((i + 1) * transfer_ms) / chunks;
            simulation_.keepalive_tick(path, ts);
            simulation_.advance_ms(ts - simulation_.now_ms());
            simulation_.send_data(path, true, chan::kSealOverhead + 9);
            simulation_.send_data(path, false, chan::kSealOverhead + 9 + n);
        }
        simulation_.keepalive_tick(path, start + transfer_ms);
        simulation_.advance_ms(std::max<std::int64_t>(0, start + transfer_ms - simulation_.now_ms()));
        signal(actor, signaling_, 64, "complete " + info.token);
    }

    void fetch_relay(const json& action, const std::string& ptr, const std::string& actor,
                     const ShareInfo& info) {
        auto& registry = simulation_.registry(signaling_);
        std::string line = info.relay_style == "pipebytes"
                               ? "GET /get.php?key=" + *info.relay_key
                               : "GET /" + info.token;
        simulation_.emit(actor, signaling_, Transport::tcp, EventKind::http_get,
                         line.size() + 130, line);
        simulation_.advance_ms(1);

        auto got = registry.relay_get(*info.relay_key, simulation_.now_ms() / 1000);
        if (!got.granted)
            throw Error(Errc::invalid_token,
                        "relay refused: " + std::string(rendezvous::status_name(got.refusal)));
        const Bytes& blob = *got.blob;
        const std::uint64_t chunks = ceil_div(blob.size(), info.chunk_size);
        std::int64_t transfer_ms = opt_int(action, "transfer_ms",
                                           static_cast<std::int64_t>(chunks) * 5, ptr);
        if (transfer_ms < 0) fail_at(ptr + "/transfer_ms", "must be non-negative");
        const std::int64_t start = simulation_.now_ms();
        for (std::uint64_t i = 0; i < chunks; ++i) {
            std::size_t off = static_cast<std::size_t>(i) * info.chunk_size;
            std::size_t n = std::min<std::size_t>(info.chunk_size, blob.size() - off);
            std::int64_t ts = start + ((i + 1) * transfer_ms) / chunks;
            simulation_.advance_ms(ts - simulation_.now_ms());
            simulation_.emit(signaling_, actor, Transport::tcp, EventKind::data, n,
                             std::to_string(i) + ":" +
                                 base64_encode(std::span(blob.data() + off, n)));
        }
        simulation_.advance_ms(std::max<std::int64_t>(0, start + transfer_ms - simulation_.now_ms()));
    }

    void run_browse(const json& action, const std::string& ptr) {
        check_keys(action, ptr, {"op", "actor", "host", "requests"});
        std::string actor = require_actor(action, ptr);
        std::string host = req_string(action, "host", ptr);
        if (!simulation_.has_endpoint(host)) fail_at(ptr + "/host", "unknown host '" + host + "'");
        std::int64_t requests = opt_int(action, "requests", 6, ptr);
        if (requests < 0) fail_at(ptr + "/requests", "must be non-negative");

        Rng& rng = simulation_.rng();
        static const char* kTemplates[] = {"/index.html", "/news/story-%.html",
                                           "/assets/app-%.js", "/media/clip-%.mp4",
                                           "/about-us.html", "/search?q=headline%"};
        for (std::int64_t r = 0; r < requests; ++r) {
            std::string tpl = kTemplates[rng.below(std::size(kTemplates))];
            std::string path;
            for (char c : tpl) {
                if (c == '%')
                    path += std::to_string(100 + rng.below(900));
                else
                    path += c;
            }
            std::string line = "GET " + path;
            simulation_.emit(actor, host, Transport::tcp, EventKind::http_get,
                             line.size() + 160, line);
            simulation_.advance_ms(5 + rng.below(40));
            int bodies = 1 + static_cast<int>(rng.below(2));
            for (int b = 0; b < bodies; ++b) {
                simulation_.emit(host, actor, Transport::tcp, EventKind::data,
                                 400 + rng.below(60000));
                simulation_.advance_ms(3 + rng.below(25));
            }
            simulation_.advance_ms(20 + rng.below(200));
        }
    }

    void run_wait(const json& action, const std::string& ptr) {
        check_keys(action, ptr, {"op", "ms"});
        std::int64_t ms = opt_int(action, "ms", -1, ptr);
        if (ms < 0) fail_at(ptr + "/ms", "required non-negative integer");
        simulation_.advance_ms(ms);
    }

    const json& doc_;
    Simulation simulation_;
    std::string signaling_;
    std::set<std::string> web_hosts_;
    std::map<std::string, ShareInfo> shares_;
};

}  // namespace

TraceLog run_scenario(const std::string& script_json) {
    json doc;
    try {
        doc = json::parse(script_json);
    } catch (const json::parse_error& err) {
        std::size_t line = 1;
        for (std::size_t i = 0; i + 1 < err.byte && i < script_json.size(); ++i)
            if (script_json[i] == '\n') ++line;
        throw Error(Errc::scenario,
                    "parse error at line " + std::to_string(line) + ": " + err.what());
    }
    return ScenarioRunner(doc).run();
}

TraceLog run_scenario_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(Errc::io, "cannot open scenario file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return run_scenario(buf.str());
}

}  // namespace covertpipe::sim
