#include <atomic>
#include <chrono>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "covertpipe/config.hpp"
#include "covertpipe/detector.hpp"
#include "covertpipe/hs.hpp"
#include "covertpipe/peer.hpp"
#include "covertpipe/sim.hpp"
#include "covertpipe/wire.hpp"

namespace {

using namespace covertpipe;
using nlohmann::json;

std::atomic<bool> g_stop{false};

void handle_signal(int) { g_stop.store(true); }

void install_signal_handlers() {
    std::signal(SIGINT, handle_signal);
    std::signal(SIGTERM, handle_signal);
}

int exit_code_for(Errc code) {
    switch (code) {
        case Errc::invalid_token:
        case Errc::not_found:
            return 2;
        case Errc::network:
        case Errc::path_failure:
        case Errc::handshake_failure:
        case Errc::introduction_failure:
            return 3;
        case Errc::verification:
        case Errc::authentication:
        case Errc::integrity:
        case Errc::replay:
            return 4;
        default:
            return 5;
    }
}

Bytes read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(Errc::io, "cannot open file: " + path);
    Bytes bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw Error(Errc::io, "failed reading file: " + path);
    return bytes;
}

std::string read_file_text(const std::string& path) {
    Bytes bytes = read_file_bytes(path);
    return std::string(bytes.begin(), bytes.end());
}

void write_file_bytes(const std::string& path, const Bytes& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::io, "cannot open output file: " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(Errc::io, "failed writing output file: " + path);
}

Config load_config(const std::string& flag_path) {
    if (!flag_path.empty()) return Config::load_file(flag_path);
    return Config::load_default();
}

// "scheme://host:port/token" → "host:port"; anything else → nullopt.
std::optional<std::string> url_endpoint(const std::string& url) {
    auto scheme = url.find("://");
    if (scheme == std::string::npos) return std::nullopt;
    auto start = scheme + 3;
    auto slash = url.find('/', start);
    std::string authority =
        slash == std::string::npos ? url.substr(start) : url.substr(start, slash - start);
    try {
        parse_host_port(authority);
    } catch (const Error&) {
        return std::nullopt;
    }
    return authority;
}

std::string sanitize_filename(const std::string& name) {
    std::string out;
    for (char c : name)
        out.push_back(std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-' ? c
                                                                                          : '_');
    return out;
}

// --- serve ---

struct ServeArgs {
    std::string listen;
    std::string config;
};

int cmd_serve(const ServeArgs& args) {
    Config cfg = load_config(args.config);
    const std::string listen = args.listen.empty() ? cfg.listen : args.listen;
    auto [host, port] = parse_host_port(listen);

    net::TcpListener listener = net::TcpListener::bind(port);

    rendezvous::RegistryOptions ropts;
    ropts.url_host = host;
    ropts.url_port = listener.port();
    ropts.relay_spill_threshold = cfg.relay_spill_threshold_bytes;
    rendezvous::Registry registry(ropts);

    wire::ServerOptions sopts;
    sopts.log = &std::cout;
    wire::Server server(registry, sopts);
    server.start(std::move(listener));
    std::cout << "listening on 127.0.0.1:" << server.port() << std::endl;

    install_signal_handlers();
    while (!g_stop.load()) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    server.stop();
    return 0;
}

// --- send ---

struct SendArgs {
    std::string file;
    std::string mode = "direct";
    std::int64_t ttl = 0;
    bool ttl_set = false;
    std::uint32_t max_downloads = 0;
    bool max_downloads_set = false;
    std::uint32_t chunk_size = 0;
    bool chunk_size_set = false;
    std::string server;
    std::string config;
    bool no_wait = false;
};

int cmd_send(const SendArgs& args) {
    Config cfg = load_config(args.config);
    Bytes content = read_file_bytes(args.file);

    auto mode = rendezvous::share_mode_from_name(args.mode);
    if (!mode) throw Error(Errc::invalid_argument, "mode must be direct or relay");

    auto [host, port] = parse_host_port(args.server.empty() ? cfg.listen : args.server);
    wire::TcpRendezvous client(host, port);

    rendezvous::SharePolicy policy = rendezvous::SharePolicy::defaults(*mode);
    policy.ttl_seconds = *mode == rendezvous::ShareMode::direct ? cfg.ttl_direct_seconds
                                                                : cfg.ttl_relay_seconds;
    if (args.ttl_set) policy.ttl_seconds = args.ttl;
    if (args.max_downloads_set) policy.max_downloads = args.max_downloads;
    if (policy.ttl_seconds <= 0) throw Error(Errc::invalid_argument, "ttl must be positive");
    if (policy.max_downloads == 0)
        throw Error(Errc::invalid_argument, "max-downloads must be positive");

    peer::OfferOptions oopts;
    oopts.chunk_size = args.chunk_size_set ? args.chunk_size : cfg.chunk_size;

    peer::Offer offer = peer::offer_file(content, policy, *mode, client, oopts);
    std::cout << offer.url << std::endl;

    if (*mode == rendezvous::ShareMode::direct && !args.no_wait) {
        install_signal_handlers();
        while (!g_stop.load()) {
            rendezvous::Status status = client.poll(offer.token);
            if (status == rendezvous::Status::exhausted ||
                status == rendezvous::Status::expired) {
                // let the final grantee reach the seeder before shutdown
                std::this_thread::sleep_for(std::chrono::milliseconds(500));
                break;
            }
            std::this_thread::sleep_for(std::chrono::milliseconds(50));
        }
    }
    offer.stop();
    return 0;
}

// --- recv ---

struct RecvArgs {
    std::string url;
    std::string out;
    std::string server;
    std::string config;
    bool tamper = false;
};

int cmd_recv(const RecvArgs& args) {
    Config cfg = load_config(args.config);
    std::string server = args.server;
    if (server.empty()) server = url_endpoint(args.url).value_or(cfg.listen);
    auto [host, port] = parse_host_port(server);
    wire::TcpRendezvous client(host, port);

    peer::FetchOptions fopts;
    fopts.tamper = args.tamper;
    Bytes bytes = peer::fetch(args.url, client, fopts);

    std::string out = args.out.empty() ? peer::token_from_url(args.url) : args.out;
    write_file_bytes(out, bytes);
    std::cout << out << std::endl;
    return 0;
}

// --- simulate ---

struct SimulateArgs {
    std::string scenario;
    std::string trace;
    std::uint64_t seed = 0;
    bool seed_set = false;
};

int cmd_simulate(const SimulateArgs& args) {
    std::string text = read_file_text(args.scenario);
    if (args.seed_set) {
        json j = json::parse(text, nullptr, false);
        if (!j.is_discarded() && j.is_object()) {
            j["seed"] = args.seed;
            text = j.dump();
        }
    }

    TraceLog log = sim::run_scenario(text);

    std::ofstream file;
    std::ostream* out = &std::cout;
    std::ostream* summary = &std::cerr;
    if (!args.trace.empty()) {
        file.open(args.trace, std::ios::binary | std::ios::trunc);
        if (!file) throw Error(Errc::io, "cannot open trace output: " + args.trace);
        out = &file;
        summary = &std::cout;
    }
    log.write_ndjson(*out);
    out->flush();
    if (!args.trace.empty() && !file)
        throw Error(Errc::io, "failed writing trace output: " + args.trace);

    std::set<FlowKey> flows;
    std::int64_t lo = log.events.empty() ? 0 : log.events.front().ts_ms;
    std::int64_t hi = lo;
    for (const FlowEvent& ev : log.events) {
        flows.insert(FlowKey::of(ev));
        lo = std::min(lo, ev.ts_ms);
        hi = std::max(hi, ev.ts_ms);
    }
    *summary << "events=" << log.events.size() << " flows=" << flows.size()
             << " duration_ms=" << (hi - lo) << std::endl;
    return 0;
}

// --- detect ---

struct DetectArgs {
    std::string trace;
    double stun_threshold = 0.0;
    bool stun_threshold_set = false;
    std::string blacklist;
    std::string reconstruct;
};

int cmd_detect(const DetectArgs& args) {
    Config cfg = Config::load_default();
    detect::IngestResult ingested = detect::ingest_file(args.trace);

    detect::StunOptions opts;
    opts.threshold_pairs_per_s =
        args.stun_threshold_set ? args.stun_threshold : cfg.stun_threshold_pairs_per_s;
    if (!(opts.threshold_pairs_per_s > 0))
        throw Error(Errc::invalid_argument, "stun threshold must be positive");

    std::vector<detect::Verdict> verdicts = detect::classify(ingested.log, opts);
    for (const auto& v : verdicts) std::cout << v.to_json_line() << '\n';
    std::cout.flush();

    if (!args.blacklist.empty()) {
        std::ofstream out(args.blacklist, std::ios::trunc);
        if (!out) throw Error(Errc::io, "cannot open blacklist output: " + args.blacklist);
        for (const auto& rule : detect::emit_blacklist(verdicts))
            out << rule.pattern << " # " << rule.rationale << '\n';
        if (!out) throw Error(Errc::io, "failed writing blacklist: " + args.blacklist);
    }

    if (!args.reconstruct.empty()) {
        std::filesystem::create_directories(args.reconstruct);
        for (const auto& v : verdicts) {
            if (v.label != detect::Label::cleartext_transfer) continue;
            detect::Reconstruction rec = detect::reconstruct_cleartext(ingested.log, v.flow);
            if (!rec.bytes) continue;
            std::filesystem::path path =
                std::filesystem::path(args.reconstruct) / (sanitize_filename(v.flow.str()) + ".bin");
            write_file_bytes(path.string(), *rec.bytes);
            std::cerr << "reconstructed " << rec.bytes->size() << " bytes to " << path.string()
                      << (rec.partial ? " (partial: gaps in captured sequence)" : "") << '\n';
        }
    }
    return 0;
}

// --- hs ---

struct HsArgs {
    std::string dht;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::int64_t now = 0;
    int relays = 12;
    bool strict_disjoint = false;
    std::string onion;
    std::string client = "client-1";
    std::string obs_log;
    std::int64_t from_period = 0;
    std::int64_t to_period = 0;
    int attacker_nodes = 1;
    bool release = false;
};

json descriptor_json(const hs::HsDescriptor& d) {
    return json{{"onion_id", d.onion_id},
                {"intro_relays", d.intro_relays},
                {"time_period", d.time_period},
                {"identity_public", hex_encode(d.identity_public)},
                {"signature", hex_encode(d.signature)}};
}

hs::HsWorld load_or_create_world(const HsArgs& args) {
    if (std::filesystem::exists(args.dht)) return hs::load_world(args.dht);
    hs::HsWorld world;
    world.add_relays(args.relays);
    return world;
}

Rng make_rng(const HsArgs& args) {
    return args.seed_set ? Rng(args.seed) : Rng::from_entropy();
}

int cmd_hs_publish(const HsArgs& args) {
    hs::HsWorld world = load_or_create_world(args);
    if (static_cast<int>(world.relay_pool.size()) < args.relays)
        world.add_relays(args.relays - static_cast<int>(world.relay_pool.size()));
    Rng rng = make_rng(args);

    hs::HsDescriptor descriptor;
    if (!args.onion.empty()) {
        auto it = world.services.find(args.onion);
        if (it == world.services.end())
            throw Error(Errc::not_found, "no service with onion id " + args.onion);
        descriptor =
            hs::publish_descriptor(world, it->second.identity, it->second.intro_circuits, args.now);
    } else {
        hs::HsIdentity identity = hs::gen_identity(rng);
        auto circuits = hs::build_intro_circuits(world.relay_pool, rng, args.strict_disjoint);
        descriptor = hs::publish_descriptor(world, identity, circuits, args.now);
    }
    hs::save_world(world, args.dht);
    std::cout << descriptor_json(descriptor).dump() << std::endl;
    return 0;
}

int cmd_hs_lookup(const HsArgs& args) {
    hs::HsWorld world = load_or_create_world(args);
    hs::HsDescriptor descriptor = hs::lookup_descriptor(world, args.onion, args.now);
    std::cout << descriptor_json(descriptor).dump() << std::endl;
    return 0;
}

int cmd_hs_rendezvous(const HsArgs& args) {
    hs::HsWorld world = load_or_create_world(args);
    Rng rng = make_rng(args);
    hs::RendezvousResult result =
        hs::connect_service(world, args.client, args.onion, args.now, rng);

    json out{{"rp", result.circuit.rp},
             {"client_circuit", result.circuit.client_circuit.relays},
             {"service_circuit", result.circuit.service_circuit.relays},
             {"probe_delivered", result.probe_delivered}};
    std::cout << out.dump() << std::endl;

    if (!args.obs_log.empty()) {
        std::ofstream obs(args.obs_log, std::ios::trunc);
        if (!obs) throw Error(Errc::io, "cannot open observation log: " + args.obs_log);
        for (const auto& rec : result.observations) obs << rec.to_json_line() << '\n';
        if (!obs) throw Error(Errc::io, "failed writing observation log: " + args.obs_log);
    } else {
        for (const auto& rec : result.observations) std::cout << rec.to_json_line() << '\n';
    }
    return 0;
}

int cmd_hs_harvest(const HsArgs& args) {
    hs::HsWorld world = load_or_create_world(args);
    auto ids = hs::harvest_dht(world, args.attacker_nodes, args.from_period, args.to_period);
    for (const auto& id : ids) std::cout << id << '\n';
    std::cerr << "harvested " << ids.size() << " onion ids" << std::endl;
    return 0;
}

int cmd_hs_impersonate(const HsArgs& args) {
    hs::HsWorld world = load_or_create_world(args);
    if (args.release) {
        world.dht.release(args.onion);
        std::cout << "released " << args.onion << std::endl;
    } else {
        hs::impersonate_directories(world, args.onion);
        std::cout << "impersonation active for " << args.onion << std::endl;
    }
    hs::save_world(world, args.dht);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "covertpipe: rendezvous server, covert file transfer, traffic simulator, "
        "hidden-service sandbox, and trace detector"};
    app.require_subcommand(1);

    ServeArgs serve_args;
    auto* serve = app.add_subcommand("serve", "Run the rendezvous server");
    serve->add_option("--listen", serve_args.listen, "Listen address host:port");
    serve->add_option("--config", serve_args.config, "Config file path");

    SendArgs send_args;
    auto* send = app.add_subcommand("send", "Share a file and print its one-time URL");
    send->add_option("file", send_args.file, "File to share")->required();
    send->add_option("--mode", send_args.mode, "Share mode: direct or relay");
    auto* ttl_opt = send->add_option("--ttl", send_args.ttl, "Time to live in seconds");
    auto* max_opt =
        send->add_option("--max-downloads", send_args.max_downloads, "Download grant budget");
    auto* chunk_opt = send->add_option("--chunk-size", send_args.chunk_size, "Chunk size in bytes");
    send->add_option("--server", send_args.server, "Rendezvous server host:port");
    send->add_option("--config", send_args.config, "Config file path");
    send->add_flag("--no-wait", send_args.no_wait, "Exit after registering instead of seeding");

    RecvArgs recv_args;
    auto* recv = app.add_subcommand("recv", "Fetch a shared file by URL");
    recv->add_option("url", recv_args.url, "Share URL or bare token")->required();
    recv->add_option("--out", recv_args.out, "Output file path (default: the token)");
    recv->add_option("--server", recv_args.server, "Rendezvous server host:port");
    recv->add_option("--config", recv_args.config, "Config file path");
    recv->add_flag("--tamper", recv_args.tamper,
                   "Fault injection: corrupt one received frame in transit");

    SimulateArgs sim_args;
    auto* simulate = app.add_subcommand("simulate", "Run a scenario and emit its trace");
    simulate->add_option("scenario", sim_args.scenario, "Scenario JSON file")->required();
    simulate->add_option("--trace", sim_args.trace, "Write NDJSON trace to this file");
    auto* seed_opt = simulate->add_option("--seed", sim_args.seed, "Override the scenario seed");

    DetectArgs detect_args;
    auto* detect_cmd = app.add_subcommand("detect", "Analyze a trace and print verdicts");
    detect_cmd->add_option("trace", detect_args.trace, "NDJSON trace file")->required();
    auto* thr_opt = detect_cmd->add_option("--stun-threshold", detect_args.stun_threshold,
                                           "Keepalive pairs per second that flag a flow");
    detect_cmd->add_option("--emit-blacklist", detect_args.blacklist,
                           "Write firewall patterns to this file");
    detect_cmd->add_option("--reconstruct", detect_args.reconstruct,
                           "Write recovered cleartext payloads into this directory");

    HsArgs hs_args;
    auto* hs_cmd = app.add_subcommand("hs", "Hidden-service lifecycle sandbox");
    hs_cmd->require_subcommand(1);
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--dht", hs_args.dht, "World state file")->required();
        sub->add_option("--now", hs_args.now, "Simulated time in seconds");
    };
    auto* hs_publish = hs_cmd->add_subcommand("publish", "Publish a service descriptor");
    add_common(hs_publish);
    auto* hs_seed_opt = hs_publish->add_option("--seed", hs_args.seed, "Deterministic RNG seed");
    hs_publish->add_option("--relays", hs_args.relays, "Relay pool size for a fresh world");
    hs_publish->add_flag("--strict-disjoint", hs_args.strict_disjoint,
                         "Forbid sharing relays across introduction circuits");
    hs_publish->add_option("--onion", hs_args.onion,
                           "Republish an existing service instead of creating one");

    auto* hs_lookup = hs_cmd->add_subcommand("lookup", "Fetch a descriptor from the DHT");
    add_common(hs_lookup);
    hs_lookup->add_option("--onion", hs_args.onion, "Onion id to look up")->required();

    auto* hs_rdv = hs_cmd->add_subcommand("rendezvous", "Connect a client to a service");
    add_common(hs_rdv);
    hs_rdv->add_option("--onion", hs_args.onion, "Onion id to connect to")->required();
    hs_rdv->add_option("--client", hs_args.client, "Client identifier");
    auto* hs_rdv_seed = hs_rdv->add_option("--seed", hs_args.seed, "Deterministic RNG seed");
    hs_rdv->add_option("--obs-log", hs_args.obs_log, "Write relay observation NDJSON here");

    auto* hs_harvest = hs_cmd->add_subcommand("harvest", "Crawl the DHT for onion ids");
    add_common(hs_harvest);
    hs_harvest->add_option("--from-period", hs_args.from_period, "First period index")->required();
    hs_harvest->add_option("--to-period", hs_args.to_period, "Last period index")->required();
    hs_harvest->add_option("--attacker-nodes", hs_args.attacker_nodes,
                           "Participating attacker node count");

    auto* hs_imp = hs_cmd->add_subcommand("impersonate", "Run the directory impersonation attack");
    add_common(hs_imp);
    hs_imp->add_option("--onion", hs_args.onion, "Target onion id")->required();
    hs_imp->add_flag("--release", hs_args.release, "Stop the attack instead of starting it");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 5;
    }

    send_args.ttl_set = ttl_opt->count() > 0;
    send_args.max_downloads_set = max_opt->count() > 0;
    send_args.chunk_size_set = chunk_opt->count() > 0;
    sim_args.seed_set = seed_opt->count() > 0;
    detect_args.stun_threshold_set = thr_opt->count() > 0;
    hs_args.seed_set = hs_seed_opt->count() > 0 || hs_rdv_seed->count() > 0;

    try {
        if (app.got_subcommand(serve)) return cmd_serve(serve_args);
        if (app.got_subcommand(send)) return cmd_send(send_args);
        if (app.got_subcommand(recv)) return cmd_recv(recv_args);
        if (app.got_subcommand(simulate)) return cmd_simulate(sim_args);
        if (app.got_subcommand(detect_cmd)) return cmd_detect(detect_args);
        if (app.got_subcommand(hs_cmd)) {
            if (hs_cmd->got_subcommand(hs_publish)) return cmd_hs_publish(hs_args);
            if (hs_cmd->got_subcommand(hs_lookup)) return cmd_hs_lookup(hs_args);
            if (hs_cmd->got_subcommand(hs_rdv)) return cmd_hs_rendezvous(hs_args);
            if (hs_cmd->got_subcommand(hs_harvest)) return cmd_hs_harvest(hs_args);
            if (hs_cmd->got_subcommand(hs_imp)) return cmd_hs_impersonate(hs_args);
        }
        return 5;
    } catch (const Error& err) {
        std::cerr << "error (" << errc_name(err.code()) << "): " << err.what() << std::endl;
        return exit_code_for(err.code());
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << std::endl;
        return 5;
    }
}
