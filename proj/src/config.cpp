#include "covertpipe/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "covertpipe/util.hpp"

namespace covertpipe {

namespace {

using nlohmann::json;

template <typename T>
void read_positive(const json& j, const char* key, T& out) {
    auto it = j.find(key);
    if (it == j.end()) return;
    if (!it->is_number())
        throw Error(Errc::config, std::string("config key must be a number: ") + key);
    double value = it->get<double>();
    if (!(value > 0))
        throw Error(Errc::config, std::string("config key must be positive: ") + key);
    if (std::is_integral_v<T> && value > 9.0e18)
        throw Error(Errc::config, std::string("config key out of range: ") + key);
    out = it->get<T>();
    if (static_cast<double>(out) != value)
        throw Error(Errc::config, std::string("config key out of range: ") + key);
}

}  // namespace

Config Config::from_json_text(const std::string& text) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded() || !j.is_object())
        throw Error(Errc::config, "config must be a JSON object");

    static const char* kKeys[] = {
        "listen",           "relay_spill_threshold_bytes", "ttl_direct_seconds",
        "ttl_relay_seconds", "chunk_size",                 "keepalive_interval_ms",
        "stun_threshold_pairs_per_s",
    };
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* key : kKeys)
            if (it.key() == key) known = true;
        if (!known) throw Error(Errc::config, "unknown config key: " + it.key());
    }

    Config cfg;
    if (auto it = j.find("listen"); it != j.end()) {
        if (!it->is_string()) throw Error(Errc::config, "config key must be a string: listen");
        cfg.listen = it->get<std::string>();
        try {
            parse_host_port(cfg.listen);
        } catch (const Error&) {
            throw Error(Errc::config, "config key listen is not host:port: '" + cfg.listen + "'");
        }
    }
    read_positive(j, "relay_spill_threshold_bytes", cfg.relay_spill_threshold_bytes);
    read_positive(j, "ttl_direct_seconds", cfg.ttl_direct_seconds);
    read_positive(j, "ttl_relay_seconds", cfg.ttl_relay_seconds);
    read_positive(j, "chunk_size", cfg.chunk_size);
    read_positive(j, "keepalive_interval_ms", cfg.keepalive_interval_ms);
    read_positive(j, "stun_threshold_pairs_per_s", cfg.stun_threshold_pairs_per_s);
    return cfg;
}

Config Config::load_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(Errc::io, "cannot open config file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    if (in.bad()) throw Error(Errc::io, "failed reading config file: " + path);
    return from_json_text(buf.str());
}

Config Config::load_default() {
    const char* path = std::getenv("COVERTPIPE_CONFIG");
    if (path && *path) return load_file(path);
    return Config{};
}

}  // namespace covertpipe
