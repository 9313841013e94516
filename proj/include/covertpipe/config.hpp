#pragma once

#include <cstdint>
#include <string>

namespace covertpipe {

// Tool-wide settings. Every field has a default, so a config file only needs
// the keys it wants to override; unknown keys are rejected by name.
struct Config {
    std::string listen = "127.0.0.1:9474";
    std::uint64_t relay_spill_threshold_bytes = 64ull << 20;
    std::int64_t ttl_direct_seconds = 86400;
    std::int64_t ttl_relay_seconds = 1000;
    std::uint32_t chunk_size = 65536;
    std::uint32_t keepalive_interval_ms = 200;
    double stun_threshold_pairs_per_s = 2.5;

    // Throws Errc::config on unknown keys, wrong types, or non-positive
    // numeric values; Errc::io if the file cannot be read.
    static Config from_json_text(const std::string& text);
    static Config load_file(const std::string& path);

    // COVERTPIPE_CONFIG names a file to load; unset means built-in defaults.
    static Config load_default();
};

}  // namespace covertpipe
