#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "covertpipe/util.hpp"

namespace covertpipe {

enum class Transport : std::uint8_t { udp, tcp };

enum class EventKind : std::uint8_t {
    stun_bind,
    stun_confirm,
    handshake,
    data,
    signal,
    http_get,
    http_post,
};

const char* transport_name(Transport t);
const char* event_kind_name(EventKind k);
std::optional<Transport> transport_from_name(std::string_view name);
std::optional<EventKind> event_kind_from_name(std::string_view name);

// One trace record. `meta` is optional: request lines for http kinds, tokens
// for signal kinds, base64 payload on data events in cleartext modes.
struct FlowEvent {
    std::int64_t ts_ms = 0;
    std::string src;
    std::string dst;
    Transport transport = Transport::udp;
    EventKind kind = EventKind::data;
    std::int64_t len = 0;
    std::optional<std::string> meta;

    // fixed field order so identical logs serialize byte-identically
    std::string to_json_line() const;
};

struct TraceLog {
    std::vector<FlowEvent> events;

    void write_ndjson(std::ostream& out) const;
    std::string ndjson() const;
};

// Unordered endpoint pair plus transport.
struct FlowKey {
    std::string a;
    std::string b;
    Transport transport = Transport::udp;

    static FlowKey of(const FlowEvent& ev);
    static FlowKey make(std::string x, std::string y, Transport t);

    std::string str() const;  // "a<->b/transport"

    friend bool operator==(const FlowKey&, const FlowKey&) = default;
    friend auto operator<=>(const FlowKey& l, const FlowKey& r) {
        return std::tie(l.a, l.b, l.transport) <=> std::tie(r.a, r.b, r.transport);
    }
};

}  // namespace covertpipe
