#include "covertpipe/trace.hpp"

#include <ostream>
#include <sstream>

namespace covertpipe {

const char* transport_name(Transport t) { return t == Transport::udp ? "udp" : "tcp"; }

const char* event_kind_name(EventKind k) {
    switch (k) {
        case EventKind::stun_bind: return "stun_bind";
        case EventKind::stun_confirm: return "stun_confirm";
        case EventKind::handshake: return "handshake";
        case EventKind::data: return "data";
        case EventKind::signal: return "signal";
        case EventKind::http_get: return "http_get";
        case EventKind::http_post: return "http_post";
    }
    return "data";
}

std::optional<Transport> transport_from_name(std::string_view name) {
    if (name == "udp") return Transport::udp;
    if (name == "tcp") return Transport::tcp;
    return std::nullopt;
}

std::optional<EventKind> event_kind_from_name(std::string_view name) {
    static constexpr std::pair<std::string_view, EventKind> kTable[] = {
        {"stun_bind", EventKind::stun_bind}, {"stun_confirm", EventKind::stun_confirm},
        {"handshake", EventKind::handshake}, {"data", EventKind::data},
        {"signal", EventKind::signal},       {"http_get", EventKind::http_get},
        {"http_post", EventKind::http_post},
    };
    for (auto [n, k] : kTable)
        if (n == name) return k;
    return std::nullopt;
}

static void append_json_string(std::string& out, const std::string& s) {
    out.push_back('"');
    for (char c : s) {
        switch (c) {
            case '"': out += "\\\""; break;
            case '\\': out += "\\\\"; break;
            case '\n': out += "\\n"; break;
            case '\r': out += "\\r"; break;
            case '\t': out += "\\t"; break;
            default:
                if (static_cast<unsigned char>(c) < 0x20) {
                    char buf[8];
                    std::snprintf(buf, sizeof buf, "\\u%04x", c);
                    out += buf;
                } else {
                    out.push_back(c);
                }
        }
    }
    out.push_back('"');
}

std::string FlowEvent::to_json_line() const {
    std::string out;
    out.reserve(96 + (meta ? meta->size() : 0));
    out += "{\"ts_ms\":";
    out += std::to_string(ts_ms);
    out += ",\"src\":";
    append_json_string(out, src);
    out += ",\"dst\":";
    append_json_string(out, dst);
    out += ",\"transport\":\"";
    out += transport_name(transport);
    out += "\",\"kind\":\"";
    out += event_kind_name(kind);
    out += "\",\"len\":";
    out += std::to_string(len);
    if (meta) {
        out += ",\"meta\":";
        append_json_string(out, *meta);
    }
    out += "}";
    return out;
}

void TraceLog::write_ndjson(std::ostream& out) const {
    for (const auto& ev : events) {
        out << ev.to_json_line();
        out.put('\n');
    }
}

std::string TraceLog::ndjson() const {
    std::ostringstream out;
    write_ndjson(out);
    return out.str();
}

FlowKey FlowKey::of(const FlowEvent& ev) { return make(ev.src, ev.dst, ev.transport); }

FlowKey FlowKey::make(std::string x, std::string y, Transport t) {
    if (y < x) std::swap(x, y);
    return FlowKey{std::move(x), std::move(y), t};
}

std::string FlowKey::str() const { return a + "<->" + b + "/" + transport_name(transport); }

}  // namespace covertpipe
