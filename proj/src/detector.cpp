#include "covertpipe/detector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <regex>
#include <set>
#include <sstream>

#include <json.hpp>

namespace covertpipe::detect {

namespace {

std::optional<FlowEvent> parse_event(const std::string& line) {
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) return std::nullopt;

    static const std::set<std::string> kKeys = {"ts_ms", "src", "dst", "transport",
                                                "kind",  "len", "meta"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!kKeys.contains(it.key())) return std::nullopt;

    if (!j.contains("ts_ms") || !j["ts_ms"].is_number_integer()) return std::nullopt;
    if (!j.contains("src") || !j["src"].is_string()) return std::nullopt;
    if (!j.contains("dst") || !j["dst"].is_string()) return std::nullopt;
    if (!j.contains("transport") || !j["transport"].is_string()) return std::nullopt;
    if (!j.contains("kind") || !j["kind"].is_string()) return std::nullopt;
    if (!j.contains("len") || !j["len"].is_number_integer()) return std::nullopt;

    auto transport = transport_from_name(j["transport"].get<std::string>());
    auto kind = event_kind_from_name(j["kind"].get<std::string>());
    if (!transport || !kind) return std::nullopt;

    FlowEvent ev;
    ev.ts_ms = j["ts_ms"].get<std::int64_t>();
    ev.src = j["src"].get<std::string>();
    ev.dst = j["dst"].get<std::string>();
    ev.transport = *transport;
    ev.kind = *kind;
    ev.len = j["len"].get<std::int64_t>();
    if (ev.len < 0 || ev.src.empty() || ev.dst.empty()) return std::nullopt;
    if (j.contains("meta")) {
        if (!j["meta"].is_string()) return std::nullopt;
        ev.meta = j["meta"].get<std::string>();
    }
    return ev;
}

}  // namespace

IngestResult ingest(std::istream& in) {
    IngestResult result;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        ++result.total_lines;
        auto ev = parse_event(line);
        if (ev)
            result.log.events.push_back(std::move(*ev));
        else
            result.malformed_lines.push_back(line_no);
    }
    if (in.bad()) throw Error(Errc::io, "trace stream failed mid-read");

    if (result.total_lines > 0 &&
        result.malformed_lines.size() * 100 > result.total_lines) {
        std::ostringstream msg;
        msg << result.malformed_lines.size() << " of " << result.total_lines
            << " lines malformed (over 1%); lines:";
        std::size_t shown = 0;
        for (std::size_t n : result.malformed_lines) {
            if (shown++ == 10) {
                msg << " ...";
                break;
            }
            msg << ' ' << n;
        }
        throw Error(Errc::ingest, msg.str());
    }

    std::stable_sort(result.log.events.begin(), result.log.events.end(),
                     [](const FlowEvent& l, const FlowEvent& r) { return l.ts_ms < r.ts_ms; });
    return result;
}

IngestResult ingest_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(Errc::io, "cannot open trace file: " + path);
    return ingest(in);
}

namespace {

// Pairs each confirm with the nearest preceding unmatched bind on the same
// flow within the gap limit; returns pair timestamps per flow.
std::map<FlowKey, std::vector<std::int64_t>> matched_pairs(const TraceLog& log,
                                                           std::int64_t max_gap_ms) {
    std::map<FlowKey, std::vector<std::int64_t>> pending;  // unmatched bind timestamps
    std::map<FlowKey, std::vector<std::int64_t>> pairs;
    for (const FlowEvent& ev : log.events) {
        if (ev.kind == EventKind::stun_bind) {
            pending[FlowKey::of(ev)].push_back(ev.ts_ms);
        } else if (ev.kind == EventKind::stun_confirm) {
            auto key = FlowKey::of(ev);
            auto it = pending.find(key);
            if (it == pending.end()) continue;
            auto& binds = it->second;
            while (!binds.empty()) {
                std::int64_t bind_ts = binds.back();
                binds.pop_back();
                if (ev.ts_ms - bind_ts <= max_gap_ms && ev.ts_ms >= bind_ts) {
                    pairs[key].push_back(bind_ts);
                    break;
                }
            }
        }
    }
    return pairs;
}

std::vector<double> window_rates(const std::vector<std::int64_t>& pair_ts, std::int64_t origin_ms,
                                 std::int64_t end_ms, double window_s) {
    const std::int64_t window_ms = static_cast<std::int64_t>(window_s * 1000.0);
    if (window_ms <= 0) throw Error(Errc::invalid_argument, "window must be positive");
    const std::size_t windows =
        static_cast<std::size_t>((end_ms - origin_ms) / window_ms) + 1;
    std::vector<double> rates(windows, 0.0);
    for (std::int64_t ts : pair_ts)
        rates[static_cast<std::size_t>((ts - origin_ms) / window_ms)] += 1.0;
    for (double& r : rates) r /= window_s;
    return rates;
}

}  // namespace

std::vector<StunFlag> stun_fingerprint(const TraceLog& log, const StunOptions& opts) {
    std::vector<StunFlag> flagged;
    if (log.events.empty()) return flagged;
    const std::int64_t origin = log.events.front().ts_ms;
    const std::int64_t end = log.events.back().ts_ms;

    for (auto& [flow, ts] : matched_pairs(log, opts.pair_max_gap_ms)) {
        auto rates = window_rates(ts, origin, end, opts.window_s);
        StunFlag flag;
        flag.flow = flow;
        bool hit = false;
        for (std::size_t w = 0; w < rates.size(); ++w) {
            flag.peak_rate = std::max(flag.peak_rate, rates[w]);
            if (!hit && rates[w] >= opts.threshold_pairs_per_s) {
                hit = true;
                flag.first_flagged_window = w;
            }
        }
        if (hit) {
            flag.window_rates = std::move(rates);
            flagged.push_back(std::move(flag));
        }
    }
    return flagged;
}

const char* label_name(Label l) {
    switch (l) {
        case Label::covert_p2p_suspected: return "covert_p2p_suspected";
        case Label::cleartext_transfer: return "cleartext_transfer";
        case Label::benign: return "benign";
    }
    return "?";
}

std::string Verdict::to_json_line() const {
    nlohmann::json j;
    j["flow"] = flow.str();
    j["label"] = label_name(label);
    j["evidence"] = evidence;
    return j.dump();
}

namespace {

// request lines whose path carries a transfer token
const std::regex kTokenGrammar(R"(^(GET|POST) (/get\.php\?key=[0-9]{15}|/[a-z0-9]{5})$)");

}  // namespace

std::vector<Verdict> classify(const TraceLog& log, const StunOptions& opts) {
    struct FlowFacts {
        std::vector<std::string> token_lines;
        std::set<std::string> token_hosts;
        std::uint64_t data_events = 0;
        std::int64_t first_handshake_ts = -1;
        bool data_after_handshake = false;
    };
    std::map<FlowKey, FlowFacts> facts;
    // signaling counterparties per endpoint, for implicating rendezvous hosts
    std::map<std::string, std::set<std::string>> signal_hosts;

    for (const FlowEvent& ev : log.events) {
        FlowFacts& f = facts[FlowKey::of(ev)];
        switch (ev.kind) {
            case EventKind::http_get:
            case EventKind::http_post:
                if (ev.meta && std::regex_match(*ev.meta, kTokenGrammar)) {
                    f.token_lines.push_back(*ev.meta);
                    f.token_hosts.insert(ev.dst);
                }
                break;
            case EventKind::data:
                ++f.data_events;
                if (f.first_handshake_ts >= 0 && ev.ts_ms >= f.first_handshake_ts)
                    f.data_after_handshake = true;
                break;
            case EventKind::handshake:
                if (f.first_handshake_ts < 0) f.first_handshake_ts = ev.ts_ms;
                break;
            case EventKind::signal:
                signal_hosts[ev.src].insert(ev.dst);
                break;
            default:
                break;
        }
    }

    std::map<FlowKey, StunFlag> stun_flags;
    for (auto& flag : stun_fingerprint(log, opts)) stun_flags.emplace(flag.flow, std::move(flag));

    std::vector<Verdict> verdicts;
    for (auto& [flow, f] : facts) {
        Verdict v;
        v.flow = flow;
        auto stun_it = stun_flags.find(flow);
        if (!f.token_lines.empty() && f.data_events > 0) {
            v.label = Label::cleartext_transfer;
            std::set<std::string> seen;
            for (const auto& line : f.token_lines)
                if (seen.insert(line).second && seen.size() <= 3) v.evidence.push_back(line);
            v.evidence.push_back(std::to_string(f.data_events) + " payload events in cleartext");
            for (const auto& host : f.token_hosts) v.evidence.push_back("host:" + host);
        } else if (stun_it != stun_flags.end() && f.data_after_handshake) {
            v.label = Label::covert_p2p_suspected;
            std::ostringstream rate;
            rate.precision(2);
            rate << std::fixed << stun_it->second.peak_rate;
            v.evidence.push_back("stun keepalive cadence " + rate.str() +
                                 " pairs/s (window " +
                                 std::to_string(stun_it->second.first_flagged_window) + ")");
            v.evidence.push_back("encrypted data follows a key-exchange handshake");
            std::set<std::string> hosts;
            for (const auto& endpoint : {flow.a, flow.b}) {
                auto sh = signal_hosts.find(endpoint);
                if (sh == signal_hosts.end()) continue;
                for (const auto& host : sh->second) hosts.insert(host);
            }
            for (const auto& host : hosts) v.evidence.push_back("host:" + host);
        } else {
            v.label = Label::benign;
        }
        verdicts.push_back(std::move(v));
    }
    return verdicts;
}

Reconstruction reconstruct_cleartext(const TraceLog& log, const FlowKey& flow) {
    struct Piece {
        std::uint64_t seq;
        Bytes bytes;
    };
    std::vector<Piece> pieces;
    bool token_grammar_seen = false;

    for (const FlowEvent& ev : log.events) {
        if (FlowKey::of(ev) != flow) continue;
        if ((ev.kind == EventKind::http_get || ev.kind == EventKind::http_post) && ev.meta &&
            std::regex_match(*ev.meta, kTokenGrammar))
            token_grammar_seen = true;
        if (ev.kind != EventKind::data || !ev.meta) continue;
        const std::string& meta = *ev.meta;
        auto colon = meta.find(':');
        if (colon == std::string::npos || colon == 0) continue;
        std::uint64_t seq = 0;
        bool numeric = true;
        for (char c : meta.substr(0, colon)) {
            if (c < '0' || c > '9') {
                numeric = false;
                break;
            }
            seq = seq * 10 + static_cast<std::uint64_t>(c - '0');
        }
        if (!numeric) continue;
        try {
            pieces.push_back({seq, base64_decode(meta.substr(colon + 1))});
        } catch (const Error&) {
            // not a payload extension; ignore
        }
    }

    Reconstruction out;
    if (pieces.empty()) {
        if (token_grammar_seen) out.bytes = Bytes{};
        return out;
    }
    std::stable_sort(pieces.begin(), pieces.end(),
                     [](const Piece& l, const Piece& r) { return l.seq < r.seq; });
    Bytes assembled;
    std::uint64_t expected = 0;
    std::optional<std::uint64_t> last_seq;
    for (const Piece& p : pieces) {
        if (last_seq && p.seq == *last_seq) continue;  // duplicate delivery
        if (p.seq != expected) out.partial = true;
        expected = p.seq + 1;
        last_seq = p.seq;
        assembled.insert(assembled.end(), p.bytes.begin(), p.bytes.end());
    }
    out.bytes = std::move(assembled);
    return out;
}

TraceLog sample(const TraceLog& log, double rate, std::uint64_t seed) {
    if (!(rate > 0.0) || rate > 1.0)
        throw Error(Errc::invalid_argument, "sampling rate must be in (0, 1]");
    TraceLog out;
    Rng rng(seed);
    for (const FlowEvent& ev : log.events)
        if (rng.canonical() < rate) out.events.push_back(ev);
    return out;
}

std::vector<CorrelatedPair> correlate(const TraceLog& a, const TraceLog& b, double window_s) {
    if (a.events.empty() || b.events.empty())
        throw Error(Errc::correlation, "a trace is empty; nothing to correlate");
    auto range = [](const TraceLog& log) {
        auto [lo, hi] = std::minmax_element(
            log.events.begin(), log.events.end(),
            [](const FlowEvent& l, const FlowEvent& r) { return l.ts_ms < r.ts_ms; });
        return std::pair(lo->ts_ms, hi->ts_ms);
    };
    auto [a_lo, a_hi] = range(a);
    auto [b_lo, b_hi] = range(b);
    const std::int64_t lo = std::max(a_lo, b_lo);
    const std::int64_t hi = std::min(a_hi, b_hi);
    if (lo > hi) throw Error(Errc::correlation, "traces cover disjoint time ranges");

    const std::int64_t window_ms = static_cast<std::int64_t>(window_s * 1000.0);
    if (window_ms <= 0) throw Error(Errc::invalid_argument, "window must be positive");
    const std::size_t windows = static_cast<std::size_t>((hi - lo) / window_ms) + 1;

    auto vectors = [&](const TraceLog& log) {
        std::map<FlowKey, std::vector<double>> per_flow;
        for (const FlowEvent& ev : log.events) {
            if (ev.ts_ms < lo || ev.ts_ms > hi) continue;
            auto& vec = per_flow[FlowKey::of(ev)];
            if (vec.empty()) vec.assign(windows, 0.0);
            vec[static_cast<std::size_t>((ev.ts_ms - lo) / window_ms)] += 1.0;
        }
        return per_flow;
    };
    auto va = vectors(a);
    auto vb = vectors(b);

    auto cosine = [](const std::vector<double>& x, const std::vector<double>& y) {
        double dot = 0, nx = 0, ny = 0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            dot += x[i] * y[i];
            nx += x[i] * x[i];
            ny += y[i] * y[i];
        }
        if (nx == 0.0 || ny == 0.0) return 0.0;
        return dot / std::sqrt(nx * ny);
    };

    struct Candidate {
        double score;
        const FlowKey* fa;
        const FlowKey* fb;
    };
    std::vector<Candidate> candidates;
    for (const auto& [fa, xa] : va)
        for (const auto& [fb, xb] : vb) candidates.push_back({cosine(xa, xb), &fa, &fb});
    std::stable_sort(candidates.begin(), candidates.end(), [](const Candidate& l, const Candidate& r) {
        if (l.score != r.score) return l.score > r.score;
        if (*l.fa != *r.fa) return *l.fa < *r.fa;
        return *l.fb < *r.fb;
    });

    std::set<FlowKey> used_a, used_b;
    std::vector<CorrelatedPair> out;
    for (const Candidate& c : candidates) {
        if (used_a.contains(*c.fa) || used_b.contains(*c.fb)) continue;
        used_a.insert(*c.fa);
        used_b.insert(*c.fb);
        out.push_back({*c.fa, *c.fb, c.score});
    }
    return out;
}

std::vector<BlacklistRule> emit_blacklist(const std::vector<Verdict>& verdicts) {
    std::set<std::string> hosts;
    std::map<std::string, std::string> first_reason;
    for (const Verdict& v : verdicts) {
        if (v.label == Label::benign) continue;
        for (const auto& ev : v.evidence) {
            if (!ev.starts_with("host:")) continue;
            std::string host = ev.substr(5);
            if (hosts.insert(host).second)
                first_reason[host] = std::string(label_name(v.label)) + " via " + v.flow.str();
        }
    }

    std::set<std::string> patterns;
    std::vector<BlacklistRule> rules;
    for (const auto& host : hosts) {
        // glob the registrable domain: last two labels when present
        auto last_dot = host.rfind('.');
        std::string pattern = host;
        if (last_dot != std::string::npos) {
            auto prev_dot = host.rfind('.', last_dot - 1);
            pattern = "*." + (prev_dot == std::string::npos ? host : host.substr(prev_dot + 1));
        }
        if (patterns.insert(pattern).second) rules.push_back({pattern, first_reason[host]});
    }
    return rules;
}

std::map<FlowKey, FlowStats> flow_stats(const TraceLog& log, const StunOptions& opts) {
    std::map<FlowKey, FlowStats> stats;
    for (const FlowEvent& ev : log.events) {
        FlowStats& s = stats[FlowKey::of(ev)];
        if (s.events == 0) s.first_ts_ms = ev.ts_ms;
        s.kind_counts[static_cast<std::size_t>(ev.kind)] += 1;
        s.events += 1;
        s.bytes += static_cast<std::uint64_t>(ev.len);
        s.last_ts_ms = std::max(s.last_ts_ms, ev.ts_ms);
    }
    if (!log.events.empty()) {
        const std::int64_t origin = log.events.front().ts_ms;
        const std::int64_t end = log.events.back().ts_ms;
        for (auto& [flow, ts] : matched_pairs(log, opts.pair_max_gap_ms)) {
            auto it = stats.find(flow);
            if (it != stats.end())
                it->second.stun_pair_rates = window_rates(ts, origin, end, opts.window_s);
        }
    }
    return stats;
}

}  // namespace covertpipe::detect
