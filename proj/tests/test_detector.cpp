#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "covertpipe/detector.hpp"
#include "covertpipe/sim.hpp"
#include "covertpipe/trace.hpp"
#include "covertpipe/util.hpp"

using namespace covertpipe;
using namespace covertpipe::detect;

namespace {

FlowEvent ev(std::int64_t ts, std::string src, std::string dst, EventKind kind,
             std::int64_t len = 100, std::optional<std::string> meta = std::nullopt) {
    FlowEvent e;
    e.ts_ms = ts;
    e.src = std::move(src);
    e.dst = std::move(dst);
    e.transport = Transport::udp;
    e.kind = kind;
    e.len = len;
    e.meta = std::move(meta);
    return e;
}

// A keepalive-shaped flow: one bind/confirm pair every interval_ms.
TraceLog keepalive_log(int pairs, std::int64_t interval_ms, std::int64_t start = 0) {
    TraceLog log;
    for (int i = 0; i < pairs; ++i) {
        std::int64_t t = start + i * interval_ms;
        log.events.push_back(ev(t, "a", "b", EventKind::stun_bind, 20));
        log.events.push_back(ev(t + 5, "b", "a", EventKind::stun_confirm, 32));
    }
    return log;
}

std::string ndjson_of(const TraceLog& log) { return log.ndjson(); }

}  // namespace

TEST_CASE("ingest parses well-formed lines and keeps the trace sorted") {
    std::stringstream in;
    in << R"({"ts_ms": 50, "src": "b", "dst": "c", "transport": "tcp", "kind": "data", "len": 9})"
       << "\n";
    in << R"({"ts_ms": 10, "src": "a", "dst": "b", "transport": "udp", "kind": "stun_bind", "len": 20})"
       << "\n";
    in << "\n";  // blank lines are skipped, not malformed
    in << R"({"ts_ms": 30, "src": "a", "dst": "b", "transport": "udp", "kind": "signal", "len": 40, "meta": "t"})"
       << "\n";

    auto result = ingest(in);
    CHECK(result.total_lines == 3);
    CHECK(result.malformed_lines.empty());
    REQUIRE(result.log.events.size() == 3);
    CHECK(result.log.events[0].ts_ms == 10);
    CHECK(result.log.events[1].ts_ms == 30);
    CHECK(result.log.events[2].ts_ms == 50);
    CHECK(result.log.events[1].meta == "t");
}

TEST_CASE("ingest tolerates up to one percent malformed lines and reports them") {
    std::stringstream ok;
    for (int i = 0; i < 199; ++i)
        ok << R"({"ts_ms": )" << i
           << R"(, "src": "a", "dst": "b", "transport": "udp", "kind": "data", "len": 1})"
           << "\n";
    ok << "this is not json\n";
    auto result = ingest(ok);  // 1/200 = 0.5%, under the bar
    CHECK(result.malformed_lines == std::vector<std::size_t>{200});
    CHECK(result.log.events.size() == 199);

    std::stringstream bad;
    for (int i = 0; i < 97; ++i)
        bad << R"({"ts_ms": )" << i
            << R"(, "src": "a", "dst": "b", "transport": "udp", "kind": "data", "len": 1})"
            << "\n";
    bad << "junk one\n";
    bad << R"({"ts_ms": 1, "src": "a"})" << "\n";
    bad << "junk three\n";
    try {
        ingest(bad);  // 3/100 = 3%
        FAIL("over-threshold ingest accepted");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::ingest);
        std::string what = e.what();
        CHECK(what.find("98") != std::string::npos);
        CHECK(what.find("99") != std::string::npos);
        CHECK(what.find("100") != std::string::npos);
    }
}

TEST_CASE("ingest rejects schema violations, not just broken json") {
    auto one_bad = [](const std::string& line) {
        std::stringstream in;
        in << line << "\n";
        try {
            ingest(in);  // 1/1 = 100% malformed
            return false;
        } catch (const Error& e) {
            return e.code() == Errc::ingest;
        }
    };
    CHECK(one_bad(R"({"ts_ms": 1, "src": "a", "dst": "b", "transport": "udp", "kind": "data"})"));
    CHECK(one_bad(
        R"({"ts_ms": 1, "src": "a", "dst": "b", "transport": "carrier-pigeon", "kind": "data", "len": 1})"));
    CHECK(one_bad(
        R"({"ts_ms": 1, "src": "a", "dst": "b", "transport": "udp", "kind": "data", "len": -4})"));
    CHECK(one_bad(
        R"({"ts_ms": 1, "src": "", "dst": "b", "transport": "udp", "kind": "data", "len": 1})"));
    CHECK(one_bad(
        R"({"ts_ms": 1, "src": "a", "dst": "b", "transport": "udp", "kind": "data", "len": 1, "extra": 0})"));
}

TEST_CASE("stun fingerprint flags a 5 pairs per second cadence") {
    auto log = keepalive_log(300, 200);  // 60 s at 5 pairs/s
    auto flags = stun_fingerprint(log);
    REQUIRE(flags.size() == 1);
    CHECK(flags[0].flow == FlowKey::make("a", "b", Transport::udp));
    CHECK(flags[0].first_flagged_window == 0);
    CHECK(flags[0].peak_rate == doctest::Approx(5.0).epsilon(0.01));
    REQUIRE_FALSE(flags[0].window_rates.empty());
    CHECK(flags[0].window_rates[0] == doctest::Approx(5.0).epsilon(0.01));
}

TEST_CASE("the threshold sits strictly between web chatter and keepalive cadence") {
    // 2.0 pairs/s stays quiet at the 2.5 default, 2.6 trips it
    auto quiet = keepalive_log(20, 500);
    CHECK(stun_fingerprint(quiet).empty());

    auto loud = keepalive_log(26, 384);
    auto flags = stun_fingerprint(loud);
    REQUIRE(flags.size() == 1);
    CHECK(flags[0].peak_rate >= 2.5);

    StunOptions strict;
    strict.threshold_pairs_per_s = 1.5;
    CHECK(stun_fingerprint(quiet, strict).size() == 1);
}

TEST_CASE("a rate exactly at the threshold counts as flagged") {
    auto log = keepalive_log(25, 400);  // 2.5 pairs/s
    auto flags = stun_fingerprint(log);
    REQUIRE(flags.size() == 1);
    CHECK(flags[0].peak_rate == doctest::Approx(2.5).epsilon(0.01));
}

TEST_CASE("unpaired binds and distant confirms do not count as pairs") {
    TraceLog log;
    // a burst of binds answered by nothing
    for (int i = 0; i < 100; ++i)
        log.events.push_back(ev(i * 10, "a", "b", EventKind::stun_bind, 20));
    // confirms arriving long after every bind: beyond the pairing gap
    for (int i = 0; i < 100; ++i)
        log.events.push_back(ev(5000 + i * 10, "b", "a", EventKind::stun_confirm, 32));
    CHECK(stun_fingerprint(log).empty());

    // same cadence with prompt confirms is flagged, isolating the gap rule
    TraceLog paired;
    for (int i = 0; i < 100; ++i) {
        paired.events.push_back(ev(i * 10, "a", "b", EventKind::stun_bind, 20));
        paired.events.push_back(ev(i * 10 + 2, "b", "a", EventKind::stun_confirm, 32));
    }
    CHECK(stun_fingerprint(paired).size() == 1);
}

TEST_CASE("classification separates covert, cleartext, and benign flows") {
    TraceLog log;
    // covert flow: signaling, stun cadence, handshake, then opaque data
    log.events.push_back(ev(0, "p1", "www.svc.test", EventKind::signal, 60, "token-exchange"));
    log.events.push_back(ev(10, "www.svc.test", "p1", EventKind::signal, 60));
    log.events.push_back(ev(20, "p2", "www.svc.test", EventKind::signal, 60));
    for (int i = 0; i < 150; ++i) {
        log.events.push_back(ev(100 + i * 200, "p1", "p2", EventKind::stun_bind, 20));
        log.events.push_back(ev(105 + i * 200, "p2", "p1", EventKind::stun_confirm, 32));
    }
    log.events.push_back(ev(30100, "p1", "p2", EventKind::handshake, 32));
    log.events.push_back(ev(30110, "p2", "p1", EventKind::handshake, 64));
    log.events.push_back(ev(30120, "p1", "p2", EventKind::handshake, 32));
    for (int i = 0; i < 40; ++i)
        log.events.push_back(ev(30200 + i * 50, "p1", "p2", EventKind::data, 1400));

    // cleartext flow: token-bearing GET plus plain payload
    log.events.push_back(
        ev(500, "dl", "files.example.net", EventKind::http_get, 80, "GET /x9k2p"));
    for (int i = 0; i < 10; ++i)
        log.events.push_back(ev(600 + i * 30, "files.example.net", "dl", EventKind::data, 1400));

    // benign flow: ordinary browsing
    log.events.push_back(ev(700, "user", "news.example.org", EventKind::http_get, 90,
                            "GET /index.html"));
    log.events.push_back(ev(760, "news.example.org", "user", EventKind::data, 5000));

    std::stable_sort(log.events.begin(), log.events.end(),
                     [](const FlowEvent& x, const FlowEvent& y) { return x.ts_ms < y.ts_ms; });

    auto verdicts = classify(log);
    std::map<std::string, Label> by_flow;
    for (const auto& v : verdicts) by_flow[v.flow.str()] = v.label;

    CHECK(by_flow.at(FlowKey::make("p1", "p2", Transport::udp).str()) ==
          Label::covert_p2p_suspected);
    CHECK(by_flow.at(FlowKey::make("dl", "files.example.net", Transport::udp).str()) ==
          Label::cleartext_transfer);
    CHECK(by_flow.at(FlowKey::make("user", "news.example.org", Transport::udp).str()) ==
          Label::benign);

    // the covert verdict names the signaling host and its own cadence
    for (const auto& v : verdicts) {
        if (v.label != Label::covert_p2p_suspected) continue;
        bool names_host = false, names_cadence = false;
        for (const auto& line : v.evidence) {
            if (line == "host:www.svc.test") names_host = true;
            if (line.find("pairs/s") != std::string::npos) names_cadence = true;
        }
        CHECK(names_host);
        CHECK(names_cadence);
    }
}

TEST_CASE("token grammar: recognized request lines mark cleartext transfers") {
    auto verdict_for = [](const std::string& request_line) {
        TraceLog log;
        log.events.push_back(ev(0, "dl", "host.test", EventKind::http_get, 80, request_line));
        log.events.push_back(ev(50, "host.test", "dl", EventKind::data, 900));
        auto verdicts = classify(log);
        REQUIRE(verdicts.size() == 1);
        return verdicts[0].label;
    };

    CHECK(verdict_for("GET /di33x") == Label::cleartext_transfer);
    CHECK(verdict_for("GET /get.php?key=103223658539867") == Label::cleartext_transfer);
    CHECK(verdict_for("POST /get.php?key=999999999999999") == Label::cleartext_transfer);
    CHECK(verdict_for("GET /index.html") == Label::benign);
    CHECK(verdict_for("GET /toolong") == Label::benign);
    CHECK(verdict_for("GET /ab1") == Label::benign);
    CHECK(verdict_for("GET /get.php?key=12345") == Label::benign);
    CHECK(verdict_for("PUT /di33x") == Label::benign);
}

TEST_CASE("reconstruction reassembles sequenced cleartext payloads") {
    Bytes original = random_bytes(5000, 77);
    TraceLog log;
    log.events.push_back(ev(0, "dl", "host.test", EventKind::http_get, 80, "GET /ab12c"));
    const std::size_t piece = 1200;
    int seq = 0;
    for (std::size_t off = 0; off < original.size(); off += piece, ++seq) {
        std::size_t n = std::min(piece, original.size() - off);
        Bytes part(original.begin() + off, original.begin() + off + n);
        log.events.push_back(ev(100 + seq * 10, "host.test", "dl", EventKind::data,
                                static_cast<std::int64_t>(n),
                                std::to_string(seq) + ":" + base64_encode(part)));
    }

    auto flow = FlowKey::make("dl", "host.test", Transport::udp);
    auto rec = reconstruct_cleartext(log, flow);
    REQUIRE(rec.bytes.has_value());
    CHECK_FALSE(rec.partial);
    CHECK(*rec.bytes == original);
    CHECK(sha3_256(*rec.bytes) == sha3_256(original));
}

TEST_CASE("reconstruction reorders by sequence number and skips duplicates") {
    TraceLog log;
    auto add = [&](int seq, std::string_view text, std::int64_t ts) {
        Bytes b(text.begin(), text.end());
        log.events.push_back(ev(ts, "h", "d", EventKind::data,
                                static_cast<std::int64_t>(b.size()),
                                std::to_string(seq) + ":" + base64_encode(b)));
    };
    add(2, "!!", 10);
    add(0, "he", 20);
    add(1, "llo", 30);
    add(1, "XXX", 40);  // duplicate sequence number, first wins

    auto rec = reconstruct_cleartext(log, FlowKey::make("h", "d", Transport::udp));
    REQUIRE(rec.bytes.has_value());
    CHECK_FALSE(rec.partial);
    std::string text(rec.bytes->begin(), rec.bytes->end());
    CHECK(text == "hello!!");
}

TEST_CASE("a sequence gap yields partial bytes, never fabricated ones") {
    TraceLog log;
    auto add = [&](int seq, std::string_view text) {
        Bytes b(text.begin(), text.end());
        log.events.push_back(ev(seq * 10, "h", "d", EventKind::data,
                                static_cast<std::int64_t>(b.size()),
                                std::to_string(seq) + ":" + base64_encode(b)));
    };
    add(0, "alpha");
    add(3, "delta");

    auto rec = reconstruct_cleartext(log, FlowKey::make("h", "d", Transport::udp));
    REQUIRE(rec.bytes.has_value());
    CHECK(rec.partial);
    std::string text(rec.bytes->begin(), rec.bytes->end());
    CHECK(text == "alphadelta");
}

TEST_CASE("an encrypted flow reconstructs to nothing") {
    TraceLog log;
    for (int i = 0; i < 20; ++i)
        log.events.push_back(ev(i * 10, "p1", "p2", EventKind::data, 1400));
    auto rec = reconstruct_cleartext(log, FlowKey::make("p1", "p2", Transport::udp));
    CHECK_FALSE(rec.bytes.has_value());
}

TEST_CASE("sampling is deterministic per seed and close to the nominal rate") {
    TraceLog log;
    for (int i = 0; i < 200000; ++i)
        log.events.push_back(ev(i, "a", "b", EventKind::data, 100));

    auto s1 = sample(log, 1.0 / 2000.0, 99);
    auto s2 = sample(log, 1.0 / 2000.0, 99);
    CHECK(ndjson_of(s1) == ndjson_of(s2));

    auto s3 = sample(log, 1.0 / 2000.0, 100);
    CHECK(ndjson_of(s1) != ndjson_of(s3));

    // expectation 100, sd ~10: accept a generous 5-sigma band
    CHECK(s1.events.size() > 50);
    CHECK(s1.events.size() < 150);

    CHECK(sample(log, 1.0, 1).events.size() == log.events.size());
    CHECK_THROWS_AS(sample(log, 0.0, 1), Error);
    CHECK_THROWS_AS(sample(log, 1.5, 1), Error);
}

TEST_CASE("correlation pairs the same flow seen from two vantage points") {
    // two flows with clearly different temporal shapes
    TraceLog vantage_a;
    TraceLog vantage_b;
    Rng rng(5);
    for (int burst = 0; burst < 12; ++burst) {
        std::int64_t at = burst * 10000;
        int n = 5 + static_cast<int>(rng.below(60));
        for (int i = 0; i < n; ++i) {
            vantage_a.events.push_back(ev(at + i * 20, "x1", "x2", EventKind::data, 1400));
            vantage_b.events.push_back(ev(at + i * 20 + 3, "x1", "x2", EventKind::data, 1400));
        }
        if (burst % 3 == 0) {
            int m = 80 + static_cast<int>(rng.below(40));
            for (int i = 0; i < m; ++i) {
                vantage_a.events.push_back(ev(at + i * 11, "y1", "y2", EventKind::data, 900));
                vantage_b.events.push_back(ev(at + i * 11 + 2, "y1", "y2", EventKind::data, 900));
            }
        }
    }
    auto sort_log = [](TraceLog& log) {
        std::stable_sort(log.events.begin(), log.events.end(),
                         [](const FlowEvent& x, const FlowEvent& y) { return x.ts_ms < y.ts_ms; });
    };
    sort_log(vantage_a);
    sort_log(vantage_b);

    auto pairs = correlate(vantage_a, vantage_b);
    REQUIRE(pairs.size() == 2);
    for (const auto& p : pairs) {
        CHECK(p.a.str() == p.b.str());
        CHECK(p.score >= 0.99);
    }
}

TEST_CASE("correlation refuses traces that never overlap in time") {
    TraceLog a, b;
    a.events.push_back(ev(0, "x", "y", EventKind::data, 1));
    a.events.push_back(ev(1000, "x", "y", EventKind::data, 1));
    b.events.push_back(ev(50000, "x", "y", EventKind::data, 1));
    b.events.push_back(ev(51000, "x", "y", EventKind::data, 1));
    try {
        correlate(a, b);
        FAIL("non-overlapping traces correlated");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::correlation);
    }
}

TEST_CASE("each flow is matched at most once, best score first") {
    TraceLog a, b;
    // one flow in a, two candidates in b with identical shape
    for (int i = 0; i < 50; ++i) {
        a.events.push_back(ev(i * 100, "s", "t", EventKind::data, 10));
        b.events.push_back(ev(i * 100, "s", "t", EventKind::data, 10));
        b.events.push_back(ev(i * 100, "u", "v", EventKind::data, 10));
    }
    auto pairs = correlate(a, b);
    REQUIRE(pairs.size() == 1);
    CHECK(pairs[0].a.str() == FlowKey::make("s", "t", Transport::udp).str());
}

TEST_CASE("blacklist rules glob the implicated domains and deduplicate") {
    Verdict v1;
    v1.flow = FlowKey::make("dl", "www.justbeamit.com", Transport::tcp);
    v1.label = Label::cleartext_transfer;
    v1.evidence = {"GET /ab12c", "host:www.justbeamit.com"};

    Verdict v2;
    v2.flow = FlowKey::make("p1", "p2", Transport::udp);
    v2.label = Label::covert_p2p_suspected;
    v2.evidence = {"stun keepalive cadence 5.00 pairs/s (window 0)", "host:www.sharefest.com"};

    Verdict v3;  // same host again, different flow
    v3.flow = FlowKey::make("p3", "p4", Transport::udp);
    v3.label = Label::covert_p2p_suspected;
    v3.evidence = {"host:www.sharefest.com"};

    Verdict benign;
    benign.flow = FlowKey::make("user", "news.example.org", Transport::tcp);
    benign.label = Label::benign;
    benign.evidence = {"host:news.example.org"};

    auto rules = emit_blacklist({v1, v2, v3, benign});
    REQUIRE(rules.size() == 2);
    std::set<std::string> patterns;
    for (const auto& r : rules) patterns.insert(r.pattern);
    CHECK(patterns.count("*.justbeamit.com") == 1);
    CHECK(patterns.count("*.sharefest.com") == 1);
    for (const auto& r : rules) CHECK_FALSE(r.rationale.empty());
}

TEST_CASE("flow stats aggregate counts, bytes, and time range per flow") {
    TraceLog log;
    log.events.push_back(ev(100, "a", "b", EventKind::stun_bind, 20));
    log.events.push_back(ev(105, "b", "a", EventKind::stun_confirm, 32));
    log.events.push_back(ev(200, "a", "b", EventKind::data, 1400));
    log.events.push_back(ev(300, "a", "b", EventKind::data, 600));
    log.events.push_back(ev(50, "c", "d", EventKind::http_get, 80));

    auto stats = flow_stats(log);
    REQUIRE(stats.size() == 2);

    const auto& ab = stats.at(FlowKey::make("a", "b", Transport::udp));
    CHECK(ab.events == 4);
    CHECK(ab.bytes == 20 + 32 + 1400 + 600);
    CHECK(ab.first_ts_ms == 100);
    CHECK(ab.last_ts_ms == 300);
    CHECK(ab.kind_counts[static_cast<std::size_t>(EventKind::stun_bind)] == 1);
    CHECK(ab.kind_counts[static_cast<std::size_t>(EventKind::data)] == 2);

    const auto& cd = stats.at(FlowKey::make("c", "d", Transport::udp));
    CHECK(cd.events == 1);
    CHECK(cd.bytes == 80);
}

TEST_CASE("end to end: a scripted covert session is flagged from its own trace") {
    auto log = sim::run_scenario(R"({
        "seed": 7,
        "signaling_host": "www.sharefest.test",
        "stun_server": "stun.sharefest.test",
        "endpoints": [
            {"id": "peer-a", "nat": "full_cone"},
            {"id": "peer-c", "nat": "none"}
        ],
        "actions": [
            {"op": "offer", "actor": "peer-a", "share": "payload", "mode": "direct",
             "content": {"kind": "random", "size": 262144, "seed": 3}, "max_downloads": 1},
            {"op": "fetch", "actor": "peer-c", "share": "payload", "transfer_ms": 30000}
        ]
    })");

    auto verdicts = classify(log);
    bool covert_found = false;
    for (const auto& v : verdicts) {
        if (v.label != Label::covert_p2p_suspected) continue;
        covert_found = true;
        bool host_named = false;
        for (const auto& line : v.evidence)
            if (line == "host:www.sharefest.test") host_named = true;
        CHECK(host_named);
    }
    CHECK(covert_found);

    auto rules = emit_blacklist(verdicts);
    bool pattern_found = false;
    for (const auto& r : rules)
        if (r.pattern == "*.sharefest.test") pattern_found = true;
    CHECK(pattern_found);

    // the transfer itself is opaque: nothing reconstructable on the peer flow
    auto rec = reconstruct_cleartext(log, FlowKey::make("peer-a", "peer-c", Transport::udp));
    CHECK_FALSE(rec.bytes.has_value());
}
