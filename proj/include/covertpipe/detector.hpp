#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "covertpipe/trace.hpp"
#include "covertpipe/util.hpp"

namespace covertpipe::detect {

struct IngestResult {
    TraceLog log;  // stably sorted by ts_ms
    std::size_t total_lines = 0;
    std::vector<std::size_t> malformed_lines;  // 1-based
};

// Throws Errc::ingest (naming line numbers) when more than 1% of non-empty
// lines fail to parse.
IngestResult ingest(std::istream& in);
IngestResult ingest_file(const std::string& path);

struct StunOptions {
    double window_s = 10.0;
    double threshold_pairs_per_s = 2.5;
    std::int64_t pair_max_gap_ms = 1000;  // confirm pairs with nearest preceding bind
};

struct StunFlag {
    FlowKey flow;
    std::vector<double> window_rates;  // pairs per second, windows from the log start
    std::size_t first_flagged_window = 0;
    double peak_rate = 0.0;
};

std::vector<StunFlag> stun_fingerprint(const TraceLog& log, const StunOptions& opts = {});

enum class Label : std::uint8_t { covert_p2p_suspected, cleartext_transfer, benign };

const char* label_name(Label l);

struct Verdict {
    FlowKey flow;
    Label label = Label::benign;
    std::vector<std::string> evidence;  // implicated hosts appear as "host:<id>"

    std::string to_json_line() const;
};

std::vector<Verdict> classify(const TraceLog& log, const StunOptions& opts = {});

struct Reconstruction {
    std::optional<Bytes> bytes;  // nullopt: nothing recoverable (encrypted flow)
    bool partial = false;        // sequence gaps detected
};

// Concatenates the base64 payload extension of the flow's data events in
// sequence order. Never fabricates bytes.
Reconstruction reconstruct_cleartext(const TraceLog& log, const FlowKey& flow);

// Independent per-event keep decision with probability `rate`; deterministic
// for a given seed. rate must be in (0, 1].
TraceLog sample(const TraceLog& log, double rate, std::uint64_t seed);

struct CorrelatedPair {
    FlowKey a;
    FlowKey b;
    double score = 0.0;
};

// Windowed per-flow event-count vectors over the overlapping time range,
// paired greedily by descending cosine similarity. Throws Errc::correlation
// when the traces do not overlap in time.
std::vector<CorrelatedPair> correlate(const TraceLog& a, const TraceLog& b, double window_s = 5.0);

struct BlacklistRule {
    std::string pattern;  // host glob
    std::string rationale;
};

// One deduplicated rule per host implicated by a non-benign verdict.
std::vector<BlacklistRule> emit_blacklist(const std::vector<Verdict>& verdicts);

struct FlowStats {
    std::array<std::uint64_t, 7> kind_counts{};  // indexed by EventKind
    std::uint64_t events = 0;
    std::uint64_t bytes = 0;
    std::int64_t first_ts_ms = 0;
    std::int64_t last_ts_ms = 0;
    std::vector<double> stun_pair_rates;
};

std::map<FlowKey, FlowStats> flow_stats(const TraceLog& log, const StunOptions& opts = {});

}  // namespace covertpipe::detect
