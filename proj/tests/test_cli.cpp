#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fcntl.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "covertpipe/net.hpp"
#include "covertpipe/util.hpp"

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct RunResult {
    int code = -1;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

const std::string& bin() {
    static const std::string path = [] {
        const char* env = std::getenv("COVERTPIPE_BIN");
        REQUIRE_MESSAGE(env != nullptr, "COVERTPIPE_BIN must point at the tool binary");
        return std::string(env);
    }();
    return path;
}

fs::path scenarios_dir() {
    const char* env = std::getenv("COVERTPIPE_SCENARIOS");
    REQUIRE_MESSAGE(env != nullptr, "COVERTPIPE_SCENARIOS must point at the scenarios directory");
    return fs::path(env);
}

fs::path scratch_dir() {
    static const fs::path dir = [] {
        auto d = fs::temp_directory_path() / ("covertpipe-cli-" + std::to_string(::getpid()));
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

int run_counter = 0;

RunResult run_cli(const std::string& args, const std::string& env_prefix = "") {
    auto out_path = scratch_dir() / ("out-" + std::to_string(run_counter));
    auto err_path = scratch_dir() / ("err-" + std::to_string(run_counter));
    ++run_counter;
    std::string cmd = env_prefix + bin() + " " + args + " >" + out_path.string() + " 2>" +
                      err_path.string();
    int rc = std::system(cmd.c_str());
    RunResult result;
    result.code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    result.out = slurp(out_path);
    result.err = slurp(err_path);
    return result;
}

// Background process handle for the serve subcommand.
struct ServeHandle {
    pid_t pid = -1;
    std::uint16_t port = 0;
    fs::path log;

    ~ServeHandle() {
        if (pid > 0) {
            ::kill(pid, SIGTERM);
            int status = 0;
            ::waitpid(pid, &status, 0);
        }
    }
};

ServeHandle start_serve() {
    ServeHandle handle;
    {
        auto probe = covertpipe::net::TcpListener::bind(0);
        handle.port = probe.port();
        probe.close();
    }
    handle.log = scratch_dir() / ("serve-" + std::to_string(handle.port) + ".log");

    pid_t pid = ::fork();
    REQUIRE(pid >= 0);
    if (pid == 0) {
        int fd = ::open(handle.log.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
        ::dup2(fd, 1);
        ::dup2(fd, 2);
        std::string listen = "127.0.0.1:" + std::to_string(handle.port);
        ::execl(bin().c_str(), bin().c_str(), "serve", "--listen", listen.c_str(),
                (char*)nullptr);
        _exit(127);
    }
    handle.pid = pid;

    for (int i = 0; i < 100; ++i) {
        if (slurp(handle.log).find("listening on") != std::string::npos) return handle;
        std::this_thread::sleep_for(std::chrono::milliseconds(50));
    }
    FAIL("serve did not come up: ", slurp(handle.log));
    return handle;
}

std::string write_payload(const std::string& name, const covertpipe::Bytes& content) {
    auto path = scratch_dir() / name;
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(content.data()),
              static_cast<std::streamsize>(content.size()));
    return path.string();
}

covertpipe::Bytes read_bytes(const fs::path& path) {
    auto text = slurp(path);
    return covertpipe::Bytes(text.begin(), text.end());
}

std::string first_line(const std::string& text) {
    auto nl = text.find('\n');
    return nl == std::string::npos ? text : text.substr(0, nl);
}

}  // namespace

TEST_CASE("help output documents every subcommand and flag") {
    auto top = run_cli("--help");
    CHECK(top.code == 0);
    for (const char* sub : {"serve", "send", "recv", "simulate", "detect", "hs"})
        CHECK_MESSAGE(top.out.find(sub) != std::string::npos, "missing subcommand ", sub);

    struct Probe {
        const char* args;
        std::vector<const char*> flags;
    };
    const Probe probes[] = {
        {"serve --help", {"--listen", "--config"}},
        {"send --help",
         {"--mode", "--ttl", "--max-downloads", "--chunk-size", "--server", "--no-wait"}},
        {"recv --help", {"--out", "--server", "--tamper"}},
        {"simulate --help", {"--trace", "--seed"}},
        {"detect --help", {"--stun-threshold", "--emit-blacklist", "--reconstruct"}},
        {"hs --help", {"publish", "lookup", "rendezvous", "harvest", "impersonate"}},
        {"hs publish --help", {"--dht", "--now", "--seed", "--relays", "--strict-disjoint"}},
        {"hs rendezvous --help", {"--onion", "--client", "--obs-log"}},
        {"hs harvest --help", {"--from-period", "--to-period", "--attacker-nodes"}},
        {"hs impersonate --help", {"--onion", "--release"}},
    };
    for (const auto& probe : probes) {
        auto result = run_cli(probe.args);
        CHECK(result.code == 0);
        for (const char* flag : probe.flags)
            CHECK_MESSAGE(result.out.find(flag) != std::string::npos, probe.args,
                          " does not document ", flag);
    }
}

TEST_CASE("unknown flags and missing subcommands exit 5") {
    CHECK(run_cli("").code == 5);
    CHECK(run_cli("frobnicate").code == 5);
    CHECK(run_cli("send").code == 5);                      // missing file argument
    CHECK(run_cli("simulate x.json --warp 9").code == 5);  // unknown flag
}

TEST_CASE("simulate replays a scenario deterministically") {
    auto scenario = (scenarios_dir() / "pipebytes.json").string();
    auto a = run_cli("simulate " + scenario);
    auto b = run_cli("simulate " + scenario);
    REQUIRE(a.code == 0);
    CHECK(a.out == b.out);
    CHECK_FALSE(a.out.empty());
    CHECK(a.err.find("events=") != std::string::npos);

    auto c = run_cli("simulate " + scenario + " --seed 999");
    REQUIRE(c.code == 0);
    CHECK(a.out != c.out);

    // every emitted line is one json object with the fixed field set
    std::istringstream lines(a.out);
    std::string line;
    while (std::getline(lines, line)) {
        auto doc = json::parse(line);
        for (const char* key : {"ts_ms", "src", "dst", "transport", "kind", "len"})
            CHECK(doc.contains(key));
    }
}

TEST_CASE("simulate writes the trace to a file when asked") {
    auto scenario = (scenarios_dir() / "justbeamit.json").string();
    auto trace_path = scratch_dir() / "justbeamit.ndjson";
    auto result = run_cli("simulate " + scenario + " --trace " + trace_path.string());
    REQUIRE(result.code == 0);
    CHECK(result.out.find("events=") != std::string::npos);
    auto trace_text = slurp(trace_path);
    CHECK(trace_text.find("http_get") != std::string::npos);
    CHECK(trace_text.find("www.justbeamit.com") != std::string::npos);
}

TEST_CASE("a bad scenario fails with a json-pointer diagnostic and exit 5") {
    auto path = scratch_dir() / "bad-scenario.json";
    {
        std::ofstream out(path);
        out << R"({"seed": 1, "signaling_host": "h",
                   "endpoints": [{"id": "a", "nat": "wobbly"}], "actions": []})";
    }
    auto result = run_cli("simulate " + path.string());
    CHECK(result.code == 5);
    CHECK(result.err.find("/endpoints/0/nat") != std::string::npos);
}

TEST_CASE("detect classifies the bundled scenarios end to end") {
    auto sim = run_cli("simulate " + (scenarios_dir() / "pipebytes.json").string() + " --trace " +
                       (scratch_dir() / "pipe.ndjson").string());
    REQUIRE(sim.code == 0);

    auto blacklist = scratch_dir() / "rules.txt";
    auto rebuilt = scratch_dir() / "rebuilt";
    auto det = run_cli("detect " + (scratch_dir() / "pipe.ndjson").string() +
                       " --emit-blacklist " + blacklist.string() + " --reconstruct " +
                       rebuilt.string());
    REQUIRE(det.code == 0);

    bool cleartext_seen = false;
    std::istringstream lines(det.out);
    std::string line;
    while (std::getline(lines, line)) {
        auto doc = json::parse(line);
        if (doc["label"] == "cleartext_transfer") cleartext_seen = true;
    }
    CHECK(cleartext_seen);
    CHECK(slurp(blacklist).find("*.pipebytes.com") != std::string::npos);

    // the reconstruction directory holds the recovered transfer bytes
    bool recovered = false;
    for (const auto& entry : fs::directory_iterator(rebuilt))
        if (fs::file_size(entry.path()) == 131072) recovered = true;
    CHECK(recovered);
    CHECK(det.err.find("reconstructed") != std::string::npos);

    // the benign browsing scenario produces no implicated hosts at all
    auto benign_trace = scratch_dir() / "benign.ndjson";
    REQUIRE(run_cli("simulate " + (scenarios_dir() / "benign_browse.json").string() + " --trace " +
                    benign_trace.string())
                .code == 0);
    auto benign_rules = scratch_dir() / "benign-rules.txt";
    auto benign = run_cli("detect " + benign_trace.string() + " --emit-blacklist " +
                          benign_rules.string());
    REQUIRE(benign.code == 0);
    std::istringstream benign_lines(benign.out);
    while (std::getline(benign_lines, line)) {
        auto doc = json::parse(line);
        CHECK(doc["label"] == "benign");
    }
    CHECK(slurp(benign_rules).empty());
}

TEST_CASE("detect rejects a nonsensical stun threshold and a missing trace") {
    CHECK(run_cli("detect /nonexistent/trace.ndjson").code == 5);
    auto trace = scratch_dir() / "tiny.ndjson";
    {
        std::ofstream out(trace);
        out << R"({"ts_ms":1,"src":"a","dst":"b","transport":"udp","kind":"data","len":1})"
            << "\n";
    }
    CHECK(run_cli("detect " + trace.string() + " --stun-threshold 0").code == 5);
    CHECK(run_cli("detect " + trace.string() + " --stun-threshold -2").code == 5);
}

TEST_CASE("a config file with an unknown key is refused by every subcommand") {
    auto path = scratch_dir() / "bad-config.json";
    {
        std::ofstream out(path);
        out << R"({"chunk_sizee": 4096})";
    }
    auto result = run_cli("serve --config " + path.string());
    CHECK(result.code == 5);
    CHECK(result.err.find("chunk_sizee") != std::string::npos);

    // the environment override takes the same path
    auto trace = scratch_dir() / "env-config.ndjson";
    {
        std::ofstream out(trace);
        out << R"({"ts_ms":1,"src":"a","dst":"b","transport":"udp","kind":"data","len":1})"
            << "\n";
    }
    auto env_result = run_cli("detect " + trace.string(),
                              "COVERTPIPE_CONFIG=" + path.string() + " ");
    CHECK(env_result.code == 5);
    CHECK(env_result.err.find("chunk_sizee") != std::string::npos);
}

TEST_CASE("send and recv move a file through a live rendezvous server") {
    auto serve = start_serve();
    auto server_flag = " --server 127.0.0.1:" + std::to_string(serve.port);

    auto content = covertpipe::random_bytes(131072, 0xabc);
    auto payload = write_payload("relay-upload.bin", content);

    auto sent = run_cli("send " + payload + " --mode relay" + server_flag);
    REQUIRE_MESSAGE(sent.code == 0, sent.err);
    auto url = first_line(sent.out);
    REQUIRE(url.find("covert://") == 0);

    auto out_path = scratch_dir() / "relay-download.bin";
    auto received = run_cli("recv " + url + " --out " + out_path.string() + server_flag);
    REQUIRE_MESSAGE(received.code == 0, received.err);
    CHECK(read_bytes(out_path) == content);

    // the one-time token is spent now
    auto replay = run_cli("recv " + url + " --out /dev/null" + server_flag);
    CHECK(replay.code == 2);
    CHECK(replay.err.find("invalid_token") != std::string::npos);
}

TEST_CASE("recv against a dead server exits 3 with a network error") {
    auto result = run_cli("recv covert://127.0.0.1:1/abcde --out /dev/null");
    CHECK(result.code == 3);
    CHECK(result.err.find("network") != std::string::npos);
}

TEST_CASE("the hidden service lifecycle maps failures onto distinct exit codes") {
    auto dht = (scratch_dir() / "world.json").string();

    auto published = run_cli("hs publish --dht " + dht + " --now 5000 --seed 7");
    REQUIRE_MESSAGE(published.code == 0, published.err);
    auto desc = json::parse(published.out);
    std::string onion = desc["onion_id"];
    CHECK(desc["intro_relays"].size() == 3);
    CHECK(desc["time_period"] == 1);

    auto found = run_cli("hs lookup --dht " + dht + " --now 5100 --onion " + onion);
    CHECK(found.code == 0);
    CHECK(json::parse(found.out)["onion_id"] == onion);

    // one period later the descriptor is gone
    auto stale = run_cli("hs lookup --dht " + dht + " --now 7300 --onion " + onion);
    CHECK(stale.code == 2);
    CHECK(stale.err.find("not_found") != std::string::npos);

    auto rendezvous = run_cli("hs rendezvous --dht " + dht + " --now 5200 --onion " + onion +
                              " --seed 9");
    REQUIRE_MESSAGE(rendezvous.code == 0, rendezvous.err);
    auto woven = json::parse(first_line(rendezvous.out));
    CHECK(woven["probe_delivered"] == true);

    auto harvest = run_cli("hs harvest --dht " + dht + " --now 5000 --from-period 1 "
                           "--to-period 1");
    CHECK(harvest.code == 0);
    CHECK(first_line(harvest.out) == onion);

    auto seized = run_cli("hs impersonate --dht " + dht + " --now 5300 --onion " + onion);
    CHECK(seized.code == 0);

    auto poisoned = run_cli("hs lookup --dht " + dht + " --now 5400 --onion " + onion);
    CHECK(poisoned.code == 4);
    CHECK(poisoned.err.find("integrity") != std::string::npos);

    auto blocked = run_cli("hs rendezvous --dht " + dht + " --now 5400 --onion " + onion +
                           " --seed 9");
    CHECK(blocked.code == 3);
    CHECK(blocked.err.find("introduction_failure") != std::string::npos);

    // the takeover poisons stored copies; recovery needs a release AND a
    // republication by the genuine owner
    auto released = run_cli("hs impersonate --dht " + dht + " --now 5500 --onion " + onion +
                            " --release");
    CHECK(released.code == 0);
    auto still_poisoned = run_cli("hs lookup --dht " + dht + " --now 5600 --onion " + onion);
    CHECK(still_poisoned.code == 4);
    auto republished = run_cli("hs publish --dht " + dht + " --now 5600 --onion " + onion);
    REQUIRE_MESSAGE(republished.code == 0, republished.err);
    CHECK(json::parse(republished.out)["onion_id"] == onion);
    auto recovered = run_cli("hs lookup --dht " + dht + " --now 5700 --onion " + onion);
    CHECK(recovered.code == 0);
}
