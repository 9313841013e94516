#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>

#include "covertpipe/util.hpp"

namespace covertpipe::net {

// Move-only owner of a connected TCP socket.
class TcpStream {
  public:
    TcpStream() = default;
    explicit TcpStream(int fd) : fd_(fd) {}
    TcpStream(TcpStream&& other) noexcept : fd_(other.fd_) { other.fd_ = -1; }
    TcpStream& operator=(TcpStream&& other) noexcept;
    TcpStream(const TcpStream&) = delete;
    TcpStream& operator=(const TcpStream&) = delete;
    ~TcpStream();

    static TcpStream connect(const std::string& host, std::uint16_t port);

    bool valid() const { return fd_ >= 0; }
    void close();

    // Blocks until every byte is written; throws Errc::network on failure.
    void write_all(std::span<const std::uint8_t> data);
    // Blocks until exactly buf.size() bytes arrive; throws Errc::network on
    // short read or error.
    void read_exact(std::span<std::uint8_t> buf);
    // Applies SO_RCVTIMEO; a timed-out read throws Errc::network.
    void set_read_timeout_ms(int ms);

  private:
    int fd_ = -1;
};

// Framing shared by the control wire protocol and the data plane:
// 4-byte big-endian payload length, 1 type byte, payload.
struct Frame {
    std::uint8_t type = 0;
    Bytes payload;
};

void write_frame(TcpStream& stream, std::uint8_t type, std::span<const std::uint8_t> payload);
// Throws Errc::network on stream errors and on payloads above max_payload.
Frame read_frame(TcpStream& stream, std::size_t max_payload = 512u << 20);

class TcpListener {
  public:
    TcpListener() = default;
    TcpListener(TcpListener&& other) noexcept : fd_(other.fd_), port_(other.port_) {
        other.fd_ = -1;
    }
    TcpListener& operator=(TcpListener&& other) noexcept;
    TcpListener(const TcpListener&) = delete;
    TcpListener& operator=(const TcpListener&) = delete;
    ~TcpListener();

    // Binds 127.0.0.1:port (port 0 picks a free one) and listens.
    static TcpListener bind(std::uint16_t port);

    std::uint16_t port() const { return port_; }
    bool valid() const { return fd_ >= 0; }
    void close();

    // Blocks for the next connection; returns nullopt once close() has been
    // called from another thread.
    std::optional<TcpStream> accept();

  private:
    int fd_ = -1;
    std::uint16_t port_ = 0;
};

}  // namespace covertpipe::net
