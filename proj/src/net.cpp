#include "covertpipe/net.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <array>
#include <cerrno>
#include <cstring>

namespace covertpipe::net {

namespace {

[[noreturn]] void fail(const std::string& what) {
    throw Error(Errc::network, what + ": " + std::strerror(errno));
}

}  // namespace

TcpStream& TcpStream::operator=(TcpStream&& other) noexcept {
    if (this != &other) {
        close();
        fd_ = other.fd_;
        other.fd_ = -1;
    }
    return *this;
}

TcpStream::~TcpStream() { close(); }

void TcpStream::close() {
    if (fd_ >= 0) {
        ::close(fd_);
        fd_ = -1;
    }
}

TcpStream TcpStream::connect(const std::string& host, std::uint16_t port) {
    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) fail("socket");
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
        ::close(fd);
        throw Error(Errc::network, "bad address: " + host);
    }
    if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
        int saved = errno;
        ::close(fd);
        errno = saved;
        fail("connect " + host + ":" + std::to_string(port));
    }
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    return TcpStream(fd);
}

void TcpStream::write_all(std::span<const std::uint8_t> data) {
    std::size_t off = 0;
    while (off < data.size()) {
        ssize_t n = ::send(fd_, data.data() + off, data.size() - off, MSG_NOSIGNAL);
        if (n < 0) {
            if (errno == EINTR) continue;
            fail("send");
        }
        off += static_cast<std::size_t>(n);
    }
}

void TcpStream::read_exact(std::span<std::uint8_t> buf) {
    std::size_t off = 0;
    while (off < buf.size()) {
        ssize_t n = ::recv(fd_, buf.data() + off, buf.size() - off, 0);
        if (n < 0) {
            if (errno == EINTR) continue;
            fail("recv");
        }
        if (n == 0) throw Error(Errc::network, "connection closed mid-read");
        off += static_cast<std::size_t>(n);
    }
}

void TcpStream::set_read_timeout_ms(int ms) {
    timeval tv{};
    tv.tv_sec = ms / 1000;
    tv.tv_usec = (ms % 1000) * 1000;
    if (::setsockopt(fd_, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv) != 0) fail("setsockopt");
}

void write_frame(TcpStream& stream, std::uint8_t type, std::span<const std::uint8_t> payload) {
    std::array<std::uint8_t, 5> header{};
    const std::uint32_t len = static_cast<std::uint32_t>(payload.size());
    header[0] = static_cast<std::uint8_t>(len >> 24);
    header[1] = static_cast<std::uint8_t>(len >> 16);
    header[2] = static_cast<std::uint8_t>(len >> 8);
    header[3] = static_cast<std::uint8_t>(len);
    header[4] = type;
    stream.write_all(header);
    stream.write_all(payload);
}

Frame read_frame(TcpStream& stream, std::size_t max_payload) {
    std::array<std::uint8_t, 5> header{};
    stream.read_exact(header);
    const std::uint32_t len = static_cast<std::uint32_t>(header[0]) << 24 |
                              static_cast<std::uint32_t>(header[1]) << 16 |
                              static_cast<std::uint32_t>(header[2]) << 8 |
                              static_cast<std::uint32_t>(header[3]);
    if (len > max_payload)
        throw Error(Errc::network, "frame payload exceeds limit: " + std::to_string(len));
    Frame frame;
    frame.type = header[4];
    frame.payload.resize(len);
    if (len > 0) stream.read_exact(frame.payload);
    return frame;
}

TcpListener& TcpListener::operator=(TcpListener&& other) noexcept {
    if (this != &other) {
        close();
        fd_ = other.fd_;
        port_ = other.port_;
        other.fd_ = -1;
    }
    return *this;
}

TcpListener::~TcpListener() { close(); }

void TcpListener::close() {
    if (fd_ >= 0) {
        ::shutdown(fd_, SHUT_RDWR);
        ::close(fd_);
        fd_ = -1;
    }
}

TcpListener TcpListener::bind(std::uint16_t port) {
    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) fail("socket");
    int one = 1;
    ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
        int saved = errno;
        ::close(fd);
        errno = saved;
        fail("bind port " + std::to_string(port));
    }
    if (::listen(fd, 64) != 0) {
        int saved = errno;
        ::close(fd);
        errno = saved;
        fail("listen");
    }
    socklen_t len = sizeof addr;
    if (::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len) != 0) {
        int saved = errno;
        ::close(fd);
        errno = saved;
        fail("getsockname");
    }
    TcpListener l;
    l.fd_ = fd;
    l.port_ = ntohs(addr.sin_port);
    return l;
}

std::optional<TcpStream> TcpListener::accept() {
    while (true) {
        int fd = ::accept(fd_, nullptr, nullptr);
        if (fd >= 0) {
            int one = 1;
            ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
            return TcpStream(fd);
        }
        if (errno == EINTR) continue;
        return std::nullopt;
    }
}

}  // namespace covertpipe::net
