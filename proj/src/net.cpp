#include "zta/net.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <openssl/err.h>
#include <openssl/x509v3.h>

#include <cerrno>
#include <csignal>
#include <cstring>

namespace zta::net {

namespace {

[[noreturn]] void throw_errno(const std::string& what) {
  int e = errno;
  if (e == EAGAIN || e == EWOULDBLOCK) throw TimeoutError(what + ": timed out");
  throw NetError(what + ": " + std::strerror(e));
}

sockaddr_in make_addr(const std::string& host, std::uint16_t port) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  std::string h = host == "localhost" ? "127.0.0.1" : host;
  if (h.empty() || h == "0.0.0.0") {
    addr.sin_addr.s_addr = htonl(INADDR_ANY);
  } else if (inet_pton(AF_INET, h.c_str(), &addr.sin_addr) != 1) {
    addrinfo hints{};
    hints.ai_family = AF_INET;
    addrinfo* res = nullptr;
    if (getaddrinfo(h.c_str(), nullptr, &hints, &res) != 0 || res == nullptr) {
      throw NetError("cannot resolve " + host);
    }
    addr.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
    freeaddrinfo(res);
  }
  return addr;
}

struct IgnoreSigpipe {
  IgnoreSigpipe() { std::signal(SIGPIPE, SIG_IGN); }
} const kIgnoreSigpipe;

}  // namespace

Socket& Socket::operator=(Socket&& o) noexcept {
  if (this != &o) {
    close();
    fd_ = o.release();
  }
  return *this;
}

Socket::~Socket() { close(); }

void Socket::close() {
  if (fd_ >= 0) {
    ::close(fd_);
    fd_ = -1;
  }
}

void Socket::shutdown_both() const {
  if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
}

void Socket::set_timeouts(std::chrono::milliseconds recv, std::chrono::milliseconds send) const {
  auto to_tv = [](std::chrono::milliseconds ms) {
    timeval tv{};
    tv.tv_sec = static_cast<time_t>(ms.count() / 1000);
    tv.tv_usec = static_cast<suseconds_t>((ms.count() % 1000) * 1000);
    return tv;
  };
  timeval r = to_tv(recv), s = to_tv(send);
  ::setsockopt(fd_, SOL_SOCKET, SO_RCVTIMEO, &r, sizeof r);
  ::setsockopt(fd_, SOL_SOCKET, SO_SNDTIMEO, &s, sizeof s);
}

Socket tcp_listen(const std::string& host, std::uint16_t port, int backlog) {
  Socket s(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!s.valid()) throw_errno("socket");
  int one = 1;
  ::setsockopt(s.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  auto addr = make_addr(host, port);
  if (::bind(s.fd(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) throw_errno("bind");
  if (::listen(s.fd(), backlog) != 0) throw_errno("listen");
  return s;
}

std::uint16_t local_port(const Socket& s) {
  sockaddr_in addr{};
  socklen_t len = sizeof addr;
  if (::getsockname(s.fd(), reinterpret_cast<sockaddr*>(&addr), &len) != 0) throw_errno("getsockname");
  return ntohs(addr.sin_port);
}

Socket tcp_accept(const Socket& listener, std::string* peer_ip) {
  sockaddr_in addr{};
  socklen_t len = sizeof addr;
  int fd = ::accept4(listener.fd(), reinterpret_cast<sockaddr*>(&addr), &len, SOCK_CLOEXEC);
  if (fd < 0) throw_errno("accept");
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  if (peer_ip) {
    char buf[INET_ADDRSTRLEN] = {0};
    inet_ntop(AF_INET, &addr.sin_addr, buf, sizeof buf);
    *peer_ip = buf;
  }
  return Socket(fd);
}

Socket tcp_connect(const std::string& host, std::uint16_t port, std::chrono::milliseconds timeout,
                   const std::optional<std::string>& bind_ip) {
  Socket s(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!s.valid()) throw_errno("socket");
  if (bind_ip) {
    auto local = make_addr(*bind_ip, 0);
    if (::bind(s.fd(), reinterpret_cast<sockaddr*>(&local), sizeof local) != 0) throw_errno("bind source");
  }
  auto addr = make_addr(host, port);
  int flags = ::fcntl(s.fd(), F_GETFL, 0);
  ::fcntl(s.fd(), F_SETFL, flags | O_NONBLOCK);
  int rc = ::connect(s.fd(), reinterpret_cast<sockaddr*>(&addr), sizeof addr);
  if (rc != 0) {
    if (errno != EINPROGRESS) throw_errno("connect " + host + ":" + std::to_string(port));
    pollfd p{s.fd(), POLLOUT, 0};
    int pr = ::poll(&p, 1, static_cast<int>(timeout.count()));
    if (pr == 0) throw TimeoutError("connect " + host + ":" + std::to_string(port) + ": timed out");
    if (pr < 0) throw_errno("poll");
    int err = 0;
    socklen_t len = sizeof err;
    ::getsockopt(s.fd(), SOL_SOCKET, SO_ERROR, &err, &len);
    if (err != 0) {
      errno = err;
      throw_errno("connect " + host + ":" + std::to_string(port));
    }
  }
  ::fcntl(s.fd(), F_SETFL, flags);
  int one = 1;
  ::setsockopt(s.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  return s;
}

std::size_t PlainStream::read(char* buf, std::size_t n) {
  for (;;) {
    ssize_t r = ::recv(sock_.fd(), buf, n, 0);
    if (r >= 0) return static_cast<std::size_t>(r);
    if (errno == EINTR) continue;
    if (errno == ECONNRESET) return 0;
    throw_errno("recv");
  }
}

void PlainStream::write_all(std::string_view data) {
  while (!data.empty()) {
    ssize_t w = ::send(sock_.fd(), data.data(), data.size(), MSG_NOSIGNAL);
    if (w < 0) {
      if (errno == EINTR) continue;
      throw_errno("send");
    }
    data.remove_prefix(static_cast<std::size_t>(w));
  }
}

std::string openssl_error_string() {
  std::string out;
  unsigned long e;
  while ((e = ERR_get_error()) != 0) {
    char buf[256];
    ERR_error_string_n(e, buf, sizeof buf);
    if (!out.empty()) out += "; ";
    out += buf;
  }
  return out.empty() ? "unknown TLS error" : out;
}

TlsStream::~TlsStream() { close(); }

std::size_t TlsStream::read(char* buf, std::size_t n) {
  if (closed_) return 0;
  for (;;) {
    ERR_clear_error();
    int r = SSL_read(ssl_.get(), buf, static_cast<int>(n));
    if (r > 0) return static_cast<std::size_t>(r);
    int err = SSL_get_error(ssl_.get(), r);
    if (err == SSL_ERROR_ZERO_RETURN) return 0;
    if (err == SSL_ERROR_WANT_READ || err == SSL_ERROR_WANT_WRITE) continue;
    if (err == SSL_ERROR_SYSCALL) {
      if (errno == EINTR) continue;
      if (errno == EAGAIN || errno == EWOULDBLOCK) throw TimeoutError("tls read: timed out");
      return 0;  // peer vanished without close_notify
    }
    if (err == SSL_ERROR_SSL && ERR_GET_REASON(ERR_peek_error()) >= SSL_AD_REASON_OFFSET) {
      throw TlsAlert("tls read: " + openssl_error_string());
    }
    throw NetError("tls read: " + openssl_error_string());
  }
}

void TlsStream::write_all(std::string_view data) {
  if (closed_) throw NetError("tls write on closed stream");
  while (!data.empty()) {
    ERR_clear_error();
    int w = SSL_write(ssl_.get(), data.data(), static_cast<int>(data.size()));
    if (w > 0) {
      data.remove_prefix(static_cast<std::size_t>(w));
      continue;
    }
    int err = SSL_get_error(ssl_.get(), w);
    if (err == SSL_ERROR_WANT_WRITE || err == SSL_ERROR_WANT_READ) continue;
    if (err == SSL_ERROR_SYSCALL && errno == EINTR) continue;
    if (err == SSL_ERROR_SYSCALL && (errno == EAGAIN || errno == EWOULDBLOCK)) {
      throw TimeoutError("tls write: timed out");
    }
    if (err == SSL_ERROR_SSL && ERR_GET_REASON(ERR_peek_error()) >= SSL_AD_REASON_OFFSET) {
      throw TlsAlert("tls write: " + openssl_error_string());
    }
    throw NetError("tls write: " + openssl_error_string());
  }
}

bool TlsStream::has_pending() const { return !closed_ && SSL_pending(ssl_.get()) > 0; }

void TlsStream::close() {
  if (closed_) return;
  closed_ = true;
  if (ssl_) SSL_shutdown(ssl_.get());
  sock_.close();
}

SslCtxPtr make_client_context(const TlsClientOptions& opts) {
  SslCtxPtr ctx(SSL_CTX_new(TLS_client_method()));
  if (!ctx) throw NetError("SSL_CTX_new: " + openssl_error_string());
  SSL_CTX_set_min_proto_version(ctx.get(), TLS1_2_VERSION);
  if (SSL_CTX_load_verify_locations(ctx.get(), opts.ca_pem_path.c_str(), nullptr) != 1) {
    throw NetError("load CA " + opts.ca_pem_path + ": " + openssl_error_string());
  }
  SSL_CTX_set_verify(ctx.get(), SSL_VERIFY_PEER, nullptr);
  if (opts.cert_pem_path) {
    if (SSL_CTX_use_certificate_chain_file(ctx.get(), opts.cert_pem_path->c_str()) != 1) {
      throw NetError("load cert " + *opts.cert_pem_path + ": " + openssl_error_string());
    }
    const std::string& key = opts.key_pem_path ? *opts.key_pem_path : *opts.cert_pem_path;
    if (SSL_CTX_use_PrivateKey_file(ctx.get(), key.c_str(), SSL_FILETYPE_PEM) != 1) {
      throw NetError("load key " + key + ": " + openssl_error_string());
    }
  }
  return ctx;
}

std::unique_ptr<TlsStream> tls_connect(SSL_CTX* ctx, Socket sock, const std::string& server_name) {
  SslPtr ssl(SSL_new(ctx));
  if (!ssl) throw NetError("SSL_new: " + openssl_error_string());
  SSL_set_fd(ssl.get(), sock.fd());
  SSL_set_tlsext_host_name(ssl.get(), server_name.c_str());
  SSL_set1_host(ssl.get(), server_name.c_str());
  ERR_clear_error();
  if (SSL_connect(ssl.get()) != 1) {
    throw NetError("tls handshake: " + openssl_error_string());
  }
  return std::make_unique<TlsStream>(std::move(sock), std::move(ssl));
}

void linger_close(int fd, std::chrono::milliseconds budget) {
  ::shutdown(fd, SHUT_WR);
  const auto deadline = std::chrono::steady_clock::now() + budget;
  char buf[4096];
  for (;;) {
    auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
    if (left.count() <= 0) return;
    pollfd p{fd, POLLIN, 0};
    int rc = ::poll(&p, 1, static_cast<int>(left.count()));
    if (rc < 0 && errno == EINTR) continue;
    if (rc <= 0) return;
    ssize_t n = ::recv(fd, buf, sizeof buf, 0);
    if (n <= 0) return;
  }
}

}  // namespace zta::net
