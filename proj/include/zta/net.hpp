#pragma once

#include <chrono>
#include <cstdint>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

#include <openssl/ssl.h>

namespace zta::net {

class NetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TimeoutError : public NetError {
 public:
  using NetError::NetError;
};

/// The peer sent a fatal TLS alert, e.g. a client certificate rejected after
/// a TLS 1.3 handshake.
class TlsAlert : public NetError {
 public:
  using NetError::NetError;
};

/// Owning file descriptor for a TCP socket.
class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(Socket&& o) noexcept : fd_(o.release()) {}
  Socket& operator=(Socket&& o) noexcept;
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  ~Socket();

  int fd() const { return fd_; }
  bool valid() const { return fd_ >= 0; }
  int release() {
    int f = fd_;
    fd_ = -1;
    return f;
  }
  void close();
  /// shutdown(2) both directions; wakes any thread blocked on this socket.
  void shutdown_both() const;
  void set_timeouts(std::chrono::milliseconds recv, std::chrono::milliseconds send) const;

 private:
  int fd_ = -1;
};

Socket tcp_listen(const std::string& host, std::uint16_t port, int backlog = 256);
std::uint16_t local_port(const Socket& s);
Socket tcp_accept(const Socket& listener, std::string* peer_ip = nullptr);
/// Connects with a bounded timeout. `bind_ip` pins the local source address.
Socket tcp_connect(const std::string& host, std::uint16_t port, std::chrono::milliseconds timeout,
                   const std::optional<std::string>& bind_ip = std::nullopt);

/// Blocking byte stream. read() returns 0 on orderly EOF.
class Stream {
 public:
  virtual ~Stream() = default;
  virtual std::size_t read(char* buf, std::size_t n) = 0;
  virtual void write_all(std::string_view data) = 0;
  /// Bytes already decrypted/buffered and readable without touching the fd.
  virtual bool has_pending() const { return false; }
  virtual int fd() const = 0;
  virtual void close() = 0;
};

class PlainStream final : public Stream {
 public:
  explicit PlainStream(Socket s) : sock_(std::move(s)) {}
  std::size_t read(char* buf, std::size_t n) override;
  void write_all(std::string_view data) override;
  int fd() const override { return sock_.fd(); }
  void close() override { sock_.close(); }
  Socket& socket() { return sock_; }

 private:
  Socket sock_;
};

struct SslCtxDeleter {
  void operator()(SSL_CTX* c) const { SSL_CTX_free(c); }
};
struct SslDeleter {
  void operator()(SSL* s) const { SSL_free(s); }
};
using SslCtxPtr = std::unique_ptr<SSL_CTX, SslCtxDeleter>;
using SslPtr = std::unique_ptr<SSL, SslDeleter>;

class TlsStream final : public Stream {
 public:
  TlsStream(Socket s, SslPtr ssl) : sock_(std::move(s)), ssl_(std::move(ssl)) {}
  ~TlsStream() override;
  std::size_t read(char* buf, std::size_t n) override;
  void write_all(std::string_view data) override;
  bool has_pending() const override;
  int fd() const override { return sock_.fd(); }
  void close() override;
  SSL* ssl() const { return ssl_.get(); }
  Socket& socket() { return sock_; }

 private:
  Socket sock_;
  SslPtr ssl_;
  bool closed_ = false;
};

/// TLS client context used by test clients and the CLI.
struct TlsClientOptions {
  std::string ca_pem_path;                  // server trust anchor
  std::optional<std::string> cert_pem_path;  // device certificate
  std::optional<std::string> key_pem_path;
};

SslCtxPtr make_client_context(const TlsClientOptions& opts);

/// Half-closes and drains briefly so a pending alert reaches the peer
/// instead of being lost to a reset.
void linger_close(int fd, std::chrono::milliseconds budget);

/// Runs the client handshake. `server_name` drives SNI and hostname checks.
std::unique_ptr<TlsStream> tls_connect(SSL_CTX* ctx, Socket sock, const std::string& server_name);

std::string openssl_error_string();

}  // namespace zta::net
