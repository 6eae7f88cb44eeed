#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "zta/authn.hpp"
#include "zta/common.hpp"
#include "zta/http.hpp"
#include "zta/net.hpp"

namespace httplib {
class Server;
}

namespace zta::harness {

// -- mock identity provider ----------------------------------------------------

struct DirectoryEntry {
  std::string password_hash;  // hex SHA-256 of salt || password
  std::string salt;
  std::set<std::string> groups;
  Employment employment = Employment::fte;
  bool active = true;
};

class UserDirectory {
 public:
  /// Throws ValidationError on a duplicate user id.
  void add(const std::string& user_id, const std::string& password, std::set<std::string> groups, Employment emp,
           bool active = true);
  const DirectoryEntry* find(const std::string& user_id) const;
  bool check_password(const std::string& user_id, const std::string& password) const;
  std::vector<std::string> users() const;

  /// alice (FTE, eng), bob (CONTRACTOR, eng), carol (FTE, sre) and an
  /// inactive dave (FTE, eng). Password is "<user>-pw".
  static UserDirectory default_fixture();

 private:
  std::map<std::string, DirectoryEntry> entries_;
};

struct IdpOptions {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
  std::string client_id = "zta-gateway";
  std::string client_secret = "gateway-secret";
  std::chrono::seconds code_ttl{60};
};

/// Authorization-code IdP: /authorize -> /login form -> code -> /token.
/// Also accepts the password grant at /token for the CLI flow.
class MockIdp {
 public:
  MockIdp(IdpOptions opts, UserDirectory dir, std::shared_ptr<const Clock> clock);
  ~MockIdp();

  void start();
  void stop();
  void run();
  std::uint16_t port() const { return port_; }
  std::string base_url() const;
  authn::IdpConfig client_config() const;
  std::size_t live_codes() const;

 private:
  struct Code {
    std::string user;
    std::string redirect_uri;
    TimePoint issued;
  };
  void install_routes();
  void bind();

  IdpOptions opts_;
  UserDirectory dir_;
  std::shared_ptr<const Clock> clock_;
  std::unique_ptr<httplib::Server> server_;
  std::uint16_t port_ = 0;
  std::thread thread_;
  mutable std::mutex mu_;
  std::map<std::string, Code> codes_;
};

// -- upstreams -----------------------------------------------------------------

/// HTTP echo app. Any path returns a JSON dump of method, path, query and
/// headers; /bytes/<n> streams n bytes; /status/<code> answers with that code.
class EchoUpstream {
 public:
  explicit EchoUpstream(std::string host = "127.0.0.1", std::uint16_t port = 0);
  ~EchoUpstream();
  void start();
  void stop();
  void run();
  std::uint16_t port() const { return port_; }
  std::string address() const { return host_ + ":" + std::to_string(port_); }

 private:
  void bind();
  std::string host_;
  std::uint16_t req_port_;
  std::unique_ptr<httplib::Server> server_;
  std::uint16_t port_ = 0;
  std::thread thread_;
};

/// Raw TCP echo for tunnel tests.
class TcpEcho {
 public:
  explicit TcpEcho(std::string host = "127.0.0.1", std::uint16_t port = 0);
  ~TcpEcho();
  void start();
  void stop();
  std::uint16_t port() const { return port_; }
  std::string address() const { return host_ + ":" + std::to_string(port_); }

 private:
  void loop();
  std::string host_;
  net::Socket listener_;
  std::uint16_t port_ = 0;
  std::atomic<bool> stopping_{false};
  std::atomic<int> active_{0};
  std::thread thread_;
};

// -- TLS test client -------------------------------------------------------------

struct ClientOptions {
  std::string gateway_host = "127.0.0.1";
  std::uint16_t gateway_port = 0;
  std::string ca_path;                   // trust anchor for the gateway cert
  std::optional<std::string> cert_path;  // device certificate
  std::optional<std::string> key_path;
  std::optional<std::string> source_ip;  // bind address, e.g. 127.0.1.10
};

struct Response {
  int status = 0;
  http::Headers headers;
  std::string body;
  std::size_t head_bytes = 0;

  /// "reason" field of a JSON error body, if any.
  std::string reason() const;
};

/// The TLS handshake with the gateway failed on the client side.
class HandshakeRefused : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The connection ended before any HTTP response byte arrived. Under TLS 1.3
/// a server-side client-certificate rejection surfaces here, after the
/// client has already finished its half of the handshake.
class NoResponse : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Programmatic browser stand-in: one device identity, a cookie jar per host,
/// a fresh TLS connection per request.
class TestClient {
 public:
  explicit TestClient(ClientOptions opts);

  Response request(const std::string& method, const std::string& host, const std::string& target,
                   const http::Headers& extra = {}, const std::string& body = {});
  Response get(const std::string& host, const std::string& target, const http::Headers& extra = {}) {
    return request("GET", host, target, extra);
  }
  /// Sends `raw` bytes verbatim (must be a full request) and reads one response.
  Response raw(const std::string& host, const std::string& raw_request);

  /// Follows gateway -> IdP -> callback -> original URL. Returns the final response.
  Response browse_with_login(const std::string& host, const std::string& target, const std::string& user,
                             const std::string& password);

  /// POST /.zta/login; returns the opaque session id or nullopt on rejection.
  std::optional<std::string> cli_login(const std::string& user, const std::string& password);

  struct Tunnel {
    Response response;
    std::unique_ptr<net::TlsStream> stream;  // set when status == 200
  };
  Tunnel connect(const std::string& target, const std::optional<std::string>& session_id);

  /// Just the handshake; throws HandshakeRefused on failure.
  std::unique_ptr<net::TlsStream> open(const std::string& sni);

  std::map<std::string, std::string>& cookies(const std::string& host) { return jar_[host]; }

 private:
  Response exchange(const std::string& host, const std::string& bytes, const std::string& method);
  void absorb_cookies(const std::string& host, const Response& r);

  ClientOptions opts_;
  net::SslCtxPtr ctx_;
  std::map<std::string, std::map<std::string, std::string>> jar_;
};

/// Reads one response (head + body) from a stream.
Response read_response(http::Reader& reader, const std::string& method);

}  // namespace zta::harness
