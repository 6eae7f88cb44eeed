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

#include "zta/authn.hpp"
#include "zta/common.hpp"
#include "zta/http.hpp"
#include "zta/net.hpp"
#include "zta/observe.hpp"
#include "zta/policy.hpp"
#include "zta/tls_gate.hpp"
#include "zta/token.hpp"

namespace zta::gateway {

inline constexpr std::string_view kLoginPath = "/.zta/login";
inline constexpr std::string_view kAuthScheme = "ZTA";
inline constexpr std::size_t kDefaultHeaderLimit = 16 * 1024;

struct GatewayConfig {
  std::string listen_host = "127.0.0.1";
  std::uint16_t listen_port = 8443;
  std::string gateway_id = "gw-1";
  std::string trust_root;
  std::string server_cert;
  std::string server_key;
  std::string signing_key;
  std::string signing_key_id = "k1";
  std::string control_plane_url;
  authn::IdpConfig idp;
  std::optional<std::string> geo_db;
  double poll_interval_s = 5.0;
  std::size_t header_limit_bytes = kDefaultHeaderLimit;
  std::string log_path = std::string(observe::kDefaultLogFile);
  std::string dead_letter_path = "access.deadletter.jsonl";
  std::optional<std::string> session_journal;
  std::chrono::milliseconds upstream_connect_timeout{5000};

  /// Relative paths resolve against `base_dir`.
  static GatewayConfig from_json(const std::string& text, const std::string& base_dir = ".");
  std::string to_json() const;
};

/// Everything the gateway talks to; defaults are built from the config.
struct GatewayDeps {
  std::shared_ptr<const Clock> clock;
  std::shared_ptr<authn::IdpClient> idp;
  std::shared_ptr<policy::ControlPlaneClient> control_plane;
  std::shared_ptr<observe::LogSink> log_sink;
};

struct GatewayMetrics {
  std::atomic<std::uint64_t> requests{0};
  std::atomic<std::uint64_t> allowed{0};
  std::atomic<std::uint64_t> denied{0};
  std::atomic<std::uint64_t> errors{0};
  std::atomic<std::uint64_t> oversize_headers{0};
  std::atomic<std::uint64_t> upstream_failures{0};
  std::atomic<std::uint64_t> tunnels_opened{0};
  std::atomic<std::uint64_t> tunnels_terminated{0};
  std::atomic<std::size_t> peak_relay_buffer{0};
};

/// Client-supplied identity surface removed before anything else runs:
/// X-ZTA-* headers, the session cookie, and ZTA-scheme credentials.
void sanitize_inbound(http::Headers& headers);

/// Host header without port, lowercased.
std::string request_host(const http::RequestHead& head);

/// Live CONNECT relay known to the snapshot sweep.
struct Tunnel {
  std::uint64_t id = 0;
  std::string host;
  authn::Session session;
  tls::TlsClientInfo client;
  std::atomic<bool> terminate{false};
  int client_fd = -1;
  int upstream_fd = -1;
};

class TunnelRegistry {
 public:
  std::shared_ptr<Tunnel> add(std::shared_ptr<Tunnel> t);
  void remove(std::uint64_t id);
  std::size_t size() const;
  /// Terminates every tunnel for which `deny` returns true; returns the count.
  template <typename Pred>
  std::size_t sweep(Pred deny) {
    std::lock_guard lk(mu_);
    std::size_t n = 0;
    for (auto& [id, t] : tunnels_) {
      if (!t->terminate.load() && deny(*t)) {
        terminate_locked(*t);
        n++;
      }
    }
    return n;
  }
  void terminate_all();

 private:
  static void terminate_locked(Tunnel& t);

  mutable std::mutex mu_;
  std::map<std::uint64_t, std::shared_ptr<Tunnel>> tunnels_;
  std::uint64_t next_id_ = 1;
};

class Gateway {
 public:
  Gateway(GatewayConfig cfg, GatewayDeps deps);
  ~Gateway();
  Gateway(const Gateway&) = delete;
  Gateway& operator=(const Gateway&) = delete;

  /// Binds, fetches policy once, starts the poller, log shipper and accept loop.
  void start();
  void stop();
  std::uint16_t port() const { return port_; }

  const GatewayConfig& config() const { return cfg_; }
  const GatewayMetrics& metrics() const { return metrics_; }
  const tls::HandshakeCounters& handshake_counters() const { return tls_->counters(); }
  policy::SnapshotHolder& snapshots() { return snapshots_; }
  policy::PolicyPoller& poller() { return *poller_; }
  observe::LogPipeline& logs() { return *logs_; }
  authn::SessionStore& sessions() { return *sessions_; }
  token::Keyring& keyring() { return *keyring_; }
  std::size_t active_tunnels() const { return tunnels_.size(); }
  std::size_t active_connections() const { return active_conns_.load(); }
  /// Re-evaluates every live tunnel against the current snapshot.
  std::size_t sweep_tunnels();

 private:
  struct Conn;
  struct Exchange;

  void accept_loop();
  void serve_connection(net::Socket sock, std::string peer_ip);
  /// Returns false when the connection must close afterwards.
  bool handle_request(Conn& c, http::RequestHead head);
  bool handle_special(Conn& c, Exchange& x);
  bool handle_callback(Conn& c, Exchange& x);
  bool handle_login(Conn& c, Exchange& x);
  bool forward_http(Conn& c, Exchange& x, const policy::RoutePolicy& route, const authn::Session& session);
  bool tunnel_connect(Conn& c, Exchange& x, const policy::RoutePolicy& route, const authn::Session& session);
  bool respond(Conn& c, Exchange& x, int status, const std::string& body, const http::Headers& extra = {},
               bool close = false);
  bool deny(Conn& c, Exchange& x, std::string reason, int status = 403, bool close = false);
  void finish(Exchange& x, observe::LogOutcome outcome, std::string reason, int status);
  void log_refused_handshake(const tls::TlsGate::Refused& r, const std::string& peer_ip);
  policy::AccessDecision evaluate_tunnel(const Tunnel& t, const policy::PolicySnapshot* snap);
  void note_peak(std::size_t n);

  GatewayConfig cfg_;
  GatewayDeps deps_;
  std::unique_ptr<tls::TlsGate> tls_;
  std::unique_ptr<token::Keyring> keyring_;
  std::unique_ptr<authn::SessionStore> sessions_;
  authn::GeoDb geo_;
  policy::SnapshotHolder snapshots_;
  std::unique_ptr<policy::PolicyPoller> poller_;
  std::unique_ptr<observe::LogPipeline> logs_;
  TunnelRegistry tunnels_;
  GatewayMetrics metrics_;

  net::Socket listener_;
  std::uint16_t port_ = 0;
  std::atomic<bool> stopping_{false};
  std::thread accept_thread_;
  std::mutex conns_mu_;
  std::multiset<int> conn_fds_;
  std::atomic<std::size_t> active_conns_{0};
};

}  // namespace zta::gateway
