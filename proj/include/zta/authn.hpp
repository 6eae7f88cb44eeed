#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include "zta/common.hpp"
#include "zta/http.hpp"
#include "zta/tls_gate.hpp"

namespace zta::authn {

inline constexpr std::string_view kSessionCookie = "zta_session";
inline constexpr std::string_view kCallbackPath = "/.zta/callback";
inline constexpr auto kFlowTtl = std::chrono::seconds(300);
inline constexpr auto kDefaultSessionLifetime = std::chrono::hours(8);

struct GeoPoint {
  double lat = 0;
  double lon = 0;
  bool operator==(const GeoPoint&) const = default;
};

struct LoginEvent {
  TimePoint at;
  std::string source_ip;
  std::optional<GeoPoint> geo;  // nullopt is the UNKNOWN sentinel
};

struct Session {
  std::string session_id;
  std::string user_id;
  std::set<std::string> groups;
  Employment employment = Employment::fte;
  std::string device_fingerprint;
  TimePoint created_at;
  TimePoint expires_at;
  std::vector<LoginEvent> login_events;
};

struct AuthFlowState {
  std::string state_nonce;
  std::string original_url;
  TimePoint created_at;
  std::string device_fingerprint;
};

/// Static CIDR -> coordinate table with longest-prefix matching (IPv4).
class GeoDb {
 public:
  GeoDb() = default;
  /// JSON array of {"cidr": "10.1.0.0/16", "lat": 51.5, "lon": -0.13}.
  static GeoDb from_json(const std::string& text);
  void add(const std::string& cidr, GeoPoint p);
  std::optional<GeoPoint> lookup(const std::string& ip) const;

 private:
  struct Entry {
    std::uint32_t network;
    int prefix;
    GeoPoint point;
  };
  std::vector<Entry> entries_;
};

struct IdpConfig {
  std::string authorize_url;
  std::string token_url;
  std::string client_id;
  std::string client_secret;
};

/// Directory-backed identity returned by the IdP token endpoint.
struct IdpAssertion {
  std::string sub;
  std::set<std::string> groups;
  Employment employment = Employment::fte;
  std::int64_t auth_time = 0;
};

class IdpRejected : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IdpClient {
 public:
  virtual ~IdpClient() = default;
  virtual IdpAssertion exchange_code(const std::string& code, const std::string& redirect_uri) = 0;
  /// Direct credential grant used by the CLI login flow.
  virtual IdpAssertion password_grant(const std::string& user, const std::string& password) = 0;
};

/// Talks to the IdP token endpoint over HTTP.
class HttpIdpClient final : public IdpClient {
 public:
  explicit HttpIdpClient(IdpConfig cfg) : cfg_(std::move(cfg)) {}
  IdpAssertion exchange_code(const std::string& code, const std::string& redirect_uri) override;
  IdpAssertion password_grant(const std::string& user, const std::string& password) override;

 private:
  IdpAssertion post_token(const std::vector<std::pair<std::string, std::string>>& form);
  IdpConfig cfg_;
};

class StoreFull : public std::runtime_error {
 public:
  StoreFull() : std::runtime_error("auth flow store full") {}
};

/// In-memory session and flow store; concurrent readers, serialized writers.
/// Returned sessions are copies. Optionally journals sessions to a JSONL file.
class SessionStore {
 public:
  explicit SessionStore(std::size_t max_flows = 10000, std::optional<std::string> journal_path = std::nullopt);

  void put_session(const Session& s);
  std::optional<Session> find_session(const std::string& id) const;
  std::size_t session_count() const;

  void put_flow(const AuthFlowState& f);
  /// Removes and returns the flow; a second take of the same nonce yields nullopt.
  std::optional<AuthFlowState> take_flow(const std::string& nonce);
  std::size_t flow_count() const;

  /// Most recent login event recorded for the user, across sessions.
  std::optional<LoginEvent> last_login(const std::string& user_id) const;
  void note_login(const std::string& user_id, const LoginEvent& e);

 private:
  void journal(const Session& s);
  void replay_journal();

  mutable std::shared_mutex mu_;
  std::map<std::string, Session> sessions_;
  std::map<std::string, AuthFlowState> flows_;
  std::map<std::string, LoginEvent> last_login_;
  std::size_t max_flows_;
  std::optional<std::string> journal_path_;
};

enum class SessionStatus { ok, no_session, device_mismatch, expired };

std::string_view to_string(SessionStatus s);

struct SessionLookup {
  std::optional<Session> session;
  SessionStatus status = SessionStatus::no_session;
};

/// Resolves the zta_session cookie. The session must be live and bound to
/// the presenting device.
SessionLookup check_session(const http::Headers& headers, const SessionStore& store,
                            const tls::TlsClientInfo& client, TimePoint now);
/// Same rules for an opaque session reference presented outside cookies.
SessionLookup check_session_id(const std::string& session_id, const SessionStore& store,
                               const tls::TlsClientInfo& client, TimePoint now);

struct SsoRedirect {
  std::string location;
  std::string state;
};

/// Persists a fresh AuthFlowState and builds the IdP authorize redirect.
SsoRedirect initiate_sso(const std::string& request_url, const tls::TlsClientInfo& client, const IdpConfig& idp,
                         const std::string& redirect_uri, SessionStore& store, TimePoint now);

enum class CallbackError { unknown_state, state_expired, device_mismatch, idp_rejected_code };

std::string_view to_string(CallbackError e);

class CallbackFailed : public std::runtime_error {
 public:
  explicit CallbackFailed(CallbackError e) : std::runtime_error(std::string(to_string(e))), code_(e) {}
  CallbackError code() const { return code_; }

 private:
  CallbackError code_;
};

struct CallbackResult {
  Session session;
  std::string set_cookie;
  std::string location;
};

struct SessionOptions {
  std::chrono::seconds lifetime = kDefaultSessionLifetime;
};

CallbackResult handle_callback(const std::string& code, const std::string& state, const tls::TlsClientInfo& client,
                               IdpClient& idp, const std::string& redirect_uri, SessionStore& store,
                               const GeoDb& geo, TimePoint now, const SessionOptions& opts = {});

/// Builds and stores a session from an assertion; the user's previous login
/// (from any session) seeds the history so travel checks span logins.
Session create_session(const IdpAssertion& who, const tls::TlsClientInfo& client, SessionStore& store,
                       const GeoDb& geo, TimePoint now, const SessionOptions& opts = {});

Session record_login_geo(Session session, const std::string& ip, const GeoDb& geo, TimePoint now);

std::string session_cookie(const Session& s);

std::string new_opaque_id();

}  // namespace zta::authn
