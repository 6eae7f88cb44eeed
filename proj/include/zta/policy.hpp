#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>

#include "zta/authn.hpp"
#include "zta/common.hpp"
#include "zta/tls_gate.hpp"

namespace zta::policy {

enum class RouteKind { http, tcp_tunnel };

std::string_view to_string(RouteKind k);

struct RoutePolicy {
  std::string host;
  std::string upstream;  // host:port
  RouteKind kind = RouteKind::http;
  std::set<std::string> required_groups;  // ANY-of; empty = any authenticated user
  std::set<Employment> allowed_employment{Employment::fte, Employment::contractor};
  std::int64_t session_max_age_s = 8 * 3600;

  bool operator==(const RoutePolicy&) const = default;
};

struct PolicySnapshot {
  std::int64_t version = 0;
  TimePoint generated_at;
  bool kill_switch = false;
  std::set<std::string> revoked_fingerprints;
  std::map<std::string, RoutePolicy> routes;
  double geo_velocity_limit_kmh = 900.0;
  std::int64_t max_staleness_s = 300;

  bool operator==(const PolicySnapshot&) const = default;
};

enum class Outcome { allow, deny };

enum class Reason {
  ok,
  kill_switch,
  revoked_cert,
  unknown_host,
  group_denied,
  employment_denied,
  session_too_old,
  impossible_travel,
  no_session,
  device_mismatch,
  stale_policy_fail_closed,
};

std::string_view to_string(Outcome o);
std::string_view to_string(Reason r);

struct AccessDecision {
  Outcome outcome = Outcome::deny;
  Reason reason = Reason::stale_policy_fail_closed;
  std::int64_t policy_version = 0;

  bool allowed() const { return outcome == Outcome::allow; }
  bool operator==(const AccessDecision&) const = default;
};

/// Checks in fixed order, first failure wins: kill switch, revoked device,
/// unknown host, employment, groups, session age, impossible travel.
AccessDecision evaluate(const PolicySnapshot& snapshot, const std::string& host, const authn::Session& session,
                        const tls::TlsClientInfo& client, TimePoint now);

/// The session-independent prefix of evaluate() (kill switch, revocation,
/// unknown host). Returns allow/ok when none of them fires.
AccessDecision evaluate_device(const PolicySnapshot& snapshot, const std::string& host,
                               const tls::TlsClientInfo& client);

/// Great-circle distance on a sphere of radius 6371.0 km.
double haversine_km(authn::GeoPoint a, authn::GeoPoint b);

/// True iff consecutive known-geo login events imply speed above the limit.
/// UNKNOWN events are skipped; the time delta is floored at one second.
bool impossible_travel(const authn::Session& session, double limit_kmh);

/// Field -> message for every violated RoutePolicy invariant.
std::map<std::string, std::string> validate_route(const RoutePolicy& route);
bool is_valid_dns_name(std::string_view host);

/// Canonical JSON (sorted keys, sorted sets) for the snapshot wire format.
std::string encode_snapshot(const PolicySnapshot& s);
PolicySnapshot decode_snapshot(const std::string& text);
std::string encode_route(const RoutePolicy& r);
RoutePolicy decode_route(const std::string& text);

/// Atomically swapped active snapshot. Readers pin one shared_ptr for a
/// whole request.
class SnapshotHolder {
 public:
  std::shared_ptr<const PolicySnapshot> current() const;
  /// Installs iff the version strictly increases.
  bool install(std::shared_ptr<const PolicySnapshot> next);

 private:
  mutable std::mutex mu_;
  std::shared_ptr<const PolicySnapshot> current_;
};

using SteadyTime = std::chrono::steady_clock::time_point;

enum class Freshness { fresh, stale_fail_closed };

/// Stale iff now - last_success > max_staleness_s. No snapshot is stale.
Freshness staleness_gate(const PolicySnapshot* snapshot, std::optional<SteadyTime> last_success, SteadyTime now);

struct FetchResult {
  enum class Status { ok, not_modified, unreachable } status = Status::unreachable;
  std::optional<PolicySnapshot> snapshot;
};

class ControlPlaneClient {
 public:
  virtual ~ControlPlaneClient() = default;
  virtual FetchResult fetch_policy(std::optional<std::int64_t> if_none_match) = 0;
};

class HttpControlPlaneClient final : public ControlPlaneClient {
 public:
  explicit HttpControlPlaneClient(std::string base_url) : base_url_(std::move(base_url)) {}
  FetchResult fetch_policy(std::optional<std::int64_t> if_none_match) override;

 private:
  std::string base_url_;
};

enum class PollResult { installed, unchanged, unreachable, rejected };

std::string_view to_string(PollResult r);

/// One GET /v1/policy round with If-None-Match set to the current version.
PollResult poll_policy(ControlPlaneClient& client, SnapshotHolder& holder);

/// Background poller. Tracks the last successful round (200 or 304) on the
/// steady clock and calls `on_tick` after every round.
class PolicyPoller {
 public:
  PolicyPoller(std::shared_ptr<ControlPlaneClient> client, SnapshotHolder& holder, std::chrono::milliseconds interval);
  ~PolicyPoller();

  void start(std::function<void(PollResult)> on_tick = {});
  void stop();
  /// Runs one round synchronously.
  PollResult poll_once();

  std::optional<SteadyTime> last_success() const;
  Freshness freshness(SteadyTime now = std::chrono::steady_clock::now()) const;
  std::uint64_t anomalies() const { return anomalies_.load(); }

 private:
  std::shared_ptr<ControlPlaneClient> client_;
  SnapshotHolder& holder_;
  std::chrono::milliseconds interval_;
  std::atomic<std::int64_t> last_success_ns_{-1};
  std::atomic<std::uint64_t> anomalies_{0};
  std::mutex mu_;
  std::condition_variable cv_;
  bool stopping_ = false;
  std::thread thread_;
};

}  // namespace zta::policy
