#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "zta/common.hpp"
#include "zta/observe.hpp"
#include "zta/pki.hpp"
#include "zta/policy.hpp"

namespace httplib {
class Server;
}

namespace zta::cp {

struct HistoryEntry {
  std::int64_t version = 0;
  std::string actor;
  std::string change;
  TimePoint at;

  bool operator==(const HistoryEntry&) const = default;
};

/// Route body rejected; carries field -> message.
class RouteRejected : public std::runtime_error {
 public:
  explicit RouteRejected(std::map<std::string, std::string> errors)
      : std::runtime_error("invalid route"), errors_(std::move(errors)) {}
  const std::map<std::string, std::string>& errors() const { return errors_; }

 private:
  std::map<std::string, std::string> errors_;
};

/// Owner of the authoritative snapshot. Every mutation bumps the version by
/// one (no-ops included), appends history and persists before returning.
class PolicyStore {
 public:
  /// Loads `state_path` when it exists; otherwise starts at version 1.
  PolicyStore(std::optional<std::string> state_path, std::shared_ptr<const Clock> clock);

  std::shared_ptr<const policy::PolicySnapshot> current() const;
  std::vector<HistoryEntry> history() const;
  std::vector<pki::RevocationEntry> revocations() const;

  std::int64_t set_kill_switch(bool enabled, const std::string& actor);
  /// Throws RouteRejected when the route violates its invariants.
  std::int64_t upsert_route(const policy::RoutePolicy& route, const std::string& actor);
  /// Throws ValidationError on a malformed fingerprint.
  std::int64_t add_revocation(const std::string& fingerprint, const std::string& reason, const std::string& actor);
  std::int64_t update_settings(std::optional<double> geo_velocity_limit_kmh, std::optional<std::int64_t> max_staleness_s,
                               const std::string& actor);

  /// Serialized state file contents.
  std::string dump_state() const;

 private:
  template <typename Mutate>
  std::int64_t commit(const std::string& actor, Mutate&& mutate);
  void load(const std::string& text);

  std::optional<std::string> state_path_;
  std::shared_ptr<const Clock> clock_;
  mutable std::shared_mutex mu_;
  std::shared_ptr<const policy::PolicySnapshot> current_;
  std::vector<HistoryEntry> history_;
  pki::RevocationList revocations_;
};

struct StoredLog {
  std::uint64_t cursor = 0;  // ingest order, assigned by the store
  TimePoint received_at;
  observe::AccessLogRecord record;
};

struct LogQuery {
  std::optional<std::string> user;
  std::optional<std::string> fingerprint;
  std::optional<std::string> host;
  std::optional<observe::LogOutcome> outcome;
  std::optional<std::uint64_t> since;  // exclusive ingest cursor
  std::size_t limit = 100;
};

inline constexpr std::size_t kMaxIngestBatch = 1000;
inline constexpr std::size_t kMaxQueryLimit = 10000;

/// Conjunctive match used by the store and by tests.
bool matches(const StoredLog& s, const LogQuery& q);

/// Ring of the newest records plus an append-only file. Duplicates by
/// (gateway_id, sequence) are dropped while the original is still in the ring.
class LogStore {
 public:
  LogStore(std::size_t capacity, std::optional<std::string> path, std::shared_ptr<const Clock> clock);

  /// Returns how many records were new.
  std::size_t ingest(const std::vector<observe::AccessLogRecord>& batch);
  /// Newest first by (timestamp, sequence); limit must be <= kMaxQueryLimit.
  std::vector<StoredLog> query(const LogQuery& q) const;
  std::uint64_t cursor() const;
  std::size_t size() const;

 private:
  void append_locked(StoredLog s);

  std::size_t capacity_;
  std::optional<std::string> path_;
  std::shared_ptr<const Clock> clock_;
  mutable std::shared_mutex mu_;
  std::deque<StoredLog> ring_;
  std::set<std::pair<std::string, std::uint64_t>> seen_;
  std::uint64_t next_cursor_ = 1;
};

struct ControlPlaneOptions {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;  // 0 picks an ephemeral port
  std::string admin_token;
  std::optional<std::string> state_path;
  std::optional<std::string> log_path;
  std::size_t log_capacity = 100000;
  std::string cors_origin = "*";
  /// Fraction of requests answered 503 before routing (availability testing).
  double fault_rate = 0.0;
  std::uint64_t fault_seed = 1;
};

/// HTTP front end for PolicyStore and LogStore under /v1.
class ControlPlaneServer {
 public:
  ControlPlaneServer(ControlPlaneOptions opts, std::shared_ptr<const Clock> clock);
  ~ControlPlaneServer();
  ControlPlaneServer(const ControlPlaneServer&) = delete;
  ControlPlaneServer& operator=(const ControlPlaneServer&) = delete;

  /// Binds and serves on a background thread; throws NetError if binding fails.
  void start();
  void stop();
  /// Blocks serving on the calling thread.
  void run();

  std::uint16_t port() const { return port_; }
  std::string url() const;
  PolicyStore& policy() { return policy_; }
  LogStore& logs() { return logs_; }
  void set_fault_rate(double rate);

 private:
  void bind();
  void install_routes();
  bool inject_fault();

  ControlPlaneOptions opts_;
  std::shared_ptr<const Clock> clock_;
  PolicyStore policy_;
  LogStore logs_;
  std::unique_ptr<httplib::Server> server_;
  std::uint16_t port_ = 0;
  std::thread thread_;
  std::mutex fault_mu_;
  std::mt19937_64 fault_rng_;
};

}  // namespace zta::cp
