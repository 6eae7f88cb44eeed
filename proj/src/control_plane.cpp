#include "zta/control_plane.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <httplib.h>
#include <iostream>
#include <json.hpp>

#include "zta/net.hpp"

namespace zta::cp {

using nlohmann::json;
using policy::PolicySnapshot;
using policy::RoutePolicy;

namespace {

json history_to_json(const HistoryEntry& h) {
  return json{{"version", h.version}, {"actor", h.actor}, {"change", h.change}, {"at", format_timestamp(h.at)}};
}

std::string serialize_state(const PolicySnapshot& s, const std::vector<HistoryEntry>& history,
                            const pki::RevocationList& rl) {
  json hist = json::array();
  for (const auto& h : history) hist.push_back(history_to_json(h));
  json revs = json::array();
  for (const auto& e : rl.entries()) {
    revs.push_back({{"fingerprint", e.fingerprint}, {"revoked_at", format_timestamp(e.revoked_at)}, {"reason", e.reason}});
  }
  json j{{"snapshot", json::parse(policy::encode_snapshot(s))}, {"history", hist}, {"revocations", revs}};
  return j.dump(1);
}

}  // namespace

PolicyStore::PolicyStore(std::optional<std::string> state_path, std::shared_ptr<const Clock> clock)
    : state_path_(std::move(state_path)), clock_(std::move(clock)) {
  if (state_path_ && std::filesystem::exists(*state_path_)) {
    load(read_file(*state_path_));
    return;
  }
  auto s = std::make_shared<PolicySnapshot>();
  s->version = 1;
  s->generated_at = clock_->now();
  history_.push_back({1, "system", "initial empty policy", s->generated_at});
  current_ = s;
  if (state_path_) write_file_atomic(*state_path_, serialize_state(*s, history_, revocations_));
}

void PolicyStore::load(const std::string& text) {
  json j = json::parse(text);
  current_ = std::make_shared<const PolicySnapshot>(policy::decode_snapshot(j.at("snapshot").dump()));
  for (const auto& h : j.at("history")) {
    history_.push_back({h.at("version").get<std::int64_t>(), h.at("actor").get<std::string>(),
                        h.at("change").get<std::string>(), parse_timestamp(h.at("at").get<std::string>())});
  }
  for (const auto& r : j.at("revocations")) {
    revocations_ = revocations_.revoke(r.at("fingerprint").get<std::string>(), r.at("reason").get<std::string>(),
                                       parse_timestamp(r.at("revoked_at").get<std::string>()));
  }
  if (history_.empty() || history_.back().version != current_->version) {
    throw ValidationError("state file: snapshot version does not match history");
  }
}

std::shared_ptr<const PolicySnapshot> PolicyStore::current() const {
  std::shared_lock lk(mu_);
  return current_;
}

std::vector<HistoryEntry> PolicyStore::history() const {
  std::shared_lock lk(mu_);
  return history_;
}

std::vector<pki::RevocationEntry> PolicyStore::revocations() const {
  std::shared_lock lk(mu_);
  return revocations_.entries();
}

std::string PolicyStore::dump_state() const {
  std::shared_lock lk(mu_);
  return serialize_state(*current_, history_, revocations_);
}

template <typename Mutate>
std::int64_t PolicyStore::commit(const std::string& actor, Mutate&& mutate) {
  std::unique_lock lk(mu_);
  PolicySnapshot next = *current_;
  pki::RevocationList rl = revocations_;
  std::string change = mutate(next, rl);
  next.version = current_->version + 1;
  next.generated_at = clock_->now();
  std::vector<HistoryEntry> hist = history_;
  hist.push_back({next.version, actor.empty() ? "admin" : actor, change, next.generated_at});
  // Persist first; in-memory state only moves once the file is durable.
  if (state_path_) write_file_atomic(*state_path_, serialize_state(next, hist, rl));
  current_ = std::make_shared<const PolicySnapshot>(std::move(next));
  history_ = std::move(hist);
  revocations_ = std::move(rl);
  return current_->version;
}

std::int64_t PolicyStore::set_kill_switch(bool enabled, const std::string& actor) {
  return commit(actor, [&](PolicySnapshot& s, pki::RevocationList&) {
    std::string change = std::string("kill_switch ") + (enabled ? "on" : "off");
    if (s.kill_switch == enabled) change += " (no-op)";
    s.kill_switch = enabled;
    return change;
  });
}

std::int64_t PolicyStore::upsert_route(const RoutePolicy& route, const std::string& actor) {
  auto errors = policy::validate_route(route);
  if (!errors.empty()) throw RouteRejected(std::move(errors));
  return commit(actor, [&](PolicySnapshot& s, pki::RevocationList&) {
    auto [it, inserted] = s.routes.insert_or_assign(route.host, route);
    return std::string(inserted ? "route added " : "route updated ") + it->first;
  });
}

std::int64_t PolicyStore::add_revocation(const std::string& fingerprint, const std::string& reason,
                                         const std::string& actor) {
  if (!is_fingerprint(fingerprint)) throw ValidationError("fingerprint must be 64 lowercase hex characters");
  return commit(actor, [&](PolicySnapshot& s, pki::RevocationList& rl) {
    const bool already = rl.contains(fingerprint);
    rl = rl.revoke(fingerprint, reason, clock_->now());
    s.revoked_fingerprints.insert(fingerprint);
    return "revoked " + fingerprint + (already ? " (no-op)" : "");
  });
}

std::int64_t PolicyStore::update_settings(std::optional<double> limit, std::optional<std::int64_t> staleness,
                                          const std::string& actor) {
  if (limit && !(*limit > 0)) throw ValidationError("geo_velocity_limit_kmh must be positive");
  if (staleness && *staleness <= 0) throw ValidationError("max_staleness_s must be positive");
  return commit(actor, [&](PolicySnapshot& s, pki::RevocationList&) {
    std::string change = "settings";
    if (limit) {
      s.geo_velocity_limit_kmh = *limit;
      change += " geo_velocity_limit_kmh=" + json(*limit).dump();
    }
    if (staleness) {
      s.max_staleness_s = *staleness;
      change += " max_staleness_s=" + std::to_string(*staleness);
    }
    return change;
  });
}

// -- logs -------------------------------------------------------------------

bool matches(const StoredLog& s, const LogQuery& q) {
  const auto& r = s.record;
  if (q.user && r.user_id != q.user) return false;
  if (q.fingerprint && r.fingerprint != q.fingerprint) return false;
  if (q.host && r.host != *q.host) return false;
  if (q.outcome && r.outcome != *q.outcome) return false;
  if (q.since && s.cursor <= *q.since) return false;
  return true;
}

namespace {

json stored_to_json(const StoredLog& s) {
  json j = json::parse(observe::to_json_line(s.record));
  j["cursor"] = s.cursor;
  j["received_at"] = format_timestamp(s.received_at);
  return j;
}

}  // namespace

LogStore::LogStore(std::size_t capacity, std::optional<std::string> path, std::shared_ptr<const Clock> clock)
    : capacity_(capacity), path_(std::move(path)), clock_(std::move(clock)) {
  if (!path_ || !std::filesystem::exists(*path_)) return;
  std::ifstream in(*path_);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      json j = json::parse(line);
      StoredLog s;
      s.cursor = j.at("cursor").get<std::uint64_t>();
      s.received_at = parse_timestamp(j.at("received_at").get<std::string>());
      s.record = observe::parse_json_line(line);
      next_cursor_ = std::max(next_cursor_, s.cursor + 1);
      seen_.emplace(s.record.gateway_id, s.record.sequence);
      ring_.push_back(std::move(s));
      if (ring_.size() > capacity_) {
        seen_.erase({ring_.front().record.gateway_id, ring_.front().record.sequence});
        ring_.pop_front();
      }
    } catch (const std::exception& e) {
      std::cerr << "control-plane: skipping unreadable log line: " << e.what() << "\n";
    }
  }
}

void LogStore::append_locked(StoredLog s) {
  if (ring_.size() >= capacity_) {
    seen_.erase({ring_.front().record.gateway_id, ring_.front().record.sequence});
    ring_.pop_front();
  }
  ring_.push_back(std::move(s));
}

std::size_t LogStore::ingest(const std::vector<observe::AccessLogRecord>& batch) {
  std::unique_lock lk(mu_);
  const TimePoint now = clock_->now();
  std::string lines;
  std::size_t accepted = 0;
  for (const auto& r : batch) {
    if (!seen_.emplace(r.gateway_id, r.sequence).second) continue;
    StoredLog s{next_cursor_++, now, r};
    lines += stored_to_json(s).dump();
    lines += '\n';
    append_locked(std::move(s));
    accepted++;
  }
  if (path_ && !lines.empty()) {
    std::ofstream out(*path_, std::ios::app);
    out << lines;
    out.flush();
    if (!out) std::cerr << "control-plane: log file append failed\n";
  }
  return accepted;
}

std::vector<StoredLog> LogStore::query(const LogQuery& q) const {
  if (q.limit > kMaxQueryLimit) throw ValidationError("limit must be <= 10000");
  std::vector<StoredLog> out;
  {
    std::shared_lock lk(mu_);
    for (const auto& s : ring_) {
      if (matches(s, q)) out.push_back(s);
    }
  }
  auto newer = [](const StoredLog& a, const StoredLog& b) {
    if (a.record.timestamp != b.record.timestamp) return a.record.timestamp > b.record.timestamp;
    if (a.record.sequence != b.record.sequence) return a.record.sequence > b.record.sequence;
    return a.record.gateway_id > b.record.gateway_id;
  };
  if (out.size() > q.limit) {
    std::partial_sort(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(q.limit), out.end(), newer);
    out.resize(q.limit);
  } else {
    std::sort(out.begin(), out.end(), newer);
  }
  return out;
}

std::uint64_t LogStore::cursor() const {
  std::shared_lock lk(mu_);
  return next_cursor_ - 1;
}

std::size_t LogStore::size() const {
  std::shared_lock lk(mu_);
  return ring_.size();
}

// -- HTTP -------------------------------------------------------------------

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message) {
  send_json(res, status, json{{"error", message}});
}

std::string actor_of(const httplib::Request& req) {
  auto a = req.get_header_value("X-Actor");
  return a.empty() ? "admin" : a;
}

/// Strips W/ and quotes from an entity tag.
std::string bare_etag(std::string v) {
  auto t = std::string(trim(v));
  if (t.rfind("W/", 0) == 0) t = t.substr(2);
  if (t.size() >= 2 && t.front() == '"' && t.back() == '"') t = t.substr(1, t.size() - 2);
  return t;
}

/// Builds a route from a PUT body, collecting type errors per field.
RoutePolicy route_from_body(const std::string& host, const json& body) {
  std::map<std::string, std::string> errors;
  RoutePolicy r;
  r.host = host;
  if (!body.is_object()) throw RouteRejected(std::map<std::string, std::string>{{"body", "must be a JSON object"}});
  if (body.contains("host") && body["host"] != host) errors["host"] = "must match the path";
  if (!body.contains("upstream") || !body["upstream"].is_string()) {
    errors["upstream"] = "required string host:port";
  } else {
    r.upstream = body["upstream"].get<std::string>();
  }
  if (body.contains("kind")) {
    if (body["kind"] == "HTTP") {
      r.kind = policy::RouteKind::http;
    } else if (body["kind"] == "TCP_TUNNEL") {
      r.kind = policy::RouteKind::tcp_tunnel;
    } else {
      errors["kind"] = "must be HTTP or TCP_TUNNEL";
    }
  }
  if (body.contains("required_groups")) {
    const auto& g = body["required_groups"];
    if (!g.is_array() || !std::all_of(g.begin(), g.end(), [](const json& x) { return x.is_string(); })) {
      errors["required_groups"] = "must be an array of strings";
    } else {
      r.required_groups = g.get<std::set<std::string>>();
    }
  }
  if (body.contains("allowed_employment")) {
    const auto& e = body["allowed_employment"];
    r.allowed_employment.clear();
    if (!e.is_array()) {
      errors["allowed_employment"] = "must be an array of FTE/CONTRACTOR";
    } else {
      for (const auto& x : e) {
        try {
          r.allowed_employment.insert(parse_employment(x.is_string() ? x.get<std::string>() : ""));
        } catch (const ValidationError&) {
          errors["allowed_employment"] = "must be an array of FTE/CONTRACTOR";
        }
      }
    }
  }
  if (body.contains("session_max_age_s")) {
    if (!body["session_max_age_s"].is_number_integer()) {
      errors["session_max_age_s"] = "must be a positive integer";
    } else {
      r.session_max_age_s = body["session_max_age_s"].get<std::int64_t>();
    }
  }
  for (auto& [k, v] : policy::validate_route(r)) errors.try_emplace(k, v);
  if (!errors.empty()) throw RouteRejected(std::move(errors));
  return r;
}

}  // namespace

ControlPlaneServer::ControlPlaneServer(ControlPlaneOptions opts, std::shared_ptr<const Clock> clock)
    : opts_(std::move(opts)),
      clock_(std::move(clock)),
      policy_(opts_.state_path, clock_),
      logs_(opts_.log_capacity, opts_.log_path, clock_),
      fault_rng_(opts_.fault_seed) {}

ControlPlaneServer::~ControlPlaneServer() { stop(); }

std::string ControlPlaneServer::url() const { return "http://" + opts_.host + ":" + std::to_string(port_); }

void ControlPlaneServer::set_fault_rate(double rate) {
  std::lock_guard lk(fault_mu_);
  opts_.fault_rate = rate;
}

bool ControlPlaneServer::inject_fault() {
  std::lock_guard lk(fault_mu_);
  if (opts_.fault_rate <= 0) return false;
  return std::uniform_real_distribution<double>(0.0, 1.0)(fault_rng_) < opts_.fault_rate;
}

void ControlPlaneServer::install_routes() {
  auto& s = *server_;

  s.set_pre_routing_handler([this](const httplib::Request& req, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Origin", opts_.cors_origin);
    res.set_header("Access-Control-Expose-Headers", "ETag");
    if (req.method == "OPTIONS") {
      res.set_header("Access-Control-Allow-Methods", "GET, POST, PUT, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Authorization, Content-Type, If-None-Match, X-Actor");
      res.set_header("Access-Control-Max-Age", "600");
      res.status = 204;
      return httplib::Server::HandlerResponse::Handled;
    }
    if (inject_fault()) {
      send_error(res, 503, "injected fault");
      return httplib::Server::HandlerResponse::Handled;
    }
    return httplib::Server::HandlerResponse::Unhandled;
  });

  auto authorized = [this](const httplib::Request& req, httplib::Response& res) {
    const std::string expected = "Bearer " + opts_.admin_token;
    if (opts_.admin_token.empty() || req.get_header_value("Authorization") != expected) {
      res.set_header("WWW-Authenticate", "Bearer");
      send_error(res, 401, "unauthorized");
      return false;
    }
    return true;
  };

  s.Get("/v1/health", [this](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, json{{"status", "ok"}, {"version", policy_.current()->version}});
  });

  s.Get("/v1/policy", [this](const httplib::Request& req, httplib::Response& res) {
    auto snap = policy_.current();
    const std::string etag = "\"" + std::to_string(snap->version) + "\"";
    res.set_header("ETag", etag);
    if (req.has_header("If-None-Match") &&
        bare_etag(req.get_header_value("If-None-Match")) == std::to_string(snap->version)) {
      res.status = 304;
      return;
    }
    res.status = 200;
    res.set_content(policy::encode_snapshot(*snap), "application/json");
  });

  s.Post("/v1/killswitch", [this, authorized](const httplib::Request& req, httplib::Response& res) {
    if (!authorized(req, res)) return;
    json body = json::parse(req.body, nullptr, false);
    if (body.is_discarded() || !body.is_object() || !body.contains("enabled") || !body["enabled"].is_boolean()) {
      send_json(res, 422, json{{"error", "invalid body"}, {"fields", {{"enabled", "required boolean"}}}});
      return;
    }
    bool enabled = body["enabled"].get<bool>();
    auto version = policy_.set_kill_switch(enabled, actor_of(req));
    send_json(res, 200, json{{"version", version}, {"kill_switch", enabled}});
  });

  s.Put(R"(/v1/routes/([^/]+))", [this, authorized](const httplib::Request& req, httplib::Response& res) {
    if (!authorized(req, res)) return;
    const std::string host = req.matches[1];
    json body = json::parse(req.body, nullptr, false);
    if (body.is_discarded()) {
      send_json(res, 422, json{{"error", "invalid route"}, {"fields", {{"body", "must be valid JSON"}}}});
      return;
    }
    try {
      auto route = route_from_body(host, body);
      auto version = policy_.upsert_route(route, actor_of(req));
      send_json(res, 200, json{{"version", version}, {"route", json::parse(policy::encode_route(route))}});
    } catch (const RouteRejected& e) {
      send_json(res, 422, json{{"error", "invalid route"}, {"fields", e.errors()}});
    }
  });

  s.Get("/v1/revocations", [this, authorized](const httplib::Request& req, httplib::Response& res) {
    if (!authorized(req, res)) return;
    json out = json::array();
    for (const auto& e : policy_.revocations()) {
      out.push_back({{"fingerprint", e.fingerprint}, {"revoked_at", format_timestamp(e.revoked_at)}, {"reason", e.reason}});
    }
    send_json(res, 200, json{{"version", policy_.current()->version}, {"revocations", out}});
  });

  s.Post("/v1/revocations", [this, authorized](const httplib::Request& req, httplib::Response& res) {
    if (!authorized(req, res)) return;
    json body = json::parse(req.body, nullptr, false);
    if (body.is_discarded() || !body.is_object() || !body.contains("fingerprint") || !body["fingerprint"].is_string()) {
      send_json(res, 422, json{{"error", "invalid revocation"}, {"fields", {{"fingerprint", "required"}}}});
      return;
    }
    try {
      auto version = policy_.add_revocation(body["fingerprint"].get<std::string>(), body.value("reason", std::string()),
                                            actor_of(req));
      send_json(res, 200, json{{"version", version}});
    } catch (const ValidationError& e) {
      send_json(res, 422, json{{"error", "invalid revocation"}, {"fields", {{"fingerprint", e.what()}}}});
    }
  });

  s.Put("/v1/settings", [this, authorized](const httplib::Request& req, httplib::Response& res) {
    if (!authorized(req, res)) return;
    json body = json::parse(req.body, nullptr, false);
    std::map<std::string, std::string> errors;
    std::optional<double> limit;
    std::optional<std::int64_t> staleness;
    if (body.is_discarded() || !body.is_object()) {
      errors["body"] = "must be a JSON object";
    } else {
      if (body.contains("geo_velocity_limit_kmh")) {
        if (body["geo_velocity_limit_kmh"].is_number() && body["geo_velocity_limit_kmh"].get<double>() > 0) {
          limit = body["geo_velocity_limit_kmh"].get<double>();
        } else {
          errors["geo_velocity_limit_kmh"] = "must be a positive number";
        }
      }
      if (body.contains("max_staleness_s")) {
        if (body["max_staleness_s"].is_number_integer() && body["max_staleness_s"].get<std::int64_t>() > 0) {
          staleness = body["max_staleness_s"].get<std::int64_t>();
        } else {
          errors["max_staleness_s"] = "must be a positive integer";
        }
      }
    }
    if (!errors.empty()) {
      send_json(res, 422, json{{"error", "invalid settings"}, {"fields", errors}});
      return;
    }
    auto version = policy_.update_settings(limit, staleness, actor_of(req));
    send_json(res, 200, json{{"version", version}});
  });

  s.Post("/v1/logs", [this](const httplib::Request& req, httplib::Response& res) {
    json body = json::parse(req.body, nullptr, false);
    if (body.is_object() && body.contains("records")) body = body["records"];
    if (body.is_discarded() || !body.is_array()) {
      send_error(res, 400, "expected a JSON array of records");
      return;
    }
    if (body.size() > kMaxIngestBatch) {
      send_error(res, 413, "batch exceeds 1000 records");
      return;
    }
    std::vector<observe::AccessLogRecord> batch;
    batch.reserve(body.size());
    for (std::size_t i = 0; i < body.size(); ++i) {
      try {
        batch.push_back(observe::parse_json_line(body[i].dump()));
      } catch (const std::exception& e) {
        send_error(res, 422, "record " + std::to_string(i) + ": " + e.what());
        return;
      }
    }
    send_json(res, 200, json{{"accepted", logs_.ingest(batch)}});
  });

  s.Get("/v1/logs", [this, authorized](const httplib::Request& req, httplib::Response& res) {
    if (!authorized(req, res)) return;
    LogQuery q;
    try {
      if (req.has_param("user")) q.user = req.get_param_value("user");
      if (req.has_param("fingerprint")) q.fingerprint = req.get_param_value("fingerprint");
      if (req.has_param("host")) q.host = req.get_param_value("host");
      if (req.has_param("outcome")) q.outcome = observe::parse_outcome(req.get_param_value("outcome"));
      if (req.has_param("since")) q.since = std::stoull(req.get_param_value("since"));
      if (req.has_param("limit")) q.limit = std::stoull(req.get_param_value("limit"));
    } catch (const std::exception& e) {
      send_error(res, 400, std::string("bad query: ") + e.what());
      return;
    }
    if (q.limit > kMaxQueryLimit) {
      send_error(res, 400, "limit must be <= 10000");
      return;
    }
    const auto cursor = logs_.cursor();
    json out = json::array();
    for (const auto& s : logs_.query(q)) out.push_back(stored_to_json(s));
    send_json(res, 200, json{{"records", out}, {"cursor", cursor}});
  });

  s.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string what = "internal error";
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      what = e.what();
    } catch (...) {
    }
    std::cerr << "control-plane: " << what << "\n";
    send_error(res, 500, what);
  });
}

void ControlPlaneServer::bind() {
  server_ = std::make_unique<httplib::Server>();
  install_routes();
  if (opts_.port == 0) {
    int p = server_->bind_to_any_port(opts_.host);
    if (p <= 0) throw net::NetError("control-plane: cannot bind " + opts_.host);
    port_ = static_cast<std::uint16_t>(p);
  } else {
    if (!server_->bind_to_port(opts_.host, opts_.port)) {
      throw net::NetError("control-plane: cannot bind " + opts_.host + ":" + std::to_string(opts_.port));
    }
    port_ = opts_.port;
  }
}

void ControlPlaneServer::start() {
  bind();
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
}

void ControlPlaneServer::run() {
  bind();
  server_->listen_after_bind();
}

void ControlPlaneServer::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace zta::cp
