#include "zta/policy.hpp"

#include <cmath>
#include <httplib.h>
#include <iostream>
#include <json.hpp>
#include <numbers>

#include "zta/http.hpp"

namespace zta::policy {

using nlohmann::json;

std::string_view to_string(RouteKind k) { return k == RouteKind::http ? "HTTP" : "TCP_TUNNEL"; }

std::string_view to_string(Outcome o) { return o == Outcome::allow ? "ALLOW" : "DENY"; }

std::string_view to_string(Reason r) {
  switch (r) {
    case Reason::ok: return "ok";
    case Reason::kill_switch: return "kill_switch";
    case Reason::revoked_cert: return "revoked_cert";
    case Reason::unknown_host: return "unknown_host";
    case Reason::group_denied: return "group_denied";
    case Reason::employment_denied: return "employment_denied";
    case Reason::session_too_old: return "session_too_old";
    case Reason::impossible_travel: return "impossible_travel";
    case Reason::no_session: return "no_session";
    case Reason::device_mismatch: return "device_mismatch";
    case Reason::stale_policy_fail_closed: return "stale_policy_fail_closed";
  }
  return "unknown";
}

std::string_view to_string(PollResult r) {
  switch (r) {
    case PollResult::installed: return "installed";
    case PollResult::unchanged: return "unchanged";
    case PollResult::unreachable: return "unreachable";
    case PollResult::rejected: return "rejected";
  }
  return "unknown";
}

namespace {

AccessDecision deny(Reason r, std::int64_t version) { return {Outcome::deny, r, version}; }

}  // namespace

AccessDecision evaluate_device(const PolicySnapshot& snapshot, const std::string& host,
                               const tls::TlsClientInfo& client) {
  if (snapshot.kill_switch) return deny(Reason::kill_switch, snapshot.version);
  if (snapshot.revoked_fingerprints.contains(client.fingerprint)) return deny(Reason::revoked_cert, snapshot.version);
  if (!snapshot.routes.contains(host)) return deny(Reason::unknown_host, snapshot.version);
  return {Outcome::allow, Reason::ok, snapshot.version};
}

AccessDecision evaluate(const PolicySnapshot& snapshot, const std::string& host, const authn::Session& session,
                        const tls::TlsClientInfo& client, TimePoint now) {
  if (auto d = evaluate_device(snapshot, host, client); !d.allowed()) return d;
  const RoutePolicy& route = snapshot.routes.at(host);
  if (!route.allowed_employment.contains(session.employment)) {
    return deny(Reason::employment_denied, snapshot.version);
  }
  if (!route.required_groups.empty()) {
    bool any = std::any_of(route.required_groups.begin(), route.required_groups.end(),
                           [&](const std::string& g) { return session.groups.contains(g); });
    if (!any) return deny(Reason::group_denied, snapshot.version);
  }
  if (now - session.created_at > std::chrono::seconds(route.session_max_age_s)) {
    return deny(Reason::session_too_old, snapshot.version);
  }
  if (!session.login_events.empty() && impossible_travel(session, snapshot.geo_velocity_limit_kmh)) {
    return deny(Reason::impossible_travel, snapshot.version);
  }
  return {Outcome::allow, Reason::ok, snapshot.version};
}

double haversine_km(authn::GeoPoint a, authn::GeoPoint b) {
  auto check = [](authn::GeoPoint p) {
    if (!(p.lat >= -90 && p.lat <= 90) || !(p.lon >= -180 && p.lon <= 180)) {
      throw ValidationError("haversine_km: coordinate out of range");
    }
  };
  check(a);
  check(b);
  constexpr double kEarthRadiusKm = 6371.0;
  constexpr double kRad = std::numbers::pi / 180.0;
  const double dlat = (b.lat - a.lat) * kRad;
  const double dlon = (b.lon - a.lon) * kRad;
  const double h = std::sin(dlat / 2) * std::sin(dlat / 2) +
                   std::cos(a.lat * kRad) * std::cos(b.lat * kRad) * std::sin(dlon / 2) * std::sin(dlon / 2);
  return 2.0 * kEarthRadiusKm * std::asin(std::min(1.0, std::sqrt(h)));
}

bool impossible_travel(const authn::Session& session, double limit_kmh) {
  constexpr double kMinHours = 1.0 / 3600.0;
  const authn::LoginEvent* prev = nullptr;
  for (const auto& e : session.login_events) {
    if (!e.geo) continue;
    if (prev) {
      const double hours = std::chrono::duration<double, std::ratio<3600>>(e.at - prev->at).count();
      const double speed = haversine_km(*prev->geo, *e.geo) / std::max(hours, kMinHours);
      if (speed > limit_kmh) return true;
    }
    prev = &e;
  }
  return false;
}

bool is_valid_dns_name(std::string_view host) {
  if (host.empty() || host.size() > 253) return false;
  std::size_t start = 0;
  while (start <= host.size()) {
    auto dot = host.find('.', start);
    auto label = host.substr(start, dot == std::string_view::npos ? std::string_view::npos : dot - start);
    if (label.empty() || label.size() > 63 || label.front() == '-' || label.back() == '-') return false;
    for (char c : label) {
      if (!((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '-')) return false;
    }
    if (dot == std::string_view::npos) break;
    start = dot + 1;
  }
  return true;
}

std::map<std::string, std::string> validate_route(const RoutePolicy& route) {
  std::map<std::string, std::string> errors;
  if (!is_valid_dns_name(route.host)) errors["host"] = "must be a lowercase DNS name";
  auto colon = route.upstream.rfind(':');
  bool upstream_ok = colon != std::string::npos && colon > 0 && colon + 1 < route.upstream.size();
  if (upstream_ok) {
    try {
      int port = std::stoi(route.upstream.substr(colon + 1));
      upstream_ok = port > 0 && port <= 65535 &&
                    route.upstream.find_first_not_of("0123456789", colon + 1) == std::string::npos;
    } catch (const std::exception&) {
      upstream_ok = false;
    }
  }
  if (!upstream_ok) errors["upstream"] = "must be host:port";
  if (route.allowed_employment.empty()) errors["allowed_employment"] = "must not be empty";
  if (route.session_max_age_s <= 0) errors["session_max_age_s"] = "must be positive";
  return errors;
}

namespace {

json route_to_json(const RoutePolicy& r) {
  json emp = json::array();
  for (auto e : r.allowed_employment) emp.push_back(to_string(e));
  return json{{"host", r.host},
              {"upstream", r.upstream},
              {"kind", to_string(r.kind)},
              {"required_groups", r.required_groups},
              {"allowed_employment", emp},
              {"session_max_age_s", r.session_max_age_s}};
}

RoutePolicy route_from_json(const json& j) {
  RoutePolicy r;
  r.host = j.at("host").get<std::string>();
  r.upstream = j.at("upstream").get<std::string>();
  auto kind = j.value("kind", std::string("HTTP"));
  if (kind == "HTTP") {
    r.kind = RouteKind::http;
  } else if (kind == "TCP_TUNNEL") {
    r.kind = RouteKind::tcp_tunnel;
  } else {
    throw ValidationError("kind must be HTTP or TCP_TUNNEL");
  }
  r.required_groups = j.value("required_groups", std::set<std::string>{});
  r.allowed_employment.clear();
  for (const auto& e : j.at("allowed_employment")) r.allowed_employment.insert(parse_employment(e.get<std::string>()));
  r.session_max_age_s = j.value("session_max_age_s", std::int64_t{8 * 3600});
  return r;
}

}  // namespace

std::string encode_route(const RoutePolicy& r) { return route_to_json(r).dump(); }

RoutePolicy decode_route(const std::string& text) { return route_from_json(json::parse(text)); }

std::string encode_snapshot(const PolicySnapshot& s) {
  json routes = json::object();
  for (const auto& [host, r] : s.routes) routes[host] = route_to_json(r);
  json j{{"version", s.version},
         {"generated_at", format_timestamp(s.generated_at)},
         {"kill_switch", s.kill_switch},
         {"revoked_fingerprints", s.revoked_fingerprints},
         {"routes", routes},
         {"geo_velocity_limit_kmh", s.geo_velocity_limit_kmh},
         {"max_staleness_s", s.max_staleness_s}};
  return j.dump();
}

PolicySnapshot decode_snapshot(const std::string& text) {
  json j = json::parse(text);
  PolicySnapshot s;
  s.version = j.at("version").get<std::int64_t>();
  s.generated_at = parse_timestamp(j.at("generated_at").get<std::string>());
  s.kill_switch = j.at("kill_switch").get<bool>();
  s.revoked_fingerprints = j.at("revoked_fingerprints").get<std::set<std::string>>();
  for (auto it = j.at("routes").begin(); it != j.at("routes").end(); ++it) {
    RoutePolicy r = route_from_json(it.value());
    if (r.host != it.key()) throw ValidationError("route key does not match host");
    s.routes.emplace(it.key(), std::move(r));
  }
  s.geo_velocity_limit_kmh = j.at("geo_velocity_limit_kmh").get<double>();
  s.max_staleness_s = j.at("max_staleness_s").get<std::int64_t>();
  return s;
}

std::shared_ptr<const PolicySnapshot> SnapshotHolder::current() const {
  std::lock_guard lk(mu_);
  return current_;
}

bool SnapshotHolder::install(std::shared_ptr<const PolicySnapshot> next) {
  std::lock_guard lk(mu_);
  if (current_ && next->version <= current_->version) return false;
  current_ = std::move(next);
  return true;
}

Freshness staleness_gate(const PolicySnapshot* snapshot, std::optional<SteadyTime> last_success, SteadyTime now) {
  if (!snapshot || !last_success) return Freshness::stale_fail_closed;
  return now - *last_success > std::chrono::seconds(snapshot->max_staleness_s) ? Freshness::stale_fail_closed
                                                                              : Freshness::fresh;
}

FetchResult HttpControlPlaneClient::fetch_policy(std::optional<std::int64_t> if_none_match) {
  FetchResult out;
  try {
    auto url = http::parse_url(base_url_);
    httplib::Client cli(url.scheme + "://" + url.host + ":" + std::to_string(url.port));
    cli.set_connection_timeout(2);
    cli.set_read_timeout(3);
    httplib::Headers headers;
    if (if_none_match) headers.emplace("If-None-Match", "\"" + std::to_string(*if_none_match) + "\"");
    auto res = cli.Get("/v1/policy", headers);
    if (!res) return out;
    if (res->status == 304) {
      out.status = FetchResult::Status::not_modified;
    } else if (res->status == 200) {
      out.snapshot = decode_snapshot(res->body);
      out.status = FetchResult::Status::ok;
    }
  } catch (const std::exception&) {
    out.status = FetchResult::Status::unreachable;
  }
  return out;
}

PollResult poll_policy(ControlPlaneClient& client, SnapshotHolder& holder) {
  auto current = holder.current();
  std::optional<std::int64_t> etag;
  if (current) etag = current->version;
  FetchResult r = client.fetch_policy(etag);
  switch (r.status) {
    case FetchResult::Status::unreachable:
      return PollResult::unreachable;
    case FetchResult::Status::not_modified:
      return PollResult::unchanged;
    case FetchResult::Status::ok:
      break;
  }
  if (current && r.snapshot->version == current->version) return PollResult::unchanged;
  if (!holder.install(std::make_shared<const PolicySnapshot>(std::move(*r.snapshot)))) return PollResult::rejected;
  return PollResult::installed;
}

PolicyPoller::PolicyPoller(std::shared_ptr<ControlPlaneClient> client, SnapshotHolder& holder,
                           std::chrono::milliseconds interval)
    : client_(std::move(client)), holder_(holder), interval_(interval) {}

PolicyPoller::~PolicyPoller() { stop(); }

PollResult PolicyPoller::poll_once() {
  PollResult r = poll_policy(*client_, holder_);
  if (r == PollResult::installed || r == PollResult::unchanged) {
    last_success_ns_.store(std::chrono::steady_clock::now().time_since_epoch().count());
  } else if (r == PollResult::rejected) {
    anomalies_++;
    std::cerr << "policy: control plane served a snapshot older than the installed one; ignored\n";
  }
  return r;
}

void PolicyPoller::start(std::function<void(PollResult)> on_tick) {
  {
    std::lock_guard lk(mu_);
    stopping_ = false;
  }
  thread_ = std::thread([this, on_tick = std::move(on_tick)] {
    std::unique_lock lk(mu_);
    while (!stopping_) {
      lk.unlock();
      PollResult r = poll_once();
      if (on_tick) on_tick(r);
      lk.lock();
      cv_.wait_for(lk, interval_, [this] { return stopping_; });
    }
  });
}

void PolicyPoller::stop() {
  {
    std::lock_guard lk(mu_);
    stopping_ = true;
  }
  cv_.notify_all();
  if (thread_.joinable()) thread_.join();
}

std::optional<SteadyTime> PolicyPoller::last_success() const {
  auto ns = last_success_ns_.load();
  if (ns < 0) return std::nullopt;
  return SteadyTime(SteadyTime::duration(ns));
}

Freshness PolicyPoller::freshness(SteadyTime now) const {
  auto snap = holder_.current();
  return staleness_gate(snap.get(), last_success(), now);
}

}  // namespace zta::policy
