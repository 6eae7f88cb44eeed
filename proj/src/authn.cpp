#include "zta/authn.hpp"

#include <arpa/inet.h>

#include <algorithm>
#include <fstream>
#include <httplib.h>
#include <json.hpp>
#include <mutex>

namespace zta::authn {

using nlohmann::json;

std::string_view to_string(SessionStatus s) {
  switch (s) {
    case SessionStatus::ok: return "ok";
    case SessionStatus::no_session: return "no_session";
    case SessionStatus::device_mismatch: return "device_mismatch";
    case SessionStatus::expired: return "no_session";
  }
  return "no_session";
}

std::string_view to_string(CallbackError e) {
  switch (e) {
    case CallbackError::unknown_state: return "unknown_state";
    case CallbackError::state_expired: return "state_expired";
    case CallbackError::device_mismatch: return "device_mismatch";
    case CallbackError::idp_rejected_code: return "idp_rejected_code";
  }
  return "unknown";
}

namespace {

std::optional<std::uint32_t> parse_ipv4(const std::string& ip) {
  in_addr a{};
  if (inet_pton(AF_INET, ip.c_str(), &a) != 1) return std::nullopt;
  return ntohl(a.s_addr);
}

std::uint32_t prefix_mask(int prefix) { return prefix == 0 ? 0u : ~0u << (32 - prefix); }

json event_to_json(const LoginEvent& e) {
  json j{{"at", epoch_micros(e.at)}, {"ip", e.source_ip}};
  if (e.geo) j["geo"] = {e.geo->lat, e.geo->lon};
  return j;
}

LoginEvent event_from_json(const json& j) {
  LoginEvent e;
  e.at = from_epoch_micros(j.at("at").get<std::int64_t>());
  e.source_ip = j.at("ip").get<std::string>();
  if (j.contains("geo")) e.geo = GeoPoint{j["geo"][0].get<double>(), j["geo"][1].get<double>()};
  return e;
}

json session_to_json(const Session& s) {
  json events = json::array();
  for (const auto& e : s.login_events) events.push_back(event_to_json(e));
  return json{{"id", s.session_id},
              {"user", s.user_id},
              {"groups", s.groups},
              {"emp", to_string(s.employment)},
              {"dfp", s.device_fingerprint},
              {"created", epoch_micros(s.created_at)},
              {"expires", epoch_micros(s.expires_at)},
              {"events", events}};
}

Session session_from_json(const json& j) {
  Session s;
  s.session_id = j.at("id").get<std::string>();
  s.user_id = j.at("user").get<std::string>();
  s.groups = j.at("groups").get<std::set<std::string>>();
  s.employment = parse_employment(j.at("emp").get<std::string>());
  s.device_fingerprint = j.at("dfp").get<std::string>();
  s.created_at = from_epoch_micros(j.at("created").get<std::int64_t>());
  s.expires_at = from_epoch_micros(j.at("expires").get<std::int64_t>());
  for (const auto& e : j.at("events")) s.login_events.push_back(event_from_json(e));
  return s;
}

}  // namespace

GeoDb GeoDb::from_json(const std::string& text) {
  GeoDb db;
  for (const auto& row : json::parse(text)) {
    db.add(row.at("cidr").get<std::string>(), GeoPoint{row.at("lat").get<double>(), row.at("lon").get<double>()});
  }
  return db;
}

void GeoDb::add(const std::string& cidr, GeoPoint p) {
  auto slash = cidr.find('/');
  auto net = parse_ipv4(cidr.substr(0, slash));
  int prefix = slash == std::string::npos ? 32 : std::stoi(cidr.substr(slash + 1));
  if (!net || prefix < 0 || prefix > 32) throw ValidationError("bad CIDR: " + cidr);
  entries_.push_back({*net & prefix_mask(prefix), prefix, p});
}

std::optional<GeoPoint> GeoDb::lookup(const std::string& ip) const {
  auto addr = parse_ipv4(ip);
  if (!addr) return std::nullopt;
  const Entry* best = nullptr;
  for (const auto& e : entries_) {
    if ((*addr & prefix_mask(e.prefix)) == e.network && (!best || e.prefix > best->prefix)) best = &e;
  }
  if (!best) return std::nullopt;
  return best->point;
}

IdpAssertion HttpIdpClient::post_token(const std::vector<std::pair<std::string, std::string>>& form) {
  auto url = http::parse_url(cfg_.token_url);
  httplib::Client cli(url.scheme + "://" + url.host + ":" + std::to_string(url.port));
  cli.set_connection_timeout(5);
  cli.set_read_timeout(5);
  auto res = cli.Post(url.target, http::build_query(form), "application/x-www-form-urlencoded");
  if (!res) throw IdpRejected("idp unreachable");
  if (res->status != 200) throw IdpRejected("idp rejected: " + std::to_string(res->status) + " " + res->body);
  try {
    json j = json::parse(res->body);
    IdpAssertion a;
    a.sub = j.at("sub").get<std::string>();
    a.groups = j.at("groups").get<std::set<std::string>>();
    a.employment = parse_employment(j.at("employment_type").get<std::string>());
    a.auth_time = j.at("auth_time").get<std::int64_t>();
    return a;
  } catch (const std::exception& e) {
    throw IdpRejected(std::string("malformed assertion: ") + e.what());
  }
}

IdpAssertion HttpIdpClient::exchange_code(const std::string& code, const std::string& redirect_uri) {
  return post_token({{"grant_type", "authorization_code"},
                     {"code", code},
                     {"redirect_uri", redirect_uri},
                     {"client_id", cfg_.client_id},
                     {"client_secret", cfg_.client_secret}});
}

IdpAssertion HttpIdpClient::password_grant(const std::string& user, const std::string& password) {
  return post_token({{"grant_type", "password"},
                     {"username", user},
                     {"password", password},
                     {"client_id", cfg_.client_id},
                     {"client_secret", cfg_.client_secret}});
}

SessionStore::SessionStore(std::size_t max_flows, std::optional<std::string> journal_path)
    : max_flows_(max_flows), journal_path_(std::move(journal_path)) {
  if (journal_path_) replay_journal();
}

void SessionStore::replay_journal() {
  std::ifstream in(*journal_path_);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      Session s = session_from_json(json::parse(line));
      if (!s.login_events.empty()) last_login_[s.user_id] = s.login_events.back();
      sessions_[s.session_id] = std::move(s);
    } catch (const std::exception&) {
      // torn final line after a crash
    }
  }
}

void SessionStore::journal(const Session& s) {
  if (!journal_path_) return;
  std::ofstream out(*journal_path_, std::ios::app);
  out << session_to_json(s).dump() << '\n';
}

void SessionStore::put_session(const Session& s) {
  std::unique_lock lk(mu_);
  sessions_[s.session_id] = s;
  journal(s);
}

std::optional<Session> SessionStore::find_session(const std::string& id) const {
  std::shared_lock lk(mu_);
  auto it = sessions_.find(id);
  if (it == sessions_.end()) return std::nullopt;
  return it->second;
}

std::size_t SessionStore::session_count() const {
  std::shared_lock lk(mu_);
  return sessions_.size();
}

void SessionStore::put_flow(const AuthFlowState& f) {
  std::unique_lock lk(mu_);
  if (flows_.size() >= max_flows_) {
    // Expired flows are dead weight; reclaim them before refusing.
    std::erase_if(flows_, [&](const auto& kv) { return f.created_at - kv.second.created_at > kFlowTtl; });
    if (flows_.size() >= max_flows_) throw StoreFull();
  }
  flows_[f.state_nonce] = f;
}

std::optional<AuthFlowState> SessionStore::take_flow(const std::string& nonce) {
  std::unique_lock lk(mu_);
  auto it = flows_.find(nonce);
  if (it == flows_.end()) return std::nullopt;
  AuthFlowState f = std::move(it->second);
  flows_.erase(it);
  return f;
}

std::size_t SessionStore::flow_count() const {
  std::shared_lock lk(mu_);
  return flows_.size();
}

std::optional<LoginEvent> SessionStore::last_login(const std::string& user_id) const {
  std::shared_lock lk(mu_);
  auto it = last_login_.find(user_id);
  if (it == last_login_.end()) return std::nullopt;
  return it->second;
}

void SessionStore::note_login(const std::string& user_id, const LoginEvent& e) {
  std::unique_lock lk(mu_);
  auto it = last_login_.find(user_id);
  if (it == last_login_.end() || it->second.at <= e.at) last_login_[user_id] = e;
}

SessionLookup check_session_id(const std::string& session_id, const SessionStore& store,
                               const tls::TlsClientInfo& client, TimePoint now) {
  auto s = store.find_session(session_id);
  if (!s) return {std::nullopt, SessionStatus::no_session};
  if (s->device_fingerprint != client.fingerprint) return {std::nullopt, SessionStatus::device_mismatch};
  if (now >= s->expires_at) return {std::nullopt, SessionStatus::expired};
  return {std::move(s), SessionStatus::ok};
}

SessionLookup check_session(const http::Headers& headers, const SessionStore& store,
                            const tls::TlsClientInfo& client, TimePoint now) {
  SessionLookup best{std::nullopt, SessionStatus::no_session};
  for (const auto& [name, value] : http::parse_cookies(headers)) {
    if (name != kSessionCookie) continue;
    auto r = check_session_id(value, store, client, now);
    if (r.session) return r;
    // Keep the most informative failure for logging.
    if (best.status == SessionStatus::no_session) best.status = r.status;
  }
  return best;
}

std::string new_opaque_id() { return base64url_encode(random_bytes(16)); }

SsoRedirect initiate_sso(const std::string& request_url, const tls::TlsClientInfo& client, const IdpConfig& idp,
                         const std::string& redirect_uri, SessionStore& store, TimePoint now) {
  AuthFlowState flow{new_opaque_id(), request_url, now, client.fingerprint};
  store.put_flow(flow);
  std::string sep = idp.authorize_url.find('?') == std::string::npos ? "?" : "&";
  std::string location = idp.authorize_url + sep +
                         http::build_query({{"client_id", idp.client_id},
                                            {"redirect_uri", redirect_uri},
                                            {"state", flow.state_nonce},
                                            {"response_type", "code"}});
  return {std::move(location), flow.state_nonce};
}

Session record_login_geo(Session session, const std::string& ip, const GeoDb& geo, TimePoint now) {
  LoginEvent e{now, ip, geo.lookup(ip)};
  auto pos = std::upper_bound(session.login_events.begin(), session.login_events.end(), now,
                              [](TimePoint t, const LoginEvent& ev) { return t < ev.at; });
  session.login_events.insert(pos, std::move(e));
  return session;
}

Session create_session(const IdpAssertion& who, const tls::TlsClientInfo& client, SessionStore& store,
                       const GeoDb& geo, TimePoint now, const SessionOptions& opts) {
  Session s;
  s.session_id = new_opaque_id();
  s.user_id = who.sub;
  s.groups = who.groups;
  s.employment = who.employment;
  s.device_fingerprint = client.fingerprint;
  s.created_at = now;
  s.expires_at = now + opts.lifetime;
  if (auto prev = store.last_login(who.sub); prev && prev->at <= now) s.login_events.push_back(*prev);
  s = record_login_geo(std::move(s), client.peer_ip, geo, now);
  store.put_session(s);
  store.note_login(s.user_id, s.login_events.back());
  return s;
}

CallbackResult handle_callback(const std::string& code, const std::string& state, const tls::TlsClientInfo& client,
                               IdpClient& idp, const std::string& redirect_uri, SessionStore& store,
                               const GeoDb& geo, TimePoint now, const SessionOptions& opts) {
  auto flow = store.take_flow(state);
  if (!flow) throw CallbackFailed(CallbackError::unknown_state);
  if (now - flow->created_at > kFlowTtl) throw CallbackFailed(CallbackError::state_expired);
  if (flow->device_fingerprint != client.fingerprint) throw CallbackFailed(CallbackError::device_mismatch);
  IdpAssertion who;
  try {
    who = idp.exchange_code(code, redirect_uri);
  } catch (const IdpRejected&) {
    throw CallbackFailed(CallbackError::idp_rejected_code);
  }
  CallbackResult r;
  r.session = create_session(who, client, store, geo, now, opts);
  r.set_cookie = session_cookie(r.session);
  r.location = flow->original_url;
  return r;
}

std::string session_cookie(const Session& s) {
  return std::string(kSessionCookie) + "=" + s.session_id + "; HttpOnly; Secure; SameSite=Lax; Path=/";
}

}  // namespace zta::authn
