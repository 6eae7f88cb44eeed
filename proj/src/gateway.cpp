#include "zta/gateway.hpp"

#include <poll.h>
#include <sys/socket.h>

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <json.hpp>
#include <stdexcept>

namespace zta::gateway {

using nlohmann::json;
using observe::LogOutcome;

namespace {

constexpr std::size_t kHardHeadCap = 64 * 1024;
constexpr auto kIdleTimeout = std::chrono::seconds(60);
constexpr auto kUpstreamIoTimeout = std::chrono::seconds(30);
constexpr int kTunnelTickMs = 100;

std::string resolve(const std::string& base, const std::string& p) {
  if (p.empty() || std::filesystem::path(p).is_absolute()) return p;
  return (std::filesystem::path(base) / p).string();
}

std::pair<std::string, std::uint16_t> split_host_port(const std::string& hp) {
  auto colon = hp.rfind(':');
  if (colon == std::string::npos || colon == 0) throw ValidationError("expected host:port: " + hp);
  int port = std::stoi(hp.substr(colon + 1));
  if (port <= 0 || port > 65535) throw ValidationError("port out of range: " + hp);
  return {hp.substr(0, colon), static_cast<std::uint16_t>(port)};
}

bool starts_with_ci(std::string_view s, std::string_view prefix) {
  return s.size() >= prefix.size() && iequals(s.substr(0, prefix.size()), prefix);
}

/// Token list of a comma-separated header (Connection), lowercased.
std::vector<std::string> header_tokens(const http::Headers& h, std::string_view name) {
  std::vector<std::string> out;
  for (const auto& v : h.get_all(name)) {
    std::size_t start = 0;
    while (start <= v.size()) {
      auto comma = v.find(',', start);
      auto tok = trim(std::string_view(v).substr(start, comma == std::string::npos ? std::string::npos : comma - start));
      if (!tok.empty()) out.push_back(to_lower(tok));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
  }
  return out;
}

bool wants_close(const http::RequestHead& head) {
  auto toks = header_tokens(head.headers, "Connection");
  if (std::find(toks.begin(), toks.end(), "close") != toks.end()) return true;
  if (head.version == "HTTP/1.0") return std::find(toks.begin(), toks.end(), "keep-alive") == toks.end();
  return false;
}

void strip_hop_by_hop(http::Headers& h) {
  for (const auto& tok : header_tokens(h, "Connection")) h.remove(tok);
  for (auto name : {"Connection", "Keep-Alive", "Proxy-Connection", "TE", "Trailer", "Upgrade", "Proxy-Authorization",
                    "Proxy-Authenticate"}) {
    h.remove(name);
  }
}

std::optional<std::string> zta_credential(const http::Headers& h, std::string_view name) {
  for (const auto& v : h.get_all(name)) {
    auto t = trim(v);
    if (starts_with_ci(t, kAuthScheme) && t.size() > kAuthScheme.size() && t[kAuthScheme.size()] == ' ') {
      return std::string(trim(t.substr(kAuthScheme.size() + 1)));
    }
  }
  return std::nullopt;
}

std::string deny_body(const std::string& reason, std::optional<std::int64_t> version, const std::string& hint = {}) {
  json j{{"error", "access denied"}, {"reason", reason}};
  if (version) j["policy_version"] = *version;
  if (!hint.empty()) j["hint"] = hint;
  return j.dump();
}

}  // namespace

// -- config -------------------------------------------------------------------

GatewayConfig GatewayConfig::from_json(const std::string& text, const std::string& base_dir) {
  json j = json::parse(text);
  GatewayConfig c;
  if (j.contains("listen")) {
    auto [h, p] = split_host_port(j["listen"].get<std::string>());
    c.listen_host = h;
    c.listen_port = p;
  }
  c.gateway_id = j.value("gateway_id", c.gateway_id);
  c.trust_root = resolve(base_dir, j.at("trust_root").get<std::string>());
  c.server_cert = resolve(base_dir, j.at("server_cert").get<std::string>());
  c.server_key = resolve(base_dir, j.at("server_key").get<std::string>());
  c.signing_key = resolve(base_dir, j.value("signing_key", std::string()));
  c.signing_key_id = j.value("signing_key_id", c.signing_key_id);
  c.control_plane_url = j.at("control_plane_url").get<std::string>();
  const auto& idp = j.at("idp");
  c.idp = {idp.at("authorize_url").get<std::string>(), idp.at("token_url").get<std::string>(),
           idp.at("client_id").get<std::string>(), idp.value("client_secret", std::string())};
  if (j.contains("geo_db") && !j["geo_db"].is_null()) c.geo_db = resolve(base_dir, j["geo_db"].get<std::string>());
  c.poll_interval_s = j.value("poll_interval_s", c.poll_interval_s);
  if (!(c.poll_interval_s > 0)) throw ValidationError("poll_interval_s must be positive");
  c.header_limit_bytes = j.value("header_limit_bytes", c.header_limit_bytes);
  c.log_path = resolve(base_dir, j.value("log_path", c.log_path));
  c.dead_letter_path = resolve(base_dir, j.value("dead_letter_path", c.dead_letter_path));
  if (j.contains("session_journal") && !j["session_journal"].is_null()) {
    c.session_journal = resolve(base_dir, j["session_journal"].get<std::string>());
  }
  c.upstream_connect_timeout = std::chrono::milliseconds(j.value("upstream_connect_timeout_ms", 5000));
  return c;
}

std::string GatewayConfig::to_json() const {
  json j{{"listen", listen_host + ":" + std::to_string(listen_port)},
         {"gateway_id", gateway_id},
         {"trust_root", trust_root},
         {"server_cert", server_cert},
         {"server_key", server_key},
         {"signing_key", signing_key},
         {"signing_key_id", signing_key_id},
         {"control_plane_url", control_plane_url},
         {"idp",
          {{"authorize_url", idp.authorize_url},
           {"token_url", idp.token_url},
           {"client_id", idp.client_id},
           {"client_secret", idp.client_secret}}},
         {"geo_db", geo_db ? json(*geo_db) : json(nullptr)},
         {"poll_interval_s", poll_interval_s},
         {"header_limit_bytes", header_limit_bytes},
         {"log_path", log_path},
         {"dead_letter_path", dead_letter_path},
         {"session_journal", session_journal ? json(*session_journal) : json(nullptr)},
         {"upstream_connect_timeout_ms", upstream_connect_timeout.count()}};
  return j.dump(2);
}

// -- header hygiene -----------------------------------------------------------

void sanitize_inbound(http::Headers& headers) {
  headers.remove_if([](const std::string& name, const std::string&) { return starts_with_ci(name, "X-ZTA-"); });
  headers.remove_if([](const std::string& name, const std::string& value) {
    return iequals(name, "Authorization") && starts_with_ci(trim(value), std::string(kAuthScheme) + " ");
  });

  // Rebuild Cookie headers without the session cookie.
  std::vector<std::string> rebuilt;
  bool touched = false;
  for (const auto& v : headers.get_all("Cookie")) {
    std::string kept;
    std::size_t start = 0;
    while (start <= v.size()) {
      auto semi = v.find(';', start);
      auto pair = trim(std::string_view(v).substr(start, semi == std::string::npos ? std::string::npos : semi - start));
      auto eq = pair.find('=');
      auto name = trim(pair.substr(0, eq));
      if (!pair.empty()) {
        if (name == authn::kSessionCookie) {
          touched = true;
        } else {
          if (!kept.empty()) kept += "; ";
          kept += pair;
        }
      }
      if (semi == std::string::npos) break;
      start = semi + 1;
    }
    if (!kept.empty()) rebuilt.push_back(std::move(kept));
  }
  if (touched) {
    headers.remove("Cookie");
    for (auto& c : rebuilt) headers.add("Cookie", std::move(c));
  }
}

std::string request_host(const http::RequestHead& head) {
  auto h = head.headers.get("Host");
  if (!h) return {};
  std::string host(trim(*h));
  auto colon = host.rfind(':');
  if (colon != std::string::npos && host.find(']') == std::string::npos) host = host.substr(0, colon);
  return to_lower(host);
}

// -- tunnels ------------------------------------------------------------------

std::shared_ptr<Tunnel> TunnelRegistry::add(std::shared_ptr<Tunnel> t) {
  std::lock_guard lk(mu_);
  t->id = next_id_++;
  tunnels_[t->id] = t;
  return t;
}

void TunnelRegistry::remove(std::uint64_t id) {
  std::lock_guard lk(mu_);
  tunnels_.erase(id);
}

std::size_t TunnelRegistry::size() const {
  std::lock_guard lk(mu_);
  return tunnels_.size();
}

void TunnelRegistry::terminate_locked(Tunnel& t) {
  t.terminate.store(true);
  if (t.client_fd >= 0) ::shutdown(t.client_fd, SHUT_RDWR);
  if (t.upstream_fd >= 0) ::shutdown(t.upstream_fd, SHUT_RDWR);
}

void TunnelRegistry::terminate_all() {
  std::lock_guard lk(mu_);
  for (auto& [id, t] : tunnels_) terminate_locked(*t);
}

// -- gateway ------------------------------------------------------------------

struct Gateway::Conn {
  std::unique_ptr<net::TlsStream> stream;
  http::Reader reader;
  tls::TlsClientInfo client;
  std::string sni;

  Conn(std::unique_ptr<net::TlsStream> s, tls::TlsClientInfo info)
      : stream(std::move(s)), reader(*stream), client(std::move(info)) {
    if (const char* name = SSL_get_servername(stream->ssl(), TLSEXT_NAMETYPE_host_name)) sni = to_lower(name);
  }
};

struct Gateway::Exchange {
  http::RequestHead head;
  http::Headers inbound;  // pre-sanitize copy, for session lookup
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  observe::AccessLogRecord rec;
  bool logged = false;
  bool has_body = false;
  bool body_consumed = false;
};

Gateway::Gateway(GatewayConfig cfg, GatewayDeps deps) : cfg_(std::move(cfg)), deps_(std::move(deps)) {
  if (!deps_.clock) deps_.clock = std::make_shared<SystemClock>();
  if (!deps_.idp) deps_.idp = std::make_shared<authn::HttpIdpClient>(cfg_.idp);
  if (!deps_.control_plane) deps_.control_plane = std::make_shared<policy::HttpControlPlaneClient>(cfg_.control_plane_url);
  if (!deps_.log_sink && !cfg_.control_plane_url.empty()) {
    deps_.log_sink = std::make_shared<observe::HttpLogSink>(cfg_.control_plane_url);
  }

  tls_ = std::make_unique<tls::TlsGate>(tls::TlsServerConfig{cfg_.server_cert, cfg_.server_key, cfg_.trust_root},
                                        deps_.clock);
  const TimePoint now = deps_.clock->now();
  keyring_ = std::make_unique<token::Keyring>(
      cfg_.signing_key.empty() ? token::SigningKeyPair::generate(cfg_.signing_key_id, now)
                               : token::SigningKeyPair::from_pem(cfg_.signing_key_id, read_file(cfg_.signing_key), now));
  sessions_ = std::make_unique<authn::SessionStore>(10000, cfg_.session_journal);
  if (cfg_.geo_db) geo_ = authn::GeoDb::from_json(read_file(*cfg_.geo_db));

  poller_ = std::make_unique<policy::PolicyPoller>(
      deps_.control_plane, snapshots_,
      std::chrono::milliseconds(static_cast<std::int64_t>(cfg_.poll_interval_s * 1000)));

  observe::PipelineOptions lo;
  lo.gateway_id = cfg_.gateway_id;
  lo.local_path = cfg_.log_path;
  lo.dead_letter_path = cfg_.dead_letter_path;
  logs_ = std::make_unique<observe::LogPipeline>(lo, deps_.log_sink, deps_.clock);
}

Gateway::~Gateway() { stop(); }

void Gateway::start() {
  listener_ = net::tcp_listen(cfg_.listen_host, cfg_.listen_port);
  port_ = net::local_port(listener_);
  stopping_ = false;
  logs_->start();
  poller_->poll_once();
  poller_->start([this](policy::PollResult) { sweep_tunnels(); });
  accept_thread_ = std::thread([this] { accept_loop(); });
}

void Gateway::stop() {
  if (stopping_.exchange(true)) return;
  if (accept_thread_.joinable()) accept_thread_.join();
  listener_.close();
  tunnels_.terminate_all();
  {
    std::lock_guard lk(conns_mu_);
    for (int fd : conn_fds_) ::shutdown(fd, SHUT_RDWR);
  }
  auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(15);
  while (active_conns_.load() > 0 && std::chrono::steady_clock::now() < deadline) {
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  poller_->stop();
  logs_->stop();
}

void Gateway::accept_loop() {
  while (!stopping_.load()) {
    pollfd p{listener_.fd(), POLLIN, 0};
    int r = ::poll(&p, 1, 200);
    if (r <= 0) continue;
    std::string peer;
    net::Socket s;
    try {
      s = net::tcp_accept(listener_, &peer);
    } catch (const net::NetError& e) {
      std::cerr << "gateway: accept: " << e.what() << "\n";
      continue;
    }
    active_conns_++;
    std::thread([this, s = std::move(s), peer]() mutable { serve_connection(std::move(s), std::move(peer)); }).detach();
  }
}

void Gateway::serve_connection(net::Socket sock, std::string peer_ip) {
  const int fd = sock.fd();
  {
    std::lock_guard lk(conns_mu_);
    conn_fds_.insert(fd);
  }
  auto untrack = [&] {
    std::lock_guard lk(conns_mu_);
    if (auto it = conn_fds_.find(fd); it != conn_fds_.end()) conn_fds_.erase(it);
  };

  auto result = tls_->accept_connection(std::move(sock), peer_ip);
  if (auto* refused = std::get_if<tls::TlsGate::Refused>(&result)) {
    untrack();
    log_refused_handshake(*refused, peer_ip);
    active_conns_--;
    return;
  }
  auto& acc = std::get<tls::TlsGate::Accepted>(result);
  {
    Conn c(std::move(acc.stream), std::move(acc.client));
    c.stream->socket().set_timeouts(kIdleTimeout, kUpstreamIoTimeout);
    try {
      while (!stopping_.load()) {
        std::optional<std::string> block;
        try {
          block = c.reader.read_head(kHardHeadCap);
        } catch (const http::HeadTooLarge&) {
          Exchange x;
          x.rec.timestamp = deps_.clock->now();
          x.rec.fingerprint = c.client.fingerprint;
          x.rec.source_ip = c.client.peer_ip;
          metrics_.requests++;
          metrics_.oversize_headers++;
          deny(c, x, "oversize_headers", 431, true);
          break;
        }
        if (!block) break;
        http::RequestHead head;
        try {
          head = http::parse_request_head(*block);
        } catch (const http::ParseError&) {
          Exchange x;
          x.rec.timestamp = deps_.clock->now();
          x.rec.fingerprint = c.client.fingerprint;
          x.rec.source_ip = c.client.peer_ip;
          metrics_.requests++;
          finish(x, LogOutcome::error, "bad_request", 400);
          respond(c, x, 400, json{{"error", "bad_request"}}.dump(), {}, true);
          break;
        }
        if (!handle_request(c, std::move(head))) break;
      }
    } catch (const std::exception&) {
      // peer went away or timed out; the request, if any, is already logged
    }
    untrack();
  }
  active_conns_--;
}

void Gateway::log_refused_handshake(const tls::TlsGate::Refused& r, const std::string& peer_ip) {
  observe::AccessLogRecord rec;
  rec.timestamp = deps_.clock->now();
  if (!r.fingerprint.empty()) rec.fingerprint = r.fingerprint;
  rec.source_ip = peer_ip;
  rec.outcome = LogOutcome::error;
  rec.reason = r.cert_error ? std::string(tls::to_string(*r.cert_error)) : std::string(tls::to_string(r.failure));
  metrics_.errors++;
  logs_->emit(std::move(rec));
}

void Gateway::note_peak(std::size_t n) {
  std::size_t prev = metrics_.peak_relay_buffer.load();
  while (n > prev && !metrics_.peak_relay_buffer.compare_exchange_weak(prev, n)) {
  }
}

void Gateway::finish(Exchange& x, LogOutcome outcome, std::string reason, int status) {
  if (x.logged) return;
  x.logged = true;
  x.rec.outcome = outcome;
  x.rec.reason = outcome == LogOutcome::allow ? "ok" : std::move(reason);
  x.rec.status = status;
  x.rec.latency_us =
      std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::steady_clock::now() - x.t0).count();
  switch (outcome) {
    case LogOutcome::allow: metrics_.allowed++; break;
    case LogOutcome::deny: metrics_.denied++; break;
    case LogOutcome::error: metrics_.errors++; break;
  }
  logs_->emit(x.rec);
}

bool Gateway::respond(Conn& c, Exchange& x, int status, const std::string& body, const http::Headers& extra,
                      bool close) {
  if (x.has_body && !x.body_consumed) close = true;
  http::ResponseHead r;
  r.status = status;
  for (const auto& [k, v] : extra.items()) r.headers.add(k, v);
  if (!body.empty()) r.headers.set("Content-Type", body.front() == '{' ? "application/json" : "text/plain");
  r.headers.set("Content-Length", std::to_string(body.size()));
  r.headers.set("Cache-Control", "no-store");
  if (close) r.headers.set("Connection", "close");
  c.stream->write_all(r.serialize() + body);
  return !close;
}

bool Gateway::deny(Conn& c, Exchange& x, std::string reason, int status, bool close) {
  const std::string body = deny_body(reason, x.rec.policy_version);
  finish(x, LogOutcome::deny, std::move(reason), status);
  return respond(c, x, status, body, {}, close);
}

bool Gateway::handle_request(Conn& c, http::RequestHead head) {
  // tls_gate guarantees this; a request without device identity must never exist.
  if (c.client.fingerprint.empty()) throw std::logic_error("request without TlsClientInfo");
  metrics_.requests++;

  Exchange x;
  x.rec.timestamp = deps_.clock->now();
  x.rec.fingerprint = c.client.fingerprint;
  x.rec.source_ip = c.client.peer_ip;
  const bool is_connect = head.method == "CONNECT";
  const bool client_close = wants_close(head);
  x.inbound = head.headers;
  x.head = std::move(head);

  if (is_connect) {
    x.rec.path = x.head.target;
    auto colon = x.head.target.rfind(':');
    x.rec.host = to_lower(x.head.target.substr(0, colon == std::string::npos ? 0 : colon));
  } else {
    x.rec.host = request_host(x.head);
    x.rec.path = x.head.path();
  }

  try {
    x.has_body = !is_connect && http::request_framing(x.head).kind != http::BodyFraming::none;
  } catch (const http::ParseError&) {
    finish(x, LogOutcome::error, "bad_request", 400);
    return respond(c, x, 400, json{{"error", "bad_request"}}.dump(), {}, true);
  }

  sanitize_inbound(x.head.headers);
  if (x.head.serialize().size() > cfg_.header_limit_bytes) {
    metrics_.oversize_headers++;
    return deny(c, x, "oversize_headers", 431, true);
  }

  if (is_connect) {
    auto colon = x.head.target.rfind(':');
    if (colon == std::string::npos || colon == 0 || colon + 1 == x.head.target.size() ||
        x.head.target.find_first_not_of("0123456789", colon + 1) != std::string::npos) {
      finish(x, LogOutcome::error, "bad_request", 400);
      return respond(c, x, 400, json{{"error", "malformed CONNECT target"}}.dump(), {}, true);
    }
  } else {
    if (x.rec.host.empty()) {
      finish(x, LogOutcome::error, "bad_request", 400);
      return respond(c, x, 400, json{{"error", "missing Host"}}.dump(), {}, true);
    }
    if (x.rec.path.rfind("/.zta/", 0) == 0) return handle_special(c, x) && !client_close;
    if (!c.sni.empty() && c.sni != x.rec.host) return deny(c, x, "misdirected_request", 421, client_close);
  }

  // One snapshot for the whole pipeline.
  auto snap = snapshots_.current();
  if (snap) x.rec.policy_version = snap->version;
  if (!snap || poller_->freshness() == policy::Freshness::stale_fail_closed) {
    return deny(c, x, "stale_policy_fail_closed", 403, client_close);
  }

  auto device = policy::evaluate_device(*snap, x.rec.host, c.client);
  if (!device.allowed()) return deny(c, x, std::string(policy::to_string(device.reason)), 403, client_close);
  const auto& route = snap->routes.at(x.rec.host);
  if ((route.kind == policy::RouteKind::tcp_tunnel) != is_connect) {
    return deny(c, x, std::string(policy::to_string(policy::Reason::unknown_host)), 403, client_close);
  }

  const TimePoint now = deps_.clock->now();
  authn::SessionLookup found;
  if (is_connect) {
    auto sid = zta_credential(x.inbound, "Proxy-Authorization");
    if (sid) found = authn::check_session_id(*sid, *sessions_, c.client, now);
  } else {
    found = authn::check_session(x.inbound, *sessions_, c.client, now);
  }

  if (!found.session) {
    const std::string reason(authn::to_string(found.status));
    if (is_connect) {
      const std::string body = deny_body(reason, x.rec.policy_version, "session missing or expired; run `zta login`");
      finish(x, LogOutcome::deny, reason, 403);
      return respond(c, x, 403, body, {}, true);
    }
    const std::string authority = *x.head.headers.get("Host");
    try {
      auto redirect = authn::initiate_sso("https://" + authority + x.head.target, c.client, cfg_.idp,
                                          "https://" + authority + std::string(authn::kCallbackPath), *sessions_, now);
      http::Headers h;
      h.add("Location", redirect.location);
      finish(x, LogOutcome::deny, reason, 302);
      return respond(c, x, 302, "", h, client_close);
    } catch (const authn::StoreFull&) {
      finish(x, LogOutcome::error, "store_full", 503);
      return respond(c, x, 503, json{{"error", "store_full"}}.dump(), {}, true);
    }
  }

  const authn::Session& session = *found.session;
  x.rec.user_id = session.user_id;
  auto decision = policy::evaluate(*snap, x.rec.host, session, c.client, now);
  if (!decision.allowed()) return deny(c, x, std::string(policy::to_string(decision.reason)), 403, client_close);

  if (is_connect) return tunnel_connect(c, x, route, session);
  return forward_http(c, x, route, session) && !client_close;
}

bool Gateway::handle_special(Conn& c, Exchange& x) {
  const std::string path = x.rec.path;
  if (path == token::kKeySetPath && x.head.method == "GET") {
    finish(x, LogOutcome::allow, "ok", 200);
    return respond(c, x, 200, keyring_->published());
  }
  if (path == authn::kCallbackPath && x.head.method == "GET") return handle_callback(c, x);
  if (path == kLoginPath && x.head.method == "POST") return handle_login(c, x);
  finish(x, LogOutcome::deny, "unknown_path", 404);
  return respond(c, x, 404, json{{"error", "unknown_path"}}.dump());
}

bool Gateway::handle_callback(Conn& c, Exchange& x) {
  auto q = http::parse_query(x.head.query());
  const std::string authority = *x.head.headers.get("Host");
  try {
    auto it_code = q.find("code");
    auto it_state = q.find("state");
    if (it_code == q.end() || it_state == q.end()) throw authn::CallbackFailed(authn::CallbackError::unknown_state);
    auto res = authn::handle_callback(it_code->second, it_state->second, c.client, *deps_.idp,
                                      "https://" + authority + std::string(authn::kCallbackPath), *sessions_, geo_,
                                      deps_.clock->now());
    x.rec.user_id = res.session.user_id;
    http::Headers h;
    h.add("Location", res.location);
    h.add("Set-Cookie", res.set_cookie);
    finish(x, LogOutcome::allow, "ok", 302);
    return respond(c, x, 302, "", h);
  } catch (const authn::CallbackFailed& e) {
    return deny(c, x, std::string(authn::to_string(e.code())), 403);
  }
}

bool Gateway::handle_login(Conn& c, Exchange& x) {
  std::string body;
  try {
    body = http::read_body(c.reader, http::request_framing(x.head), 64 * 1024);
    x.body_consumed = true;
  } catch (const std::exception&) {
    finish(x, LogOutcome::error, "bad_request", 400);
    return respond(c, x, 400, json{{"error", "bad_request"}}.dump(), {}, true);
  }
  json j = json::parse(body, nullptr, false);
  if (j.is_discarded() || !j.is_object() || !j.contains("user") || !j.contains("password") || !j["user"].is_string() ||
      !j["password"].is_string()) {
    finish(x, LogOutcome::error, "bad_request", 400);
    return respond(c, x, 400, json{{"error", "expected {user, password}"}}.dump());
  }
  try {
    auto who = deps_.idp->password_grant(j["user"].get<std::string>(), j["password"].get<std::string>());
    auto session = authn::create_session(who, c.client, *sessions_, geo_, deps_.clock->now());
    x.rec.user_id = session.user_id;
    finish(x, LogOutcome::allow, "ok", 200);
    return respond(c, x, 200,
                   json{{"session_id", session.session_id},
                        {"user", session.user_id},
                        {"device_fingerprint", session.device_fingerprint},
                        {"expires_at", format_timestamp(session.expires_at)}}
                       .dump());
  } catch (const authn::IdpRejected& e) {
    finish(x, LogOutcome::deny, "idp_rejected", 401);
    return respond(c, x, 401, json{{"error", "idp_rejected"}, {"detail", e.what()}}.dump());
  }
}

bool Gateway::forward_http(Conn& c, Exchange& x, const policy::RoutePolicy& route, const authn::Session& session) {
  const TimePoint now = deps_.clock->now();
  std::vector<std::string> groups(session.groups.begin(), session.groups.end());
  const std::string identity = keyring_->mint(token::make_claims(session.user_id, x.rec.host, now, groups,
                                                                 session.employment, c.client.fingerprint,
                                                                 session.session_id, *x.rec.policy_version));

  std::unique_ptr<net::PlainStream> up;
  try {
    auto [host, port] = split_host_port(route.upstream);
    up = std::make_unique<net::PlainStream>(net::tcp_connect(host, port, cfg_.upstream_connect_timeout));
    up->socket().set_timeouts(kUpstreamIoTimeout, kUpstreamIoTimeout);
  } catch (const std::exception&) {
    metrics_.upstream_failures++;
    finish(x, LogOutcome::error, "upstream_unreachable", 502);
    return respond(c, x, 502, json{{"error", "upstream_unreachable"}}.dump());
  }

  http::RequestHead fwd;
  fwd.method = x.head.method;
  fwd.target = x.head.target;
  fwd.headers = x.head.headers;
  strip_hop_by_hop(fwd.headers);
  // The identity token is the only header the gateway injects.
  fwd.headers.add(std::string(token::kHeaderName), identity);
  fwd.headers.set("Connection", "close");

  std::size_t peak = 0;
  http::ResponseHead resp;
  std::unique_ptr<http::Reader> ur;
  try {
    up->write_all(fwd.serialize());
    http::relay_body(c.reader, http::request_framing(x.head), *up, &peak);
    x.body_consumed = true;
    ur = std::make_unique<http::Reader>(*up);
    for (;;) {
      auto block = ur->read_head(kHardHeadCap);
      if (!block) throw http::ParseError("upstream closed before responding");
      resp = http::parse_response_head(*block);
      if (resp.status >= 200 || resp.status == 101) break;  // skip interim 1xx
    }
  } catch (const std::exception&) {
    metrics_.upstream_failures++;
    note_peak(peak);
    finish(x, LogOutcome::error, "upstream_unreachable", 502);
    return respond(c, x, 502, json{{"error", "upstream_unreachable"}}.dump(), {}, !x.body_consumed);
  }

  auto framing = http::response_framing(resp, x.head.method);
  strip_hop_by_hop(resp.headers);
  const bool close_after = framing.kind == http::BodyFraming::until_close;
  if (close_after) resp.headers.set("Connection", "close");

  finish(x, LogOutcome::allow, "ok", resp.status);
  c.stream->write_all(resp.serialize());
  http::relay_body(*ur, framing, *c.stream, &peak);
  note_peak(peak);
  return !close_after;
}

policy::AccessDecision Gateway::evaluate_tunnel(const Tunnel& t, const policy::PolicySnapshot* snap) {
  policy::AccessDecision stale{policy::Outcome::deny, policy::Reason::stale_policy_fail_closed, 0};
  if (!snap) return stale;
  const TimePoint now = deps_.clock->now();
  auto device = policy::evaluate_device(*snap, t.host, t.client);
  if (!device.allowed()) return device;
  if (snap->routes.at(t.host).kind != policy::RouteKind::tcp_tunnel) {
    return {policy::Outcome::deny, policy::Reason::unknown_host, snap->version};
  }
  auto found = authn::check_session_id(t.session.session_id, *sessions_, t.client, now);
  if (!found.session) return {policy::Outcome::deny, policy::Reason::no_session, snap->version};
  return policy::evaluate(*snap, t.host, *found.session, t.client, now);
}

std::size_t Gateway::sweep_tunnels() {
  auto snap = snapshots_.current();
  const bool stale = poller_->freshness() == policy::Freshness::stale_fail_closed;
  std::size_t n = tunnels_.sweep([&](const Tunnel& t) { return !evaluate_tunnel(t, stale ? nullptr : snap.get()).allowed(); });
  metrics_.tunnels_terminated += n;
  return n;
}

bool Gateway::tunnel_connect(Conn& c, Exchange& x, const policy::RoutePolicy& route, const authn::Session& session) {
  std::unique_ptr<net::PlainStream> up;
  try {
    auto [host, port] = split_host_port(route.upstream);
    up = std::make_unique<net::PlainStream>(net::tcp_connect(host, port, cfg_.upstream_connect_timeout));
  } catch (const std::exception&) {
    metrics_.upstream_failures++;
    finish(x, LogOutcome::error, "upstream_unreachable", 502);
    return respond(c, x, 502, json{{"error", "upstream_unreachable"}}.dump(), {}, true);
  }

  auto t = std::make_shared<Tunnel>();
  t->host = x.rec.host;
  t->session = session;
  t->client = c.client;
  t->client_fd = c.stream->fd();
  t->upstream_fd = up->fd();
  tunnels_.add(t);
  metrics_.tunnels_opened++;
  struct Unregister {
    TunnelRegistry& r;
    std::uint64_t id;
    ~Unregister() { r.remove(id); }
  } unregister{tunnels_, t->id};

  finish(x, LogOutcome::allow, "ok", 200);
  c.stream->write_all("HTTP/1.1 200 Connection Established\r\n\r\n");

  // A snapshot may have landed between evaluate() and registration.
  auto snap = snapshots_.current();
  const bool stale = poller_->freshness() == policy::Freshness::stale_fail_closed;
  if (!evaluate_tunnel(*t, stale ? nullptr : snap.get()).allowed()) return false;

  std::vector<char> buf(16384);
  try {
    while (c.reader.has_buffered()) {
      std::size_t n = c.reader.read_some(buf.data(), buf.size());
      if (n == 0) break;
      up->write_all(std::string_view(buf.data(), n));
    }
    while (!t->terminate.load()) {
      if (c.stream->has_pending()) {
        std::size_t n = c.stream->read(buf.data(), buf.size());
        if (n == 0) break;
        up->write_all(std::string_view(buf.data(), n));
        continue;
      }
      pollfd fds[2] = {{c.stream->fd(), POLLIN, 0}, {up->fd(), POLLIN, 0}};
      int r = ::poll(fds, 2, kTunnelTickMs);
      if (r < 0) break;
      if (r == 0) continue;
      if (fds[0].revents & (POLLIN | POLLHUP | POLLERR)) {
        std::size_t n = c.stream->read(buf.data(), buf.size());
        if (n == 0) break;
        up->write_all(std::string_view(buf.data(), n));
      }
      if (fds[1].revents & (POLLIN | POLLHUP | POLLERR)) {
        std::size_t n = up->read(buf.data(), buf.size());
        if (n == 0) break;
        c.stream->write_all(std::string_view(buf.data(), n));
      }
    }
  } catch (const std::exception&) {
    // either side reset, or the sweep shut the sockets down
  }
  return false;
}

}  // namespace zta::gateway
