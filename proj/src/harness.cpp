#include "zta/harness.hpp"

#include <poll.h>
#include <sys/socket.h>

#include <httplib.h>
#include <iostream>
#include <json.hpp>

namespace zta::harness {

using nlohmann::json;

// -- directory -------------------------------------------------------------------

void UserDirectory::add(const std::string& user_id, const std::string& password, std::set<std::string> groups,
                        Employment emp, bool active) {
  if (user_id.empty()) throw ValidationError("user id must not be empty");
  DirectoryEntry e;
  e.salt = to_hex(random_bytes(8));
  e.password_hash = sha256_hex(e.salt + password);
  e.groups = std::move(groups);
  e.employment = emp;
  e.active = active;
  if (!entries_.emplace(user_id, std::move(e)).second) throw ValidationError("duplicate user id: " + user_id);
}

const DirectoryEntry* UserDirectory::find(const std::string& user_id) const {
  auto it = entries_.find(user_id);
  return it == entries_.end() ? nullptr : &it->second;
}

bool UserDirectory::check_password(const std::string& user_id, const std::string& password) const {
  const auto* e = find(user_id);
  return e && sha256_hex(e->salt + password) == e->password_hash;
}

std::vector<std::string> UserDirectory::users() const {
  std::vector<std::string> out;
  for (const auto& [id, e] : entries_) out.push_back(id);
  return out;
}

UserDirectory UserDirectory::default_fixture() {
  UserDirectory d;
  d.add("alice", "alice-pw", {"eng"}, Employment::fte);
  d.add("bob", "bob-pw", {"eng"}, Employment::contractor);
  d.add("carol", "carol-pw", {"sre"}, Employment::fte);
  d.add("dave", "dave-pw", {"eng"}, Employment::fte, false);
  return d;
}

// -- mock IdP ------------------------------------------------------------------------

namespace {

std::string html_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string login_form(const httplib::Params& p, const std::string& error) {
  auto field = [&](const char* k) {
    auto it = p.find(k);
    return html_escape(it == p.end() ? "" : it->second);
  };
  std::string html = "<!doctype html><title>Sign in</title><form method=\"post\" action=\"/login\">";
  if (!error.empty()) html += "<p class=\"error\">" + html_escape(error) + "</p>";
  html += "<input type=\"hidden\" name=\"client_id\" value=\"" + field("client_id") + "\">";
  html += "<input type=\"hidden\" name=\"redirect_uri\" value=\"" + field("redirect_uri") + "\">";
  html += "<input type=\"hidden\" name=\"state\" value=\"" + field("state") + "\">";
  html += "<input name=\"username\"><input name=\"password\" type=\"password\"><button>Sign in</button></form>";
  return html;
}

std::string param(const httplib::Request& req, const char* key) {
  return req.has_param(key) ? req.get_param_value(key) : std::string();
}

json assertion(const std::string& user, const DirectoryEntry& e, std::int64_t auth_time) {
  return json{{"sub", user}, {"groups", e.groups}, {"employment_type", to_string(e.employment)}, {"auth_time", auth_time}};
}

}  // namespace

MockIdp::MockIdp(IdpOptions opts, UserDirectory dir, std::shared_ptr<const Clock> clock)
    : opts_(std::move(opts)), dir_(std::move(dir)), clock_(std::move(clock)) {}

MockIdp::~MockIdp() { stop(); }

std::string MockIdp::base_url() const { return "http://" + opts_.host + ":" + std::to_string(port_); }

authn::IdpConfig MockIdp::client_config() const {
  return {base_url() + "/authorize", base_url() + "/token", opts_.client_id, opts_.client_secret};
}

std::size_t MockIdp::live_codes() const {
  std::lock_guard lk(mu_);
  return codes_.size();
}

void MockIdp::install_routes() {
  auto& s = *server_;

  s.Get("/authorize", [this](const httplib::Request& req, httplib::Response& res) {
    if (param(req, "client_id") != opts_.client_id || param(req, "response_type") != "code" ||
        param(req, "redirect_uri").empty()) {
      res.status = 400;
      res.set_content("unknown client or malformed request", "text/plain");
      return;
    }
    std::vector<std::pair<std::string, std::string>> q;
    for (const auto& [k, v] : req.params) q.emplace_back(k, v);
    res.status = 302;
    res.set_header("Location", "/login?" + http::build_query(q));
  });

  s.Get("/login", [](const httplib::Request& req, httplib::Response& res) {
    res.set_content(login_form(req.params, ""), "text/html");
  });

  s.Post("/login", [this](const httplib::Request& req, httplib::Response& res) {
    if (param(req, "client_id") != opts_.client_id) {
      res.status = 400;
      res.set_content("unknown client", "text/plain");
      return;
    }
    const std::string user = param(req, "username");
    if (!dir_.check_password(user, param(req, "password"))) {
      res.status = 200;
      res.set_content(login_form(req.params, "invalid username or password"), "text/html");
      return;
    }
    if (!dir_.find(user)->active) {
      res.status = 403;
      res.set_content("account disabled", "text/plain");
      return;
    }
    const std::string code = authn::new_opaque_id();
    const std::string redirect_uri = param(req, "redirect_uri");
    {
      std::lock_guard lk(mu_);
      const TimePoint now = clock_->now();
      std::erase_if(codes_, [&](const auto& kv) { return now - kv.second.issued >= opts_.code_ttl; });
      codes_[code] = Code{user, redirect_uri, now};
    }
    const char sep = redirect_uri.find('?') == std::string::npos ? '?' : '&';
    res.status = 302;
    res.set_header("Location", redirect_uri + sep + http::build_query({{"code", code}, {"state", param(req, "state")}}));
  });

  s.Post("/token", [this](const httplib::Request& req, httplib::Response& res) {
    auto fail = [&](int status, const char* error) {
      res.status = status;
      res.set_content(json{{"error", error}}.dump(), "application/json");
    };
    if (param(req, "client_id") != opts_.client_id || param(req, "client_secret") != opts_.client_secret) {
      return fail(401, "invalid_client");
    }
    const std::string grant = param(req, "grant_type");
    if (grant == "authorization_code") {
      Code c;
      {
        std::lock_guard lk(mu_);
        auto it = codes_.find(param(req, "code"));
        if (it == codes_.end()) return fail(400, "invalid_grant");
        c = it->second;
        codes_.erase(it);  // single use, consumed even when the exchange fails below
      }
      if (clock_->now() - c.issued >= opts_.code_ttl) return fail(400, "invalid_grant");
      if (c.redirect_uri != param(req, "redirect_uri")) return fail(400, "invalid_grant");
      const auto* e = dir_.find(c.user);
      if (!e || !e->active) return fail(400, "invalid_grant");
      res.set_content(assertion(c.user, *e, epoch_seconds(c.issued)).dump(), "application/json");
      return;
    }
    if (grant == "password") {
      const std::string user = param(req, "username");
      if (!dir_.check_password(user, param(req, "password")) || !dir_.find(user)->active) {
        return fail(400, "invalid_grant");
      }
      res.set_content(assertion(user, *dir_.find(user), epoch_seconds(clock_->now())).dump(), "application/json");
      return;
    }
    fail(400, "unsupported_grant_type");
  });
}

void MockIdp::bind() {
  server_ = std::make_unique<httplib::Server>();
  install_routes();
  if (opts_.port == 0) {
    int p = server_->bind_to_any_port(opts_.host);
    if (p <= 0) throw net::NetError("idp: cannot bind");
    port_ = static_cast<std::uint16_t>(p);
  } else {
    if (!server_->bind_to_port(opts_.host, opts_.port)) throw net::NetError("idp: cannot bind");
    port_ = opts_.port;
  }
}

void MockIdp::start() {
  bind();
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
}

void MockIdp::run() {
  bind();
  server_->listen_after_bind();
}

void MockIdp::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

// -- echo upstream ---------------------------------------------------------------------

namespace {

bool pseudo_header(const std::string& name) {
  return name == "REMOTE_ADDR" || name == "REMOTE_PORT" || name == "LOCAL_ADDR" || name == "LOCAL_PORT";
}

void echo(const httplib::Request& req, httplib::Response& res) {
  json headers = json::array();
  std::size_t header_bytes = req.method.size() + 1 + req.target.size() + 1 + req.version.size() + 2 + 2;
  for (const auto& [k, v] : req.headers) {
    if (pseudo_header(k)) continue;
    headers.push_back({k, v});
    header_bytes += k.size() + 2 + v.size() + 2;
  }
  json j{{"method", req.method},   {"path", req.path},           {"target", req.target},
         {"headers", headers},     {"header_bytes", header_bytes}, {"body_bytes", req.body.size()}};
  res.set_content(j.dump(), "application/json");
}

}  // namespace

EchoUpstream::EchoUpstream(std::string host, std::uint16_t port) : host_(std::move(host)), req_port_(port) {}

EchoUpstream::~EchoUpstream() { stop(); }

void EchoUpstream::bind() {
  server_ = std::make_unique<httplib::Server>();
  auto& s = *server_;
  s.Get(R"(/bytes/(\d+))", [](const httplib::Request& req, httplib::Response& res) {
    const std::size_t n = std::stoull(req.matches[1]);
    res.set_content_provider(n, "application/octet-stream",
                             [](std::size_t offset, std::size_t length, httplib::DataSink& sink) {
                               std::string chunk(std::min<std::size_t>(length, 16384), '\0');
                               for (std::size_t i = 0; i < chunk.size(); ++i) {
                                 chunk[i] = static_cast<char>('a' + (offset + i) % 26);
                               }
                               return sink.write(chunk.data(), chunk.size());
                             });
  });
  s.Get(R"(/status/(\d+))", [](const httplib::Request& req, httplib::Response& res) {
    res.status = std::stoi(req.matches[1]);
    res.set_content(json{{"status", res.status}}.dump(), "application/json");
  });
  s.Get(".*", echo);
  s.Post(".*", echo);
  s.Put(".*", echo);
  s.Delete(".*", echo);
  s.Patch(".*", echo);
  if (req_port_ == 0) {
    int p = s.bind_to_any_port(host_);
    if (p <= 0) throw net::NetError("echo: cannot bind");
    port_ = static_cast<std::uint16_t>(p);
  } else {
    if (!s.bind_to_port(host_, req_port_)) throw net::NetError("echo: cannot bind");
    port_ = req_port_;
  }
}

void EchoUpstream::start() {
  bind();
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
}

void EchoUpstream::run() {
  bind();
  server_->listen_after_bind();
}

void EchoUpstream::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

// -- TCP echo -------------------------------------------------------------------------

TcpEcho::TcpEcho(std::string host, std::uint16_t port) : host_(std::move(host)), port_(port) {}

TcpEcho::~TcpEcho() { stop(); }

void TcpEcho::start() {
  listener_ = net::tcp_listen(host_, port_);
  port_ = net::local_port(listener_);
  thread_ = std::thread([this] { loop(); });
}

void TcpEcho::stop() {
  stopping_ = true;
  if (thread_.joinable()) thread_.join();
  while (active_.load() > 0) std::this_thread::sleep_for(std::chrono::milliseconds(10));
}

void TcpEcho::loop() {
  while (!stopping_) {
    pollfd p{listener_.fd(), POLLIN, 0};
    if (::poll(&p, 1, 100) <= 0) continue;
    net::Socket s;
    try {
      s = net::tcp_accept(listener_);
    } catch (const net::NetError&) {
      continue;
    }
    active_++;
    std::thread([this, s = std::move(s)]() mutable {
      net::PlainStream stream(std::move(s));
      char buf[16384];
      try {
        while (!stopping_) {
          pollfd p{stream.fd(), POLLIN, 0};
          int r = ::poll(&p, 1, 100);
          if (r < 0) break;
          if (r == 0) continue;
          std::size_t n = stream.read(buf, sizeof buf);
          if (n == 0) break;
          stream.write_all(std::string_view(buf, n));
        }
      } catch (const std::exception&) {
      }
      active_--;
    }).detach();
  }
}

// -- client ------------------------------------------------------------------------------

std::string Response::reason() const {
  json j = json::parse(body, nullptr, false);
  if (j.is_object() && j.contains("reason") && j["reason"].is_string()) return j["reason"].get<std::string>();
  return {};
}

Response read_response(http::Reader& reader, const std::string& method) {
  std::optional<std::string> block;
  try {
    block = reader.read_head(1 << 20);
  } catch (const net::TlsAlert& e) {
    throw HandshakeRefused(e.what());
  } catch (const net::NetError& e) {
    throw NoResponse(e.what());
  }
  if (!block) throw NoResponse("connection closed before a response");
  Response r;
  r.head_bytes = block->size();
  auto head = http::parse_response_head(*block);
  r.status = head.status;
  r.headers = head.headers;
  auto framing = (method == "CONNECT" && head.status / 100 == 2) ? http::Framing{} : http::response_framing(head, method);
  r.body = http::read_body(reader, framing, 64u << 20);
  return r;
}

TestClient::TestClient(ClientOptions opts) : opts_(std::move(opts)) {
  ctx_ = net::make_client_context({opts_.ca_path, opts_.cert_path, opts_.key_path});
}

std::unique_ptr<net::TlsStream> TestClient::open(const std::string& sni) {
  auto sock = net::tcp_connect(opts_.gateway_host, opts_.gateway_port, std::chrono::seconds(5), opts_.source_ip);
  sock.set_timeouts(std::chrono::seconds(30), std::chrono::seconds(30));
  try {
    return net::tls_connect(ctx_.get(), std::move(sock), sni);
  } catch (const net::NetError& e) {
    throw HandshakeRefused(e.what());
  }
}

Response TestClient::exchange(const std::string& host, const std::string& bytes, const std::string& method) {
  auto stream = open(host);
  try {
    stream->write_all(bytes);
  } catch (const net::TlsAlert& e) {
    throw HandshakeRefused(e.what());
  } catch (const net::NetError& e) {
    throw NoResponse(e.what());
  }
  http::Reader reader(*stream);
  Response r = read_response(reader, method);
  absorb_cookies(host, r);
  return r;
}

void TestClient::absorb_cookies(const std::string& host, const Response& r) {
  for (const auto& sc : r.headers.get_all("Set-Cookie")) {
    auto semi = sc.find(';');
    auto pair = trim(std::string_view(sc).substr(0, semi));
    auto eq = pair.find('=');
    if (eq == std::string_view::npos) continue;
    jar_[host][std::string(trim(pair.substr(0, eq)))] = std::string(trim(pair.substr(eq + 1)));
  }
}

Response TestClient::request(const std::string& method, const std::string& host, const std::string& target,
                             const http::Headers& extra, const std::string& body) {
  http::RequestHead head;
  head.method = method;
  head.target = target;
  head.headers.add("Host", host);
  head.headers.add("User-Agent", "zta-harness/1");
  std::string cookie;
  for (const auto& [k, v] : jar_[host]) {
    if (!cookie.empty()) cookie += "; ";
    cookie += k + "=" + v;
  }
  if (!cookie.empty()) head.headers.add("Cookie", cookie);
  for (const auto& [k, v] : extra.items()) head.headers.add(k, v);
  if (!body.empty() || method == "POST" || method == "PUT") head.headers.set("Content-Length", std::to_string(body.size()));
  head.headers.add("Connection", "close");
  return exchange(host, head.serialize() + body, method);
}

Response TestClient::raw(const std::string& host, const std::string& raw_request) {
  auto sp = raw_request.find(' ');
  return exchange(host, raw_request, raw_request.substr(0, sp));
}

Response TestClient::browse_with_login(const std::string& host, const std::string& target, const std::string& user,
                                       const std::string& password) {
  Response first = get(host, target);
  if (first.status != 302) return first;
  auto authorize = http::parse_url(*first.headers.get("Location"));
  httplib::Client idp(authorize.scheme + "://" + authorize.host + ":" + std::to_string(authorize.port));
  idp.set_connection_timeout(5);
  idp.set_read_timeout(5);

  auto a = idp.Get(authorize.target);
  if (!a || a->status != 302) {
    Response r;
    r.status = a ? a->status : 0;
    r.body = a ? a->body : "idp unreachable";
    return r;
  }
  auto q = http::parse_query(std::string_view(authorize.target).substr(authorize.target.find('?') + 1));
  httplib::Params form{{"client_id", q["client_id"]},
                       {"redirect_uri", q["redirect_uri"]},
                       {"state", q["state"]},
                       {"username", user},
                       {"password", password}};
  auto posted = idp.Post("/login", form);
  if (!posted || posted->status != 302) {
    Response r;
    r.status = posted ? posted->status : 0;
    r.body = posted ? posted->body : "idp unreachable";
    return r;
  }
  auto callback = http::parse_url(posted->get_header_value("Location"));
  Response cb = get(host, callback.target);
  if (cb.status != 302) return cb;
  auto original = http::parse_url(*cb.headers.get("Location"));
  return get(host, original.target);
}

std::optional<std::string> TestClient::cli_login(const std::string& user, const std::string& password) {
  http::Headers h;
  h.add("Content-Type", "application/json");
  Response r = request("POST", "gateway.corp.test", "/.zta/login", h, json{{"user", user}, {"password", password}}.dump());
  if (r.status != 200) return std::nullopt;
  return json::parse(r.body).at("session_id").get<std::string>();
}

TestClient::Tunnel TestClient::connect(const std::string& target, const std::optional<std::string>& session_id) {
  const std::string host = target.substr(0, target.rfind(':'));
  auto stream = open(host);
  std::string req = "CONNECT " + target + " HTTP/1.1\r\nHost: " + target + "\r\n";
  if (session_id) req += "Proxy-Authorization: ZTA " + *session_id + "\r\n";
  req += "\r\n";
  try {
    stream->write_all(req);
  } catch (const net::TlsAlert& e) {
    throw HandshakeRefused(e.what());
  } catch (const net::NetError& e) {
    throw NoResponse(e.what());
  }
  Tunnel t;
  {
    // Read the head byte by byte so no tunnel payload is swallowed by a buffer.
    std::string head;
    char ch;
    while (head.size() < 65536 && (head.size() < 4 || head.compare(head.size() - 4, 4, "\r\n\r\n") != 0)) {
      std::size_t n = 0;
      try {
        n = stream->read(&ch, 1);
      } catch (const net::TlsAlert& e) {
        throw HandshakeRefused(e.what());
      } catch (const net::NetError& e) {
        throw NoResponse(e.what());
      }
      if (n == 0) break;
      head.push_back(ch);
    }
    if (head.empty()) throw NoResponse("connection closed before a response");
    auto parsed = http::parse_response_head(head);
    t.response.status = parsed.status;
    t.response.headers = parsed.headers;
    t.response.head_bytes = head.size();
    if (parsed.status != 200) {
      http::Reader reader(*stream);
      t.response.body = http::read_body(reader, http::response_framing(parsed, "GET"), 1 << 20);
      return t;
    }
  }
  t.stream = std::move(stream);
  return t;
}

}  // namespace zta::harness
