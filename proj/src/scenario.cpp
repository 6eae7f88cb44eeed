#include "zta/scenario.hpp"

#include <poll.h>
#include <stdlib.h>

#include <cstdio>
#include <filesystem>
#include <functional>
#include <httplib.h>
#include <random>
#include <set>
#include <thread>

#include "zta/token.hpp"

namespace zta::harness {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr auto kDay = std::chrono::hours(24);

void write_text(const std::string& path, const std::string& text) { write_file_atomic(path, text); }

}  // namespace

std::vector<policy::RoutePolicy> fixture_routes(const std::string& http_upstream, const std::string& tcp_upstream) {
  policy::RoutePolicy app1;
  app1.host = "app1.corp.test";
  app1.upstream = http_upstream;
  app1.required_groups = {"eng"};
  app1.allowed_employment = {Employment::fte, Employment::contractor};

  policy::RoutePolicy app2;
  app2.host = "app2.corp.test";
  app2.upstream = http_upstream;
  app2.allowed_employment = {Employment::fte};

  policy::RoutePolicy bastion;
  bastion.host = "bastion.corp.test";
  bastion.upstream = tcp_upstream;
  bastion.kind = policy::RouteKind::tcp_tunnel;
  bastion.allowed_employment = {Employment::fte};
  return {app1, app2, bastion};
}

// -- environment ------------------------------------------------------------------

Environment::Environment(EnvironmentOptions opts) : opts_(std::move(opts)), clock_(std::make_shared<OffsetClock>()) {
  if (opts_.dir) {
    dir_ = *opts_.dir;
    fs::create_directories(dir_);
  } else {
    std::string tmpl = (fs::temp_directory_path() / "zta-env-XXXXXX").string();
    if (!::mkdtemp(tmpl.data())) throw InfrastructureError("cannot create a temp directory");
    dir_ = tmpl;
    own_dir_ = true;
  }
  admin_token_ = to_hex(random_bytes(16));
  try {
    build_pki();
    start_services();
  } catch (const InfrastructureError&) {
    throw;
  } catch (const std::exception& e) {
    throw InfrastructureError(std::string("environment launch failed: ") + e.what());
  }
}

Environment::~Environment() {
  if (gw_) gw_->stop();
  if (tcp_) tcp_->stop();
  if (app_) app_->stop();
  if (idp_) idp_->stop();
  if (cp_) cp_->stop();
  if (own_dir_ && !opts_.keep_dir) {
    std::error_code ec;
    fs::remove_all(dir_, ec);
  }
}

void Environment::build_pki() {
  const TimePoint now = clock_->now();
  ManualClock past(now - 60 * kDay);
  auto ca = pki::CertificateAuthority::create(3650, past);
  ca.save(dir_ + "/ca");
  ca_path_ = dir_ + "/ca.cert.pem";
  pki::write_pem(ca_path_, ca.root_cert().to_pem(), false);

  fs::create_directories(dir_ + "/devices");
  auto store = [&](const std::string& name, const pki::IssuedDevice& d) {
    DeviceFiles f{dir_ + "/devices/" + name + ".cert.pem", dir_ + "/devices/" + name + ".key.pem", d.info.fingerprint};
    pki::write_pem(f.cert_path, d.cert.to_pem(), false);
    pki::write_pem(f.key_path, d.key.to_pem(), true);
    devices_[name] = f;
  };
  for (const char* name : {"laptop-001", "laptop-002", "laptop-003"}) {
    store(name, ca.issue_device_cert(name, true, 30, *clock_));
  }
  ManualClock forty_days_ago(now - 40 * kDay);
  store("expired", ca.issue_device_cert("laptop-expired", true, 30, forty_days_ago));
  store("unmanaged", ca.issue_device_cert("byod-001", false, 30, *clock_));

  auto server = ca.issue_server_cert({"*.corp.test", "corp.test", "localhost"}, 30, *clock_);
  pki::write_pem(dir_ + "/server.cert.pem", server.cert.to_pem(), false);
  pki::write_pem(dir_ + "/server.key.pem", server.key.to_pem(), true);
  pki::write_pem(dir_ + "/signing.key.pem", token::SigningKeyPair::generate("k1", now).key.to_pem(), true);

  json geo = json::array({{{"cidr", "127.0.1.0/24"}, {"lat", 51.5074}, {"lon", -0.1278}},
                          {{"cidr", "127.0.2.0/24"}, {"lat", 40.7128}, {"lon", -74.0060}}});
  write_text(dir_ + "/geo.json", geo.dump(2));
}

void Environment::start_services() {
  cp_opts_.admin_token = admin_token_;
  cp_opts_.state_path = dir_ + "/cp-state.json";
  cp_opts_.log_path = dir_ + "/cp-logs.jsonl";
  cp_ = std::make_unique<cp::ControlPlaneServer>(cp_opts_, clock_);
  cp_->start();
  cp_opts_.port = cp_->port();

  idp_ = std::make_unique<MockIdp>(IdpOptions{}, UserDirectory::default_fixture(), clock_);
  idp_->start();
  app_ = std::make_unique<EchoUpstream>();
  app_->start();
  tcp_ = std::make_unique<TcpEcho>();
  tcp_->start();

  for (const auto& r : fixture_routes(app_->address(), tcp_->address())) cp_->policy().upsert_route(r, "harness");

  gw_cfg_.listen_host = "127.0.0.1";
  gw_cfg_.listen_port = 0;
  gw_cfg_.trust_root = ca_path_;
  gw_cfg_.server_cert = dir_ + "/server.cert.pem";
  gw_cfg_.server_key = dir_ + "/server.key.pem";
  gw_cfg_.signing_key = dir_ + "/signing.key.pem";
  gw_cfg_.control_plane_url = cp_->url();
  gw_cfg_.idp = idp_->client_config();
  gw_cfg_.geo_db = dir_ + "/geo.json";
  gw_cfg_.poll_interval_s = opts_.poll_interval_s;
  gw_cfg_.header_limit_bytes = opts_.header_limit_bytes;
  gw_cfg_.log_path = dir_ + "/access.log.jsonl";
  gw_cfg_.dead_letter_path = dir_ + "/access.deadletter.jsonl";
  write_text(dir_ + "/gateway.json", gw_cfg_.to_json());

  gw_ = std::make_unique<gateway::Gateway>(gw_cfg_, gateway::GatewayDeps{clock_, nullptr, nullptr, nullptr});
  gw_->start();
}

const DeviceFiles& Environment::device(const std::string& name) const {
  auto it = devices_.find(name);
  if (it == devices_.end()) throw ValidationError("unknown device: " + name);
  return it->second;
}

ClientOptions Environment::client_options(const std::optional<std::string>& device,
                                          const std::optional<std::string>& source_ip) const {
  ClientOptions o;
  o.gateway_port = gw_->port();
  o.ca_path = ca_path_;
  if (device) {
    const auto& d = this->device(*device);
    o.cert_path = d.cert_path;
    o.key_path = d.key_path;
  }
  o.source_ip = source_ip;
  return o;
}

TestClient Environment::client(const std::optional<std::string>& device,
                               const std::optional<std::string>& source_ip) const {
  return TestClient(client_options(device, source_ip));
}

void Environment::stop_control_plane() {
  if (cp_) cp_->stop();
  cp_.reset();
}

void Environment::start_control_plane() {
  if (cp_) return;
  // The old listener may linger briefly; retry the fixed-port bind.
  for (int attempt = 0;; attempt++) {
    try {
      cp_ = std::make_unique<cp::ControlPlaneServer>(cp_opts_, clock_);
      cp_->start();
      return;
    } catch (const net::NetError& e) {
      cp_.reset();
      if (attempt >= 50) throw InfrastructureError(std::string("control plane restart failed: ") + e.what());
      std::this_thread::sleep_for(std::chrono::milliseconds(100));
    }
  }
}

Environment::AdminReply Environment::admin(const std::string& method, const std::string& path,
                                           const std::string& body) {
  httplib::Client cli("127.0.0.1", cp_opts_.port);
  cli.set_connection_timeout(2);
  cli.set_read_timeout(5);
  httplib::Headers h{{"Authorization", "Bearer " + admin_token_}, {"X-Actor", "harness"}};
  for (int attempt = 0; attempt < 20; attempt++) {
    httplib::Result res = method == "GET"    ? cli.Get(path, h)
                          : method == "PUT"  ? cli.Put(path, h, body, "application/json")
                                             : cli.Post(path, h, body, "application/json");
    if (res && res->status != 503) return {res->status, res->body};
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
  }
  throw InfrastructureError("control plane unreachable for " + method + " " + path);
}

namespace {

std::int64_t version_of(const Environment::AdminReply& r, const std::string& what) {
  if (r.status != 200) throw InfrastructureError(what + " failed: " + std::to_string(r.status) + " " + r.body);
  return json::parse(r.body).at("version").get<std::int64_t>();
}

}  // namespace

std::int64_t Environment::set_kill_switch(bool enabled) {
  return version_of(admin("POST", "/v1/killswitch", json{{"enabled", enabled}}.dump()), "killswitch");
}

std::int64_t Environment::revoke(const std::string& fingerprint, const std::string& reason) {
  return version_of(admin("POST", "/v1/revocations", json{{"fingerprint", fingerprint}, {"reason", reason}}.dump()),
                    "revoke");
}

std::int64_t Environment::update_settings(const json& settings) {
  return version_of(admin("PUT", "/v1/settings", settings.dump()), "settings");
}

std::int64_t Environment::put_route(const policy::RoutePolicy& route) {
  return version_of(admin("PUT", "/v1/routes/" + route.host, policy::encode_route(route)), "route");
}

bool Environment::wait_for_version(std::int64_t v, std::chrono::milliseconds timeout) {
  auto deadline = std::chrono::steady_clock::now() + timeout;
  while (std::chrono::steady_clock::now() < deadline) {
    auto snap = gw_->snapshots().current();
    if (snap && snap->version >= v) return true;
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  return false;
}

// -- scenario parsing -------------------------------------------------------------------

namespace {

const std::set<std::string> kActions{"login", "http_get", "connect", "tunnel_closed", "admin_op", "advance_clock",
                                     "assert"};
const std::set<std::string> kClientActions{"login", "http_get", "connect"};
const std::set<std::string> kAssertOps{"eq", "ne", "lt", "le", "gt", "ge"};

}  // namespace

Scenario parse_scenario(const std::string& text) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw ValidationError("scenario is not a JSON object");
  Scenario s;
  s.name = j.value("name", std::string());
  if (s.name.empty()) throw ValidationError("scenario needs a name");
  s.seed = j.value("seed", std::uint64_t{1});
  const json actors = j.value("actors", json::object());
  for (const auto& [name, a] : actors.items()) {
    ScenarioActor actor;
    if (a.contains("device") && !a["device"].is_null()) actor.device = a["device"].get<std::string>();
    if (a.contains("source_ip") && !a["source_ip"].is_null()) actor.source_ip = a["source_ip"].get<std::string>();
    s.actors[name] = actor;
  }
  std::set<std::string> seen;
  std::size_t index = 0;
  for (const auto& st : j.at("steps")) {
    ScenarioStep step;
    step.id = st.value("id", "step" + std::to_string(index));
    step.actor = st.value("actor", std::string());
    step.action = st.at("action").get<std::string>();
    step.params = st.value("params", json::object());
    step.expect = st.value("expect", json::object());
    const std::string where = "step " + std::to_string(index) + " (" + step.id + ")";
    if (!kActions.contains(step.action)) throw ValidationError(where + ": unknown action " + step.action);
    if (kClientActions.contains(step.action) && !s.actors.contains(step.actor)) {
      throw ValidationError(where + ": unknown actor '" + step.actor + "'");
    }
    if (step.action == "assert" || step.action == "tunnel_closed") {
      auto ref = step.params.value("ref", std::string());
      if (!seen.contains(ref)) throw ValidationError(where + ": must reference an earlier step, got '" + ref + "'");
    }
    if (step.action == "assert") {
      if (!step.params.contains("field")) throw ValidationError(where + ": assert needs a field");
      if (!kAssertOps.contains(step.params.value("op", std::string("eq")))) {
        throw ValidationError(where + ": unknown op");
      }
    }
    if (!seen.insert(step.id).second) throw ValidationError(where + ": duplicate step id");
    s.steps.push_back(std::move(step));
    index++;
  }
  if (s.steps.empty()) throw ValidationError("scenario has no steps");
  return s;
}

// -- scenario execution ------------------------------------------------------------------

namespace {

using Millis = std::chrono::milliseconds;

std::int64_t ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration_cast<Millis>(std::chrono::steady_clock::now() - t0).count();
}

std::string reason_of(const Response& r) {
  auto reason = r.reason();
  if (!reason.empty()) return reason;
  if (r.status >= 200 && r.status < 300) return "ok";
  if (r.status >= 300 && r.status < 400) return "redirect";
  return "http_" + std::to_string(r.status);
}

json observe_response(const Response& r) { return json{{"status", r.status}, {"reason", reason_of(r)}}; }

/// Runs `attempt` until `until` matches or the timeout passes.
json retry_until(const json& params, const std::function<json()>& attempt) {
  const auto t0 = std::chrono::steady_clock::now();
  const json until = params.value("until", json::object());
  const Millis timeout(params.value("timeout_ms", 5000));
  const Millis interval(params.value("interval_ms", 25));
  int attempts = 0;
  json obs;
  for (;;) {
    obs = attempt();
    attempts++;
    bool done = true;
    for (const auto& [k, v] : until.items()) done = done && obs.contains(k) && obs[k] == v;
    if (done || std::chrono::steady_clock::now() - t0 >= timeout) break;
    std::this_thread::sleep_for(interval);
  }
  obs["elapsed_ms"] = ms_since(t0);
  obs["attempts"] = attempts;
  return obs;
}

bool compare(const json& observed, const std::string& op, const json& value) {
  if (op == "eq") return observed == value;
  if (op == "ne") return observed != value;
  if (!observed.is_number() || !value.is_number()) return false;
  double a = observed.get<double>(), b = value.get<double>();
  if (op == "lt") return a < b;
  if (op == "le") return a <= b;
  if (op == "gt") return a > b;
  return a >= b;
}

std::string substitute(std::string s, std::mt19937_64& rng) {
  for (auto pos = s.find("{nonce}"); pos != std::string::npos; pos = s.find("{nonce}")) {
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(rng()));
    s.replace(pos, 7, hex);
  }
  return s;
}

/// Waits for the peer to close a tunnel stream. Data still in flight is discarded.
bool wait_closed(net::TlsStream& s, Millis timeout) {
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  char buf[4096];
  while (std::chrono::steady_clock::now() < deadline) {
    if (!s.has_pending()) {
      pollfd p{s.fd(), POLLIN, 0};
      if (::poll(&p, 1, 50) <= 0) continue;
    }
    try {
      if (s.read(buf, sizeof buf) == 0) return true;
    } catch (const net::TimeoutError&) {
      continue;
    } catch (const net::NetError&) {
      return true;
    }
  }
  return false;
}

struct Runner {
  const Scenario& s;
  Environment& env;
  std::mt19937_64 rng;
  std::map<std::string, std::unique_ptr<TestClient>> clients;
  std::map<std::string, std::unique_ptr<net::TlsStream>> tunnels;
  std::map<std::string, json> observed;

  TestClient& client(const std::string& actor) {
    auto it = clients.find(actor);
    if (it != clients.end()) return *it->second;
    const auto& a = s.actors.at(actor);
    return *clients.emplace(actor, std::make_unique<TestClient>(env.client_options(a.device, a.source_ip)))
                .first->second;
  }

  json guarded(const std::function<json()>& fn) {
    try {
      return fn();
    } catch (const HandshakeRefused& e) {
      return json{{"status", 0}, {"reason", "handshake_refused"}, {"detail", e.what()}};
    } catch (const NoResponse& e) {
      return json{{"status", 0}, {"reason", "no_response"}, {"detail", e.what()}};
    }
  }

  json login(const ScenarioStep& st) {
    auto& c = client(st.actor);
    const auto t0 = std::chrono::steady_clock::now();
    json obs = guarded([&] {
      return observe_response(c.browse_with_login(st.params.value("host", std::string("app1.corp.test")),
                                                  substitute(st.params.value("path", std::string("/")), rng),
                                                  st.params.at("user").get<std::string>(),
                                                  st.params.at("password").get<std::string>()));
    });
    obs["elapsed_ms"] = ms_since(t0);
    return obs;
  }

  json http_get(const ScenarioStep& st) {
    auto& c = client(st.actor);
    const auto host = st.params.at("host").get<std::string>();
    const auto path = st.params.value("path", std::string("/"));
    http::Headers extra;
    const json headers = st.params.value("headers", json::object());
    for (const auto& [k, v] : headers.items()) extra.add(k, v.get<std::string>());
    return retry_until(st.params, [&] {
      return guarded([&] { return observe_response(c.get(host, substitute(path, rng), extra)); });
    });
  }

  json connect(const ScenarioStep& st) {
    auto& c = client(st.actor);
    std::optional<std::string> sid;
    if (st.params.contains("user")) {
      sid = c.cli_login(st.params["user"].get<std::string>(), st.params.at("password").get<std::string>());
      if (!sid) return json{{"status", 401}, {"reason", "idp_rejected"}};
    }
    const auto target = st.params.at("target").get<std::string>();
    json obs = guarded([&] {
      auto t = c.connect(target, sid);
      json o = observe_response(t.response);
      if (t.stream) {
        const std::size_t n = st.params.value("payload_bytes", std::size_t{0});
        if (n > 0) {
          std::string payload(n, '\0');
          for (auto& ch : payload) ch = static_cast<char>(rng() & 0xff);
          t.stream->write_all(payload);
          std::string back;
          back.reserve(n);
          char buf[16384];
          while (back.size() < n) {
            auto got = t.stream->read(buf, std::min(sizeof buf, n - back.size()));
            if (got == 0) break;
            back.append(buf, got);
          }
          o["echo_intact"] = back == payload;
        }
        tunnels[st.id] = std::move(t.stream);
      }
      return o;
    });
    return obs;
  }

  json tunnel_closed(const ScenarioStep& st) {
    auto it = tunnels.find(st.params.at("ref").get<std::string>());
    if (it == tunnels.end()) return json{{"closed", false}, {"reason", "no_tunnel"}};
    const auto t0 = std::chrono::steady_clock::now();
    bool closed = wait_closed(*it->second, Millis(st.params.value("timeout_ms", 5000)));
    return json{{"closed", closed}, {"elapsed_ms", ms_since(t0)}};
  }

  json admin_op(const ScenarioStep& st) {
    const auto op = st.params.at("op").get<std::string>();
    std::int64_t version = 0;
    if (op == "killswitch") {
      version = env.set_kill_switch(st.params.at("enabled").get<bool>());
    } else if (op == "revoke") {
      auto fp = st.params.contains("device") ? env.device(st.params["device"].get<std::string>()).fingerprint
                                             : st.params.at("fingerprint").get<std::string>();
      version = env.revoke(fp, st.params.value("reason", std::string("scenario")));
    } else if (op == "settings") {
      version = env.update_settings(st.params.at("settings"));
    } else if (op == "route") {
      version = env.put_route(policy::decode_route(st.params.at("route").dump()));
    } else if (op == "stop_control_plane") {
      env.stop_control_plane();
      return json{{"ok", true}};
    } else if (op == "start_control_plane") {
      env.start_control_plane();
      return json{{"ok", true}};
    } else {
      throw ValidationError("unknown admin op: " + op);
    }
    return json{{"ok", true}, {"version", version}};
  }

  json advance_clock(const ScenarioStep& st) {
    const auto secs = st.params.at("seconds").get<double>();
    env.clock()->advance(std::chrono::microseconds(static_cast<std::int64_t>(secs * 1e6)));
    return json{{"ok", true}, {"offset_s", static_cast<double>(env.clock()->offset().count()) / 1e6}};
  }
};

std::string describe(const json& j) { return j.is_null() ? "<missing>" : j.dump(); }

}  // namespace

ScenarioResult run_scenario(const Scenario& s, Environment& env) {
  ScenarioResult result;
  Runner run{s, env, std::mt19937_64(s.seed), {}, {}, {}};
  for (std::size_t i = 0; i < s.steps.size(); i++) {
    const auto& st = s.steps[i];
    json obs;
    std::string mismatch;
    if (st.action == "assert") {
      const auto& ref = run.observed.at(st.params.at("ref").get<std::string>());
      const auto field = st.params.at("field").get<std::string>();
      const auto op = st.params.value("op", std::string("eq"));
      const json actual = ref.contains(field) ? ref[field] : json();
      obs = json{{"field", field}, {"actual", actual}};
      if (!compare(actual, op, st.params.at("value"))) {
        mismatch = st.params["ref"].get<std::string>() + "." + field + ": expected " + op + " " +
                   st.params["value"].dump() + ", observed " + describe(actual);
      }
    } else {
      if (st.action == "login") obs = run.login(st);
      else if (st.action == "http_get") obs = run.http_get(st);
      else if (st.action == "connect") obs = run.connect(st);
      else if (st.action == "tunnel_closed") obs = run.tunnel_closed(st);
      else if (st.action == "admin_op") obs = run.admin_op(st);
      else obs = run.advance_clock(st);
      if (kClientActions.contains(st.action)) result.reasons.push_back(obs.value("reason", std::string()));
      for (const auto& [k, v] : st.expect.items()) {
        const json actual = obs.contains(k) ? obs[k] : json();
        if (actual != v) {
          if (!mismatch.empty()) mismatch += "; ";
          mismatch += k + ": expected " + v.dump() + ", observed " + describe(actual);
        }
      }
    }
    run.observed[st.id] = obs;
    result.steps.push_back({st.id, st.action, obs});
    if (!mismatch.empty()) {
      result.failed_step = i;
      result.diff = "step " + std::to_string(i) + " (" + st.id + "): " + mismatch;
      return result;
    }
  }
  result.passed = true;
  return result;
}

}  // namespace zta::harness
