// zta: umbrella CLI for the access gateway, its control plane and the
// loopback harness.

#include <poll.h>
#include <signal.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <httplib.h>
#include <iostream>
#include <json.hpp>
#include <thread>

#include "zta/control_plane.hpp"
#include "zta/gateway.hpp"
#include "zta/harness.hpp"
#include "zta/pki.hpp"
#include "zta/scenario.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitFail = 1;
constexpr int kExitInfra = 2;

std::string default_token_file() {
  const char* home = std::getenv("HOME");
  return std::string(home ? home : ".") + "/.zta/session.json";
}

std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v ? v : fallback;
}

/// Blocks SIGINT/SIGTERM in every thread started afterwards.
sigset_t block_stop_signals() {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
  return set;
}

void wait_for_stop(const sigset_t& set) {
  int sig = 0;
  sigwait(&set, &sig);
  std::cerr << "shutting down\n";
}

struct AdminTarget {
  std::string url = env_or("ZTA_CONTROL_PLANE", "http://127.0.0.1:9000");
  std::string token = env_or("ZTA_ADMIN_TOKEN", "");
};

void add_admin_options(CLI::App* cmd, AdminTarget& t) {
  cmd->add_option("--control-plane", t.url, "Control-plane base URL (env ZTA_CONTROL_PLANE)");
  cmd->add_option("--token", t.token, "Admin bearer token (env ZTA_ADMIN_TOKEN)");
}

/// Sends one admin request and prints the reply; returns the exit code.
int admin_call(const AdminTarget& t, const std::string& method, const std::string& path, const json& body) {
  auto url = zta::http::parse_url(t.url);
  httplib::Client cli(url.host, url.port);
  cli.set_connection_timeout(3);
  cli.set_read_timeout(10);
  httplib::Headers h{{"Authorization", "Bearer " + t.token}, {"X-Actor", env_or("USER", "cli")}};
  auto res = method == "PUT" ? cli.Put(path, h, body.dump(), "application/json")
                             : cli.Post(path, h, body.dump(), "application/json");
  if (!res) {
    std::cerr << "control plane unreachable at " << t.url << "\n";
    return kExitInfra;
  }
  std::cout << res->body << "\n";
  return res->status == 200 ? 0 : kExitFail;
}

struct ClientFlags {
  std::string gateway = "127.0.0.1:8443";
  std::string ca;
  std::string cert;
  std::string key;
  std::string token_file = default_token_file();
};

void add_client_options(CLI::App* cmd, ClientFlags& f) {
  cmd->add_option("--gateway", f.gateway, "Gateway address host:port");
  cmd->add_option("--ca", f.ca, "Trust anchor for the gateway certificate")->required();
  cmd->add_option("--cert", f.cert, "Device certificate PEM")->required();
  cmd->add_option("--key", f.key, "Device private key PEM")->required();
  cmd->add_option("--token-file", f.token_file, "Cached session reference");
}

zta::harness::ClientOptions client_options(const ClientFlags& f) {
  zta::harness::ClientOptions o;
  auto colon = f.gateway.rfind(':');
  if (colon == std::string::npos) throw zta::ValidationError("--gateway must be host:port");
  o.gateway_host = f.gateway.substr(0, colon);
  o.gateway_port = static_cast<std::uint16_t>(std::stoi(f.gateway.substr(colon + 1)));
  o.ca_path = f.ca;
  o.cert_path = f.cert;
  o.key_path = f.key;
  return o;
}

/// Copies bytes both ways between stdin/stdout and the tunnel until the tunnel
/// closes, or goes idle after stdin has ended.
void relay_stdio(zta::net::TlsStream& s) {
  char buf[16384];
  bool stdin_open = true;
  for (;;) {
    if (!s.has_pending()) {
      // After stdin ends, keep draining replies until the tunnel goes quiet.
      pollfd fds[2] = {{s.fd(), POLLIN, 0}, {stdin_open ? STDIN_FILENO : -1, POLLIN, 0}};
      int rc = ::poll(fds, 2, stdin_open ? -1 : 2000);
      if (rc < 0) return;
      if (rc == 0) return;
      if (fds[1].revents & (POLLIN | POLLHUP)) {
        auto n = ::read(STDIN_FILENO, buf, sizeof buf);
        if (n <= 0) {
          stdin_open = false;
        } else {
          s.write_all(std::string_view(buf, static_cast<std::size_t>(n)));
        }
      }
      if (!(fds[0].revents & (POLLIN | POLLHUP | POLLERR))) continue;
    }
    auto n = s.read(buf, sizeof buf);
    if (n == 0) return;
    for (std::size_t off = 0; off < n;) {
      auto w = ::write(STDOUT_FILENO, buf + off, n - off);
      if (w <= 0) return;
      off += static_cast<std::size_t>(w);
    }
  }
}

int tail_logs(const std::string& path, const std::string& outcome, bool follow) {
  std::ifstream in(path);
  while (!in && follow) {
    std::this_thread::sleep_for(std::chrono::milliseconds(200));
    in.open(path);
  }
  if (!in) {
    std::cerr << "cannot open " << path << "\n";
    return kExitFail;
  }
  std::string line, partial;
  for (;;) {
    while (std::getline(in, line)) {
      if (in.eof()) {
        // Torn tail: keep it until the writer finishes the line.
        partial += line;
        break;
      }
      line = partial + line;
      partial.clear();
      if (!outcome.empty()) {
        try {
          if (zta::observe::to_string(zta::observe::parse_json_line(line).outcome) != outcome) continue;
        } catch (const std::exception&) {
          continue;
        }
      }
      std::cout << line << "\n" << std::flush;
    }
    if (!follow) return 0;
    in.clear();
    std::this_thread::sleep_for(std::chrono::milliseconds(200));
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Zero Trust access gateway toolkit"};
  app.require_subcommand(1);

  // ca init
  auto* ca = app.add_subcommand("ca", "Certificate authority")->require_subcommand(1);
  std::string ca_dir = "ca";
  int ca_days = 3650;
  auto* ca_init = ca->add_subcommand("init", "Create a root CA in --dir");
  ca_init->add_option("--dir", ca_dir, "CA directory");
  ca_init->add_option("--days", ca_days, "Root validity in days")->check(CLI::PositiveNumber);

  // cert issue / revoke
  auto* cert = app.add_subcommand("cert", "Device certificates")->require_subcommand(1);
  std::string device_id, out_dir = ".";
  int cert_days = 30;
  bool unmanaged = false;
  auto* issue = cert->add_subcommand("issue", "Issue a device certificate");
  issue->add_option("--ca-dir", ca_dir, "CA directory");
  issue->add_option("--device-id", device_id, "Device identifier")->required();
  issue->add_option("--days", cert_days, "Validity in days")->check(CLI::PositiveNumber);
  issue->add_flag("--unmanaged", unmanaged, "Mark the device as unmanaged");
  issue->add_option("--out-dir", out_dir, "Where to write <device-id>.cert.pem and .key.pem");
  std::vector<std::string> server_names;
  auto* issue_server = cert->add_subcommand("server", "Issue the gateway server certificate");
  issue_server->add_option("--ca-dir", ca_dir, "CA directory");
  issue_server->add_option("--dns", server_names, "DNS names")->required();
  issue_server->add_option("--days", cert_days, "Validity in days")->check(CLI::PositiveNumber);
  issue_server->add_option("--out-dir", out_dir, "Where to write server.cert.pem and server.key.pem");

  AdminTarget admin;
  std::string fingerprint, revoke_reason = "unspecified";
  auto* revoke = cert->add_subcommand("revoke", "Revoke a device fingerprint");
  revoke->add_option("--fingerprint", fingerprint, "SHA-256 fingerprint, 64 hex chars")->required();
  revoke->add_option("--reason", revoke_reason, "Reason recorded with the revocation");
  add_admin_options(revoke, admin);

  // serve
  auto* serve = app.add_subcommand("serve", "Run a service in the foreground")->require_subcommand(1);
  std::string config_path;
  auto* serve_gw = serve->add_subcommand("gateway", "Access gateway");
  serve_gw->add_option("--config", config_path, "Gateway config JSON")->required();

  zta::cp::ControlPlaneOptions cp_opts;
  cp_opts.port = 9000;
  cp_opts.admin_token = env_or("ZTA_ADMIN_TOKEN", "");
  std::string cp_state, cp_log;
  auto* serve_cp = serve->add_subcommand("control-plane", "Policy and log control plane");
  serve_cp->add_option("--host", cp_opts.host, "Bind address");
  serve_cp->add_option("--port", cp_opts.port, "Port");
  serve_cp->add_option("--admin-token", cp_opts.admin_token, "Admin bearer token (env ZTA_ADMIN_TOKEN)");
  serve_cp->add_option("--state", cp_state, "Policy state file");
  serve_cp->add_option("--log-store", cp_log, "Append-only file for shipped access logs");
  serve_cp->add_option("--cors-origin", cp_opts.cors_origin, "Access-Control-Allow-Origin value");

  zta::harness::IdpOptions idp_opts;
  idp_opts.port = 9100;
  auto* serve_idp = serve->add_subcommand("idp", "Mock identity provider with the default users");
  serve_idp->add_option("--host", idp_opts.host, "Bind address");
  serve_idp->add_option("--port", idp_opts.port, "Port");
  serve_idp->add_option("--client-id", idp_opts.client_id, "Registered client id");
  serve_idp->add_option("--client-secret", idp_opts.client_secret, "Client secret");

  std::string up_host = "127.0.0.1";
  std::uint16_t up_port = 9200, tcp_port = 0;
  auto* serve_up = serve->add_subcommand("upstream", "HTTP echo app, optionally a TCP echo too");
  serve_up->add_option("--host", up_host, "Bind address");
  serve_up->add_option("--port", up_port, "HTTP port");
  serve_up->add_option("--tcp-port", tcp_port, "TCP echo port (0 disables)");

  // policy / killswitch
  std::string policy_file;
  auto* policy_cmd = app.add_subcommand("policy", "Policy administration")->require_subcommand(1);
  auto* apply = policy_cmd->add_subcommand("apply", "Apply routes and settings from a JSON file");
  apply->add_option("file", policy_file, "{\"routes\": [...], \"settings\": {...}}")->required()->check(CLI::ExistingFile);
  add_admin_options(apply, admin);

  std::string ks_state;
  auto* ks = app.add_subcommand("killswitch", "Flip the organization-wide kill switch");
  ks->add_option("state", ks_state, "on | off")->required()->check(CLI::IsMember({"on", "off"}));
  add_admin_options(ks, admin);

  // login / tunnel
  ClientFlags client;
  std::string user, password;
  auto* login = app.add_subcommand("login", "Obtain a session reference for tunnels");
  add_client_options(login, client);
  login->add_option("--user", user, "User id")->required();
  login->add_option("--password", password, "Password (env ZTA_PASSWORD)")->envname("ZTA_PASSWORD")->required();

  std::string target;
  auto* tunnel = app.add_subcommand("tunnel", "CONNECT through the gateway and relay stdin/stdout");
  add_client_options(tunnel, client);
  tunnel->add_option("--target", target, "host:port of a TCP_TUNNEL route")->required();

  // logs tail
  std::string log_file = std::string(zta::observe::kDefaultLogFile), outcome;
  bool once = false;
  auto* logs = app.add_subcommand("logs", "Access logs")->require_subcommand(1);
  auto* tail = logs->add_subcommand("tail", "Print the local log and follow appends");
  tail->add_option("--file", log_file, "Local JSONL log");
  tail->add_option("--outcome", outcome, "Only this outcome")->check(CLI::IsMember({"ALLOW", "DENY", "ERROR"}));
  tail->add_flag("--once", once, "Exit at end of file instead of following");

  // scenario run
  std::string scenario_file;
  int runs = 1;
  bool keep = false;
  auto* scenario = app.add_subcommand("scenario", "Scenario runner")->require_subcommand(1);
  auto* run = scenario->add_subcommand("run", "Launch a loopback environment and run a scenario");
  run->add_option("file", scenario_file, "Scenario JSON")->required()->check(CLI::ExistingFile);
  run->add_option("--runs", runs, "Repeat in fresh environments and compare decision reasons")
      ->check(CLI::PositiveNumber);
  run->add_flag("--keep", keep, "Keep the environment directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*ca_init) {
      zta::SystemClock clock;
      auto authority = zta::pki::CertificateAuthority::create(ca_days, clock);
      authority.save(ca_dir);
      std::cout << "CA written to " << ca_dir << "\n";
      return 0;
    }
    if (*issue) {
      zta::SystemClock clock;
      auto authority = zta::pki::CertificateAuthority::load(ca_dir);
      auto dev = authority.issue_device_cert(device_id, !unmanaged, cert_days, clock);
      authority.save(ca_dir);
      fs::create_directories(out_dir);
      zta::pki::write_pem(out_dir + "/" + device_id + ".cert.pem", dev.cert.to_pem(), false);
      zta::pki::write_pem(out_dir + "/" + device_id + ".key.pem", dev.key.to_pem(), true);
      std::cout << dev.info.fingerprint << "\n";
      return 0;
    }
    if (*issue_server) {
      zta::SystemClock clock;
      auto authority = zta::pki::CertificateAuthority::load(ca_dir);
      auto srv = authority.issue_server_cert(server_names, cert_days, clock);
      authority.save(ca_dir);
      fs::create_directories(out_dir);
      zta::pki::write_pem(out_dir + "/server.cert.pem", srv.cert.to_pem(), false);
      zta::pki::write_pem(out_dir + "/server.key.pem", srv.key.to_pem(), true);
      return 0;
    }
    if (*revoke) {
      if (!zta::is_fingerprint(fingerprint)) {
        std::cerr << "fingerprint must be 64 lowercase hex characters\n";
        return kExitFail;
      }
      return admin_call(admin, "POST", "/v1/revocations", json{{"fingerprint", fingerprint}, {"reason", revoke_reason}});
    }
    if (*ks) return admin_call(admin, "POST", "/v1/killswitch", json{{"enabled", ks_state == "on"}});
    if (*apply) {
      json doc = json::parse(zta::read_file(policy_file));
      int rc = 0;
      for (const auto& r : doc.value("routes", json::array())) {
        rc = std::max(rc, admin_call(admin, "PUT", "/v1/routes/" + r.at("host").get<std::string>(), r));
      }
      if (doc.contains("settings")) rc = std::max(rc, admin_call(admin, "PUT", "/v1/settings", doc["settings"]));
      if (doc.contains("kill_switch")) {
        rc = std::max(rc, admin_call(admin, "POST", "/v1/killswitch", json{{"enabled", doc["kill_switch"].get<bool>()}}));
      }
      return rc;
    }

    if (*serve_gw) {
      auto sigs = block_stop_signals();
      const auto base = fs::absolute(config_path).parent_path().string();
      auto cfg = zta::gateway::GatewayConfig::from_json(zta::read_file(config_path), base);
      zta::gateway::Gateway gw(cfg, {});
      gw.start();
      std::cerr << "gateway " << cfg.gateway_id << " listening on " << cfg.listen_host << ":" << gw.port() << "\n";
      wait_for_stop(sigs);
      gw.stop();
      return 0;
    }
    if (*serve_cp) {
      auto sigs = block_stop_signals();
      if (!cp_state.empty()) cp_opts.state_path = cp_state;
      if (!cp_log.empty()) cp_opts.log_path = cp_log;
      if (cp_opts.admin_token.empty()) std::cerr << "warning: no admin token; admin endpoints will refuse\n";
      zta::cp::ControlPlaneServer server(cp_opts, std::make_shared<zta::SystemClock>());
      server.start();
      std::cerr << "control plane listening on " << server.url() << "\n";
      wait_for_stop(sigs);
      server.stop();
      return 0;
    }
    if (*serve_idp) {
      auto sigs = block_stop_signals();
      zta::harness::MockIdp idp(idp_opts, zta::harness::UserDirectory::default_fixture(),
                                std::make_shared<zta::SystemClock>());
      idp.start();
      std::cerr << "idp listening on " << idp.base_url() << "\n";
      wait_for_stop(sigs);
      idp.stop();
      return 0;
    }
    if (*serve_up) {
      auto sigs = block_stop_signals();
      zta::harness::EchoUpstream echo(up_host, up_port);
      echo.start();
      std::cerr << "http echo on " << echo.address() << "\n";
      std::unique_ptr<zta::harness::TcpEcho> tcp;
      if (tcp_port != 0) {
        tcp = std::make_unique<zta::harness::TcpEcho>(up_host, tcp_port);
        tcp->start();
        std::cerr << "tcp echo on " << tcp->address() << "\n";
      }
      wait_for_stop(sigs);
      return 0;
    }

    if (*login) {
      zta::harness::TestClient c(client_options(client));
      auto sid = c.cli_login(user, password);
      if (!sid) {
        std::cerr << "login rejected for " << user << "\n";
        return kExitFail;
      }
      fs::create_directories(fs::path(client.token_file).parent_path());
      zta::write_file_atomic(client.token_file, json{{"session_id", *sid}, {"user", user}}.dump(), true);
      std::cerr << "session stored in " << client.token_file << "\n";
      return 0;
    }
    if (*tunnel) {
      std::optional<std::string> sid;
      if (fs::exists(client.token_file)) {
        sid = json::parse(zta::read_file(client.token_file)).value("session_id", std::string());
      }
      zta::harness::TestClient c(client_options(client));
      auto t = c.connect(target, sid);
      if (t.response.status != 200) {
        const auto reason = t.response.reason();
        std::cerr << "tunnel refused: " << t.response.status << " " << reason << "\n";
        if (reason == "no_session" || reason == "device_mismatch") {
          std::cerr << "session missing or expired; run `zta login` again\n";
        }
        return kExitFail;
      }
      relay_stdio(*t.stream);
      return 0;
    }
    if (*tail) return tail_logs(log_file, outcome, !once);

    if (*run) {
      auto sc = zta::harness::parse_scenario(zta::read_file(scenario_file));
      std::optional<std::vector<std::string>> first_reasons;
      bool all_passed = true;
      for (int i = 0; i < runs; i++) {
        zta::harness::EnvironmentOptions eo;
        eo.keep_dir = keep;
        zta::harness::Environment env(eo);
        auto result = zta::harness::run_scenario(sc, env);
        json steps = json::array();
        for (const auto& st : result.steps) steps.push_back({{"id", st.id}, {"action", st.action}, {"observed", st.observed}});
        json out{{"scenario", sc.name}, {"run", i + 1}, {"passed", result.passed}, {"reasons", result.reasons},
                 {"steps", steps}};
        if (!result.passed) {
          out["failed_step"] = *result.failed_step;
          out["diff"] = result.diff;
        }
        if (keep) out["dir"] = env.dir();
        std::cout << out.dump(2) << "\n";
        all_passed = all_passed && result.passed;
        if (first_reasons && *first_reasons != result.reasons) {
          std::cerr << "nondeterministic: decision reasons differ between runs\n";
          all_passed = false;
        }
        if (!first_reasons) first_reasons = result.reasons;
      }
      return all_passed ? 0 : kExitFail;
    }
  } catch (const zta::harness::InfrastructureError& e) {
    std::cerr << "infrastructure error: " << e.what() << "\n";
    return kExitInfra;
  } catch (const zta::harness::HandshakeRefused& e) {
    std::cerr << "TLS handshake refused: " << e.what() << "\n";
    return kExitFail;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFail;
  }
  return 0;
}
