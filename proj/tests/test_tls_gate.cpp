#include <doctest.h>

#include <filesystem>
#include <thread>

#include "zta/net.hpp"
#include "zta/pki.hpp"
#include "zta/tls_gate.hpp"

using namespace zta;
using namespace std::chrono_literals;

namespace {

TimePoint t0() { return from_epoch_seconds(1'790'000'000); }

std::string code_of(const std::vector<pki::Certificate>& chain, const pki::Certificate& root, TimePoint now) {
  try {
    tls::validate_client_cert(chain, root, now);
    return "ok";
  } catch (const tls::CertValidationError& e) {
    return std::string(tls::to_string(e.code()));
  }
}

}  // namespace

TEST_CASE("validity window is inclusive at both ends") {
  ManualClock clock(t0());
  auto ca = pki::CertificateAuthority::create(3650, clock);
  auto d = ca.issue_device_cert("laptop-001", true, 30, clock);
  std::vector<pki::Certificate> chain{d.cert};
  const auto& root = ca.root_cert();
  CHECK(code_of(chain, root, d.cert.not_before()) == "ok");
  CHECK(code_of(chain, root, d.cert.not_after()) == "ok");
  CHECK(code_of(chain, root, d.cert.not_after() + 1s) == "expired_cert");
  CHECK(code_of(chain, root, d.cert.not_before() - 1s) == "not_yet_valid");
}

TEST_CASE("server certificates are refused as client identities") {
  ManualClock clock(t0());
  auto ca = pki::CertificateAuthority::create(3650, clock);
  auto s = ca.issue_server_cert({"gw.corp.test"}, 30, clock);
  std::vector<pki::Certificate> chain{s.cert};
  CHECK(code_of(chain, ca.root_cert(), clock.now()) == "wrong_key_usage");
}

TEST_CASE("validation is pure: 50 certs x 3 clock positions, evaluated twice") {
  ManualClock clock(t0());
  auto ca = pki::CertificateAuthority::create(3650, clock);
  int seen[3] = {0, 0, 0};
  for (int i = 0; i < 50; i++) {
    auto d = ca.issue_device_cert("dev-" + std::to_string(i), true, 1 + i % 30, clock);
    std::vector<pki::Certificate> chain{d.cert};
    const TimePoint positions[3] = {d.cert.not_before() - 1s, d.cert.not_before() + 1h, d.cert.not_after() + 1s};
    const char* expected[3] = {"not_yet_valid", "ok", "expired_cert"};
    for (int p = 0; p < 3; p++) {
      auto first = code_of(chain, ca.root_cert(), positions[p]);
      auto second = code_of(chain, ca.root_cert(), positions[p]);
      CHECK(first == second);
      CHECK(first == expected[p]);
      if (first == expected[p]) seen[p]++;
    }
    auto info1 = tls::validate_client_cert(chain, ca.root_cert(), positions[1]);
    auto info2 = tls::validate_client_cert(chain, ca.root_cert(), positions[1]);
    CHECK(info1.fingerprint == info2.fingerprint);
    CHECK(info1.subject_cn == info2.subject_cn);
  }
  CHECK(seen[0] == 50);
  CHECK(seen[1] == 50);
  CHECK(seen[2] == 50);
}

TEST_CASE("handshake gate on a live socket") {
  auto dir = std::filesystem::temp_directory_path() / ("zta-tls-" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  auto clock = std::make_shared<ManualClock>(from_epoch_seconds(epoch_seconds(SystemClock().now())));
  auto ca = pki::CertificateAuthority::create(3650, *clock);
  auto other = pki::CertificateAuthority::create(3650, *clock);
  auto server = ca.issue_server_cert({"gw.corp.test"}, 30, *clock);
  auto good = ca.issue_device_cert("laptop-001", true, 30, *clock);
  auto foreign = other.issue_device_cert("intruder", true, 30, *clock);
  auto p = [&](const char* n) { return (dir / n).string(); };
  pki::write_pem(p("ca.pem"), ca.root_cert().to_pem(), false);
  pki::write_pem(p("srv.pem"), server.cert.to_pem(), false);
  pki::write_pem(p("srv.key"), server.key.to_pem(), true);
  pki::write_pem(p("good.pem"), good.cert.to_pem(), false);
  pki::write_pem(p("good.key"), good.key.to_pem(), true);
  pki::write_pem(p("foreign.pem"), foreign.cert.to_pem(), false);
  pki::write_pem(p("foreign.key"), foreign.key.to_pem(), true);

  tls::TlsGate gate({p("srv.pem"), p("srv.key"), p("ca.pem")}, clock);
  auto listener = net::tcp_listen("127.0.0.1", 0);
  const auto port = net::local_port(listener);

  auto attempt = [&](std::optional<std::string> cert, std::optional<std::string> key) {
    std::variant<tls::TlsGate::Accepted, tls::TlsGate::Refused> result;
    std::thread server_side([&] {
      std::string peer;
      auto s = net::tcp_accept(listener, &peer);
      result = gate.accept_connection(std::move(s), peer);
      if (auto* acc = std::get_if<tls::TlsGate::Accepted>(&result)) acc->stream->write_all("x");
    });
    auto ctx = net::make_client_context({p("ca.pem"), cert, key});
    bool client_ok = true;
    try {
      auto stream = net::tls_connect(ctx.get(), net::tcp_connect("127.0.0.1", port, 2s), "gw.corp.test");
      char c;
      // TLS 1.3 reports a client-cert rejection on the first read.
      stream->socket().set_timeouts(2s, 2s);
      try {
        client_ok = stream->read(&c, 1) == 1;
      } catch (const net::NetError&) {
        client_ok = false;
      }
    } catch (const net::NetError&) {
      client_ok = false;
    }
    server_side.join();
    return std::make_pair(client_ok, std::move(result));
  };

  SUBCASE("valid certificate") {
    auto [ok, r] = attempt(p("good.pem"), p("good.key"));
    REQUIRE(std::holds_alternative<tls::TlsGate::Accepted>(r));
    CHECK(std::get<tls::TlsGate::Accepted>(r).client.fingerprint == good.info.fingerprint);
    CHECK(gate.counters().accepted == 1);
  }
  SUBCASE("no certificate") {
    auto [ok, r] = attempt(std::nullopt, std::nullopt);
    CHECK_FALSE(ok);
    REQUIRE(std::holds_alternative<tls::TlsGate::Refused>(r));
    CHECK(std::get<tls::TlsGate::Refused>(r).failure == tls::HandshakeFailure::no_client_cert);
    CHECK(gate.counters().no_client_cert == 1);
  }
  SUBCASE("foreign CA") {
    auto [ok, r] = attempt(p("foreign.pem"), p("foreign.key"));
    CHECK_FALSE(ok);
    REQUIRE(std::holds_alternative<tls::TlsGate::Refused>(r));
    auto refused = std::get<tls::TlsGate::Refused>(r);
    CHECK(refused.failure == tls::HandshakeFailure::bad_cert);
    REQUIRE(refused.cert_error);
    CHECK(*refused.cert_error == tls::CertError::untrusted_issuer);
  }
  SUBCASE("expired by the injected clock") {
    clock->advance(31 * 24h);
    auto [ok, r] = attempt(p("good.pem"), p("good.key"));
    CHECK_FALSE(ok);
    REQUIRE(std::holds_alternative<tls::TlsGate::Refused>(r));
    auto refused = std::get<tls::TlsGate::Refused>(r);
    REQUIRE(refused.cert_error);
    CHECK(*refused.cert_error == tls::CertError::expired_cert);
    CHECK(refused.fingerprint == good.info.fingerprint);
  }
  std::filesystem::remove_all(dir);
}
