#include <doctest.h>

#include <filesystem>
#include <set>
#include <sys/stat.h>

#include "oracles/sha256_ref.hpp"
#include "zta/pki.hpp"
#include "zta/tls_gate.hpp"

using namespace zta;
using namespace std::chrono_literals;

namespace {

TimePoint t0() { return from_epoch_seconds(1'790'000'000); }

}  // namespace

TEST_CASE("ca_init sets the requested validity") {
  ManualClock clock(t0());
  auto ca = pki::CertificateAuthority::create(365, clock);
  CHECK(ca.root_cert().not_after() - ca.root_cert().not_before() == std::chrono::hours(24 * 365));
  CHECK_THROWS_AS(pki::CertificateAuthority::create(0, clock), ValidationError);

  auto one_day = pki::CertificateAuthority::create(1, clock);
  auto dev = one_day.issue_device_cert("short", true, 30, clock);
  CHECK(dev.cert.not_after() <= clock.now() + 24h);
}

TEST_CASE("device certificates") {
  ManualClock clock(t0());
  auto ca = pki::CertificateAuthority::create(3650, clock);
  auto a = ca.issue_device_cert("laptop-001", true, 30, clock);
  auto b = ca.issue_device_cert("laptop-001", true, 30, clock);

  CHECK(a.info.subject_cn == "laptop-001");
  CHECK(a.info.device_id == "laptop-001");
  CHECK(a.info.managed);
  CHECK(is_fingerprint(a.info.fingerprint));
  CHECK(a.info.not_before < a.info.not_after);
  CHECK(a.info.serial < b.info.serial);
  CHECK(a.info.fingerprint != b.info.fingerprint);
  CHECK_THROWS_AS(ca.issue_device_cert("", true, 30, clock), ValidationError);

  auto u = ca.issue_device_cert("byod", false, 30, clock);
  CHECK_FALSE(u.info.managed);
  CHECK(pki::describe_device(u.cert).managed == false);
}

TEST_CASE("fingerprint is SHA-256 of the DER bytes") {
  const std::string abc = "abc";
  std::vector<std::uint8_t> bytes(abc.begin(), abc.end());
  CHECK(pki::fingerprint_of(bytes) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");

  ManualClock clock(t0());
  auto ca = pki::CertificateAuthority::create(3650, clock);
  for (int i = 0; i < 10; i++) {
    auto d = ca.issue_device_cert("dev-" + std::to_string(i), true, 30, clock);
    auto der = d.cert.der();
    CHECK(d.info.fingerprint == oracle::sha256_hex(std::string(der.begin(), der.end())));
    CHECK(pki::fingerprint_of(der) == pki::fingerprint_of(der));
  }

  // x and x||0x00 differ for a 100-item corpus, and all 200 digests are distinct.
  std::set<std::string> digests;
  for (int i = 0; i < 100; i++) {
    std::vector<std::uint8_t> x(static_cast<std::size_t>(i + 1), static_cast<std::uint8_t>(i));
    auto y = x;
    y.push_back(0);
    digests.insert(pki::fingerprint_of(x));
    digests.insert(pki::fingerprint_of(y));
  }
  CHECK(digests.size() == 200);
}

TEST_CASE("chain round trip: 2 CAs x 10 certs, each checked against both roots") {
  ManualClock clock(t0());
  auto ca_a = pki::CertificateAuthority::create(3650, clock);
  auto ca_b = pki::CertificateAuthority::create(3650, clock);
  int accepted = 0, rejected = 0;
  for (auto* issuer : {&ca_a, &ca_b}) {
    for (int i = 0; i < 10; i++) {
      auto d = issuer->issue_device_cert("dev-" + std::to_string(i), true, 30, clock);
      std::vector<pki::Certificate> chain{d.cert};
      for (auto* root : {&ca_a, &ca_b}) {
        if (root == issuer) {
          auto info = tls::validate_client_cert(chain, root->root_cert(), clock.now());
          CHECK(info.fingerprint == d.info.fingerprint);
          accepted++;
        } else {
          try {
            tls::validate_client_cert(chain, root->root_cert(), clock.now());
            FAIL("foreign root accepted a certificate");
          } catch (const tls::CertValidationError& e) {
            CHECK(e.code() == tls::CertError::untrusted_issuer);
            rejected++;
          }
        }
      }
    }
  }
  CHECK(accepted == 20);
  CHECK(rejected == 20);
}

TEST_CASE("revocation list is monotone and idempotent") {
  const std::string f1(64, 'a'), f2(64, 'b');
  pki::RevocationList empty;
  auto one = empty.revoke(f1, "lost device", t0());
  CHECK(empty.size() == 0);
  CHECK(one.contains(f1));
  auto again = one.revoke(f1, "x", t0() + 1s);
  CHECK(again.size() == 1);
  CHECK(again.entries().front().reason == "lost device");
  auto two = again.revoke(f2, "y", t0());
  CHECK(two.size() == 2);
  CHECK(two.contains(f1));
  CHECK_THROWS_AS(two.revoke("xyz", "bad", t0()), ValidationError);
}

TEST_CASE("CA save and load keep the serial counter") {
  ManualClock clock(t0());
  auto dir = std::filesystem::temp_directory_path() / ("zta-ca-" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::uint64_t last = 0;
  {
    auto ca = pki::CertificateAuthority::create(3650, clock);
    last = ca.issue_device_cert("a", true, 30, clock).info.serial;
    ca.save(dir.string());
  }
  auto loaded = pki::CertificateAuthority::load(dir.string());
  auto next = loaded.issue_device_cert("b", true, 30, clock);
  CHECK(next.info.serial > last);

  struct stat st {};
  REQUIRE(::stat((dir / "ca.key.pem").c_str(), &st) == 0);
  CHECK((st.st_mode & 0077) == 0);
  std::filesystem::remove_all(dir);
}

TEST_CASE("root validity must cover issuance") {
  ManualClock clock(t0());
  auto ca = pki::CertificateAuthority::create(1, clock);
  clock.advance(48h);
  CHECK_THROWS_AS(ca.issue_device_cert("late", true, 30, clock), ValidationError);
}
