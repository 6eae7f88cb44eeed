#include <doctest.h>

#include <algorithm>
#include <random>

#include "zta/token.hpp"

using namespace zta;
using namespace std::chrono_literals;

namespace {

TimePoint t0() { return from_epoch_seconds(1'790'000'000); }

token::TokenError error_of(const std::string& tok, const token::KeySet& ks, const std::string& aud, TimePoint now) {
  try {
    token::verify(tok, ks, aud, now);
  } catch (const token::TokenVerificationError& e) {
    return e.code();
  }
  FAIL("token verified unexpectedly");
  return token::TokenError::malformed;
}

std::string random_word(std::mt19937_64& rng, std::size_t max_len) {
  static const std::string alphabet = "abcdefghijklmnopqrstuvwxyz0123456789-_.";
  std::string s(1 + rng() % max_len, 'a');
  for (auto& c : s) c = alphabet[rng() % alphabet.size()];
  return s;
}

}  // namespace

TEST_CASE("make_claims canonicalizes and hashes") {
  auto c = token::make_claims("alice", "app1.corp.test", t0(), {"sre", "eng"}, Employment::fte, std::string(64, 'f'),
                              "raw-session-id", 7);
  CHECK(c.iss == "zta-gateway");
  CHECK(c.exp - c.iat == 300);
  CHECK(c.grp == std::vector<std::string>{"eng", "sre"});
  CHECK(c.sid != "raw-session-id");
  CHECK(c.aud == "app1.corp.test");
  CHECK(c.pol == 7);
}

TEST_CASE("round trip over 200 random claim sets") {
  std::mt19937_64 rng(2024);
  auto keys = token::SigningKeyPair::generate("k1", t0());
  token::KeySet ks(std::span<const token::SigningKeyPair>(&keys, 1));
  for (int i = 0; i < 200; i++) {
    std::vector<std::string> groups;
    for (std::size_t g = rng() % 5; g > 0; g--) groups.push_back(random_word(rng, 12));
    auto host = random_word(rng, 20) + ".corp.test";
    auto claims = token::make_claims(random_word(rng, 16), host, t0() + std::chrono::seconds(rng() % 100000), groups,
                                     rng() % 2 ? Employment::fte : Employment::contractor,
                                     sha256_hex(std::to_string(rng())), random_word(rng, 30),
                                     static_cast<std::int64_t>(rng() % 1000), 60 + rng() % 600);
    auto tok = token::mint(claims, keys);
    auto back = token::verify(tok, ks, host, from_epoch_seconds(claims.iat));
    REQUIRE(back == claims);
    REQUIRE(std::is_sorted(back.grp.begin(), back.grp.end()));
  }
}

TEST_CASE("100 single-bit tampers all fail") {
  std::mt19937_64 rng(99);
  auto keys = token::SigningKeyPair::generate("k1", t0());
  token::KeySet ks(std::span<const token::SigningKeyPair>(&keys, 1));
  auto claims = token::make_claims("alice", "app1.corp.test", t0(), {"eng"}, Employment::fte, std::string(64, 'a'),
                                   "sid", 3);
  const auto tok = token::mint(claims, keys);
  const auto d1 = tok.find('.'), d2 = tok.rfind('.');
  std::vector<std::string> seg{tok.substr(0, d1), tok.substr(d1 + 1, d2 - d1 - 1), tok.substr(d2 + 1)};
  int failures = 0;
  for (int i = 0; i < 100; i++) {
    auto parts = seg;
    auto which = static_cast<std::size_t>(i % 3);
    auto raw = base64url_decode(parts[which]);
    auto bit = rng() % (raw.size() * 8);
    raw[bit / 8] = static_cast<char>(raw[bit / 8] ^ (1 << (bit % 8)));
    parts[which] = base64url_encode(raw);
    auto forged = parts[0] + "." + parts[1] + "." + parts[2];
    try {
      token::verify(forged, ks, "app1.corp.test", t0());
    } catch (const token::TokenVerificationError&) {
      failures++;
    }
  }
  CHECK(failures == 100);

  // A flipped payload byte specifically reports bad_signature.
  auto raw = base64url_decode(seg[1]);
  raw[5] = static_cast<char>(raw[5] ^ 0x01);
  CHECK(error_of(seg[0] + "." + base64url_encode(raw) + "." + seg[2], ks, "app1.corp.test", t0()) ==
        token::TokenError::bad_signature);
}

TEST_CASE("expiry boundary is exact") {
  auto keys = token::SigningKeyPair::generate("k1", t0());
  token::KeySet ks(std::span<const token::SigningKeyPair>(&keys, 1));
  auto claims = token::make_claims("alice", "app1.corp.test", t0(), {}, Employment::fte, std::string(64, 'a'), "s", 1);
  auto tok = token::mint(claims, keys);
  const auto exp = from_epoch_seconds(claims.exp);
  CHECK_NOTHROW(token::verify(tok, ks, "app1.corp.test", exp - 1s));
  CHECK(error_of(tok, ks, "app1.corp.test", exp) == token::TokenError::expired);
}

TEST_CASE("distinct failure codes") {
  auto keys = token::SigningKeyPair::generate("k1", t0());
  auto stranger = token::SigningKeyPair::generate("k9", t0());
  token::KeySet ks(std::span<const token::SigningKeyPair>(&keys, 1));
  auto claims = token::make_claims("alice", "app1.corp.test", t0(), {}, Employment::fte, std::string(64, 'a'), "s", 1);
  auto tok = token::mint(claims, keys);
  CHECK(error_of(tok, ks, "app2.corp.test", t0()) == token::TokenError::wrong_audience);
  CHECK(error_of(token::mint(claims, stranger), ks, "app1.corp.test", t0()) == token::TokenError::unknown_kid);
  CHECK(error_of("not-a-token", ks, "app1.corp.test", t0()) == token::TokenError::malformed);
  auto bad_iss = claims;
  bad_iss.iss = "someone-else";
  CHECK(error_of(token::mint(bad_iss, keys), ks, "app1.corp.test", t0()) == token::TokenError::wrong_issuer);
}

TEST_CASE("Ed25519 minting is deterministic") {
  auto keys = token::SigningKeyPair::generate("k1", t0());
  auto claims = token::make_claims("bob", "app1.corp.test", t0(), {"b", "a"}, Employment::contractor,
                                   std::string(64, 'a'), "s", 1);
  CHECK(token::mint(claims, keys) == token::mint(claims, keys));
}

TEST_CASE("published key set and rotation") {
  auto k1 = token::SigningKeyPair::generate("k1", t0());
  auto k1_pem = k1.key.to_pem();
  std::vector<token::SigningKeyPair> one;
  one.push_back(token::SigningKeyPair::from_pem("k1", k1_pem, t0()));
  auto doc = token::publish_keys(one);
  CHECK(doc == token::publish_keys(one));
  CHECK(token::KeySet::from_document(doc).size() == 1);
  CHECK_THROWS_AS(token::publish_keys({}), ValidationError);

  // Private material never appears in the document.
  auto pem_body = k1_pem.substr(k1_pem.find('\n') + 1, 40);
  CHECK(doc.find(pem_body) == std::string::npos);
  CHECK(doc.find("PRIVATE") == std::string::npos);

  token::Keyring ring(token::SigningKeyPair::from_pem("k1", k1_pem, t0()));
  auto claims = token::make_claims("alice", "app1.corp.test", t0(), {}, Employment::fte, std::string(64, 'a'), "s", 1);
  auto old_tok = ring.mint(claims);
  ring.rotate(token::SigningKeyPair::generate("k2", t0() + 1h));
  auto new_tok = ring.mint(claims);
  CHECK(old_tok != new_tok);
  auto ks = token::KeySet::from_document(ring.published());
  CHECK(ks.size() == 2);
  CHECK_NOTHROW(token::verify(old_tok, ks, "app1.corp.test", t0()));
  CHECK_NOTHROW(token::verify(new_tok, ks, "app1.corp.test", t0()));

  // A third key pushes the oldest out.
  ring.rotate(token::SigningKeyPair::generate("k3", t0() + 2h));
  auto ks3 = token::KeySet::from_document(ring.published());
  CHECK(ks3.size() == 2);
  CHECK(ks3.find("k1") == nullptr);
  CHECK(error_of(old_tok, ks3, "app1.corp.test", t0()) == token::TokenError::unknown_kid);
}
