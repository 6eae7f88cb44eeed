#include <doctest.h>

#include <filesystem>
#include <random>
#include <set>

#include <unistd.h>

#include "zta/authn.hpp"

using namespace zta;
using namespace std::chrono_literals;

namespace {

TimePoint t0() { return from_epoch_seconds(1'790'000'000); }

tls::TlsClientInfo device(const std::string& fp, const std::string& ip = "127.0.1.10") {
  tls::TlsClientInfo c;
  c.fingerprint = fp;
  c.subject_cn = "laptop";
  c.peer_ip = ip;
  return c;
}

authn::GeoDb geo() {
  authn::GeoDb g;
  g.add("127.0.1.0/24", {51.5074, -0.1278});
  g.add("127.0.2.0/24", {40.7128, -74.0060});
  return g;
}

struct FakeIdp : authn::IdpClient {
  std::set<std::string> good_codes{"code-1", "code-2", "code-3"};
  int exchanges = 0;
  authn::IdpAssertion exchange_code(const std::string& code, const std::string&) override {
    exchanges++;
    if (!good_codes.erase(code)) throw authn::IdpRejected("bad code");
    return {"alice", {"eng"}, Employment::fte, 0};
  }
  authn::IdpAssertion password_grant(const std::string& user, const std::string& pw) override {
    if (pw != user + "-pw") throw authn::IdpRejected("bad password");
    return {user, {"eng"}, Employment::fte, 0};
  }
};

const authn::IdpConfig kIdp{"http://idp.test/authorize", "http://idp.test/token", "zta-gateway", "secret"};
const std::string kRedirect = "https://app1.corp.test/.zta/callback";

}  // namespace

TEST_CASE("geo lookup uses the longest prefix") {
  auto g = authn::GeoDb::from_json(R"([{"cidr":"10.0.0.0/8","lat":1,"lon":1},{"cidr":"10.1.0.0/16","lat":51.5,"lon":-0.13}])");
  CHECK(g.lookup("10.1.2.3") == authn::GeoPoint{51.5, -0.13});
  CHECK(g.lookup("10.9.2.3") == authn::GeoPoint{1, 1});
  CHECK_FALSE(g.lookup("192.168.0.1"));
  CHECK_FALSE(g.lookup("not-an-ip"));
  CHECK_THROWS_AS(g.add("10.0.0.0/33", {}), ValidationError);
}

TEST_CASE("record_login_geo keeps order and ties") {
  authn::Session s;
  s = authn::record_login_geo(s, "127.0.1.1", geo(), t0());
  s = authn::record_login_geo(s, "8.8.8.8", geo(), t0());
  s = authn::record_login_geo(s, "127.0.2.1", geo(), t0() - 1s);
  REQUIRE(s.login_events.size() == 3);
  CHECK(s.login_events[0].source_ip == "127.0.2.1");
  CHECK(s.login_events[1].source_ip == "127.0.1.1");
  CHECK(s.login_events[2].source_ip == "8.8.8.8");
  CHECK_FALSE(s.login_events[2].geo);
}

TEST_CASE("SSO redirect carries the flow") {
  authn::SessionStore store;
  auto a = authn::initiate_sso("https://app1.corp.test/dash", device(std::string(64, 'a')), kIdp, kRedirect, store, t0());
  auto b = authn::initiate_sso("https://app1.corp.test/dash", device(std::string(64, 'a')), kIdp, kRedirect, store, t0());
  CHECK(a.state != b.state);
  auto url = http::parse_url(a.location);
  auto q = http::parse_query(url.target.substr(url.target.find('?') + 1));
  CHECK(q["client_id"] == "zta-gateway");
  CHECK(q["redirect_uri"] == kRedirect);
  CHECK(q["state"] == a.state);
  CHECK(q["response_type"] == "code");
  CHECK(store.flow_count() == 2);

  authn::SessionStore tiny(1);
  authn::initiate_sso("x", device("f"), kIdp, kRedirect, tiny, t0());
  CHECK_THROWS_AS(authn::initiate_sso("x", device("f"), kIdp, kRedirect, tiny, t0()), authn::StoreFull);
}

TEST_CASE("callback success, replay, expiry, device binding and IdP failure") {
  authn::SessionStore store;
  FakeIdp idp;
  const auto fp = std::string(64, 'a');
  auto code_of = [&](auto fn) {
    try {
      fn();
    } catch (const authn::CallbackFailed& e) {
      return std::string(authn::to_string(e.code()));
    }
    return std::string("ok");
  };

  auto flow = authn::initiate_sso("https://app1.corp.test/dash", device(fp), kIdp, kRedirect, store, t0());
  auto r = authn::handle_callback("code-1", flow.state, device(fp), idp, kRedirect, store, geo(), t0() + 5s);
  CHECK(r.location == "https://app1.corp.test/dash");
  CHECK(r.session.user_id == "alice");
  CHECK(r.session.groups == std::set<std::string>{"eng"});
  CHECK(r.session.device_fingerprint == fp);
  CHECK(r.session.created_at < r.session.expires_at);
  CHECK(r.session.login_events.back().geo);
  CHECK(r.set_cookie.find("HttpOnly") != std::string::npos);
  CHECK(r.set_cookie.find("Secure") != std::string::npos);
  CHECK(r.set_cookie.find("SameSite=Lax") != std::string::npos);
  CHECK(r.set_cookie.find("Path=/") != std::string::npos);
  // Cookie value is only the opaque id.
  auto value = r.set_cookie.substr(r.set_cookie.find('=') + 1, r.set_cookie.find(';') - r.set_cookie.find('=') - 1);
  CHECK(value == r.session.session_id);
  CHECK(value.find("alice") == std::string::npos);
  CHECK(value.size() <= 64);

  CHECK(code_of([&] { authn::handle_callback("code-2", flow.state, device(fp), idp, kRedirect, store, geo(), t0()); }) ==
        "unknown_state");

  auto stale = authn::initiate_sso("u", device(fp), kIdp, kRedirect, store, t0());
  CHECK(code_of([&] {
          authn::handle_callback("code-2", stale.state, device(fp), idp, kRedirect, store, geo(), t0() + 301s);
        }) == "state_expired");

  auto other = authn::initiate_sso("u", device(fp), kIdp, kRedirect, store, t0());
  CHECK(code_of([&] {
          authn::handle_callback("code-2", other.state, device(std::string(64, 'b')), idp, kRedirect, store, geo(), t0());
        }) == "device_mismatch");

  const auto before = store.session_count();
  auto rejected = authn::initiate_sso("u", device(fp), kIdp, kRedirect, store, t0());
  CHECK(code_of([&] {
          authn::handle_callback("bogus", rejected.state, device(fp), idp, kRedirect, store, geo(), t0());
        }) == "idp_rejected_code");
  CHECK(store.session_count() == before);
}

TEST_CASE("check_session rules") {
  authn::SessionStore store;
  const auto fp = std::string(64, 'a');
  auto s = authn::create_session({"alice", {"eng"}, Employment::fte, 0}, device(fp), store, geo(), t0());
  http::Headers h;
  h.add("Cookie", "theme=dark; zta_session=" + s.session_id);

  CHECK(authn::check_session(h, store, device(fp), t0() + 1h).status == authn::SessionStatus::ok);
  CHECK(authn::check_session(h, store, device(std::string(64, 'b')), t0()).status ==
        authn::SessionStatus::device_mismatch);
  CHECK_FALSE(authn::check_session(h, store, device(fp), s.expires_at).session);
  CHECK(authn::check_session(http::Headers{}, store, device(fp), t0()).status == authn::SessionStatus::no_session);
  CHECK(authn::check_session_id("nope", store, device(fp), t0()).status == authn::SessionStatus::no_session);
}

TEST_CASE("sessions never resolve from a foreign device: 20 sessions x foreign fingerprints") {
  std::mt19937_64 rng(5);
  authn::SessionStore store;
  std::vector<authn::Session> sessions;
  for (int i = 0; i < 20; i++) {
    auto fp = sha256_hex("device-" + std::to_string(i));
    sessions.push_back(authn::create_session({"user" + std::to_string(i), {}, Employment::fte, 0}, device(fp), store,
                                             geo(), t0()));
  }
  int hits = 0;
  for (const auto& s : sessions) {
    for (int k = 0; k < 20; k++) {
      auto foreign = sha256_hex("foreign-" + std::to_string(rng()));
      if (authn::check_session_id(s.session_id, store, device(foreign), t0()).session) hits++;
    }
    for (const auto& other : sessions) {
      if (&other == &s) continue;
      if (authn::check_session_id(s.session_id, store, device(other.device_fingerprint), t0()).session) hits++;
    }
    CHECK(authn::check_session_id(s.session_id, store, device(s.device_fingerprint), t0()).session);
  }
  CHECK(hits == 0);
}

TEST_CASE("previous login seeds the next session's history") {
  authn::SessionStore store;
  const auto fp = std::string(64, 'a');
  authn::create_session({"alice", {}, Employment::fte, 0}, device(fp, "127.0.1.10"), store, geo(), t0());
  auto second = authn::create_session({"alice", {}, Employment::fte, 0}, device(fp, "127.0.2.10"), store, geo(),
                                      t0() + 10min);
  REQUIRE(second.login_events.size() == 2);
  CHECK(second.login_events[0].source_ip == "127.0.1.10");
  CHECK(second.login_events[1].source_ip == "127.0.2.10");
  auto bob = authn::create_session({"bob", {}, Employment::fte, 0}, device(fp), store, geo(), t0() + 10min);
  CHECK(bob.login_events.size() == 1);
}

TEST_CASE("session journal survives a restart") {
  auto path = (std::filesystem::temp_directory_path() / ("zta-journal-" + std::to_string(::getpid()))).string();
  std::filesystem::remove(path);
  std::string id;
  {
    authn::SessionStore store(100, path);
    id = authn::create_session({"alice", {"eng"}, Employment::fte, 0}, device(std::string(64, 'a')), store, geo(), t0())
             .session_id;
  }
  authn::SessionStore reloaded(100, path);
  auto s = reloaded.find_session(id);
  REQUIRE(s);
  CHECK(s->user_id == "alice");
  CHECK(s->groups == std::set<std::string>{"eng"});
  std::filesystem::remove(path);
}
