#include <doctest.h>

#include <cmath>
#include <atomic>
#include <random>
#include <thread>

#include "oracles/decision_ref.hpp"
#include "oracles/geo_ref.hpp"
#include "zta/policy.hpp"

using namespace zta;
using namespace std::chrono_literals;

namespace {

TimePoint t0() { return from_epoch_seconds(1'790'000'000); }

const authn::GeoPoint kLondon{51.5074, -0.1278};
const authn::GeoPoint kNyc{40.7128, -74.0060};

policy::PolicySnapshot base_snapshot() {
  policy::PolicySnapshot s;
  s.version = 5;
  s.generated_at = t0();
  policy::RoutePolicy r;
  r.host = "known.corp.test";
  r.upstream = "127.0.0.1:9";
  r.required_groups = {"eng"};
  r.allowed_employment = {Employment::fte};
  r.session_max_age_s = 3600;
  s.routes[r.host] = r;
  return s;
}

authn::Session session_with(std::set<std::string> groups, Employment emp, TimePoint created) {
  authn::Session s;
  s.session_id = "sid";
  s.user_id = "u";
  s.groups = std::move(groups);
  s.employment = emp;
  s.device_fingerprint = std::string(64, 'a');
  s.created_at = created;
  s.expires_at = created + 8h;
  s.login_events.push_back({created, "127.0.1.10", kLondon});
  return s;
}

tls::TlsClientInfo client() {
  tls::TlsClientInfo c;
  c.fingerprint = std::string(64, 'a');
  c.subject_cn = "laptop-001";
  return c;
}

/// Decision for the named conditions; each flag makes one check fail.
std::string reason_for(std::set<std::string> fail) {
  auto snap = base_snapshot();
  auto now = t0();
  std::string host = "known.corp.test";
  std::set<std::string> groups{"eng"};
  Employment emp = Employment::fte;
  TimePoint created = now - 60s;
  if (fail.count("kill_switch")) snap.kill_switch = true;
  if (fail.count("revoked_cert")) snap.revoked_fingerprints.insert(std::string(64, 'a'));
  if (fail.count("unknown_host")) host = "unknown.corp.test";
  if (fail.count("employment_denied")) emp = Employment::contractor;
  if (fail.count("group_denied")) groups = {"sre"};
  if (fail.count("session_too_old")) created = now - 2h;
  auto s = session_with(groups, emp, created);
  if (fail.count("impossible_travel")) s.login_events.push_back({created + 60s, "127.0.2.10", kNyc});
  auto d = policy::evaluate(snap, host, s, client(), now);
  CHECK(d.policy_version == 5);
  CHECK((d.outcome == policy::Outcome::allow) == (d.reason == policy::Reason::ok));
  return std::string(policy::to_string(d.reason));
}

}  // namespace

TEST_CASE("evaluate matches the brute-force table on all 128 cases") {
  int matched = 0;
  for (const auto& c : oracle::all_cases()) {
    auto snap = base_snapshot();
    snap.kill_switch = c.kill_switch;
    if (c.revoked) snap.revoked_fingerprints.insert(std::string(64, 'a'));
    std::set<std::string> groups;
    if (c.has_eng) groups.insert("eng");
    if (c.has_sre) groups.insert("sre");
    auto s = session_with(groups, c.contractor ? Employment::contractor : Employment::fte,
                          c.too_old ? t0() - 2h : t0() - 60s);
    auto d = policy::evaluate(snap, c.known_host ? "known.corp.test" : "other.corp.test", s, client(), t0());
    if (std::string(policy::to_string(d.reason)) == oracle::expected_reason(c)) matched++;
  }
  CHECK(matched == 128);
}

TEST_CASE("first failure wins for every pair of conditions") {
  const std::vector<std::string> order{"kill_switch",     "revoked_cert",  "unknown_host",     "employment_denied",
                                       "group_denied",    "session_too_old", "impossible_travel"};
  CHECK(reason_for({}) == "ok");
  for (std::size_t i = 0; i < order.size(); i++) {
    CHECK(reason_for({order[i]}) == order[i]);
    for (std::size_t j = i + 1; j < order.size(); j++) {
      CAPTURE(order[i]);
      CAPTURE(order[j]);
      CHECK(reason_for({order[i], order[j]}) == order[i]);
    }
  }
}

TEST_CASE("group semantics are ANY-of and empty means any user") {
  auto snap = base_snapshot();
  snap.routes["known.corp.test"].required_groups = {"eng", "sre"};
  auto s = session_with({"eng"}, Employment::fte, t0() - 60s);
  CHECK(policy::evaluate(snap, "known.corp.test", s, client(), t0()).allowed());
  snap.routes["known.corp.test"].required_groups = {};
  auto nobody = session_with({}, Employment::fte, t0() - 60s);
  CHECK(policy::evaluate(snap, "known.corp.test", nobody, client(), t0()).allowed());
}

TEST_CASE("session age boundary") {
  auto snap = base_snapshot();
  auto at_limit = session_with({"eng"}, Employment::fte, t0() - 3600s);
  CHECK(policy::evaluate(snap, "known.corp.test", at_limit, client(), t0()).allowed());
  auto past = session_with({"eng"}, Employment::fte, t0() - 3601s);
  CHECK(policy::evaluate(snap, "known.corp.test", past, client(), t0()).reason == policy::Reason::session_too_old);
}

TEST_CASE("haversine against the independent oracle") {
  const double d = policy::haversine_km(kLondon, kNyc);
  CHECK(std::abs(d - oracle::kLondonNycKm) <= 10.0);
  CHECK(std::abs(d - oracle::great_circle_km(kLondon.lat, kLondon.lon, kNyc.lat, kNyc.lon)) <= 10.0);
  CHECK(std::abs(policy::haversine_km({0, 0}, {0, 180}) - oracle::kAntipodalEquatorKm) <= 0.1);
  CHECK(policy::haversine_km(kLondon, kLondon) == 0.0);
  CHECK(std::abs(d / (10.0 / 60.0) - oracle::kLondonNyc10MinKmh) <= 60.0);
  CHECK(std::abs(d / 8.0 - oracle::kLondonNyc8HoursKmh) <= 2.0);
  CHECK_THROWS_AS(policy::haversine_km({91, 0}, {0, 0}), ValidationError);
  CHECK_THROWS_AS(policy::haversine_km({0, 0}, {0, 181}), ValidationError);
}

TEST_CASE("haversine symmetry and triangle inequality over 100 random triples") {
  std::mt19937_64 rng(314);
  std::uniform_real_distribution<double> lat(-90, 90), lon(-180, 180);
  for (int i = 0; i < 100; i++) {
    authn::GeoPoint a{lat(rng), lon(rng)}, b{lat(rng), lon(rng)}, c{lat(rng), lon(rng)};
    const double ab = policy::haversine_km(a, b), ba = policy::haversine_km(b, a);
    CHECK(std::abs(ab - ba) <= 1e-9);
    CHECK(policy::haversine_km(a, c) <= ab + policy::haversine_km(b, c) + 1e-6);
    CHECK(std::abs(ab - oracle::great_circle_km(a.lat, a.lon, b.lat, b.lon)) <= 1e-3);
  }
}

TEST_CASE("impossible travel") {
  auto s = session_with({"eng"}, Employment::fte, t0());
  CHECK_FALSE(policy::impossible_travel(s, 900));  // single event

  auto quick = s;
  quick.login_events.push_back({t0() + 10min, "127.0.2.10", kNyc});
  CHECK(policy::impossible_travel(quick, 900));

  auto slow = s;
  slow.login_events.push_back({t0() + 8h, "127.0.2.10", kNyc});
  CHECK_FALSE(policy::impossible_travel(slow, 900));

  // UNKNOWN in between is skipped and the pair spans it.
  auto gap = s;
  gap.login_events.push_back({t0() + 5min, "10.0.0.1", std::nullopt});
  gap.login_events.push_back({t0() + 10min, "127.0.2.10", kNyc});
  CHECK(policy::impossible_travel(gap, 900));

  // UNKNOWN alone never fires.
  auto unknown = s;
  unknown.login_events = {{t0(), "a", std::nullopt}, {t0() + 1s, "b", std::nullopt}};
  CHECK_FALSE(policy::impossible_travel(unknown, 900));

  // Same instant: the one-second floor keeps the speed finite and huge.
  auto same = s;
  same.login_events.push_back({t0(), "127.0.2.10", kNyc});
  CHECK(policy::impossible_travel(same, 900));
}

TEST_CASE("snapshot codec and route validation") {
  auto snap = base_snapshot();
  snap.revoked_fingerprints = {std::string(64, 'c'), std::string(64, 'b')};
  auto text = policy::encode_snapshot(snap);
  CHECK(policy::decode_snapshot(text) == snap);
  CHECK(policy::encode_snapshot(policy::decode_snapshot(text)) == text);

  policy::RoutePolicy bad;
  bad.host = "Bad_Host";
  bad.upstream = "nope";
  bad.allowed_employment = {};
  bad.session_max_age_s = 0;
  auto errors = policy::validate_route(bad);
  CHECK(errors.count("host"));
  CHECK(errors.count("upstream"));
  CHECK(errors.count("allowed_employment"));
  CHECK(errors.count("session_max_age_s"));
  CHECK(policy::validate_route(snap.routes.begin()->second).empty());
}

TEST_CASE("snapshot holder only moves forward") {
  policy::SnapshotHolder h;
  auto make = [](std::int64_t v) {
    auto s = std::make_shared<policy::PolicySnapshot>();
    s->version = v;
    return std::shared_ptr<const policy::PolicySnapshot>(s);
  };
  CHECK(h.install(make(3)));
  CHECK_FALSE(h.install(make(3)));
  CHECK_FALSE(h.install(make(2)));
  CHECK(h.install(make(4)));
  CHECK(h.current()->version == 4);
}

namespace {

struct FakeControlPlane : policy::ControlPlaneClient {
  std::optional<policy::PolicySnapshot> served;
  bool reachable = true;
  std::optional<std::int64_t> last_etag;
  policy::FetchResult fetch_policy(std::optional<std::int64_t> if_none_match) override {
    last_etag = if_none_match;
    policy::FetchResult r;
    if (!reachable) return r;
    if (if_none_match && served && *if_none_match == served->version) {
      r.status = policy::FetchResult::Status::not_modified;
      return r;
    }
    r.status = policy::FetchResult::Status::ok;
    r.snapshot = served;
    return r;
  }
};

}  // namespace

TEST_CASE("poll_policy paths") {
  FakeControlPlane cp;
  policy::SnapshotHolder holder;
  cp.served = base_snapshot();
  cp.served->version = 7;
  CHECK(policy::poll_policy(cp, holder) == policy::PollResult::installed);
  CHECK(policy::poll_policy(cp, holder) == policy::PollResult::unchanged);
  CHECK(cp.last_etag == 7);
  cp.served->version = 8;
  CHECK(policy::poll_policy(cp, holder) == policy::PollResult::installed);
  CHECK(holder.current()->version == 8);
  cp.reachable = false;
  CHECK(policy::poll_policy(cp, holder) == policy::PollResult::unreachable);
  CHECK(holder.current()->version == 8);
  cp.reachable = true;
  cp.served->version = 6;  // replayed older snapshot
  CHECK(policy::poll_policy(cp, holder) == policy::PollResult::rejected);
  CHECK(holder.current()->version == 8);
}

TEST_CASE("staleness gate boundary") {
  auto snap = base_snapshot();
  snap.max_staleness_s = 300;
  const auto now = std::chrono::steady_clock::now();
  CHECK(policy::staleness_gate(&snap, now - 299s, now) == policy::Freshness::fresh);
  CHECK(policy::staleness_gate(&snap, now - 300s, now) == policy::Freshness::fresh);
  CHECK(policy::staleness_gate(&snap, now - 301s, now) == policy::Freshness::stale_fail_closed);
  CHECK(policy::staleness_gate(nullptr, now, now) == policy::Freshness::stale_fail_closed);
  CHECK(policy::staleness_gate(&snap, std::nullopt, now) == policy::Freshness::stale_fail_closed);
}

TEST_CASE("poller records freshness and anomalies") {
  auto cp = std::make_shared<FakeControlPlane>();
  cp->served = base_snapshot();
  policy::SnapshotHolder holder;
  policy::PolicyPoller poller(cp, holder, 20ms);
  CHECK(poller.freshness() == policy::Freshness::stale_fail_closed);
  CHECK(poller.poll_once() == policy::PollResult::installed);
  CHECK(poller.freshness() == policy::Freshness::fresh);
  cp->served->version = 1;
  CHECK(poller.poll_once() == policy::PollResult::rejected);
  CHECK(poller.anomalies() == 1);

  std::atomic<int> ticks{0};
  poller.start([&](policy::PollResult) { ticks++; });
  std::this_thread::sleep_for(200ms);
  poller.stop();
  CHECK(ticks.load() >= 3);
}
